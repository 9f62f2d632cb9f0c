//! Encoder `f`, Gaussian projector `g` and the subspace mask bank.
//!
//! The encoder is three valid-padding 3×3 stride-2 convolutions with ReLU;
//! its representation `y` is the spatial average of the last feature map.
//! The projector runs `y` through a two-layer trunk; each head then
//! concatenates the trunk output with its own GeM pooling of the encoder map
//! (separate learnable exponents) and applies a linear layer. The variance
//! head ends in `ReLU(·) + ε_σ`.

mod mask;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MastError, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::{Element, Graph, ReduceKind, Tensor, Var};

pub use mask::{
    mask_embed, GaussianEmbedding, MaskBank, BLOCK_PRIOR_MEAN, BLOCK_PRIOR_STD, NOISE_MEAN, NOISE_VARIANCE,
};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const GEM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimensionality `d`.
    pub embed_dim: usize,
    /// Trunk width.
    pub hidden: usize,
    /// Output channels of the three convolutions.
    pub channels: [usize; 3],
    /// Variance floor `ε_σ`.
    pub eps_sigma: f64,
    /// Initial GeM exponent for both heads.
    pub gem_init: f64,
    /// Initial per-dimension variance; `None` uses `embed_dim`.
    pub var_init: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden: 256,
            channels: [16, 32, 64],
            eps_sigma: 1e-6,
            gem_init: 3.0,
            var_init: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(MastError::config("model.embed_dim", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(MastError::config("model.hidden", "must be positive"));
        }
        if self.channels.contains(&0) {
            return Err(MastError::config("model.channels", "must be positive"));
        }
        if self.eps_sigma <= 0.0 {
            return Err(MastError::config("model.eps_sigma", "must be positive"));
        }
        if self.gem_init < 1.0 {
            return Err(MastError::config("model.gem_init", "GeM exponent must be >= 1"));
        }
        if let Some(v) = self.var_init {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MastError::config("model.var_init", "must be positive"));
            }
        }
        Ok(())
    }

    /// Initial variance of every embedding dimension.
    pub fn initial_variance(&self) -> f64 {
        self.var_init.unwrap_or(self.embed_dim as f64)
    }

    /// Dimensionality of the representation `y`.
    pub fn repr_dim(&self) -> usize {
        self.channels[2]
    }
}

/// Smallest square input the encoder accepts.
pub fn min_input_extent() -> usize {
    let mut n = 1;
    for _ in 0..3 {
        n = (n - 1) * STRIDE + KERNEL;
    }
    n
}

fn conv_out(n: usize) -> Option<usize> {
    (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
}

/// Spatial extents after each convolution for an `h × w` input.
pub fn feature_extents(h: usize, w: usize) -> Result<[(usize, usize); 3]> {
    let mut out = [(0, 0); 3];
    let (mut ch, mut cw) = (h, w);
    for slot in &mut out {
        match (conv_out(ch), conv_out(cw)) {
            (Some(a), Some(b)) => {
                *slot = (a, b);
                ch = a;
                cw = b;
            }
            _ => {
                return Err(MastError::dim(format!(
                    "{h}x{w} image is too small for three stride-2 convolutions (need at least {}x{})",
                    min_input_extent(),
                    min_input_extent()
                )))
            }
        }
    }
    Ok(out)
}

/// Parameters that receive weight decay.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("masks.") || name.starts_with("gem."))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    pub masks: MaskBank<T>,
}

/// Graph handles for every parameter of a [`Model`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
    pub masks: Var,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

// indices into `Model::params`
const CONV_W: [usize; 3] = [0, 2, 4];
const CONV_B: [usize; 3] = [1, 3, 5];
const TRUNK_W: [usize; 2] = [6, 8];
const TRUNK_B: [usize; 2] = [7, 9];
const MEAN_W: usize = 10;
const MEAN_B: usize = 11;
const VAR_W: usize = 12;
const VAR_B: usize = 13;
const GEM_MEAN: usize = 14;
const GEM_VAR: usize = 15;

fn normal_tensor<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::f(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("consistent").with_grad()
}

/// Per-sample model outputs without gradient tracking.
#[derive(Clone, Debug)]
pub struct Embeddings<T> {
    /// Representations `y`, `[n, repr_dim]`.
    pub repr: Tensor<T>,
    /// Means `μ`, `[n, d]`.
    pub mean: Tensor<T>,
    /// Variances `σ²`, `[n, d]`.
    pub var: Tensor<T>,
}

impl<T: Element> Embeddings<T> {
    pub fn len(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gaussian(&self, i: usize) -> GaussianEmbedding<T> {
        let d = self.mean.shape()[1];
        GaussianEmbedding {
            mean: self.mean.data()[i * d..(i + 1) * d].to_vec(),
            var: self.var.data()[i * d..(i + 1) * d].to_vec(),
        }
    }

    pub fn repr_row(&self, i: usize) -> &[T] {
        let r = self.repr.shape()[1];
        &self.repr.data()[i * r..(i + 1) * r]
    }
}

impl<T: Element> Model<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: ModelConfig, num_masks: usize) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.channels;
        let (h, d) = (config.hidden, config.embed_dim);
        let mut params = Vec::new();
        let mut cin = CHANNELS;
        for (i, cout) in [c1, c2, c3].into_iter().enumerate() {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            params.push((
                format!("encoder.conv{}.weight", i + 1),
                normal_tensor(rng, vec![cout, cin, KERNEL, KERNEL], (2.0 / fan_in).sqrt()),
            ));
            params.push((format!("encoder.conv{}.bias", i + 1), Tensor::zeros(vec![cout]).with_grad()));
            cin = cout;
        }
        let mut fan = c3;
        for i in 0..2 {
            params.push((
                format!("projector.trunk{}.weight", i + 1),
                normal_tensor(rng, vec![fan, h], (2.0 / fan as f64).sqrt()),
            ));
            params.push((format!("projector.trunk{}.bias", i + 1), Tensor::zeros(vec![h]).with_grad()));
            fan = h;
        }
        let head_in = h + c3;
        params.push((
            "projector.mean.weight".into(),
            normal_tensor(rng, vec![head_in, d], (1.0 / head_in as f64).sqrt()),
        ));
        params.push(("projector.mean.bias".into(), Tensor::zeros(vec![d]).with_grad()));
        params.push((
            "projector.var.weight".into(),
            normal_tensor(rng, vec![head_in, d], 0.1 * (1.0 / head_in as f64).sqrt()),
        ));
        params.push((
            "projector.var.bias".into(),
            Tensor::full(vec![d], T::f(config.initial_variance())).with_grad(),
        ));
        params.push(("gem.mean.p".into(), Tensor::scalar(T::f(config.gem_init)).with_grad()));
        params.push(("gem.var.p".into(), Tensor::scalar(T::f(config.gem_init)).with_grad()));
        let masks = MaskBank::init(rng, d, num_masks)?;
        Ok(Self { config, params, masks })
    }

    /// Number of mask columns `K`.
    pub fn num_masks(&self) -> usize {
        self.masks.k()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// All parameters, including `masks.u`, in a fixed order.
    pub fn named_params(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut out: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        out.push(("masks.u", &self.masks.u));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut out: Vec<(&str, &mut Tensor<T>)> =
            self.params.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
        out.push(("masks.u", &mut self.masks.u));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Replaces a parameter's values; shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .named_params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MastError::Format(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(MastError::dim(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        let flag = slot.requires_grad;
        *slot = value;
        slot.requires_grad = flag;
        Ok(())
    }

    /// Replaces the mask bank (number of columns may change).
    pub fn set_masks(&mut self, masks: MaskBank<T>) -> Result<()> {
        if masks.dim() != self.config.embed_dim {
            return Err(MastError::dim("mask bank dimension does not match the embedding"));
        }
        self.masks = masks;
        Ok(())
    }

    /// GeM exponents `(p_μ, p_Σ)`.
    pub fn gem_exponents(&self) -> (T, T) {
        (
            self.params[GEM_MEAN].1.data()[0],
            self.params[GEM_VAR].1.data()[0],
        )
    }

    /// Keeps GeM exponents in their feasible range `p >= 1`.
    pub fn project_constraints(&mut self) {
        for idx in [GEM_MEAN, GEM_VAR] {
            let v = &mut self.params[idx].1.data_mut()[0];
            if *v < T::one() {
                *v = T::one();
            }
        }
    }

    /// Records every parameter on `g`: trainable when `trainable`, constant otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundModel> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (_, t) in &self.params {
            vars.push(if trainable { g.param(t)? } else { g.constant(t.clone())? });
        }
        let masks = if trainable {
            g.param(&self.masks.u)?
        } else {
            g.constant(self.masks.u.clone())?
        };
        Ok(BoundModel { vars, masks })
    }

    /// `f`: `[n, 3, h, w]` → (feature map `[n, c, h', w']`, representation `[n, c]`).
    pub fn encode(&self, g: &mut Graph<T>, b: &BoundModel, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != CHANNELS {
            return Err(MastError::dim(format!("encoder expects [n,3,h,w], got {shape:?}")));
        }
        feature_extents(shape[2], shape[3])?;
        let mut h = x;
        for i in 0..3 {
            let c = g.conv2d(h, b.vars[CONV_W[i]], Some(b.vars[CONV_B[i]]), STRIDE)?;
            h = g.relu(c)?;
        }
        let y = g.reduce(ReduceKind::Mean, h, &[2, 3])?;
        Ok((h, y))
    }

    /// `g`: (feature map, representation) → (μ `[n, d]`, σ² `[n, d]`).
    pub fn project(&self, g: &mut Graph<T>, b: &BoundModel, map: Var, y: Var) -> Result<(Var, Var)> {
        let n = g.shape(y)[0];
        let mut t = y;
        for i in 0..2 {
            let z = g.matmul(t, b.vars[TRUNK_W[i]])?;
            let bias = g.expand_rows(b.vars[TRUNK_B[i]], n)?;
            let z = g.add(z, bias)?;
            t = g.relu(z)?;
        }
        let pooled_mean = g.gem_pool(map, b.vars[GEM_MEAN], GEM_EPS)?;
        let pooled_var = g.gem_pool(map, b.vars[GEM_VAR], GEM_EPS)?;

        let mean_in = g.concat_columns(t, pooled_mean)?;
        let mu = g.matmul(mean_in, b.vars[MEAN_W])?;
        let mb = g.expand_rows(b.vars[MEAN_B], n)?;
        let mu = g.add(mu, mb)?;

        let var_in = g.concat_columns(t, pooled_var)?;
        let s = g.matmul(var_in, b.vars[VAR_W])?;
        let sb = g.expand_rows(b.vars[VAR_B], n)?;
        let s = g.add(s, sb)?;
        let s = g.relu(s)?;
        let var = g.add_scalar(s, self.config.eps_sigma)?;
        Ok((mu, var))
    }

    /// `M = max(0, U)` on the graph.
    pub fn mask_var(&self, g: &mut Graph<T>, b: &BoundModel) -> Result<Var> {
        g.relu(b.masks)
    }

    /// Representations only (frozen-encoder probes).
    pub fn represent(&self, images: &[Image]) -> Result<Tensor<T>> {
        let mut rows = Vec::new();
        let mut width = self.config.repr_dim();
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false)?;
            let x = g.constant(images_to_tensor(chunk)?)?;
            let (_, y) = self.encode(&mut g, &b, x)?;
            width = g.shape(y)[1];
            rows.extend_from_slice(g.value(y));
        }
        Tensor::new(vec![images.len(), width], rows)
    }

    /// Full forward pass without gradient tracking.
    pub fn embed(&self, images: &[Image]) -> Result<Embeddings<T>> {
        let d = self.config.embed_dim;
        let mut repr = Vec::new();
        let mut mean = Vec::new();
        let mut var = Vec::new();
        let mut rdim = self.config.repr_dim();
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false)?;
            let x = g.constant(images_to_tensor(chunk)?)?;
            let (map, y) = self.encode(&mut g, &b, x)?;
            let (mu, s) = self.project(&mut g, &b, map, y)?;
            rdim = g.shape(y)[1];
            repr.extend_from_slice(g.value(y));
            mean.extend_from_slice(g.value(mu));
            var.extend_from_slice(g.value(s));
        }
        let n = images.len();
        Ok(Embeddings {
            repr: Tensor::new(vec![n, rdim], repr)?,
            mean: Tensor::new(vec![n, d], mean)?,
            var: Tensor::new(vec![n, d], var)?,
        })
    }
}

const EVAL_CHUNK: usize = 128;

/// Stacks equally sized images into `[n, 3, h, w]`.
pub fn images_to_tensor<T: Element>(images: &[Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(MastError::contract("empty image batch"));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(MastError::dim("images in a batch must share extents"));
        }
        data.extend(img.data().iter().map(|&v| T::f(v as f64)));
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden: 6,
            channels: [2, 3, 4],
            ..ModelConfig::default()
        }
    }

    fn random_images(seed: u64, n: usize, side: usize) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::new(side, side, (0..3 * side * side).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn extents_for_32_pixel_input() {
        assert_eq!(feature_extents(32, 32).unwrap(), [(15, 15), (7, 7), (3, 3)]);
        assert_eq!(min_input_extent(), 15);
        assert!(feature_extents(15, 15).is_ok());
        assert!(matches!(feature_extents(8, 8), Err(MastError::Dimension(_))));
    }

    #[test]
    fn zero_image_with_zero_biases_has_zero_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::<f64>::new(&mut rng, small_config(), 2).unwrap();
        let img = Image::filled(16, 16, [0.0; 3]);
        let y = model.represent(&[img]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_images_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::new(&mut rng, small_config(), 2).unwrap();
        let imgs = random_images(2, 1, 16);
        let e = model.embed(&[imgs[0].clone(), imgs[0].clone()]).unwrap();
        assert_eq!(e.gaussian(0), e.gaussian(1));
        assert_eq!(e.repr_row(0), e.repr_row(1));
    }

    #[test]
    fn variances_respect_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::<f64>::new(&mut rng, small_config(), 2).unwrap();
        // push the variance head strongly negative so the floor is active
        let bias = Tensor::full(vec![8], -5.0);
        model.set_param("projector.var.bias", bias).unwrap();
        let e = model.embed(&random_images(4, 64, 16)).unwrap();
        assert!(e.var.data().iter().all(|v| *v >= 1e-6));
        assert!(e.var.data().iter().any(|v| *v == 1e-6));
    }

    #[test]
    fn representation_ignores_masks_and_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::new(&mut rng, small_config(), 2).unwrap();
        let imgs = random_images(6, 3, 16);
        let before = model.represent(&imgs).unwrap();
        let mut other = model.clone();
        other.set_masks(MaskBank::init(&mut rng, 8, 4).unwrap()).unwrap();
        other
            .set_param("projector.mean.weight", Tensor::zeros(vec![6 + 4, 8]))
            .unwrap();
        assert_eq!(other.represent(&imgs).unwrap(), before);
    }

    #[test]
    fn gem_pooling_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(0.01..2.0)).collect();
        let map = Tensor::new(vec![2, 3, 4, 4], vals.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(map).unwrap();
        let p1 = g.scalar(1.0).unwrap();
        let gem1 = g.gem_pool(x, p1, 1e-6).unwrap();
        let avg = g.reduce(ReduceKind::Mean, x, &[2, 3]).unwrap();
        for (a, b) in g.value(gem1).iter().zip(g.value(avg)) {
            assert!((a - b).abs() < 1e-6);
        }
        let p64 = g.scalar(64.0).unwrap();
        let gem64 = g.gem_pool(x, p64, 1e-6).unwrap();
        for (plane, pooled) in vals.chunks(16).zip(g.value(gem64)) {
            let max = plane.iter().cloned().fold(f64::MIN, f64::max);
            assert!((pooled - max).abs() / max < 0.05);
        }
    }

    #[test]
    fn gem_exponents_start_at_three_and_stay_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::<f32>::new(&mut rng, small_config(), 2).unwrap();
        assert_eq!(model.gem_exponents(), (3.0, 3.0));
        model.set_param("gem.mean.p", Tensor::scalar(0.2)).unwrap();
        model.project_constraints();
        assert_eq!(model.gem_exponents().0, 1.0);
    }

    #[test]
    fn weight_decay_exclusions() {
        assert!(!decays("masks.u"));
        assert!(!decays("gem.var.p"));
        assert!(decays("encoder.conv1.weight"));
    }
}
