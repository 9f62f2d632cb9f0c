//! Central finite-difference checks of every graph primitive and of the full
//! training objective, in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{MastError, Result};
use crate::image::{Image, CHANNELS};
use crate::loss::{total_loss, LossCoefficients, ViewEmbeddings};
use crate::model::{images_to_tensor, Model, ModelConfig};
use crate::tensor::{Graph, ReduceKind, Tensor, Var};

/// Absolute error always accepted, whatever the magnitude.
pub const ABS_TOL: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const PRIMITIVE_STEP: f64 = 1e-5;
pub const LOSS_STEP: f64 = 1e-4;

/// Times the step is quartered when a piecewise primitive switches branch
/// inside the difference stencil.
const MAX_REFINEMENTS: usize = 6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, ABS_TOL/tol)`.
    pub max_error: f64,
    pub tolerance: f64,
    /// Entries compared.
    pub entries: usize,
    /// Entries compared with a reduced step because a kink lay within the
    /// nominal stencil.
    pub refined: usize,
    /// Entries left unverified because no reduced step avoided the kink.
    pub unresolved: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    /// Two identical backward passes gave bit-identical gradients.
    pub deterministic: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.deterministic && self.checks.iter().all(|c| c.passed)
    }
}

/// One evaluation of a checked function.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    /// Gradient for every input, flattened.
    pub grads: Vec<Vec<f64>>,
    /// See [`Graph::branch_pattern`].
    pub pattern: Vec<bool>,
}

/// Compares `run`'s analytic gradients against central differences of its
/// value, extrapolated from steps `step` and `step / 2`. The nominal step is reduced for an entry only when the branch
/// pattern shows the stencil straddles a kink.
pub fn compare<F>(name: &str, inputs: &[Tensor<f64>], run: F, step: f64, tol: f64) -> Result<CheckResult>
where
    F: Fn(&[Tensor<f64>]) -> Result<Evaluation>,
{
    let base = run(inputs)?;
    if base.grads.len() != inputs.len() {
        return Err(MastError::contract("one gradient per input expected"));
    }
    let floor = ABS_TOL / tol;
    let mut worst = 0.0f64;
    let (mut entries, mut refined, mut unresolved) = (0, 0, 0);
    let mut probe = inputs.to_vec();
    for (i, grad) in base.grads.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut h = step;
            let mut numeric = None;
            for attempt in 0..=MAX_REFINEMENTS {
                let mut diffs = [0.0; 2];
                let mut smooth = true;
                for (slot, hh) in diffs.iter_mut().zip([h, h / 2.0]) {
                    probe[i].data_mut()[j] = orig + hh;
                    let up = run(&probe)?;
                    probe[i].data_mut()[j] = orig - hh;
                    let down = run(&probe)?;
                    smooth &= up.pattern == base.pattern && down.pattern == base.pattern;
                    *slot = (up.value - down.value) / (2.0 * hh);
                }
                if smooth {
                    // Richardson extrapolation cancels the h² truncation term
                    numeric = Some((4.0 * diffs[1] - diffs[0]) / 3.0);
                    if attempt > 0 {
                        refined += 1;
                    }
                    break;
                }
                h /= 4.0;
            }
            probe[i].data_mut()[j] = orig;
            let Some(numeric) = numeric else {
                unresolved += 1;
                continue;
            };
            let a = grad[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = if err.is_finite() { worst.max(err) } else { f64::INFINITY };
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_error: worst,
        tolerance: tol,
        entries,
        refined,
        unresolved,
        passed: worst < tol && unresolved == 0,
    })
}

/// Reduces `out` to a scalar through a fixed random weighting so every output
/// entry contributes its own gradient.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn primitive_run<B>(build: B) -> impl Fn(&[Tensor<f64>]) -> Result<Evaluation>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    move |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        finish(g, loss, &vars, inputs)
    }
}

fn finish(mut g: Graph<f64>, loss: Var, vars: &[Var], inputs: &[Tensor<f64>]) -> Result<Evaluation> {
    let value = g.item(loss)?;
    let pattern = g.branch_pattern();
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok(Evaluation { value, grads, pattern })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, with random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.5);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let s = [3, 4];
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let mut push = |name, inputs, build: Build| cases.push((name, inputs, build));

    push("add", vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.add(v[0], v[1])));
    push("sub", vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.sub(v[0], v[1])));
    push("mul", vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.mul(v[0], v[1])));
    push("div", vec![uniform(rng, &s, -1.0, 1.0), off_zero(rng, &s)], Box::new(|g, v| g.div(v[0], v[1])));
    push(
        "mul_by_scalar_tensor",
        vec![uniform(rng, &[1], -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
        Box::new(|g, v| g.mul(v[0], v[1])),
    );
    push(
        "div_by_scalar_tensor",
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[1], 0.5, 1.5)],
        Box::new(|g, v| g.div(v[0], v[1])),
    );
    push("relu", vec![off_zero(rng, &s)], Box::new(|g, v| g.relu(v[0])));
    push("sqrt", vec![uniform(rng, &s, 0.2, 2.0)], Box::new(|g, v| g.sqrt(v[0])));
    push("log", vec![uniform(rng, &s, 0.2, 2.0)], Box::new(|g, v| g.log(v[0])));
    push("exp", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.exp(v[0])));
    push("square", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.square(v[0])));
    push("neg", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.neg(v[0])));
    push("max_scalar", vec![off_zero(rng, &s)], Box::new(|g, v| g.max_scalar(v[0], 0.05)));
    push("add_scalar", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.add_scalar(v[0], 0.7)));
    push("mul_scalar", vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.mul_scalar(v[0], -1.3)));
    push(
        "matmul",
        vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[5, 2], -1.0, 1.0)],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    push("transpose", vec![uniform(rng, &[3, 5], -1.0, 1.0)], Box::new(|g, v| g.transpose(v[0])));
    push("reshape", vec![uniform(rng, &[3, 4], -1.0, 1.0)], Box::new(|g, v| g.reshape(v[0], &[2, 6])));
    push(
        "conv2d",
        vec![
            uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)),
    );
    push(
        "conv2d_stride2",
        vec![uniform(rng, &[2, 3, 7, 6], -1.0, 1.0), uniform(rng, &[2, 3, 3, 2], -1.0, 1.0)],
        Box::new(|g, v| g.conv2d(v[0], v[1], None, 2)),
    );
    push("sum", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.reduce(ReduceKind::Sum, v[0], &[1])));
    push("mean", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.reduce(ReduceKind::Mean, v[0], &[0, 2])));
    push("var", vec![uniform(rng, &[5, 3], -1.0, 1.0)], Box::new(|g, v| g.reduce(ReduceKind::Var, v[0], &[0])));
    push("expand_rows", vec![uniform(rng, &[4], -1.0, 1.0)], Box::new(|g, v| g.expand_rows(v[0], 3)));
    push(
        "select_columns",
        vec![uniform(rng, &[3, 5], -1.0, 1.0)],
        Box::new(|g, v| g.select_columns(v[0], &[4, 1, 1])),
    );
    push(
        "concat_columns",
        vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
        Box::new(|g, v| g.concat_columns(v[0], v[1])),
    );
    push("slice_rows", vec![uniform(rng, &[5, 3], -1.0, 1.0)], Box::new(|g, v| g.slice_rows(v[0], 1, 4)));
    push(
        "gem_pool",
        vec![uniform(rng, &[2, 3, 3, 3], 0.1, 2.0), Tensor::scalar(2.5)],
        Box::new(|g, v| g.gem_pool(v[0], v[1], 1e-6)),
    );
    cases
}

/// Every primitive against central differences.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, build)| compare(name, &inputs, primitive_run(build), PRIMITIVE_STEP, PRIMITIVE_TOL))
        .collect()
}

/// Setup for the end-to-end objective check: a tiny model and a paired batch.
pub struct LossProblem {
    pub model: Model<f64>,
    pub views: [Vec<Image>; 2],
    pub coeffs: LossCoefficients,
    pub active: Vec<usize>,
}

impl LossProblem {
    /// `d = 8`, `K = 2`, `n = 4` on 23×23 inputs (a 2×2 final feature map).
    ///
    /// Biases are moved off their zero initialization so no ReLU input sits
    /// exactly on the kink.
    pub fn small(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            embed_dim: 8,
            hidden: 8,
            channels: [4, 6, 6],
            ..ModelConfig::default()
        };
        let mut model = Model::new(&mut rng, config, 2)?;
        let biases: Vec<(String, Tensor<f64>)> = model
            .named_params()
            .into_iter()
            .filter(|(n, _)| n.ends_with(".bias"))
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
                (n.to_string(), Tensor::new(t.shape().to_vec(), data).expect("shape"))
            })
            .collect();
        for (n, t) in biases {
            model.set_param(&n, t)?;
        }
        let side = 23;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..4 {
            let px: Vec<f32> = (0..CHANNELS * side * side).map(|_| rng.gen_range(0.1..0.9)).collect();
            let shifted: Vec<f32> = px.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            a.push(Image::new(side, side, px)?);
            b.push(Image::new(side, side, shifted)?);
        }
        Ok(Self {
            model,
            views: [a, b],
            coeffs: LossCoefficients::defaults(8, 2),
            active: vec![0, 1],
        })
    }

    /// Objective value and gradients for the given parameter values (in
    /// `named_params` order).
    pub fn evaluate(&self, params: &[Tensor<f64>]) -> Result<Evaluation> {
        let mut model = self.model.clone();
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.to_string()).collect();
        for (name, t) in names.iter().zip(params) {
            model.set_param(name, t.clone())?;
        }
        let mut g = Graph::new();
        let b = model.bind(&mut g, true)?;
        let mut emb = Vec::new();
        for view in &self.views {
            let x = g.constant(images_to_tensor(view)?)?;
            let (map, y) = model.encode(&mut g, &b, x)?;
            emb.push(model.project(&mut g, &b, map, y)?);
        }
        let m = model.mask_var(&mut g, &b)?;
        let views = ViewEmbeddings {
            mean: emb[0].0,
            mean2: emb[1].0,
            var: emb[0].1,
            var2: emb[1].1,
        };
        let (loss, _) = total_loss(&mut g, &views, m, &self.active, &self.coeffs)?;
        let vars: Vec<Var> = b.vars().iter().copied().chain([b.masks]).collect();
        finish(g, loss, &vars, params)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.model.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Full objective with respect to every model parameter.
pub fn check_loss(seed: u64) -> Result<CheckResult> {
    let problem = LossProblem::small(seed)?;
    compare("full_loss", &problem.params(), |p| problem.evaluate(p), LOSS_STEP, LOSS_TOL)
}

/// Two backward passes over identically built graphs agree bit for bit.
pub fn check_determinism(seed: u64) -> Result<bool> {
    let a = LossProblem::small(seed)?;
    let b = LossProblem::small(seed)?;
    let ea = a.evaluate(&a.params())?;
    let eb = b.evaluate(&b.params())?;
    let (va, ga, vb, gb) = (ea.value, ea.grads, eb.value, eb.grads);
    let same = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    Ok(va.to_bits() == vb.to_bits() && ga.len() == gb.len() && ga.iter().zip(&gb).all(|(x, y)| same(x, y)))
}

pub fn run(seed: u64) -> Result<GradcheckReport> {
    let mut checks = check_primitives(seed)?;
    checks.push(check_loss(seed)?);
    Ok(GradcheckReport {
        checks,
        deterministic: check_determinism(seed)?,
    })
}
