//! Frozen-model evaluation: linear and rotation probes, per-subspace
//! invariance, mask correlation, uncertainty scores and per-subspace class
//! evidence.
//!
//! Every function here is a pure function of the model, its inputs and an
//! explicit seed.

mod probe;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::augment::{apply, AugmentationSet, OpId, OpParams};
use crate::config::ProbeConfig;
use crate::data::Dataset;
use crate::error::{MastError, Result};
use crate::image::Image;
use crate::model::{MaskBank, Model};
use crate::tensor::{Element, Tensor};

pub use probe::{probe_features, ProbeResult, SoftmaxClassifier};

fn rows<T: Element>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Frozen representations `y` as `f64` rows.
pub fn representations<T: Element>(model: &Model<T>, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    Ok(rows(&model.represent(images)?))
}

/// Softmax probe on frozen representations, trained on the first part of a
/// seeded split and evaluated on the rest.
pub fn linear_probe<T: Element>(model: &Model<T>, data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    let (train, test) = data.split(cfg.train_fraction, seed);
    let tx = representations(model, &train.images())?;
    let ex = representations(model, &test.images())?;
    probe_features(&tx, &train.labels(), &ex, &test.labels(), data.num_classes.max(1), cfg, seed)
}

/// Four-way rotation classification (0°, 90°, 180°, 270°) on frozen
/// representations. Rotations of one image never straddle the split.
pub fn rotation_probe<T: Element>(model: &Model<T>, data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    let (train, test) = data.split(cfg.train_fraction, seed);
    let rotated = |ds: &Dataset| -> (Vec<Image>, Vec<usize>) {
        let mut imgs = Vec::with_capacity(4 * ds.len());
        let mut labels = Vec::with_capacity(4 * ds.len());
        for r in &ds.records {
            for turns in 0..4 {
                imgs.push(r.image.rot90(turns));
                labels.push(turns);
            }
        }
        (imgs, labels)
    };
    let (ti, tl) = rotated(&train);
    let (ei, el) = rotated(&test);
    let tx = representations(model, &ti)?;
    let ex = representations(model, &ei)?;
    probe_features(&tx, &tl, &ex, &el, 4, cfg, seed)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

fn masked(v: &[f64], m: &[f64]) -> Vec<f64> {
    v.iter().zip(m).map(|(a, b)| a * b).collect()
}

fn mask_columns<T: Element>(bank: &MaskBank<T>) -> Result<Vec<Vec<f64>>> {
    (0..bank.k())
        .map(|k| Ok(bank.column(k)?.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariancePoint {
    /// Relative strength in `[0, 1]` (0 is the identity).
    pub strength: f64,
    pub magnitude: f64,
    /// Mean cosine per subspace (mask column order).
    pub subspace: Vec<f64>,
    /// Mean cosine of the full mean embeddings.
    pub unmasked: f64,
    /// Samples skipped per subspace because a masked embedding was zero.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCurve {
    pub op: OpId,
    /// Operator owning each subspace.
    pub columns: Vec<OpId>,
    pub points: Vec<InvariancePoint>,
}

impl InvarianceCurve {
    /// Mean over non-identity points of subspace `k`'s metric.
    pub fn mean_subspace(&self, k: usize) -> f64 {
        let pts: Vec<&InvariancePoint> = self.points.iter().filter(|p| p.strength > 0.0).collect();
        pts.iter().map(|p| p.subspace[k]).sum::<f64>() / pts.len().max(1) as f64
    }

    pub fn mean_unmasked(&self) -> f64 {
        let pts: Vec<&InvariancePoint> = self.points.iter().filter(|p| p.strength > 0.0).collect();
        pts.iter().map(|p| p.unmasked).sum::<f64>() / pts.len().max(1) as f64
    }
}

/// Evenly spaced strengths from the identity to the far end of the range.
pub fn default_strengths(points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Cosine similarity between masked mean embeddings of `op`-augmented and
/// original images, per subspace and per strength, plus the unmasked curve.
///
/// `set` names the operator of each mask column; `op` need not belong to it.
/// Per-sample auxiliary draws (crop position, sign of displacements) are
/// fixed across strengths.
pub fn invariance_metric<T: Element>(
    model: &Model<T>,
    set: &AugmentationSet,
    op: OpId,
    strengths: &[f64],
    images: &[Image],
    seed: u64,
) -> Result<InvarianceCurve> {
    if !op.has_continuous_magnitude() {
        return Err(MastError::contract(format!("{op} has no continuous magnitude")));
    }
    if set.len() != model.num_masks() {
        return Err(MastError::contract("augmentation set does not match the mask bank"));
    }
    let spec = set
        .get(set.position(op).unwrap_or(usize::MAX))
        .copied()
        .unwrap_or_else(|| crate::augment::AugmentationOp::new(op));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<([f64; 4], f64, u64)> = images
        .iter()
        .map(|_| ([rng.gen(), rng.gen(), rng.gen(), rng.gen()], if rng.gen() { 1.0 } else { -1.0 }, rng.gen()))
        .collect();
    let base = model.embed(images)?;
    let base_mu = rows(&base.mean);
    let cols = mask_columns(&model.masks)?;
    let mut points = Vec::with_capacity(strengths.len());
    for &t in strengths {
        let mut magnitude = 0.0;
        let mut aug = Vec::with_capacity(images.len());
        for (img, (aux, sign, s)) in images.iter().zip(&draws) {
            magnitude = spec.magnitude_at(t, *sign)?;
            aug.push(apply(op, &OpParams::new(magnitude).with_aux(*aux).with_seed(*s), img)?);
        }
        let mu = rows(&model.embed(&aug)?.mean);
        let mut subspace = Vec::with_capacity(cols.len());
        let mut skipped = Vec::with_capacity(cols.len());
        for m in &cols {
            let (mut sum, mut used, mut skip) = (0.0, 0usize, 0usize);
            for (a, b) in mu.iter().zip(&base_mu) {
                match cosine(&masked(a, m), &masked(b, m)) {
                    Some(c) => {
                        sum += c;
                        used += 1;
                    }
                    None => skip += 1,
                }
            }
            subspace.push(if used > 0 { sum / used as f64 } else { 0.0 });
            skipped.push(skip);
        }
        let un: Vec<f64> = mu.iter().zip(&base_mu).filter_map(|(a, b)| cosine(a, b)).collect();
        points.push(InvariancePoint {
            strength: t,
            magnitude: magnitude.abs(),
            subspace,
            unmasked: un.iter().sum::<f64>() / un.len().max(1) as f64,
            skipped,
        });
    }
    Ok(InvarianceCurve {
        op,
        columns: set.ids(),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCorrelation {
    pub labels: Vec<OpId>,
    /// `K × K` cosine similarities between mask columns.
    pub matrix: Vec<Vec<f64>>,
    pub zero_columns: Vec<usize>,
}

impl MaskCorrelation {
    /// Rank (0 = largest) of entry `(i, j)` among the off-diagonal upper
    /// triangle, and the number of such entries.
    pub fn rank_of(&self, i: usize, j: usize) -> (usize, usize) {
        let target = self.matrix[i][j];
        let k = self.matrix.len();
        let mut above = 0;
        let mut total = 0;
        for a in 0..k {
            for b in a + 1..k {
                total += 1;
                if self.matrix[a][b] > target {
                    above += 1;
                }
            }
        }
        (above, total)
    }
}

/// Cosine similarity between every pair of mask columns. Zero columns get
/// zero similarity everywhere, including their diagonal.
pub fn mask_correlation<T: Element>(bank: &MaskBank<T>, labels: &[OpId]) -> Result<MaskCorrelation> {
    let cols = mask_columns(bank)?;
    let k = cols.len();
    if labels.len() != k {
        return Err(MastError::contract("one label per mask column expected"));
    }
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let zero_columns: Vec<usize> = (0..k).filter(|&i| norms[i] == 0.0).collect();
    if !zero_columns.is_empty() {
        log::warn!("mask columns {zero_columns:?} are all zero");
    }
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(0.0, 1.0)
            };
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    Ok(MaskCorrelation {
        labels: labels.to_vec(),
        matrix,
        zero_columns,
    })
}

/// Linear rescaling of covariance traces to `[0, 1]` over the batch.
pub fn rescale_traces(traces: &[f64]) -> Result<Vec<f64>> {
    if traces.len() < 2 {
        return Err(MastError::contract("uncertainty rescaling needs at least 2 samples"));
    }
    let lo = traces.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = traces.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        log::warn!("all covariance traces are equal; uncertainty scores set to 0.5");
        return Ok(vec![0.5; traces.len()]);
    }
    Ok(traces.iter().map(|t| (t - lo) / (hi - lo)).collect())
}

/// `tr(Σ)` per image.
pub fn covariance_traces<T: Element>(model: &Model<T>, images: &[Image]) -> Result<Vec<f64>> {
    Ok(rows(&model.embed(images)?.var).iter().map(|r| r.iter().sum()).collect())
}

/// Per-image uncertainty in `[0, 1]`: covariance trace rescaled over the batch.
pub fn uncertainty_scores<T: Element>(model: &Model<T>, images: &[Image]) -> Result<Vec<f64>> {
    rescale_traces(&covariance_traces(model, images)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthComparison {
    pub samples: usize,
    pub weak_mean: f64,
    pub strong_mean: f64,
    /// Paired t statistic of strong − weak.
    pub t_statistic: f64,
    /// One-sided p-value for "strong > weak".
    pub p_value: f64,
}

/// Applies every continuous-magnitude operator of `set` at relative strength
/// `t` (discrete operators are skipped).
pub fn augment_at_strength(set: &AugmentationSet, img: &Image, t: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    let mut out = img.clone();
    for op in set.ops() {
        if !op.id.has_continuous_magnitude() || op.id.identity_magnitude().is_none() {
            continue;
        }
        let sign = if rng.gen() { 1.0 } else { -1.0 };
        let m = op.magnitude_at(t, sign)?;
        let p = OpParams::new(m)
            .with_aux([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
            .with_seed(rng.gen());
        out = apply(op.id, &p, &out)?;
    }
    Ok(out)
}

/// Uncertainty of weakly (bottom-quartile strength) versus strongly
/// (top-quartile) augmented views of the same images, scored on one shared
/// batch.
pub fn uncertainty_vs_strength<T: Element>(
    model: &Model<T>,
    set: &AugmentationSet,
    images: &[Image],
    seed: u64,
) -> Result<StrengthComparison> {
    if images.len() < 2 {
        return Err(MastError::contract("need at least 2 images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(2 * images.len());
    for img in images {
        let tw = rng.gen_range(0.0..0.25);
        batch.push(augment_at_strength(set, img, tw, &mut rng)?);
    }
    for img in images {
        let ts = rng.gen_range(0.75..=1.0);
        batch.push(augment_at_strength(set, img, ts, &mut rng)?);
    }
    let scores = uncertainty_scores(model, &batch)?;
    let n = images.len();
    let (weak, strong) = scores.split_at(n);
    let diffs: Vec<f64> = strong.iter().zip(weak).map(|(s, w)| s - w).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let md = mean(&diffs);
    let var = diffs.iter().map(|d| (d - md) * (d - md)).sum::<f64>() / (n - 1) as f64;
    let (t, p) = if var > 0.0 {
        let t = md / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| MastError::domain(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    } else {
        (0.0, if md > 0.0 { 0.0 } else { 1.0 })
    };
    Ok(StrengthComparison {
        samples: n,
        weak_mean: mean(weak),
        strong_mean: mean(strong),
        t_statistic: t,
        p_value: p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceClassMatrix {
    pub subspaces: Vec<OpId>,
    /// `values[k][c]`: mean of `w_c · (μ ⊙ m_k)` over correctly classified
    /// test samples of class `c`.
    pub values: Vec<Vec<f64>>,
    /// Correctly classified samples per class.
    pub counts: Vec<usize>,
    pub classifier_top1: f64,
}

/// Per-subspace class evidence. A softmax classifier is trained on mean
/// embeddings `μ` (so its weights live in embedding space); its weights for
/// the true class are applied to each masked embedding.
pub fn subspace_class_prediction<T: Element>(
    model: &Model<T>,
    set: &AugmentationSet,
    data: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SubspaceClassMatrix> {
    let classes = data.num_classes.max(1);
    let (train, test) = data.split(cfg.train_fraction, seed);
    let tx = rows(&model.embed(&train.images())?.mean);
    let ex = rows(&model.embed(&test.images())?.mean);
    let clf = SoftmaxClassifier::fit(&tx, &train.labels(), classes, cfg, seed)?;
    let labels = test.labels();
    let top1 = clf.evaluate(&ex, &labels)?.top1;
    let cols = mask_columns(&model.masks)?;
    let weights: Vec<Vec<f64>> = (0..classes).map(|c| clf.raw_weights(c)).collect();
    let mut values = vec![vec![0.0; classes]; cols.len()];
    let mut counts = vec![0usize; classes];
    for (mu, &y) in ex.iter().zip(&labels) {
        if clf.predict(mu) != y {
            continue;
        }
        counts[y] += 1;
        for (k, m) in cols.iter().enumerate() {
            values[k][y] += weights[y].iter().zip(mu).zip(m).map(|((w, v), mm)| w * v * mm).sum::<f64>();
        }
    }
    if counts.iter().all(|&c| c == 0) {
        log::warn!("no correctly classified samples; subspace class matrix is empty");
        values.clear();
    }
    for row in values.iter_mut() {
        for (v, &c) in row.iter_mut().zip(&counts) {
            if c > 0 {
                *v /= c as f64;
            }
        }
    }
    Ok(SubspaceClassMatrix {
        subspaces: set.ids(),
        values,
        counts,
        classifier_top1: top1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Factor, SyntheticSpec};
    use crate::model::ModelConfig;

    fn model(k: usize, seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            embed_dim: 8,
            hidden: 8,
            channels: [4, 4, 8],
            ..ModelConfig::default()
        };
        Model::new(&mut rng, cfg, k).unwrap()
    }

    fn data(n: usize, f: Factor) -> Dataset {
        generate(
            &SyntheticSpec {
                n_samples: n,
                side: 16,
                label_factor: f,
            },
            2,
        )
        .unwrap()
    }

    fn bank(cols: &[Vec<f64>]) -> MaskBank<f64> {
        let (d, k) = (cols[0].len(), cols.len());
        let mut v = vec![0.0; d * k];
        for (c, col) in cols.iter().enumerate() {
            for j in 0..d {
                v[j * k + c] = col[j];
            }
        }
        MaskBank::from_masks(Tensor::new(vec![d, k], v).unwrap()).unwrap()
    }

    #[test]
    fn correlation_examples_and_oracle() {
        let ids = [OpId::ShearX, OpId::ShearY, OpId::Rotate];
        let b = bank(&[vec![1.0, 2.0, 0.0, 0.0], vec![1.0, 2.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.5]]);
        let c = mask_correlation(&b, &ids).unwrap();
        assert!((c.matrix[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(c.matrix[0][2], 0.0);
        assert_eq!(c.rank_of(0, 1), (0, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let c = mask_correlation(&bank(&cols), &[OpId::Rotate; 4]).unwrap();
        for i in 0..4 {
            assert!((c.matrix[i][i] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                let mut dot = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for r in 0..6 {
                    dot += cols[i][r] * cols[j][r];
                    ni += cols[i][r] * cols[i][r];
                    nj += cols[j][r] * cols[j][r];
                }
                let want = dot / (ni.sqrt() * nj.sqrt());
                assert!((c.matrix[i][j] - want).abs() < 1e-12);
                assert_eq!(c.matrix[i][j], c.matrix[j][i]);
            }
        }
    }

    #[test]
    fn zero_mask_column_correlates_with_nothing() {
        let c = mask_correlation(&bank(&[vec![1.0, 0.0], vec![0.0, 0.0]]), &[OpId::Rotate, OpId::Invert]).unwrap();
        assert_eq!(c.zero_columns, vec![1]);
        assert_eq!(c.matrix, vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn rescaling_endpoints_and_ties() {
        assert_eq!(rescale_traces(&[3.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(rescale_traces(&[2.0, 2.0, 2.0]).unwrap(), vec![0.5; 3]);
        assert!(rescale_traces(&[1.0]).is_err());
        let a = rescale_traces(&[0.3, 0.9, 0.1, 0.5]).unwrap();
        let b = rescale_traces(&[0.5, 0.1, 0.9, 0.3]).unwrap();
        assert_eq!(a[0], b[3]);
        assert_eq!(a[1], b[2]);
    }

    #[test]
    fn identity_strength_gives_unit_invariance() {
        let m = model(2, 1);
        let set = AugmentationSet::from_ids(&[OpId::ColorJitter, OpId::TranslateX]).unwrap();
        let imgs = data(10, Factor::Hue).images();
        for op in [OpId::ColorJitter, OpId::TranslateX, OpId::RandomResizedCrop, OpId::GaussianBlur] {
            let curve = invariance_metric(&m, &set, op, &default_strengths(4), &imgs, 3).unwrap();
            let id = &curve.points[0];
            assert_eq!(id.strength, 0.0);
            for v in id.subspace.iter().chain([&id.unmasked]) {
                assert!((v - 1.0).abs() < 1e-6, "{op}: {v}");
            }
            for p in &curve.points {
                assert!(p.subspace.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            let again = invariance_metric(&m, &set, op, &default_strengths(4), &imgs, 3).unwrap();
            assert_eq!(again, curve);
        }
        assert!(invariance_metric(&m, &set, OpId::RandomFlip, &[0.0], &imgs, 0).is_err());
    }

    #[test]
    fn untrained_rotation_probe_near_chance() {
        let ds = data(400, Factor::Shape);
        let cfg = ProbeConfig {
            epochs: 30,
            ..ProbeConfig::default()
        };
        let accs: Vec<f64> = (0..4)
            .map(|seed| rotation_probe(&model(2, 5 + seed), &ds, &cfg, seed).unwrap().top1)
            .collect();
        let mean = accs.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.25).abs() <= 0.05, "{accs:?}");
        let m = model(2, 5);
        let r = rotation_probe(&m, &ds, &cfg, 0).unwrap();
        assert_eq!(r.samples, 320);
        // probing leaves the model untouched
        let before = m.clone();
        linear_probe(&m, &ds, &cfg, 0).unwrap();
        assert_eq!(before, m);
    }

    #[test]
    fn single_rotation_class_is_trivial() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 1.0]).collect();
        let y = vec![0; 20];
        let r = probe_features(&x[..10], &y[..10], &x[10..], &y[10..], 1, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(r.per_class, vec![1.0]);
    }

    #[test]
    fn subspace_class_matrix_shapes_and_masks() {
        let mut m = model(3, 6);
        let ones = vec![1.0; 8];
        m.set_masks(bank(&[ones.clone(), ones.clone(), vec![0.0; 8]])).unwrap();
        let set = AugmentationSet::from_ids(&[OpId::ColorJitter, OpId::GaussianBlur, OpId::Rotate]).unwrap();
        let ds = data(120, Factor::Hue);
        let cfg = ProbeConfig {
            epochs: 20,
            ..ProbeConfig::default()
        };
        let r = subspace_class_prediction(&m, &set, &ds, &cfg, 1).unwrap();
        assert_eq!(r.values.len(), 3);
        assert!(r.values.iter().all(|row| row.len() == 8));
        assert_eq!(r.values[0], r.values[1]);
        assert!(r.values[2].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn strength_comparison_is_deterministic() {
        let m = model(2, 7);
        let set = AugmentationSet::named("mast5").unwrap();
        let imgs = data(12, Factor::Hue).images();
        let mut m5 = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m5.set_masks(MaskBank::init(&mut rng, 8, 5).unwrap()).unwrap();
        let a = uncertainty_vs_strength(&m5, &set, &imgs, 4).unwrap();
        let b = uncertainty_vs_strength(&m5, &set, &imgs, 4).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.p_value));
    }
}
