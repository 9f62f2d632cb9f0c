//! The training objective and its terms, as graph computations.
//!
//! Embedding batches are `[n, d]` values on a [`Graph`]; masks are a
//! `[d, K]` nonnegative value whose column `k` gates subspace `k`.

use serde::{Deserialize, Serialize};

use crate::error::{MastError, Result};
use crate::tensor::{Element, Graph, ReduceKind, Tensor, Var};

/// Hinge target for per-dimension standard deviation.
pub const VAR_GAMMA: f64 = 1.0;
pub const VAR_EPS: f64 = 1e-4;
/// Denominators below this make an uncertainty-weighted term degenerate.
pub const TRACE_FLOOR: f64 = 1e-12;
/// Invariance weight of the unfactorized baseline objective, per embedding
/// dimension: the baseline uses `λ = BASELINE_LAMBDA / d`, which turns the
/// summed squared distance into a per-dimension mean.
pub const BASELINE_LAMBDA: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossCoefficients {
    /// `λ = 25d/K`, `λ₁ = 600/(dK)`, `λ₂ = 25`, `α = 25`, `β = 1`.
    pub fn defaults(d: usize, k: usize) -> Self {
        let (d, k) = (d as f64, k as f64);
        Self {
            lambda: 25.0 * d / k,
            lambda1: 600.0 / (d * k),
            lambda2: 25.0,
            alpha: 25.0,
            beta: 1.0,
        }
    }

    /// Multiplies `λ`, `λ₁` and `λ₂` by `s`.
    pub fn scaled(self, s: f64) -> Self {
        Self {
            lambda: self.lambda * s,
            lambda1: self.lambda1 * s,
            lambda2: self.lambda2 * s,
            ..self
        }
    }
}

/// Optional per-coefficient overrides on top of the `(d, K)` defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientOverrides {
    pub lambda: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Multiplier applied to `λ, λ₁, λ₂` after overrides.
    pub scale: Option<f64>,
}

impl CoefficientOverrides {
    pub fn resolve(&self, d: usize, k: usize) -> LossCoefficients {
        let base = LossCoefficients::defaults(d, k);
        let c = LossCoefficients {
            lambda: self.lambda.unwrap_or(base.lambda),
            lambda1: self.lambda1.unwrap_or(base.lambda1),
            lambda2: self.lambda2.unwrap_or(base.lambda2),
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
        };
        c.scaled(self.scale.unwrap_or(1.0))
    }
}

/// Per-term values of one loss evaluation.
///
/// For the unfactorized baseline objective `d_mg` carries the plain
/// invariance distance and `l_sp`, `l_kl` are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_mg: f64,
    pub l_sp: f64,
    pub l_kl: f64,
    pub l_var: f64,
    pub l_cov: f64,
    pub total: f64,
    pub degenerate_terms: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.d_mg, self.l_sp, self.l_kl, self.l_var, self.l_cov, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Weighted sum of the terms.
    pub fn recompose(&self, c: &LossCoefficients) -> f64 {
        c.lambda * self.d_mg + c.lambda1 * self.l_sp + c.lambda2 * self.l_kl + c.alpha * self.l_var + c.beta * self.l_cov
    }
}

fn batch_dims<T: Element>(g: &Graph<T>, a: Var, b: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(MastError::dim(format!("embedding batches {sa:?} and {sb:?} differ")));
    }
    Ok((sa[0], sa[1]))
}

fn check_active(active: &[usize], k: usize) -> Result<()> {
    if active.is_empty() {
        return Err(MastError::contract("active subspace set is empty"));
    }
    if let Some(bad) = active.iter().find(|&&a| a >= k) {
        return Err(MastError::contract(format!("active subspace {bad} out of range (K={k})")));
    }
    Ok(())
}

fn masks_dims<T: Element>(g: &Graph<T>, m: Var, d: usize) -> Result<usize> {
    let s = g.shape(m);
    if s.len() != 2 || s[0] != d {
        return Err(MastError::dim(format!("masks {s:?} do not match embedding dim {d}")));
    }
    Ok(s[1])
}

/// `(1/n) Σᵢ ‖zᵢ − z′ᵢ‖²`.
pub fn invariance_distance<T: Element>(g: &mut Graph<T>, z: Var, z2: Var) -> Result<Var> {
    let (n, _) = batch_dims(g, z, z2)?;
    let diff = g.sub(z, z2)?;
    let sq = g.square(diff)?;
    let s = g.sum_all(sq)?;
    g.mul_scalar(s, 1.0 / n as f64)
}

/// `(1/n) Σᵢ Σ_{k∈active} ‖(zᵢ − z′ᵢ) ⊙ m_k‖²`.
pub fn masked_distance<T: Element>(g: &mut Graph<T>, z: Var, z2: Var, m: Var, active: &[usize]) -> Result<Var> {
    let (n, d) = batch_dims(g, z, z2)?;
    let k = masks_dims(g, m, d)?;
    check_active(active, k)?;
    let diff = g.sub(z, z2)?;
    let sq = g.square(diff)?;
    let ma = g.select_columns(m, active)?;
    let ma2 = g.square(ma)?;
    let per = g.matmul(sq, ma2)?;
    let s = g.sum_all(per)?;
    g.mul_scalar(s, 1.0 / n as f64)
}

/// `‖M‖₁` for nonnegative masks.
pub fn sparsity<T: Element>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    if g.value(m).iter().any(|v| *v < T::zero()) {
        return Err(MastError::domain("sparsity expects nonnegative masks"));
    }
    g.sum_all(m)
}

/// Uncertainty-weighted masked distance
/// `(1/n) Σᵢ Σ_{k∈active} 2‖μ̃ᵢₖ − μ̃′ᵢₖ‖² / (tr Σ̃ᵢₖ + tr Σ̃′ᵢₖ)`, where
/// `tr Σ̃ᵢₖ = Σⱼ σ²ᵢⱼ m_jk`.
///
/// Terms whose denominator falls below [`TRACE_FLOOR`] contribute zero; their
/// count is returned alongside the value.
#[allow(clippy::too_many_arguments)]
pub fn masked_gaussian_distance<T: Element>(
    g: &mut Graph<T>,
    mu: Var,
    mu2: Var,
    var: Var,
    var2: Var,
    m: Var,
    active: &[usize],
) -> Result<(Var, usize)> {
    let (n, d) = batch_dims(g, mu, mu2)?;
    batch_dims(g, mu, var)?;
    batch_dims(g, var, var2)?;
    let k = masks_dims(g, m, d)?;
    check_active(active, k)?;

    let diff = g.sub(mu, mu2)?;
    let sq = g.square(diff)?;
    let ma = g.select_columns(m, active)?;
    let ma2 = g.square(ma)?;
    let num = g.matmul(sq, ma2)?;

    let vsum = g.add(var, var2)?;
    let den = g.matmul(vsum, ma)?;

    let keep: Vec<T> = g
        .value(den)
        .iter()
        .map(|&v| if v.as_f64() >= TRACE_FLOOR { T::one() } else { T::zero() })
        .collect();
    let degenerate = keep.iter().filter(|v| v.is_zero()).count();
    let keep = g.constant(Tensor::new(g.shape(den).to_vec(), keep)?)?;

    let safe = g.max_scalar(den, TRACE_FLOOR)?;
    let ratio = g.div(num, safe)?;
    let ratio = g.mul(ratio, keep)?;
    let s = g.sum_all(ratio)?;
    Ok((g.mul_scalar(s, 2.0 / n as f64)?, degenerate))
}

/// `KL(N(μ, σ²) ‖ N(μ′, σ′²))` per row, summed over dimensions: `[n]`.
fn kl_rows<T: Element>(g: &mut Graph<T>, mu: Var, mu2: Var, var: Var, var2: Var) -> Result<Var> {
    let ratio = g.div(var, var2)?;
    let diff = g.sub(mu2, mu)?;
    let sq = g.square(diff)?;
    let quad = g.div(sq, var2)?;
    let l2 = g.log(var2)?;
    let l1 = g.log(var)?;
    let logdet = g.sub(l2, l1)?;
    let t = g.add(ratio, quad)?;
    let t = g.add(t, logdet)?;
    let t = g.add_scalar(t, -1.0)?;
    let rows = g.reduce(ReduceKind::Sum, t, &[1])?;
    g.mul_scalar(rows, 0.5)
}

/// Symmetric KL between paired diagonal Gaussians, averaged over the batch.
pub fn symmetric_kl<T: Element>(g: &mut Graph<T>, mu: Var, mu2: Var, var: Var, var2: Var) -> Result<Var> {
    let (n, _) = batch_dims(g, mu, mu2)?;
    batch_dims(g, mu, var)?;
    batch_dims(g, var, var2)?;
    if g.value(var).iter().chain(g.value(var2)).any(|v| *v <= T::zero()) {
        return Err(MastError::domain("symmetric_kl needs strictly positive variances"));
    }
    let a = kl_rows(g, mu, mu2, var, var2)?;
    let b = kl_rows(g, mu2, mu, var2, var)?;
    let both = g.add(a, b)?;
    let s = g.sum_all(both)?;
    g.mul_scalar(s, 1.0 / n as f64)
}

/// `(1/d) Σⱼ max(0, γ − sqrt(Var(z·ⱼ) + ε))` for one batch.
fn variance_hinge<T: Element>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let v = g.reduce(ReduceKind::Var, z, &[0])?;
    let v = g.add_scalar(v, VAR_EPS)?;
    let std = g.sqrt(v)?;
    let neg = g.neg(std)?;
    let h = g.add_scalar(neg, VAR_GAMMA)?;
    let h = g.relu(h)?;
    g.mean_all(h)
}

/// `½[v(Z) + v(Z′)]`.
pub fn variance_term<T: Element>(g: &mut Graph<T>, z: Var, z2: Var) -> Result<Var> {
    let (n, _) = batch_dims(g, z, z2)?;
    if n < 2 {
        return Err(MastError::contract("variance term needs at least 2 samples"));
    }
    let a = variance_hinge(g, z)?;
    let b = variance_hinge(g, z2)?;
    let s = g.add(a, b)?;
    g.mul_scalar(s, 0.5)
}

/// `(1/d) Σ_{j≠j′} Cov(Z)²_{jj′}` with `1/(n−1)` normalization.
fn offdiag_cov<T: Element>(g: &mut Graph<T>, z: Var, n: usize, d: usize) -> Result<Var> {
    let mean = g.reduce(ReduceKind::Mean, z, &[0])?;
    let mean = g.expand_rows(mean, n)?;
    let zc = g.sub(z, mean)?;
    let zt = g.transpose(zc)?;
    let c = g.matmul(zt, zc)?;
    let c = g.mul_scalar(c, 1.0 / (n as f64 - 1.0))?;
    let c2 = g.square(c)?;
    let mut off = vec![T::one(); d * d];
    for j in 0..d {
        off[j * d + j] = T::zero();
    }
    let off = g.constant(Tensor::new(vec![d, d], off)?)?;
    let c2 = g.mul(c2, off)?;
    let s = g.sum_all(c2)?;
    g.mul_scalar(s, 1.0 / d as f64)
}

/// `c(Z) + c(Z′)`.
pub fn covariance_term<T: Element>(g: &mut Graph<T>, z: Var, z2: Var) -> Result<Var> {
    let (n, d) = batch_dims(g, z, z2)?;
    if n < 2 {
        return Err(MastError::contract("covariance term needs at least 2 samples"));
    }
    let a = offdiag_cov(g, z, n, d)?;
    let b = offdiag_cov(g, z2, n, d)?;
    g.add(a, b)
}

/// Gaussian embeddings of both views on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ViewEmbeddings {
    pub mean: Var,
    pub mean2: Var,
    pub var: Var,
    pub var2: Var,
}

/// `λ·D_mg + λ₁·ℓ_sp + λ₂·ℓ_kl + α·ℓ_var + β·ℓ_cov`, with the variance and
/// covariance regularizers applied to the mean embeddings.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    views: &ViewEmbeddings,
    m: Var,
    active: &[usize],
    coeffs: &LossCoefficients,
) -> Result<(Var, LossBreakdown)> {
    let (d_mg, degenerate) = masked_gaussian_distance(g, views.mean, views.mean2, views.var, views.var2, m, active)?;
    let l_sp = sparsity(g, m)?;
    let l_kl = symmetric_kl(g, views.mean, views.mean2, views.var, views.var2)?;
    let l_var = variance_term(g, views.mean, views.mean2)?;
    let l_cov = covariance_term(g, views.mean, views.mean2)?;

    let terms = [
        (d_mg, coeffs.lambda),
        (l_sp, coeffs.lambda1),
        (l_kl, coeffs.lambda2),
        (l_var, coeffs.alpha),
        (l_cov, coeffs.beta),
    ];
    let total = weighted_sum(g, &terms)?;
    let v = |g: &Graph<T>, x: Var| g.item(x).map(Element::as_f64);
    let breakdown = LossBreakdown {
        d_mg: v(g, d_mg)?,
        l_sp: v(g, l_sp)?,
        l_kl: v(g, l_kl)?,
        l_var: v(g, l_var)?,
        l_cov: v(g, l_cov)?,
        total: v(g, total)?,
        degenerate_terms: degenerate,
    };
    Ok((total, breakdown))
}

/// Unfactorized objective `λ_b·D(Z, Z′) + α·ℓ_var + β·ℓ_cov` on the means.
pub fn baseline_loss<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    z2: Var,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let dist = invariance_distance(g, z, z2)?;
    let l_var = variance_term(g, z, z2)?;
    let l_cov = covariance_term(g, z, z2)?;
    let total = weighted_sum(g, &[(dist, lambda), (l_var, alpha), (l_cov, beta)])?;
    let v = |g: &Graph<T>, x: Var| g.item(x).map(Element::as_f64);
    Ok((
        total,
        LossBreakdown {
            d_mg: v(g, dist)?,
            l_sp: 0.0,
            l_kl: 0.0,
            l_var: v(g, l_var)?,
            l_cov: v(g, l_cov)?,
            total: v(g, total)?,
            degenerate_terms: 0,
        },
    ))
}

fn weighted_sum<T: Element>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(x, w) in terms {
        let t = g.mul_scalar(x, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| MastError::contract("empty loss"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn c(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap()).unwrap()
    }

    fn val(g: &Graph<f64>, v: Var) -> f64 {
        g.item(v).unwrap()
    }

    // ---- naive oracles ----

    fn naive_masked_distance(z: &[f64], z2: &[f64], m: &[f64], n: usize, d: usize, k: usize, active: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            for &kk in active {
                for j in 0..d {
                    let a = z[i * d + j] * m[j * k + kk];
                    let b = z2[i * d + j] * m[j * k + kk];
                    total += (a - b) * (a - b);
                }
            }
        }
        total / n as f64
    }

    fn naive_cov_term(z: &[f64], n: usize, d: usize) -> f64 {
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += z[i * d + j] / n as f64;
            }
        }
        let mut total = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                let mut cov = 0.0;
                for i in 0..n {
                    cov += (z[i * d + a] - mean[a]) * (z[i * d + b] - mean[b]);
                }
                cov /= (n - 1) as f64;
                total += cov * cov;
            }
        }
        total / d as f64
    }

    #[test]
    fn invariance_distance_examples() {
        let mut g = Graph::<f64>::new();
        let z = c(&mut g, &[1, 2], &[1.0, 2.0]);
        let z2 = c(&mut g, &[1, 2], &[1.0, 0.0]);
        let d = invariance_distance(&mut g, z, z2).unwrap();
        assert_eq!(val(&g, d), 4.0);
        let same = invariance_distance(&mut g, z, z).unwrap();
        assert_eq!(val(&g, same), 0.0);
        let other = c(&mut g, &[2, 2], &[0.0; 4]);
        assert!(matches!(invariance_distance(&mut g, z, other), Err(MastError::Dimension(_))));
    }

    #[test]
    fn invariance_distance_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (7, 5);
        let (a, b) = (mat(&mut rng, n, d, -2.0, 2.0), mat(&mut rng, n, d, -2.0, 2.0));
        let want: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        let mut g = Graph::<f64>::new();
        let (za, zb) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b));
        let got = invariance_distance(&mut g, za, zb).unwrap();
        assert!((val(&g, got) - want).abs() < 1e-10);
    }

    #[test]
    fn masked_distance_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d, k) = (6, 5, 3);
        let (a, b) = (mat(&mut rng, n, d, -1.0, 1.0), mat(&mut rng, n, d, -1.0, 1.0));
        let mut g = Graph::<f64>::new();
        let (za, zb) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b));

        let ones = c(&mut g, &[d, k], &vec![1.0; d * k]);
        let md = masked_distance(&mut g, za, zb, ones, &[0, 1, 2]).unwrap();
        let plain = invariance_distance(&mut g, za, zb).unwrap();
        assert!((val(&g, md) - 3.0 * val(&g, plain)).abs() < 1e-12);

        let zeros = c(&mut g, &[d, k], &vec![0.0; d * k]);
        let z0 = masked_distance(&mut g, za, zb, zeros, &[0, 2]).unwrap();
        assert_eq!(val(&g, z0), 0.0);

        let m = mat(&mut rng, d, k, 0.0, 1.5);
        let mv = c(&mut g, &[d, k], &m);
        let got = masked_distance(&mut g, za, zb, mv, &[0, 2]).unwrap();
        let want = naive_masked_distance(&a, &b, &m, n, d, k, &[0, 2]);
        assert!((val(&g, got) - want).abs() < 1e-10);

        assert!(matches!(masked_distance(&mut g, za, zb, mv, &[]), Err(MastError::Contract(_))));
        assert!(masked_distance(&mut g, za, zb, mv, &[3]).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let mut g = Graph::<f64>::new();
        let ones = c(&mut g, &[4, 3], &[1.0; 12]);
        let s = sparsity(&mut g, ones).unwrap();
        assert_eq!(val(&g, s), 12.0);
        let zeros = c(&mut g, &[4, 3], &[0.0; 12]);
        let s = sparsity(&mut g, zeros).unwrap();
        assert_eq!(val(&g, s), 0.0);
        let mut one = vec![0.0; 12];
        one[5] = 0.5;
        let single = c(&mut g, &[4, 3], &one);
        let s = sparsity(&mut g, single).unwrap();
        assert_eq!(val(&g, s), 0.5);
    }

    #[test]
    fn gaussian_distance_hand_value() {
        // one sample, one subspace: ||Δμ̃||² = 4, tr = tr' = 1
        let mut g = Graph::<f64>::new();
        let mu = c(&mut g, &[1, 2], &[2.0, 0.0]);
        let mu2 = c(&mut g, &[1, 2], &[0.0, 0.0]);
        let var = c(&mut g, &[1, 2], &[0.5, 0.5]);
        let m = c(&mut g, &[2, 1], &[1.0, 1.0]);
        let (d, degenerate) = masked_gaussian_distance(&mut g, mu, mu2, var, var, m, &[0]).unwrap();
        assert_eq!(val(&g, d), 4.0);
        assert_eq!(degenerate, 0);
        let (z, _) = masked_gaussian_distance(&mut g, mu, mu, var, var, m, &[0]).unwrap();
        assert_eq!(val(&g, z), 0.0);
    }

    #[test]
    fn gaussian_distance_zero_mask_is_guarded() {
        let mut g = Graph::<f64>::new();
        let mu = c(&mut g, &[2, 2], &[2.0, 0.0, 1.0, 1.0]);
        let mu2 = c(&mut g, &[2, 2], &[0.0; 4]);
        let var = c(&mut g, &[2, 2], &[0.5; 4]);
        let m = c(&mut g, &[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let (d, degenerate) = masked_gaussian_distance(&mut g, mu, mu2, var, var, m, &[0, 1]).unwrap();
        assert_eq!(degenerate, 2);
        assert!(val(&g, d).is_finite());
    }

    #[test]
    fn gaussian_distance_halves_when_variances_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, k) = (5, 6, 3);
        let (a, b) = (mat(&mut rng, n, d, -1.0, 1.0), mat(&mut rng, n, d, -1.0, 1.0));
        let (v1, v2) = (mat(&mut rng, n, d, 0.1, 2.0), mat(&mut rng, n, d, 0.1, 2.0));
        let m = mat(&mut rng, d, k, 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (za, zb, m) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b), c(&mut g, &[d, k], &m));
        let (va, vb) = (c(&mut g, &[n, d], &v1), c(&mut g, &[n, d], &v2));
        let (base, _) = masked_gaussian_distance(&mut g, za, zb, va, vb, m, &[0, 1, 2]).unwrap();
        let va2 = g.mul_scalar(va, 2.0).unwrap();
        let vb2 = g.mul_scalar(vb, 2.0).unwrap();
        let (half, _) = masked_gaussian_distance(&mut g, za, zb, va2, vb2, m, &[0, 1, 2]).unwrap();
        assert!((val(&g, half) - val(&g, base) / 2.0).abs() < 1e-12);
    }

    /// `∫ p ln(p/q)` for 1-D Gaussians, composite Simpson on 10⁶ intervals.
    fn kl_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        let s = v1.sqrt().max(v2.sqrt());
        let (lo, hi) = (m1.min(m2) - 14.0 * s, m1.max(m2) + 14.0 * s);
        let n = 1_000_000;
        let h = (hi - lo) / n as f64;
        let logpdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
        let f = |x: f64| {
            let lp = logpdf(x, m1, v1);
            lp.exp() * (lp - logpdf(x, m2, v2))
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn kl_one_direction(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        // symmetric KL minus the reverse direction, both from the graph
        let mut g = Graph::<f64>::new();
        let (a, b) = (c(&mut g, &[1, 1], &[m1]), c(&mut g, &[1, 1], &[m2]));
        let (va, vb) = (c(&mut g, &[1, 1], &[v1]), c(&mut g, &[1, 1], &[v2]));
        let r = kl_rows(&mut g, a, b, va, vb).unwrap();
        g.value(r)[0]
    }

    #[test]
    fn kl_matches_quadrature_reference_value() {
        let got = kl_one_direction(0.0, 1.0, 1.0, 2.0);
        let want = kl_quadrature(0.0, 1.0, 1.0, 2.0);
        assert!((got - want).abs() < 1e-5);
        assert!((got - 0.346_573_590_279_972_6).abs() < 1e-12);
    }

    #[test]
    fn symmetric_kl_examples() {
        let mut g = Graph::<f64>::new();
        let mu = c(&mut g, &[2, 2], &[0.3, -1.0, 2.0, 0.0]);
        let var = c(&mut g, &[2, 2], &[0.5, 1.5, 2.0, 0.1]);
        let zero = symmetric_kl(&mut g, mu, mu, var, var).unwrap();
        assert_eq!(val(&g, zero), 0.0);

        let mu2 = c(&mut g, &[2, 2], &[1.0, 0.0, -2.0, 0.5]);
        let var2 = c(&mut g, &[2, 2], &[1.0, 0.5, 0.3, 0.2]);
        let ab = symmetric_kl(&mut g, mu, mu2, var, var2).unwrap();
        let ba = symmetric_kl(&mut g, mu2, mu, var2, var).unwrap();
        assert!((val(&g, ab) - val(&g, ba)).abs() < 1e-12);

        let bad = c(&mut g, &[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(symmetric_kl(&mut g, mu, mu2, var, bad), Err(MastError::Domain(_))));
    }

    #[test]
    fn variance_term_examples() {
        let mut g = Graph::<f64>::new();
        // columns with population variance >= 1
        let wide = c(&mut g, &[2, 2], &[-1.5, 2.0, 1.5, -2.0]);
        let v = variance_term(&mut g, wide, wide).unwrap();
        assert_eq!(val(&g, v), 0.0);

        let flat = c(&mut g, &[3, 4], &[0.7; 12]);
        let v = variance_term(&mut g, flat, flat).unwrap();
        assert!((val(&g, v) - (1.0 - 1e-4f64.sqrt())).abs() < 1e-12);

        let one = c(&mut g, &[1, 4], &[0.0; 4]);
        assert!(matches!(variance_term(&mut g, one, one), Err(MastError::Contract(_))));
    }

    #[test]
    fn variance_term_ignores_column_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (5, 4);
        let a = mat(&mut rng, n, d, -0.5, 0.5);
        let perm = [2, 0, 3, 1];
        let b: Vec<f64> = (0..n).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| a[i * d + j]).collect();
        let mut g = Graph::<f64>::new();
        let (za, zb) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b));
        let va = variance_term(&mut g, za, za).unwrap();
        let vb = variance_term(&mut g, zb, zb).unwrap();
        assert!((val(&g, va) - val(&g, vb)).abs() < 1e-14);
    }

    #[test]
    fn covariance_term_examples_and_oracle() {
        let mut g = Graph::<f64>::new();
        // centered orthogonal columns
        let orth = c(&mut g, &[4, 2], &[1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        let cv = covariance_term(&mut g, orth, orth).unwrap();
        assert!(val(&g, cv).abs() < 1e-15);

        // two identical columns with unit sample variance, d = 2
        let s = (0.5f64).sqrt();
        let dup = c(&mut g, &[2, 2], &[s, s, -s, -s]);
        let zero = c(&mut g, &[2, 2], &[0.0; 4]);
        let cv = covariance_term(&mut g, dup, zero).unwrap();
        assert!((val(&g, cv) - 2.0 / 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (9, 6);
        let (a, b) = (mat(&mut rng, n, d, -1.0, 1.0), mat(&mut rng, n, d, -1.0, 1.0));
        let (za, zb) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b));
        let cv = covariance_term(&mut g, za, zb).unwrap();
        let want = naive_cov_term(&a, n, d) + naive_cov_term(&b, n, d);
        assert!((val(&g, cv) - want).abs() < 1e-10);
    }

    #[test]
    fn coefficient_defaults() {
        let c = LossCoefficients::defaults(128, 5);
        assert_eq!(c.lambda, 640.0);
        assert_eq!(c.lambda1, 0.9375);
        assert_eq!(c.lambda2, 25.0);
        assert_eq!((c.alpha, c.beta), (25.0, 1.0));
        let s = c.scaled(2.0);
        assert_eq!((s.lambda, s.lambda1, s.lambda2, s.alpha), (1280.0, 1.875, 50.0, 25.0));
        let o = CoefficientOverrides {
            lambda2: Some(5.0),
            scale: Some(0.5),
            ..Default::default()
        };
        assert_eq!(o.resolve(128, 4).lambda, 400.0);
        assert_eq!(o.resolve(128, 4).lambda2, 2.5);
    }

    #[test]
    fn identical_views_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, k) = (4, 3, 2);
        let mu = mat(&mut rng, n, d, -1.0, 1.0);
        let var = mat(&mut rng, n, d, 0.5, 1.0);
        let mut g = Graph::<f64>::new();
        let (m1, v1) = (c(&mut g, &[n, d], &mu), c(&mut g, &[n, d], &var));
        let zero = c(&mut g, &[d, k], &vec![0.0; d * k]);
        let views = ViewEmbeddings {
            mean: m1,
            mean2: m1,
            var: v1,
            var2: v1,
        };
        let coeffs = LossCoefficients::defaults(d, k);
        let (_, b) = total_loss(&mut g, &views, zero, &[0, 1], &coeffs).unwrap();
        assert_eq!((b.d_mg, b.l_sp, b.l_kl), (0.0, 0.0, 0.0));
        assert!((b.total - (coeffs.alpha * b.l_var + coeffs.beta * b.l_cov)).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d, k) = (5, 4, 3);
        let mut g = Graph::<f64>::new();
        let mut mk = |lo: f64, hi: f64, r: usize, cc: usize| {
            let v = mat(&mut rng, r, cc, lo, hi);
            c(&mut g, &[r, cc], &v)
        };
        let (a, b) = (mk(-1.0, 1.0, n, d), mk(-1.0, 1.0, n, d));
        let (va, vb) = (mk(0.2, 1.5, n, d), mk(0.2, 1.5, n, d));
        let m = mk(0.0, 1.0, d, k);
        let coeffs = LossCoefficients::defaults(d, k);
        let views = ViewEmbeddings {
            mean: a,
            mean2: b,
            var: va,
            var2: vb,
        };
        let (total, br) = total_loss(&mut g, &views, m, &[1, 2], &coeffs).unwrap();
        let (dm, _) = masked_gaussian_distance(&mut g, a, b, va, vb, m, &[1, 2]).unwrap();
        let sp = sparsity(&mut g, m).unwrap();
        let kl = symmetric_kl(&mut g, a, b, va, vb).unwrap();
        let vr = variance_term(&mut g, a, b).unwrap();
        let cv = covariance_term(&mut g, a, b).unwrap();
        let want = coeffs.lambda * val(&g, dm)
            + coeffs.lambda1 * val(&g, sp)
            + coeffs.lambda2 * val(&g, kl)
            + coeffs.alpha * val(&g, vr)
            + coeffs.beta * val(&g, cv);
        assert!((val(&g, total) - want).abs() < 1e-10);
        assert!((br.recompose(&coeffs) - want).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn terms_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (4, 5, 3);
            let mut g = Graph::<f64>::new();
            let mut mk = |lo: f64, hi: f64, r: usize, cc: usize| {
                let v = mat(&mut rng, r, cc, lo, hi);
                c(&mut g, &[r, cc], &v)
            };
            let (a, b) = (mk(-2.0, 2.0, n, d), mk(-2.0, 2.0, n, d));
            let (va, vb) = (mk(1e-3, 3.0, n, d), mk(1e-3, 3.0, n, d));
            let m = mk(0.0, 1.0, d, k);
            let views = ViewEmbeddings { mean: a, mean2: b, var: va, var2: vb };
            let (_, br) = total_loss(&mut g, &views, m, &[0, 2], &LossCoefficients::defaults(d, k)).unwrap();
            prop_assert!(br.d_mg >= 0.0 && br.l_sp >= 0.0 && br.l_kl >= -1e-12 && br.l_var >= 0.0 && br.l_cov >= 0.0);
        }

        #[test]
        fn more_uncertainty_means_less_distance(seed in any::<u64>(), j in 0usize..5, bump in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (3, 5, 2);
            let a = mat(&mut rng, n, d, -1.0, 1.0);
            let b = mat(&mut rng, n, d, -1.0, 1.0);
            let v = mat(&mut rng, n, d, 0.1, 1.0);
            let m = mat(&mut rng, d, k, 0.1, 1.0);
            let mut v_up = v.clone();
            v_up[j] += bump;
            let mut g = Graph::<f64>::new();
            let (za, zb) = (c(&mut g, &[n, d], &a), c(&mut g, &[n, d], &b));
            let (vv, vu, mm) = (c(&mut g, &[n, d], &v), c(&mut g, &[n, d], &v_up), c(&mut g, &[d, k], &m));
            let (lo, _) = masked_gaussian_distance(&mut g, za, zb, vv, vv, mm, &[0, 1]).unwrap();
            let (hi, _) = masked_gaussian_distance(&mut g, za, zb, vu, vv, mm, &[0, 1]).unwrap();
            prop_assert!(val(&g, hi) < val(&g, lo));
        }
    }
}
