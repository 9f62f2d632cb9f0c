use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MastError, Result};
use crate::tensor::{Element, Tensor};

/// Mean of the in-block prior for a freshly initialized mask column.
pub const BLOCK_PRIOR_MEAN: f64 = 1.0;
pub const BLOCK_PRIOR_STD: f64 = 0.1;
/// Noise added to every entry of `U` at initialization.
pub const NOISE_MEAN: f64 = 0.2;
pub const NOISE_VARIANCE: f64 = 0.01;

/// Learnable `d × K` subspace masks, parameterized as `M = max(0, U)`.
///
/// Column `k` belongs to the `k`-th operator of the run's augmentation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBank<T> {
    pub u: Tensor<T>,
}

impl<T: Element> MaskBank<T> {
    /// Column `k` gets a Gaussian prior on its block of `⌊d/K⌋` dimensions;
    /// every entry additionally receives Gaussian noise.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(MastError::contract(format!("need 1 <= K <= d, got K={k}, d={d}")));
        }
        let block = d / k;
        let prior = Normal::new(BLOCK_PRIOR_MEAN, BLOCK_PRIOR_STD).expect("valid normal");
        let noise = Normal::new(NOISE_MEAN, NOISE_VARIANCE.sqrt()).expect("valid normal");
        let mut u = vec![T::zero(); d * k];
        for j in 0..d {
            for col in 0..k {
                let mut v = noise.sample(rng);
                if j / block == col && j < block * k {
                    v += prior.sample(rng);
                }
                u[j * k + col] = T::f(v);
            }
        }
        Ok(Self {
            u: Tensor::new(vec![d, k], u)?.with_grad(),
        })
    }

    pub fn from_masks(m: Tensor<T>) -> Result<Self> {
        if m.shape().len() != 2 {
            return Err(MastError::dim("mask bank must be 2-D"));
        }
        if m.data().iter().any(|v| *v < T::zero()) {
            return Err(MastError::domain("masks must be nonnegative"));
        }
        Ok(Self { u: m.with_grad() })
    }

    pub fn dim(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.u.shape()[1]
    }

    /// `M = max(0, U)`.
    pub fn masks(&self) -> Tensor<T> {
        let data = self.u.data().iter().map(|&v| v.max(T::zero())).collect();
        Tensor::new(self.u.shape().to_vec(), data).expect("same shape")
    }

    pub fn column(&self, k: usize) -> Result<Vec<T>> {
        if k >= self.k() {
            return Err(MastError::contract(format!("mask column {k} out of range (K={})", self.k())));
        }
        let kk = self.k();
        Ok((0..self.dim()).map(|j| self.u.data()[j * kk + k].max(T::zero())).collect())
    }

    /// Drops column `k` (leave-one-out runs).
    pub fn without_column(&self, k: usize) -> Result<Self> {
        if k >= self.k() || self.k() == 1 {
            return Err(MastError::contract("cannot drop that mask column"));
        }
        let kk = self.k();
        let data = self
            .u
            .data()
            .chunks(kk)
            .flat_map(|row| row.iter().enumerate().filter(|(c, _)| *c != k).map(|(_, v)| *v))
            .collect();
        Ok(Self {
            u: Tensor::new(vec![self.dim(), kk - 1], data)?.with_grad(),
        })
    }
}

/// Diagonal Gaussian `N(μ, diag(σ²))` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> GaussianEmbedding<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(MastError::dim("mean and variance lengths differ"));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `tr(Σ)`.
    pub fn trace(&self) -> T {
        self.var.iter().copied().sum()
    }
}

/// Restricts an embedding to subspace `k`: `μ ⊙ m_k`, `σ² ⊙ m_k`.
pub fn mask_embed<T: Element>(e: &GaussianEmbedding<T>, bank: &MaskBank<T>, k: usize) -> Result<GaussianEmbedding<T>> {
    if e.dim() != bank.dim() {
        return Err(MastError::dim(format!(
            "embedding dim {} vs mask dim {}",
            e.dim(),
            bank.dim()
        )));
    }
    let m = bank.column(k)?;
    Ok(GaussianEmbedding {
        mean: e.mean.iter().zip(&m).map(|(a, b)| *a * *b).collect(),
        var: e.var.iter().zip(&m).map(|(a, b)| *a * *b).collect(),
    })
}
