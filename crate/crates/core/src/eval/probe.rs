use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::error::{MastError, Result};

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    pub dim: usize,
    pub classes: usize,
    /// `[classes][dim]`, acting on standardized features.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

impl ProbeResult {
    /// Accuracy as a percentage with two decimals.
    pub fn top1_percent(&self) -> String {
        format!("{:.2}", 100.0 * self.top1)
    }
}

fn check_rows(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(MastError::contract(format!(
            "{} feature rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(MastError::contract("no samples"));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(MastError::dim("feature rows differ in length"));
    }
    if let Some(bad) = y.iter().find(|&&c| c >= classes) {
        return Err(MastError::contract(format!("label {bad} outside {classes} classes")));
    }
    Ok(dim)
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl SoftmaxClassifier {
    /// Mini-batch SGD with momentum 0.9 and a cosine learning rate.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        let dim = check_rows(x, y, classes)?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in x {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        let mut w = vec![vec![0.0; dim]; classes];
        let mut b = vec![0.0; classes];
        let mut vw = vec![vec![0.0; dim]; classes];
        let mut vb = vec![0.0; classes];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let bs = cfg.batch_size.min(xs.len()).max(1);
        let steps_per_epoch = xs.len().div_ceil(bs);
        let total = (cfg.epochs * steps_per_epoch) as f64;
        let mut step = 0usize;
        let mut gw = vec![vec![0.0; dim]; classes];
        let mut gb = vec![0.0; classes];
        let mut z = vec![0.0; classes];
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                gw.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
                gb.iter_mut().for_each(|v| *v = 0.0);
                for &i in chunk {
                    for c in 0..classes {
                        z[c] = b[c] + w[c].iter().zip(&xs[i]).map(|(a, v)| a * v).sum::<f64>();
                    }
                    softmax_in_place(&mut z);
                    z[y[i]] -= 1.0;
                    for c in 0..classes {
                        gb[c] += z[c];
                        for (g, v) in gw[c].iter_mut().zip(&xs[i]) {
                            *g += z[c] * v;
                        }
                    }
                }
                let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
                let inv = 1.0 / chunk.len() as f64;
                for c in 0..classes {
                    for j in 0..dim {
                        let g = gw[c][j] * inv + cfg.weight_decay * w[c][j];
                        vw[c][j] = 0.9 * vw[c][j] + g;
                        w[c][j] -= lr * vw[c][j];
                    }
                    vb[c] = 0.9 * vb[c] + gb[c] * inv;
                    b[c] -= lr * vb[c];
                }
                step += 1;
            }
        }
        Ok(Self {
            dim,
            classes,
            weights: w,
            bias: b,
            feature_mean: mean,
            feature_scale: scale,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + x.iter()
                        .zip(&self.feature_mean)
                        .zip(&self.feature_scale)
                        .zip(&self.weights[c])
                        .map(|(((v, m), s), w)| w * (v - m) / s)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        // first maximum wins ties
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }

    /// Weights for class `c` acting on raw (unstandardized) features.
    pub fn raw_weights(&self, c: usize) -> Vec<f64> {
        self.weights[c].iter().zip(&self.feature_scale).map(|(w, s)| w / s).collect()
    }

    pub fn evaluate(&self, x: &[Vec<f64>], y: &[usize]) -> Result<ProbeResult> {
        check_rows(x, y, self.classes)?;
        let mut confusion = vec![vec![0usize; self.classes]; self.classes];
        for (r, &t) in x.iter().zip(y) {
            confusion[t][self.predict(r)] += 1;
        }
        let correct: usize = (0..self.classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(ProbeResult {
            top1: correct as f64 / x.len() as f64,
            per_class,
            confusion,
            samples: x.len(),
        })
    }
}

/// Trains on `(train_x, train_y)` and reports accuracy on the test rows.
pub fn probe_features(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    SoftmaxClassifier::fit(train_x, train_y, classes, cfg, seed)?.evaluate(test_x, test_y)
}
