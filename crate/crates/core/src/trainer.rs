//! Pretraining loop: two-stage augmentation curriculum, cosine learning
//! rate, SGD with momentum and decoupled weight decay, checkpoints and an
//! NDJSON metrics log.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, sample_composition, AugmentationSet, OpId};
use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, StoredArray};
use crate::config::{Config, Objective};
use crate::data::{self, Dataset};
use crate::error::{MastError, Result};
use crate::image::Image;
use crate::loss::{baseline_loss, total_loss, LossBreakdown, LossCoefficients, ViewEmbeddings};
use crate::model::{decays, images_to_tensor, Model};
use crate::tensor::{Element, Graph, Tensor};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Curriculum and optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_epochs: usize,
    pub k_max: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: bool,
    pub clip_norm: f64,
    pub mask_lr_scale: f64,
}

impl Schedule {
    pub fn from_config(c: &Config) -> Result<Self> {
        Ok(Self {
            total_epochs: c.schedule.epochs,
            k_max: c.k_max()?,
            base_lr: c.schedule.base_lr,
            momentum: c.schedule.momentum,
            weight_decay: c.schedule.weight_decay,
            warmup: c.schedule.warmup,
            clip_norm: c.schedule.clip_norm,
            mask_lr_scale: c.schedule.mask_lr_scale,
        })
    }

    /// Composition size for `epoch`: 1 during the first half, then rising
    /// linearly to `k_max` at the final epoch.
    pub fn k_effective(&self, epoch: usize) -> usize {
        let half = self.total_epochs as f64 / 2.0;
        let e = epoch as f64;
        if e < half || self.k_max <= 1 {
            return 1;
        }
        let span = half - 1.0;
        if span <= 0.0 {
            return self.k_max;
        }
        let k = (1.0 + (self.k_max as f64 - 1.0) * (e - half) / span).round();
        (k as usize).clamp(1, self.k_max)
    }
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total_steps`, with an
/// optional linear warmup over the first 2% of steps.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup: bool) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    let lr = base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    if warmup {
        let w = (0.02 * total_steps as f64).ceil().max(1.0);
        lr * ((step as f64 + 1.0) / w).min(1.0)
    } else {
        lr
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub k_effective: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    /// Mask columns whose subspace term was trained.
    #[serde(skip)]
    pub active: Vec<usize>,
}

const TAG_STEP: u64 = 0x5354_4550;
const TAG_EPOCH: u64 = 0x4550_4f43;

/// SplitMix64 over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Record order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_EPOCH, epoch as u64])));
    idx
}

/// Model plus optimizer state.
pub struct Trainer<T> {
    pub config: Config,
    pub set: AugmentationSet,
    pub schedule: Schedule,
    pub coeffs: LossCoefficients,
    pub model: Model<T>,
    velocity: Vec<Tensor<T>>,
    /// Completed optimizer steps.
    pub step: usize,
    steps_per_epoch: usize,
}

impl<T: Element> Trainer<T> {
    /// Fresh model for `config`; `dataset_len` fixes the steps per epoch.
    pub fn new(config: Config, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let set = config.augmentation_set()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0x4d4f_444c]));
        let model = Model::new(&mut rng, config.model.clone(), set.len())?;
        Self::assemble(config, set, model, None, 0, dataset_len)
    }

    fn assemble(
        config: Config,
        set: AugmentationSet,
        model: Model<T>,
        velocity: Option<Vec<Tensor<T>>>,
        step: usize,
        dataset_len: usize,
    ) -> Result<Self> {
        let steps_per_epoch = dataset_len / config.schedule.batch_size;
        if steps_per_epoch == 0 {
            return Err(MastError::config(
                "schedule.batch_size",
                format!("dataset of {dataset_len} records cannot fill one batch"),
            ));
        }
        let velocity = velocity.unwrap_or_else(|| {
            model
                .named_params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        });
        Ok(Self {
            schedule: Schedule::from_config(&config)?,
            coeffs: config.coefficients()?,
            config,
            set,
            model,
            velocity,
            step,
            steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.schedule.total_epochs
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// One optimizer step on `batch` during `epoch`.
    pub fn train_step(&mut self, batch: &[Image], epoch: usize) -> Result<StepRecord> {
        if batch.len() < 2 {
            return Err(MastError::contract("a training batch needs at least 2 images"));
        }
        let k_eff = self.schedule.k_effective(epoch);
        let seed = derive_seed(&[self.config.seed, TAG_STEP, self.step as u64]);
        let plan = sample_composition(&mut ChaCha8Rng::seed_from_u64(seed), &self.set, k_eff)?;
        let set = &self.set;
        let views: Vec<(Image, Image)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
                make_views(img, &plan.redraw(&mut rng, set)?)
            })
            .collect::<Result<_>>()?;
        let n = batch.len();
        let stacked: Vec<Image> = views
            .iter()
            .map(|v| v.0.clone())
            .chain(views.iter().map(|v| v.1.clone()))
            .collect();

        let mut g = Graph::<T>::new();
        let bound = self.model.bind(&mut g, true)?;
        let x = g.constant(images_to_tensor(&stacked)?)?;
        let (map, y) = self.model.encode(&mut g, &bound, x)?;
        let (mu, var) = self.model.project(&mut g, &bound, map, y)?;
        let ve = ViewEmbeddings {
            mean: g.slice_rows(mu, 0, n)?,
            mean2: g.slice_rows(mu, n, 2 * n)?,
            var: g.slice_rows(var, 0, n)?,
            var2: g.slice_rows(var, n, 2 * n)?,
        };
        let c = self.coeffs;
        let (loss, breakdown) = match self.config.objective {
            Objective::Mast => {
                let m = self.model.mask_var(&mut g, &bound)?;
                total_loss(&mut g, &ve, m, &plan.selected_ops, &c)?
            }
            Objective::Baseline => baseline_loss(&mut g, ve.mean, ve.mean2, c.lambda, c.alpha, c.beta)?,
        };
        let lr = lr_at(self.step, self.total_steps(), self.schedule.base_lr, self.schedule.warmup);
        let record = StepRecord {
            step: self.step,
            epoch,
            k_effective: k_eff,
            lr,
            breakdown,
            active: plan.selected_ops.clone(),
        };
        let diverged = || MastError::Diverged {
            step: record.step,
            breakdown: serde_json::to_string(&record).unwrap_or_default(),
        };
        if !breakdown.is_finite() {
            return Err(diverged());
        }
        let mut grads = g.backward(loss)?;
        let vars: Vec<_> = bound.vars().iter().copied().chain([bound.masks]).collect();
        let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|v| grads.take(*v)).collect();
        if grads.iter().flatten().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(diverged());
        }
        self.apply_update(&grads, lr);
        self.step += 1;
        Ok(record)
    }

    /// `v ← μv + g`, `p ← p − lr·(v + wd·p)` with decay only on decaying
    /// parameters. The gradient is first rescaled to at most `clip_norm`.
    fn apply_update(&mut self, grads: &[Option<Tensor<T>>], lr: f64) {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = self.schedule.clip_norm;
        let gscale = T::f(if clip > 0.0 && norm > clip { clip / norm } else { 1.0 });
        let (mom, wd) = (T::f(self.schedule.momentum), T::f(self.schedule.weight_decay));
        let mask_lr = T::f(lr * self.schedule.mask_lr_scale);
        let lr = T::f(lr);
        for (((name, p), v), g) in self
            .model
            .named_params_mut()
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(grads)
        {
            let decay = if decays(name) { wd } else { T::zero() };
            let step = if name.starts_with("masks.") { mask_lr } else { lr };
            let gd = g.as_ref().map(|t| t.data());
            for (j, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gj = gd.map_or(T::zero(), |d| d[j] * gscale);
                *vv = mom * *vv + gj;
                *pv = *pv - step * (*vv + decay * *pv);
            }
        }
        self.model.project_constraints();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        for ((name, p), v) in self.model.named_params().into_iter().zip(&self.velocity) {
            arrays.push(StoredArray::from_tensor(&format!("param.{name}"), p));
            arrays.push(StoredArray::from_tensor(&format!("velocity.{name}"), v));
        }
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.config.hash(),
                config: self.config.clone(),
                epoch: self.epoch(),
                step: self.step,
                rng: RngState {
                    seed: self.config.seed,
                    step: self.step as u64,
                },
                dtype: T::DTYPE,
                augmentations: self.set.ids(),
            },
            arrays,
        }
    }

    /// Restores the full training state.
    pub fn from_checkpoint(ck: &Checkpoint, dataset_len: usize) -> Result<Self> {
        let config = ck.meta.config.clone();
        if config.hash() != ck.meta.config_hash {
            return Err(MastError::Format("checkpoint config hash mismatch".into()));
        }
        let set = AugmentationSet::from_ids(&ck.meta.augmentations)?;
        let model = ck.model::<T>()?;
        let velocity = model
            .named_params()
            .iter()
            .map(|(name, _)| {
                let key = format!("velocity.{name}");
                ck.array(&key)
                    .ok_or_else(|| MastError::Format(format!("checkpoint lacks `{key}`")))?
                    .to_tensor()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config, set, model, Some(velocity), ck.meta.step, dataset_len)
    }

    /// Trains until the schedule ends, writing the metrics log and
    /// checkpoints under `config.output_dir`. Returns the final checkpoint.
    pub fn run(&mut self, data: &Dataset) -> Result<PathBuf> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| MastError::io("creating output directory", &out, e))?;
        let log_path = out.join(METRICS_FILE);
        let kept = kept_log_lines(&log_path, self.step)?;
        let file = fs::File::create(&log_path).map_err(|e| MastError::io("creating metrics log", &log_path, e))?;
        let mut log = BufWriter::new(file);
        for line in kept {
            writeln!(log, "{line}").map_err(|e| MastError::io("writing metrics log", &log_path, e))?;
        }
        let n = data.len();
        let bs = self.config.schedule.batch_size;
        let mut order = (usize::MAX, Vec::new());
        while !self.done() {
            let epoch = self.epoch();
            if order.0 != epoch {
                order = (epoch, epoch_order(self.config.seed, epoch, n));
            }
            let within = self.step % self.steps_per_epoch;
            let batch: Vec<Image> = order.1[within * bs..(within + 1) * bs]
                .iter()
                .map(|&i| data.records[i].image.clone())
                .collect();
            let rec = self.train_step(&batch, epoch)?;
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| MastError::io("writing metrics log", &log_path, e))?;
            if self.step % self.steps_per_epoch == 0 {
                log.flush().map_err(|e| MastError::io("writing metrics log", &log_path, e))?;
                let finished = self.epoch();
                let every = self.config.schedule.ckpt_every;
                if every > 0 && finished % every == 0 && !self.done() {
                    self.checkpoint().save(&out.join("checkpoints").join(format!("epoch_{finished:04}.ckpt")))?;
                }
                let masks = self.model.masks.masks();
                let mass = masks.data().iter().map(|v| v.as_f64()).sum::<f64>() / masks.data().len() as f64;
                log::info!(
                    "epoch {finished}/{} done, loss {:.4}, d_mg {:.4}, mean mask {:.4}",
                    self.schedule.total_epochs,
                    rec.breakdown.total,
                    rec.breakdown.d_mg,
                    mass
                );
            }
        }
        log.flush().map_err(|e| MastError::io("writing metrics log", &log_path, e))?;
        let path = out.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}

fn kept_log_lines(path: &Path, steps: usize) -> Result<Vec<String>> {
    if steps == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(|e| MastError::io("reading metrics log", path, e))?;
    BufReader::new(f)
        .lines()
        .take(steps)
        .map(|l| l.map_err(|e| MastError::io("reading metrics log", path, e)))
        .collect()
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| MastError::io("reading metrics log", path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(MastError::from))
        .collect()
}

/// Pretrains from scratch at width `T`.
pub fn pretrain<T: Element>(config: &Config) -> Result<PathBuf> {
    let data = data::load(&config.dataset)?;
    pretrain_on::<T>(config, &data)
}

pub fn pretrain_on<T: Element>(config: &Config, data: &Dataset) -> Result<PathBuf> {
    Trainer::<T>::new(config.clone(), data.len())?.run(data)
}

/// Continues a run from a checkpoint.
pub fn resume<T: Element>(checkpoint: &Path, data: &Dataset) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    Trainer::<T>::from_checkpoint(&ck, data.len())?.run(data)
}

/// Config for a run without `op` (and its mask column), written to a
/// sibling output directory.
pub fn leave_one_out_config(config: &Config, op: OpId) -> Result<Config> {
    let set = config.augmentation_set()?.without(op)?;
    let mut c = config.clone();
    c.augmentations = set.ids().iter().map(|id| id.name()).collect::<Vec<_>>().join(",");
    c.output_dir = config.output_dir.join(format!("loo_{}", op.name()));
    c.validate()?;
    Ok(c)
}

pub fn leave_one_out<T: Element>(config: &Config, op: OpId, data: &Dataset) -> Result<PathBuf> {
    pretrain_on::<T>(&leave_one_out_config(config, op)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Factor, SyntheticSpec};
    use crate::model::ModelConfig;

    fn schedule(e: usize, k: usize) -> Schedule {
        Schedule {
            total_epochs: e,
            k_max: k,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            warmup: false,
            clip_norm: 0.0,
            mask_lr_scale: 1.0,
        }
    }

    #[test]
    fn curriculum_shape() {
        let s = schedule(20, 5);
        let ks: Vec<usize> = (0..20).map(|e| s.k_effective(e)).collect();
        assert!(ks[..10].iter().all(|&k| k == 1));
        assert_eq!(ks[19], 5);
        assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ks[10..].to_vec(), vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        // odd epoch counts and tiny schedules
        let s = schedule(21, 15);
        assert_eq!(s.k_effective(10), 1);
        assert_eq!(s.k_effective(20), 15);
        assert_eq!(schedule(2, 3).k_effective(1), 3);
        assert_eq!(schedule(1, 3).k_effective(0), 1);
        assert_eq!(schedule(10, 1).k_effective(9), 1);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(lr_at(0, 100, 0.05, false), 0.05);
        assert!(lr_at(100, 100, 0.05, false).abs() < 1e-18);
        assert!((lr_at(50, 100, 0.05, false) - 0.025).abs() < 1e-15);
        assert!(lr_at(0, 100, 0.05, true) < 0.05);
        assert_eq!(lr_at(1, 100, 0.05, true), lr_at(1, 100, 0.05, false));
        let lrs: Vec<f64> = (0..=100).map(|s| lr_at(s, 100, 1.0, false)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    pub(crate) fn tiny_config(dir: &Path) -> Config {
        let mut c = Config::default();
        c.output_dir = dir.to_path_buf();
        c.seed = 3;
        c.model = ModelConfig {
            embed_dim: 8,
            hidden: 8,
            channels: [4, 4, 8],
            ..ModelConfig::default()
        };
        c.schedule.epochs = 4;
        c.schedule.batch_size = 6;
        c
    }

    fn tiny_data() -> Dataset {
        generate(
            &SyntheticSpec {
                n_samples: 24,
                side: 16,
                label_factor: Factor::Hue,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn stage_one_trains_a_single_subspace() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let mut t = Trainer::<f64>::new(tiny_config(dir.path()), data.len()).unwrap();
        let imgs = data.images();
        for s in 0..4 {
            let rec = t.train_step(&imgs[s * 6..(s + 1) * 6], 0).unwrap();
            assert_eq!(rec.k_effective, 1);
            assert_eq!(rec.active.len(), 1);
        }
        let rec = t.train_step(&imgs[..6], 3).unwrap();
        assert_eq!(rec.active.len(), 5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let mut c = tiny_config(dir.path());
        c.schedule.base_lr = 0.0;
        let mut t = Trainer::<f64>::new(c, data.len()).unwrap();
        let before = t.model.clone();
        let imgs = data.images();
        t.train_step(&imgs[..6], 0).unwrap();
        t.train_step(&imgs[6..12], 3).unwrap();
        for ((_, a), (_, b)) in before.named_params().into_iter().zip(t.model.named_params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn parameters_move_and_weight_decay_skips_masks() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let mut c = tiny_config(dir.path());
        c.schedule.weight_decay = 0.5;
        let mut t = Trainer::<f64>::new(c, data.len()).unwrap();
        let before = t.model.clone();
        // no gradient reaches unused parameters: only decay moves them
        t.velocity.iter_mut().for_each(|v| v.data_mut().iter_mut().for_each(|x| *x = 0.0));
        let grads: Vec<Option<Tensor<f64>>> = vec![None; t.velocity.len()];
        t.apply_update(&grads, 0.1);
        for ((name, a), (_, b)) in before.named_params().into_iter().zip(t.model.named_params()) {
            let same = a.data() == b.data();
            let zero = a.data().iter().all(|v| *v == 0.0);
            assert_eq!(same, !decays(name) || zero, "{name}");
        }
    }

    #[test]
    fn runs_are_reproducible_and_resume_exactly() {
        let data = tiny_data();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut c1 = tiny_config(d1.path());
        c1.schedule.ckpt_every = 2;
        let mut c2 = c1.clone();
        c2.output_dir = d2.path().to_path_buf();
        pretrain_on::<f64>(&c1, &data).unwrap();
        pretrain_on::<f64>(&c2, &data).unwrap();
        let log1 = fs::read_to_string(d1.path().join(METRICS_FILE)).unwrap();
        let log2 = fs::read_to_string(d2.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log1, log2);
        let recs = read_metrics(&d1.path().join(METRICS_FILE)).unwrap();
        assert_eq!(recs.len(), 16);
        assert!(recs.iter().all(|r| r.breakdown.is_finite()));

        // resume from the mid-run checkpoint into the second directory
        let mid = d1.path().join("checkpoints/epoch_0002.ckpt");
        let ck = Checkpoint::load(&mid).unwrap();
        assert_eq!(ck.meta.step, 8);
        let mut ck2 = ck.clone();
        ck2.meta.config.output_dir = d2.path().to_path_buf();
        ck2.meta.config_hash = ck2.meta.config.hash();
        let path = d2.path().join("mid.ckpt");
        ck2.save(&path).unwrap();
        resume::<f64>(&path, &data).unwrap();
        assert_eq!(fs::read_to_string(d2.path().join(METRICS_FILE)).unwrap(), log1);
        let a = Checkpoint::load(&d1.path().join(FINAL_CHECKPOINT)).unwrap();
        let b = Checkpoint::load(&d2.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(a.arrays, b.arrays);
    }

    #[test]
    fn leave_one_out_drops_a_column() {
        let c = Config::default();
        let loo = leave_one_out_config(&c, OpId::GaussianBlur).unwrap();
        assert_eq!(loo.k_max().unwrap(), 4);
        assert_eq!(loo.coefficients().unwrap().lambda, 25.0 * 128.0 / 4.0);
        let mut single = Config::default();
        single.augmentations = "rotate".into();
        assert!(matches!(
            leave_one_out_config(&single, OpId::Rotate),
            Err(MastError::Contract(_))
        ));
        assert!(leave_one_out_config(&c, OpId::Rotate).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_breakdown() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let mut t = Trainer::<f64>::new(tiny_config(dir.path()), data.len()).unwrap();
        let mut w = t.model.param("projector.mean.weight").unwrap().clone();
        w.data_mut()[0] = f64::NAN;
        t.model.set_param("projector.mean.weight", w).unwrap();
        match t.train_step(&data.images()[..6], 0) {
            Err(MastError::Diverged { step, breakdown }) => {
                assert_eq!(step, 0);
                assert!(breakdown.contains("d_mg"));
            }
            other => panic!("{other:?}"),
        }
    }
}
