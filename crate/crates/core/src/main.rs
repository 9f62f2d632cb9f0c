use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mast::augment::{AugmentationSet, OpId};
use mast::checkpoint::Checkpoint;
use mast::config::{Config, ProbeConfig};
use mast::data::{self, Dataset, Factor, Layout, SyntheticSpec};
use mast::eval::{self, render, ProbeResult};
use mast::gradcheck;
use mast::image::Image;
use mast::model::Model;
use mast::tensor::{DType, Element};
use mast::trainer;
use mast::{MastError, Result};

#[derive(Parser)]
#[command(name = "mast", version, about = "Masked augmentation subspace training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic factor dataset.
    GenData(GenData),
    /// Pretrain from a config file.
    Pretrain(Pretrain),
    /// Linear probe on frozen representations.
    Probe(Probe),
    /// Analyses of a trained checkpoint.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Retrain with altered settings and probe each run.
    #[command(subcommand)]
    Ablate(Ablate),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Packed,
    Ppm,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    /// shape, hue, scale or position.
    #[arg(long, default_value = "hue")]
    label_factor: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "packed")]
    layout: LayoutArg,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. `--set schedule.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<Config> {
        let mut c = Config::load(&self.config)?;
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MastError::Config { field: kv.clone(), reason: "expected KEY=VALUE".into() })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct Pretrain {
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 4-way rotation classification instead of dataset labels.
    #[arg(long)]
    rotation: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Analyze {
    /// Cosine similarity between mask columns.
    Masks(CkptArgs),
    /// Masked-embedding invariance to one operator over its strength range.
    Invariance {
        #[command(flatten)]
        base: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 6)]
        points: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Uncertainty of weakly versus strongly augmented views.
    Uncertainty {
        #[command(flatten)]
        base: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class evidence carried by each subspace.
    SubspaceClass {
        #[command(flatten)]
        base: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum Ablate {
    /// Train without each given operator and compare against the full set.
    LeaveOneOut {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, required = true)]
        op: Vec<String>,
    },
    /// Train with λ, λ₁, λ₂ scaled by each multiplier.
    CoeffSweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_values_t = [0.25, 0.5, 1.0, 2.0, 4.0])]
        scale: Vec<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("MAST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MastError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck { seed, out } => {
            let report = gradcheck::run(seed)?;
            for c in &report.checks {
                println!(
                    "{:<5} {:<32} max_err={:.3e} tol={:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance
                );
            }
            println!("{:<5} deterministic", if report.deterministic { "PASS" } else { "FAIL" });
            if let Some(p) = &out {
                render::write_json(p, &report)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(MastError::Contract("gradient check failed".into()))
            }
        }
    }
}

fn emit_json<S: Serialize>(out: Option<&Path>, value: &S) -> Result<()> {
    match out {
        Some(p) => render::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = SyntheticSpec {
        n_samples: a.n,
        side: a.side,
        label_factor: Factor::parse(&a.label_factor)?,
    };
    let ds = data::generate(&spec, a.seed)?;
    let layout = match a.layout {
        LayoutArg::Packed => Layout::Packed,
        LayoutArg::Ppm => Layout::Ppm,
    };
    let manifest = data::save(&ds, &a.out, layout)?;
    log::info!("wrote {} samples to {}", ds.len(), manifest.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let path = match &a.resume {
        Some(ck) => {
            let meta = Checkpoint::load(ck)?.meta;
            let ds = data::load(&meta.config.dataset)?;
            match meta.dtype {
                DType::F32 => trainer::resume::<f32>(ck, &ds)?,
                DType::F64 => trainer::resume::<f64>(ck, &ds)?,
            }
        }
        None => {
            let config = a.overrides.load()?;
            match config.float_width {
                DType::F32 => trainer::pretrain::<f32>(&config)?,
                DType::F64 => trainer::pretrain::<f64>(&config)?,
            }
        }
    };
    println!("{}", path.display());
    Ok(())
}

/// Runs `f` with the checkpoint's model at its stored width.
macro_rules! with_model {
    ($ck:expr, |$m:ident| $body:expr) => {
        match $ck.meta.dtype {
            DType::F32 => {
                let $m: Model<f32> = $ck.model()?;
                $body
            }
            DType::F64 => {
                let $m: Model<f64> = $ck.model()?;
                $body
            }
        }
    };
}

fn probe_config(ck: &Checkpoint, epochs: Option<usize>) -> ProbeConfig {
    let mut cfg = ck.meta.config.probe.clone();
    if let Some(e) = epochs {
        cfg.epochs = e.max(1);
    }
    cfg
}

fn probe(a: Probe) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = data::load(&a.data)?;
    let cfg = probe_config(&ck, a.epochs);
    let r = with_model!(ck, |m| if a.rotation {
        eval::rotation_probe(&m, &ds, &cfg, a.seed)?
    } else {
        eval::linear_probe(&m, &ds, &cfg, a.seed)?
    });
    log::info!("top-1 {}%", r.top1_percent());
    emit_json(a.out.as_deref(), &r)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn sample_images(ds: &Dataset, n: usize) -> Vec<Image> {
    ds.take(n.min(ds.len())).images()
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Masks(b) => {
            let ck = Checkpoint::load(&b.ckpt)?;
            let labels = ck.meta.augmentations.clone();
            let c = with_model!(ck, |m| eval::mask_correlation(&m.masks, &labels)?);
            let mut header = vec!["op"];
            header.extend(labels.iter().map(|l| l.name()));
            let rows: Vec<Vec<String>> = labels
                .iter()
                .zip(&c.matrix)
                .map(|(l, r)| std::iter::once(l.name().to_string()).chain(r.iter().map(|v| fmt(*v))).collect())
                .collect();
            render::write_csv(&b.out.join("mask_correlation.csv"), &header, &rows)?;
            render::write_heatmap(&b.out.join("mask_correlation.ppm"), &c.matrix, 0.0, 1.0)?;
            render::write_json(&b.out.join("mask_correlation.json"), &c)
        }
        Analyze::Invariance {
            base,
            data: dpath,
            op,
            points,
            samples,
            seed,
        } => {
            let ck = Checkpoint::load(&base.ckpt)?;
            let ds = data::load(&dpath)?;
            let op = OpId::parse(&op)?;
            let set = AugmentationSet::from_ids(&ck.meta.augmentations)?;
            let imgs = sample_images(&ds, samples);
            let strengths = eval::default_strengths(points);
            let curve = with_model!(ck, |m| eval::invariance_metric(&m, &set, op, &strengths, &imgs, seed)?);
            let mut header = vec!["strength", "magnitude", "unmasked"];
            header.extend(curve.columns.iter().map(|c| c.name()));
            let rows: Vec<Vec<String>> = curve
                .points
                .iter()
                .map(|p| {
                    [fmt(p.strength), fmt(p.magnitude), fmt(p.unmasked)]
                        .into_iter()
                        .chain(p.subspace.iter().map(|v| fmt(*v)))
                        .collect()
                })
                .collect();
            let stem = format!("invariance_{}", op.name());
            render::write_csv(&base.out.join(format!("{stem}.csv")), &header, &rows)?;
            let mut series: Vec<render::Series> = curve
                .columns
                .iter()
                .enumerate()
                .map(|(k, c)| render::Series {
                    name: format!("subspace {}", c.name()),
                    points: curve.points.iter().map(|p| (p.magnitude, p.subspace[k])).collect(),
                })
                .collect();
            series.push(render::Series {
                name: "unmasked".into(),
                points: curve.points.iter().map(|p| (p.magnitude, p.unmasked)).collect(),
            });
            render::write_line_plot(
                &base.out.join(format!("{stem}.svg")),
                &format!("invariance to {}", op.name()),
                "magnitude",
                "cosine similarity",
                &series,
            )?;
            render::write_json(&base.out.join(format!("{stem}.json")), &curve)
        }
        Analyze::Uncertainty {
            base,
            data: dpath,
            samples,
            seed,
        } => {
            let ck = Checkpoint::load(&base.ckpt)?;
            let ds = data::load(&dpath)?;
            let set = AugmentationSet::from_ids(&ck.meta.augmentations)?;
            let imgs = sample_images(&ds, samples);
            let (cmp, scores) = with_model!(ck, |m| (
                eval::uncertainty_vs_strength(&m, &set, &imgs, seed)?,
                eval::uncertainty_scores(&m, &imgs)?
            ));
            let rows: Vec<Vec<String>> = scores.iter().enumerate().map(|(i, s)| vec![i.to_string(), fmt(*s)]).collect();
            render::write_csv(&base.out.join("uncertainty_scores.csv"), &["index", "score"], &rows)?;
            render::write_csv(
                &base.out.join("uncertainty_strength.csv"),
                &["samples", "weak_mean", "strong_mean", "t_statistic", "p_value"],
                &[vec![
                    cmp.samples.to_string(),
                    fmt(cmp.weak_mean),
                    fmt(cmp.strong_mean),
                    fmt(cmp.t_statistic),
                    format!("{:.6e}", cmp.p_value),
                ]],
            )?;
            render::write_json(&base.out.join("uncertainty_strength.json"), &cmp)
        }
        Analyze::SubspaceClass { base, data: dpath, seed } => {
            let ck = Checkpoint::load(&base.ckpt)?;
            let ds = data::load(&dpath)?;
            let set = AugmentationSet::from_ids(&ck.meta.augmentations)?;
            let cfg = probe_config(&ck, None);
            let r = with_model!(ck, |m| eval::subspace_class_prediction(&m, &set, &ds, &cfg, seed)?);
            let classes = r.counts.len();
            let class_names: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
            let mut header = vec!["subspace"];
            header.extend(class_names.iter().map(String::as_str));
            let rows: Vec<Vec<String>> = r
                .subspaces
                .iter()
                .zip(&r.values)
                .map(|(s, row)| std::iter::once(s.name().to_string()).chain(row.iter().map(|v| fmt(*v))).collect())
                .collect();
            render::write_csv(&base.out.join("subspace_class.csv"), &header, &rows)?;
            if !r.values.is_empty() {
                let hi = r.values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
                render::write_heatmap(&base.out.join("subspace_class.ppm"), &r.values, -hi, hi)?;
            }
            render::write_json(&base.out.join("subspace_class.json"), &r)
        }
    }
}

#[derive(Serialize)]
struct AblationRow {
    run: String,
    checkpoint: PathBuf,
    probe: ProbeResult,
}

fn train_and_probe(config: &Config, ds: &Dataset) -> Result<(PathBuf, ProbeResult)> {
    fn go<T: Element>(config: &Config, ds: &Dataset) -> Result<(PathBuf, ProbeResult)> {
        let path = trainer::pretrain_on::<T>(config, ds)?;
        let model: Model<T> = Checkpoint::load(&path)?.model()?;
        let r = eval::linear_probe(&model, ds, &config.probe, config.seed)?;
        Ok((path, r))
    }
    match config.float_width {
        DType::F32 => go::<f32>(config, ds),
        DType::F64 => go::<f64>(config, ds),
    }
}

fn write_ablation(out: &Path, rows: &[AblationRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.run.clone(), r.probe.top1_percent(), r.checkpoint.display().to_string()])
        .collect();
    for r in rows {
        println!("{:<28} {:>6}%", r.run, r.probe.top1_percent());
    }
    render::write_csv(&out.join("ablation.csv"), &["run", "top1_percent", "checkpoint"], &table)?;
    render::write_json(&out.join("ablation.json"), &rows)
}

fn ablate(a: Ablate) -> Result<()> {
    match a {
        Ablate::LeaveOneOut { overrides, op } => {
            let config = overrides.load()?;
            let ops = op.iter().map(|o| OpId::parse(o)).collect::<Result<Vec<_>>>()?;
            let ds = data::load(&config.dataset)?;
            let mut full = config.clone();
            full.output_dir = config.output_dir.join("full");
            let (checkpoint, probe) = train_and_probe(&full, &ds)?;
            let mut rows = vec![AblationRow {
                run: "full".into(),
                checkpoint,
                probe,
            }];
            for op in ops {
                let c = trainer::leave_one_out_config(&config, op)?;
                let (checkpoint, probe) = train_and_probe(&c, &ds)?;
                rows.push(AblationRow {
                    run: format!("without_{}", op.name()),
                    checkpoint,
                    probe,
                });
            }
            write_ablation(&config.output_dir, &rows)
        }
        Ablate::CoeffSweep { overrides, scale } => {
            let config = overrides.load()?;
            let ds = data::load(&config.dataset)?;
            let mut rows = Vec::new();
            for s in scale {
                let mut c = config.clone();
                c.set("loss.scale", &s.to_string())?;
                c.output_dir = config.output_dir.join(format!("scale_{s}"));
                let (checkpoint, probe) = train_and_probe(&c, &ds)?;
                rows.push(AblationRow {
                    run: format!("scale_{s}"),
                    checkpoint,
                    probe,
                });
            }
            write_ablation(&config.output_dir, &rows)
        }
    }
}
