use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use seld_autodiff::TensorError;
use seld_core::audio::FoaClip;
use seld_core::events::EventList;
use seld_core::features::{FeatureConfig, FeatureExtractor};
use seld_core::metrics::{decode, evaluate, MetricsConfig};
use seld_core::model::{Pooling, Variant};
use seld_core::synth::{make_dataset, DatasetConfig, OverlapProfile};
use seld_core::target::{segment, SegmentConfig};
use seld_core::train::{predict_clip, train, Checkpoint, ClipData, Dataset, RunConfig};
use seld_core::SeldError;

mod selftest;

#[derive(Parser)]
#[command(name = "cst-seld", version, about = "Sound event localization and detection with CST-former models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic FOA dataset (WAV + CSV pairs and a manifest).
    Synth(SynthArgs),
    /// Extract log-mel + intensity-vector features into per-clip caches.
    Extract(ExtractArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a predicted event CSV against a reference CSV.
    Evaluate(EvaluateArgs),
    /// Run a checkpoint on one WAV file and write the detected events.
    Infer(InferArgs),
    /// Run the fast invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mono, ov2 or ov3.
    #[arg(long, default_value = "ov2")]
    overlap: String,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    /// Add diffuse noise at this SNR; noiseless when absent.
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Dataset directory (manifest or WAV + CSV pairs).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config whose [features] section to use.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset or feature-cache directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// dst, dca or ule.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    cmt: Option<bool>,
    /// front or middle.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    classes: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offset added to every analytic gradient.
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb_grad: f64,
}

/// Failure of the tool itself rather than of its input.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn is_internal(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<Internal>() {
            return true;
        }
        let tensor = |t: &TensorError| {
            matches!(
                t,
                TensorError::InvalidShape { .. } | TensorError::NonScalarRoot(_) | TensorError::UnknownParameter(_) | TensorError::DuplicateParameter(_)
            )
        };
        match e.downcast_ref::<SeldError>() {
            Some(SeldError::NonFinite(_) | SeldError::Capacity(_)) => true,
            Some(SeldError::Tensor(t)) => tensor(t),
            _ => e.downcast_ref::<TensorError>().is_some_and(tensor),
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_internal(&e) { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Infer(a) => infer(a),
        Command::Selftest(a) => {
            let results = selftest::run(a.seed, a.perturb_grad);
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{}/{} checks passed", results.len() - failed, results.len());
            if failed > 0 {
                return Err(Internal(format!("{failed} self-test check(s) failed")).into());
            }
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let overlap: OverlapProfile = a.overlap.parse()?;
    if a.clips == 0 || !(a.duration > 0.0) {
        return Err(anyhow!("--clips and --duration must be positive"));
    }
    let cfg = DatasetConfig {
        n_clips: a.clips,
        overlap,
        seed: a.seed,
        duration_s: a.duration,
        noise_snr_db: a.snr_db,
        ..Default::default()
    };
    let m = make_dataset(&a.out, &cfg)?;
    println!("wrote {} clips to {} (seed {})", m.clips.len(), a.out.display(), a.seed);
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn extract(a: ExtractArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ex = FeatureExtractor::new(cfg.features.clone())?;
    let clips = Dataset::load_clips(&a.data, &ex, cfg.model.n_classes)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for c in &clips {
        c.save(a.out.join(format!("{}.feat", c.name)))?;
    }
    println!("extracted {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn segment_config(cfg: &RunConfig) -> SegmentConfig {
    SegmentConfig {
        feature_frames: cfg.model.seg_frames,
        label_ratio: cfg.model.seg_frames / cfg.model.label_frames(),
    }
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(c) = a.cmt {
        cfg.model.use_cmt = c;
    }
    if let Some(p) = &a.pooling {
        cfg.model.pooling = p.parse::<Pooling>()?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ex = FeatureExtractor::new(cfg.features.clone())?;
    let data = Dataset::load(&a.data, &ex, cfg.model.n_classes, segment_config(&cfg))?;
    let out = train(&cfg, &data, Some(&a.out), &mut |line| println!("{line}"))?;
    match (out.record.best_epoch, out.record.best_seld) {
        (Some(e), Some(s)) => println!("best SELD {s:.4} at epoch {e}; run directory {}", a.out.display()),
        _ => println!("run directory {}", a.out.display()),
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let read = |path: &Path| EventList::read_csv(path, a.classes).with_context(|| format!("reading {}", path.display()));
    let pred = read(&a.pred)?;
    let reference = read(&a.reference)?;
    let cfg = MetricsConfig {
        num_classes: a.classes,
        ..Default::default()
    };
    let r = evaluate(&pred, &reference, &cfg);
    println!("{}", r.summary());
    println!("SELD_score {}", r.seld_score);
    if let Some(p) = &a.out {
        std::fs::write(p, r.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let (model, ck) = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mcfg = model.config().clone();
    let fcfg = FeatureConfig {
        n_mels: mcfg.n_mels,
        ..Default::default()
    };
    let audio = FoaClip::read_wav(&a.wav)?;
    let features = FeatureExtractor::new(fcfg)?.extract(&audio)?;
    let seg = SegmentConfig {
        feature_frames: mcfg.seg_frames,
        label_ratio: mcfg.seg_frames / mcfg.label_frames(),
    };
    let clip = ClipData {
        name: a.wav.display().to_string(),
        segments: segment(&features, &EventList::new(), mcfg.n_classes, seg)?,
        events: EventList::new(),
    };
    let y = predict_clip(&model, &ck.store, &clip)?;
    let metrics = MetricsConfig {
        num_classes: mcfg.n_classes,
        ..Default::default()
    };
    let events = decode(&y, &metrics)?.to_event_list();
    events.write_csv(&a.out)?;
    println!("{} events over {} frames written to {}", events.len(), y.shape()[0], a.out.display());
    Ok(())
}
