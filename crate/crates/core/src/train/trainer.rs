use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seld_autodiff::{ForwardCtx, Graph, ParamStore, Tensor};

use super::adam::{clip_grad_norm, Adam};
use super::checkpoint::{Checkpoint, HistoryEntry};
use super::data::{ClipData, Dataset};
use super::schedule::lr_at;
use super::RunConfig;
use crate::error::{io_err, Result, SeldError};
use crate::events::{Event, EventList};
use crate::loss::adpit_loss;
use crate::metrics::{decode, evaluate, MetricsConfig, MetricsReport};
use crate::model::{count_params, CstFormer};
use crate::target::MultiAccdoaTarget;

pub const METRICS_HEADER: &str = "epoch,loss,lr,ER,F,LE,LR,SELD";

const EVAL_BATCH: usize = 4;

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub metrics: Option<MetricsReport>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate applied at every optimizer step.
    pub lr_trace: Vec<f64>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_seld: Option<f64>,
    pub n_params: usize,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{:.8},{:.8e}", e.epoch, e.loss, e.lr);
            match &e.metrics {
                Some(m) => {
                    let _ = writeln!(s, ",{:.6},{:.6},{:.6},{:.6},{:.6}", m.er, m.f, m.le, m.lr, m.seld_score);
                }
                None => s.push_str(",,,,,\n"),
            }
        }
        s
    }
}

pub struct TrainOutput {
    pub model: CstFormer,
    /// Weights after the last epoch.
    pub store: ParamStore<f32>,
    /// Weights of the best evaluated epoch (the last weights if never evaluated).
    pub best_store: ParamStore<f32>,
    pub record: RunRecord,
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Model output for every segment of a clip, concatenated along time and
/// cut to the clip's label frames: `(T_label, tracks·3·K)`.
pub fn predict_clip(model: &CstFormer, store: &ParamStore<f32>, clip: &ClipData) -> Result<Tensor<f32>> {
    let mut rows: Vec<f32> = Vec::new();
    let mut n_frames = 0;
    let mut width = 0;
    for chunk in clip.segments.chunks(EVAL_BATCH) {
        let x = stack(&chunk.iter().map(|s| &s.features).collect::<Vec<_>>())?;
        let y = model.predict(store, &x)?;
        let (t, d) = (y.shape()[1], y.shape()[2]);
        width = d;
        for (i, seg) in chunk.iter().enumerate() {
            let valid = seg.valid_frames.div_ceil(seg.features.shape()[1] / t);
            rows.extend_from_slice(&y.data()[i * t * d..(i * t + valid) * d]);
            n_frames += valid;
        }
    }
    Ok(Tensor::new(vec![n_frames, width], rows)?)
}

/// Decodes every clip and scores them jointly; clips are laid end to end on
/// segment-aligned frame offsets.
pub fn evaluate_model(model: &CstFormer, store: &ParamStore<f32>, clips: &[&ClipData], cfg: &MetricsConfig) -> Result<(MetricsReport, Vec<EventList>)> {
    let mut all_pred = EventList::new();
    let mut all_ref = EventList::new();
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut offset = 0;
    for clip in clips {
        let pred = decode(&predict_clip(model, store, clip)?, cfg)?.to_event_list();
        let span = clip.segments.iter().map(|s| s.target.n_frames()).sum::<usize>().max(pred.n_frames()).max(clip.events.n_frames());
        let span = span.div_ceil(cfg.segment_frames.max(1)) * cfg.segment_frames.max(1);
        for (src, dst) in [(&pred, &mut all_pred), (&clip.events, &mut all_ref)] {
            for e in src.events() {
                dst.push(Event { frame: e.frame + offset, ..*e });
            }
        }
        offset += span;
        per_clip.push(pred);
    }
    Ok((evaluate(&all_pred, &all_ref, cfg), per_clip))
}

fn split(data: &Dataset, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = data.clips.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if frac <= 0.0 || n < 2 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002));
    let n_val = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn grad_dump(store: &ParamStore<f32>) -> String {
    let mut norms: Vec<(f64, &str)> = store
        .iter()
        .filter_map(|(_, p)| {
            p.grad
                .as_ref()
                .map(|g| (g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(), p.name.as_str()))
        })
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Less));
    norms.iter().take(5).map(|(n, name)| format!("{name}={n:.3e}")).collect::<Vec<_>>().join(", ")
}

struct RunDir<'a> {
    root: &'a Path,
    log: std::fs::File,
}

impl<'a> RunDir<'a> {
    fn create(root: &'a Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(io_err(root))?;
        let cfg_path = root.join("config.toml");
        std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
        let log_path = root.join("log.txt");
        let log = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
        Ok(Self { root, log })
    }
}

/// Trains on `data`, optionally writing a run directory to `out`. `log`
/// receives each progress line.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<TrainOutput> {
    cfg.validate()?;
    let tc = &cfg.train;
    let (train_idx, val_idx) = split(data, tc.val_fraction, tc.seed);
    let examples: Vec<(usize, usize)> = train_idx.iter().flat_map(|&c| (0..data.clips[c].segments.len()).map(move |s| (c, s))).collect();
    if examples.is_empty() {
        return Err(SeldError::Config("training set is empty".into()));
    }
    let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let eval_clips: Vec<&ClipData> = eval_idx.iter().map(|&i| &data.clips[i]).collect();

    let mut run_dir = out.map(|p| RunDir::create(p, cfg)).transpose()?;
    let mut emit = |line: String, run_dir: &mut Option<RunDir>| -> Result<()> {
        log(&line);
        if let Some(d) = run_dir {
            writeln!(d.log, "{line}").map_err(io_err(d.root.join("log.txt")))?;
        }
        Ok(())
    };

    let (model, mut store) = CstFormer::init(&cfg.model, tc.seed)?;
    let mut record = RunRecord {
        n_params: count_params(&store),
        ..Default::default()
    };
    emit(format!("model parameters: {}", record.n_params), &mut run_dir)?;
    emit(
        format!(
            "seed {}; {} training clips ({} segments), {} evaluation clips",
            tc.seed,
            train_idx.len(),
            examples.len(),
            eval_clips.len()
        ),
        &mut run_dir,
    )?;

    let batches_per_epoch = examples.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let mut adam = Adam::default();
    let mut order = examples.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let mut best_store = store.clone();
    let mut history = Vec::new();
    let mut step = 0usize;
    let started = Instant::now();

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, batch) in order.chunks(tc.batch_size).enumerate() {
            let segs: Vec<_> = batch.iter().map(|&(c, s)| &data.clips[c].segments[s]).collect();
            let x = stack(&segs.iter().map(|s| &s.features).collect::<Vec<_>>())?;
            let targets: Vec<MultiAccdoaTarget> = segs.iter().map(|s| s.target.clone()).collect();
            let g = Graph::new();
            let ctx = ForwardCtx::train(tc.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64);
            let y = model.forward(&g, &store, g.input(x), &ctx)?;
            let loss = adpit_loss(y, &targets)?;
            let loss_val = loss.value().item() as f64;
            lr = lr_at(step + 1, total_steps, tc);
            if !loss_val.is_finite() {
                return Err(SeldError::NonFinite(format!(
                    "epoch {epoch} batch {bi}: loss {loss_val}, lr {lr:.3e}, last grad norms: {}",
                    grad_dump(&store)
                )));
            }
            if step == 0 {
                record.initial_loss = loss_val;
            }
            store.zero_grads();
            g.backward(loss)?.write_to(&mut store);
            drop(g);
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(SeldError::NonFinite(format!(
                    "epoch {epoch} batch {bi}: gradient norm {norm}, loss {loss_val}, lr {lr:.3e}; largest: {}",
                    grad_dump(&store)
                )));
            }
            if tc.clip_grad_norm > 0.0 {
                clip_grad_norm(&mut store, tc.clip_grad_norm);
            }
            adam.step(&mut store, lr);
            ctx.apply_bn_updates(&mut store);
            record.lr_trace.push(lr);
            loss_sum += loss_val;
            step += 1;
        }
        let loss = loss_sum / batches_per_epoch as f64;
        let metrics = if epoch % tc.eval_every.max(1) == 0 || epoch == tc.epochs {
            Some(evaluate_model(&model, &store, &eval_clips, &cfg.metrics)?.0)
        } else {
            None
        };
        let mut line = format!("epoch {epoch:4}  loss {loss:.6}  lr {lr:.3e}");
        if let Some(m) = &metrics {
            let _ = write!(line, "  {}", m.summary());
            if record.best_seld.map_or(true, |b| m.seld_score < b) {
                record.best_seld = Some(m.seld_score);
                record.best_epoch = Some(epoch);
                best_store = store.clone();
                if let Some(d) = &run_dir {
                    Checkpoint::new(&cfg.model, &store, epoch, tc.seed, history.clone()).save(d.root.join("checkpoints/best.ckpt"))?;
                }
                line.push_str("  *");
            }
        }
        history.push(HistoryEntry {
            epoch,
            loss,
            seld_score: metrics.as_ref().map(|m| m.seld_score),
        });
        let wall_s = started.elapsed().as_secs_f64();
        record.epochs.push(EpochRecord {
            epoch,
            loss,
            lr,
            metrics,
            wall_s,
        });
        let _ = write!(line, "  [{wall_s:.1}s]");
        emit(line, &mut run_dir)?;
        if let Some(d) = &run_dir {
            let p = d.root.join("metrics.csv");
            std::fs::write(&p, record.metrics_csv()).map_err(io_err(&p))?;
        }
    }
    if let Some(d) = &run_dir {
        Checkpoint::new(&cfg.model, &store, tc.epochs, tc.seed, history).save(d.root.join("checkpoints/last.ckpt"))?;
    }
    if record.best_epoch.is_none() {
        best_store = store.clone();
    }
    Ok(TrainOutput {
        model,
        store,
        best_store,
        record,
    })
}
