//! Multi-task trainer: task-balanced batches, classifier-free condition
//! dropout, one flow-matching graph per sample, and adaptive-moment updates
//! behind a global gradient-norm clip.

pub mod checkpoint;
pub mod eval;
pub mod optimizer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fm_loss, duration_losses, interpolate, mask_condition_flags, total_loss};
use crate::model::{
    backbone_velocity, build_conditioning, Condition, FusionMode, ModelConfig, ParamSet,
};
use crate::tasks::{desk_tasks, spec_for, Sample, SampleStream, TaskId, TaskSpec};
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{load_checkpoint, load_latent, save_checkpoint, save_latent, Meta};
pub use eval::{
    ablation_arms, ablation_run, cfg_sweep, evaluate, fmt_sig6, validate_arms, AblationArm,
    ArmResult, EvalConfig, EvalReport, SweepRow, ABLATION_HEADER, EVAL_HEADER, SWEEP_HEADER,
};
pub use optimizer::{clip_global_norm, lr_at, AdamW};

/// Decorrelates the data stream from the mask/time/noise draws.
const STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const NOISE_SALT: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub balanced: bool,
    pub fusion_mode: FusionMode,
    /// Intermediate checkpoint cadence; 0 writes only the final file.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// CPU-scale budget the acceptance thresholds are calibrated against.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 100,
            mask_ratio: 0.2,
            seed: 7,
            balanced: true,
            fusion_mode: FusionMode::Dual,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1], got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// One training-log record; the CSV columns of the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub total_loss: f64,
    pub fm_loss: f64,
    pub dur_clip_loss: f64,
    pub dur_seq_loss: f64,
    pub masked_fraction: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,total_loss,fm_loss,dur_clip_loss,dur_seq_loss,masked_fraction";

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            fmt_sig6(self.total_loss),
            fmt_sig6(self.fm_loss),
            fmt_sig6(self.dur_clip_loss),
            fmt_sig6(self.dur_seq_loss),
            fmt_sig6(self.masked_fraction),
        )
    }
}

pub struct TrainResult {
    pub params: ParamSet,
    pub log: Vec<LogRow>,
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint_final.ufad")
}

fn step_checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:06}.ufad"))
}

/// Everything one sample contributes to a step, fixed before any graph is
/// built so the RNG draw order never depends on scheduling.
struct WorkItem {
    sample: Sample,
    masked: bool,
    tau: f64,
    z1: Tensor,
}

struct SampleResult {
    total: f64,
    fm: f64,
    dur_clip: f64,
    dur_seq: f64,
    grads: BTreeMap<String, Vec<f64>>,
}

/// Draw one batch: samples from the task stream, then mask flags, then per
/// sample a flow time and a noise endpoint from the trainer RNG.
fn draw_batch(
    stream: &mut SampleStream,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    latent_dim: usize,
) -> Result<Vec<WorkItem>> {
    let samples: Vec<Sample> = (0..cfg.batch_size).map(|_| stream.next_sample()).collect();
    let flags = mask_condition_flags(rng, cfg.mask_ratio, cfg.batch_size)?;
    Ok(samples
        .into_iter()
        .zip(flags)
        .map(|(sample, masked)| {
            let tau: f64 = rng.gen();
            let z1 = Tensor::randn(&[sample.target.shape[0], latent_dim], 1.0, rng);
            WorkItem { sample, masked, tau, z1 }
        })
        .collect())
}

/// Build one sample's graph, run backward, and return its losses and
/// parameter gradients. `inv_batch` folds the batch mean into the graph so
/// leaf gradients accumulate the already-averaged contribution.
fn sample_backward(
    params: &ParamSet,
    mc: &ModelConfig,
    item: &WorkItem,
    inv_batch: f64,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape, true);
    let spec = spec_for(item.sample.task);
    let d_s_expand: Vec<usize> = match &item.sample.d_s {
        Some(d) => d.clone(),
        None => vec![1; item.sample.units.len()],
    };
    let cond = build_conditioning(
        &mut tape,
        &staged,
        mc,
        &spec,
        &item.sample.units,
        item.sample.instruction,
        &d_s_expand,
    )?;
    let (l_clip, l_seq) = duration_losses(
        &mut tape,
        cond.d_c_hat,
        item.sample.d_c,
        cond.log_d_s_hat,
        item.sample.d_s.as_deref(),
    )?;
    let z0 = tape.constant(item.sample.target.clone());
    let z1 = tape.constant(item.z1.clone());
    let z_tau = interpolate(&mut tape, z0, z1, item.tau)?;
    let u = tape.sub(z1, z0)?;
    let condition = if item.masked {
        Condition::Null
    } else {
        Condition::Real { c_i: cond.c_i, c_i_t: cond.c_i_t, alignment: spec.alignment }
    };
    let v = backbone_velocity(&mut tape, &staged, mc, z_tau, item.tau, &condition)?;
    let l_fm = fm_loss(&mut tape, v, u)?;
    let total = total_loss(&mut tape, l_fm, l_clip, l_seq)?;
    let scaled = tape.scale(total, inv_batch)?;
    tape.backward(scaled)?;
    let grads = staged
        .iter()
        .map(|(name, id)| {
            let g = tape
                .grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
            (name.to_string(), g)
        })
        .collect();
    Ok(SampleResult {
        total: tape.data(total)[0],
        fm: tape.data(l_fm)[0],
        dur_clip: tape.data(l_clip)[0],
        dur_seq: tape.data(l_seq)[0],
        grads,
    })
}

/// Per-sample results in batch order. Samples run on worker threads; the
/// fixed merge order downstream keeps results bit-identical regardless of
/// thread count.
fn batch_results(
    params: &ParamSet,
    mc: &ModelConfig,
    items: &[WorkItem],
) -> Result<Vec<SampleResult>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let workers = workers.min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(|it| sample_backward(params, mc, it, 1.0 / items.len() as f64)).collect();
    }
    let inv_batch = 1.0 / items.len() as f64;
    let mut slots: Vec<Option<Result<SampleResult>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = sample_backward(params, mc, &items[i], inv_batch);
                slot_refs.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

pub struct StepStats {
    pub total: f64,
    pub fm: f64,
    pub dur_clip: f64,
    pub dur_seq: f64,
    pub masked_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

fn divergence_error(step: usize, by_task: &[(TaskId, f64)]) -> Error {
    let breakdown: Vec<String> =
        by_task.iter().map(|(t, l)| format!("{} {}", t.name(), l)).collect();
    Error::Numeric(format!(
        "non-finite loss at step {step} (per-task mean: {})",
        breakdown.join(", ")
    ))
}

/// One optimizer step over a prepared batch.
fn step_batch(
    params: &mut ParamSet,
    mc: &ModelConfig,
    opt: &mut AdamW,
    items: &[WorkItem],
    step: usize,
) -> Result<StepStats> {
    let results = batch_results(params, mc, items)?;

    // Dev builds panic inside the op that first produces a non-finite value;
    // this check is the load-bearing guard in release builds.
    if results.iter().any(|r| !r.total.is_finite()) {
        let mut by_task: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
        for (item, r) in items.iter().zip(&results) {
            let e = by_task.entry(item.sample.task).or_insert((0.0, 0));
            e.0 += r.total;
            e.1 += 1;
        }
        let means: Vec<(TaskId, f64)> =
            by_task.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect();
        return Err(divergence_error(step, &means));
    }

    let mut grads: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
        .collect();
    for r in &results {
        for (name, g) in &r.grads {
            let acc = grads.get_mut(name).expect("staged names match parameter names");
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let grad_norm = clip_global_norm(&mut grads);
    let lr = opt.step(params, &grads)?;

    let n = items.len() as f64;
    let masked = items.iter().filter(|it| it.masked).count() as f64;
    Ok(StepStats {
        total: results.iter().map(|r| r.total).sum::<f64>() / n,
        fm: results.iter().map(|r| r.fm).sum::<f64>() / n,
        dur_clip: results.iter().map(|r| r.dur_clip).sum::<f64>() / n,
        dur_seq: results.iter().map(|r| r.dur_seq).sum::<f64>() / n,
        masked_fraction: masked / n,
        grad_norm,
        lr,
    })
}

/// Run the full loop on the standard task registry. With `out_dir`,
/// intermediate checkpoints follow `checkpoint_every` and the final
/// parameters land in `checkpoint_final.ufad` (written even for a
/// zero-step run).
pub fn train(mc: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    train_with_tasks(mc, cfg, desk_tasks(), out_dir)
}

/// [`train`] with an explicit task registry (custom sampling weights).
pub fn train_with_tasks(
    mc: &ModelConfig,
    cfg: &TrainConfig,
    specs: Vec<TaskSpec>,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mc = ModelConfig { fusion_mode: cfg.fusion_mode, ..mc.clone() };
    mc.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut params = ParamSet::init(&mc, cfg.seed)?;
    let mut stream = SampleStream::new(specs, cfg.balanced, cfg.seed ^ STREAM_SALT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_SALT);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.warmup_steps);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let items = draw_batch(&mut stream, &mut rng, cfg, mc.latent_dim)?;
        let stats = step_batch(&mut params, &mc, &mut opt, &items, step)?;
        log.push(LogRow {
            step,
            total_loss: stats.total,
            fm_loss: stats.fm,
            dur_clip_loss: stats.dur_clip,
            dur_seq_loss: stats.dur_seq,
            masked_fraction: stats.masked_fraction,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                save_checkpoint(&step_checkpoint_path(dir, step), &params, step as u64, cfg.seed)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&final_checkpoint_path(dir), &params, cfg.steps as u64, cfg.seed)?;
    }
    Ok(TrainResult { params, log })
}
