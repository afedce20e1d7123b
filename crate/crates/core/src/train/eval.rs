//! Evaluation harness: per-task generation metrics, guidance-scale and step
//! sweeps, and the one-factor ablation runner.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{integrate, FrameCount, GenRequest};
use crate::model::{FusionMode, ModelConfig, ParamSet};
use crate::tasks::{
    copy_target, detect_events, generate, oracle_event_set, DetectionCounts, Sample, TaskId,
    Units, DETECT_THRESHOLD,
};
use crate::train::{train, TrainConfig};

/// Generation settings shared by every metric pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub sway: f64,
    /// `None` resolves per task: 1 for the dense denoise task, 5 otherwise.
    pub guidance: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_samples: 32, seed: 1234, steps: 25, sway: -1.0, guidance: None }
    }
}

/// Guidance has no headroom on the dense task whose conditioning already
/// pins the answer frame by frame; everything else extrapolates at 5.
pub fn default_guidance(task: TaskId) -> f64 {
    match task {
        TaskId::TaDenoise => 1.0,
        _ => 5.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: TaskId,
    pub n_samples: usize,
    pub steps: usize,
    pub guidance: f64,
    pub sway: f64,
    pub seed: u64,
    /// Ordered (name, value) pairs; every value is finite.
    pub metrics: Vec<(String, f64)>,
}

pub const EVAL_HEADER: &str = "task,metric,value";

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.metrics
            .iter()
            .map(|(n, v)| format!("{},{},{}", self.task.name(), n, fmt_sig6(*v)))
            .collect()
    }
}

fn request(sample: &Sample, frames: FrameCount, ec: &EvalConfig, w: f64, seed: u64) -> GenRequest {
    GenRequest {
        task: sample.task,
        units: sample.units.clone(),
        // Instruction fixed at evaluation; training draws it uniformly.
        instruction: 0,
        frames,
        steps: ec.steps,
        guidance: w,
        sway: ec.sway,
        seed,
    }
}

fn sq_err_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Generate `n_samples` fresh held-out samples and score them. Time-aligned
/// tasks run twice: once at ground-truth durations for a controlled frame
/// comparison, once at predicted durations.
pub fn evaluate(params: &ParamSet, task: TaskId, ec: &EvalConfig) -> Result<EvalReport> {
    if ec.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".to_string()));
    }
    let w = ec.guidance.unwrap_or(default_guidance(task));
    let mut rng = ChaCha8Rng::seed_from_u64(ec.seed);
    let samples: Vec<Sample> = (0..ec.n_samples).map(|_| generate(task, &mut rng)).collect();
    // Distinct seed lanes for the two passes keep their noise draws
    // decorrelated while staying a pure function of (seed, sample index).
    let gt_seed = |i: usize| ec.seed.wrapping_add(i as u64);
    let pred_seed = |i: usize| ec.seed.wrapping_add(1_000_000 + i as u64);

    let metrics = match task {
        TaskId::TaCopy => {
            let (mut se_gt, mut n_gt) = (0.0, 0usize);
            let (mut se_pred, mut n_pred) = (0.0, 0usize);
            let (mut dur_abs, mut n_units) = (0.0, 0usize);
            for (i, s) in samples.iter().enumerate() {
                let d_true = s.d_s.clone().expect("time-aligned sample");
                let gt = integrate(params, &request(s, FrameCount::PerUnit(d_true.clone()), ec, w, gt_seed(i)))?;
                se_gt += sq_err_sum(&gt.latent.data, &s.target.data);
                n_gt += gt.latent.numel();

                let pred = integrate(params, &request(s, FrameCount::Predicted, ec, w, pred_seed(i)))?;
                let d_hat = pred.durations.clone().expect("time-aligned generation");
                for (h, t) in d_hat.iter().zip(&d_true) {
                    dur_abs += (*h as f64 - *t as f64).abs();
                }
                n_units += d_hat.len();
                let symbols = match &s.units {
                    Units::Symbols(sym) => sym.clone(),
                    _ => unreachable!("copy samples carry symbols"),
                };
                let oracle = copy_target(&symbols, &d_hat);
                se_pred += sq_err_sum(&pred.latent.data, &oracle.data);
                n_pred += pred.latent.numel();
            }
            vec![
                ("mse_gt_durations".to_string(), se_gt / n_gt as f64),
                ("mse_pred_durations".to_string(), se_pred / n_pred as f64),
                ("duration_mae".to_string(), dur_abs / n_units as f64),
            ]
        }
        TaskId::TaDenoise => {
            let (mut sig, mut err_out, mut err_in, mut n) = (0.0, 0.0, 0.0, 0usize);
            for (i, s) in samples.iter().enumerate() {
                let gen = integrate(params, &request(s, FrameCount::Predicted, ec, w, gt_seed(i)))?;
                let noisy = match &s.units {
                    Units::Frames(f) => f,
                    _ => unreachable!("denoise samples carry frames"),
                };
                sig += s.target.data.iter().map(|x| x * x).sum::<f64>();
                err_out += sq_err_sum(&gen.latent.data, &s.target.data);
                err_in += sq_err_sum(&noisy.data, &s.target.data);
                n += gen.latent.numel();
            }
            let snr_out = 10.0 * (sig / err_out).log10();
            let snr_in = 10.0 * (sig / err_in).log10();
            vec![
                ("mse".to_string(), err_out / n as f64),
                ("snr_out_db".to_string(), snr_out),
                ("snr_in_db".to_string(), snr_in),
                ("snr_gain_db".to_string(), snr_out - snr_in),
            ]
        }
        TaskId::NtaEvents => {
            let mut counts = DetectionCounts::default();
            let (mut len_abs, mut n) = (0.0, 0usize);
            for (i, s) in samples.iter().enumerate() {
                let gen = integrate(params, &request(s, FrameCount::Predicted, ec, w, gt_seed(i)))?;
                let truth = oracle_event_set(s)?;
                counts.add(&truth, &detect_events(&gen.latent, DETECT_THRESHOLD));
                len_abs += (gen.frames as f64 - s.d_c as f64).abs();
                n += 1;
            }
            let precision = if counts.tp + counts.fp == 0 {
                1.0
            } else {
                counts.tp as f64 / (counts.tp + counts.fp) as f64
            };
            let recall = if counts.tp + counts.fn_ == 0 {
                1.0
            } else {
                counts.tp as f64 / (counts.tp + counts.fn_) as f64
            };
            vec![
                ("f1".to_string(), counts.f1()),
                ("precision".to_string(), precision),
                ("recall".to_string(), recall),
                ("clip_len_mae".to_string(), len_abs / n as f64),
            ]
        }
    };
    for (name, value) in &metrics {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "metric '{name}' for {} is non-finite",
                task.name()
            )));
        }
    }
    Ok(EvalReport {
        task,
        n_samples: ec.n_samples,
        steps: ec.steps,
        guidance: w,
        sway: ec.sway,
        seed: ec.seed,
        metrics,
    })
}

/// Headline metric per task for sweeps and ablation tables.
pub fn metric_for(task: TaskId) -> &'static str {
    match task {
        TaskId::TaCopy => "mse_gt_durations",
        TaskId::TaDenoise => "snr_out_db",
        TaskId::NtaEvents => "f1",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub task: TaskId,
    pub guidance: f64,
    pub steps: usize,
    pub metric: &'static str,
    pub value: f64,
}

pub const SWEEP_HEADER: &str = "task,guidance,steps,metric,value";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.task.name(),
            fmt_sig6(self.guidance),
            self.steps,
            self.metric,
            fmt_sig6(self.value)
        )
    }
}

/// Sweep guidance scales at the base step count, then step counts at the
/// task's base guidance; exactly one factor moves per row.
pub fn cfg_sweep(
    params: &ParamSet,
    task: TaskId,
    scales: &[f64],
    steps_list: &[usize],
    base: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let w_fix = base.guidance.unwrap_or(default_guidance(task));
    let mut rows = Vec::new();
    for &w in scales {
        let ec = EvalConfig { guidance: Some(w), ..base.clone() };
        let report = evaluate(params, task, &ec)?;
        let value = report.metric(metric_for(task)).expect("headline metric present");
        rows.push(SweepRow { task, guidance: w, steps: base.steps, metric: metric_for(task), value });
    }
    for &steps in steps_list {
        let ec = EvalConfig { guidance: Some(w_fix), steps, ..base.clone() };
        let report = evaluate(params, task, &ec)?;
        let value = report.metric(metric_for(task)).expect("headline metric present");
        rows.push(SweepRow { task, guidance: w_fix, steps, metric: metric_for(task), value });
    }
    Ok(rows)
}

// ── Ablation harness ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub label: String,
    pub train: TrainConfig,
}

/// One arm per fusion mode at the base sampling policy, plus one arm per
/// alternative sampling policy at the base fusion mode. Duplicates of an
/// earlier arm are dropped.
pub fn ablation_arms(
    base: &TrainConfig,
    modes: &[FusionMode],
    sampling: &[bool],
) -> Vec<AblationArm> {
    let mut arms: Vec<AblationArm> = Vec::new();
    let mut push = |train: TrainConfig| {
        let label = format!(
            "{}_{}",
            train.fusion_mode.name(),
            if train.balanced { "balanced" } else { "unbalanced" }
        );
        if !arms.iter().any(|a| a.label == label) {
            arms.push(AblationArm { label, train });
        }
    };
    push(base.clone());
    for &mode in modes {
        push(TrainConfig { fusion_mode: mode, ..base.clone() });
    }
    for &balanced in sampling {
        push(TrainConfig { balanced, ..base.clone() });
    }
    arms
}

/// Count differing top-level fields between two train configs.
fn config_field_diffs(a: &TrainConfig, b: &TrainConfig) -> usize {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    match (va, vb) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            ma.iter().filter(|(k, v)| mb.get(k.as_str()) != Some(v)).count()
        }
        _ => unreachable!("configs serialize to objects"),
    }
}

/// Every arm must differ from the first (baseline) arm in exactly one field,
/// so the table isolates one factor per row.
/// Every non-baseline arm must differ from the baseline in exactly one
/// training-config field, so measured deltas have a single cause.
pub fn validate_arms(arms: &[AblationArm]) -> Result<()> {
    let base = arms.first().ok_or_else(|| Error::Config("no ablation arms".to_string()))?;
    for arm in &arms[1..] {
        let diffs = config_field_diffs(&base.train, &arm.train);
        if diffs != 1 {
            return Err(Error::Contract(format!(
                "ablation arm '{}' differs from '{}' in {diffs} fields (expected exactly 1)",
                arm.label, base.label
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub fusion: FusionMode,
    pub balanced: bool,
    /// ta_copy frame MSE at ground-truth durations.
    pub copy_mse: f64,
    pub denoise_snr_gain_db: f64,
    pub events_f1: f64,
}

pub const ABLATION_HEADER: &str = "label,fusion_mode,balanced,copy_mse,denoise_snr_gain_db,events_f1";

impl ArmResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label,
            self.fusion.name(),
            self.balanced,
            fmt_sig6(self.copy_mse),
            fmt_sig6(self.denoise_snr_gain_db),
            fmt_sig6(self.events_f1)
        )
    }
}

/// Train every arm under the same budget and seed, then score each on all
/// three tasks. With `out_dir`, each arm's checkpoints land in a
/// subdirectory named by its label.
pub fn ablation_run(
    mc: &ModelConfig,
    arms: &[AblationArm],
    ec: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<ArmResult>> {
    validate_arms(arms)?;
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let arm_dir = match out_dir {
            Some(dir) => {
                let d = dir.join(&arm.label);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                Some(d)
            }
            None => None,
        };
        let result = train(mc, &arm.train, arm_dir.as_deref())?;
        let copy = evaluate(&result.params, TaskId::TaCopy, ec)?;
        let denoise = evaluate(&result.params, TaskId::TaDenoise, ec)?;
        let events = evaluate(&result.params, TaskId::NtaEvents, ec)?;
        rows.push(ArmResult {
            label: arm.label.clone(),
            fusion: arm.train.fusion_mode,
            balanced: arm.train.balanced,
            copy_mse: copy.metric("mse_gt_durations").expect("copy metric"),
            denoise_snr_gain_db: denoise.metric("snr_gain_db").expect("denoise metric"),
            events_f1: events.metric("f1").expect("events metric"),
        });
    }
    Ok(rows)
}

/// Format with six significant digits: plain decimal in a readable exponent
/// range, scientific notation outside it, trailing zeros trimmed.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent marker");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::symbol_duration;

    #[test]
    fn fmt_sig6_keeps_six_significant_digits() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.2345678), "1.23457");
        assert_eq!(fmt_sig6(-2.5), "-2.5");
        assert_eq!(fmt_sig6(0.1875), "0.1875");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig6(123456789.0), "1.23457e8");
        assert_eq!(fmt_sig6(0.0000001), "1e-7");
        assert_eq!(fmt_sig6(99999.9), "99999.9");
    }

    #[test]
    fn untrained_copy_mse_matches_the_noise_plus_target_second_moment() {
        // Untrained velocity is identically zero, so the sampler returns its
        // unit-normal noise draw and the expected per-element squared error
        // is 1 + E[target^2]. The second moment follows analytically from
        // the generator: unit-norm patterns scaled by 1 + 0.1 sin(2*pi*j/d),
        // durations uniform over the symbol-duration range, frame-weighted.
        let durations: Vec<usize> = (0..4).map(symbol_duration).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for &d in &durations {
            for j in 0..d {
                let m = 1.0 + 0.1 * (2.0 * std::f64::consts::PI * j as f64 / d as f64).sin();
                num += m * m;
            }
            den += d as f64;
        }
        let expected = 1.0 + num / den / crate::tasks::LATENT_DIM as f64;

        let params = ParamSet::init(&ModelConfig::check(), 0).unwrap();
        let ec = EvalConfig { n_samples: 48, steps: 4, ..EvalConfig::default() };
        let report = evaluate(&params, TaskId::TaCopy, &ec).unwrap();
        let mse = report.metric("mse_gt_durations").unwrap();
        assert!(
            (mse / expected - 1.0).abs() < 0.10,
            "untrained mse {mse} vs analytic {expected}"
        );
    }

    #[test]
    fn detector_scores_perfect_f1_on_oracle_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut counts = DetectionCounts::default();
        for _ in 0..20 {
            let s = generate(TaskId::NtaEvents, &mut rng);
            let truth = oracle_event_set(&s).unwrap();
            counts.add(&truth, &detect_events(&s.target, DETECT_THRESHOLD));
        }
        assert_eq!(counts.f1(), 1.0);
        assert_eq!(counts.fp + counts.fn_, 0);
    }

    #[test]
    fn evaluate_is_deterministic_for_a_fixed_seed() {
        let params = ParamSet::init(&ModelConfig::check(), 2).unwrap();
        let ec = EvalConfig { n_samples: 4, steps: 4, ..EvalConfig::default() };
        for task in TaskId::ALL {
            let a = evaluate(&params, task, &ec).unwrap();
            let b = evaluate(&params, task, &ec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn denoise_report_carries_consistent_snr_metrics() {
        let params = ParamSet::init(&ModelConfig::check(), 2).unwrap();
        let ec = EvalConfig { n_samples: 4, steps: 4, ..EvalConfig::default() };
        let report = evaluate(&params, TaskId::TaDenoise, &ec).unwrap();
        let out = report.metric("snr_out_db").unwrap();
        let inp = report.metric("snr_in_db").unwrap();
        let gain = report.metric("snr_gain_db").unwrap();
        assert_eq!(gain, out - inp);
        assert_eq!(report.guidance, 1.0, "denoise defaults to no guidance");
    }

    #[test]
    fn sweep_w1_row_equals_evaluate_at_w1_exactly() {
        let params = ParamSet::init(&ModelConfig::check(), 2).unwrap();
        let base = EvalConfig { n_samples: 3, steps: 4, ..EvalConfig::default() };
        let rows = cfg_sweep(&params, TaskId::NtaEvents, &[1.0, 2.0], &[], &base).unwrap();
        assert_eq!(rows.len(), 2);
        let direct = evaluate(
            &params,
            TaskId::NtaEvents,
            &EvalConfig { guidance: Some(1.0), ..base.clone() },
        )
        .unwrap();
        assert_eq!(rows[0].value, direct.metric("f1").unwrap());
        assert_eq!(rows[0].guidance, 1.0);
    }

    #[test]
    fn sweep_moves_one_factor_per_row() {
        let params = ParamSet::init(&ModelConfig::check(), 2).unwrap();
        let base = EvalConfig { n_samples: 2, steps: 6, ..EvalConfig::default() };
        let rows = cfg_sweep(&params, TaskId::TaDenoise, &[1.0, 5.0], &[4, 8], &base).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[..2].iter().all(|r| r.steps == 6));
        assert_eq!(rows[0].guidance, 1.0);
        assert_eq!(rows[1].guidance, 5.0);
        assert!(rows[2..].iter().all(|r| r.guidance == 1.0), "denoise default w");
        assert_eq!(rows[2].steps, 4);
        assert_eq!(rows[3].steps, 8);
        assert!(rows.iter().all(|r| r.metric == "snr_out_db"));
    }

    #[test]
    fn ablation_arms_differ_from_baseline_in_one_field() {
        let base = TrainConfig::desk();
        let arms = ablation_arms(&base, &FusionMode::ALL, &[true, false]);
        assert_eq!(arms.len(), 5);
        assert_eq!(arms[0].label, "dual_balanced");
        assert_eq!(config_field_diffs(&arms[0].train, &arms[0].train), 0);
        for arm in &arms[1..] {
            assert_eq!(config_field_diffs(&base, &arm.train), 1, "{}", arm.label);
        }
        validate_arms(&arms).unwrap();

        let mut bad = arms.clone();
        bad[1].train.seed += 1; // second changed field
        match validate_arms(&bad) {
            Err(Error::Contract(msg)) => assert!(msg.contains("2 fields"), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn tiny_ablation_run_trains_and_scores_each_arm() {
        let dir = std::env::temp_dir().join("latentflow-eval-tests").join("tiny_ablation");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let base = TrainConfig {
            steps: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            warmup_steps: 1,
            ..TrainConfig::desk()
        };
        let arms = ablation_arms(&base, &[FusionMode::Dual], &[]);
        let ec = EvalConfig { n_samples: 2, steps: 3, ..EvalConfig::default() };
        let rows = ablation_run(&ModelConfig::check(), &arms, &ec, Some(&dir)).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert!(r.copy_mse.is_finite() && r.events_f1.is_finite());
        assert!(dir.join("dual_balanced").join("checkpoint_final.ufad").exists());
        assert_eq!(r.csv_row().split(',').count(), ABLATION_HEADER.split(',').count());
    }
}
