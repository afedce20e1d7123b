//! Whole-model gradient verification. A small two-block build is driven
//! through a three-task training loss and every parameter is compared
//! against central finite differences.
//!
//! The duration heads read their input through a gradient scale, so a
//! parameter upstream of it has an analytic gradient that deliberately
//! differs from the forward sensitivity whenever both loss families are
//! active. The check therefore splits into three exhaustive groups:
//!
//! 1. everything downstream of (or disjoint from) the scale, against the
//!    full loss;
//! 2. the content encoders against the duration losses alone, where the
//!    analytic gradient is exactly `scale` times the finite difference;
//! 3. the content encoders against the velocity loss alone, where no
//!    scaled path exists.
//!
//! Together the groups cover every parameter on every loss path.

use super::net::{backbone_velocity, build_conditioning, dual_fusion_block, BlockAdaln, Condition};
use super::{layout, ModelConfig, ParamSet, StagedParams};
use crate::error::Result;
use crate::flow;
use crate::model::net::DURATION_GRAD_SCALE;
use crate::tasks::{self, copy_target, symbol_duration, TaskId, Units};
use crate::tensor::gradcheck::{grad_check, grad_check_guarded, CheckOutcome, COMPOSITE_GUARD};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn check_config() -> ModelConfig {
    ModelConfig::check()
}

struct Case {
    task: TaskId,
    units: Units,
    instruction: usize,
    d_s_expand: Vec<usize>,
    d_s_true: Option<Vec<usize>>,
    t_true: usize,
    z0: Tensor,
    z1: Tensor,
    tau: f64,
}

/// One fixed case per task so every encoder, both duration heads, and both
/// dummy streams carry gradient.
fn check_cases(cfg: &ModelConfig, seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let symbols = vec![2usize, 5];
    let d_s: Vec<usize> = symbols.iter().map(|&k| symbol_duration(k)).collect();
    let t_copy: usize = d_s.iter().sum();
    let copy = Case {
        task: TaskId::TaCopy,
        units: Units::Symbols(symbols.clone()),
        instruction: 1,
        d_s_expand: d_s.clone(),
        d_s_true: Some(d_s.clone()),
        t_true: t_copy,
        z0: copy_target(&symbols, &d_s),
        z1: Tensor::randn(&[t_copy, cfg.latent_dim], 1.0, &mut rng),
        tau: 0.37,
    };
    let clean = Tensor::randn(&[4, cfg.latent_dim], 1.0, &mut rng);
    let noisy = Tensor::randn(&[4, cfg.latent_dim], 1.0, &mut rng);
    let denoise = Case {
        task: TaskId::TaDenoise,
        units: Units::Frames(noisy),
        instruction: 4,
        d_s_expand: vec![1; 4],
        d_s_true: Some(vec![1; 4]),
        t_true: 4,
        z0: clean,
        z1: Tensor::randn(&[4, cfg.latent_dim], 1.0, &mut rng),
        tau: 0.61,
    };
    let events = Case {
        task: TaskId::NtaEvents,
        units: Units::Events(vec![1, 4]),
        instruction: 7,
        d_s_expand: vec![1; 2],
        d_s_true: None,
        t_true: 6,
        z0: Tensor::randn(&[6, cfg.latent_dim], 1.0, &mut rng),
        z1: Tensor::randn(&[6, cfg.latent_dim], 1.0, &mut rng),
        tau: 0.23,
    };
    Ok(vec![copy, denoise, events])
}

/// Fresh init with the degenerate zeros replaced: the zero output head and
/// zero modulation weights would silence most gradients and make the check
/// vacuous.
fn check_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    params.set(
        "out_proj.w",
        Tensor::randn(&[cfg.embed_size, cfg.latent_dim], 0.3, &mut rng),
    )?;
    params.set("out_proj.b", Tensor::randn(&[1, cfg.latent_dim], 0.1, &mut rng))?;
    for b in 0..cfg.depth {
        params.set(
            &format!("blocks.{b}.adaln.fc2"),
            Tensor::randn(&[cfg.embed_size, 6 * cfg.embed_size], 0.2, &mut rng),
        )?;
    }
    Ok(params)
}

fn case_loss(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    case: &Case,
    include_fm: bool,
    include_dur: bool,
) -> Result<TensorId> {
    let spec = tasks::spec_for(case.task);
    let cond = build_conditioning(
        tape,
        staged,
        cfg,
        &spec,
        &case.units,
        case.instruction,
        &case.d_s_expand,
    )?;
    let mut terms = Vec::new();
    if include_fm {
        let z0 = tape.constant(case.z0.clone());
        let z1 = tape.constant(case.z1.clone());
        let z_tau = flow::interpolate(tape, z0, z1, case.tau)?;
        let u = tape.sub(z1, z0)?;
        let c = Condition::Real { c_i: cond.c_i, c_i_t: cond.c_i_t, alignment: spec.alignment };
        let v = backbone_velocity(tape, staged, cfg, z_tau, case.tau, &c)?;
        terms.push(flow::fm_loss(tape, v, u)?);
    }
    if include_dur {
        let (clip, seq) = flow::duration_losses(
            tape,
            cond.d_c_hat,
            case.t_true,
            cond.log_d_s_hat,
            case.d_s_true.as_deref(),
        )?;
        terms.push(clip);
        terms.push(seq);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn composite_loss(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    cases: &[Case],
    include_fm: bool,
    include_dur: bool,
) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for case in cases {
        let l = case_loss(tape, staged, cfg, case, include_fm, include_dur)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one case"))
}

/// Parameters whose gradients route through the duration-input scale when
/// duration losses are active.
fn feeds_duration_heads(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("adapter.") || name.starts_with("instr.")
}

fn run_group(
    params: &ParamSet,
    cfg: &ModelConfig,
    cases: &[Case],
    in_group: impl Fn(&str) -> bool,
    include_fm: bool,
    include_dur: bool,
    h: f64,
    grad_scale: f64,
) -> Result<f64> {
    let mut names = Vec::new();
    let mut frozen = Vec::new();
    for (name, _, _) in layout(cfg) {
        let value = params.get(&name)?.clone();
        if in_group(&name) {
            names.push((name, value));
        } else {
            frozen.push((name, value));
        }
    }
    let inputs: Vec<Tensor> = names.iter().map(|(_, v)| v.clone()).collect();
    let build = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
        let mut map = BTreeMap::new();
        for ((name, _), &id) in names.iter().zip(ids) {
            map.insert(name.clone(), id);
        }
        for (name, value) in &frozen {
            map.insert(name.clone(), tape.constant(value.clone()));
        }
        let staged = StagedParams { ids: map };
        composite_loss(tape, &staged, cfg, cases, include_fm, include_dur)
    };
    grad_check_guarded(&build, &inputs, h, grad_scale, COMPOSITE_GUARD)
}

pub struct CompositeReport {
    pub rows: Vec<CheckOutcome>,
    pub tolerance: f64,
}

impl CompositeReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Check every parameter of the two-block build against central finite
/// differences, split into the three groups described at the top of this
/// file.
pub fn backbone_check(seed: u64, h: f64, tolerance: f64) -> Result<CompositeReport> {
    let cfg = check_config();
    let params = check_params(&cfg, seed)?;
    let cases = check_cases(&cfg, seed)?;

    // (name, encoder group?, fm, dur, expected analytic/FD ratio)
    let groups: [(&'static str, bool, bool, bool, f64); 3] = [
        ("backbone+heads vs full loss", false, true, true, 1.0),
        ("encoders vs duration loss", true, false, true, DURATION_GRAD_SCALE),
        ("encoders vs velocity loss", true, true, false, 1.0),
    ];
    let mut rows = Vec::new();
    for (name, encoders, fm, dur, grad_scale) in groups {
        let err = run_group(
            &params,
            &cfg,
            &cases,
            |n: &str| feeds_duration_heads(n) == encoders,
            fm,
            dur,
            h,
            grad_scale,
        )?;
        rows.push(CheckOutcome { name, max_rel_err: err, passed: err < tolerance });
    }
    Ok(CompositeReport { rows, tolerance })
}

/// Finite-difference check of a single fusion block in isolation: inputs,
/// both context streams, all modulation vectors, and all block weights.
pub fn block_check(seed: u64, h: f64) -> Result<f64> {
    let cfg = check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f3d_5b79);
    let d = cfg.embed_size;
    let block_names: Vec<String> = layout(&cfg)
        .into_iter()
        .map(|(n, _, _)| n)
        .filter(|n| n.starts_with("blocks.0.") && !n.contains("adaln"))
        .collect();
    let params = check_params(&cfg, seed)?;
    let mut inputs: Vec<Tensor> = block_names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let first_extra = inputs.len();
    inputs.push(Tensor::randn(&[5, d], 1.0, &mut rng)); // A
    inputs.push(Tensor::randn(&[3, d], 1.0, &mut rng)); // K_ctx
    inputs.push(Tensor::randn(&[5, d], 1.0, &mut rng)); // F_ctx
    for _ in 0..6 {
        inputs.push(Tensor::randn(&[1, d], 0.5, &mut rng));
    }
    let weights = Tensor::randn(&[5, d], 1.0, &mut rng);

    let build = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
        let mut map = BTreeMap::new();
        for (name, &id) in block_names.iter().zip(ids) {
            map.insert(name.clone(), id);
        }
        let staged = StagedParams { ids: map };
        let e = first_extra;
        let adaln = BlockAdaln {
            gamma_sa: ids[e + 3],
            beta_sa: ids[e + 4],
            alpha_sa: ids[e + 5],
            gamma_ffn: ids[e + 6],
            beta_ffn: ids[e + 7],
            alpha_ffn: ids[e + 8],
        };
        let out = dual_fusion_block(
            tape,
            &staged,
            &cfg,
            0,
            ids[e],
            ids[e + 1],
            Some(ids[e + 2]),
            &adaln,
            None,
        )?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };
    grad_check(&build, &inputs, h, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{DEFAULT_H, DEFAULT_TOLERANCE};

    #[test]
    fn single_block_gradients_match_finite_differences() {
        let err = block_check(3, DEFAULT_H).unwrap();
        assert!(err < DEFAULT_TOLERANCE, "max rel err {err}");
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let report = backbone_check(1, DEFAULT_H, DEFAULT_TOLERANCE).unwrap();
        for row in &report.rows {
            assert!(row.passed, "{}: max rel err {}", row.name, row.max_rel_err);
        }
        assert!(report.passed());
    }
}
