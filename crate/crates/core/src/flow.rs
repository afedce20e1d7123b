//! Flow-matching mathematics: the interpolation path, training losses,
//! condition masking, guided velocity, the sway timestep schedule, and the
//! Euler sampler.
//!
//! Convention: `z0` is the data latent, `z1` is Gaussian noise, and
//! `z_tau = (1 - tau) z0 + tau z1`, so training regresses the velocity
//! `z1 - z0` and sampling integrates `tau` from 1 down to 0 with
//! `z_{tau-dt} = z_tau - dt * v`.

use crate::error::{Error, Result};
use crate::model::{
    backbone_velocity, duration_adapt, encode_content, fuse_instruction, predict_durations,
    Condition, ParamSet,
};
use crate::tasks::{self, Alignment, TaskId, Units};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

// ── Path and losses ──────────────────────────────────────────────────────

/// Convex path point `(1 - tau) z0 + tau z1`.
pub fn interpolate(tape: &mut Tape, z0: TensorId, z1: TensorId, tau: f64) -> Result<TensorId> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("tau {tau} outside [0, 1]")));
    }
    let a = tape.scale(z0, 1.0 - tau)?;
    let b = tape.scale(z1, tau)?;
    tape.add(a, b)
}

/// Mean squared error between the predicted velocity and `target_v`
/// (`z1 - z0`), reduced over all elements.
pub fn fm_loss(tape: &mut Tape, v_pred: TensorId, target_v: TensorId) -> Result<TensorId> {
    let d = tape.sub(v_pred, target_v)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Clip- and sequence-duration losses. The clip loss is squared error in
/// frames; the sequence loss is mean squared error in the log domain and
/// is a constant zero for tasks without per-unit predictions.
pub fn duration_losses(
    tape: &mut Tape,
    d_c_hat: TensorId,
    d_c_true: usize,
    log_d_s_hat: Option<TensorId>,
    d_s_true: Option<&[usize]>,
) -> Result<(TensorId, TensorId)> {
    let t_const = tape.constant(Tensor::scalar(d_c_true as f64));
    let diff = tape.sub(d_c_hat, t_const)?;
    let l_clip = tape.mul(diff, diff)?;

    let l_seq = match (log_d_s_hat, d_s_true) {
        (Some(log_hat), Some(d_s)) => {
            let n = tape.shape(log_hat)[0];
            if d_s.len() != n {
                return Err(Error::Duration(format!(
                    "{} true durations for {} predictions",
                    d_s.len(),
                    n
                )));
            }
            if let Some(i) = d_s.iter().position(|&d| d == 0) {
                return Err(Error::Duration(format!(
                    "true duration of unit {i} is 0; log target undefined"
                )));
            }
            let logs: Vec<f64> = d_s.iter().map(|&d| (d as f64).ln()).collect();
            let target = tape.constant(Tensor::new(&[n, 1], logs)?);
            let d = tape.sub(log_hat, target)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)?
        }
        (None, None) => tape.constant(Tensor::scalar(0.0)),
        _ => {
            return Err(Error::Contract(
                "per-unit predictions and true durations must come together".into(),
            ))
        }
    };
    Ok((l_clip, l_seq))
}

/// Unweighted sum of the three loss terms.
pub fn total_loss(
    tape: &mut Tape,
    fm: TensorId,
    l_clip: TensorId,
    l_seq: TensorId,
) -> Result<TensorId> {
    let a = tape.add(fm, l_clip)?;
    tape.add(a, l_seq)
}

// ── Condition masking ────────────────────────────────────────────────────

/// Independent Bernoulli(ratio) mask per sample; `true` means the sample
/// trains unconditionally (both conditioning streams become dummies).
pub fn mask_condition_flags<R: Rng>(rng: &mut R, ratio: f64, n: usize) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok((0..n).map(|_| rng.gen::<f64>() < ratio).collect())
}

// ── Guidance and schedule ────────────────────────────────────────────────

/// Classifier-free guidance `v_u + w (v_c - v_u)`. Returns the inputs
/// themselves at w == 1 and w == 0 so those cases are exact.
pub fn cfg_velocity(
    tape: &mut Tape,
    v_cond: TensorId,
    v_uncond: TensorId,
    w: f64,
) -> Result<TensorId> {
    if w < 0.0 {
        return Err(Error::Config(format!("guidance scale {w} must be >= 0")));
    }
    if w == 1.0 {
        return Ok(v_cond);
    }
    if w == 0.0 {
        return Ok(v_uncond);
    }
    let d = tape.sub(v_cond, v_uncond)?;
    let scaled = tape.scale(d, w)?;
    tape.add(v_uncond, scaled)
}

pub const SWAY_MIN: f64 = -1.0;

/// Largest sway strength that keeps the schedule monotone.
pub fn sway_max() -> f64 {
    1.0 / (PI / 2.0 - 1.0)
}

/// Warped timestep grid `tau(u) = u + s (cos(pi u / 2) - 1 + u)` over a
/// uniform grid of `steps` intervals, endpoints pinned to 0 and 1 exactly.
pub fn sway_schedule(steps: usize, s: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(SWAY_MIN..=sway_max()).contains(&s) {
        return Err(Error::Config(format!(
            "sway strength {s} outside [{SWAY_MIN}, {:.6}]",
            sway_max()
        )));
    }
    Ok((0..=steps)
        .map(|i| {
            if i == 0 {
                0.0
            } else if i == steps {
                1.0
            } else {
                let u = i as f64 / steps as f64;
                u + s * ((PI * u / 2.0).cos() - 1.0 + u)
            }
        })
        .collect())
}

// ── Euler integration ────────────────────────────────────────────────────

/// Euler-integrate a velocity field down the given ascending `tau` grid,
/// starting from the state at the last grid point. The field is evaluated
/// at the start of each step: `z_{k-1} = z_k - (tau_k - tau_{k-1}) v(z_k,
/// tau_k)`.
pub fn integrate_field<F>(z_init: &Tensor, grid: &[f64], mut field: F) -> Result<Tensor>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if grid.len() < 2 {
        return Err(Error::Config("integration grid needs at least 2 points".into()));
    }
    let mut state = z_init.data.clone();
    for k in (1..grid.len()).rev() {
        let dt = grid[k] - grid[k - 1];
        let v = field(&state, grid[k])?;
        if v.len() != state.len() {
            return Err(Error::Contract(format!(
                "velocity has {} elements for a state of {}",
                v.len(),
                state.len()
            )));
        }
        for (si, vi) in state.iter_mut().zip(&v) {
            *si -= dt * vi;
        }
        if let Some(bad) = state.iter().find(|x| !x.is_finite()) {
            let step = grid.len() - 1 - k + 1;
            return Err(Error::Numeric(format!(
                "non-finite state ({bad}) at integration step {step} of {}",
                grid.len() - 1
            )));
        }
    }
    Tensor::new(&z_init.shape, state)
}

// ── Model-backed sampling ────────────────────────────────────────────────

/// How many frames to generate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameCount {
    /// Use the duration heads (or the task's fixed frames-per-unit rule).
    Predicted,
    /// Force a clip length in frames.
    Fixed(usize),
    /// Force per-unit durations (time-aligned tasks only).
    PerUnit(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct GenRequest {
    pub task: TaskId,
    pub units: Units,
    pub instruction: usize,
    pub frames: FrameCount,
    pub steps: usize,
    pub guidance: f64,
    pub sway: f64,
    pub seed: u64,
}

pub struct Generation {
    /// Sampled latent, `[frames, latent_dim]`.
    pub latent: Tensor,
    pub frames: usize,
    /// Per-unit durations used for the expansion (time-aligned tasks).
    pub durations: Option<Vec<usize>>,
    /// Raw clip-duration estimate from the duration head, in frames.
    pub d_c_hat: f64,
}

/// Round per-unit log-duration predictions to whole frames, at least 1.
pub fn round_durations(log_d_s: &[f64]) -> Vec<usize> {
    log_d_s.iter().map(|l| l.exp().round().max(1.0) as usize).collect()
}

/// Sample one clip: build the conditioning, resolve the frame count, draw
/// seeded noise, and Euler-integrate the guided velocity field from
/// `tau = 1` to `tau = 0`.
pub fn integrate(params: &ParamSet, req: &GenRequest) -> Result<Generation> {
    let cfg = &params.config;
    let grid = sway_schedule(req.steps, req.sway)?;
    if req.guidance < 0.0 {
        return Err(Error::Config(format!("guidance scale {} must be >= 0", req.guidance)));
    }
    let spec = tasks::spec_for(req.task);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

    let mut tape = Tape::new();
    let staged = params.stage(&mut tape, false);
    let c = encode_content(&mut tape, &staged, req.task, &req.units, cfg)?;
    let c_i = fuse_instruction(&mut tape, &staged, c, spec.instruction_vocab_id, req.instruction)?;
    let (d_c_id, log_d_id) = predict_durations(&mut tape, &staged, c_i, spec.alignment)?;
    let d_c_hat = tape.data(d_c_id)[0];

    let n = req.units.len();
    let (durations, t_frames) = match spec.alignment {
        Alignment::TimeAligned => {
            let d_s = match (&req.frames, spec.frames_per_unit) {
                (FrameCount::Predicted, Some(r)) => vec![r; n],
                (FrameCount::Fixed(t), Some(r)) if *t == r * n => vec![r; n],
                (FrameCount::Fixed(t), Some(r)) => {
                    return Err(Error::Duration(format!(
                        "fixed length {t} conflicts with {n} units at {r} frames per unit"
                    )))
                }
                (FrameCount::Predicted, None) => {
                    let log_d = log_d_id.expect("time-aligned head returns per-unit logs");
                    round_durations(tape.data(log_d))
                }
                (FrameCount::Fixed(_), None) => {
                    return Err(Error::Duration(
                        "this task expands per unit; pass per-unit durations instead of a clip length".into(),
                    ))
                }
                (FrameCount::PerUnit(v), _) => {
                    if v.len() != n {
                        return Err(Error::Duration(format!(
                            "{} durations for {} units",
                            v.len(),
                            n
                        )));
                    }
                    v.clone()
                }
            };
            let t: usize = d_s.iter().sum();
            (Some(d_s), t)
        }
        Alignment::NonTimeAligned => {
            let t = match &req.frames {
                FrameCount::Predicted => {
                    (d_c_hat.round().max(1.0) as usize).min(cfg.max_frames)
                }
                FrameCount::Fixed(t) => *t,
                FrameCount::PerUnit(_) => {
                    return Err(Error::Duration(
                        "per-unit durations are undefined for non-time-aligned tasks".into(),
                    ))
                }
            };
            (None, t)
        }
    };
    if t_frames == 0 || t_frames > cfg.max_frames {
        return Err(Error::Duration(format!(
            "clip length {t_frames} outside [1, {}]",
            cfg.max_frames
        )));
    }

    let expand = durations.clone().unwrap_or_else(|| vec![1; n]);
    let c_i_t = duration_adapt(&mut tape, c_i, &expand)?;
    let cond = Condition::Real { c_i, c_i_t, alignment: spec.alignment };

    let z1 = Tensor::randn(&[t_frames, cfg.latent_dim], 1.0, &mut rng);
    let w = req.guidance;
    let latent = integrate_field(&z1, &grid, |state, tau| {
        let mark = tape.mark();
        let z = tape.constant(Tensor::new(&[t_frames, cfg.latent_dim], state.to_vec())?);
        let v_id = if w == 1.0 {
            backbone_velocity(&mut tape, &staged, cfg, z, tau, &cond)?
        } else {
            let v_c = backbone_velocity(&mut tape, &staged, cfg, z, tau, &cond)?;
            let v_u = backbone_velocity(&mut tape, &staged, cfg, z, tau, &Condition::Null)?;
            cfg_velocity(&mut tape, v_c, v_u, w)?
        };
        let v = tape.data(v_id).to_vec();
        tape.truncate(mark);
        Ok(v)
    })?;

    Ok(Generation { latent, frames: t_frames, durations, d_c_hat })
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::gradcheck::grad_check;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn interpolation_hits_endpoints_and_midpoint() {
        let mut tape = Tape::new();
        let z0 = tape.constant(randn(&[3, 4], 1));
        let z1 = tape.constant(randn(&[3, 4], 2));
        let at0 = interpolate(&mut tape, z0, z1, 0.0).unwrap();
        let at1 = interpolate(&mut tape, z0, z1, 1.0).unwrap();
        assert!(tape.data(at0).iter().zip(tape.data(z0)).all(|(a, b)| a == b));
        assert!(tape.data(at1).iter().zip(tape.data(z1)).all(|(a, b)| a == b));

        let a = tape.constant(Tensor::scalar(0.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let mid = interpolate(&mut tape, a, b, 0.5).unwrap();
        assert_eq!(tape.data(mid), &[1.0]);

        assert!(interpolate(&mut tape, z0, z1, 1.5).is_err());
    }

    #[test]
    fn interpolation_is_symmetric_in_its_arguments() {
        let mut tape = Tape::new();
        let z0 = tape.constant(randn(&[2, 5], 3));
        let z1 = tape.constant(randn(&[2, 5], 4));
        for &tau in &[0.0, 0.17, 0.5, 0.83, 1.0] {
            let fwd = interpolate(&mut tape, z0, z1, tau).unwrap();
            let rev = interpolate(&mut tape, z1, z0, tau).unwrap();
            let sum = tape.add(fwd, rev).unwrap();
            let direct = tape.add(z0, z1).unwrap();
            for (s, d) in tape.data(sum).iter().zip(tape.data(direct)) {
                assert!((s - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fm_loss_matches_hand_values() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[2, 2], 1.0));
        let v_perfect = tape.constant(Tensor::full(&[2, 2], 1.0));
        let zero = fm_loss(&mut tape, v_perfect, u).unwrap();
        assert_eq!(tape.data(zero), &[0.0]);

        let v0 = tape.constant(Tensor::zeros(&[2, 2]));
        let one = fm_loss(&mut tape, v0, u).unwrap();
        assert_eq!(tape.data(one), &[1.0]);
    }

    #[test]
    fn fm_loss_gradient_is_two_over_numel_times_residual() {
        let mut tape = Tape::new();
        let v = tape.leaf(randn(&[3, 4], 5).requires_grad(true));
        let u = tape.constant(randn(&[3, 4], 6));
        let loss = fm_loss(&mut tape, v, u).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(v).unwrap();
        let (dv, du) = (tape.data(v).to_vec(), tape.data(u).to_vec());
        for i in 0..12 {
            let expect = 2.0 * (dv[i] - du[i]) / 12.0;
            assert!((g[i] - expect).abs() < 1e-12);
        }

        let target = randn(&[3, 4], 6);
        let err = grad_check(
            &move |t: &mut Tape, ids: &[TensorId]| {
                let u = t.constant(target.clone());
                fm_loss(t, ids[0], u)
            },
            &[randn(&[3, 4], 5)],
            1e-5,
            1.0,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn duration_losses_match_hand_values() {
        let mut tape = Tape::new();
        // Exact predictions on both heads.
        let d_c = tape.constant(Tensor::scalar(7.0));
        let logs: Vec<f64> = [3usize, 4].iter().map(|&d| (d as f64).ln()).collect();
        let log_hat = tape.constant(Tensor::new(&[2, 1], logs.clone()).unwrap());
        let (clip, seq) =
            duration_losses(&mut tape, d_c, 7, Some(log_hat), Some(&[3, 4])).unwrap();
        assert_eq!(tape.data(clip), &[0.0]);
        assert_eq!(tape.data(seq), &[0.0]);

        // Uniform +1 in log domain.
        let off = tape.constant(Tensor::new(&[2, 1], logs.iter().map(|l| l + 1.0).collect()).unwrap());
        let (_, seq) = duration_losses(&mut tape, d_c, 7, Some(off), Some(&[3, 4])).unwrap();
        assert!((tape.data(seq)[0] - 1.0).abs() < 1e-12);

        // Clip error in frames.
        let d_c_off = tape.constant(Tensor::scalar(9.5));
        let (clip, _) = duration_losses(&mut tape, d_c_off, 7, None, None).unwrap();
        assert!((tape.data(clip)[0] - 6.25).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_is_zero_without_per_unit_predictions() {
        let mut tape = Tape::new();
        let d_c = tape.constant(Tensor::scalar(3.0));
        let (_, seq) = duration_losses(&mut tape, d_c, 5, None, None).unwrap();
        assert_eq!(tape.data(seq), &[0.0]);

        let fm = tape.constant(Tensor::scalar(0.5));
        let (clip, seq) = duration_losses(&mut tape, d_c, 5, None, None).unwrap();
        let with = total_loss(&mut tape, fm, clip, seq).unwrap();
        assert_eq!(tape.data(with)[0], 0.5 + 4.0);
    }

    #[test]
    fn zero_true_durations_are_rejected() {
        let mut tape = Tape::new();
        let d_c = tape.constant(Tensor::scalar(3.0));
        let log_hat = tape.constant(Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap());
        let err = duration_losses(&mut tape, d_c, 3, Some(log_hat), Some(&[1, 0]));
        assert!(matches!(err, Err(Error::Duration(_))));
        let err = duration_losses(&mut tape, d_c, 3, Some(log_hat), None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_is_an_unweighted_sum_with_unit_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0).requires_grad(true));
        let b = tape.leaf(Tensor::scalar(0.0).requires_grad(true));
        let c = tape.leaf(Tensor::scalar(0.0).requires_grad(true));
        let t = total_loss(&mut tape, a, b, c).unwrap();
        assert_eq!(tape.data(t), &[1.0]);
        tape.backward(t).unwrap();
        for id in [a, b, c] {
            assert_eq!(tape.grad(id).unwrap(), &[1.0]);
        }

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.25));
        let c = tape.constant(Tensor::scalar(0.25));
        let t = total_loss(&mut tape, a, b, c).unwrap();
        assert_eq!(tape.data(t), &[1.0]);
    }

    #[test]
    fn mask_flags_hit_degenerate_ratios_and_the_expected_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(mask_condition_flags(&mut rng, 0.0, 500).unwrap().iter().all(|&m| !m));
        assert!(mask_condition_flags(&mut rng, 1.0, 500).unwrap().iter().all(|&m| m));
        assert!(mask_condition_flags(&mut rng, 1.5, 10).is_err());

        let flags = mask_condition_flags(&mut rng, 0.2, 10_000).unwrap();
        let frac = flags.iter().filter(|&&m| m).count() as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&frac), "masked fraction {frac}");
    }

    #[test]
    fn mask_flags_pass_chi_square_tests_at_ten_to_the_minus_four() {
        // dof = 1 critical value at significance 1e-4.
        const CRIT: f64 = 15.1367;
        let n = 100_000usize;
        let r = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flags = mask_condition_flags(&mut rng, r, n).unwrap();

        // Goodness of fit against Bernoulli(r).
        let ones = flags.iter().filter(|&&m| m).count() as f64;
        let zeros = n as f64 - ones;
        let (e1, e0) = (r * n as f64, (1.0 - r) * n as f64);
        let gof = (ones - e1).powi(2) / e1 + (zeros - e0).powi(2) / e0;
        assert!(gof < CRIT, "goodness-of-fit statistic {gof}");

        // Lag-1 independence via a 2x2 contingency table.
        let mut counts = [[0.0f64; 2]; 2];
        for w in flags.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1.0;
        }
        let m = (n - 1) as f64;
        let row: Vec<f64> = (0..2).map(|i| counts[i][0] + counts[i][1]).collect();
        let col: Vec<f64> = (0..2).map(|j| counts[0][j] + counts[1][j]).collect();
        let mut chi = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = row[i] * col[j] / m;
                chi += (counts[i][j] - e).powi(2) / e;
            }
        }
        assert!(chi < CRIT, "independence statistic {chi}");
    }

    #[test]
    fn guided_velocity_is_affine_in_the_scale() {
        let mut tape = Tape::new();
        let v_c = tape.constant(randn(&[3, 4], 7));
        let v_u = tape.constant(randn(&[3, 4], 8));
        assert_eq!(cfg_velocity(&mut tape, v_c, v_u, 1.0).unwrap(), v_c);
        assert_eq!(cfg_velocity(&mut tape, v_c, v_u, 0.0).unwrap(), v_u);
        assert!(cfg_velocity(&mut tape, v_c, v_u, -0.5).is_err());

        let at0 = cfg_velocity(&mut tape, v_c, v_u, 0.0).unwrap();
        let at1 = cfg_velocity(&mut tape, v_c, v_u, 1.0).unwrap();
        for &w in &[0.3, 2.0, 5.0, 7.5] {
            let vw = cfg_velocity(&mut tape, v_c, v_u, w).unwrap();
            for i in 0..12 {
                let lhs = tape.data(vw)[i] - tape.data(at0)[i];
                let rhs = w * (tape.data(at1)[i] - tape.data(at0)[i]);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        let x2 = tape.constant(Tensor::scalar(2.0));
        let x1 = tape.constant(Tensor::scalar(1.0));
        let v = cfg_velocity(&mut tape, x2, x1, 5.0).unwrap();
        assert_eq!(tape.data(v), &[6.0]);
    }

    #[test]
    fn sway_schedule_pins_endpoints_and_stays_monotone() {
        let id = sway_schedule(4, 0.0).unwrap();
        assert_eq!(id, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        for &s in &[SWAY_MIN, -0.5, 0.0, 1.0, sway_max()] {
            let g = sway_schedule(10_000, s).unwrap();
            assert_eq!(g[0], 0.0);
            assert_eq!(g[10_000], 1.0);
            assert!(g.windows(2).all(|w| w[1] > w[0]), "not increasing at s={s}");
        }

        let g = sway_schedule(2, -1.0).unwrap();
        let expect = 1.0 - (PI / 4.0).cos();
        assert!((g[1] - expect).abs() < 1e-12, "{} vs {expect}", g[1]);
        assert!((g[1] - 0.2928932188134524).abs() < 1e-12);

        assert!(sway_schedule(0, 0.0).is_err());
        assert!(sway_schedule(4, -1.01).is_err());
        assert!(sway_schedule(4, sway_max() + 1e-9).is_err());
    }

    #[test]
    fn one_euler_step_inverts_a_constant_field_exactly() {
        // Dyadic values keep the arithmetic exact.
        let z0 = Tensor::new(&[1, 4], vec![0.5, -1.25, 2.0, 0.0]).unwrap();
        let z1 = Tensor::new(&[1, 4], vec![2.0, 0.75, -4.0, 8.0]).unwrap();
        let v: Vec<f64> = z1.data.iter().zip(&z0.data).map(|(a, b)| a - b).collect();
        let grid = sway_schedule(1, 0.0).unwrap();
        let out = integrate_field(&z1, &grid, |_, _| Ok(v.clone())).unwrap();
        assert_eq!(out.data, z0.data);
    }

    /// E[z1 - z0 | z_tau = z] for z0 ~ N(mu, sigma^2), z1 ~ N(0, 1).
    fn marginal_optimal_velocity(z: f64, tau: f64, mu: f64, sigma: f64) -> f64 {
        let m = (1.0 - tau) * mu;
        let var = (1.0 - tau) * (1.0 - tau) * sigma * sigma + tau * tau;
        -mu + (tau - (1.0 - tau) * sigma * sigma) * (z - m) / var
    }

    #[test]
    fn integrating_the_marginal_optimal_field_recovers_the_data_mean() {
        let (mu, sigma) = (1.5, 0.8);
        let grid = sway_schedule(256, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10_000;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z1 = Tensor::scalar(rng.sample::<f64, _>(StandardNormal));
            let z = integrate_field(&z1, &grid, |state, tau| {
                Ok(vec![marginal_optimal_velocity(state[0], tau, mu, sigma)])
            })
            .unwrap();
            out.push(z.data[0]);
        }
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - mu).abs() < 3.0 * se,
            "mean {mean} vs mu {mu}, 3 SE = {}",
            3.0 * se
        );
    }

    #[test]
    fn doubling_steps_roughly_halves_euler_error_on_a_linear_field() {
        let (a, b) = (0.9f64, 0.4f64);
        let z_at_1 = 1.3;
        // dz/dtau = a z + b with z(1) known, evaluated at tau = 0.
        let exact = (z_at_1 + b / a) * (-a).exp() - b / a;
        let run = |steps: usize| -> f64 {
            let grid = sway_schedule(steps, 0.0).unwrap();
            let out = integrate_field(&Tensor::scalar(z_at_1), &grid, |state, _tau| {
                Ok(vec![a * state[0] + b])
            })
            .unwrap();
            (out.data[0] - exact).abs()
        };
        let ratio = run(32) / run(64);
        assert!((1.3..=2.7).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn non_finite_velocity_names_the_failing_step() {
        let grid = sway_schedule(4, 0.0).unwrap();
        let mut calls = 0;
        let err = integrate_field(&Tensor::scalar(1.0), &grid, |_, _| {
            calls += 1;
            Ok(vec![if calls == 2 { f64::INFINITY } else { 0.0 }])
        })
        .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("step 2"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn untrained_model_returns_its_seeded_noise_draw() {
        let cfg = ModelConfig { depth: 2, embed_size: 8, num_heads: 2, ffn_mult: 2, ..ModelConfig::desk() };
        let params = ParamSet::init(&cfg, 42).unwrap();
        let req = GenRequest {
            task: TaskId::TaCopy,
            units: Units::Symbols(vec![2, 5, 11]),
            instruction: 0,
            frames: FrameCount::PerUnit(vec![2, 1, 3]),
            steps: 4,
            guidance: 5.0,
            sway: -1.0,
            seed: 99,
        };
        let gen = integrate(&params, &req).unwrap();
        assert_eq!(gen.frames, 6);
        assert_eq!(gen.durations, Some(vec![2, 1, 3]));
        // Zero-initialized output head means v == 0, so the state never
        // moves off the initial noise draw.
        let noise = Tensor::randn(&[6, cfg.latent_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(gen.latent.data, noise.data);

        let again = integrate(&params, &req).unwrap();
        assert_eq!(gen.latent.data, again.latent.data);
    }

    #[test]
    fn frame_count_resolution_follows_task_rules() {
        let cfg = ModelConfig { depth: 2, embed_size: 8, num_heads: 2, ffn_mult: 2, ..ModelConfig::desk() };
        let params = ParamSet::init(&cfg, 7).unwrap();

        // Fixed-ratio task: N units force T = N.
        let frames = Tensor::randn(&[5, cfg.latent_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let req = GenRequest {
            task: TaskId::TaDenoise,
            units: Units::Frames(frames),
            instruction: 0,
            frames: FrameCount::Predicted,
            steps: 2,
            guidance: 1.0,
            sway: 0.0,
            seed: 5,
        };
        let gen = integrate(&params, &req).unwrap();
        assert_eq!(gen.frames, 5);
        assert_eq!(gen.durations, Some(vec![1; 5]));

        // Conflicting fixed length is rejected.
        let bad = GenRequest { frames: FrameCount::Fixed(9), ..req.clone() };
        assert!(integrate(&params, &bad).is_err());

        // Predicted symbol durations are whole frames, at least 1.
        let req = GenRequest {
            task: TaskId::TaCopy,
            units: Units::Symbols(vec![0, 3]),
            instruction: 0,
            frames: FrameCount::Predicted,
            steps: 2,
            guidance: 1.0,
            sway: 0.0,
            seed: 5,
        };
        let gen = integrate(&params, &req).unwrap();
        let d = gen.durations.unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|&x| x >= 1));
        assert_eq!(gen.frames, d.iter().sum::<usize>());

        // Event tasks take their length from the clip head.
        let req = GenRequest {
            task: TaskId::NtaEvents,
            units: Units::Events(vec![1, 4]),
            instruction: 0,
            frames: FrameCount::Predicted,
            steps: 2,
            guidance: 1.0,
            sway: 0.0,
            seed: 5,
        };
        let gen = integrate(&params, &req).unwrap();
        assert!(gen.frames >= 1 && gen.frames <= cfg.max_frames);
        assert!(gen.durations.is_none());
        assert!((gen.d_c_hat - gen.frames as f64).abs() <= 0.5 + 1e-12);

        let bad = GenRequest { frames: FrameCount::PerUnit(vec![1, 1]), ..req };
        assert!(integrate(&params, &bad).is_err());
    }

    #[test]
    fn zero_steps_and_bad_sway_are_rejected() {
        let cfg = ModelConfig { depth: 2, embed_size: 8, num_heads: 2, ffn_mult: 2, ..ModelConfig::desk() };
        let params = ParamSet::init(&cfg, 7).unwrap();
        let req = GenRequest {
            task: TaskId::TaCopy,
            units: Units::Symbols(vec![0]),
            instruction: 0,
            frames: FrameCount::Predicted,
            steps: 0,
            guidance: 1.0,
            sway: 0.0,
            seed: 1,
        };
        assert!(integrate(&params, &req).is_err());
        let req = GenRequest { steps: 2, sway: -2.0, ..req };
        assert!(integrate(&params, &req).is_err());
        let req = GenRequest { sway: 0.0, guidance: -1.0, ..req };
        assert!(integrate(&params, &req).is_err());
    }
}
