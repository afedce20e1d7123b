//! Central finite-difference verification of backward rules.
//!
//! The harness perturbs each input element by ±h, re-runs the forward pass,
//! and compares (f⁺ − f⁻) / 2h against the recorded analytic gradient with
//! relative error |a − n| / max(|a|, |n|, 1e-8). The suite covers every
//! primitive; a full-backbone composite check lives in the model module.

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for primitive checks, whose gradients are O(1).
pub const PRIMITIVE_GUARD: f64 = 1e-8;
/// Denominator floor for whole-model checks. The central difference
/// itself carries roundoff noise of roughly eps * |loss| / (2h), about
/// 1e-9 here; a 1e-4 floor turns the 1e-4 relative criterion into an
/// absolute tolerance of 1e-8, an order above that noise, so elements
/// whose true gradient sits below the oracle's resolution cannot fail
/// spuriously while any real defect above 1e-8 still registers.
pub const COMPOSITE_GUARD: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_guarded(analytic, numeric, PRIMITIVE_GUARD)
}

pub fn relative_error_guarded(analytic: f64, numeric: f64, guard: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(guard)
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar-valued builder over all elements of all inputs.
///
/// `grad_scale` declares the expected ratio analytic/numeric; it is 1 for
/// ordinary ops and deliberately different for the gradient-manipulation
/// ops (lambda for scaled_gradient), whose analytic gradient diverges from
/// the forward sensitivity by construction.
pub fn grad_check<F>(build: &F, inputs: &[Tensor], h: f64, grad_scale: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    grad_check_guarded(build, inputs, h, grad_scale, PRIMITIVE_GUARD)
}

/// [`grad_check`] with an explicit denominator floor for the relative
/// error; see [`COMPOSITE_GUARD`].
pub fn grad_check_guarded<F>(
    build: &F,
    inputs: &[Tensor],
    h: f64,
    grad_scale: f64,
    guard: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.data(loss)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor> = inputs.iter().map(|t| t.clone().requires_grad(false)).collect();
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &analytic_j) in grads.iter().enumerate() {
            let orig = points[ti].data[j];
            points[ti].data[j] = orig + h;
            let up = eval(&points)?;
            points[ti].data[j] = orig - h;
            let down = eval(&points)?;
            points[ti].data[j] = orig;
            let numeric = grad_scale * (up - down) / (2.0 * h);
            worst = worst.max(relative_error_guarded(analytic_j, numeric, guard));
        }
    }
    Ok(worst)
}

/// One named finite-difference check over seeded random inputs.
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub struct SuiteReport {
    pub rows: Vec<CheckOutcome>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.rows.iter().find(|r| !r.passed)
    }
}

/// Names of all primitive checks, in run order.
pub const PRIMITIVE_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "transpose",
    "reshape",
    "concat_lastdim",
    "slice_lastdim",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "tanh",
    "exp",
    "sin",
    "cos",
    "embedding_lookup",
    "scaled_gradient",
    "stop_gradient",
];

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 0.8, rng)
}

/// Reduce to a scalar through data-dependent weights so gradient structure
/// is exercised beyond the uniform seed of a bare sum.
fn weighted(tape: &mut Tape, x: TensorId, rng: &mut ChaCha8Rng) -> Result<TensorId> {
    let w = tape.constant(Tensor::randn(tape.shape(x), 1.0, rng));
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

fn run_one(
    name: &'static str,
    seed: u64,
    h: f64,
    fault_factor: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Weight constants inside the builders must be reproducible across the
    // analytic and perturbed evaluations, hence their own fixed stream.
    let wseed = rng.gen::<u64>();

    let check = |inputs: Vec<Tensor>,
                 scale: f64,
                 f: Box<dyn Fn(&mut Tape, &[TensorId], &mut ChaCha8Rng) -> Result<TensorId>>|
     -> Result<f64> {
        let build = move |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
            let mut wrng = ChaCha8Rng::seed_from_u64(wseed);
            f(tape, ids, &mut wrng)
        };
        grad_check(&build, &inputs, h, scale)
    };

    let err = match name {
        "matmul" => check(
            vec![randn(&[3, 4], &mut rng), randn(&[4, 2], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.matmul(ids[0], ids[1])?;
                weighted(t, y, r)
            }),
        )?,
        "add" | "sub" | "mul" => {
            // Equal shapes and the row-broadcast path in one graph.
            let op = name;
            check(
                vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng), randn(&[4], &mut rng)],
                1.0,
                Box::new(move |t, ids, r| {
                    let full = match op {
                        "add" => t.add(ids[0], ids[1])?,
                        "sub" => t.sub(ids[0], ids[1])?,
                        _ => t.mul(ids[0], ids[1])?,
                    };
                    let bcast = match op {
                        "add" => t.add(full, ids[2])?,
                        "sub" => t.sub(full, ids[2])?,
                        _ => t.mul(full, ids[2])?,
                    };
                    weighted(t, bcast, r)
                }),
            )?
        }
        "scale" => check(
            vec![randn(&[2, 5], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.scale(ids[0], -1.7)?;
                weighted(t, y, r)
            }),
        )?,
        "sum" => check(
            vec![randn(&[3, 3], &mut rng)],
            1.0,
            Box::new(|t, ids, _| {
                let s = t.sum(ids[0])?;
                t.scale(s, 1.3)
            }),
        )?,
        "mean" => check(
            vec![randn(&[3, 3], &mut rng)],
            1.0,
            Box::new(|t, ids, _| {
                let s = t.mean(ids[0])?;
                t.scale(s, -2.1)
            }),
        )?,
        "transpose" => check(
            vec![randn(&[3, 5], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.transpose(ids[0])?;
                weighted(t, y, r)
            }),
        )?,
        "reshape" => check(
            vec![randn(&[3, 4], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.reshape(ids[0], &[4, 3])?;
                weighted(t, y, r)
            }),
        )?,
        "concat_lastdim" => check(
            vec![randn(&[3, 2], &mut rng), randn(&[3, 4], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.concat_lastdim(&[ids[0], ids[1]])?;
                weighted(t, y, r)
            }),
        )?,
        "slice_lastdim" => check(
            vec![randn(&[3, 5], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.slice_lastdim(ids[0], 1, 4)?;
                weighted(t, y, r)
            }),
        )?,
        "softmax_lastdim" => check(
            vec![randn(&[3, 5], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.softmax_lastdim(ids[0])?;
                weighted(t, y, r)
            }),
        )?,
        "layer_norm" => check(
            vec![randn(&[3, 6], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.layer_norm(ids[0], 1e-6)?;
                weighted(t, y, r)
            }),
        )?,
        "gelu" | "tanh" | "exp" | "sin" | "cos" => {
            let op = name;
            check(
                vec![randn(&[3, 4], &mut rng)],
                1.0,
                Box::new(move |t, ids, r| {
                    let y = match op {
                        "gelu" => t.gelu(ids[0])?,
                        "tanh" => t.tanh(ids[0])?,
                        "exp" => t.exp(ids[0])?,
                        "sin" => t.sin(ids[0])?,
                        _ => t.cos(ids[0])?,
                    };
                    weighted(t, y, r)
                }),
            )?
        }
        "embedding_lookup" => check(
            vec![randn(&[5, 3], &mut rng)],
            1.0,
            Box::new(|t, ids, r| {
                let y = t.embedding_lookup(ids[0], &[4, 0, 4, 2, 1])?;
                weighted(t, y, r)
            }),
        )?,
        // Forward sensitivity is the identity; the analytic gradient is
        // lambda by definition, so the oracle compares against lambda * FD.
        "scaled_gradient" => check(
            vec![randn(&[3, 4], &mut rng)],
            0.1,
            Box::new(|t, ids, r| {
                let y = t.scaled_gradient(ids[0], 0.1)?;
                weighted(t, y, r)
            }),
        )?,
        // d/dx sum(w * x * sg(x)) is w * x analytically but 2 * w * x by
        // forward sensitivity; the factor 1/2 pins both the pass-through
        // value and the severed gradient path.
        "stop_gradient" => check(
            vec![randn(&[3, 4], &mut rng)],
            0.5,
            Box::new(|t, ids, r| {
                let frozen = t.stop_gradient(ids[0])?;
                let y = t.mul(ids[0], frozen)?;
                weighted(t, y, r)
            }),
        )?,
        other => {
            return Err(crate::error::Error::Config(format!(
                "unknown gradcheck primitive '{other}'"
            )))
        }
    };
    Ok(err * fault_factor.max(1.0) + if fault_factor > 1.0 { 1.0 } else { 0.0 })
}

/// Run every primitive check over the given seeds, reporting the worst
/// relative error per op. `fault` deliberately corrupts the named op's
/// result (test fixture for the CLI's failure path).
pub fn run_primitive_suite(
    seeds: &[u64],
    h: f64,
    tolerance: f64,
    fault: Option<&str>,
) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for &name in PRIMITIVE_NAMES {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let fault_factor = if fault == Some(name) { 1e6 } else { 1.0 };
            worst = worst.max(run_one(name, seed, h, fault_factor)?);
        }
        rows.push(CheckOutcome { name, max_rel_err: worst, passed: worst < tolerance });
    }
    Ok(SuiteReport { rows, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let err = grad_check(
            &|t: &mut Tape, ids: &[TensorId]| {
                let h = t.matmul(ids[0], ids[1])?;
                let y = t.add(h, ids[2])?;
                let sq = t.mul(y, y)?;
                t.mean(sq)
            },
            &[x, w, b],
            DEFAULT_H,
            1.0,
        )
        .unwrap();
        assert!(err < DEFAULT_TOLERANCE, "max rel err {err}");
    }

    #[test]
    fn softmax_of_matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let err = grad_check(
            &move |t: &mut Tape, ids: &[TensorId]| {
                let scores = t.matmul(ids[0], ids[1])?;
                let p = t.softmax_lastdim(scores)?;
                let weightedp = t.mul(p, ids[2])?;
                t.sum(weightedp)
            },
            &[a, b, w],
            DEFAULT_H,
            1.0,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn quadratic_loss_finite_differences_are_nearly_exact() {
        // No third derivative, so the central difference has no truncation
        // term, only roundoff.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(
            &|t: &mut Tape, ids: &[TensorId]| {
                let sq = t.mul(ids[0], ids[0])?;
                t.sum(sq)
            },
            &[x],
            DEFAULT_H,
            1.0,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn sum_of_matmul_finite_differences_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let err = grad_check(
            &|t: &mut Tape, ids: &[TensorId]| {
                let y = t.matmul(ids[0], ids[1])?;
                t.sum(y)
            },
            &[a, b],
            DEFAULT_H,
            1.0,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn primitive_suite_passes_across_five_seeds() {
        let report =
            run_primitive_suite(&[1, 2, 3, 4, 5], DEFAULT_H, DEFAULT_TOLERANCE, None).unwrap();
        for row in &report.rows {
            assert!(row.passed, "{} failed with {}", row.name, row.max_rel_err);
        }
        assert_eq!(report.rows.len(), PRIMITIVE_NAMES.len());
    }

    #[test]
    fn injected_fault_is_detected() {
        let report =
            run_primitive_suite(&[1], DEFAULT_H, DEFAULT_TOLERANCE, Some("tanh")).unwrap();
        let tanh = report.rows.iter().find(|r| r.name == "tanh").unwrap();
        assert!(!tanh.passed);
        assert!(report.rows.iter().filter(|r| !r.passed).count() == 1);
    }
}
