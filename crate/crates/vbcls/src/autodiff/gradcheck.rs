//! Central-difference gradient checking against the tape's backward pass.
//!
//! The loss is supplied as a builder that records a fresh forward pass for
//! whatever parameter values it is handed, so the checker can re-evaluate at
//! perturbed points. Coordinates whose +h / -h evaluations disagree on any
//! relu sign are skipped: the loss is not differentiable across a kink and
//! a central difference there measures nothing.

use crate::error::{Error, Result};

use super::optimizer::ParamSet;
use super::tape::{Tape, TensorId};

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn eval(
    build: &impl Fn(&mut Tape, &ParamSet) -> Result<TensorId>,
    params: &ParamSet,
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let (r, c) = tape.shape(loss);
    if r * c != 1 {
        return Err(Error::InvalidShape(format!(
            "gradient check needs a scalar loss, got {r}x{c}"
        )));
    }
    let v = tape.value(loss)[0];
    if !v.is_finite() {
        return Err(Error::NumericInstability(
            "loss evaluated non-finite during finite differencing".into(),
        ));
    }
    Ok((v, tape.relu_activity()))
}

/// Compares externally supplied analytic gradients against central
/// differences of the builder's loss. `analytic` must hold one gradient
/// slice per parameter, in parameter order.
pub fn compare_with_finite_differences(
    params: &mut ParamSet,
    build: impl Fn(&mut Tape, &ParamSet) -> Result<TensorId>,
    h: f64,
    analytic: &[Vec<f64>],
) -> Result<FdReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("step size {h} must be positive")));
    }
    if analytic.len() != params.len() {
        return Err(Error::InvalidShape(format!(
            "{} gradient slices for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for id in 0..params.len() {
        for j in 0..params.get(id).data.len() {
            let original = params.get(id).data[j];

            params.get_mut(id).data[j] = original + h;
            let plus = eval(&build, params);
            params.get_mut(id).data[j] = original - h;
            let minus = eval(&build, params);
            params.get_mut(id).data[j] = original;

            let (lp, mask_p) = plus?;
            let (lm, mask_m) = minus?;
            if mask_p != mask_m {
                // The perturbation flipped a relu: skip the kink.
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[id][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Runs backward once for the analytic gradient, then sweeps every
/// parameter coordinate with central differences of step `h`.
pub fn finite_diff_check(
    params: &mut ParamSet,
    build: impl Fn(&mut Tape, &ParamSet) -> Result<TensorId>,
    h: f64,
) -> Result<FdReport> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|id| params.get(id).grad.clone().expect("backward fills every gradient"))
        .collect();
    compare_with_finite_differences(params, build, h, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Linear loss: sum of W x + b entries for a fixed x.
    fn linear_builder(
        x: Vec<f64>,
    ) -> impl Fn(&mut Tape, &ParamSet) -> Result<TensorId> {
        move |tape, params| {
            let xin = tape.constant(1, x.len(), x.clone())?;
            let w = tape.param(params, 0);
            let b = tape.param(params, 1);
            let y = tape.affine(xin, w, b)?;
            Ok(tape.sum(y))
        }
    }

    fn linear_params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", 0, 3, 2, vec![0.4, -1.2, 0.9, 0.3, -0.5, 2.0]);
        ps.add("b", 0, 1, 2, vec![0.05, -0.75]);
        ps
    }

    #[test]
    fn linear_model_is_exact_for_any_step() {
        for h in [1e-2, 1e-4, 1e-6] {
            let mut ps = linear_params();
            let report =
                finite_diff_check(&mut ps, linear_builder(vec![1.5, -0.25, 0.8]), h).unwrap();
            assert!(
                report.max_rel_error < 1e-8,
                "h = {h}: rel error {}",
                report.max_rel_error
            );
            assert_eq!(report.skipped, 0);
        }
    }

    #[test]
    fn relu_network_passes_at_small_step() {
        let mut ps = ParamSet::new();
        ps.add("w1", 0, 2, 3, vec![0.7, -0.3, 1.1, 0.2, 0.9, -0.6]);
        ps.add("b1", 0, 1, 3, vec![0.3, -0.2, 0.15]);
        ps.add("w2", 0, 3, 1, vec![0.5, -1.0, 0.8]);
        ps.add("b2", 0, 1, 1, vec![0.1]);
        let build = |tape: &mut Tape, params: &ParamSet| {
            let x = tape.constant(1, 2, vec![0.9, -0.4])?;
            let w1 = tape.param(params, 0);
            let b1 = tape.param(params, 1);
            let h1 = tape.affine(x, w1, b1)?;
            let a1 = tape.relu(h1);
            let w2 = tape.param(params, 2);
            let b2 = tape.param(params, 3);
            let out = tape.affine(a1, w2, b2)?;
            let zero = tape.constant(1, 1, vec![0.0])?;
            tape.squared_error(out, zero)
        };
        let report = finite_diff_check(&mut ps, build, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "rel error {}",
            report.max_rel_error
        );
        assert!(report.checked > 0);
    }

    #[test]
    fn corrupted_gradient_reports_half_relative_error() {
        let mut ps = linear_params();
        let build = linear_builder(vec![1.5, -0.25, 0.8]);
        let mut tape = Tape::new();
        let loss = build(&mut tape, &ps).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        let doubled: Vec<Vec<f64>> = (0..ps.len())
            .map(|id| {
                ps.get(id)
                    .grad
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|g| 2.0 * g)
                    .collect()
            })
            .collect();
        let report =
            compare_with_finite_differences(&mut ps, build, 1e-5, &doubled).unwrap();
        assert!(
            (report.max_rel_error - 0.5).abs() < 1e-3,
            "rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut ps = ParamSet::new();
        ps.add("p", 0, 1, 1, vec![750.0]);
        // exp-style blowup: KL term with huge log-variance overflows.
        let build = |tape: &mut Tape, params: &ParamSet| {
            let lv = tape.param(params, 0);
            let mean = tape.constant(1, 1, vec![0.0])?;
            tape.kl_to_prior(mean, lv, &[0.0], &[1.0], crate::distributions::KlFormula::Standard)
        };
        assert!(matches!(
            finite_diff_check(&mut ps, build, 1e-5),
            Err(Error::NumericInstability(_))
        ));
    }
}
