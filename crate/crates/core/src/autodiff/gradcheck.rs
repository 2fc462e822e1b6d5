//! Finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::graph::{Graph, Tape, Var};
use super::layers::Network;
use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose finite-difference stencil crossed a ReLU or clamp
    /// kink; the function is not differentiable there at step `FD_STEP`.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(analytic).max(libm::fabs(numeric)).max(floor)
}

/// Compares `analytic` against central differences of `eval` on up to
/// `samples` randomly chosen scalar coordinates of `params`.
///
/// `eval` returns the objective value and the kink signature of the
/// evaluation; stencils whose signature differs from the base point are
/// skipped. Gradient entries smaller than `1e-6` times the largest one are
/// compared against that floor instead of their own magnitude.
pub fn check_gradients(
    params: &ParamSet,
    eval: impl Fn(&ParamSet) -> Result<(f64, u64)>,
    analytic: &Gradients,
    samples: usize,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    analytic.check_matches(params)?;
    let (_, base_sig) = eval(params)?;
    let floor = (1e-6 * analytic.max_abs()).max(1e-12);

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, e)| (0..e.value.len()).map(move |i| (name.clone(), i)))
        .collect();
    let order: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        (0..samples * 4).map(|_| rng.random_range(0..coords.len())).collect()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
        passed: false,
    };
    let mut probe = params.clone();
    for ci in order {
        if report.checked >= samples {
            break;
        }
        let (name, i) = &coords[ci];
        let orig = probe.get(name)?.data()[*i];
        probe.get_mut(name)?.data_mut()[*i] = orig + FD_STEP;
        let (fp, sp) = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig - FD_STEP;
        let (fm, sm) = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic.get(name).expect("checked").data()[*i];
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some(format!("{name}[{i}] analytic={a:e} numeric={numeric:e}"));
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < tolerance;
    Ok(report)
}

/// Gradient check of an arbitrary scalar objective built on a tape.
pub fn gradcheck_objective<'op, F>(
    params: &ParamSet,
    objective: F,
    samples: usize,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<'op>, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(&mut tape, params)?;
    let grads = tape.backward(out, &Tensor::scalar(1.0))?.params(params);
    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let o = objective(&mut t, p)?;
        Ok((t.value(&o).item(), t.kink_signature()))
    };
    check_gradients(params, eval, &grads, samples, tolerance, rng)
}

/// Name under which [`gradcheck`] treats the network input as a parameter.
pub const INPUT_NAME: &str = "__input__";

/// Checks parameter and input gradients of a network against central
/// differences of the random projection `sum(r * net(x))`.
pub fn gradcheck(
    net: &Network,
    params: &ParamSet,
    input: &Tensor,
    tolerance: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    let mut all = params.clone();
    all.insert(INPUT_NAME, input.clone());
    // Fix the projection by probing the output shape once.
    let (out, _) = super::layers::forward(net, params, input)?;
    let mut r = Tensor::zeros(out.shape());
    for v in r.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let objective = |tape: &mut Tape<'_>, p: &ParamSet| -> Result<Var> {
        let x = tape.param(p, INPUT_NAME)?;
        let y = net.apply(tape, p, &x)?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(&y, &rv)?;
        Ok(tape.sum(&prod))
    };
    gradcheck_objective(&all, objective, samples, tolerance, rng)
}
