//! Central-difference oracle for analytic gradients.

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Relative error measure used by every check:
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares a supplied analytic gradient against a fourth-order central
/// difference of `f` (five-point stencil, error O(step^4)).
pub fn compare_with_numeric<F>(mut f: F, x: &Tensor, analytic: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step {step} must be positive")));
    }
    x.same_shape(analytic)?;
    let base = f(x)?;
    if base.to_bits() != f(x)?.to_bits() {
        return Err(Error::OracleValidity(
            "function returned different values for identical input".into(),
        ));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            f(&probe)
        };
        let (up, down) = (at(step)?, at(-step)?);
        let (up2, down2) = (at(2.0 * step)?, at(-2.0 * step)?);
        probe.data_mut()[i] = orig;
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks the gradient of a tape-built scalar function of one input.
///
/// `f` records its computation on the given tape starting from the input var
/// and returns the scalar output var.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    let analytic = tape.gradients(out)?.wrt(input);
    compare_with_numeric(
        |probe| {
            let mut tape = Tape::new();
            let input = tape.leaf(probe.clone());
            let out = f(&mut tape, input)?;
            Ok(tape.value(out).item())
        },
        x,
        &analytic,
        step,
    )
}

/// Per-parameter worst relative error for a loss built from a parameter store.
///
/// `loss` must be deterministic given the store (dropout off or fixed seed).
pub fn check_params<F>(store: &ParamStore, loss: F, step: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, &work)?;
    tape.backward(out, &mut work)?;
    let ids: Vec<ParamId> = work.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = work.grad(id).clone();
        let x = work.value(id).clone();
        let mut probe_store = work.clone();
        let err = compare_with_numeric(
            |probe| {
                probe_store.set_value(id, probe.clone())?;
                let mut tape = Tape::new();
                let out = loss(&mut tape, &probe_store)?;
                Ok(tape.value(out).item())
            },
            &x,
            &analytic,
            step,
        )?;
        report.push((work.get(id).name.clone(), err));
    }
    Ok(report)
}

/// Largest error in a [`check_params`] report.
pub fn worst(report: &[(String, f64)]) -> f64 {
    report.iter().map(|(_, e)| *e).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::cell::Cell;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::uniform([4, 3], 2.0, &mut Rng::seed_from(1));
        let err = finite_diff_check(|t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        }, &x, 1e-4)
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sine_against_closed_form_cosine() {
        let x = Tensor::uniform([10], 3.0, &mut Rng::seed_from(2));
        let cos = x.map(f64::cos);
        let err = compare_with_numeric(|p| Ok(p.data().iter().map(|v| v.sin()).sum()), &x, &cos, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn planted_fault_is_caught() {
        let x = Tensor::uniform([6], 1.0, &mut Rng::seed_from(3));
        let corrupted = x.map(|v| 2.0 * v * 1.01);
        let err = compare_with_numeric(|p| Ok(p.sq_norm()), &x, &corrupted, 1e-4).unwrap();
        // 0.01 / 2.01 under the symmetric relative measure.
        assert!((4e-3..=1e-2).contains(&err), "{err}");
        assert!(err > 1e-4);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let x = Tensor::ones([2]);
        let calls = Cell::new(0.0);
        let res = compare_with_numeric(|p| {
            calls.set(calls.get() + 1.0);
            Ok(p.sum() + calls.get())
        }, &x, &x, 1e-4);
        assert!(matches!(res, Err(Error::OracleValidity(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::ones([2]);
        assert!(matches!(compare_with_numeric(|p| Ok(p.sum()), &x, &x, 0.0), Err(Error::Domain(_))));
    }
}
