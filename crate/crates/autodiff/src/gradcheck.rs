//! Central finite-difference checks against tape gradients.

use crate::error::{AdError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude floor in the relative-error denominator, so entries whose true
/// derivative is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The point sits on a relu kink or a min tie; the tape returns a
    /// subgradient there and the comparison is meaningless.
    NonComparable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub status: CheckStatus,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Fail
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_output(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(AdError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

fn compare(analytic: &[f64], numeric: &[f64], coords: &[usize], rtol: f64, kink: bool) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: coords.len(),
        status: CheckStatus::Pass,
    };
    for (&c, &n) in coords.iter().zip(numeric) {
        let a = analytic[c];
        let r = relative_error(a, n);
        rep.max_abs_err = rep.max_abs_err.max((a - n).abs());
        if r > rep.max_rel_err {
            rep.max_rel_err = r;
            rep.worst_index = c;
        }
    }
    rep.status = if kink {
        CheckStatus::NonComparable
    } else if rep.max_rel_err <= rtol {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    rep
}

/// Checks the tape gradient of scalar `f` at `point` against central
/// differences with step `h`.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(AdError::InvalidAttr {
            op: "gradient_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let mut ps = ParamSet::new();
    let id = ps.add("x", point.clone());
    let mut tape = Tape::new();
    let x = tape.param(&ps, id)?;
    let out = f(&mut tape, x)?;
    scalar_output(&tape, out)?;
    let kink = tape.hit_kink();
    tape.backward(out, &mut ps)?;
    let analytic = ps.flatten_grads(&[id]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone())?;
        let o = f(&mut t, x)?;
        scalar_output(&t, o)
    };
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = x0;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let coords: Vec<usize> = (0..point.len()).collect();
    Ok(compare(&analytic, &numeric, &coords, rtol, kink))
}

/// Same check for a loss over parameters of a [`ParamSet`]. When the
/// parameters hold more than `max_coords` entries an evenly strided subset
/// is perturbed. Parameter values are restored on return.
pub fn check_params<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    f: F,
    h: f64,
    rtol: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let saved_grads: Vec<Option<Tensor>> = ids.iter().map(|&id| params.grad(id).cloned()).collect();
    params.zero_grads_of(ids);
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    scalar_output(&tape, out)?;
    let kink = tape.hit_kink();
    tape.backward(out, params)?;
    let analytic = params.flatten_grads(ids);

    let base = params.flatten_values(ids);
    let n = base.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let coords: Vec<usize> = (0..n).step_by(stride).collect();
    let mut flat = base.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    let eval = |params: &mut ParamSet, flat: &[f64]| -> Result<f64> {
        params.assign_flat(ids, flat);
        let mut t = Tape::new();
        let o = f(&mut t, params)?;
        scalar_output(&t, o)
    };
    for &c in &coords {
        flat[c] = base[c] + h;
        let fp = eval(params, &flat)?;
        flat[c] = base[c] - h;
        let fm = eval(params, &flat)?;
        flat[c] = base[c];
        numeric.push((fp - fm) / (2.0 * h));
    }
    params.assign_flat(ids, &base);
    for (&id, g) in ids.iter().zip(saved_grads) {
        params.zero_grads_of(&[id]);
        if let Some(g) = g {
            params.accumulate_grad(id, &g)?;
        }
    }
    Ok(compare(&analytic, &numeric, &coords, rtol, kink))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let rep = gradient_check(
            |t, x| {
                let s = t.mul(x, x)?;
                t.sum_all(s)
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        assert_eq!(rep.status, CheckStatus::Pass);
    }

    #[test]
    fn relu_kink_is_non_comparable() {
        let p = Tensor::vector(vec![0.0, 1.0]);
        let rep = gradient_check(
            |t, x| {
                let r = t.relu(x)?;
                t.sum_all(r)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.status, CheckStatus::NonComparable);
        assert!(rep.passed());
    }

    #[test]
    fn non_scalar_function_is_an_error() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let err = gradient_check(|t, x| t.tanh(x), &p, 1e-5, 1e-4).unwrap_err();
        assert_eq!(err, AdError::NotScalar(vec![2]));
    }

    #[test]
    fn wrong_gradient_fails() {
        // a stop-gradient through a constant copy makes the tape miss x^2's slope
        let p = Tensor::vector(vec![1.5]);
        let rep = gradient_check(
            |t, x| {
                let v = t.value(x).clone();
                let c = t.constant(v)?;
                let s = t.mul(x, c)?;
                t.sum_all(s)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.status, CheckStatus::Fail);
    }
}
