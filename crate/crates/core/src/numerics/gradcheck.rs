//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
    pub passed: bool,
    /// Set when the function produced a non-finite value.
    pub non_finite_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
        }
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every parameter in `params`.
pub fn grad_check<F>(params: &ParamSet, f: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let eval = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let loss = f(&mut tape, &bound);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound);
    let base = tape.value(loss).item();
    let grads = bound.collect(tape.backward(loss));

    let mut work = params.clone();
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let analytic = &grads[name];
        let n = value.len();
        let stride = match opts.max_entries {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
            passed: true,
            non_finite_at: None,
        };
        if !base.is_finite() {
            check.passed = false;
            check.non_finite_at = Some(0);
            check.max_rel_err = f64::INFINITY;
            out.push(check);
            continue;
        }
        for i in (0..n).step_by(stride) {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            check.checked += 1;
            let a = analytic.data()[i];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                check.passed = false;
                check.non_finite_at.get_or_insert(i);
                check.max_rel_err = f64::INFINITY;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = i;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        check.passed = check.passed && check.max_rel_err <= opts.tol;
        out.push(check);
    }
    GradCheckReport {
        params: out,
        tol: opts.tol,
    }
}
