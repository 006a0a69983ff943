//! Central finite-difference gradient checking.
//!
//! Finite differences are meaningless across a kink (`relu` at 0, `abs` at 0);
//! callers should evaluate at points where no pre-activation sits within
//! `eps` of a kink, perturbing inputs if necessary.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub n_coordinates: usize,
    /// `max_rel_error` restricted to coordinates with a nonzero analytic
    /// gradient.
    pub max_rel_error_nonzero: f64,
    /// Coordinates whose analytic gradient is exactly zero. Their relative
    /// error is dominated by rounding in `f` and says nothing about the
    /// backward pass; compare `max_abs_numeric_at_zero` with
    /// [`GradCheckReport::fd_resolution`] instead.
    pub n_zero_analytic: usize,
    pub max_abs_numeric_at_zero: f64,
    /// `f` at the unperturbed parameters.
    pub value: f64,
    pub eps: f64,
}

impl GradCheckReport {
    /// Size of one rounding step of `f` seen through the central difference,
    /// `ulp(|f|) / 2eps`.
    pub fn fd_resolution(&self) -> f64 {
        self.value.abs().max(f64::MIN_POSITIVE) * f64::EPSILON / (2.0 * self.eps)
    }
}

/// Compares the tape gradient of `f` with `(f(p+eps) - f(p-eps)) / 2eps`
/// for every coordinate of every parameter tensor.
///
/// `f` receives a fresh tape and one trainable leaf per parameter and must
/// return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(params)?;
    let value = tape.value(out).item()?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        n_coordinates: 0,
        max_rel_error_nonzero: 0.0,
        n_zero_analytic: 0,
        max_abs_numeric_at_zero: 0.0,
        value,
        eps,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let (t_plus, _, o_plus) = eval(&work)?;
            let f_plus = t_plus.value(o_plus).item()?;
            work[pi].data_mut()[j] = orig - eps;
            let (t_minus, _, o_minus) = eval(&work)?;
            let f_minus = t_minus.value(o_minus).item()?;
            work[pi].data_mut()[j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.n_coordinates += 1;
            if a == 0.0 {
                report.n_zero_analytic += 1;
                report.max_abs_numeric_at_zero = report.max_abs_numeric_at_zero.max(numeric.abs());
            } else {
                report.max_rel_error_nonzero = report.max_rel_error_nonzero.max(rel);
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}
