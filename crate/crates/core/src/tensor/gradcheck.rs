//! Central-difference gradient checking.
//!
//! [`check`] replays a user-supplied forward closure with each input
//! coordinate nudged by ±h and compares the symmetric difference quotient
//! against the tape's analytic gradient. The closure must be deterministic:
//! it is invoked once for the analytic pass and twice per coordinate.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step size for the symmetric difference quotient.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor for the relative-error denominator, so coordinates whose analytic
/// and numeric gradients are both at noise level compare as equal rather
/// than dividing by (near) zero.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check over all inputs.
#[derive(Debug, Clone)]
pub struct Report {
    /// Largest relative error seen across every coordinate.
    pub max_rel_err: f64,
    /// Input index and flat coordinate where it occurred.
    pub worst: (usize, usize),
    /// Analytic gradient at the worst coordinate.
    pub worst_analytic: f64,
    /// Difference quotient at the worst coordinate.
    pub worst_numeric: f64,
    /// Total coordinates compared.
    pub checked: usize,
}

impl Report {
    pub fn assert_below(&self, threshold: f64) {
        assert!(
            self.max_rel_err < threshold,
            "gradient check failed: max rel err {} at input {} coord {} \
             (analytic {}, numeric {}, threshold {})",
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            self.worst_analytic,
            self.worst_numeric,
            threshold
        );
    }
}

/// Compare analytic gradients of `forward` w.r.t. every coordinate of every
/// input against central differences with step `h`.
///
/// `forward` receives a fresh tape and one leaf per input and must return a
/// scalar loss. Inputs the loss does not depend on are treated as having
/// zero gradient.
pub fn check<F>(inputs: &[Tensor], h: f64, forward: F) -> Result<Report>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with_floor(inputs, h, DENOM_FLOOR, forward)
}

/// [`check`] with an explicit denominator floor.
///
/// The difference quotient carries roundoff of order `|loss| · eps / h`, so
/// checks against losses much larger than 1 need a floor above
/// [`DENOM_FLOOR`] to keep zero-gradient coordinates from amplifying that
/// noise into the reported relative error. Sub-floor gradient pairs are
/// still compared, just against the floor instead of their own magnitude.
pub fn check_with_floor<F>(
    inputs: &[Tensor],
    h: f64,
    denom_floor: f64,
    mut forward: F,
) -> Result<Report>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::contract("gradcheck", "no inputs to check"));
    }

    let eval = |inputs: &[Tensor], forward: &mut F| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = forward(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::contract("gradcheck", "forward must return a scalar"));
        }
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = eval(inputs, &mut forward)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = Report {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let (tape_p, _, loss_p) = eval(&work, &mut forward)?;
            let fp = tape_p.value(loss_p).scalar_value()?;
            work[ti].data_mut()[k] = orig - h;
            let (tape_m, _, loss_m) = eval(&work, &mut forward)?;
            let fm = tape_m.value(loss_m).scalar_value()?;
            work[ti].data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(denom_floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, k);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
