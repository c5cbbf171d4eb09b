//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Result, SlipError};

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences and return the worst relative error over all entries.
///
/// `f` receives a fresh tape and the variable holding the current input and
/// must return a 1x1 loss. It must be deterministic: if it uses an RNG, the
/// RNG must be re-seeded identically inside `f` on every call.
///
/// The relative error for one entry is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1e-8); the floor keeps near-zero gradients from
/// exploding the ratio.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(SlipError::InvalidInput(format!(
            "finite-difference step must be positive, got {}",
            step
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let loss = f(&mut tape, v)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(SlipError::Shape(
            "grad_check requires the closure to return a 1x1 loss".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t.clone())?;
        let loss = f(&mut tape, v)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
