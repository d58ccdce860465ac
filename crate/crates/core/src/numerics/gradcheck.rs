//! Central finite-difference checks for tape gradients.

use alloc::vec::Vec;

use super::{GradTape, Tensor, Var};
use crate::{Error, Result};

/// Settings for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is zero are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            abs_floor: 1e-5,
            max_coords: None,
        }
    }
}

/// Largest relative error between the reverse-mode gradient of `f` at
/// `point` and the central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..GradCheckOptions::default()
    };
    grad_check_with(
        |tape, vars| f(tape, vars[0]),
        core::slice::from_ref(point),
        &opts,
    )
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_with<F>(f: F, points: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new().with_finite_checks(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", "function must be scalar-valued"));
        }
        Ok(v.data()[0])
    };

    let mut tape = GradTape::new().with_finite_checks(true);
    let vars: Vec<Var> = points.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let n = points[pi].len();
        let analytic = grads.get(var);
        let stride = match opts.max_coords {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = points[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let a = analytic.map_or(0.0, |g| g[i]);
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
