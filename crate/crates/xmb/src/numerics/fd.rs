//! Central-difference gradient validation.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Builds a scalar loss from an input leaf. Implementations must be
/// deterministic: the same input tensor always yields the same loss graph.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

fn eval(f: &impl LossBuilder, x: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), false);
    let loss = f.build(&mut tape, leaf)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric {
            op: "finite_difference_check",
            detail: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Max over the chosen coordinates of
/// |analytic - (f(x+h e) - f(x-h e)) / 2h| / (|analytic| + 1e-8).
pub fn finite_difference_check_coords(
    f: &impl LossBuilder,
    x: &Tensor,
    h: f32,
    coords: &[usize],
) -> Result<f32> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f.build(&mut tape, leaf)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric {
            op: "finite_difference_check",
            detail: "non-finite loss".into(),
        });
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .ok_or_else(|| Error::Contract("loss does not depend on the input".into()))?;

    let mut worst = 0.0f32;
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let up = eval(f, &probe)?;
        probe.data_mut()[c] = orig - h;
        let down = eval(f, &probe)?;
        probe.data_mut()[c] = orig;
        let numeric = (up as f64 - down as f64) / (2.0 * h as f64);
        let a = analytic.data()[c] as f64;
        let rel = ((a - numeric).abs() / (a.abs() + 1e-8)) as f32;
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks every coordinate of `x`.
pub fn finite_difference_check(f: &impl LossBuilder, x: &Tensor, h: f32) -> Result<f32> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_coords(f, x, h, &coords)
}
