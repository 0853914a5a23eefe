//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to check.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Agreement between analytic and numeric gradients for one input.
#[derive(Debug, Clone)]
pub struct InputCheck {
    pub index: usize,
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)
    pub rel_err: f64,
    /// Largest elementwise |analytic − numeric|.
    pub max_abs_diff: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    /// Perturbed evaluations that took a different side of some kink than
    /// the unperturbed one; their differences are not derivatives.
    pub kink_crossings: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry roughly 1e-12 of rounding noise per element at step 1e-3, so a
/// gradient that is exactly zero reads as noise of that size.
pub const NORM_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with the given step, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let branches = tape.branches();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], Tensor::into_data))
        .collect();

    let crossings = std::cell::Cell::new(0);
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.branches() != branches {
            crossings.set(crossings.get() + 1);
        }
        Ok(tape.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        report.push(compare(i, a, &numeric));
    }
    Ok(GradCheckReport { inputs: report, kink_crossings: crossings.get() })
}

pub fn compare(index: usize, analytic: &[f64], numeric: &[f64]) -> InputCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let an = norm(analytic);
    let denom = an.max(norm(numeric)).max(NORM_FLOOR);
    InputCheck {
        index,
        rel_err: norm(&diff) / denom,
        max_abs_diff: diff.iter().map(|d| d.abs()).fold(0.0, f64::max),
        analytic_norm: an,
    }
}
