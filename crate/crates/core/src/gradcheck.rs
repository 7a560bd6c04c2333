//! Central finite-difference checks for reverse-mode gradients.

use crate::error::{Error, Result};

/// Below this magnitude the relative error is measured against the floor
/// instead, so gradients that are exactly zero compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub numeric: Vec<f64>,
    /// Element with the largest relative error, if any elements were checked.
    pub worst_index: Option<usize>,
    pub max_rel_error: f64,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let first = f(theta)?;
    let second = f(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point)?;
        point[i] = orig - h;
        let down = f(&point)?;
        point[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` at `theta`.
pub fn finite_difference_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(Error::shape(
            "analytic gradient",
            format!("length {}", theta.len()),
            &[analytic.len()],
        ));
    }
    let numeric = numeric_gradient(f, theta, h)?;
    let mut worst_index = None;
    let mut max_rel_error = 0.0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if worst_index.is_none() || e > max_rel_error {
            max_rel_error = e;
            worst_index = Some(i);
        }
    }
    Ok(FdReport {
        numeric,
        worst_index,
        max_rel_error,
    })
}
