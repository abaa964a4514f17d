use crate::error::{invalid, shape, Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

/// Central-difference gradient check over every coordinate of `point`.
///
/// Returns `max_i |fd_i − analytic_i| / (|analytic_i| + 1e-8)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(loss_fn, analytic_grad, point, step, &coords)
}

/// As [`finite_diff_check`], probing only the listed coordinates. Large
/// parameter vectors are checked on a random subset this way.
pub fn finite_diff_check_coords<F>(
    mut loss_fn: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if analytic_grad.len() != point.len() {
        return Err(shape(format!(
            "gradient has {} entries, point has {}",
            analytic_grad.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.len() {
            return Err(shape(format!("coordinate {i} out of range")));
        }
        let orig = x[i];
        x[i] = orig + step;
        let up = loss_fn(&x);
        x[i] = orig - step;
        let down = loss_fn(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let rel = (fd - analytic_grad[i]).abs() / (analytic_grad[i].abs() + DENOM_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
