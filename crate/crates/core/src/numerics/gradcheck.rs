use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: FnMut(&DenseArray) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    let grad = finite_diff_coords(
        |v| {
            let arr = DenseArray::new(x.shape().to_vec(), v.to_vec())?;
            Ok(f(&arr))
        },
        x.as_slice(),
        &coords,
        h,
    )?;
    DenseArray::new(x.shape().to_vec(), grad)
}

/// Central differences of `f` along the listed coordinates of `x` only.
///
/// This is the workhorse for checking networks whose full parameter vector is
/// too long to sweep.
pub fn finite_diff_coords<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(Error::invalid(format!("coordinate {i} out of range {}", x.len())));
        }
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::domain(format!(
                "function not finite around coordinate {i}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is essentially zero from
/// turning round-off into huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
