//! Power-iteration estimate of the largest singular value.

use crate::error::{shape_err, Result};

use super::{Real, Tensor};

/// Lower clamp for the norm of the power-iteration vectors and for σ̂.
pub const SPECTRAL_EPS: f64 = 1e-12;

fn normalize<T: Real>(x: &mut [T]) -> T {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let d = n.max(T::lit(SPECTRAL_EPS));
    for v in x.iter_mut() {
        *v /= d;
    }
    n
}

/// Runs `iters` power-iteration steps on the row-major `rows × cols` matrix,
/// updating the left vector `u` in place. Returns the right vector `v` and the
/// estimate `σ̂ = ‖wᵀu‖` (clamped to [`SPECTRAL_EPS`]).
pub fn power_iteration<T: Real>(
    w: &[T],
    rows: usize,
    cols: usize,
    u: &mut [T],
    iters: usize,
) -> (Vec<T>, T) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    let wt_u = |u: &[T]| {
        let mut v = vec![T::zero(); cols];
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += ur * wrc;
            }
        }
        v
    };
    for _ in 0..iters {
        let mut v = wt_u(u);
        normalize(&mut v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(&a, &b)| a * b)
                .sum();
        }
        normalize(u);
    }
    let mut v = wt_u(u);
    let sigma = normalize(&mut v);
    (v, sigma.max(T::lit(SPECTRAL_EPS)))
}

/// Returns `w / σ̂` and the updated power-iteration vector.
pub fn spectral_normalize<T: Real>(
    w: &Tensor<T>,
    u: &[T],
    n_iters: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = w.shape();
    if s.len() != 2 || u.len() != s[0] {
        return shape_err(format!(
            "spectral_normalize: w{s:?} with u of length {}",
            u.len()
        ));
    }
    let mut u = u.to_vec();
    let (_, sigma) = power_iteration(w.data(), s[0], s[1], &mut u, n_iters);
    Ok((w.map(|x| x / sigma), u))
}
