use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Semi-orthogonal rows/columns over the flattened `[out, fan_in]` view.
    Orthogonal,
    /// `U(-gain/√fan_in, gain/√fan_in)`.
    UniformFanin,
}

/// Draws a weight tensor. Weights of rank > 2 (conv kernels) are treated as
/// `[shape[0], Π shape[1..]]`.
pub fn init_layer<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    scheme: InitScheme,
    gain: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return shape_err(format!("init_layer: invalid shape {shape:?}"));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let data: Vec<f64> = match scheme {
        InitScheme::Orthogonal => orthogonal(rows, cols, rng)
            .into_iter()
            .map(|x| x * gain)
            .collect(),
        InitScheme::UniformFanin => {
            let bound = gain / (cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..rows * cols).map(|_| dist.sample(rng)).collect()
        }
    };
    Tensor::from_f64(shape, &data)
}

pub fn init_bias<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

/// Row-major `rows × cols` matrix with orthonormal rows (rows ≤ cols) or
/// orthonormal columns (rows > cols).
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    // Work on a tall n × m matrix, stored column-major as m columns of length n.
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..m {
        // two Gram-Schmidt passes keep the result orthogonal to ~1e-15
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = q.split_at_mut(j);
                let d: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, &qi) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= d * qi;
                }
            }
        }
        let norm = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut q[j] {
            *x /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            if rows >= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}
