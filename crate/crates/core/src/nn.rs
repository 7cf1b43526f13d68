//! Small dense-layer primitives shared by the counting head and the domain
//! classifier.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Batch-norm behaviour of adapter modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics and update running statistics.
    Train,
    /// Normalise with stored running statistics; read-only.
    Infer,
}

/// Glorot/Xavier uniform bound for the given fan-in and fan-out.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot_fill<R: Rng + ?Sized>(
    out: &mut [f64],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let b = glorot_bound(fan_in, fan_out);
    for v in out.iter_mut() {
        *v = rng.random_range(-b..=b);
    }
}

/// `rows x cols` matrix with entries uniform in `±sqrt(6 / (rows + cols))`.
pub fn glorot_uniform_init(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::zeros((rows, cols));
    glorot_fill(
        m.as_slice_mut().expect("standard layout"),
        rows,
        cols,
        &mut rng,
    );
    m
}

/// Fully connected layer `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, seed: u64) -> Self {
        Dense {
            weights: glorot_uniform_init(fan_in, fan_out, seed),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weights);
        y += &self.bias;
        y
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            weights: x.t().dot(dy).as_standard_layout().into_owned(),
            bias: dy.sum_axis(Axis(0)),
        };
        (grad, dy.dot(&self.weights.t()))
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through a rectifier given its pre-activation input.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Denominator floor for [`max_relative_error`]. Central differences carry
/// round-off of roughly `loss * 1e-16 / eps` in absolute terms, so gradients
/// smaller than this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Largest relative error between analytic and numeric gradients, with the
/// denominator floored so that near-zero gradients compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn glorot_bound_square() {
        assert_eq!(glorot_bound(3, 3), 1.0);
        let m = glorot_uniform_init(3, 3, 1);
        assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(m, glorot_uniform_init(3, 3, 1));
        assert_ne!(m, glorot_uniform_init(3, 3, 2));
    }

    #[test]
    fn glorot_one_by_five_mean_near_zero() {
        assert_eq!(glorot_bound(1, 5), 1.0);
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|s| glorot_uniform_init(1, 5, s).sum())
            .sum::<f64>()
            / (5 * n) as f64;
        // Uniform(-1, 1) has std 1/sqrt(3); 20000 draws put 4 sigma at ~0.016.
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn dense_forward_matches_manual() {
        let d = Dense {
            weights: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.5, -0.5],
        };
        let y = d.forward(&array![[1.0, 0.0, -1.0]]);
        assert_eq!(y, array![[-3.5, -4.5]]);
    }

    #[test]
    fn softmax_is_normalised_and_shift_invariant() {
        let l = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let p = softmax_rows(&l);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&(&l + 17.0));
        assert!((&p - &shifted).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn relu_backward_masks() {
        let pre = array![[-1.0, 0.0, 2.0]];
        assert_eq!(
            relu_backward(&pre, &array![[1.0, 1.0, 1.0]]),
            array![[0.0, 0.0, 1.0]]
        );
    }
}
