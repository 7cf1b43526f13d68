//! Fully convolutional refinement of a grid of per-patch count estimates.
//!
//! Four 3x3 same-padded convolutions (1 -> 16 -> 16 -> 16 -> 1 channels),
//! each followed by a rectifier, map an estimate grid of any size to a grid
//! of the same size.

mod train;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::glorot_fill;
use crate::{Error, Result};

pub use train::{
    build_refinement_pairs, fit_refiner, scene_mae, train_refiner, RefinementPair, RefinerFit,
    CHECKPOINT_EVERY, MIN_PAIRS_FOR_HOLDOUT, REFINER_HOLDOUT,
};

pub const REFINER_CHANNELS: [usize; 5] = [1, 16, 16, 16, 1];
pub const REFINER_KERNEL: usize = 3;

/// `rows x cols` per-patch estimates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub scene_id: Option<String>,
}

impl EstimateGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("estimate grid needs at least one cell".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "estimate grid entries must be finite".into(),
            ));
        }
        Ok(EstimateGrid {
            rows,
            cols,
            values,
            scene_id: None,
        })
    }

    pub fn with_scene(mut self, id: impl Into<String>) -> Self {
        self.scene_id = Some(id.into());
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Row-major sum.
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// One same-padded convolution; weights are `(k*k*c_in) x c_out` with rows
/// ordered `(ky, kx, c_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `(h*w) x c_in` -> `(h*w) x (k*k*c_in)` patch matrix with zero borders.
    fn im2col(&self, input: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let k = REFINER_KERNEL;
        let pad = (k / 2) as isize;
        let cin = self.in_channels;
        let mut cols = Array2::zeros((h * w, k * k * cin));
        for y in 0..h {
            for x in 0..w {
                let mut row = cols.row_mut(y * w + x);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = input.row(iy as usize * w + ix as usize);
                        for c in 0..cin {
                            row[(ky * k + kx) * cin + c] = src[c];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let k = REFINER_KERNEL;
        let pad = (k / 2) as isize;
        let cin = self.in_channels;
        let mut out = Array2::zeros((h * w, cin));
        for y in 0..h {
            for x in 0..w {
                let row = dcols.row(y * w + x);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let mut dst = out.row_mut(iy as usize * w + ix as usize);
                        for c in 0..cin {
                            dst[c] += row[(ky * k + kx) * cin + c];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementNet {
    pub layers: Vec<ConvLayer>,
}

pub(crate) struct RefineTrace {
    h: usize,
    w: usize,
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl RefinementNet {
    /// The standard 1 -> 16 -> 16 -> 16 -> 1 network, identity-initialised.
    pub fn new(seed: u64) -> Self {
        let mut net = Self::with_channels(&REFINER_CHANNELS, seed);
        net.set_identity_path();
        net
    }

    /// Route channel 0 of every layer through the centre tap of channel 0 of
    /// the previous layer only, with weight 1. Other channels keep their
    /// weights, so the net starts as `max(est, 0)` and learns corrections.
    pub fn set_identity_path(&mut self) {
        let centre = (REFINER_KERNEL * REFINER_KERNEL) / 2;
        for l in &mut self.layers {
            l.weights.column_mut(0).fill(0.0);
            l.weights[[centre * l.in_channels, 0]] = 1.0;
            l.bias[0] = 0.0;
        }
    }

    /// Glorot-uniform weights and zero biases for the given channel widths.
    pub fn with_channels(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = REFINER_KERNEL * REFINER_KERNEL;
        let layers = channels
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let mut weights = Array2::zeros((k2 * cin, cout));
                glorot_fill(
                    weights.as_slice_mut().expect("standard layout"),
                    k2 * cin,
                    k2 * cout,
                    &mut rng,
                );
                ConvLayer {
                    in_channels: cin,
                    out_channels: cout,
                    weights,
                    bias: Array1::zeros(cout),
                }
            })
            .collect();
        RefinementNet { layers }
    }

    pub fn zeros(channels: &[usize]) -> Self {
        let mut net = Self::with_channels(channels, 0);
        for l in &mut net.layers {
            l.weights.fill(0.0);
        }
        net
    }

    pub(crate) fn trace(&self, grid: &EstimateGrid) -> RefineTrace {
        let (h, w) = (grid.rows, grid.cols);
        let mut act = Array2::from_shape_vec((h * w, 1), grid.values.clone()).expect("grid layout");
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let c = l.im2col(&act, h, w);
            let mut z = c.dot(&l.weights);
            z += &l.bias;
            act = z.mapv(|v| v.max(0.0));
            cols.push(c);
            pre.push(z);
        }
        RefineTrace {
            h,
            w,
            cols,
            pre,
            output: act,
        }
    }

    /// Gradients for a loss whose derivative with respect to the output grid
    /// is `d_out` (`(h*w) x 1`).
    pub(crate) fn backward(&self, trace: &RefineTrace, d_out: &Array2<f64>) -> Vec<ConvGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = d_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let mut d_pre = grad;
            d_pre.zip_mut_with(&trace.pre[i], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            grads.push(ConvGrad {
                weights: trace.cols[i]
                    .t()
                    .dot(&d_pre)
                    .as_standard_layout()
                    .into_owned(),
                bias: d_pre.sum_axis(Axis(0)),
            });
            grad = l.col2im(&d_pre.dot(&l.weights.t()), trace.h, trace.w);
        }
        grads.reverse();
        grads
    }

    /// Refined grid with the input's dimensions.
    pub fn refine(&self, grid: &EstimateGrid) -> Result<EstimateGrid> {
        if self.layers.first().map_or(1, |l| l.in_channels) != 1
            || self.layers.last().map_or(1, |l| l.out_channels) != 1
        {
            return Err(Error::Shape(
                "refiner must map one channel to one channel".into(),
            ));
        }
        let out = if self.layers.is_empty() {
            grid.values.clone()
        } else {
            self.trace(grid).output.column(0).to_vec()
        };
        let mut g = EstimateGrid::new(grid.rows, grid.cols, out)?;
        g.scene_id = grid.scene_id.clone();
        Ok(g)
    }
}

/// Sum of `k*k*c_in*c_out + c_out` over layers.
pub fn refiner_param_count(net: &RefinementNet) -> usize {
    net.layers.iter().map(ConvLayer::param_count).sum()
}

/// Max relative error between analytic and central-difference gradients of
/// `0.5 * ||refine(grid) - target||^2` over every weight and bias.
pub fn refiner_grad_check(
    net: &RefinementNet,
    grid: &EstimateGrid,
    target: &EstimateGrid,
    eps: f64,
) -> Result<f64> {
    if (grid.rows(), grid.cols()) != (target.rows(), target.cols()) {
        return Err(Error::Shape(
            "estimate and target grids differ in size".into(),
        ));
    }
    let loss = |n: &RefinementNet| -> Result<f64> {
        let out = n.refine(grid)?;
        Ok(out
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum())
    };
    let trace = net.trace(grid);
    let t = Array2::from_shape_vec((target.values().len(), 1), target.values().to_vec())
        .expect("grid length matches");
    let grads = net.backward(&trace, &(&trace.output - &t));
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut probe = net.clone();
    for (li, g) in grads.iter().enumerate() {
        for i in 0..g.weights.len() {
            let w = probe.layers[li]
                .weights
                .as_slice_mut()
                .expect("standard layout");
            let orig = w[i];
            w[i] = orig + eps;
            let up = loss(&probe)?;
            probe.layers[li]
                .weights
                .as_slice_mut()
                .expect("standard layout")[i] = orig - eps;
            let down = loss(&probe)?;
            probe.layers[li]
                .weights
                .as_slice_mut()
                .expect("standard layout")[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
            analytic.push(g.weights.as_slice().expect("standard layout")[i]);
        }
        for i in 0..g.bias.len() {
            let orig = probe.layers[li].bias[i];
            probe.layers[li].bias[i] = orig + eps;
            let up = loss(&probe)?;
            probe.layers[li].bias[i] = orig - eps;
            let down = loss(&probe)?;
            probe.layers[li].bias[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
            analytic.push(g.bias[i]);
        }
    }
    Ok(crate::nn::max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct index-by-index convolution stack.
    fn naive_refine(net: &RefinementNet, grid: &EstimateGrid) -> Vec<Vec<f64>> {
        let (h, w) = (grid.rows(), grid.cols());
        let mut act: Vec<Vec<f64>> = vec![grid.values().to_vec()];
        for l in &net.layers {
            let mut next = vec![vec![0.0; h * w]; l.out_channels];
            for (co, plane) in next.iter_mut().enumerate() {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = l.bias[co];
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for (ci, src) in act.iter().enumerate() {
                                    let wgt = l.weights
                                        [[((ky * 3 + kx) as usize) * l.in_channels + ci, co]];
                                    acc += wgt * src[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        plane[y as usize * w + x as usize] = acc.max(0.0);
                    }
                }
            }
            act = next;
        }
        act
    }

    fn random_net(seed: u64) -> RefinementNet {
        let mut net = RefinementNet::with_channels(&REFINER_CHANNELS, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| rng.random_range(0.0..0.3));
        }
        net
    }

    fn random_grid(h: usize, w: usize, seed: u64) -> EstimateGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EstimateGrid::new(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(0.0..5.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(refiner_param_count(&RefinementNet::new(0)), 4945);
        let layer_counts: Vec<usize> = RefinementNet::new(0)
            .layers
            .iter()
            .map(ConvLayer::param_count)
            .collect();
        assert_eq!(layer_counts, vec![160, 2320, 2320, 145]);
        assert_eq!(
            refiner_param_count(&RefinementNet::with_channels(&[1, 1], 0)),
            10
        );
        assert_eq!(
            refiner_param_count(&RefinementNet::with_channels(&[1], 0)),
            0
        );
    }

    #[test]
    fn shape_preserved_including_one_by_one() {
        let net = random_net(1);
        for (h, w) in [(1, 1), (1, 7), (5, 2), (6, 6)] {
            let g = net.refine(&random_grid(h, w, 3)).unwrap();
            assert_eq!((g.rows(), g.cols()), (h, w));
        }
    }

    #[test]
    fn fresh_net_is_rectified_identity() {
        let net = RefinementNet::new(5);
        let mut grid = random_grid(4, 5, 2);
        grid.values[3] = -1.5;
        let out = net.refine(&grid).unwrap();
        for (o, v) in out.values().iter().zip(grid.values()) {
            assert_eq!(*o, v.max(0.0));
        }
    }

    #[test]
    fn zero_net_gives_zero_grid() {
        let net = RefinementNet::zeros(&REFINER_CHANNELS);
        let g = net.refine(&random_grid(3, 4, 0)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_convolution() {
        for seed in 0..5 {
            let net = random_net(seed);
            for (h, w) in [(3, 3), (4, 6), (1, 5)] {
                let grid = random_grid(h, w, seed + 7);
                let fast = net.refine(&grid).unwrap();
                let slow = naive_refine(&net, &grid);
                let diff = fast
                    .values()
                    .iter()
                    .zip(&slow[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-10, "{diff}");
            }
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(EstimateGrid::new(0, 3, vec![]).is_err());
        assert!(EstimateGrid::new(2, 2, vec![1.0; 3]).is_err());
        assert!(EstimateGrid::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let err = refiner_grad_check(
            &random_net(4),
            &random_grid(4, 4, 5),
            &random_grid(4, 4, 6),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
