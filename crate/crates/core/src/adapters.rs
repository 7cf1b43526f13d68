//! Domain-specific residual adapter: `y = x + gamma * BN(x)`.
//!
//! Each visual domain owns one adapter per position in the head. With
//! `gamma = 0` the module is an exact identity, so a newly registered domain
//! starts from the primed network's function.

use ndarray::{Array1, Array2, Axis};

use crate::nn::Mode;
use crate::regressor::DomainId;
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub gamma: Array1<f64>,
    pub bn_gain: Array1<f64>,
    pub bn_bias: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

/// Batch statistics observed during a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Values a backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct AdapterCache {
    mode: Mode,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub gamma: Array1<f64>,
    pub bn_gain: Array1<f64>,
    pub bn_bias: Array1<f64>,
}

/// Identity-initialised adapter.
pub fn init_adapter(dim: usize) -> AdapterModule {
    AdapterModule {
        gamma: Array1::zeros(dim),
        bn_gain: Array1::ones(dim),
        bn_bias: Array1::zeros(dim),
        running_mean: Array1::zeros(dim),
        running_var: Array1::ones(dim),
        bn_epsilon: BN_EPSILON,
        bn_momentum: BN_MOMENTUM,
    }
}

impl AdapterModule {
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// gamma, bn_gain and bn_bias.
    pub fn trainable_count(&self) -> usize {
        3 * self.dim()
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let (y, _, stats) = self.forward_cached(x, mode)?;
        if let Some(s) = stats {
            self.update_running(&s);
        }
        Ok(y)
    }

    /// Read-only forward pass. Train mode returns the batch statistics so the
    /// caller can fold them into the running averages.
    pub fn forward_cached(
        &self,
        x: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, AdapterCache, Option<BatchStats>)> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "adapter of width {} got input of width {}",
                self.dim(),
                x.ncols()
            )));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let b = x.nrows();
                if b < 2 {
                    return Err(Error::BatchTooSmall(b));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = x - &mean;
                let var = (&centered * &centered)
                    .mean_axis(Axis(0))
                    .expect("non-empty batch");
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.bn_epsilon).sqrt());
        let x_hat = (x - &mean) * &inv_std;
        let mut y = x.clone();
        for (j, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
            let g = self.gamma[j];
            // gamma == 0 leaves the column untouched, bit for bit.
            if g == 0.0 {
                continue;
            }
            let (gain, bias) = (self.bn_gain[j], self.bn_bias[j]);
            for (yv, xh) in col.iter_mut().zip(x_hat.column(j)) {
                *yv += g * (gain * xh + bias);
            }
        }
        Ok((
            y,
            AdapterCache {
                mode,
                x_hat,
                inv_std,
            },
            stats,
        ))
    }

    /// Replace the running statistics with the mean and biased variance of `x`.
    pub fn set_running_from(&mut self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "adapter of width {} fed {} columns",
                self.dim(),
                x.ncols()
            )));
        }
        let Some(mean) = x.mean_axis(Axis(0)) else {
            return Err(Error::InvalidArgument(
                "no rows to take statistics over".into(),
            ));
        };
        self.running_var = x.var_axis(Axis(0), 0.0);
        self.running_mean = mean;
        Ok(())
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.bn_momentum;
        self.running_mean
            .zip_mut_with(&stats.mean, |r, &b| *r = m * *r + (1.0 - m) * b);
        self.running_var
            .zip_mut_with(&stats.var, |r, &b| *r = m * *r + (1.0 - m) * b);
    }

    pub fn backward(&self, cache: &AdapterCache, dy: &Array2<f64>) -> (AdapterGrad, Array2<f64>) {
        let x_hat = &cache.x_hat;
        let z = x_hat * &self.bn_gain + &self.bn_bias;
        let d_gamma = (dy * &z).sum_axis(Axis(0));
        let dz = dy * &self.gamma;
        let d_gain = (&dz * x_hat).sum_axis(Axis(0));
        let d_bias = dz.sum_axis(Axis(0));
        let dx_hat = &dz * &self.bn_gain;
        let dx = match cache.mode {
            Mode::Infer => dy + &(&dx_hat * &cache.inv_std),
            Mode::Train => {
                let b = dy.nrows() as f64;
                let sum_dxh = dx_hat.sum_axis(Axis(0));
                let sum_dxh_xh = (&dx_hat * x_hat).sum_axis(Axis(0));
                let inner = &dx_hat * b - &sum_dxh - &(x_hat * &sum_dxh_xh);
                dy + &(inner * &(&cache.inv_std / b))
            }
        };
        (
            AdapterGrad {
                gamma: d_gamma,
                bn_gain: d_gain,
                bn_bias: d_bias,
            },
            dx,
        )
    }
}

/// Adapter widths for the counting head: before FC1..FC5 and after FC5.
pub fn counting_dims(feature_dim: usize) -> [usize; 6] {
    [feature_dim, 256, 128, 64, 64, 1]
}

/// One domain's adapters, ordered by position in the head.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainModuleSet {
    pub domain: DomainId,
    pub modules: Vec<AdapterModule>,
}

impl DomainModuleSet {
    pub fn identity(domain: DomainId, dims: &[usize]) -> Self {
        DomainModuleSet {
            domain,
            modules: dims.iter().map(|&d| init_adapter(d)).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modules.iter().map(AdapterModule::dim).collect()
    }
}

/// Trainable adapter parameters in a set: `3 * sum(dims)`.
pub fn adapter_param_count(set: &DomainModuleSet) -> usize {
    set.modules.iter().map(AdapterModule::trainable_count).sum()
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(adapter(x) * w)`, over the input and every trainable parameter.
pub fn adapter_grad_check(
    m: &AdapterModule,
    x: &Array2<f64>,
    w: &Array2<f64>,
    mode: Mode,
    eps: f64,
) -> Result<f64> {
    let loss = |m: &AdapterModule, x: &Array2<f64>| -> Result<f64> {
        let (y, _, _) = m.forward_cached(x, mode)?;
        Ok((&y * w).sum())
    };
    let (y, cache, _) = m.forward_cached(x, mode)?;
    if y.dim() != w.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            w.dim(),
            y.dim()
        )));
    }
    let (g, dx) = m.backward(&cache, w);
    let x = x.as_standard_layout().into_owned();
    let dx = dx.as_standard_layout().into_owned();
    let mut analytic: Vec<f64> = dx.iter().copied().collect();
    let mut numeric = Vec::with_capacity(analytic.len() + 3 * m.dim());
    for idx in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().expect("standard layout")[idx] += eps;
        xm.as_slice_mut().expect("standard layout")[idx] -= eps;
        numeric.push((loss(m, &xp)? - loss(m, &xm)?) / (2.0 * eps));
    }
    type Field = fn(&mut AdapterModule) -> &mut Array1<f64>;
    let fields: [(Field, &Array1<f64>); 3] = [
        (|m| &mut m.gamma, &g.gamma),
        (|m| &mut m.bn_gain, &g.bn_gain),
        (|m| &mut m.bn_bias, &g.bn_bias),
    ];
    for (field, grad) in fields {
        for j in 0..m.dim() {
            let mut mp = m.clone();
            let mut mm = m.clone();
            field(&mut mp)[j] += eps;
            field(&mut mm)[j] -= eps;
            numeric.push((loss(&mp, &x)? - loss(&mm, &x)?) / (2.0 * eps));
            analytic.push(grad[j]);
        }
    }
    Ok(crate::nn::max_relative_error(&analytic, &numeric))
}
