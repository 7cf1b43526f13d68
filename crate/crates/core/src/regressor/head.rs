//! Forward and backward passes through an alternating stack of adapters and
//! dense layers, shared by the counting head and the domain classifier.

use ndarray::Array2;

use crate::adapters::{AdapterCache, AdapterGrad, AdapterModule, BatchStats};
use crate::nn::{relu, relu_backward, Dense, DenseGrad, Mode};
use crate::Result;

pub(crate) struct Stage {
    cache: AdapterCache,
    /// Adapter output, i.e. the dense layer's input.
    dense_in: Array2<f64>,
    /// Dense pre-activation.
    pre: Array2<f64>,
}

pub(crate) struct StackTrace {
    stages: Vec<Stage>,
    pub stats: Vec<BatchStats>,
    pub output: Array2<f64>,
    rectify_last: bool,
}

/// `adapter[i] -> dense[i] -> ReLU` for each pair; the rectifier after the
/// final dense layer is optional.
pub(crate) fn stack_forward(
    layers: &[&Dense],
    adapters: &[AdapterModule],
    x: &Array2<f64>,
    mode: Mode,
    rectify_last: bool,
) -> Result<StackTrace> {
    debug_assert_eq!(layers.len(), adapters.len());
    let mut stages = Vec::with_capacity(layers.len());
    let mut stats = Vec::new();
    let mut act = x.clone();
    let last = layers.len().saturating_sub(1);
    for (i, (layer, adapter)) in layers.iter().zip(adapters).enumerate() {
        let (dense_in, cache, s) = adapter.forward_cached(&act, mode)?;
        stats.extend(s);
        let pre = layer.forward(&dense_in);
        act = if i < last || rectify_last {
            relu(&pre)
        } else {
            pre.clone()
        };
        stages.push(Stage {
            cache,
            dense_in,
            pre,
        });
    }
    Ok(StackTrace {
        stages,
        stats,
        output: act,
        rectify_last,
    })
}

/// Replace every adapter's running statistics with the statistics of its
/// input over `x`, front to back, so later adapters see inputs normalised by
/// the recalibrated earlier ones. Returns the infer-mode stack output.
pub(crate) fn recalibrate_stack(
    layers: &[&Dense],
    adapters: &mut [AdapterModule],
    x: &Array2<f64>,
    rectify_last: bool,
) -> Result<Array2<f64>> {
    let mut act = x.clone();
    let last = layers.len().saturating_sub(1);
    for (i, (layer, adapter)) in layers.iter().zip(adapters.iter_mut()).enumerate() {
        adapter.set_running_from(&act)?;
        let pre = layer.forward(&adapter.forward(&act, Mode::Infer)?);
        act = if i < last || rectify_last {
            relu(&pre)
        } else {
            pre
        };
    }
    Ok(act)
}

pub(crate) fn stack_backward(
    layers: &[&Dense],
    adapters: &[AdapterModule],
    trace: &StackTrace,
    d_out: &Array2<f64>,
) -> (Vec<DenseGrad>, Vec<AdapterGrad>, Array2<f64>) {
    let n = layers.len();
    let mut dense_grads = Vec::with_capacity(n);
    let mut adapter_grads = Vec::with_capacity(n);
    let mut grad = d_out.clone();
    for i in (0..n).rev() {
        let stage = &trace.stages[i];
        let d_pre = if i < n - 1 || trace.rectify_last {
            relu_backward(&stage.pre, &grad)
        } else {
            grad
        };
        let (dg, d_in) = layers[i].backward(&stage.dense_in, &d_pre);
        let (ag, dx) = adapters[i].backward(&stage.cache, &d_in);
        dense_grads.push(dg);
        adapter_grads.push(ag);
        grad = dx;
    }
    dense_grads.reverse();
    adapter_grads.reverse();
    (dense_grads, adapter_grads, grad)
}
