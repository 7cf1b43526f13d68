//! AdaGrad with L2 weight decay folded into the gradient.

use super::TrainConfig;

/// One AdaGrad update of a single scalar.
///
/// `g = grad + lambda * param` (when `decay`), `accum' = accum + g^2`,
/// `param' = param - lr * g / (sqrt(accum') + eps)`.
pub fn adagrad_step(
    param: f64,
    grad: f64,
    accum: f64,
    config: &TrainConfig,
    decay: bool,
) -> (f64, f64) {
    let g = if decay {
        grad + config.weight_decay * param
    } else {
        grad
    };
    let accum = accum + g * g;
    (
        param - config.learning_rate * g / (accum.sqrt() + config.adagrad_epsilon),
        accum,
    )
}

/// A parameter tensor, its gradient and whether weight decay applies.
pub(crate) struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
}

/// Per-tensor squared-gradient accumulators, in parameter-visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdagradState {
    pub accum: Vec<Vec<f64>>,
}

impl AdagradState {
    pub(crate) fn step(&mut self, slots: Vec<ParamSlot<'_>>, config: &TrainConfig) {
        if self.accum.is_empty() {
            self.accum = slots
                .iter()
                .map(|s| vec![config.adagrad_initial_accumulator; s.values.len()])
                .collect();
        }
        debug_assert_eq!(self.accum.len(), slots.len());
        for (slot, acc) in slots.into_iter().zip(self.accum.iter_mut()) {
            debug_assert_eq!(slot.values.len(), acc.len());
            for ((p, g), a) in slot.values.iter_mut().zip(slot.grad).zip(acc.iter_mut()) {
                let (np, na) = adagrad_step(*p, *g, *a, config, slot.decay);
                // Weights of dead units decay towards zero under weight decay
                // alone; flushing subnormals keeps arithmetic on them fast.
                *p = if np.is_subnormal() { 0.0 } else { np };
                *a = na;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.accum.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }
}
