//! Priming and freeze-then-adapt training of the counting head.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::{recalibrate_stack, stack_backward};
use super::optim::{AdagradState, ParamSlot};
use super::{DomainId, DomainSlot, ModelParams, PatchDataset, TrainConfig};
use crate::adapters::{AdapterGrad, AdapterModule};
use crate::nn::{Dense, DenseGrad, Mode};
use crate::seed::{derive_seed, name_hash};
use crate::{Error, Result};

/// Per-iteration mini-batch training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean loss of the final `window` iterations.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(w)..]
            .iter()
            .sum::<f64>()
            / w as f64
    }

    /// Write `iteration,loss,window_mean` every `every` iterations (and for
    /// the last one). `window_mean` averages the losses since the previous row.
    pub fn write_csv(&self, path: impl AsRef<Path>, every: usize) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let every = every.max(1);
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["iteration", "loss", "window_mean"])
            .map_err(csv_err)?;
        let mut start = 0;
        for (i, &l) in self.losses.iter().enumerate() {
            if i % every == 0 || i + 1 == self.losses.len() {
                let win = &self.losses[start..=i];
                let mean = win.iter().sum::<f64>() / win.len() as f64;
                w.write_record([i.to_string(), l.to_string(), mean.to_string()])
                    .map_err(csv_err)?;
                start = i + 1;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Euclidean loss `(1 / 2N) * sum ||pred_i - target_i||^2` over the batch rows.
pub fn loss_l2(preds: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = preds.nrows().max(1) as f64;
    preds
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / (2.0 * n)
}

/// Seeded shuffled epochs; a batch that runs past the end of an epoch
/// continues into the next shuffle.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Seed for a domain's training run: depends only on the config seed and the
/// domain name, so adaptation order does not matter.
pub(crate) fn domain_seed(config: &TrainConfig, domain: &DomainId) -> u64 {
    derive_seed(config.seed, name_hash(domain.as_str()))
}

pub(crate) fn dense_slots<'a>(
    layers: &'a mut [Dense],
    grads: &'a [DenseGrad],
) -> Vec<ParamSlot<'a>> {
    let mut slots = Vec::with_capacity(layers.len() * 2);
    for (l, g) in layers.iter_mut().zip(grads) {
        slots.push(ParamSlot {
            values: l.weights.as_slice_mut().expect("standard layout"),
            grad: g.weights.as_slice().expect("standard layout"),
            decay: true,
        });
        slots.push(ParamSlot {
            values: l.bias.as_slice_mut().expect("standard layout"),
            grad: g.bias.as_slice().expect("standard layout"),
            decay: false,
        });
    }
    slots
}

pub(crate) fn adapter_slots<'a>(
    modules: &'a mut [AdapterModule],
    grads: &'a [AdapterGrad],
) -> Vec<ParamSlot<'a>> {
    let mut slots = Vec::with_capacity(modules.len() * 3);
    for (m, g) in modules.iter_mut().zip(grads) {
        slots.push(ParamSlot {
            values: m.gamma.as_slice_mut().expect("standard layout"),
            grad: g.gamma.as_slice().expect("standard layout"),
            decay: true,
        });
        slots.push(ParamSlot {
            values: m.bn_gain.as_slice_mut().expect("standard layout"),
            grad: g.bn_gain.as_slice().expect("standard layout"),
            decay: false,
        });
        slots.push(ParamSlot {
            values: m.bn_bias.as_slice_mut().expect("standard layout"),
            grad: g.bn_bias.as_slice().expect("standard layout"),
            decay: false,
        });
    }
    slots
}

pub(crate) struct CountGrads {
    pub dense: Vec<DenseGrad>,
    pub adapters: Vec<AdapterGrad>,
}

/// Loss and gradients of the Euclidean loss for one train-mode batch. Also
/// returns the batch statistics of all six adapters.
pub(crate) fn loss_and_grads(
    model: &ModelParams,
    slot: &DomainSlot,
    x: &Array2<f64>,
    t: &Array2<f64>,
) -> Result<(f64, CountGrads, Vec<crate::adapters::BatchStats>)> {
    let trace = model.trace(x, &slot.adapters, Mode::Train)?;
    let loss = loss_l2(&trace.output, t);
    let dy = (&trace.output - t) / x.nrows() as f64;
    let (g_last, d_stack) = slot.adapters.modules[5].backward(&trace.final_cache, &dy);
    let layers = model.shared.layer_refs();
    let (dense, mut adapters, _) =
        stack_backward(&layers, &slot.adapters.modules[..5], &trace.stack, &d_stack);
    adapters.push(g_last);
    let mut stats = trace.stack.stats;
    stats.extend(trace.final_stats);
    Ok((loss, CountGrads { dense, adapters }, stats))
}

fn run(
    model: &mut ModelParams,
    data: &PatchDataset,
    domain: &DomainId,
    config: &TrainConfig,
    train_shared: bool,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::BatchTooSmall(config.batch_size));
    }
    if data.dim() != model.feature_dim() {
        return Err(Error::FeatureDim {
            found: data.dim(),
            expected: model.feature_dim(),
        });
    }
    let mut slot = model
        .domains
        .remove(domain)
        .ok_or_else(|| Error::DomainNotFound(domain.to_string()))?;
    let mut sampler = BatchSampler::new(data.len(), domain_seed(config, domain));
    let mut adapter_state = slot.optimizer.take().unwrap_or_default();
    let mut shared_state = if train_shared {
        model.shared_optimizer.take().unwrap_or_default()
    } else {
        AdagradState::default()
    };
    let mut log = TrainLog {
        losses: Vec::with_capacity(config.iterations),
    };
    let result = (|| {
        for _ in 0..config.iterations {
            let idx = sampler.next_batch(config.batch_size);
            let (x, t) = data.batch(&idx);
            let (loss, grads, stats) = loss_and_grads(model, &slot, &x, &t)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "training diverged (loss {loss}); lower the learning rate"
                )));
            }
            log.losses.push(loss);
            for (m, s) in slot.adapters.modules.iter_mut().zip(&stats) {
                m.update_running(s);
            }
            if train_shared {
                shared_state.step(dense_slots(&mut model.shared.layers, &grads.dense), config);
            }
            adapter_state.step(
                adapter_slots(&mut slot.adapters.modules, &grads.adapters),
                config,
            );
        }
        if config.recalibrate_running_stats {
            let layers = model.shared.layer_refs();
            let (body, last) = slot.adapters.modules.split_at_mut(5);
            let out = recalibrate_stack(&layers, body, &data.features, true)?;
            last[0].set_running_from(&out)?;
        }
        Ok(())
    })();
    slot.optimizer = Some(adapter_state);
    if train_shared {
        model.shared_optimizer = Some(shared_state);
    }
    model.domains.insert(domain.clone(), slot);
    result.map(|_| log)
}

/// Redraws allowed when the initial head outputs zero for every patch.
pub const MAX_INIT_DRAWS: u64 = 16;

/// Rows checked for a live output unit.
const LIVENESS_ROWS: usize = 1024;

/// A rectified output that is zero on every training patch passes no
/// gradient, so such a head can never start learning.
fn output_alive(model: &ModelParams, data: &PatchDataset, domain: &DomainId) -> Result<bool> {
    let idx: Vec<usize> = (0..data.len().min(LIVENESS_ROWS)).collect();
    let (x, _) = data.batch(&idx);
    Ok(model.predict(&x, domain)?.iter().any(|&v| v > 0.0))
}

/// Train the shared FC layers jointly with `domain`'s adapters, then freeze
/// the shared layers. An untrained head whose output unit is inactive on all
/// patches is first redrawn from seeds derived from `config.seed` and the
/// rejected weights.
pub fn prime(
    model: &mut ModelParams,
    data: &PatchDataset,
    domain: &DomainId,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if model.frozen_shared {
        return Err(Error::InvalidArgument(
            "shared layers are frozen; priming needs a fresh model".into(),
        ));
    }
    if data.dim() != model.feature_dim() {
        return Err(Error::FeatureDim {
            found: data.dim(),
            expected: model.feature_dim(),
        });
    }
    model.register_domain(domain);
    if model.shared_optimizer.is_none() && !data.is_empty() {
        let mut draw = 0;
        while !output_alive(model, data, domain)? {
            if draw == MAX_INIT_DRAWS {
                return Err(Error::InvalidArgument(format!(
                    "head output stayed inactive on every patch after {MAX_INIT_DRAWS} initialisations"
                )));
            }
            // Fold in the rejected weights so distinct initial draws stay distinct.
            let h = model.shared.layers[0]
                .weights
                .iter()
                .fold(0u64, |a, v| a.rotate_left(7) ^ v.to_bits());
            let seed = derive_seed(derive_seed(config.seed ^ h, 0x1D1E), draw);
            model.shared = super::SharedCore::glorot(model.feature_dim(), seed);
            draw += 1;
        }
    }
    let log = run(model, data, domain, config, true)?;
    model.frozen_shared = true;
    model.primed_domain = Some(domain.clone());
    Ok(log)
}

/// Register `domain` with identity adapters and train only those adapters.
pub fn adapt(
    model: &mut ModelParams,
    data: &PatchDataset,
    domain: &DomainId,
    config: &TrainConfig,
) -> Result<TrainLog> {
    adapt_with(model, data, domain, config, false)
}

/// As [`adapt`]; with `retrain` an existing domain's adapters are reset and
/// trained again.
pub fn adapt_with(
    model: &mut ModelParams,
    data: &PatchDataset,
    domain: &DomainId,
    config: &TrainConfig,
    retrain: bool,
) -> Result<TrainLog> {
    if !model.frozen_shared {
        return Err(Error::NotPrimed);
    }
    if model.has_domain(domain) && !retrain {
        return Err(Error::DomainExists(domain.to_string()));
    }
    // Re-registration drops any refiner trained against the old adapters.
    model.register_domain(domain);
    run(model, data, domain, config, false)
}
