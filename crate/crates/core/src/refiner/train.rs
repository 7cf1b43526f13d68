//! Refiner training on (estimate grid, ground-truth grid) pairs.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ConvGrad, EstimateGrid, RefinementNet};
use crate::datagen::{count_grid, grid_dims, split_train_val, Scene};
use crate::features::Extractor;
use crate::regressor::optim::ParamSlot;
use crate::regressor::train::{domain_seed, BatchSampler, TrainLog};
use crate::regressor::{predict_image, AdagradState, DomainId, ModelParams, TrainConfig};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// A base estimate grid and the ground-truth grid it should be refined to.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementPair {
    pub estimate: EstimateGrid,
    pub target: EstimateGrid,
}

/// Base-model estimate grids for `scenes`, each paired with its per-patch
/// ground-truth counts.
pub fn build_refinement_pairs(
    model: &ModelParams,
    extractor: &Extractor,
    scenes: &[Scene],
    domain: &DomainId,
    patch_size: usize,
) -> Result<Vec<RefinementPair>> {
    scenes
        .iter()
        .map(|s| {
            let (est, _) = predict_image(model, extractor, &s.pixels, domain, patch_size)?;
            let (rows, cols) = grid_dims(s.pixels.height(), s.pixels.width(), patch_size);
            let gt = count_grid(&s.dots, rows, cols, patch_size);
            Ok(RefinementPair {
                estimate: est.with_scene(s.id.clone()),
                target: EstimateGrid::new(rows, cols, gt)?.with_scene(s.id.clone()),
            })
        })
        .collect()
}

fn conv_slots<'a>(net: &'a mut RefinementNet, grads: &'a [ConvGrad]) -> Vec<ParamSlot<'a>> {
    let mut slots = Vec::with_capacity(net.layers.len() * 2);
    for (l, g) in net.layers.iter_mut().zip(grads) {
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

/// `(1 / 2N) * sum ||refine(est) - gt||^2` over a batch of same-size pairs,
/// with its gradients.
pub(crate) fn batch_loss_and_grads(
    net: &RefinementNet,
    batch: &[&RefinementPair],
) -> (f64, Vec<ConvGrad>) {
    let n = batch.len() as f64;
    let per: Vec<(f64, Vec<ConvGrad>)> = batch
        .par_iter()
        .map(|p| {
            let trace = net.trace(&p.estimate);
            let cells = p.target.values().len();
            let t = Array2::from_shape_vec((cells, 1), p.target.values().to_vec())
                .expect("grid layout");
            let diff = &trace.output - &t;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * n);
            (loss, net.backward(&trace, &(diff / n)))
        })
        .collect();
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.weights += &gi.weights;
            acc.bias += &gi.bias;
        }
    }
    (loss, grads)
}

/// Held-out fraction of refinement pairs used for checkpoint selection.
pub const REFINER_HOLDOUT: f64 = 0.2;
/// Iterations between checkpoint evaluations.
pub const CHECKPOINT_EVERY: usize = 100;
/// Fewer pairs than this are all used for training, without selection.
pub const MIN_PAIRS_FOR_HOLDOUT: usize = 10;

/// Training losses plus the checkpoint that was kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinerFit {
    pub log: TrainLog,
    /// Iterations completed by the kept weights (0 = the initial net).
    pub selected_iteration: usize,
    /// `(iteration, held-out scene MAE)` at each checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Mean absolute error of clamped grid totals.
pub fn scene_mae(net: &RefinementNet, pairs: &[RefinementPair]) -> Result<f64> {
    let errs: Vec<f64> = pairs
        .par_iter()
        .map(|p| Ok((net.refine(&p.estimate)?.sum().max(0.0) - p.target.sum()).abs()))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Train `net` in place on `pairs`. Pairs are bucketed by grid size; each
/// iteration draws a bucket with probability proportional to its size and a
/// batch from within it.
///
/// With a non-empty `holdout`, the initial net and every
/// [`CHECKPOINT_EVERY`] iterations are scored by held-out scene MAE, and the
/// best checkpoint (earliest on ties) is what `net` and `state` end up as.
pub fn fit_refiner(
    net: &mut RefinementNet,
    state: &mut AdagradState,
    pairs: &[RefinementPair],
    holdout: &[RefinementPair],
    config: &TrainConfig,
    seed: u64,
) -> Result<RefinerFit> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no refinement pairs".into()));
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().chain(holdout).enumerate() {
        let shape = (p.estimate.rows(), p.estimate.cols());
        if shape != (p.target.rows(), p.target.cols()) {
            return Err(Error::Shape(format!(
                "estimate {}x{} paired with target {}x{}",
                shape.0,
                shape.1,
                p.target.rows(),
                p.target.cols()
            )));
        }
        if i < pairs.len() {
            buckets.entry(shape).or_default().push(i);
        }
    }
    let buckets: Vec<Vec<usize>> = buckets.into_values().collect();
    let mut samplers: Vec<BatchSampler> = buckets
        .iter()
        .enumerate()
        .map(|(b, members)| BatchSampler::new(members.len(), derive_seed(seed, b as u64 + 1)))
        .collect();
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut fit = RefinerFit {
        log: TrainLog {
            losses: Vec::with_capacity(config.iterations),
        },
        ..RefinerFit::default()
    };
    let mut best = None;
    if !holdout.is_empty() {
        let mae = scene_mae(net, holdout)?;
        fit.checkpoints.push((0, mae));
        best = Some((mae, net.clone(), state.clone()));
    }
    for it in 1..=config.iterations {
        let b = if buckets.len() == 1 {
            0
        } else {
            let mut r = pick.random_range(0..pairs.len());
            let mut b = 0;
            while r >= buckets[b].len() {
                r -= buckets[b].len();
                b += 1;
            }
            b
        };
        let batch: Vec<&RefinementPair> = samplers[b]
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| &pairs[buckets[b][i]])
            .collect();
        let (loss, grads) = batch_loss_and_grads(net, &batch);
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "refiner training diverged (loss {loss}); lower the learning rate"
            )));
        }
        fit.log.losses.push(loss);
        state.step(conv_slots(net, &grads), config);
        if !holdout.is_empty() && (it % CHECKPOINT_EVERY == 0 || it == config.iterations) {
            let mae = scene_mae(net, holdout)?;
            fit.checkpoints.push((it, mae));
            if best.as_ref().is_some_and(|(m, _, _)| mae < *m) {
                best = Some((mae, net.clone(), state.clone()));
                fit.selected_iteration = it;
            }
        }
    }
    match best {
        Some((_, n, s)) => {
            *net = n;
            *state = s;
        }
        None => fit.selected_iteration = config.iterations,
    }
    Ok(fit)
}

/// Train the refiner stored with `domain`, starting from an identity net if
/// there is none. A seeded [`REFINER_HOLDOUT`] share of the pairs is held
/// out for checkpoint selection.
pub fn train_refiner(
    model: &mut ModelParams,
    domain: &DomainId,
    pairs: &[RefinementPair],
    config: &TrainConfig,
) -> Result<RefinerFit> {
    let seed = derive_seed(domain_seed(config, domain), 0x5EF1);
    let (train, holdout) = if pairs.len() >= MIN_PAIRS_FOR_HOLDOUT {
        split_train_val(pairs, REFINER_HOLDOUT, seed)?
    } else {
        (pairs.to_vec(), Vec::new())
    };
    let slot = model.domain_mut(domain)?;
    let mut net = slot
        .refiner
        .take()
        .unwrap_or_else(|| RefinementNet::new(seed));
    let mut state = slot.refiner_optimizer.take().unwrap_or_default();
    let result = fit_refiner(&mut net, &mut state, &train, &holdout, config, seed);
    slot.refiner = Some(net);
    slot.refiner_optimizer = Some(state);
    result
}
