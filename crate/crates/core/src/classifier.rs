//! Domain identification from patch features, reusing the frozen shared
//! layers with a fresh set of adapters and a K-way softmax output.

use ndarray::{Array1, Array2, Axis};

use crate::adapters::{adapter_param_count, init_adapter, AdapterModule, DomainModuleSet};
use crate::datagen::Image;
use crate::features::Extractor;
use crate::nn::{softmax_rows, Dense, Mode};
use crate::regressor::head::{recalibrate_stack, stack_backward, stack_forward, StackTrace};
use crate::regressor::optim::AdagradState;
use crate::regressor::train::{adapter_slots, dense_slots, BatchSampler, TrainLog};
use crate::regressor::{
    features_matrix, tile_image, DomainId, ModelParams, PatchDataset, TrainConfig,
};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifierHead {
    pub domains: Vec<DomainId>,
    /// Adapters before FC1..FC4 and before the output layer.
    pub adapters: Vec<AdapterModule>,
    pub output: Dense,
    pub optimizer: Option<AdagradState>,
}

/// How a scene is turned into classifier input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneMode {
    /// Classify every tile and take a majority vote.
    PatchVote,
    /// Resample the whole image to one patch.
    WholeImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneClassification {
    pub domain: DomainId,
    pub votes: Vec<usize>,
    pub mean_probs: Vec<f64>,
}

impl DomainClassifierHead {
    pub fn new(feature_dim: usize, domains: Vec<DomainId>, seed: u64) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a domain classifier needs at least two domains, got {}",
                domains.len()
            )));
        }
        let mut sorted = domains.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != domains.len() {
            return Err(Error::InvalidArgument("duplicate classifier domain".into()));
        }
        let k = domains.len();
        let adapters = [feature_dim, 256, 128, 64, 64]
            .iter()
            .map(|&d| init_adapter(d))
            .collect();
        Ok(DomainClassifierHead {
            domains,
            adapters,
            output: Dense::glorot(64, k, seed),
            optimizer: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.domains.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.adapters[0].dim()
    }

    pub fn class_index(&self, domain: &DomainId) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    pub fn param_count(&self) -> usize {
        let set = DomainModuleSet {
            domain: DomainId::new("classifier"),
            modules: self.adapters.clone(),
        };
        adapter_param_count(&set) + self.output.param_count()
    }

    pub(crate) fn trace(
        &self,
        model: &ModelParams,
        x: &Array2<f64>,
        mode: Mode,
    ) -> Result<StackTrace> {
        model.check_width(x)?;
        if self.feature_dim() != model.feature_dim() {
            return Err(Error::FeatureDim {
                found: self.feature_dim(),
                expected: model.feature_dim(),
            });
        }
        let mut layers: Vec<&Dense> = model.shared.layers[..4].iter().collect();
        layers.push(&self.output);
        stack_forward(&layers, &self.adapters, x, mode, false)
    }

    /// Softmax probabilities, one row per feature row.
    pub fn classify_patch(
        &self,
        model: &ModelParams,
        features: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(softmax_rows(
            &self.trace(model, features, Mode::Infer)?.output,
        ))
    }

    pub fn classify_scene(
        &self,
        model: &ModelParams,
        extractor: &Extractor,
        image: &Image,
        patch_size: usize,
        mode: SceneMode,
    ) -> Result<SceneClassification> {
        if patch_size == 0 {
            return Err(Error::InvalidArgument(
                "patch size must be at least 1".into(),
            ));
        }
        let tiles = match mode {
            SceneMode::PatchVote => tile_image(image, patch_size).2,
            SceneMode::WholeImage => vec![image.resample_square(patch_size)],
        };
        let feats = extractor.extract_batch(&tiles)?;
        let probs = self.classify_patch(model, &features_matrix(&feats, extractor.output_dim()))?;
        let (votes, mean_probs, winner) = vote(&probs);
        Ok(SceneClassification {
            domain: self.domains[winner].clone(),
            votes,
            mean_probs,
        })
    }
}

/// Majority vote over row argmaxes; ties go to the tied class with the
/// highest mean probability, then the lowest index.
pub fn vote(probs: &Array2<f64>) -> (Vec<usize>, Vec<f64>, usize) {
    let k = probs.ncols();
    let mut votes = vec![0usize; k];
    for row in probs.rows() {
        votes[argmax(row.iter().copied())] += 1;
    }
    let mean: Vec<f64> = probs
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(k))
        .to_vec();
    let top = votes.iter().copied().max().unwrap_or(0);
    let winner = (0..k)
        .filter(|&c| votes[c] == top)
        .fold(None, |best: Option<usize>, c| match best {
            Some(b) if mean[b] >= mean[c] => Some(b),
            _ => Some(c),
        })
        .unwrap_or(0);
    (votes, mean, winner)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `-(1/N) * sum_i sum_k S_ik * ln(max(P_ik, 1e-12))`.
pub fn cce_loss(probs: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    -probs
        .iter()
        .zip(labels.iter())
        .map(|(&p, &s)| {
            if s == 0.0 {
                0.0
            } else {
                s * p.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>()
        / n
}

pub fn one_hot(classes: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((classes.len(), k));
    for (i, &c) in classes.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}

pub(crate) struct ClassifierGrads {
    pub adapters: Vec<crate::adapters::AdapterGrad>,
    pub output: crate::nn::DenseGrad,
    pub stats: Vec<crate::adapters::BatchStats>,
}

pub(crate) fn loss_and_grads(
    model: &ModelParams,
    head: &DomainClassifierHead,
    x: &Array2<f64>,
    labels: &Array2<f64>,
) -> Result<(f64, ClassifierGrads)> {
    let trace = head.trace(model, x, Mode::Train)?;
    let probs = softmax_rows(&trace.output);
    let loss = cce_loss(&probs, labels);
    let d_logits = (&probs - labels) / x.nrows() as f64;
    let mut layers: Vec<&Dense> = model.shared.layers[..4].iter().collect();
    layers.push(&head.output);
    let (mut dense, adapters, _) = stack_backward(&layers, &head.adapters, &trace, &d_logits);
    let output = dense.pop().expect("output layer");
    Ok((
        loss,
        ClassifierGrads {
            adapters,
            output,
            stats: trace.stats,
        },
    ))
}

/// Train the classifier adapters and output layer on per-domain patch
/// features. Each mini-batch holds `batch_size / K` (at least one) patches
/// of every class. Shared layers and counting modules are not touched.
pub fn train_classifier(
    model: &ModelParams,
    head: &mut DomainClassifierHead,
    data: &[(DomainId, PatchDataset)],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let k = head.num_classes();
    let mut per_class: Vec<Option<&PatchDataset>> = vec![None; k];
    for (d, set) in data {
        let c = head
            .class_index(d)
            .ok_or_else(|| Error::DomainNotFound(d.to_string()))?;
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no classifier patches for domain {d}"
            )));
        }
        per_class[c] = Some(set);
    }
    let sets: Vec<&PatchDataset> = per_class
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            s.ok_or_else(|| {
                Error::InvalidArgument(format!("no classifier data for domain {}", head.domains[c]))
            })
        })
        .collect::<Result<_>>()?;
    let per = (config.batch_size / k).max(1);
    let mut samplers: Vec<BatchSampler> = (0..k)
        .map(|c| BatchSampler::new(sets[c].len(), derive_seed(config.seed, 0xC1A5 + c as u64)))
        .collect();
    let mut state = head.optimizer.take().unwrap_or_default();
    let mut log = TrainLog {
        losses: Vec::with_capacity(config.iterations),
    };
    let dim = model.feature_dim();
    let result = (|| {
        for _ in 0..config.iterations {
            let mut x = Array2::zeros((per * k, dim));
            let mut classes = Vec::with_capacity(per * k);
            for c in 0..k {
                let idx = samplers[c].next_batch(per);
                let (xc, _) = sets[c].batch(&idx);
                x.slice_mut(ndarray::s![c * per..(c + 1) * per, ..])
                    .assign(&xc);
                classes.extend(std::iter::repeat_n(c, per));
            }
            let (loss, grads) = loss_and_grads(model, head, &x, &one_hot(&classes, k))?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "classifier training diverged (loss {loss})"
                )));
            }
            log.losses.push(loss);
            for (m, s) in head.adapters.iter_mut().zip(&grads.stats) {
                m.update_running(s);
            }
            let mut slots = adapter_slots(&mut head.adapters, &grads.adapters);
            slots.extend(dense_slots(
                std::slice::from_mut(&mut head.output),
                std::slice::from_ref(&grads.output),
            ));
            state.step(slots, config);
        }
        if config.recalibrate_running_stats {
            let views: Vec<_> = sets.iter().map(|s| s.features.view()).collect();
            let all = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::Shape(e.to_string()))?;
            let mut layers: Vec<&Dense> = model.shared.layers[..4].iter().collect();
            layers.push(&head.output);
            recalibrate_stack(&layers, &mut head.adapters, &all, false)?;
        }
        Ok(())
    })();
    head.optimizer = Some(state);
    result.map(|_| log)
}

/// Max relative error between analytic and central-difference gradients of
/// the cross-entropy loss over every trainable classifier parameter.
pub fn classifier_grad_check(
    model: &ModelParams,
    head: &DomainClassifierHead,
    x: &Array2<f64>,
    labels: &Array2<f64>,
    eps: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, head, x, labels)?;
    let mut analytic = Vec::new();
    for g in &grads.adapters {
        analytic.extend(g.gamma.iter().chain(&g.bn_gain).chain(&g.bn_bias));
    }
    analytic.extend(grads.output.weights.iter().chain(&grads.output.bias));

    let loss_at = |h: &DomainClassifierHead| -> Result<f64> {
        let trace = h.trace(model, x, Mode::Train)?;
        Ok(cce_loss(&softmax_rows(&trace.output), labels))
    };
    let mut probe = head.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for t in 0..tensors_mut(&mut probe).len() {
        for i in 0..tensors_mut(&mut probe)[t].len() {
            let orig = tensors_mut(&mut probe)[t][i];
            tensors_mut(&mut probe)[t][i] = orig + eps;
            let up = loss_at(&probe)?;
            tensors_mut(&mut probe)[t][i] = orig - eps;
            let down = loss_at(&probe)?;
            tensors_mut(&mut probe)[t][i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(crate::nn::max_relative_error(&analytic, &numeric))
}

/// Trainable tensors in gradient order.
fn tensors_mut(h: &mut DomainClassifierHead) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for m in &mut h.adapters {
        out.push(m.gamma.as_slice_mut().expect("standard layout"));
        out.push(m.bn_gain.as_slice_mut().expect("standard layout"));
        out.push(m.bn_bias.as_slice_mut().expect("standard layout"));
    }
    out.push(h.output.weights.as_slice_mut().expect("standard layout"));
    out.push(h.output.bias.as_slice_mut().expect("standard layout"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(names: &[&str]) -> Vec<DomainId> {
        names.iter().map(|n| DomainId::new(n)).collect()
    }

    #[test]
    fn cce_examples() {
        let uniform = array![[0.5, 0.5]];
        assert!((cce_loss(&uniform, &array![[1.0, 0.0]]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(cce_loss(&array![[1.0, 0.0]], &array![[1.0, 0.0]]), 0.0);
        let clamped = cce_loss(&array![[0.0, 1.0]], &array![[1.0, 0.0]]);
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn needs_two_distinct_domains() {
        assert!(DomainClassifierHead::new(8, ids(&["a"]), 0).is_err());
        assert!(DomainClassifierHead::new(8, ids(&["a", "a"]), 0).is_err());
        let h = DomainClassifierHead::new(8, ids(&["a", "b", "c"]), 0).unwrap();
        assert_eq!(h.param_count(), 3 * (8 + 512) + 64 * 3 + 3);
    }

    #[test]
    fn vote_majority_and_tie_break() {
        let probs = array![[0.6, 0.4], [0.2, 0.8], [0.7, 0.3]];
        assert_eq!(vote(&probs).2, 0);
        // One vote each; class 1 has the higher mean probability.
        let tie = array![[0.55, 0.45], [0.1, 0.9]];
        let (votes, mean, winner) = vote(&tie);
        assert_eq!(votes, vec![1, 1]);
        assert!(mean[1] > mean[0]);
        assert_eq!(winner, 1);
    }

    #[test]
    fn probabilities_are_normalised() {
        let model = ModelParams::new(8, 1).unwrap();
        let head = DomainClassifierHead::new(8, ids(&["a", "b", "c"]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(0.0..1.0));
        let p = head.classify_patch(&model, &x).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cce_gradients_match_finite_differences() {
        let model = ModelParams::new(8, 3).unwrap();
        let mut head = DomainClassifierHead::new(8, ids(&["a", "b", "c"]), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in &mut head.adapters {
            m.gamma.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            m.bn_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
            m.bn_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let x = Array2::from_shape_fn((6, 8), |_| rng.random_range(0.0..1.0));
        let labels = one_hot(&[0, 1, 2, 0, 1, 2], 3);
        let err = classifier_grad_check(&model, &head, &x, &labels, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_separates_classes_and_leaves_counting_alone() {
        let n = 8;
        let mut model = ModelParams::new(n, 0).unwrap();
        let d = DomainId::new("a");
        model.register_domain(&d);
        let before = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let make = |offset: f64, rng: &mut ChaCha8Rng| PatchDataset {
            features: Array2::from_shape_fn((40, n), |(_, j)| {
                offset * (j % 2) as f64 + rng.random_range(0.0..0.2)
            }),
            targets: vec![0.0; 40],
            sources: Vec::new(),
        };
        let data = vec![
            (DomainId::new("x"), make(0.0, &mut rng)),
            (DomainId::new("y"), make(1.0, &mut rng)),
        ];
        let mut head = DomainClassifierHead::new(n, ids(&["x", "y"]), 0).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let log = train_classifier(&model, &mut head, &data, &cfg).unwrap();
        assert!(log.tail_mean(20) < 0.2 * log.initial().unwrap());
        assert_eq!(model, before);
        let p = head.classify_patch(&model, &data[1].1.features).unwrap();
        assert!(p.column(1).iter().all(|&v| v > 0.5));
    }
}
