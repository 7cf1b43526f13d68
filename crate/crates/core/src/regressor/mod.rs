//! Shared fully connected counting head with per-domain adapter sets.
//!
//! Layout for a domain `d` with adapters `A1..A6`:
//!
//! ```text
//! A1 -> FC1 -> ReLU -> A2 -> FC2 -> ReLU -> A3 -> FC3 -> ReLU
//!    -> A4 -> FC4 -> ReLU -> A5 -> FC5 -> ReLU -> A6
//! ```
//!
//! FC widths are `N-256-128-64-64-1`. Priming trains the FC layers together
//! with one domain's adapters; afterwards the FC layers are frozen and every
//! further domain trains only its own adapters.

mod dataset;
mod gradcheck;
pub(crate) mod head;
pub(crate) mod optim;
pub(crate) mod train;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};

pub use dataset::PatchDataset;
pub use gradcheck::{grad_check, randomize_for_grad_check};
pub use optim::{adagrad_step, AdagradState};
pub use train::{adapt, adapt_with, loss_l2, prime, TrainLog, MAX_INIT_DRAWS};

use crate::adapters::{counting_dims, AdapterCache, BatchStats, DomainModuleSet};
use crate::datagen::{grid_dims, Image};
use crate::features::{Extractor, FrozenExtractorSpec};
pub use crate::nn::glorot_uniform_init;
use crate::nn::{Dense, Mode};
use crate::refiner::{EstimateGrid, RefinementNet};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// FC widths after the feature layer.
pub const HEAD_WIDTHS: [usize; 5] = [256, 128, 64, 64, 1];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(String);

impl DomainId {
    pub fn new(name: &str) -> Self {
        DomainId(name.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        DomainId::new(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 decay `lambda`, applied to weights and adapter gammas only.
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adagrad_epsilon: f64,
    /// Starting value of every squared-gradient accumulator.
    pub adagrad_initial_accumulator: f64,
    /// After the last step, reset adapter running statistics to those of
    /// the whole training set under the final weights.
    pub recalibrate_running_stats: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 2000 iterations of batch 64.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            weight_decay: 1e-3,
            iterations: 2000,
            batch_size: 64,
            seed: 0,
            adagrad_epsilon: 1e-7,
            adagrad_initial_accumulator: 1.0,
            recalibrate_running_stats: true,
        }
    }
}

impl TrainConfig {
    /// Desk defaults with learning rate 0.01, for the estimate-grid refiner.
    /// Its per-grid gradients are large enough that early AdaGrad steps at
    /// 0.1 act as sign steps on every weight and tend to kill the output.
    pub fn refiner_default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    /// Full-scale schedule: 10,000 iterations of batch 256.
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 256,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.iterations > 0
            && self.batch_size > 0
            && self.adagrad_epsilon >= 0.0
            && self.adagrad_initial_accumulator >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid training config {self:?}"
            )))
        }
    }
}

/// The five domain-agnostic FC layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCore {
    pub layers: Vec<Dense>,
}

impl SharedCore {
    pub fn glorot(feature_dim: usize, seed: u64) -> Self {
        let mut fan_in = feature_dim;
        let layers = HEAD_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = Dense::glorot(fan_in, w, derive_seed(seed, i as u64));
                fan_in = w;
                d
            })
            .collect();
        SharedCore { layers }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub(crate) fn layer_refs(&self) -> Vec<&Dense> {
        self.layers.iter().collect()
    }
}

/// Everything stored for one domain: adapters, optional refiner and the
/// optimiser state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSlot {
    pub adapters: DomainModuleSet,
    pub refiner: Option<RefinementNet>,
    pub optimizer: Option<AdagradState>,
    pub refiner_optimizer: Option<AdagradState>,
}

impl DomainSlot {
    pub fn fresh(domain: DomainId, feature_dim: usize) -> Self {
        DomainSlot {
            adapters: DomainModuleSet::identity(domain, &counting_dims(feature_dim)),
            refiner: None,
            optimizer: None,
            refiner_optimizer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shared: SharedCore,
    pub domains: BTreeMap<DomainId, DomainSlot>,
    pub frozen_shared: bool,
    pub primed_domain: Option<DomainId>,
    /// Extractor used to produce the features, when features come from images.
    pub extractor: Option<FrozenExtractorSpec>,
    pub shared_optimizer: Option<AdagradState>,
}

pub(crate) struct CountTrace {
    pub stack: head::StackTrace,
    pub final_cache: AdapterCache,
    pub final_stats: Option<BatchStats>,
    pub output: Array2<f64>,
}

impl ModelParams {
    /// Glorot-initialised head with no domains registered.
    pub fn new(feature_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be positive".into(),
            ));
        }
        Ok(ModelParams {
            shared: SharedCore::glorot(feature_dim, seed),
            domains: BTreeMap::new(),
            frozen_shared: false,
            primed_domain: None,
            extractor: None,
            shared_optimizer: None,
        })
    }

    pub fn with_extractor(mut self, spec: FrozenExtractorSpec) -> Self {
        self.extractor = Some(spec);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.shared.feature_dim()
    }

    pub fn has_domain(&self, domain: &DomainId) -> bool {
        self.domains.contains_key(domain)
    }

    pub fn domain(&self, domain: &DomainId) -> Result<&DomainSlot> {
        self.domains
            .get(domain)
            .ok_or_else(|| Error::DomainNotFound(domain.to_string()))
    }

    pub fn domain_mut(&mut self, domain: &DomainId) -> Result<&mut DomainSlot> {
        self.domains
            .get_mut(domain)
            .ok_or_else(|| Error::DomainNotFound(domain.to_string()))
    }

    /// Register identity adapters for `domain` (replacing any existing set).
    pub fn register_domain(&mut self, domain: &DomainId) {
        let slot = DomainSlot::fresh(domain.clone(), self.feature_dim());
        self.domains.insert(domain.clone(), slot);
    }

    pub(crate) fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.feature_dim() {
            return Err(Error::FeatureDim {
                found: x.ncols(),
                expected: self.feature_dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(
        &self,
        x: &Array2<f64>,
        adapters: &DomainModuleSet,
        mode: Mode,
    ) -> Result<CountTrace> {
        self.check_width(x)?;
        let layers = self.shared.layer_refs();
        let stack = head::stack_forward(&layers, &adapters.modules[..5], x, mode, true)?;
        let (output, final_cache, final_stats) =
            adapters.modules[5].forward_cached(&stack.output, mode)?;
        Ok(CountTrace {
            stack,
            final_cache,
            final_stats,
            output,
        })
    }

    /// Count estimates `F(X; Theta)` for a batch of feature rows. Train mode
    /// uses batch statistics and folds them into the domain's running stats.
    pub fn forward(
        &mut self,
        features: &Array2<f64>,
        domain: &DomainId,
        mode: Mode,
    ) -> Result<Array2<f64>> {
        let trace = self.trace(features, &self.domain(domain)?.adapters, mode)?;
        if mode == Mode::Train {
            let set = &mut self.domain_mut(domain)?.adapters;
            for (m, s) in set.modules.iter_mut().zip(&trace.stack.stats) {
                m.update_running(s);
            }
            if let Some(s) = &trace.final_stats {
                set.modules[5].update_running(s);
            }
        }
        Ok(trace.output)
    }

    /// Inference-mode estimates, one per feature row.
    pub fn predict(&self, features: &Array2<f64>, domain: &DomainId) -> Result<Array1<f64>> {
        let trace = self.trace(features, &self.domain(domain)?.adapters, Mode::Infer)?;
        Ok(trace.output.column(0).to_owned())
    }
}

/// Split an image into zero-padded `patch_size` tiles, row-major.
pub fn tile_image(image: &Image, patch_size: usize) -> (usize, usize, Vec<Image>) {
    let (rows, cols) = grid_dims(image.height(), image.width(), patch_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push(image.crop_padded(r * patch_size, c * patch_size, patch_size));
        }
    }
    (rows, cols, tiles)
}

pub(crate) fn features_matrix(rows: &[crate::features::FeatureVector], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| f64::from(rows[i].values[j]))
}

/// Per-patch estimates arranged as a grid, and the image total. The total is
/// the row-major sum of the grid, clamped at zero.
pub fn predict_image(
    model: &ModelParams,
    extractor: &Extractor,
    image: &Image,
    domain: &DomainId,
    patch_size: usize,
) -> Result<(EstimateGrid, f64)> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument(
            "patch size must be at least 1".into(),
        ));
    }
    model.domain(domain)?;
    let (rows, cols, tiles) = tile_image(image, patch_size);
    let feats = extractor.extract_batch(&tiles)?;
    let x = features_matrix(&feats, extractor.output_dim());
    let est = model.predict(&x, domain)?;
    let grid = EstimateGrid::new(rows, cols, est.to_vec())?;
    let total = grid.sum().max(0.0);
    Ok((grid, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(n: usize, seed: u64) -> (ModelParams, DomainId) {
        let mut m = ModelParams::new(n, seed).unwrap();
        let d = DomainId::new("a");
        m.register_domain(&d);
        (m, d)
    }

    /// Plain loops, no ndarray products.
    fn oracle_forward(m: &ModelParams, set: &DomainModuleSet, x: &[f64]) -> f64 {
        let adapt = |k: usize, v: Vec<f64>| -> Vec<f64> {
            let a = &set.modules[k];
            v.iter()
                .enumerate()
                .map(|(j, &xv)| {
                    let bn = a.bn_gain[j] * (xv - a.running_mean[j])
                        / (a.running_var[j] + a.bn_epsilon).sqrt()
                        + a.bn_bias[j];
                    xv + a.gamma[j] * bn
                })
                .collect()
        };
        let mut v = x.to_vec();
        for (k, layer) in m.shared.layers.iter().enumerate() {
            v = adapt(k, v);
            let mut out = vec![0.0; layer.fan_out()];
            for (o, item) in out.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, vi) in v.iter().enumerate() {
                    acc += vi * layer.weights[[i, o]];
                }
                *item = acc.max(0.0);
            }
            v = out;
        }
        adapt(5, v)[0]
    }

    #[test]
    fn layer_shapes_chain() {
        let (m, _) = small_model(10, 0);
        let shapes: Vec<(usize, usize)> = m
            .shared
            .layers
            .iter()
            .map(|l| (l.fan_in(), l.fan_out()))
            .collect();
        assert_eq!(
            shapes,
            vec![(10, 256), (256, 128), (128, 64), (64, 64), (64, 1)]
        );
        assert!(m
            .shared
            .layers
            .iter()
            .all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn identity_adapters_reduce_to_plain_stack() {
        let (m, d) = small_model(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(0.0..1.0));
        let y = m.predict(&x, &d).unwrap();
        for i in 0..6 {
            let mut v = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
            for l in &m.shared.layers {
                v = crate::nn::relu(&l.forward(&v));
            }
            assert_eq!(y[i].to_bits(), v[[0, 0]].to_bits());
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let (mut m, d) = small_model(4, 3);
        for l in &mut m.shared.layers {
            *l = Dense::zeros(l.fan_in(), l.fan_out());
        }
        let x = Array2::from_elem((3, 4), 5.0);
        assert!(m.predict(&x, &d).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_loop_oracle_with_random_adapters() {
        let (mut m, d) = small_model(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in &mut m.shared.layers {
            l.bias.mapv_inplace(|_| rng.random_range(0.0..0.2));
        }
        let set = &mut m.domains.get_mut(&d).unwrap().adapters;
        for a in &mut set.modules {
            let dim = a.dim();
            *a = init_adapter(dim);
            a.gamma.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            a.bn_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
            a.bn_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            a.running_mean.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            a.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
        }
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let y = m.predict(&x, &d).unwrap();
        let set = &m.domains[&d].adapters;
        for i in 0..5 {
            let o = oracle_forward(&m, set, x.row(i).as_slice().unwrap());
            assert!((y[i] - o).abs() < 1e-10, "{} vs {o}", y[i]);
        }
    }

    #[test]
    fn unknown_domain_and_bad_width() {
        let (m, _) = small_model(4, 0);
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            m.predict(&x, &DomainId::new("zz")),
            Err(Error::DomainNotFound(_))
        ));
        assert!(matches!(
            m.predict(&Array2::zeros((2, 5)), &DomainId::new("a")),
            Err(Error::FeatureDim { .. })
        ));
    }

    #[test]
    fn train_forward_updates_only_that_domain() {
        let (mut m, a) = small_model(4, 0);
        let b = DomainId::new("b");
        m.register_domain(&b);
        let before_b = m.domains[&b].clone();
        let x = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 10.0);
        m.forward(&x, &a, Mode::Train).unwrap();
        assert_eq!(m.domains[&b], before_b);
        assert_ne!(
            m.domains[&a].adapters.modules[0].running_mean,
            before_b.adapters.modules[0].running_mean
        );
    }

    #[test]
    fn registering_other_domains_does_not_change_predictions() {
        let (mut m, a) = small_model(6, 5);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) % 4) as f64 * 0.3);
        let before = m.predict(&x, &a).unwrap();
        m.register_domain(&DomainId::new("other"));
        assert_eq!(m.predict(&x, &a).unwrap(), before);
    }
}
