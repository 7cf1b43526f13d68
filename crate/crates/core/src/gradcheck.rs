//! Seeded finite-difference checks of every hand-written backward pass.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{adapter_grad_check, init_adapter};
use crate::classifier::{classifier_grad_check, one_hot, DomainClassifierHead};
use crate::nn::Mode;
use crate::refiner::{refiner_grad_check, EstimateGrid, RefinementNet, REFINER_CHANNELS};
use crate::regressor::{grad_check, randomize_for_grad_check, DomainId, ModelParams};
use crate::seed::derive_seed;
use crate::Result;

/// Max relative error per component.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub head: f64,
    pub adapter: f64,
    pub refiner: f64,
    pub classifier: f64,
}

impl GradCheckReport {
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("head", self.head),
            ("adapter", self.adapter),
            ("refiner", self.refiner),
            ("classifier", self.classifier),
        ]
    }

    pub fn max(&self) -> f64 {
        self.components().iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, err) in self.components() {
            writeln!(f, "{name:<10} max rel err {err:.3e}")?;
        }
        write!(f, "{:<10} max rel err {:.3e}", "overall", self.max())
    }
}

const HEAD_DIM: usize = 8;

fn head_check(seed: u64) -> Result<f64> {
    let mut model = ModelParams::new(HEAD_DIM, derive_seed(seed, 1))?;
    let d = DomainId::new("g");
    model.register_domain(&d);
    randomize_for_grad_check(&mut model, &d, derive_seed(seed, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let x = Array2::from_shape_fn((4, HEAD_DIM), |_| rng.random_range(0.0..1.0));
    let t = Array2::from_shape_fn((4, 1), |_| rng.random_range(0.0..3.0));
    grad_check(&model, &d, &x, &t, 1e-6)
}

fn adapter_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Infer] {
        let dim = 4;
        let mut m = init_adapter(dim);
        m.gamma.mapv_inplace(|_| rng.random_range(-1.5..1.5));
        m.bn_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
        m.bn_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        m.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        m.running_var.mapv_inplace(|_| rng.random_range(0.2..2.0));
        let x = Array2::from_shape_fn((6, dim), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((6, dim), |_| rng.random_range(-2.0..2.0));
        worst = worst.max(adapter_grad_check(&m, &x, &w, mode, 1e-6)?);
    }
    Ok(worst)
}

/// Positive biases keep most rectifiers away from their kink.
fn refiner_check(seed: u64) -> Result<f64> {
    let mut net = RefinementNet::with_channels(&REFINER_CHANNELS, derive_seed(seed, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
    for l in &mut net.layers {
        l.bias.mapv_inplace(|_| rng.random_range(0.0..0.3));
    }
    let grid = |rng: &mut ChaCha8Rng| {
        EstimateGrid::new(4, 4, (0..16).map(|_| rng.random_range(0.0..5.0)).collect())
    };
    let estimate = grid(&mut rng)?;
    let target = grid(&mut rng)?;
    refiner_grad_check(&net, &estimate, &target, 1e-5)
}

fn classifier_check(seed: u64) -> Result<f64> {
    let model = ModelParams::new(HEAD_DIM, derive_seed(seed, 7))?;
    let domains = ["a", "b", "c"].iter().map(|s| DomainId::new(s)).collect();
    let mut head = DomainClassifierHead::new(HEAD_DIM, domains, derive_seed(seed, 8))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 9));
    for m in &mut head.adapters {
        m.gamma.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m.bn_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
        m.bn_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    let x = Array2::from_shape_fn((6, HEAD_DIM), |_| rng.random_range(0.0..1.0));
    let labels = one_hot(&[0, 1, 2, 0, 1, 2], 3);
    classifier_grad_check(&model, &head, &x, &labels, 1e-6)
}

/// Counting head (shared layers and adapters, N = 8, batch 4), a lone adapter
/// in both modes including its input gradient, the 1-16-16-16-1 refiner on a
/// 4x4 grid, and the softmax/cross-entropy classifier with K = 3.
pub fn grad_suite(seed: u64) -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        head: head_check(seed)?,
        adapter: adapter_check(seed)?,
        refiner: refiner_check(seed)?,
        classifier: classifier_check(seed)?,
    })
}
