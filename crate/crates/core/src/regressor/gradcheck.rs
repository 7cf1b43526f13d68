//! Central finite-difference check of the counting head's analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{loss_and_grads, loss_l2};
use super::{DomainId, ModelParams};
use crate::nn::{max_relative_error, Mode};
use crate::Result;

/// Mutable views of every trainable tensor, in a fixed order: shared
/// weights and biases, then each adapter's gamma, gain and bias.
fn tensors_mut<'a>(model: &'a mut ModelParams, domain: &DomainId) -> Result<Vec<&'a mut [f64]>> {
    let ModelParams {
        shared, domains, ..
    } = model;
    let slot = domains
        .get_mut(domain)
        .ok_or_else(|| crate::Error::DomainNotFound(domain.to_string()))?;
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in &mut shared.layers {
        out.push(l.weights.as_slice_mut().expect("standard layout"));
        out.push(l.bias.as_slice_mut().expect("standard layout"));
    }
    for m in &mut slot.adapters.modules {
        out.push(m.gamma.as_slice_mut().expect("standard layout"));
        out.push(m.bn_gain.as_slice_mut().expect("standard layout"));
        out.push(m.bn_bias.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}

/// Largest relative error between analytic gradients of the train-mode
/// Euclidean loss and central differences with step `eps`, over every
/// shared and adapter parameter.
pub fn grad_check(
    model: &ModelParams,
    domain: &DomainId,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    eps: f64,
) -> Result<f64> {
    let slot = model.domain(domain)?;
    let (_, grads, _) = loss_and_grads(model, slot, features, targets)?;
    let mut analytic: Vec<f64> = Vec::new();
    for g in &grads.dense {
        analytic.extend(g.weights.iter());
        analytic.extend(g.bias.iter());
    }
    for g in &grads.adapters {
        analytic.extend(g.gamma.iter());
        analytic.extend(g.bn_gain.iter());
        analytic.extend(g.bn_bias.iter());
    }

    let mut work = model.clone();
    let sizes: Vec<usize> = tensors_mut(&mut work, domain)?
        .iter()
        .map(|t| t.len())
        .collect();
    let loss_at = |m: &ModelParams| -> Result<f64> {
        let trace = m.trace(features, &m.domain(domain)?.adapters, Mode::Train)?;
        Ok(loss_l2(&trace.output, targets))
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = tensors_mut(&mut work, domain)?[t][i];
            tensors_mut(&mut work, domain)?[t][i] = orig + eps;
            let up = loss_at(&work)?;
            tensors_mut(&mut work, domain)?[t][i] = orig - eps;
            let down = loss_at(&work)?;
            tensors_mut(&mut work, domain)?[t][i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Perturb biases and adapter parameters away from their initial values so
/// every gradient path is exercised. The last FC bias is made positive to
/// keep the output rectifier active.
pub fn randomize_for_grad_check(
    model: &mut ModelParams,
    domain: &DomainId,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = model.shared.layers.len();
    for (i, l) in model.shared.layers.iter_mut().enumerate() {
        if i + 1 == n_layers {
            l.bias.mapv_inplace(|_| rng.random_range(0.5..1.0));
        } else {
            l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    let slot = model.domain_mut(domain)?;
    for m in &mut slot.adapters.modules {
        m.gamma.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m.bn_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
        m.bn_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        m.running_mean.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        m.running_var.mapv_inplace(|_| rng.random_range(0.5..1.5));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut model = ModelParams::new(8, 4).unwrap();
        let d = DomainId::new("g");
        model.register_domain(&d);
        randomize_for_grad_check(&mut model, &d, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((4, 8), |_| rng.random_range(0.0..1.0));
        let t = Array2::from_shape_fn((4, 1), |_| rng.random_range(0.0..3.0));
        let err = grad_check(&model, &d, &x, &t, 1e-6).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
