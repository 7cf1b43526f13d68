//! Count-error metrics, dataset evaluation and parameter audits.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapters::adapter_param_count;
use crate::classifier::DomainClassifierHead;
use crate::datagen::Scene;
use crate::features::Extractor;
use crate::refiner::{refiner_param_count, RefinementNet};
use crate::regressor::{predict_image, DomainId, ModelParams};
use crate::{Error, Result};

/// Mean absolute error.
pub fn mae(gts: &[f64], preds: &[f64]) -> f64 {
    assert_eq!(gts.len(), preds.len(), "length mismatch");
    if gts.is_empty() {
        return 0.0;
    }
    gts.iter()
        .zip(preds)
        .map(|(g, p)| (g - p).abs())
        .sum::<f64>()
        / gts.len() as f64
}

/// Root mean squared error (reported as "MSE" in count tables).
pub fn rmse(gts: &[f64], preds: &[f64]) -> f64 {
    assert_eq!(gts.len(), preds.len(), "length mismatch");
    if gts.is_empty() {
        return 0.0;
    }
    (gts.iter()
        .zip(preds)
        .map(|(g, p)| (g - p) * (g - p))
        .sum::<f64>()
        / gts.len() as f64)
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneResult {
    pub scene_id: String,
    pub gt: f64,
    pub pred: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domain: DomainId,
    pub split: String,
    pub mae: f64,
    /// Root mean squared error.
    pub mse: f64,
    pub scenes: Vec<SceneResult>,
    pub refined: bool,
}

impl EvalReport {
    pub fn gts(&self) -> Vec<f64> {
        self.scenes.iter().map(|s| s.gt).collect()
    }

    pub fn preds(&self) -> Vec<f64> {
        self.scenes.iter().map(|s| s.pred).collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "domain:  {}", self.domain)?;
        writeln!(f, "split:   {}", self.split)?;
        writeln!(f, "refined: {}", self.refined)?;
        writeln!(f, "scenes:  {}", self.scenes.len())?;
        writeln!(f, "MAE:     {:.4}", self.mae)?;
        write!(f, "MSE:     {:.4} (root mean squared)", self.mse)
    }
}

/// Scene totals for `domain`. With `refined` the domain's refiner is applied
/// to each estimate grid before summing. Totals are clamped at zero.
pub fn evaluate(
    model: &ModelParams,
    extractor: &Extractor,
    scenes: &[Scene],
    domain: &DomainId,
    patch_size: usize,
    refined: bool,
    split: &str,
) -> Result<EvalReport> {
    let refiner: Option<&RefinementNet> = if refined {
        Some(model.domain(domain)?.refiner.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("domain {domain} has no trained refiner"))
        })?)
    } else {
        model.domain(domain)?;
        None
    };
    let results: Vec<SceneResult> = scenes
        .par_iter()
        .map(|s| {
            let (grid, total) = predict_image(model, extractor, &s.pixels, domain, patch_size)?;
            let pred = match refiner {
                Some(net) => net.refine(&grid)?.sum().max(0.0),
                None => total,
            };
            Ok(SceneResult {
                scene_id: s.id.clone(),
                gt: s.count() as f64,
                pred,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report_from(domain.clone(), split, results, refined))
}

pub fn report_from(
    domain: DomainId,
    split: &str,
    scenes: Vec<SceneResult>,
    refined: bool,
) -> EvalReport {
    let gts: Vec<f64> = scenes.iter().map(|s| s.gt).collect();
    let preds: Vec<f64> = scenes.iter().map(|s| s.pred).collect();
    EvalReport {
        domain,
        split: split.to_string(),
        mae: mae(&gts, &preds),
        mse: rmse(&gts, &preds),
        scenes,
        refined,
    }
}

/// Per-scene rows: `domain,split,refined,scene_id,gt,pred,abs_err`.
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "domain", "split", "refined", "scene_id", "gt", "pred", "abs_err",
    ])
    .map_err(csv_err)?;
    for r in reports {
        for s in &r.scenes {
            w.write_record([
                r.domain.as_str(),
                &r.split,
                if r.refined { "true" } else { "false" },
                &s.scene_id,
                &s.gt.to_string(),
                &s.pred.to_string(),
                &(s.gt - s.pred).abs().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Published reference figures the audit compares against.
pub const REFERENCE_SHARED: usize = 330_000;
pub const REFERENCE_ADAPTER_RATIO: f64 = 0.05;
pub const REFERENCE_REFINER: usize = 4950;
pub const REFERENCE_MARGINAL: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainAudit {
    pub domain: DomainId,
    pub adapters: usize,
    /// Adapter parameters as a fraction of the shared count.
    pub adapter_ratio: f64,
    pub refiner: Option<usize>,
    /// Adapters plus refiner.
    pub marginal: usize,
    pub marginal_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsAudit {
    pub feature_dim: usize,
    pub shared: usize,
    pub domains: Vec<DomainAudit>,
    pub classifier: Option<usize>,
    /// Differences from the reference figures. Informational only.
    pub deviations: Vec<String>,
}

fn off_by_more_than(actual: f64, reference: f64, tol: f64) -> bool {
    ((actual - reference) / reference).abs() > tol
}

pub fn params_audit(model: &ModelParams, classifier: Option<&DomainClassifierHead>) -> ParamsAudit {
    let shared = model.shared.param_count();
    let mut deviations = Vec::new();
    if off_by_more_than(shared as f64, REFERENCE_SHARED as f64, 0.1) {
        deviations.push(format!(
            "shared head has {shared} parameters; reference figure is {REFERENCE_SHARED}"
        ));
    }
    let domains: Vec<DomainAudit> = model
        .domains
        .iter()
        .map(|(d, slot)| {
            let adapters = adapter_param_count(&slot.adapters);
            let refiner = slot.refiner.as_ref().map(refiner_param_count);
            let marginal = adapters + refiner.unwrap_or(0);
            DomainAudit {
                domain: d.clone(),
                adapters,
                adapter_ratio: adapters as f64 / shared as f64,
                refiner,
                marginal,
                marginal_ratio: marginal as f64 / shared as f64,
            }
        })
        .collect();
    for a in &domains {
        if off_by_more_than(a.adapter_ratio, REFERENCE_ADAPTER_RATIO, 0.1) {
            deviations.push(format!(
                "{}: adapters are {:.2}% of the shared count; reference figure is {:.0}%",
                a.domain,
                100.0 * a.adapter_ratio,
                100.0 * REFERENCE_ADAPTER_RATIO
            ));
        }
        if let Some(r) = a.refiner {
            if r != REFERENCE_REFINER {
                deviations.push(format!(
                    "{}: refiner has {r} parameters; reference figure is {REFERENCE_REFINER}",
                    a.domain
                ));
            }
        }
        if off_by_more_than(a.marginal as f64, REFERENCE_MARGINAL as f64, 0.1) {
            deviations.push(format!(
                "{}: marginal cost is {} parameters; reference figure is {REFERENCE_MARGINAL}",
                a.domain, a.marginal
            ));
        }
    }
    ParamsAudit {
        feature_dim: model.feature_dim(),
        shared,
        domains,
        classifier: classifier.map(DomainClassifierHead::param_count),
        deviations,
    }
}

impl fmt::Display for ParamsAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "feature_dim: {}", self.feature_dim)?;
        writeln!(f, "shared: {}", self.shared)?;
        for d in &self.domains {
            writeln!(
                f,
                "domain {}: adapters {} ({:.2}% of shared), refiner {}, marginal {} ({:.2}%)",
                d.domain,
                d.adapters,
                100.0 * d.adapter_ratio,
                d.refiner
                    .map_or_else(|| "none".to_string(), |r| r.to_string()),
                d.marginal,
                100.0 * d.marginal_ratio
            )?;
        }
        if let Some(c) = self.classifier {
            writeln!(f, "classifier: {c}")?;
        }
        for dev in &self.deviations {
            writeln!(f, "note: {dev}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[10.0, 20.0], &[12.0, 17.0]), 2.5);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]) - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[5.0], &[5.0]), 0.0);
    }

    #[test]
    fn metrics_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..50.0)).collect();
        let p: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..50.0)).collect();
        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..100 {
            let d = g[i] - p[i];
            abs += if d < 0.0 { -d } else { d };
            sq += d * d;
        }
        assert!((mae(&g, &p) - abs / 100.0).abs() < 1e-12);
        assert!((rmse(&g, &p) - (sq / 100.0).sqrt()).abs() < 1e-12);
        assert!(rmse(&g, &p) >= mae(&g, &p));
    }

    #[test]
    fn audit_counts() {
        let mut m = ModelParams::new(64, 0).unwrap();
        let d = DomainId::new("a");
        m.register_domain(&d);
        m.domain_mut(&d).unwrap().refiner = Some(RefinementNet::new(0));
        let a = params_audit(&m, None);
        assert_eq!(a.domains[0].adapters, 3 * (64 + 513));
        assert_eq!(a.domains[0].refiner, Some(4945));
        assert_eq!(a.domains[0].marginal, 3 * 577 + 4945);
        assert!(a.deviations.iter().any(|s| s.contains("4950")));
        assert!(a.to_string().contains("refiner 4945"));
    }
}
