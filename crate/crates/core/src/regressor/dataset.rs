use ndarray::Array2;
use rayon::prelude::*;

use crate::datagen::{tile_patches, PatchSource, Scene};
use crate::features::{Extractor, FeatureSource, FeatureVector};
use crate::{Error, Result};

/// Feature rows with their ground-truth patch counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    /// `n x N`.
    pub features: Array2<f64>,
    pub targets: Vec<f64>,
    pub sources: Vec<PatchSource>,
}

impl PatchDataset {
    /// Tile every scene and extract one feature row per patch, in scene then
    /// grid order.
    pub fn from_scenes(extractor: &Extractor, scenes: &[Scene], patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidArgument(
                "patch size must be at least 1".into(),
            ));
        }
        let per_scene: Vec<Vec<(FeatureVector, f64, PatchSource)>> = scenes
            .par_iter()
            .map(|scene| {
                tile_patches(scene, patch_size)
                    .into_iter()
                    .map(|(p, _)| Ok((extractor.extract(&p.patch)?, p.gt_count, p.source)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let rows: Vec<_> = per_scene.into_iter().flatten().collect();
        let dim = extractor.output_dim();
        let features =
            Array2::from_shape_fn((rows.len(), dim), |(i, j)| f64::from(rows[i].0.values[j]));
        let (targets, sources) = rows.into_iter().map(|(_, t, s)| (t, s)).unzip();
        Ok(PatchDataset {
            features,
            targets,
            sources,
        })
    }

    /// Build from precomputed features and their sidecar rows.
    pub fn from_features(features: &[FeatureVector], sources: &[FeatureSource]) -> Result<Self> {
        if features.len() != sources.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} sidecar rows",
                features.len(),
                sources.len()
            )));
        }
        let dim = features.first().map_or(0, FeatureVector::dim);
        if features.iter().any(|f| f.dim() != dim) {
            return Err(Error::Shape("feature rows of differing width".into()));
        }
        Ok(PatchDataset {
            features: Array2::from_shape_fn((features.len(), dim), |(i, j)| {
                f64::from(features[i].values[j])
            }),
            targets: sources.iter().map(|s| s.gt_count).collect(),
            sources: sources
                .iter()
                .map(|s| PatchSource {
                    scene_id: s.scene_id.clone(),
                    row: s.grid_row,
                    col: s.grid_col,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Feature rows and a `b x 1` target column for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let x = self.features.select(ndarray::Axis(0), idx);
        let t = Array2::from_shape_fn((idx.len(), 1), |(i, _)| self.targets[idx[i]]);
        (x, t)
    }

    pub fn to_feature_vectors(&self) -> (Vec<FeatureVector>, Vec<FeatureSource>) {
        let feats = self
            .features
            .rows()
            .into_iter()
            .map(|r| FeatureVector {
                values: r.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let src = self
            .sources
            .iter()
            .zip(&self.targets)
            .map(|(s, &t)| FeatureSource {
                scene_id: s.scene_id.clone(),
                grid_row: s.row,
                grid_col: s.col,
                gt_count: t,
            })
            .collect();
        (feats, src)
    }
}
