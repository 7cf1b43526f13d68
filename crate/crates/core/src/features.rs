//! Frozen convolutional feature extractor with global average pooling, and
//! the little-endian `FTV1` precomputed-feature file format.
//!
//! The extractor stands in for an ImageNet backbone: its weights are drawn
//! once from a seed (Glorot uniform, zero bias) and never change. Features of
//! external backbones of any width can be supplied through `FTV1` files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datagen::Image;
use crate::nn::glorot_fill;
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FTV1";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    /// Linear extractor; only useful for testing.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenExtractorSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for FrozenExtractorSpec {
    /// Three 5x5 stride-2 layers, 8 -> 16 -> 64 channels, rectified, N = 64.
    fn default() -> Self {
        FrozenExtractorSpec::with_output_dim(1, 64, 0)
    }
}

impl FrozenExtractorSpec {
    pub fn with_output_dim(in_channels: usize, n: usize, seed: u64) -> Self {
        let layer = |c| ConvLayerSpec {
            kernel: 5,
            out_channels: c,
            stride: 2,
        };
        FrozenExtractorSpec {
            in_channels,
            layers: vec![layer(8), layer(16), layer(n)],
            nonlinearity: Nonlinearity::Relu,
            seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Smallest patch side the extractor accepts.
    pub fn min_patch_size(&self) -> usize {
        self.layers.iter().map(|l| l.kernel).max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    spec: ConvLayerSpec,
    in_channels: usize,
    /// `(k*k*c_in) x c_out`, rows ordered (ky, kx, c_in).
    weights: Array2<f64>,
    bias: Vec<f64>,
}

/// Output side length of a zero-padded (`k / 2`) strided convolution.
fn conv_out(size: usize, spec: &ConvLayerSpec) -> usize {
    let pad = spec.kernel / 2;
    (size + 2 * pad - spec.kernel) / spec.stride + 1
}

impl ConvLayer {
    /// `input` is `(h*w) x c_in`, row-major positions. Returns `(h'*w') x c_out`.
    fn forward(&self, input: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, usize, usize) {
        let (k, s, cin) = (self.spec.kernel, self.spec.stride, self.in_channels);
        let pad = k / 2;
        let (oh, ow) = (conv_out(h, &self.spec), conv_out(w, &self.spec));
        let mut cols = Array2::<f64>::zeros((oh * ow, k * k * cin));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = input.row(iy as usize * w + ix as usize);
                        for c in 0..cin {
                            row[(ky * k + kx) * cin + c] = src[c];
                        }
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weights);
        for mut r in out.rows_mut() {
            for (v, b) in r.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        (out, oh, ow)
    }
}

/// Immutable, seeded convolutional extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    spec: FrozenExtractorSpec,
    layers: Vec<ConvLayer>,
}

/// Final-layer feature maps of one patch, `height x width` per channel.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub height: usize,
    pub width: usize,
    /// `(height*width) x channels`.
    pub values: Array2<f64>,
}

pub fn build_frozen_extractor(spec: &FrozenExtractorSpec) -> Result<Extractor> {
    if spec.output_dim() == 0 {
        return Err(Error::InvalidArgument(
            "extractor output dimension must be positive".into(),
        ));
    }
    if spec.in_channels == 0 {
        return Err(Error::InvalidArgument(
            "extractor needs at least one input channel".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cin = spec.in_channels;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid conv layer {l:?}")));
        }
        let mut weights = Array2::zeros((l.kernel * l.kernel * cin, l.out_channels));
        // Fan-out counts output channels only; with the receptive field on
        // both sides the pooled features shrink to ~1e-2 over three layers.
        glorot_fill(
            weights.as_slice_mut().expect("standard layout"),
            l.kernel * l.kernel * cin,
            l.out_channels,
            &mut rng,
        );
        layers.push(ConvLayer {
            spec: *l,
            in_channels: cin,
            weights,
            bias: vec![0.0; l.out_channels],
        });
        cin = l.out_channels;
    }
    Ok(Extractor {
        spec: spec.clone(),
        layers,
    })
}

impl Extractor {
    pub fn spec(&self) -> &FrozenExtractorSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn feature_maps(&self, patch: &Image) -> Result<FeatureMaps> {
        if patch.channels() != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "extractor expects {} channels, patch has {}",
                self.spec.in_channels,
                patch.channels()
            )));
        }
        let min = self.spec.min_patch_size();
        if patch.height() < min || patch.width() < min {
            return Err(Error::Shape(format!(
                "{}x{} patch is smaller than the extractor footprint {min}",
                patch.height(),
                patch.width()
            )));
        }
        let (mut h, mut w) = (patch.height(), patch.width());
        let mut act = Array2::from_shape_vec(
            (h * w, patch.channels()),
            patch.data().iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("image layout");
        for layer in &self.layers {
            let (mut out, oh, ow) = layer.forward(&act, h, w);
            if self.spec.nonlinearity == Nonlinearity::Relu {
                out.mapv_inplace(|v| v.max(0.0));
            }
            act = out;
            h = oh;
            w = ow;
        }
        Ok(FeatureMaps {
            height: h,
            width: w,
            values: act,
        })
    }

    /// Global average pool of the final feature maps.
    pub fn extract(&self, patch: &Image) -> Result<FeatureVector> {
        let maps = self.feature_maps(patch)?;
        let n = (maps.height * maps.width) as f64;
        let values = maps
            .values
            .columns()
            .into_iter()
            .map(|c| (c.sum() / n) as f32)
            .collect();
        Ok(FeatureVector { values })
    }

    /// Parallel extraction; output order follows input order.
    pub fn extract_batch(&self, patches: &[Image]) -> Result<Vec<FeatureVector>> {
        patches.par_iter().map(|p| self.extract(p)).collect()
    }

    /// SHA-256 over all weights and biases, for frozen-ness audits.
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One sidecar row mapping a feature row to its patch of origin.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSource {
    pub scene_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub gt_count: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFileMeta {
    pub count: usize,
    pub dim: usize,
    pub sources: Option<Vec<FeatureSource>>,
}

/// `features.ftv` -> `features.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

pub fn save_precomputed(
    path: impl AsRef<Path>,
    features: &[FeatureVector],
    sources: Option<&[FeatureSource]>,
) -> Result<()> {
    let path = path.as_ref();
    let dim = features.first().map_or(0, FeatureVector::dim);
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("feature vectors of differing width".into()));
    }
    let mut buf = Vec::with_capacity(12 + features.len() * dim * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for f in features {
        for v in &f.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    if let Some(sources) = sources {
        if sources.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} sidecar rows for {} features",
                sources.len(),
                features.len()
            )));
        }
        let side = sidecar_path(path);
        let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        let mut text = String::from("row,scene_id,grid_row,grid_col,gt_count\n");
        for (i, s) in sources.iter().enumerate() {
            text.push_str(&format!(
                "{i},{},{},{},{}\n",
                s.scene_id, s.grid_row, s.grid_col, s.gt_count
            ));
        }
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Read an `FTV1` file and, when present, its sidecar CSV. With
/// `expected_dim` set, a width mismatch is an error.
pub fn load_precomputed(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<(Vec<FeatureVector>, FeatureFileMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!(
            "{}: header needs 12 bytes",
            path.display()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected FTV1",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::FeatureDim {
                found: dim,
                expected,
            });
        }
    }
    let body = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("feature file size overflows".into()))?;
    if bytes.len() < 12 + body {
        return Err(Error::Truncated(format!(
            "{}: expected {} body bytes, found {}",
            path.display(),
            body,
            bytes.len() - 12
        )));
    }
    if bytes.len() > 12 + body {
        return Err(Error::Format(format!(
            "{}: trailing bytes after body",
            path.display()
        )));
    }
    let features: Vec<FeatureVector> = bytes[12..]
        .chunks_exact(dim.max(1) * 4)
        .take(count)
        .map(|row| FeatureVector {
            values: row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        })
        .collect();
    let features = if dim == 0 {
        vec![FeatureVector { values: vec![] }; count]
    } else {
        features
    };

    let side = sidecar_path(path);
    let sources = if side.exists() {
        Some(read_sidecar(&side, count)?)
    } else {
        None
    };
    Ok((
        features,
        FeatureFileMeta {
            count,
            dim,
            sources,
        },
    ))
}

fn read_sidecar(path: &Path, count: usize) -> Result<Vec<FeatureSource>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::with_capacity(count);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Format(format!("{}: row {i}: bad {what}", path.display()));
        if rec.len() != 5 {
            return Err(bad("column count"));
        }
        let row: usize = rec[0].parse().map_err(|_| bad("row index"))?;
        if row != i {
            return Err(bad("row index order"));
        }
        out.push(FeatureSource {
            scene_id: rec[1].to_string(),
            grid_row: rec[2].parse().map_err(|_| bad("grid_row"))?,
            grid_col: rec[3].parse().map_err(|_| bad("grid_col"))?,
            gt_count: rec[4].parse().map_err(|_| bad("gt_count"))?,
        });
    }
    if out.len() != count {
        return Err(Error::Format(format!(
            "{}: {} sidecar rows for {count} features",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_patch(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(
            size,
            size,
            1,
            (0..size * size).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_spec_shape() {
        let spec = FrozenExtractorSpec::default();
        assert_eq!(spec.output_dim(), 64);
        assert_eq!(spec.layers.len(), 3);
        let e = build_frozen_extractor(&spec).unwrap();
        let maps = e.feature_maps(&random_patch(32, 0)).unwrap();
        assert_eq!((maps.height, maps.width), (4, 4));
        assert_eq!(e.extract(&random_patch(32, 0)).unwrap().dim(), 64);
    }

    #[test]
    fn zero_output_dim_rejected() {
        assert!(build_frozen_extractor(&FrozenExtractorSpec::with_output_dim(1, 0, 0)).is_err());
    }

    #[test]
    fn deterministic_weights_and_features() {
        let a = build_frozen_extractor(&FrozenExtractorSpec::default()).unwrap();
        let b = build_frozen_extractor(&FrozenExtractorSpec::default()).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
        let p = random_patch(24, 3);
        assert_eq!(a.extract(&p).unwrap(), b.extract(&p.clone()).unwrap());
        let c = build_frozen_extractor(&FrozenExtractorSpec::with_output_dim(1, 64, 1)).unwrap();
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn zero_patches_share_bias_response() {
        let e = build_frozen_extractor(&FrozenExtractorSpec::default()).unwrap();
        let f1 = e.extract(&Image::zeros(32, 32, 1)).unwrap();
        let f2 = e.extract(&Image::zeros(32, 32, 1)).unwrap();
        assert_eq!(f1, f2);
        assert!(f1.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_equals_brute_force_map_mean() {
        let e = build_frozen_extractor(&FrozenExtractorSpec::default()).unwrap();
        let patch = Image::from_vec(20, 20, 1, vec![0.37; 400]).unwrap();
        let maps = e.feature_maps(&patch).unwrap();
        let f = e.extract(&patch).unwrap();
        for c in 0..64 {
            let mut acc = 0.0;
            for y in 0..maps.height {
                for x in 0..maps.width {
                    acc += maps.values[[y * maps.width + x, c]];
                }
            }
            assert_eq!(
                f.values[c],
                (acc / (maps.height * maps.width) as f64) as f32
            );
        }
    }

    #[test]
    fn first_layer_matches_direct_convolution() {
        let spec = FrozenExtractorSpec {
            in_channels: 2,
            layers: vec![ConvLayerSpec {
                kernel: 3,
                out_channels: 4,
                stride: 2,
            }],
            nonlinearity: Nonlinearity::Identity,
            seed: 5,
        };
        let e = build_frozen_extractor(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::from_vec(7, 6, 2, (0..84).map(|_| rng.random::<f32>()).collect()).unwrap();
        let maps = e.feature_maps(&img).unwrap();
        let l = &e.layers[0];
        assert_eq!((maps.height, maps.width), (4, 3));
        for oy in 0..4 {
            for ox in 0..3 {
                for co in 0..4 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (2 * oy + ky, 2 * ox + kx);
                            if iy < 1 || ix < 1 || iy - 1 >= 7 || ix - 1 >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += f64::from(img.get(iy - 1, ix - 1, ci))
                                    * l.weights[[(ky * 3 + kx) * 2 + ci, co]];
                            }
                        }
                    }
                    assert!((maps.values[[oy * 3 + ox, co]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_extractor_scales_with_input() {
        let mut spec = FrozenExtractorSpec::default();
        spec.nonlinearity = Nonlinearity::Identity;
        let e = build_frozen_extractor(&spec).unwrap();
        let p = random_patch(16, 9);
        let scaled =
            Image::from_vec(16, 16, 1, p.data().iter().map(|v| v * 0.5).collect()).unwrap();
        let (f, g) = (e.extract(&p).unwrap(), e.extract(&scaled).unwrap());
        for (a, b) in f.values.iter().zip(&g.values) {
            assert!((0.5 * a - b).abs() <= 1e-6 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn small_patch_and_channel_mismatch_rejected() {
        let e = build_frozen_extractor(&FrozenExtractorSpec::default()).unwrap();
        assert!(e.extract(&Image::zeros(4, 4, 1)).is_err());
        assert!(e.extract(&Image::zeros(16, 16, 3)).is_err());
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ftv");
        let feats = vec![
            FeatureVector {
                values: vec![1.0, 2.0, 3.0]
            };
            4
        ];
        save_precomputed(&p, &feats, None).unwrap();
        assert!(matches!(
            load_precomputed(&p, Some(5)),
            Err(Error::FeatureDim {
                found: 3,
                expected: 5
            })
        ));
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_precomputed(&p, None),
            Err(Error::Truncated(_))
        ));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_precomputed(&p, None), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ftv");
        let feats = vec![
            FeatureVector {
                values: vec![0.5, -1.25]
            };
            2
        ];
        let src = vec![
            FeatureSource {
                scene_id: "a".into(),
                grid_row: 0,
                grid_col: 1,
                gt_count: 3.0,
            },
            FeatureSource {
                scene_id: "b".into(),
                grid_row: 2,
                grid_col: 0,
                gt_count: 0.0,
            },
        ];
        save_precomputed(&p, &feats, Some(&src)).unwrap();
        let (f, meta) = load_precomputed(&p, Some(2)).unwrap();
        assert_eq!(f, feats);
        assert_eq!(meta.sources.unwrap(), src);
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(any::<f32>(), 3), 0..20)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.ftv");
            let feats: Vec<FeatureVector> = rows.into_iter().map(|values| FeatureVector { values }).collect();
            save_precomputed(&p, &feats, None).unwrap();
            let (back, meta) = load_precomputed(&p, None).unwrap();
            prop_assert_eq!(meta.count, feats.len());
            prop_assert_eq!(back.len(), feats.len());
            for (a, b) in feats.iter().zip(&back) {
                let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
