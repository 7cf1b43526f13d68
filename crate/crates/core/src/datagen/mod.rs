//! Dot-annotated scenes: synthesis, on-disk datasets, augmentation and
//! conversion into patch-level training samples.

mod io;
mod patches;
mod synth;

pub use io::{load_dot_dataset, load_dot_dataset_split, load_image, save_dot_dataset, ManifestRow};
pub(crate) use patches::count_grid;
pub use patches::{grid_dims, patch_gt_count, tile_patches, GridPos, PatchSample, PatchSource};
pub use synth::{
    gen_dataset, gen_scene, Background, BlobShape, CountDistribution, SyntheticDomainSpec,
    DOT_LATTICE,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::regressor::DomainId;

/// Row-major `height x width x channels` intensity grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> crate::Result<Self> {
        if data.len() != height * width * channels {
            return Err(crate::Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// `size x size` crop whose top-left corner is `(y0, x0)`; pixels beyond
    /// the image border read as zero.
    pub fn crop_padded(&self, y0: usize, x0: usize, size: usize) -> Image {
        let mut out = Image::zeros(size, size, self.channels);
        let rows = size.min(self.height.saturating_sub(y0));
        let cols = size.min(self.width.saturating_sub(x0));
        for dy in 0..rows {
            let src = ((y0 + dy) * self.width + x0) * self.channels;
            let dst = dy * size * self.channels;
            out.data[dst..dst + cols * self.channels]
                .copy_from_slice(&self.data[src..src + cols * self.channels]);
        }
        out
    }

    /// Mirror columns: pixel `x` moves to `width - 1 - x`.
    pub fn hflip(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Box-filter resample to `size x size`, used for whole-image classification.
    pub fn resample_square(&self, size: usize) -> Image {
        let mut out = Image::zeros(size, size, self.channels);
        let sy = self.height as f64 / size as f64;
        let sx = self.width as f64 / size as f64;
        for oy in 0..size {
            let y0 = (oy as f64 * sy).floor() as usize;
            let y1 = (((oy + 1) as f64 * sy).ceil() as usize).clamp(y0 + 1, self.height);
            for ox in 0..size {
                let x0 = (ox as f64 * sx).floor() as usize;
                let x1 = (((ox + 1) as f64 * sx).ceil() as usize).clamp(x0 + 1, self.width);
                for c in 0..self.channels {
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += f64::from(self.get(y, x, c));
                        }
                    }
                    out.set(oy, ox, c, (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32);
                }
            }
        }
        out
    }
}

/// A single point annotation in pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DotAnnotation {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub pixels: Image,
    pub dots: Vec<DotAnnotation>,
    pub domain: DomainId,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.dots.len()
    }

    pub fn check_invariants(&self) -> crate::Result<()> {
        let (h, w) = (self.pixels.height(), self.pixels.width());
        if h == 0 || w == 0 {
            return Err(crate::Error::Shape(format!(
                "scene `{}` has an empty image",
                self.id
            )));
        }
        for d in &self.dots {
            if !(d.x >= 0.0 && d.x < w as f64 && d.y >= 0.0 && d.y < h as f64) {
                return Err(crate::Error::AnnotationOutOfBounds {
                    path: self.id.clone().into(),
                    x: d.x,
                    y: d.y,
                    width: w,
                    height: h,
                });
            }
        }
        Ok(())
    }

    /// Horizontally mirrored copy; dot `x` maps to `width - 1 - x`.
    pub fn hflip(&self) -> Scene {
        let w1 = (self.pixels.width() - 1) as f64;
        Scene {
            id: format!("{}_flip", self.id),
            pixels: self.pixels.hflip(),
            dots: self
                .dots
                .iter()
                .map(|d| DotAnnotation {
                    x: w1 - d.x,
                    y: d.y,
                })
                .collect(),
            domain: self.domain.clone(),
        }
    }
}

/// Originals followed by their horizontal mirrors.
pub fn augment_hflip(dataset: &[Scene]) -> Vec<Scene> {
    let mut out = Vec::with_capacity(dataset.len() * 2);
    out.extend(dataset.iter().cloned());
    out.extend(dataset.iter().map(Scene::hflip));
    out
}

/// Seeded shuffle split; the validation part holds `round(fraction * len)`
/// items. Both parts keep the original relative order.
pub fn split_train_val<T: Clone>(
    dataset: &[T],
    fraction: f64,
    seed: u64,
) -> crate::Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(crate::Error::InvalidArgument(format!(
            "validation fraction {fraction} outside [0, 1]"
        )));
    }
    let n_val = (fraction * dataset.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; dataset.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(dataset.len() - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (item, v) in dataset.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(dots: Vec<(f64, f64)>, w: usize, h: usize) -> Scene {
        Scene {
            id: "s".into(),
            pixels: Image::zeros(h, w, 1),
            dots: dots
                .into_iter()
                .map(|(x, y)| DotAnnotation { x, y })
                .collect(),
            domain: DomainId::new("d"),
        }
    }

    #[test]
    fn crop_pads_with_zeros() {
        let mut img = Image::zeros(3, 3, 1);
        for y in 0..3 {
            for x in 0..3 {
                img.set(y, x, 0, 1.0);
            }
        }
        let c = img.crop_padded(2, 2, 2);
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hflip_moves_pixels_and_dots() {
        let mut s = scene_with(vec![(0.0, 1.0), (2.5, 0.0)], 4, 2);
        s.pixels.set(1, 0, 0, 0.5);
        let f = s.hflip();
        assert_eq!(f.pixels.get(1, 3, 0), 0.5);
        assert_eq!(f.dots[0], DotAnnotation { x: 3.0, y: 1.0 });
        assert_eq!(f.dots[1], DotAnnotation { x: 0.5, y: 0.0 });
        assert_eq!(f.hflip().dots, s.dots);
    }

    #[test]
    fn augment_doubles() {
        let s = vec![scene_with(vec![(1.0, 1.0)], 4, 4); 3];
        let a = augment_hflip(&s);
        assert_eq!(a.len(), 6);
        assert_eq!(&a[..3], &s[..]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data: Vec<u32> = (0..10).collect();
        let (t, v) = split_train_val(&data, 0.3, 5).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(t.len(), 7);
        assert_eq!(
            split_train_val(&data, 0.3, 5).unwrap(),
            (t.clone(), v.clone())
        );
        let mut all: Vec<u32> = t.into_iter().chain(v).collect();
        all.sort();
        assert_eq!(all, data);
        assert!(split_train_val(&data, 1.5, 0).is_err());
    }

    #[test]
    fn resample_constant_is_constant() {
        let img = Image::from_vec(5, 7, 1, vec![0.25; 35]).unwrap();
        let r = img.resample_square(3);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn out_of_bounds_dots_rejected() {
        assert!(scene_with(vec![(4.0, 0.0)], 4, 4)
            .check_invariants()
            .is_err());
        assert!(scene_with(vec![(3.99, 0.0)], 4, 4)
            .check_invariants()
            .is_ok());
    }
}
