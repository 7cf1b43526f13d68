use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DotAnnotation, Image, Scene};
use crate::regressor::DomainId;
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Dot coordinates are drawn on a lattice of `1 / DOT_LATTICE` pixels so that
/// mirroring is exactly invertible in floating point.
pub const DOT_LATTICE: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobShape {
    GaussianSpot,
    Ring,
    Rectangle,
    Crescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Flat,
    Gradient,
    TexturedNoise,
}

/// Truncated normal over integer counts: a normal draw is rounded and
/// redrawn until it lands in `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountDistribution {
    pub mean: f64,
    pub std: f64,
    pub min: u32,
    pub max: u32,
}

impl CountDistribution {
    pub fn fixed(n: u32) -> Self {
        CountDistribution {
            mean: f64::from(n),
            std: 0.0,
            min: n,
            max: n,
        }
    }

    fn clamp_mean(&self) -> u32 {
        (self.mean.round().max(0.0) as u32).clamp(self.min, self.max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        if self.std == 0.0 || self.min == self.max {
            return self.clamp_mean();
        }
        let normal = Normal::new(self.mean, self.std).expect("validated std");
        for _ in 0..10_000 {
            let v = normal.sample(rng).round();
            if v >= f64::from(self.min) && v <= f64::from(self.max) {
                return v as u32;
            }
        }
        self.clamp_mean()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub shape: BlobShape,
    /// Blob radius range in pixels.
    pub radius: (f64, f64),
    /// Blob intensity range.
    pub intensity: (f64, f64),
    pub background: Background,
    /// Background level range.
    pub background_level: (f64, f64),
    pub noise_sigma: f64,
    pub count: CountDistribution,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    1
}

impl SyntheticDomainSpec {
    /// Small dark heads on a textured backdrop.
    pub fn crowd_like() -> Self {
        SyntheticDomainSpec {
            name: "crowd-like".into(),
            shape: BlobShape::GaussianSpot,
            radius: (2.0, 3.0),
            intensity: (0.0, 0.2),
            background: Background::TexturedNoise,
            background_level: (0.55, 0.75),
            noise_sigma: 0.03,
            count: CountDistribution {
                mean: 50.0,
                std: 20.0,
                min: 3,
                max: 80,
            },
            channels: 1,
        }
    }

    /// Bright rectangles on a lit road gradient.
    pub fn vehicle_like() -> Self {
        SyntheticDomainSpec {
            name: "vehicle-like".into(),
            shape: BlobShape::Rectangle,
            radius: (3.0, 5.0),
            intensity: (0.7, 0.95),
            background: Background::Gradient,
            background_level: (0.2, 0.45),
            noise_sigma: 0.02,
            count: CountDistribution {
                mean: 36.5,
                std: 14.9,
                min: 9,
                max: 80,
            },
            channels: 1,
        }
    }

    /// Sparse dark crescents on a bright flat field.
    pub fn wildlife_like() -> Self {
        SyntheticDomainSpec {
            name: "wildlife-like".into(),
            shape: BlobShape::Crescent,
            radius: (3.0, 5.0),
            intensity: (0.0, 0.15),
            background: Background::Flat,
            background_level: (0.8, 0.95),
            noise_sigma: 0.02,
            count: CountDistribution {
                mean: 7.2,
                std: 5.7,
                min: 0,
                max: 67,
            },
            channels: 1,
        }
    }

    /// Bright rings on a dark flat field, broad count spread.
    pub fn cell_like() -> Self {
        SyntheticDomainSpec {
            name: "cell-like".into(),
            shape: BlobShape::Ring,
            radius: (3.0, 6.0),
            intensity: (0.6, 1.0),
            background: Background::Flat,
            background_level: (0.05, 0.2),
            noise_sigma: 0.02,
            count: CountDistribution {
                mean: 34.1,
                std: 21.8,
                min: 0,
                max: 80,
            },
            channels: 1,
        }
    }

    pub fn presets() -> Vec<SyntheticDomainSpec> {
        vec![
            Self::crowd_like(),
            Self::vehicle_like(),
            Self::wildlife_like(),
            Self::cell_like(),
        ]
    }

    pub fn preset(name: &str) -> Option<SyntheticDomainSpec> {
        Self::presets().into_iter().find(|s| s.name == name)
    }

    pub fn domain(&self) -> DomainId {
        DomainId::new(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidSpec {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        let in_unit = |r: (f64, f64)| r.0 >= 0.0 && r.1 <= 1.0 && r.0 <= r.1;
        if !(self.radius.0 > 0.0 && self.radius.1 >= self.radius.0) {
            return bad("radius range must be positive and ordered");
        }
        if !in_unit(self.intensity) || !in_unit(self.background_level) {
            return bad("intensity ranges must be ordered within [0, 1]");
        }
        if self.count.max < self.count.min {
            return bad("count max must be >= count min");
        }
        if !(self.count.std >= 0.0) || !self.count.mean.is_finite() {
            return bad("count std must be non-negative");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        Ok(())
    }
}

/// Synthesise one scene. Every rendered blob centre is recorded as a dot.
pub fn gen_scene(
    spec: &SyntheticDomainSpec,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = image_size;
    let diameter = 2.0 * spec.radius.1;
    if (h as f64) < diameter || (w as f64) < diameter {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is smaller than the blob diameter {diameter}"
        )));
    }
    let blob_area = std::f64::consts::PI * spec.radius.1 * spec.radius.1;
    if f64::from(spec.count.max) * blob_area > (h * w) as f64 {
        return Err(Error::InfeasibleDensity {
            max_count: spec.count.max,
            max_radius: spec.radius.1,
            height: h,
            width: w,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.count.sample(&mut rng);
    let mut canvas = render_background(spec, h, w, &mut rng);

    let mut dots = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let x = rng.random_range(0..=((w - 1) as u64 * DOT_LATTICE as u64)) as f64 / DOT_LATTICE;
        let y = rng.random_range(0..=((h - 1) as u64 * DOT_LATTICE as u64)) as f64 / DOT_LATTICE;
        let r = uniform(&mut rng, spec.radius);
        let level = uniform(&mut rng, spec.intensity);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let vertical = rng.random_bool(0.5);
        stamp_blob(
            &mut canvas,
            h,
            w,
            spec.shape,
            x,
            y,
            r,
            level,
            angle,
            vertical,
        );
        dots.push(DotAnnotation { x, y });
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut pixels = Image::zeros(h, w, spec.channels);
    for yy in 0..h {
        for xx in 0..w {
            for c in 0..spec.channels {
                let mut v = canvas[yy * w + xx];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                pixels.set(yy, xx, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Ok(Scene {
        id: format!("{}-{seed}", spec.name),
        pixels,
        dots,
        domain: spec.domain(),
    })
}

/// `count` scenes with ids `<name>_<index>` and per-scene seeds derived from `seed`.
pub fn gen_dataset(
    spec: &SyntheticDomainSpec,
    count: usize,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let mut s = gen_scene(spec, image_size, derive_seed(seed, i as u64))?;
            s.id = format!("{}_{i:05}", spec.name);
            Ok(s)
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn render_background<R: Rng + ?Sized>(
    spec: &SyntheticDomainSpec,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut canvas = vec![0.0; h * w];
    match spec.background {
        Background::Flat => {
            let level = uniform(rng, spec.background_level);
            canvas.fill(level);
        }
        Background::Gradient => {
            let a = uniform(rng, spec.background_level);
            let b = uniform(rng, spec.background_level);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let corners = [
                (0.0, 0.0),
                (w as f64, 0.0),
                (0.0, h as f64),
                (w as f64, h as f64),
            ];
            let proj: Vec<f64> = corners.iter().map(|(x, y)| x * dx + y * dy).collect();
            let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * dx + y as f64 * dy) - lo) / (hi - lo);
                    canvas[y * w + x] = a + (b - a) * t;
                }
            }
        }
        Background::TexturedNoise => {
            let level = uniform(rng, spec.background_level);
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let f = rng.random_range(0.05..0.3);
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    (
                        f * th.cos(),
                        f * th.sin(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = waves
                        .iter()
                        .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                        .sum();
                    canvas[y * w + x] = level + 0.1 * s / 3.0;
                }
            }
        }
    }
    canvas
}

/// Soft coverage from a signed distance (negative inside), one pixel wide edge.
fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn stamp_blob(
    canvas: &mut [f64],
    h: usize,
    w: usize,
    shape: BlobShape,
    cx: f64,
    cy: f64,
    r: f64,
    level: f64,
    angle: f64,
    vertical: bool,
) {
    let reach = match shape {
        BlobShape::GaussianSpot => 2.0 * r,
        _ => r + 1.0,
    };
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(h - 1);
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w - 1);
    let (ox, oy) = (cx + 0.6 * r * angle.cos(), cy + 0.6 * r * angle.sin());
    let (hx, hy) = if vertical { (0.6 * r, r) } else { (r, 0.6 * r) };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let alpha = match shape {
                BlobShape::GaussianSpot => {
                    if d <= reach {
                        let s = 0.5 * r;
                        (-(d * d) / (2.0 * s * s)).exp()
                    } else {
                        0.0
                    }
                }
                BlobShape::Ring => coverage((d - 0.7 * r).abs() - 0.3 * r),
                BlobShape::Rectangle => coverage((dx.abs() - hx).max(dy.abs() - hy)),
                BlobShape::Crescent => {
                    let d2 = ((x as f64 - ox).powi(2) + (y as f64 - oy).powi(2)).sqrt();
                    coverage((d - r).max(0.8 * r - d2))
                }
            };
            if alpha > 0.0 {
                let p = &mut canvas[y * w + x];
                *p = *p * (1.0 - alpha) + level * alpha;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Preset with a count range that fits small test images.
    fn sparse(mut spec: SyntheticDomainSpec) -> SyntheticDomainSpec {
        spec.count = CountDistribution {
            mean: 6.0,
            std: 3.0,
            min: 0,
            max: 12,
        };
        spec
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = sparse(SyntheticDomainSpec::cell_like());
        let a = gen_scene(&spec, (64, 64), 11).unwrap();
        let b = gen_scene(&spec, (64, 64), 11).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(&spec, (64, 64), 12).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn zero_count_is_pure_background() {
        let mut spec = SyntheticDomainSpec::cell_like();
        spec.count = CountDistribution::fixed(0);
        spec.noise_sigma = 0.0;
        let s = gen_scene(&spec, (32, 40), 3).unwrap();
        assert!(s.dots.is_empty());
        let first = s.pixels.get(0, 0, 0);
        assert!(s.pixels.data().iter().all(|&v| v == first));
    }

    #[test]
    fn dots_in_bounds_and_on_lattice() {
        for spec in SyntheticDomainSpec::presets() {
            let s = gen_scene(&sparse(spec), (50, 70), 9).unwrap();
            s.check_invariants().unwrap();
            for d in &s.dots {
                assert!(d.x <= 69.0 && d.y <= 49.0);
                assert_eq!((d.x * DOT_LATTICE).fract(), 0.0);
            }
        }
    }

    #[test]
    fn infeasible_density_rejected() {
        let mut spec = SyntheticDomainSpec::cell_like();
        spec.count.max = 10_000;
        assert!(matches!(
            gen_scene(&spec, (64, 64), 0),
            Err(Error::InfeasibleDensity { .. })
        ));
    }

    #[test]
    fn image_smaller_than_blob_rejected() {
        assert!(gen_scene(&SyntheticDomainSpec::cell_like(), (8, 64), 0).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticDomainSpec::cell_like();
        s.radius = (0.0, 2.0);
        assert!(s.validate().is_err());
        let mut s = SyntheticDomainSpec::cell_like();
        s.count.min = 10;
        s.count.max = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn rgb_channels_replicated_shape() {
        let mut spec = sparse(SyntheticDomainSpec::vehicle_like());
        spec.channels = 3;
        let s = gen_scene(&spec, (32, 32), 1).unwrap();
        assert_eq!(s.pixels.channels(), 3);
    }

    #[test]
    fn presets_are_feasible_at_desk_scale() {
        for spec in SyntheticDomainSpec::presets() {
            assert!(spec.count.max <= 80);
            gen_scene(&spec, (128, 128), 0).unwrap();
        }
    }
}
