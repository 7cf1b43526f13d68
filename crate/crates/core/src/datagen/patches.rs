use super::{DotAnnotation, Image, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSource {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub patch: Image,
    pub gt_count: f64,
    pub source: PatchSource,
}

/// Grid rows and columns after zero-padding `height x width` up to a
/// multiple of `patch_size`.
pub fn grid_dims(height: usize, width: usize, patch_size: usize) -> (usize, usize) {
    (height.div_ceil(patch_size), width.div_ceil(patch_size))
}

/// Number of dots inside the half-open box `[x0, x0+P) x [y0, y0+P)`.
pub fn patch_gt_count(dots: &[DotAnnotation], rect: (f64, f64, f64)) -> f64 {
    let (x0, y0, p) = rect;
    dots.iter()
        .filter(|d| d.x >= x0 && d.x < x0 + p && d.y >= y0 && d.y < y0 + p)
        .count() as f64
}

/// Cell index `i` such that `i*P <= v < (i+1)*P`, robust to division rounding.
fn cell_of(v: f64, p: f64) -> usize {
    let mut i = (v / p).floor().max(0.0) as usize;
    if v < i as f64 * p && i > 0 {
        i -= 1;
    }
    if v >= (i + 1) as f64 * p {
        i += 1;
    }
    i
}

/// Per-cell dot counts for the padded grid, row-major.
pub(crate) fn count_grid(
    dots: &[DotAnnotation],
    rows: usize,
    cols: usize,
    patch_size: usize,
) -> Vec<f64> {
    let p = patch_size as f64;
    let mut grid = vec![0.0; rows * cols];
    for d in dots {
        let (r, c) = (cell_of(d.y, p), cell_of(d.x, p));
        if r < rows && c < cols {
            grid[r * cols + c] += 1.0;
        }
    }
    grid
}

/// Non-overlapping row-major tiling with zero padding on the right and
/// bottom; each dot lands in exactly one patch.
///
/// # Panics
/// If `patch_size` is zero.
pub fn tile_patches(scene: &Scene, patch_size: usize) -> Vec<(PatchSample, GridPos)> {
    assert!(patch_size >= 1, "patch size must be at least 1");
    let (rows, cols) = grid_dims(scene.pixels.height(), scene.pixels.width(), patch_size);
    let counts = count_grid(&scene.dots, rows, cols, patch_size);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let patch = scene
                .pixels
                .crop_padded(row * patch_size, col * patch_size, patch_size);
            out.push((
                PatchSample {
                    patch,
                    gt_count: counts[row * cols + col],
                    source: PatchSource {
                        scene_id: scene.id.clone(),
                        row,
                        col,
                    },
                },
                GridPos { row, col },
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::DomainId;
    use proptest::prelude::*;

    fn scene(w: usize, h: usize, dots: &[(f64, f64)]) -> Scene {
        Scene {
            id: "t".into(),
            pixels: Image::zeros(h, w, 1),
            dots: dots.iter().map(|&(x, y)| DotAnnotation { x, y }).collect(),
            domain: DomainId::new("x"),
        }
    }

    #[test]
    fn half_open_box() {
        let dots = [
            DotAnnotation { x: 5.0, y: 5.0 },
            DotAnnotation { x: 99.9, y: 0.0 },
        ];
        assert_eq!(patch_gt_count(&dots, (0.0, 0.0, 100.0)), 2.0);
        assert_eq!(
            patch_gt_count(&[DotAnnotation { x: 100.0, y: 50.0 }], (0.0, 0.0, 100.0)),
            0.0
        );
    }

    #[test]
    fn exact_and_padded_tiling() {
        let t = tile_patches(&scene(300, 300, &[]), 100);
        assert_eq!(t.len(), 9);
        assert_eq!(t[4].1, GridPos { row: 1, col: 1 });
        let t = tile_patches(&scene(250, 250, &[]), 100);
        assert_eq!(t.len(), 9);
        assert_eq!(t[8].0.patch.height(), 100);
        assert_eq!(grid_dims(250, 130, 100), (3, 2));
    }

    #[test]
    fn seven_dots_partition() {
        let dots = [
            (0.0, 0.0),
            (9.99, 3.0),
            (10.0, 10.0),
            (19.5, 0.5),
            (3.0, 19.0),
            (15.0, 15.0),
            (1.0, 1.0),
        ];
        for p in 1..25 {
            let s: f64 = tile_patches(&scene(20, 20, &dots), p)
                .iter()
                .map(|(ps, _)| ps.gt_count)
                .sum();
            assert_eq!(s, 7.0, "patch size {p}");
        }
    }

    proptest! {
        #[test]
        fn tiling_matches_box_oracle(
            w in 1usize..60, h in 1usize..60, p in 1usize..25,
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..40),
        ) {
            let dots: Vec<(f64, f64)> = raw.iter().map(|(u, v)| (u * w as f64, v * h as f64)).collect();
            let s = scene(w, h, &dots);
            let tiles = tile_patches(&s, p);
            let total: f64 = tiles.iter().map(|(t, _)| t.gt_count).sum();
            prop_assert_eq!(total, dots.len() as f64);
            for (t, pos) in &tiles {
                let oracle = s.dots.iter().filter(|d| {
                    let (x0, y0) = ((pos.col * p) as f64, (pos.row * p) as f64);
                    x0 <= d.x && d.x < x0 + p as f64 && y0 <= d.y && d.y < y0 + p as f64
                }).count() as f64;
                prop_assert_eq!(t.gt_count, oracle);
                prop_assert_eq!(t.gt_count, patch_gt_count(&s.dots, ((pos.col * p) as f64, (pos.row * p) as f64, p as f64)));
            }
        }
    }
}
