//! On-disk dot datasets:
//!
//! ```text
//! <dir>/manifest.csv          id,domain,split
//! <dir>/scenes/<id>.png       (or .pgm)
//! <dir>/annotations/<id>.csv  x,y  one row per dot, pixels, origin top-left
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::{DotAnnotation, Image, Scene};
use crate::regressor::DomainId;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub domain: String,
    pub split: String,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest.csv not found"),
        ));
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let headers = rdr.headers().map_err(csv_err(&path))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "domain", "split"] {
        return Err(Error::Format(format!(
            "{}: expected header id,domain,split",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(&path))?;
        rows.push(ManifestRow {
            id: rec[0].to_string(),
            domain: rec[1].to_string(),
            split: rec[2].to_string(),
        });
    }
    Ok(rows)
}

fn scene_image_path(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "pgm"] {
        let p = dir.join("scenes").join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join("scenes").join(format!("{id}.png")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "scene image not found"),
    ))
}

/// Decode a PNG or PGM into a float image in [0, 1]. Colour files keep three
/// channels, greyscale files one.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Image::from_vec(h, w, 3, img.to_rgb32f().into_raw())
    } else {
        Image::from_vec(h, w, 1, img.to_luma32f().into_raw())
    }
}

fn read_annotations(path: &Path) -> Result<Vec<DotAnnotation>> {
    if !path.exists() {
        return Err(Error::MissingAnnotation(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
        return Err(Error::Format(format!(
            "{}: expected header x,y",
            path.display()
        )));
    }
    let mut dots = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("{}: bad coordinate `{s}`: {e}", path.display()))
            })
        };
        dots.push(DotAnnotation {
            x: parse(&rec[0])?,
            y: parse(&rec[1])?,
        });
    }
    Ok(dots)
}

fn load_rows(dir: &Path, rows: &[ManifestRow]) -> Result<Vec<Scene>> {
    rows.iter()
        .map(|row| {
            let pixels = load_image(&scene_image_path(dir, &row.id)?)?;
            let ann = dir.join("annotations").join(format!("{}.csv", row.id));
            let dots = read_annotations(&ann)?;
            for d in &dots {
                if !(d.x >= 0.0
                    && d.x < pixels.width() as f64
                    && d.y >= 0.0
                    && d.y < pixels.height() as f64)
                {
                    return Err(Error::AnnotationOutOfBounds {
                        path: ann,
                        x: d.x,
                        y: d.y,
                        width: pixels.width(),
                        height: pixels.height(),
                    });
                }
            }
            Ok(Scene {
                id: row.id.clone(),
                pixels,
                dots,
                domain: DomainId::new(&row.domain),
            })
        })
        .collect()
}

/// Load every scene listed in `<dir>/manifest.csv`, in manifest order.
pub fn load_dot_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    load_rows(dir, &read_manifest(dir)?)
}

/// Load only the manifest rows whose split column equals `split`.
pub fn load_dot_dataset_split(dir: impl AsRef<Path>, split: &str) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let rows: Vec<ManifestRow> = read_manifest(dir)?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    load_rows(dir, &rows)
}

fn to_dynamic(img: &Image) -> Result<DynamicImage> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let shape_err = || Error::Shape("image buffer size".into());
    match img.channels() {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, bytes).ok_or_else(shape_err)?,
        )),
        3 => Ok(DynamicImage::ImageRgb8(
            RgbImage::from_raw(w, h, bytes).ok_or_else(shape_err)?,
        )),
        c => Err(Error::Shape(format!("cannot encode {c}-channel image"))),
    }
}

/// Write scenes as 8-bit PNGs plus annotations and a manifest. `splits[i]`
/// labels `scenes[i]`.
pub fn save_dot_dataset(dir: impl AsRef<Path>, scenes: &[Scene], splits: &[&str]) -> Result<()> {
    let dir = dir.as_ref();
    if splits.len() != scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} split labels for {} scenes",
            splits.len(),
            scenes.len()
        )));
    }
    for sub in ["scenes", "annotations"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err(&manifest))?;
    w.write_record(["id", "domain", "split"])
        .map_err(csv_err(&manifest))?;
    for (scene, split) in scenes.iter().zip(splits) {
        let png = dir.join("scenes").join(format!("{}.png", scene.id));
        to_dynamic(&scene.pixels)?
            .save(&png)
            .map_err(|source| Error::Image {
                path: png.clone(),
                source,
            })?;
        let ann = dir.join("annotations").join(format!("{}.csv", scene.id));
        let mut aw = csv::Writer::from_path(&ann).map_err(csv_err(&ann))?;
        aw.write_record(["x", "y"]).map_err(csv_err(&ann))?;
        for d in &scene.dots {
            aw.write_record([d.x.to_string(), d.y.to_string()])
                .map_err(csv_err(&ann))?;
        }
        aw.flush().map_err(|e| Error::io(&ann, e))?;
        w.write_record([scene.id.as_str(), scene.domain.as_str(), split])
            .map_err(csv_err(&manifest))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, CountDistribution, SyntheticDomainSpec};

    fn sparse(mut spec: SyntheticDomainSpec) -> SyntheticDomainSpec {
        spec.count = CountDistribution {
            mean: 3.0,
            std: 1.0,
            min: 1,
            max: 4,
        };
        spec
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_dataset(
            &sparse(SyntheticDomainSpec::wildlife_like()),
            3,
            (24, 32),
            4,
        )
        .unwrap();
        save_dot_dataset(dir.path(), &scenes, &["train", "val", "train"]).unwrap();
        let loaded = load_dot_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.dots, b.dots);
            assert_eq!(a.domain, b.domain);
            let max_diff = a
                .pixels
                .data()
                .iter()
                .zip(b.pixels.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(
            load_dot_dataset_split(dir.path(), "train").unwrap().len(),
            2
        );
    }

    #[test]
    fn missing_annotation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let scenes =
            gen_dataset(&sparse(SyntheticDomainSpec::cell_like()), 1, (32, 32), 0).unwrap();
        save_dot_dataset(dir.path(), &scenes, &["train"]).unwrap();
        fs::remove_file(
            dir.path()
                .join("annotations")
                .join(format!("{}.csv", scenes[0].id)),
        )
        .unwrap();
        assert!(matches!(
            load_dot_dataset(dir.path()),
            Err(Error::MissingAnnotation(_))
        ));
    }

    #[test]
    fn out_of_bounds_annotation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let scenes =
            gen_dataset(&sparse(SyntheticDomainSpec::cell_like()), 1, (32, 32), 0).unwrap();
        save_dot_dataset(dir.path(), &scenes, &["train"]).unwrap();
        fs::write(
            dir.path()
                .join("annotations")
                .join(format!("{}.csv", scenes[0].id)),
            "x,y\n3.5,32.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dot_dataset(dir.path()),
            Err(Error::AnnotationOutOfBounds { .. })
        ));
    }

    #[test]
    fn pgm_scenes_load() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("scenes")).unwrap();
        fs::create_dir_all(dir.path().join("annotations")).unwrap();
        fs::write(
            dir.path().join("manifest.csv"),
            "id,domain,split\na,cells,test\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("scenes/a.pgm"),
            b"P2\n3 2\n255\n0 255 0\n0 0 51\n",
        )
        .unwrap();
        fs::write(dir.path().join("annotations/a.csv"), "x,y\n1,0\n").unwrap();
        let s = load_dot_dataset(dir.path()).unwrap();
        assert_eq!(s[0].pixels.width(), 3);
        assert_eq!(s[0].pixels.get(0, 1, 0), 1.0);
        assert!((s[0].pixels.get(1, 2, 0) - 0.2).abs() < 1e-6);
        assert_eq!(s[0].count(), 1);
    }
}
