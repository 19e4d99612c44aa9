//! Scenes on disk: PNG images and per-class label PNGs, optional clean
//! labels and corruption fields, and a line-delimited manifest of splits.
//!
//! ```text
//! root/
//!   manifest.jsonl          {"id": "...", "splits": ["train"]} per line
//!   images/{id}.png
//!   labels_{k}/{id}.png     observed (noisy) labels of class k
//!   clean_labels_{k}/{id}.png
//!   fields/{id}.bin
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::maps::BinaryLabelMap;
use crate::scalar::Real;
use crate::synth::{generate_scene, SceneSpec, SyntheticScene};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    /// Validation scored against the observed labels.
    #[serde(rename = "val-noisy")]
    ValNoisy,
    /// Validation subset scored against clean labels.
    #[serde(rename = "val-clean")]
    ValClean,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValNoisy => "val-noisy",
            Split::ValClean => "val-clean",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val-noisy" => Ok(Split::ValNoisy),
            "val-clean" => Ok(Split::ValClean),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train|val-noisy|val-clean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Array3<T>,
    /// Observed labels.
    pub labels: BinaryLabelMap,
    pub clean_labels: Option<BinaryLabelMap>,
    pub field: Option<DisplacementField<T>>,
}

impl<T: Real> Scene<T> {
    pub fn from_synthetic(id: impl Into<String>, s: SyntheticScene<T>) -> Self {
        Self {
            id: id.into(),
            image: s.image,
            labels: s.noisy_labels,
            clean_labels: Some(s.clean_labels),
            field: Some(s.true_field),
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.channels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub scenes: Vec<Scene<T>>,
    /// Parallel to `scenes`.
    pub splits: Vec<Vec<Split>>,
}

impl<T: Real> Dataset<T> {
    pub fn classes(&self) -> usize {
        self.scenes.first().map_or(0, Scene::classes)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&n| self.splits[n].contains(&split)).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Scene<T>> {
        self.indices(split).into_iter().map(|n| &self.scenes[n]).collect()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.scenes
            .iter()
            .zip(&self.splits)
            .map(|(s, sp)| ManifestEntry {
                id: s.id.clone(),
                splits: sp.clone(),
            })
            .collect()
    }
}

/// Generates `count` scenes and assigns splits: `train_fraction` of them
/// train, the rest validation, half of which also form the clean subset.
pub fn generate_dataset<T: Real>(spec: &SceneSpec, count: usize, seed: u64, train_fraction: f64) -> Result<Dataset<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("scene count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction must be in [0, 1], got {train_fraction}")));
    }
    let scenes = (0..count)
        .map(|n| {
            let s = generate_scene::<T>(spec, seed.wrapping_mul(1_000_003).wrapping_add(n as u64))?;
            Ok(Scene::from_synthetic(format!("s{n:05}"), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_917));
    let n_train = ((count as f64) * train_fraction).round() as usize;
    let mut splits = vec![Vec::new(); count];
    for (rank, &n) in order.iter().enumerate() {
        if rank < n_train {
            splits[n].push(Split::Train);
        } else {
            splits[n].push(Split::ValNoisy);
            if (rank - n_train) % 2 == 0 {
                splits[n].push(Split::ValClean);
            }
        }
    }
    Ok(Dataset { scenes, splits })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image_png<T: Real>(image: &Array3<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([0, 1, 2].map(|c| to_u8(image[[c, i, j]].to_f64_lossy())))
    });
    img.save(path)?;
    Ok(())
}

pub fn save_plane_png(plane: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = plane.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]] * 255]));
    img.save(path)?;
    Ok(())
}

pub fn load_image_png<T: Real>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        T::of(f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0)
    }))
}

/// Nonzero pixels are edges.
pub fn load_plane_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        u8::from(img.get_pixel(j as u32, i as u32)[0] > 127)
    }))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset<T: Real>(dataset: &Dataset<T>, root: &Path) -> Result<()> {
    let classes = dataset.classes();
    create_dir(&root.join("images"))?;
    create_dir(&root.join("fields"))?;
    for k in 0..classes {
        create_dir(&root.join(format!("labels_{k}")))?;
        create_dir(&root.join(format!("clean_labels_{k}")))?;
    }
    for s in &dataset.scenes {
        if s.classes() != classes {
            return Err(Error::shape("scene classes", &[classes], &[s.classes()]));
        }
        save_image_png(&s.image, &root.join("images").join(format!("{}.png", s.id)))?;
        for k in 0..classes {
            save_plane_png(&s.labels.channel(k).to_owned(), &root.join(format!("labels_{k}/{}.png", s.id)))?;
            if let Some(clean) = &s.clean_labels {
                save_plane_png(&clean.channel(k).to_owned(), &root.join(format!("clean_labels_{k}/{}.png", s.id)))?;
            }
        }
        if let Some(f) = &s.field {
            f.save(&root.join("fields").join(format!("{}.bin", s.id)))?;
        }
    }
    let path = root.join(MANIFEST);
    let mut out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for entry in dataset.manifest() {
        writeln!(out, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingComponent {
            path: root.to_path_buf(),
            missing: MANIFEST.into(),
        });
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?);
    }
    Ok(entries)
}

fn require(root: &Path, rel: PathBuf) -> Result<PathBuf> {
    let p = root.join(&rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingComponent {
            path: root.to_path_buf(),
            missing: rel.display().to_string(),
        })
    }
}

/// Loads a dataset. Clean labels and fields are optional per scene.
pub fn load_dataset<T: Real>(root: &Path) -> Result<Dataset<T>> {
    let entries = read_manifest(root)?;
    let classes = (0..).take_while(|k| root.join(format!("labels_{k}")).is_dir()).count();
    if classes == 0 {
        return Err(Error::MissingComponent {
            path: root.to_path_buf(),
            missing: "labels_0/".into(),
        });
    }
    let mut scenes = Vec::with_capacity(entries.len());
    let mut splits = Vec::with_capacity(entries.len());
    for e in entries {
        let image = load_image_png::<T>(&require(root, PathBuf::from("images").join(format!("{}.png", e.id)))?)?;
        let planes = (0..classes)
            .map(|k| load_plane_png(&require(root, PathBuf::from(format!("labels_{k}/{}.png", e.id)))?))
            .collect::<Result<Vec<_>>>()?;
        let labels = BinaryLabelMap::from_channels(&planes)?;
        let clean_paths: Vec<PathBuf> = (0..classes).map(|k| root.join(format!("clean_labels_{k}/{}.png", e.id))).collect();
        let clean_labels = if clean_paths.iter().all(|p| p.is_file()) {
            let planes = clean_paths.iter().map(|p| load_plane_png(p)).collect::<Result<Vec<_>>>()?;
            Some(BinaryLabelMap::from_channels(&planes)?)
        } else {
            None
        };
        let field_path = root.join("fields").join(format!("{}.bin", e.id));
        let field = if field_path.is_file() {
            Some(DisplacementField::load(&field_path)?)
        } else {
            None
        };
        let (h, w) = (labels.height(), labels.width());
        if image.shape()[1..] != [h, w] {
            return Err(Error::shape("image vs labels", &[h, w], &image.shape()[1..]));
        }
        scenes.push(Scene {
            id: e.id,
            image,
            labels,
            clean_labels,
            field,
        });
        splits.push(e.splits);
    }
    Ok(Dataset { scenes, splits })
}

/// Builds a scene without clean labels or field from external files.
pub fn load_scene_pngs<T: Real>(id: &str, image: &Path, labels: &[PathBuf]) -> Result<Scene<T>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("at least one label image is required".into()));
    }
    let image = load_image_png::<T>(image)?;
    let planes = labels.iter().map(|p| load_plane_png(p)).collect::<Result<Vec<_>>>()?;
    let labels = BinaryLabelMap::from_channels(&planes)?;
    if image.shape()[1..] != [labels.height(), labels.width()] {
        return Err(Error::shape("image vs labels", &[labels.height(), labels.width()], &image.shape()[1..]));
    }
    Ok(Scene {
        id: id.into(),
        image,
        labels,
        clean_labels: None,
        field: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset<f32> {
        let spec = SceneSpec {
            size: 48,
            ..Default::default()
        };
        generate_dataset(&spec, 6, 3, 0.5).unwrap()
    }

    #[test]
    fn split_assignment() {
        let d = small();
        assert_eq!(d.indices(Split::Train).len(), 3);
        assert_eq!(d.indices(Split::ValNoisy).len(), 3);
        assert_eq!(d.indices(Split::ValClean).len(), 2);
        for n in d.indices(Split::ValClean) {
            assert!(d.splits[n].contains(&Split::ValNoisy));
        }
    }

    #[test]
    fn round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn missing_field_is_optional() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        fs::remove_file(dir.path().join(format!("fields/{}.bin", d.scenes[0].id))).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert!(back.scenes[0].field.is_none());
        assert!(back.scenes[1].field.is_some());
    }

    #[test]
    fn missing_image_names_component() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        fs::remove_file(dir.path().join(format!("images/{}.png", d.scenes[2].id))).unwrap();
        match load_dataset::<f32>(dir.path()) {
            Err(Error::MissingComponent { missing, .. }) => assert!(missing.contains(&d.scenes[2].id)),
            other => panic!("unexpected {other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset::<f32>(empty.path()), Err(Error::MissingComponent { .. })));
    }
}
