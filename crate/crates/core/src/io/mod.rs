//! On-disk formats: VOL1 containers, JSON documents and bundle directories.
//!
//! A bundle directory holds `image.vol`, either `features.vol` or the pair
//! `features_global.vol` + `features_local.vol`, and optionally `labels.vol`.

pub mod vol1;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::Result;
use crate::features::assemble_features;
use crate::grid::{DisplacementField, FeatureMap, LabelVolume, Point3, ScalarVolume};
use crate::pipeline::Bundle;
use crate::transform::{CompositeTransform, TransformManifest};

pub use vol1::{read_vol1, write_vol1, DType, Payload, Vol1, VolData};

pub const IMAGE_FILE: &str = "image.vol";
pub const FEATURES_FILE: &str = "features.vol";
pub const GLOBAL_FEATURES_FILE: &str = "features_global.vol";
pub const LOCAL_FEATURES_FILE: &str = "features_local.vol";
pub const LABELS_FILE: &str = "labels.vol";

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| vol1::with_path(e, path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| vol1::with_path(e, path))?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let image = ScalarVolume::read(dir.join(IMAGE_FILE))?;
    let features = if dir.join(FEATURES_FILE).exists() {
        FeatureMap::read(dir.join(FEATURES_FILE))?
    } else {
        let global = FeatureMap::read(dir.join(GLOBAL_FEATURES_FILE))?;
        let local = FeatureMap::read(dir.join(LOCAL_FEATURES_FILE))?;
        assemble_features(&global, &local)?
    };
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        Some(LabelVolume::read(labels_path)?)
    } else {
        None
    };
    Ok(Bundle {
        image,
        features,
        labels,
    })
}

pub fn save_bundle(dir: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    bundle.image.write(dir.join(IMAGE_FILE))?;
    bundle.features.write(dir.join(FEATURES_FILE))?;
    if let Some(labels) = &bundle.labels {
        labels.write(dir.join(LABELS_FILE))?;
    }
    Ok(())
}

fn stage_paths(manifest: &Path) -> (String, String) {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "transform".into());
    (format!("{stem}.coarse.vol"), format!("{stem}.dense.vol"))
}

/// Writes the JSON manifest at `path` and the two stage fields beside it.
pub fn save_transform(path: impl AsRef<Path>, t: &CompositeTransform) -> Result<()> {
    let path = path.as_ref();
    let (coarse, dense) = stage_paths(path);
    t.coarse.write(vol1::sibling(path, &coarse))?;
    t.dense.write(vol1::sibling(path, &dense))?;
    write_json(
        path,
        &TransformManifest {
            affine: t.affine,
            coarse,
            dense,
        },
    )
}

/// Stage field paths in a manifest are relative to the manifest.
pub fn load_transform(path: impl AsRef<Path>) -> Result<CompositeTransform> {
    let path = path.as_ref();
    let m: TransformManifest = read_json(path)?;
    let coarse = DisplacementField::read(vol1::sibling(path, &m.coarse))?;
    let dense = DisplacementField::read(vol1::sibling(path, &m.dense))?;
    CompositeTransform::new(m.affine, coarse, dense)
}

/// Corresponding points: `moving[i]` is the image of `fixed[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub moving: Vec<Point3>,
    pub fixed: Vec<Point3>,
}

/// Description of a generated pair, written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub channels: usize,
    pub feature_smoothness: f64,
    pub warp_amplitude: f64,
    pub warp_smoothness: f64,
    pub labels: u32,
    /// The affine part of the generating deformation.
    pub affine: AffineTransform,
    pub svf_steps: usize,
    /// VOL1 file with the generating velocity.
    pub velocity: String,
    /// Transform manifest of the exact fixed-to-moving map.
    pub truth: String,
    pub moving: String,
    pub fixed: String,
    pub landmarks: Landmarks,
}

/// `rel` interpreted relative to the directory of `base`.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    vol1::sibling(base, rel)
}
