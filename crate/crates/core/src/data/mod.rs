//! Posed image datasets in the `transforms_*.json` layout, 8-bit PNG I/O,
//! and a synthetic blob scene generator with paired normal/low-light views.

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormalize, rotation_error, Camera, DepthRange, Mat4};

/// Rotation blocks further than this from orthonormal are rejected.
pub const POSE_TOLERANCE: f64 = 1e-3;
/// Depth bounds used when a manifest does not state them.
pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{} values cannot form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = 3 * (y * self.width + x);
                let dst = 3 * (y * self.width + self.width - 1 - x);
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

fn to_byte(v: f32) -> u8 {
    // round half up, clamp to the byte range
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Reads an 8-bit RGB PNG as floats `byte / 255`.
pub fn read_image(path: &Path) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if ext.as_deref() != Some("png") {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    // truncated streams surface as IO errors from the decoder
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    Image::new(w as usize, h as usize, data)
}

/// Writes an 8-bit RGB PNG, quantizing with round-half-up.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if ext.as_deref() != Some("png") {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Rounds every value to the nearest 8-bit level, as a write/read cycle would.
pub fn quantize(img: &Image) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| to_byte(v) as f32 / 255.0)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Default assignment when a manifest gives none: every 8th frame is held out.
    pub fn default_for(index: usize) -> Split {
        if index.is_multiple_of(8) {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exposure {
    #[default]
    Lowlight,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    /// File stem, unique within a split.
    pub name: String,
    pub image: Image,
    pub camera: Camera,
    pub range: DepthRange,
    pub split: Split,
    pub exposure: Exposure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exposure: Option<Exposure>,
    frames: Vec<Frame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Focal length in pixels for a horizontal field of view.
pub fn focal_from_angle(width: usize, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

pub fn angle_from_focal(width: usize, focal: f64) -> f64 {
    2.0 * (0.5 * width as f64 / focal).atan()
}

fn parse_pose(file: &str, m: &[Vec<f64>]) -> Result<Mat4> {
    let bad = |reason: String| Error::MalformedPose {
        file: file.to_string(),
        reason,
    };
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(bad("transform_matrix must be 4x4".into()));
    }
    let mut pose = [[0.0; 4]; 4];
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(bad("non-finite entry".into()));
            }
            pose[r][c] = *v;
        }
    }
    let err = rotation_error(&pose);
    if err > POSE_TOLERANCE {
        return Err(bad(format!(
            "rotation is {err:.2e} from orthonormal (limit {POSE_TOLERANCE:e})"
        )));
    }
    if pose[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(bad("last row must be 0 0 0 1".into()));
    }
    Ok(orthonormalize(&pose))
}

fn resolve_image_path(root: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.trim_start_matches("./");
    let p = root.join(rel);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn load_manifest(
    root: &Path,
    manifest_path: &Path,
    fixed_split: Option<Split>,
) -> Result<Vec<PosedImage>> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.frames.is_empty() {
        return Err(Error::Manifest(format!(
            "{} lists no frames",
            manifest_path.display()
        )));
    }
    if !(manifest.camera_angle_x > 0.0 && manifest.camera_angle_x < std::f64::consts::PI) {
        return Err(Error::Manifest(format!(
            "camera_angle_x must lie in (0, pi), got {}",
            manifest.camera_angle_x
        )));
    }
    let range = DepthRange::new(
        manifest.near.unwrap_or(DEFAULT_NEAR),
        manifest.far.unwrap_or(DEFAULT_FAR),
    )
    .map_err(|e| Error::Manifest(e.to_string()))?;
    let exposure = manifest.exposure.unwrap_or_default();
    manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let pose = parse_pose(&frame.file_path, &frame.transform_matrix)?;
            let path = resolve_image_path(root, &frame.file_path);
            let image = read_image(&path)?;
            let focal = focal_from_angle(image.width, manifest.camera_angle_x);
            let camera = Camera::new(image.width, image.height, focal, pose)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("frame_{i:03}"));
            let split = fixed_split
                .or(frame.split)
                .unwrap_or_else(|| Split::default_for(i));
            Ok(PosedImage {
                name,
                image,
                camera,
                range,
                split,
                exposure,
            })
        })
        .collect()
}

/// Loads every frame of a dataset directory. Per-split manifests
/// (`transforms_train.json` etc.) take precedence over a single
/// `transforms.json`, whose frames get their split from the manifest or
/// from the every-8th-frame rule.
pub fn load_dataset(dir: &Path) -> Result<Vec<PosedImage>> {
    let mut out = Vec::new();
    let mut found = false;
    for split in Split::ALL {
        let path = dir.join(format!("transforms_{}.json", split.as_str()));
        if path.exists() {
            found = true;
            out.extend(load_manifest(dir, &path, Some(split))?);
        }
    }
    if !found {
        out = load_manifest(dir, &dir.join("transforms.json"), None)?;
    }
    Ok(out)
}

/// Writes images and one manifest per split present in `images`.
pub fn write_dataset(dir: &Path, images: &[PosedImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::domain("refusing to write an empty dataset"));
    }
    let mut by_split: BTreeMap<Split, Vec<&PosedImage>> = BTreeMap::new();
    for img in images {
        by_split.entry(img.split).or_default().push(img);
    }
    std::fs::create_dir_all(dir)?;
    for (split, frames) in by_split {
        let first = frames[0];
        let manifest = Manifest {
            camera_angle_x: angle_from_focal(first.camera.width, first.camera.focal),
            near: Some(first.range.near),
            far: Some(first.range.far),
            exposure: Some(first.exposure),
            frames: frames
                .iter()
                .map(|f| Frame {
                    file_path: format!("./{}/{}.png", split.as_str(), f.name),
                    transform_matrix: f.camera.pose.iter().map(|r| r.to_vec()).collect(),
                    split: None,
                })
                .collect(),
        };
        frames
            .par_iter()
            .map(|f| {
                write_image(
                    &dir.join(split.as_str()).join(format!("{}.png", f.name)),
                    &f.image,
                )
            })
            .collect::<Result<Vec<()>>>()?;
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(
            dir.join(format!("transforms_{}.json", split.as_str())),
            text,
        )?;
    }
    Ok(())
}
