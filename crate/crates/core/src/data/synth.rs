//! Gaussian blob scenes with analytic density and color, rendered from a
//! ring of cameras, plus low-light versions made either by concealing along
//! the ray (reachable by the model) or by an image-space gamma curve.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{focal_from_angle, write_dataset, Exposure, Image, PosedImage, Split};
use crate::error::{Error, Result};
use crate::geometry::{ray_for_pixel, Camera, DepthRange, Vec3};
use crate::render::oracle::oracle_ray;

/// Half side of the cube the blobs live in.
pub const SCENE_HALF_EXTENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub peak_density: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub blobs: Vec<Blob>,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    pub ring_radius: f64,
    /// Camera elevation above the ring plane, radians.
    pub elevation: f64,
    pub near: f64,
    pub far: f64,
    /// Samples per ray for ground truth rendering.
    pub gt_samples: usize,
    /// Samples per ray of the model the darkening should be expressed in.
    pub train_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::random(3, 0)
    }
}

impl SyntheticSceneSpec {
    /// Scene with `n_blobs` blobs drawn from `seed` and the standard rig.
    pub fn random(n_blobs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs = (0..n_blobs)
            .map(|_| {
                let mut c = [0.0; 3];
                c.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
                let mut color = [0.0; 3];
                color
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(0.25..0.95));
                Blob {
                    center: c,
                    radius: rng.random_range(0.1..0.16),
                    peak_density: rng.random_range(30.0..60.0),
                    color,
                }
            })
            .collect();
        Self {
            blobs,
            n_cameras: 16,
            width: 64,
            height: 64,
            camera_angle_x: 0.8,
            ring_radius: 1.6,
            elevation: 0.25,
            near: 1.0,
            far: 2.2,
            gt_samples: 256,
            train_samples: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            if b.center.iter().any(|c| c.abs() > SCENE_HALF_EXTENT) {
                return Err(Error::Config(format!(
                    "blob {i} center lies outside the scene cube"
                )));
            }
            if !(b.radius > 0.0) || !(b.peak_density > 0.0) {
                return Err(Error::Config(format!(
                    "blob {i} needs positive radius and peak density"
                )));
            }
            if b.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("blob {i} color must lie in [0, 1]")));
            }
        }
        if self.n_cameras == 0 || self.width < 2 || self.height < 2 {
            return Err(Error::Config(
                "need at least one camera and 2x2 images".into(),
            ));
        }
        if self.gt_samples == 0 || self.train_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        DepthRange::new(self.near, self.far).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.camera_angle_x > 0.0 && self.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Config("camera_angle_x must lie in (0, pi)".into()));
        }
        Ok(())
    }

    pub fn range(&self) -> DepthRange {
        DepthRange {
            near: self.near,
            far: self.far,
        }
    }

    pub fn focal(&self) -> f64 {
        focal_from_angle(self.width, self.camera_angle_x)
    }

    /// Ring cameras looking at the origin; camera `k` sits at azimuth `2 pi k / n`.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.n_cameras)
            .map(|k| {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / self.n_cameras as f64;
                let (r, e) = (self.ring_radius, self.elevation);
                let eye = [
                    r * e.cos() * phi.sin(),
                    r * e.sin(),
                    r * e.cos() * phi.cos(),
                ];
                Camera::look_at(self.width, self.height, self.focal(), eye, [0.0; 3])
            })
            .collect()
    }

    fn gaussian(b: &Blob, x: Vec3) -> f64 {
        let d2: f64 = (0..3).map(|i| (x[i] - b.center[i]).powi(2)).sum();
        (-d2 / (2.0 * b.radius * b.radius)).exp()
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.blobs
            .iter()
            .map(|b| b.peak_density * Self::gaussian(b, x))
            .sum()
    }

    /// Density-weighted blend of blob colors; black where there is no density.
    pub fn color(&self, x: Vec3) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for b in &self.blobs {
            let w = b.peak_density * Self::gaussian(b, x);
            total += w;
            for c in 0..3 {
                acc[c] += w * b.color[c];
            }
        }
        if total > 0.0 {
            acc.iter_mut().for_each(|v| *v /= total);
        }
        acc
    }

    /// Renders one camera with `samples` midpoint samples. With `conceal =
    /// Some((omega, theta))` every sample attenuates what lies behind it by
    /// `(omega * theta)^(train_samples / samples)`, i.e. by `omega * theta`
    /// per training-sample spacing.
    pub fn render_with(
        &self,
        camera: &Camera,
        samples: usize,
        conceal: Option<(f64, f64)>,
    ) -> Result<Image> {
        let range = self.range();
        let mut data = vec![0.0f32; 3 * camera.width * camera.height];
        let factor = conceal.map(|(o, t)| (o * t).powf(self.train_samples as f64 / samples as f64));
        data.par_chunks_mut(3 * camera.width)
            .enumerate()
            .try_for_each(|(py, row)| -> Result<()> {
                for px in 0..camera.width {
                    let ray = ray_for_pixel(camera, px, py, range)?;
                    let delta = (ray.t_far - ray.t_near) / samples as f64;
                    let mut sig = Vec::with_capacity(samples);
                    let mut col = Vec::with_capacity(3 * samples);
                    for i in 0..samples {
                        let p = ray.at(ray.t_near + (i as f64 + 0.5) * delta);
                        sig.push(self.density(p));
                        col.extend_from_slice(&self.color(p));
                    }
                    let rgb = match factor {
                        Some(f) if f != 1.0 => {
                            let om = vec![f; samples];
                            oracle_ray(&sig, &col, Some(&om), None, delta)
                        }
                        _ => oracle_ray(&sig, &col, None, None, delta),
                    };
                    for c in 0..3 {
                        row[3 * px + c] = rgb[c].clamp(0.0, 1.0) as f32;
                    }
                }
                Ok(())
            })?;
        Image::new(camera.width, camera.height, data)
    }

    pub fn render_gt(&self, camera: &Camera) -> Result<Image> {
        self.render_with(camera, self.gt_samples, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DarkenMode {
    /// Uniform concealing during rendering: `omega` local, `theta` global.
    FieldConceal { omega: f64, theta: f64 },
    /// `clamp(gain * x^gamma, 0, 1)` on the normal image.
    ImageGamma { gain: f64, gamma: f64 },
}

impl Default for DarkenMode {
    fn default() -> Self {
        DarkenMode::FieldConceal {
            omega: 0.88,
            theta: 1.0,
        }
    }
}

impl DarkenMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DarkenMode::FieldConceal { omega, theta } => {
                if !(omega > 0.0 && omega <= 1.0 && theta > 0.0 && theta <= 1.0) {
                    return Err(Error::Config(
                        "field_conceal needs omega, theta in (0, 1]".into(),
                    ));
                }
            }
            DarkenMode::ImageGamma { gain, gamma } => {
                if !(gamma > 0.0) || !(gain >= 0.0) {
                    return Err(Error::Config(
                        "image_gamma needs gamma > 0 and gain >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Image-space darkening. Returns the image and whether any value clipped.
pub fn gamma_darken(img: &Image, gain: f64, gamma: f64) -> (Image, bool) {
    let mut clipped = false;
    let data = img
        .data
        .iter()
        .map(|&v| {
            let out = gain * (v as f64).powf(gamma);
            if out > 1.0 {
                clipped = true;
            }
            out.clamp(0.0, 1.0) as f32
        })
        .collect();
    (
        Image {
            width: img.width,
            height: img.height,
            data,
        },
        clipped,
    )
}

/// Paired renders of every ring camera.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub normal: Vec<PosedImage>,
    pub lowlight: Vec<PosedImage>,
    /// Set when image-space darkening had to clip.
    pub clipped: bool,
}

fn posed(
    name: String,
    image: Image,
    camera: Camera,
    range: DepthRange,
    split: Split,
    exposure: Exposure,
) -> PosedImage {
    PosedImage {
        name,
        image,
        camera,
        range,
        split,
        exposure,
    }
}

pub fn synthesize(spec: &SyntheticSceneSpec, darken: DarkenMode) -> Result<SynthOutput> {
    spec.validate()?;
    darken.validate()?;
    let cams = spec.cameras()?;
    let mut out = SynthOutput {
        normal: Vec::new(),
        lowlight: Vec::new(),
        clipped: false,
    };
    for (k, cam) in cams.iter().enumerate() {
        let name = format!("r_{k:03}");
        let split = Split::default_for(k);
        let normal = spec.render_gt(cam)?;
        let low = match darken {
            DarkenMode::FieldConceal { omega, theta } => {
                spec.render_with(cam, spec.gt_samples, Some((omega, theta)))?
            }
            DarkenMode::ImageGamma { gain, gamma } => {
                let (img, clipped) = gamma_darken(&normal, gain, gamma);
                out.clipped |= clipped;
                img
            }
        };
        let range = spec.range();
        out.normal.push(posed(
            name.clone(),
            normal,
            *cam,
            range,
            split,
            Exposure::Normal,
        ));
        out.lowlight
            .push(posed(name, low, *cam, range, split, Exposure::Lowlight));
    }
    Ok(out)
}

/// File recording the scene and darkening used to generate a dataset.
pub const SCENE_SPEC_FILE: &str = "scene_spec.json";
/// Subdirectory holding the normal-light counterpart of a synthetic dataset.
pub const NORMAL_DIR: &str = "normal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: SyntheticSceneSpec,
    pub darken: DarkenMode,
}

/// Writes the low-light dataset to `dir`, the normal-light one to
/// `dir/normal`, and the scene record to `dir/scene_spec.json`.
pub fn write_synthetic(
    dir: &Path,
    spec: &SyntheticSceneSpec,
    darken: DarkenMode,
    out: &SynthOutput,
) -> Result<()> {
    write_dataset(dir, &out.lowlight)?;
    write_dataset(&dir.join(NORMAL_DIR), &out.normal)?;
    let record = SceneRecord {
        scene: spec.clone(),
        darken,
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(dir.join(SCENE_SPEC_FILE), text)?;
    Ok(())
}

pub fn read_scene_record(dir: &Path) -> Result<SceneRecord> {
    let path = dir.join(SCENE_SPEC_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => e.into(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn small(blobs: Vec<Blob>) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            blobs,
            n_cameras: 8,
            width: 24,
            height: 24,
            ..SyntheticSceneSpec::random(0, 0)
        }
    }

    fn centered() -> Blob {
        Blob {
            center: [0.0; 3],
            radius: 0.15,
            peak_density: 200.0,
            color: [0.9, 0.5, 0.2],
        }
    }

    #[test]
    fn zero_blobs_render_black() {
        let spec = small(vec![]);
        let out = synthesize(&spec, DarkenMode::default()).unwrap();
        for p in out.normal.iter().chain(&out.lowlight) {
            assert!(p.image.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ring_views_of_centered_blob_mirror() {
        let spec = small(vec![centered()]);
        let cams = spec.cameras().unwrap();
        let n = cams.len();
        let imgs: Vec<Image> = cams.iter().map(|c| spec.render_gt(c).unwrap()).collect();
        let centre = imgs[0].pixel(12, 12)[0];
        for k in 1..n {
            let mirrored = imgs[n - k].flip_horizontal();
            let diff = imgs[k]
                .data
                .iter()
                .zip(&mirrored.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-3, "camera {k}: {diff}");
            assert!((imgs[k].pixel(12, 12)[0] - centre).abs() < 1e-3);
        }
        assert!(centre > 0.5);
    }

    #[test]
    fn ground_truth_quadrature_converges() {
        let spec = small(SyntheticSceneSpec::random(3, 4).blobs);
        let cam = spec.cameras().unwrap()[3];
        let a = spec.render_with(&cam, 256, None).unwrap();
        let b = spec.render_with(&cam, 512, None).unwrap();
        let diff = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn darken_examples() {
        let img = Image::new(1, 1, vec![0.5, 0.25, 1.0]).unwrap();
        assert_eq!(gamma_darken(&img, 1.0, 1.0).0, img);
        let (d, clipped) = gamma_darken(&img, 0.2, 1.0);
        assert!((d.data[0] - 0.1).abs() < 1e-7);
        assert!(!clipped);
        assert!(gamma_darken(&img, 2.0, 1.0).1);

        let spec = small(vec![centered()]);
        let cam = spec.cameras().unwrap()[0];
        let unit = spec.render_with(&cam, 256, Some((1.0, 1.0))).unwrap();
        assert_eq!(unit, spec.render_gt(&cam).unwrap());
        let dark = spec.render_with(&cam, 256, Some((0.88, 1.0))).unwrap();
        assert!(dark.data.iter().zip(&unit.data).all(|(d, u)| d <= u));
        assert!(dark.mean() < 0.5 * unit.mean());
    }

    #[test]
    fn synthetic_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(SyntheticSceneSpec::random(2, 1).blobs);
        let out = synthesize(&spec, DarkenMode::default()).unwrap();
        write_synthetic(dir.path(), &spec, DarkenMode::default(), &out).unwrap();
        let low = load_dataset(dir.path()).unwrap();
        let normal = load_dataset(&dir.path().join(NORMAL_DIR)).unwrap();
        assert_eq!(low.len(), spec.n_cameras);
        assert_eq!(normal.len(), spec.n_cameras);
        for img in &low {
            let orig = out.lowlight.iter().find(|p| p.name == img.name).unwrap();
            assert_eq!(img.split, orig.split);
            assert_eq!(img.exposure, Exposure::Lowlight);
            for r in 0..4 {
                for c in 0..4 {
                    assert!((img.camera.pose[r][c] - orig.camera.pose[r][c]).abs() < 1e-6);
                }
            }
            assert!((img.camera.focal - orig.camera.focal).abs() < 1e-6);
            assert_eq!(img.range, orig.range);
            assert_eq!(img.image, crate::data::quantize(&orig.image));
        }
        assert_eq!(read_scene_record(dir.path()).unwrap().scene, spec);
    }

    #[test]
    fn spec_validation() {
        let mut spec = small(vec![centered()]);
        spec.blobs[0].center = [0.8, 0.0, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = small(vec![centered()]);
        spec.blobs[0].peak_density = 0.0;
        assert!(spec.validate().is_err());
        assert!(SyntheticSceneSpec::default().validate().is_ok());
        assert_eq!(SyntheticSceneSpec::default().blobs.len(), 3);
        assert_eq!(SyntheticSceneSpec::default().cameras().unwrap().len(), 16);
    }
}
