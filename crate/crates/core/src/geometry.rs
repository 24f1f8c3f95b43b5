//! Pinhole cameras, ray generation, patch placement and depth sampling.
//!
//! Conventions follow the common "transforms" pose files: the pose is a
//! camera-to-world matrix, the camera looks along its local `-z` axis, `+y`
//! is up in the camera frame and image rows grow downwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

const ORTHO_TOL: f64 = 1e-5;

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Largest deviation of the pose's rotation block from orthonormality.
pub fn rotation_error(pose: &Mat4) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|r| pose[r][i] * pose[r][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((d - target).abs());
        }
    }
    worst
}

/// Re-orthonormalizes the rotation block (Gram-Schmidt on the columns).
pub fn orthonormalize(pose: &Mat4) -> Mat4 {
    let col = |c: usize| [pose[0][c], pose[1][c], pose[2][c]];
    let x = normalize(col(0));
    let y0 = col(1);
    let y = normalize(sub(y0, scale(x, dot(x, y0))));
    let mut z = cross(x, y);
    if dot(z, col(2)) < 0.0 {
        z = scale(z, -1.0);
    }
    let mut out = *pose;
    for r in 0..3 {
        out[r][0] = x[r];
        out[r][1] = y[r];
        out[r][2] = z[r];
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    out
}

#[inline]
fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub pose: Mat4,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, pose: Mat4) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("camera dimensions must be at least 1"));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::domain(format!(
                "focal must be positive, got {focal}"
            )));
        }
        let err = rotation_error(&pose);
        if err > ORTHO_TOL {
            return Err(Error::domain(format!(
                "pose rotation is not orthonormal (error {err:.3e})"
            )));
        }
        if pose[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::domain("pose last row must be [0, 0, 0, 1]"));
        }
        Ok(Self {
            width,
            height,
            focal,
            pose,
        })
    }

    /// Camera at `eye` looking at `target` with world up `+y`.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vec3,
        target: Vec3,
    ) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let mut right = cross([0.0, 1.0, 0.0], back);
        if norm(right) < 1e-9 {
            right = [1.0, 0.0, 0.0];
        }
        let right = normalize(right);
        let up = cross(back, right);
        let pose = [
            [right[0], up[0], back[0], eye[0]],
            [right[1], up[1], back[1], eye[1]],
            [right[2], up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::new(width, height, focal, pose)
    }

    pub fn origin(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let p = &self.pose;
        [
            p[0][0] * v[0] + p[0][1] * v[1] + p[0][2] * v[2],
            p[1][0] * v[0] + p[1][1] * v[1] + p[1][2] * v[2],
            p[2][0] * v[0] + p[2][1] * v[1] + p[2][2] * v[2],
        ]
    }

    /// Projects a world point to continuous pixel coordinates. Returns `None`
    /// for points at or behind the image plane.
    pub fn project(&self, point: Vec3) -> Option<(f64, f64)> {
        let rel = sub(point, self.origin());
        let p = &self.pose;
        // R^T * rel
        let cam = [
            p[0][0] * rel[0] + p[1][0] * rel[1] + p[2][0] * rel[2],
            p[0][1] * rel[0] + p[1][1] * rel[1] + p[2][1] * rel[2],
            p[0][2] * rel[0] + p[1][2] * rel[1] + p[2][2] * rel[2],
        ];
        if cam[2] >= 0.0 {
            return None;
        }
        let depth = -cam[2];
        let u = cam[0] / depth * self.focal + self.width as f64 * 0.5;
        let v = -cam[1] / depth * self.focal + self.height as f64 * 0.5;
        Some((u, v))
    }
}

/// Near/far bounds shared by every ray of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub near: f64,
    pub far: f64,
}

impl DepthRange {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near >= 0.0 && far > near && far.is_finite()) {
            return Err(Error::domain(format!(
                "invalid depth range [{near}, {far}]"
            )));
        }
        Ok(Self { near, far })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Ray through the center of pixel `(px, py)`.
pub fn ray_for_pixel(camera: &Camera, px: usize, py: usize, range: DepthRange) -> Result<Ray> {
    if px >= camera.width || py >= camera.height {
        return Err(Error::domain(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let x = (px as f64 + 0.5 - camera.width as f64 * 0.5) / camera.focal;
    let y = -(py as f64 + 0.5 - camera.height as f64 * 0.5) / camera.focal;
    let direction = normalize(camera.rotate([x, y, -1.0]));
    Ok(Ray {
        origin: camera.origin(),
        direction,
        t_near: range.near,
        t_far: range.far,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub stratified: bool,
}

impl SampleConfig {
    pub fn new(n_samples: usize, stratified: bool) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::domain("need at least one sample per ray"));
        }
        Ok(Self {
            n_samples,
            stratified,
        })
    }

    /// Constant spacing between adjacent samples on `ray`.
    pub fn delta(&self, ray: &Ray) -> f64 {
        (ray.t_far - ray.t_near) / self.n_samples as f64
    }
}

/// Depths along `ray`: bin midpoints, or one uniform draw per bin when
/// stratified.
pub fn sample_depths<R: Rng + ?Sized>(ray: &Ray, cfg: &SampleConfig, rng: &mut R) -> Vec<f64> {
    let delta = cfg.delta(ray);
    (0..cfg.n_samples)
        .map(|i| {
            let offset = if cfg.stratified {
                rng.random::<f64>()
            } else {
                0.5
            };
            (ray.t_near + (i as f64 + offset) * delta).min(ray.t_far)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCoords {
    pub x0: usize,
    pub y0: usize,
    pub pw: usize,
    pub ph: usize,
}

impl PatchCoords {
    pub fn len(&self) -> usize {
        self.pw * self.ph
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image pixel of the patch-local row-major index `i`.
    pub fn pixel(&self, i: usize) -> (usize, usize) {
        (self.x0 + i % self.pw, self.y0 + i / self.pw)
    }

    /// The whole image as one patch.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            pw: width,
            ph: height,
        }
    }
}

/// Uniformly placed `pw x ph` patch inside a `image_w x image_h` image.
pub fn sample_patch<R: Rng + ?Sized>(
    image_w: usize,
    image_h: usize,
    pw: usize,
    ph: usize,
    rng: &mut R,
) -> Result<PatchCoords> {
    if pw < 2 || ph < 2 {
        return Err(Error::domain(format!("patch {pw}x{ph} smaller than 2x2")));
    }
    if pw > image_w || ph > image_h {
        return Err(Error::domain(format!(
            "patch {pw}x{ph} larger than image {image_w}x{image_h}"
        )));
    }
    let x0 = rng.random_range(0..=image_w - pw);
    let y0 = rng.random_range(0..=image_h - ph);
    Ok(PatchCoords { x0, y0, pw, ph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: Mat4 = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    fn range() -> DepthRange {
        DepthRange::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn principal_ray_looks_down_negative_z() {
        let cam = Camera::new(101, 51, 37.0, IDENTITY).unwrap();
        let ray = ray_for_pixel(&cam, 50, 25, range()).unwrap();
        assert_abs_diff_eq!(ray.direction[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn origin_is_pose_translation() {
        let mut pose = IDENTITY;
        pose[0][3] = 1.0;
        pose[1][3] = 2.0;
        pose[2][3] = 3.0;
        let cam = Camera::new(8, 8, 10.0, pose).unwrap();
        let ray = ray_for_pixel(&cam, 3, 5, range()).unwrap();
        assert_eq!(ray.origin, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn offset_pixel_direction() {
        let cam = Camera::new(201, 201, 100.0, IDENTITY).unwrap();
        let ray = ray_for_pixel(&cam, 200, 100, range()).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(ray.direction[0], s, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ray.direction[2], -s, epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = Camera::new(8, 8, 10.0, IDENTITY).unwrap();
        assert!(matches!(
            ray_for_pixel(&cam, 8, 0, range()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            ray_for_pixel(&cam, 0, 8, range()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn camera_rejects_bad_rotation_and_focal() {
        let mut pose = IDENTITY;
        pose[0][0] = 1.01;
        assert!(Camera::new(4, 4, 1.0, pose).is_err());
        assert!(Camera::new(4, 4, 0.0, IDENTITY).is_err());
        assert!(Camera::new(0, 4, 1.0, IDENTITY).is_err());
    }

    #[test]
    fn midpoint_depths() {
        let ray = ray_for_pixel(&Camera::new(2, 2, 1.0, IDENTITY).unwrap(), 0, 0, range()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sample_depths(&ray, &SampleConfig::new(1, false).unwrap(), &mut rng);
        assert_eq!(one, vec![0.5]);
        let four = sample_depths(&ray, &SampleConfig::new(4, false).unwrap(), &mut rng);
        assert_eq!(four, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn stratified_depths_are_reproducible() {
        let ray = ray_for_pixel(&Camera::new(2, 2, 1.0, IDENTITY).unwrap(), 0, 0, range()).unwrap();
        let cfg = SampleConfig::new(4, true).unwrap();
        let a = sample_depths(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_depths(&ray, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn full_patch_has_one_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = sample_patch(64, 64, 64, 64, &mut rng).unwrap();
            assert_eq!((p.x0, p.y0), (0, 0));
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_patch(64, 64, 65, 16, &mut rng).is_err());
    }

    #[test]
    fn patch_offsets_are_uniform() {
        // 49 valid offsets, 10k draws: chi-square with 48 dof, 0.999 quantile ~ 84.0.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 49];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_patch(64, 64, 16, 16, &mut rng).unwrap();
            counts[p.x0] += 1;
        }
        let expected = draws as f64 / 49.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 84.0, "chi2 = {chi2}");
    }

    fn arb_camera() -> impl Strategy<Value = Camera> {
        (
            -3.0f64..3.0,
            -3.0f64..3.0,
            -3.0f64..3.0,
            0.0f64..std::f64::consts::TAU,
            -1.2f64..1.2,
            20.0f64..200.0,
        )
            .prop_map(|(x, y, z, yaw, pitch, focal)| {
                let eye = [x, y, z];
                let target = [
                    x + yaw.cos() * pitch.cos(),
                    y + pitch.sin(),
                    z + yaw.sin() * pitch.cos(),
                ];
                Camera::look_at(48, 32, focal, eye, target).unwrap()
            })
    }

    proptest! {
        #[test]
        fn rays_reproject_to_pixel_centers(cam in arb_camera(), px in 0usize..48, py in 0usize..32, t in 0.01f64..50.0) {
            let ray = ray_for_pixel(&cam, px, py, range()).unwrap();
            prop_assert!((norm(ray.direction) - 1.0).abs() < 1e-6);
            let (u, v) = cam.project(ray.at(t)).unwrap();
            prop_assert!((u - (px as f64 + 0.5)).abs() < 1e-4);
            prop_assert!((v - (py as f64 + 0.5)).abs() < 1e-4);
        }

        #[test]
        fn depth_spacing(n in 1usize..64, near in 0.0f64..2.0, len in 0.1f64..5.0, seed in any::<u64>()) {
            let cam = Camera::new(2, 2, 1.0, IDENTITY).unwrap();
            let ray = ray_for_pixel(&cam, 0, 0, DepthRange::new(near, near + len).unwrap()).unwrap();
            let mid = SampleConfig::new(n, false).unwrap();
            let delta = mid.delta(&ray);
            let ts = sample_depths(&ray, &mid, &mut ChaCha8Rng::seed_from_u64(seed));
            for w in ts.windows(2) {
                prop_assert!(((w[1] - w[0]) - delta).abs() < 1e-9);
            }
            let strat = SampleConfig::new(n, true).unwrap();
            let ts = sample_depths(&ray, &strat, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(ts[0] >= ray.t_near && *ts.last().unwrap() <= ray.t_far);
            for w in ts.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(w[1] - w[0] <= 2.0 * delta + 1e-12);
            }
        }
    }
}
