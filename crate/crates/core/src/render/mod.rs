//! Discrete volume compositing, with and without concealing fields, and
//! patch/image rendering on top of the field.

pub mod oracle;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::field::{self, FieldConfig};
use crate::geometry::{
    ray_for_pixel, sample_depths, Camera, DepthRange, PatchCoords, Ray, SampleConfig, Vec3,
};
use crate::real::Real;

pub use oracle::oracle_composite;

/// Lower clamp on accumulated log transmittance.
pub const LOG_T_FLOOR: f64 = -80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Concealing fields removed.
    Normal,
    /// Concealing fields applied to the transmittance.
    Lowlight,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(RenderMode::Normal),
            "lowlight" => Ok(RenderMode::Lowlight),
            other => Err(Error::Config(format!("unknown render mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RenderMode::Normal => "normal",
            RenderMode::Lowlight => "lowlight",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult<T> {
    pub rgb: [T; 3],
    pub weights: Vec<T>,
    /// `T(i)` in normal mode, the concealed transmittance in low-light mode.
    pub transmittance: Vec<T>,
    pub mode: RenderMode,
}

/// Field values for every sample of a rectangular block of rays. Sample `i`
/// of pixel `p` lives at index `p * n_samples + i`; colors hold 3 entries
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBuffers<T> {
    pub ph: usize,
    pub pw: usize,
    pub n_samples: usize,
    pub sigmas: Vec<T>,
    pub colors: Vec<T>,
    pub omegas: Vec<T>,
    pub theta_g: Vec<T>,
    pub delta: T,
}

impl<T: Real> PatchBuffers<T> {
    pub fn validate(&self) -> Result<()> {
        let s = self.ph * self.pw * self.n_samples;
        if self.sigmas.len() != s
            || self.colors.len() != 3 * s
            || self.omegas.len() != s
            || self.theta_g.len() != self.n_samples
        {
            return Err(Error::shape("patch buffers have inconsistent lengths"));
        }
        if !(self.delta > T::zero()) {
            return Err(Error::domain("delta must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.ph * self.pw
    }

    fn ray_slice<'a>(&self, v: &'a [T], pixel: usize) -> &'a [T] {
        &v[pixel * self.n_samples..(pixel + 1) * self.n_samples]
    }
}

/// Accumulates one ray. `log_factors[j]`, when present, is added to the
/// log transmittance of every sample after `j`.
pub(crate) fn composite_ray<T: Real>(
    sigmas: &[T],
    colors: &[T],
    log_factors: Option<&[T]>,
    delta: T,
    mode: RenderMode,
) -> CompositeResult<T> {
    let n = sigmas.len();
    let floor = T::from_f64(LOG_T_FLOOR);
    let mut rgb = [T::zero(); 3];
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut acc = T::zero();
    for i in 0..n {
        let trans = acc.max(floor).exp();
        let optical = sigmas[i] * delta;
        let alpha = -(-optical).exp_m1();
        let w = trans * alpha;
        for c in 0..3 {
            rgb[c] = rgb[c] + w * colors[3 * i + c];
        }
        weights.push(w);
        transmittance.push(trans);
        acc = acc - optical;
        if let Some(lf) = log_factors {
            acc = acc + lf[i];
        }
    }
    CompositeResult {
        rgb,
        weights,
        transmittance,
        mode,
    }
}

/// Gradients of one ray's color with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RayGrads<T> {
    pub d_sigma: Vec<T>,
    pub d_color: Vec<T>,
    /// Gradient with respect to each `log_factors[j]`.
    pub d_log_factor: Vec<T>,
}

/// Backward pass of [`composite_ray`] for upstream color gradient `g`.
pub(crate) fn composite_ray_backward<T: Real>(
    sigmas: &[T],
    colors: &[T],
    log_factors: Option<&[T]>,
    delta: T,
    g: [T; 3],
) -> RayGrads<T> {
    let n = sigmas.len();
    let floor = T::from_f64(LOG_T_FLOOR);
    let mut d_sigma = vec![T::zero(); n];
    let mut d_color = vec![T::zero(); 3 * n];
    // d_acc[i]: gradient w.r.t. the accumulated log transmittance of sample i
    let mut d_acc = vec![T::zero(); n];
    let mut acc = T::zero();
    for i in 0..n {
        let unclamped = acc > floor;
        let trans = acc.max(floor).exp();
        let optical = sigmas[i] * delta;
        let keep = (-optical).exp();
        let alpha = -(-optical).exp_m1();
        let gc = g[0] * colors[3 * i] + g[1] * colors[3 * i + 1] + g[2] * colors[3 * i + 2];
        let w = trans * alpha;
        for c in 0..3 {
            d_color[3 * i + c] = w * g[c];
        }
        d_sigma[i] = trans * gc * delta * keep;
        if unclamped {
            d_acc[i] = w * gc;
        }
        acc = acc - optical;
        if let Some(lf) = log_factors {
            acc = acc + lf[i];
        }
    }
    // each log term j feeds acc[i] for all i > j
    let mut d_log_factor = vec![T::zero(); n];
    let mut suffix = T::zero();
    for j in (0..n).rev() {
        d_log_factor[j] = suffix;
        d_sigma[j] = d_sigma[j] - delta * suffix;
        suffix = suffix + d_acc[j];
    }
    RayGrads {
        d_sigma,
        d_color,
        d_log_factor,
    }
}

fn check_finite<T: Real>(op: &str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(op))
    }
}

/// Plain volume compositing of one ray.
pub fn composite_normal<T: Real>(
    sigmas: &[T],
    colors: &[T],
    delta: T,
) -> Result<CompositeResult<T>> {
    if colors.len() != 3 * sigmas.len() {
        return Err(Error::shape("colors must hold three entries per sample"));
    }
    check_finite("composite_normal sigmas", sigmas)?;
    check_finite("composite_normal colors", colors)?;
    if !delta.is_finite() || !(delta > T::zero()) {
        return Err(Error::domain("delta must be positive and finite"));
    }
    Ok(composite_ray(
        sigmas,
        colors,
        None,
        delta,
        RenderMode::Normal,
    ))
}

/// Compositing of one pixel of `buffers` with the concealed transmittance
/// `T(i) * prod_{j<i} omega_j theta_j`.
pub fn composite_lowlight<T: Real>(
    buffers: &PatchBuffers<T>,
    pixel: usize,
) -> Result<CompositeResult<T>> {
    buffers.validate()?;
    if pixel >= buffers.pixels() {
        return Err(Error::domain(format!("pixel {pixel} outside patch")));
    }
    let sigmas = buffers.ray_slice(&buffers.sigmas, pixel);
    let n = buffers.n_samples;
    let colors = &buffers.colors[3 * pixel * n..3 * (pixel + 1) * n];
    let omegas = buffers.ray_slice(&buffers.omegas, pixel);
    check_finite("composite_lowlight sigmas", sigmas)?;
    check_finite("composite_lowlight colors", colors)?;
    check_finite("composite_lowlight omegas", omegas)?;
    check_finite("composite_lowlight theta_g", &buffers.theta_g)?;
    let log_factors: Vec<T> = omegas
        .iter()
        .zip(&buffers.theta_g)
        .map(|(&o, &t)| o.ln() + t.ln())
        .collect();
    Ok(composite_ray(
        sigmas,
        colors,
        Some(&log_factors),
        buffers.delta,
        RenderMode::Lowlight,
    ))
}

/// A camera together with the depth bounds of its scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub range: DepthRange,
}

/// Rays for every pixel of `patch`, row-major.
pub fn patch_rays(view: &View, patch: &PatchCoords) -> Result<Vec<Ray>> {
    (0..patch.len())
        .map(|i| {
            let (x, y) = patch.pixel(i);
            ray_for_pixel(&view.camera, x, y, view.range)
        })
        .collect()
}

/// Sample positions for a set of rays, ray-major.
pub fn sample_points<R: Rng + ?Sized>(rays: &[Ray], cfg: &SampleConfig, rng: &mut R) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(rays.len() * cfg.n_samples);
    for ray in rays {
        for t in sample_depths(ray, cfg, rng) {
            pts.push(ray.at(t));
        }
    }
    pts
}

/// Rendered patch plus the buffers it was composited from.
#[derive(Debug, Clone)]
pub struct PatchRender<T> {
    pub patch: PatchCoords,
    pub mode: RenderMode,
    /// `3` entries per pixel, row-major.
    pub rgb: Vec<T>,
    pub buffers: PatchBuffers<T>,
}

/// Pixels evaluated per field call when rendering without gradients.
const RENDER_CHUNK_PIXELS: usize = 256;

/// Renders `patch` of `view`. Low-light mode evaluates the concealing fields
/// over the whole patch; normal mode never touches them and leaves unit
/// concealing values in the returned buffers.
pub fn render_patch<T: Real, R: Rng + ?Sized>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    view: &View,
    patch: PatchCoords,
    mode: RenderMode,
    stratified: bool,
    rng: &mut R,
) -> Result<PatchRender<T>> {
    let rays = patch_rays(view, &patch)?;
    let sample_cfg = SampleConfig::new(cfg.n_samples, stratified)?;
    let delta = sample_cfg.delta(&rays[0]);
    let points = sample_points(&rays, &sample_cfg, rng);
    let buffers = eval_buffers(params, cfg, &rays, &points, patch, delta, mode)?;
    let rgb = composite_buffers(&buffers, mode);
    Ok(PatchRender {
        patch,
        mode,
        rgb,
        buffers,
    })
}

/// Full-image render with midpoint samples.
pub fn render_image<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    view: &View,
    mode: RenderMode,
) -> Result<PatchRender<T>> {
    let patch = PatchCoords::full(view.camera.width, view.camera.height);
    // midpoint sampling draws nothing from the generator
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    render_patch(params, cfg, view, patch, mode, false, &mut rng)
}

fn eval_buffers<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    rays: &[Ray],
    points: &[Vec3],
    patch: PatchCoords,
    delta: f64,
    mode: RenderMode,
) -> Result<PatchBuffers<T>> {
    let n = cfg.n_samples;
    let lowlight = mode == RenderMode::Lowlight;
    let s = rays.len() * n;
    let mut sigmas = Vec::with_capacity(s);
    let mut colors = Vec::with_capacity(3 * s);
    let mut head = Vec::with_capacity(if lowlight { s } else { 0 });
    for (chunk, ray_chunk) in rays.chunks(RENDER_CHUNK_PIXELS).enumerate() {
        let start = chunk * RENDER_CHUNK_PIXELS * n;
        let pts = &points[start..start + ray_chunk.len() * n];
        let dirs: Vec<Vec3> = ray_chunk.iter().map(|r| r.direction).collect();
        let trace = field::forward(params, cfg, pts, &dirs, lowlight)?;
        sigmas.extend_from_slice(&trace.sigma);
        colors.extend_from_slice(&trace.rgb);
        if let Some(h) = &trace.conceal_head {
            head.extend_from_slice(h);
        }
    }
    let (omegas, theta_g) = if lowlight {
        let omegas = field::eval_conceal_local(params, &head, patch.ph, patch.pw, n)?;
        (omegas, field::theta_global(params))
    } else {
        (vec![T::one(); s], vec![T::one(); n])
    };
    Ok(PatchBuffers {
        ph: patch.ph,
        pw: patch.pw,
        n_samples: n,
        sigmas,
        colors,
        omegas,
        theta_g,
        delta: T::from_f64(delta),
    })
}

/// Composites every pixel of `buffers` in the given mode.
pub fn composite_buffers<T: Real>(buffers: &PatchBuffers<T>, mode: RenderMode) -> Vec<T> {
    let n = buffers.n_samples;
    let log_theta: Vec<T> = buffers.theta_g.iter().map(|t| t.ln()).collect();
    let mut rgb = vec![T::zero(); 3 * buffers.pixels()];
    rgb.par_chunks_mut(3).enumerate().for_each(|(p, out)| {
        let sig = &buffers.sigmas[p * n..(p + 1) * n];
        let col = &buffers.colors[3 * p * n..3 * (p + 1) * n];
        let res = match mode {
            RenderMode::Normal => composite_ray(sig, col, None, buffers.delta, mode),
            RenderMode::Lowlight => {
                let lf: Vec<T> = buffers.omegas[p * n..(p + 1) * n]
                    .iter()
                    .zip(&log_theta)
                    .map(|(o, lt)| o.ln() + *lt)
                    .collect();
                composite_ray(sig, col, Some(&lf), buffers.delta, mode)
            }
        };
        out.copy_from_slice(&res.rgb);
    });
    rgb
}

/// Per-pixel mean of the local concealing field over depth.
pub fn omega_map<T: Real>(buffers: &PatchBuffers<T>) -> Vec<T> {
    let n = T::from_f64(buffers.n_samples as f64);
    buffers
        .omegas
        .chunks(buffers.n_samples)
        .map(|o| o.iter().copied().sum::<T>() / n)
        .collect()
}

/// Mean absolute difference between horizontally and vertically adjacent
/// values of a row-major `h x w` map.
pub fn total_variation(map: &[f64], w: usize, h: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if x + 1 < w {
                sum += (map[y * w + x + 1] - v).abs();
                count += 1;
            }
            if y + 1 < h {
                sum += (map[(y + 1) * w + x] - v).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::oracle_ray;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn buffers_for_ray(
        sigmas: &[f64],
        colors: &[f64],
        omega: f64,
        theta: f64,
        delta: f64,
    ) -> PatchBuffers<f64> {
        let n = sigmas.len();
        PatchBuffers {
            ph: 1,
            pw: 1,
            n_samples: n,
            sigmas: sigmas.to_vec(),
            colors: colors.to_vec(),
            omegas: vec![omega; n],
            theta_g: vec![theta; n],
            delta,
        }
    }

    #[test]
    fn empty_space_is_black() {
        let r = composite_normal(&[0.0; 4], &[0.7; 12], 0.1).unwrap();
        assert_eq!(r.rgb, [0.0; 3]);
        assert!(r.weights.iter().all(|&w| w == 0.0));
        assert!(r.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn half_opacity_sample() {
        let delta = 0.25;
        let r = composite_normal(&[2f64.ln() / delta], &[1.0; 3], delta).unwrap();
        for c in r.rgb {
            assert_abs_diff_eq!(c, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn opaque_first_sample_occludes() {
        let colors = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let r = composite_normal(&[1e6, 5.0, 5.0], &colors, 0.1).unwrap();
        assert_abs_diff_eq!(r.rgb[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rgb[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rgb[2], 0.0, epsilon = 1e-12);
        assert!(r.weights[1] < 1e-30 && r.weights[2] < 1e-30);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        assert!(matches!(
            composite_normal(&[f64::NAN], &[0.0; 3], 0.1),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn unit_concealing_is_bit_identical_to_normal() {
        let sig = [0.3, 2.0, 0.0, 7.5];
        let col: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let normal = composite_normal(&sig, &col, 0.05).unwrap();
        let low = composite_lowlight(&buffers_for_ray(&sig, &col, 1.0, 1.0, 0.05), 0).unwrap();
        assert_eq!(normal.rgb, low.rgb);
        assert_eq!(normal.weights, low.weights);
    }

    #[test]
    fn uniform_concealing_closed_form() {
        let sig = [0.5, 1.0, 1.5, 2.0, 0.1];
        let col = [0.5; 15];
        let (om, th, delta) = (0.8, 0.6, 0.2);
        let normal = composite_normal(&sig, &col, delta).unwrap();
        let low = composite_lowlight(&buffers_for_ray(&sig, &col, om, th, delta), 0).unwrap();
        for i in 0..sig.len() {
            let expect = normal.transmittance[i] * (om * th).powi(i as i32);
            assert_abs_diff_eq!(low.transmittance[i], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn nothing_to_conceal_in_empty_space() {
        let low =
            composite_lowlight(&buffers_for_ray(&[0.0; 3], &[0.9; 9], 0.2, 0.1, 0.3), 0).unwrap();
        assert_eq!(low.rgb, [0.0; 3]);
    }

    #[test]
    fn oracle_sanity() {
        let b = buffers_for_ray(&[0.0; 3], &[0.4; 9], 1.0, 1.0, 0.1);
        assert_eq!(oracle_composite(&b, 0, RenderMode::Normal), [0.0; 3]);
        let b = buffers_for_ray(&[0.4, 1.2, 3.0], &[0.4; 9], 1.0, 1.0, 0.1);
        assert_eq!(
            oracle_composite(&b, 0, RenderMode::Normal),
            oracle_composite(&b, 0, RenderMode::Lowlight)
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..8);
            let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let col: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let lf: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
            let g = [0.3, -1.2, 0.7];
            let delta = 0.13;
            let f = |s: &[f64], c: &[f64], l: &[f64]| {
                let r = composite_ray(s, c, Some(l), delta, RenderMode::Lowlight).rgb;
                r[0] * g[0] + r[1] * g[1] + r[2] * g[2]
            };
            let gr = composite_ray_backward(&sig, &col, Some(&lf), delta, g);
            let eps = 1e-6;
            for i in 0..n {
                let mut a = sig.clone();
                a[i] += eps;
                let mut b = sig.clone();
                b[i] -= eps;
                assert_abs_diff_eq!(
                    gr.d_sigma[i],
                    (f(&a, &col, &lf) - f(&b, &col, &lf)) / (2.0 * eps),
                    epsilon = 1e-8
                );
                let mut a = lf.clone();
                a[i] += eps;
                let mut b = lf.clone();
                b[i] -= eps;
                assert_abs_diff_eq!(
                    gr.d_log_factor[i],
                    (f(&sig, &col, &a) - f(&sig, &col, &b)) / (2.0 * eps),
                    epsilon = 1e-8
                );
            }
            for i in 0..3 * n {
                let mut a = col.clone();
                a[i] += eps;
                let mut b = col.clone();
                b[i] -= eps;
                assert_abs_diff_eq!(
                    gr.d_color[i],
                    (f(&sig, &a, &lf) - f(&sig, &b, &lf)) / (2.0 * eps),
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn total_variation_of_constant_and_ramp() {
        assert_eq!(total_variation(&[0.3; 12], 4, 3), 0.0);
        let ramp: Vec<f64> = (0..4).map(|x| x as f64).collect();
        assert_eq!(total_variation(&ramp, 4, 1), 1.0);
    }

    proptest! {
        #[test]
        fn concealing_properties(
            n in 1usize..16,
            seed in any::<u64>(),
            alpha in 0.01f64..0.99,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
            let col: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let om: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.999)).collect();
            let th: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.999)).collect();
            let delta = rng.random_range(0.01..0.5);
            let mut b = buffers_for_ray(&sig, &col, 0.5, 0.5, delta);
            b.omegas = om.clone();
            b.theta_g = th.clone();
            let normal = composite_normal(&sig, &col, delta).unwrap();
            let low = composite_lowlight(&b, 0).unwrap();
            // transmittance bounds and monotonicity
            prop_assert_eq!(normal.transmittance[0], 1.0);
            for i in 0..n {
                prop_assert!(low.transmittance[i] <= normal.transmittance[i]);
                if i > 0 {
                    prop_assert!(normal.transmittance[i] <= normal.transmittance[i - 1]);
                    prop_assert!(low.transmittance[i] <= low.transmittance[i - 1]);
                }
            }
            prop_assert!(normal.weights.iter().sum::<f64>() <= 1.0 + 1e-12);
            let cmax = col.iter().cloned().fold(0.0, f64::max);
            for c in normal.rgb {
                prop_assert!(c <= cmax + 1e-12);
            }
            // shrinking every omega never brightens
            b.omegas = om.iter().map(|o| o * alpha).collect();
            let darker = composite_lowlight(&b, 0).unwrap();
            for c in 0..3 {
                prop_assert!(darker.rgb[c] <= low.rgb[c]);
            }
            // oracle agreement
            let o = oracle_ray(&sig, &col, Some(&om), Some(&th), delta);
            for c in 0..3 {
                prop_assert!((o[c] - low.rgb[c]).abs() < 1e-9);
            }
        }
    }
}
