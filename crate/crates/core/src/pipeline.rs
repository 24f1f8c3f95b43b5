//! The per-patch training objective: render the patch in low-light mode,
//! composite the unconcealed image from the same field samples, and score
//! both with the weighted loss. Gradients are propagated by hand through
//! compositing, the concealing convolution and the field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{GradStore, Objective, ParamStore};
use crate::error::{Error, Result};
use crate::field::{self, names, FieldConfig, FieldTrace};
use crate::geometry::{Camera, DepthRange, PatchCoords, SampleConfig, Vec3};
use crate::losses::{self, ColorConstancy, LossBreakdown, LossWeights};
use crate::real::{sigmoid, Real};
use crate::render::{
    composite_ray, composite_ray_backward, patch_rays, sample_points, RenderMode, View,
};

/// Everything needed to evaluate the loss of one patch, with sample
/// positions already drawn so repeated evaluations are identical.
#[derive(Debug, Clone)]
pub struct PatchProblem<T> {
    pub field_cfg: FieldConfig,
    pub weights: LossWeights,
    pub color_mode: ColorConstancy,
    /// Concealing fixed at 1: the reconstruction loss sees the unconcealed
    /// render and concealing parameters receive no gradient.
    pub conceal_frozen: bool,
    pub patch: PatchCoords,
    /// One unit direction per pixel, row-major.
    pub dirs: Vec<Vec3>,
    /// `n_samples` positions per pixel.
    pub points: Vec<Vec3>,
    pub delta: f64,
    /// Low-light target, three channels per pixel.
    pub target: Vec<T>,
}

/// Forward results of a [`PatchProblem`].
#[derive(Debug, Clone)]
pub struct PatchForward<T> {
    pub trace: FieldTrace<T>,
    /// Local concealing values (`ph x pw x n`); empty when frozen.
    pub omega: Vec<T>,
    log_omega: Vec<T>,
    pub theta_g: Vec<T>,
    log_theta: Vec<T>,
    pub pred_low: Vec<T>,
    pub pred_normal: Vec<T>,
    pub breakdown: LossBreakdown,
    pub total: T,
}

impl<T: Real> PatchProblem<T> {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch.len();
        if self.dirs.len() != p
            || self.points.len() != p * self.field_cfg.n_samples
            || self.target.len() != 3 * p
        {
            return Err(Error::shape("patch problem buffers do not match the patch"));
        }
        if self.patch.pw < 2 || self.patch.ph < 2 {
            return Err(Error::domain(format!(
                "training patches must be at least 2x2, got {}x{}",
                self.patch.pw, self.patch.ph
            )));
        }
        self.weights.validate()
    }

    /// Two-pixel-wide patches have no interior column, so the structure
    /// term is dropped rather than rejected.
    fn has_structure_term(&self) -> bool {
        self.patch.pw >= 3
    }

    fn log_factors(&self, fwd_log_omega: &[T], log_theta: &[T], pixel: usize) -> Vec<T> {
        let n = self.field_cfg.n_samples;
        fwd_log_omega[pixel * n..(pixel + 1) * n]
            .iter()
            .zip(log_theta)
            .map(|(&a, &b)| a + b)
            .collect()
    }

    pub fn forward(&self, params: &ParamStore<T>) -> Result<PatchForward<T>> {
        self.validate()?;
        let cfg = &self.field_cfg;
        let n = cfg.n_samples;
        let (ph, pw) = (self.patch.ph, self.patch.pw);
        let pixels = self.patch.len();
        let lowlight = !self.conceal_frozen;
        let trace = field::forward(params, cfg, &self.points, &self.dirs, lowlight)?;

        let (omega, log_omega) = if lowlight {
            let head = trace
                .conceal_head
                .as_ref()
                .expect("concealing head evaluated");
            let (o, lo, _) = field::conceal_local(params, head, ph, pw, n)?;
            (o, lo)
        } else {
            (Vec::new(), Vec::new())
        };
        let (theta_g, log_theta) = if lowlight {
            (field::theta_global(params), field::log_theta_global(params))
        } else {
            (Vec::new(), Vec::new())
        };

        let delta = T::from_f64(self.delta);
        let mut pred_low = vec![T::zero(); 3 * pixels];
        let mut pred_normal = vec![T::zero(); 3 * pixels];
        pred_normal
            .par_chunks_mut(3)
            .zip(pred_low.par_chunks_mut(3))
            .enumerate()
            .for_each(|(p, (nor, low))| {
                let sig = &trace.sigma[p * n..(p + 1) * n];
                let col = &trace.rgb[3 * p * n..3 * (p + 1) * n];
                let r = composite_ray(sig, col, None, delta, RenderMode::Normal);
                nor.copy_from_slice(&r.rgb);
                if lowlight {
                    let lf = self.log_factors(&log_omega, &log_theta, p);
                    let r = composite_ray(sig, col, Some(&lf), delta, RenderMode::Lowlight);
                    low.copy_from_slice(&r.rgb);
                } else {
                    low.copy_from_slice(&r.rgb);
                }
            });

        let w = &self.weights;
        let nerf = losses::loss_nerf(&pred_low, &self.target)?;
        let con = if lowlight {
            losses::loss_control(&omega, ph, pw, n, w.eta)?
        } else {
            T::zero()
        };
        let st = if self.has_structure_term() {
            losses::loss_structure(&pred_normal, &self.target, pw, ph, w.eta)?
        } else {
            T::zero()
        };
        let cc = losses::loss_color(&pred_normal, self.color_mode)?;
        let total = nerf
            + T::from_f64(w.lambda1) * con
            + T::from_f64(w.lambda2) * st
            + T::from_f64(w.lambda3) * cc;
        let breakdown =
            losses::loss_total(nerf.as_f64(), con.as_f64(), st.as_f64(), cc.as_f64(), w)?;
        if !total.is_finite() {
            return Err(Error::non_finite("total loss"));
        }
        Ok(PatchForward {
            trace,
            omega,
            log_omega,
            theta_g,
            log_theta,
            pred_low,
            pred_normal,
            breakdown,
            total,
        })
    }

    pub fn backward(&self, params: &ParamStore<T>, fwd: &PatchForward<T>) -> GradStore<T> {
        let cfg = &self.field_cfg;
        let n = cfg.n_samples;
        let (ph, pw) = (self.patch.ph, self.patch.pw);
        let pixels = self.patch.len();
        let lowlight = !self.conceal_frozen;
        let w = &self.weights;
        let delta = T::from_f64(self.delta);

        let d_low = losses::loss_nerf_grad(&fwd.pred_low, &self.target);
        let d_st = if self.has_structure_term() {
            losses::loss_structure_grad(&fwd.pred_normal, &self.target, pw, ph, w.eta)
        } else {
            vec![T::zero(); fwd.pred_normal.len()]
        };
        let d_cc = losses::loss_color_grad(&fwd.pred_normal, self.color_mode);
        let (l2, l3) = (T::from_f64(w.lambda2), T::from_f64(w.lambda3));
        let d_normal: Vec<T> = d_st
            .iter()
            .zip(&d_cc)
            .enumerate()
            .map(|(i, (&a, &b))| {
                let g = l2 * a + l3 * b;
                if lowlight {
                    g
                } else {
                    g + d_low[i]
                }
            })
            .collect();

        struct PixelGrads<T> {
            d_sigma: Vec<T>,
            d_color: Vec<T>,
            d_log: Vec<T>,
        }
        let per_pixel: Vec<PixelGrads<T>> = (0..pixels)
            .into_par_iter()
            .map(|p| {
                let sig = &fwd.trace.sigma[p * n..(p + 1) * n];
                let col = &fwd.trace.rgb[3 * p * n..3 * (p + 1) * n];
                let g_nor = [d_normal[3 * p], d_normal[3 * p + 1], d_normal[3 * p + 2]];
                let mut out = composite_ray_backward(sig, col, None, delta, g_nor);
                let mut d_log = Vec::new();
                if lowlight {
                    let lf = self.log_factors(&fwd.log_omega, &fwd.log_theta, p);
                    let g_low = [d_low[3 * p], d_low[3 * p + 1], d_low[3 * p + 2]];
                    let low = composite_ray_backward(sig, col, Some(&lf), delta, g_low);
                    for (a, b) in out.d_sigma.iter_mut().zip(&low.d_sigma) {
                        *a = *a + *b;
                    }
                    for (a, b) in out.d_color.iter_mut().zip(&low.d_color) {
                        *a = *a + *b;
                    }
                    d_log = low.d_log_factor;
                }
                PixelGrads {
                    d_sigma: out.d_sigma,
                    d_color: out.d_color,
                    d_log,
                }
            })
            .collect();

        let s = pixels * n;
        let mut d_sigma = Vec::with_capacity(s);
        let mut d_rgb = Vec::with_capacity(3 * s);
        for g in &per_pixel {
            d_sigma.extend_from_slice(&g.d_sigma);
            d_rgb.extend_from_slice(&g.d_color);
        }

        let mut grads = params.zeros_like();
        let mut d_head = None;
        if lowlight {
            let d_con = losses::loss_control_grad(&fwd.omega, ph, pw, n, w.eta);
            let l1 = T::from_f64(w.lambda1);
            // gradient w.r.t. the convolution output (pre-sigmoid)
            let mut d_pre = vec![T::zero(); s];
            let mut d_log_theta = vec![T::zero(); n];
            for (p, g) in per_pixel.iter().enumerate() {
                for i in 0..n {
                    let idx = p * n + i;
                    let om = fwd.omega[idx];
                    let one_minus = T::one() - om;
                    d_pre[idx] = g.d_log[i] * one_minus + l1 * d_con[idx] * om * one_minus;
                    d_log_theta[i] = d_log_theta[i] + g.d_log[i];
                }
            }
            let head = fwd
                .trace
                .conceal_head
                .as_ref()
                .expect("concealing head evaluated");
            let kernel = params.expect(names::CONCEAL_KERNEL);
            let (dz, dk, db) = field::conv_replicate_backward(head, &d_pre, ph, pw, n, kernel);
            if cfg.learnable_kernel {
                *grads.expect_mut(names::CONCEAL_KERNEL) = dk;
                grads.expect_mut(names::CONCEAL_KERNEL_B)[0] = db;
            }
            let logits = params.expect(names::GLOBAL_LOGITS);
            let dl = grads.expect_mut(names::GLOBAL_LOGITS);
            for i in 0..n {
                dl[i] = d_log_theta[i] * (T::one() - sigmoid(logits[i]));
            }
            d_head = Some(dz);
        }
        field::backward(
            params,
            cfg,
            &fwd.trace,
            &d_sigma,
            &d_rgb,
            d_head.as_deref(),
            &mut grads,
        );
        grads
    }
}

impl<T: Real> Objective<T> for PatchProblem<T> {
    fn loss(&self, params: &ParamStore<T>) -> Result<T> {
        Ok(self.forward(params)?.total)
    }

    fn loss_and_grads(&self, params: &ParamStore<T>) -> Result<(T, GradStore<T>)> {
        let fwd = self.forward(params)?;
        let grads = self.backward(params, &fwd);
        Ok((fwd.total, grads))
    }
}

/// A small seeded problem for gradient verification: a patch at the
/// corner of a camera looking at the origin, uniform targets in
/// `[0, 0.3)`, and parameters nudged off their symmetric initial values
/// so every group receives a distinct gradient.
pub fn verification_problem(
    field_cfg: FieldConfig,
    weights: LossWeights,
    color_mode: ColorConstancy,
    patch_w: usize,
    patch_h: usize,
    seed: u64,
) -> Result<(PatchProblem<f64>, ParamStore<f64>)> {
    let camera = Camera::look_at(
        patch_w + 3,
        patch_h + 3,
        6.0,
        [0.0, 0.3, 2.0],
        [0.0, 0.0, 0.0],
    )?;
    let view = View {
        camera,
        range: DepthRange::new(1.2, 2.8)?,
    };
    let patch = PatchCoords {
        x0: 1,
        y0: 1,
        pw: patch_w,
        ph: patch_h,
    };
    let rays = patch_rays(&view, &patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = SampleConfig::new(field_cfg.n_samples, true)?;
    let points = sample_points(&rays, &sc, &mut rng);
    let target = (0..3 * patch.len())
        .map(|_| rng.random_range(0.0..0.3))
        .collect();
    let mut params = field::init_params::<f64>(&field_cfg, seed)?;
    // positive density so the composite weights are not all tiny
    params.expect_mut(names::SIGMA_B)[0] = 1.5;
    for v in params.expect_mut(names::CONCEAL_KERNEL).iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    for v in params.expect_mut(names::GLOBAL_LOGITS).iter_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let problem = PatchProblem {
        field_cfg,
        weights,
        color_mode,
        conceal_frozen: false,
        patch,
        delta: sc.delta(&rays[0]),
        dirs: rays.iter().map(|r| r.direction).collect(),
        points,
        target,
    };
    problem.validate()?;
    Ok((problem, params))
}
