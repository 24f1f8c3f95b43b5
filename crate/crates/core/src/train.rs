//! Optimization loop: one view and one patch per iteration, Adam with a
//! plateau-sampled cosine schedule, periodic checkpoints and resumable,
//! thread-count independent runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diff::{GradStore, ParamStore};
use crate::error::{Error, Result};
use crate::field::{self, names, FieldConfig};
use crate::geometry::{sample_patch, PatchCoords, SampleConfig};
use crate::losses::{ColorConstancy, LossBreakdown, LossWeights};
use crate::pipeline::PatchProblem;
use crate::real::Real;
use crate::render::{patch_rays, sample_points, View};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    /// Length of each constant-learning-rate plateau.
    pub lr_step: usize,
    pub iters: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub weights: LossWeights,
    pub color_mode: ColorConstancy,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub stratified: bool,
    /// Keep both concealing fields at 1 and never update them.
    pub conceal_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            lr_min: 5e-6,
            lr_step: 2500,
            iters: 5000,
            patch_w: 32,
            patch_h: 32,
            weights: LossWeights::default(),
            color_mode: ColorConstancy::default(),
            seed: 0,
            checkpoint_every: 1000,
            stratified: true,
            conceal_frozen: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_rays(&self) -> usize {
        self.patch_w * self.patch_h
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr0 and lr0 > 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr_step must be >= 1".into()));
        }
        if self.patch_w < 2 || self.patch_h < 2 {
            return Err(Error::Config(format!(
                "patch must be at least 2x2, got {}x{}",
                self.patch_w, self.patch_h
            )));
        }
        Ok(())
    }

    /// Whether the optimizer leaves parameter `name` untouched.
    pub fn is_frozen(&self, field_cfg: &FieldConfig, name: &str) -> bool {
        if self.conceal_frozen && names::is_concealing(name) {
            return true;
        }
        !field_cfg.learnable_kernel
            && (name == names::CONCEAL_KERNEL || name == names::CONCEAL_KERNEL_B)
    }
}

/// Learning rate at `iter`: a cosine from `lr0` to `lr_min` over the run,
/// evaluated at the start of each `lr_step` plateau.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.iters == 0 {
        return cfg.lr0;
    }
    let plateau = (iter.min(cfg.iters) / cfg.lr_step) * cfg.lr_step;
    let phase = std::f64::consts::PI * plateau as f64 / cfg.iters as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of every parameter not rejected by `frozen`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    frozen: impl Fn(&str) -> bool,
) -> Result<()> {
    if !grads.same_layout(params) || !state.m.same_layout(params) || !state.v.same_layout(params) {
        return Err(Error::shape(
            "adam: parameter, gradient and moment layouts differ",
        ));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::non_finite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    let (one, eps) = (T::one(), T::from_f64(ADAM_EPS));
    let step_size = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let m_iter = state.m.iter_mut();
    let v_iter = state.v.iter_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in
        params.iter_mut().zip(grads.iter()).zip(m_iter).zip(v_iter)
    {
        if frozen(name) {
            continue;
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            p[i] = p[i] - step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// One training view: camera, depth bounds and the low-light target image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub view: View,
    /// `3 * width * height` values in `[0, 1]`, row-major.
    pub image: Vec<f32>,
}

impl TrainView {
    fn check(&self) -> Result<()> {
        let cam = &self.view.camera;
        if self.image.len() != 3 * cam.width * cam.height {
            return Err(Error::shape(format!(
                "image holds {} values, camera is {}x{}",
                self.image.len(),
                cam.width,
                cam.height
            )));
        }
        Ok(())
    }

    /// Low-light target values under `patch`.
    pub fn crop<T: Real>(&self, patch: &PatchCoords) -> Vec<T> {
        let w = self.view.camera.width;
        let mut out = Vec::with_capacity(3 * patch.len());
        for i in 0..patch.len() {
            let (x, y) = patch.pixel(i);
            let base = 3 * (y * w + x);
            out.extend(
                self.image[base..base + 3]
                    .iter()
                    .map(|&v| T::from_f64(v as f64)),
            );
        }
        out
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LogEntry {
    pub const HEADER: &'static str = "iter,lr,nerf,con,st,cc,total";

    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iter, self.lr, l.nerf, l.con, l.st, l.cc, l.total
        )
    }
}

/// Generator for iteration `iter`: a fixed stream of the seeded generator,
/// so resumed runs draw exactly what an uninterrupted run would.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

/// Builds the patch problem for one iteration.
pub fn draw_problem<T: Real, R: Rng + ?Sized>(
    views: &[TrainView],
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(usize, PatchProblem<T>)> {
    let vi = rng.random_range(0..views.len());
    let tv = &views[vi];
    let cam = &tv.view.camera;
    let patch = sample_patch(cam.width, cam.height, cfg.patch_w, cfg.patch_h, rng)?;
    let rays = patch_rays(&tv.view, &patch)?;
    let sc = SampleConfig::new(field_cfg.n_samples, cfg.stratified)?;
    let points = sample_points(&rays, &sc, rng);
    let problem = PatchProblem {
        field_cfg: *field_cfg,
        weights: cfg.weights,
        color_mode: cfg.color_mode,
        conceal_frozen: cfg.conceal_frozen,
        patch,
        delta: sc.delta(&rays[0]),
        dirs: rays.iter().map(|r| r.direction).collect(),
        points,
        target: tv.crop(&patch),
    };
    Ok((vi, problem))
}

/// Receives progress from [`Trainer::run`].
pub trait TrainObserver {
    fn on_log(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl TrainObserver for Quiet {}

/// Training state. Parameters and moments are kept in 32-bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub field_cfg: FieldConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(field_cfg: FieldConfig, train_cfg: TrainConfig) -> Result<Self> {
        field_cfg.validate()?;
        train_cfg.validate()?;
        let params = field::init_params::<f32>(&field_cfg, train_cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            field_cfg,
            train_cfg,
            params,
            adam,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.field_cfg.validate()?;
        ckpt.train_cfg.validate()?;
        field::check_layout(&ckpt.field_cfg, &ckpt.params)?;
        Ok(Self {
            field_cfg: ckpt.field_cfg,
            train_cfg: ckpt.train_cfg,
            params: ckpt.params,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            field_cfg: self.field_cfg,
            train_cfg: self.train_cfg,
            params: self.params.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            seed: self.train_cfg.seed,
        }
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.train_cfg.iters
    }

    /// Runs one iteration and returns its log entry.
    pub fn step(&mut self, views: &[TrainView]) -> Result<LogEntry> {
        if views.is_empty() {
            return Err(Error::domain("training needs at least one view"));
        }
        let iter = self.iteration;
        let cfg = self.train_cfg;
        let mut rng = iteration_rng(cfg.seed, iter);
        let (vi, problem) = draw_problem::<f32, _>(views, &self.field_cfg, &cfg, &mut rng)?;
        let abort = |reason: String| Error::TrainAbort {
            iteration: iter,
            view: vi,
            patch: format!(
                "x0={} y0={} w={} h={}",
                problem.patch.x0, problem.patch.y0, problem.patch.pw, problem.patch.ph
            ),
            reason,
        };
        let fwd = problem
            .forward(&self.params)
            .map_err(|e| abort(e.to_string()))?;
        let breakdown = fwd.breakdown;
        if ![
            breakdown.nerf,
            breakdown.con,
            breakdown.st,
            breakdown.cc,
            breakdown.total,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return Err(abort(format!("non-finite loss {breakdown:?}")));
        }
        let grads = problem.backward(&self.params, &fwd);
        let lr = lr_at(iter, &cfg);
        let field_cfg = self.field_cfg;
        adam_step(&mut self.params, &grads, &mut self.adam, lr, |n| {
            cfg.is_frozen(&field_cfg, n)
        })
        .map_err(|e| abort(e.to_string()))?;
        self.iteration += 1;
        Ok(LogEntry {
            iter,
            lr,
            loss: breakdown,
        })
    }

    /// Trains until `train_cfg.iters`, reporting every log line and
    /// checkpoint to `observer`. Returns the log of this call.
    pub fn run(
        &mut self,
        views: &[TrainView],
        observer: &mut dyn TrainObserver,
    ) -> Result<Vec<LogEntry>> {
        for v in views {
            v.check()?;
        }
        let mut log = Vec::new();
        while !self.done() {
            let entry = self.step(views)?;
            observer.on_log(&entry)?;
            log.push(entry);
            let every = self.train_cfg.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) && !self.done() {
                observer.on_checkpoint(&self.checkpoint())?;
            }
        }
        observer.on_checkpoint(&self.checkpoint())?;
        Ok(log)
    }
}
