use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use unveil_core::data::synth::{
    synthesize, write_synthetic, DarkenMode, SyntheticSceneSpec, NORMAL_DIR,
};
use unveil_core::data::{load_dataset, write_image, Image, PosedImage, Split};
use unveil_core::eval::evaluate;
use unveil_core::pipeline::verification_problem;
use unveil_core::render::render_image;
use unveil_core::train::TrainObserver;
use unveil_core::{
    finite_difference_check, load_checkpoint, save_checkpoint, Checkpoint, FieldConfig, LogEntry,
    ParamStore, Real, RenderMode, TrainConfig, TrainView, Trainer, View,
};

use crate::config::{init_threads, ConfigFlags, RunConfig};
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RENDER_DIR: &str = "renders";
/// Iterations between console summaries during training.
pub const SUMMARY_EVERY: usize = 100;

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DarkenKind {
    /// Uniform concealing factors applied while rendering.
    Field,
    /// Gain and gamma applied to the normal-light image.
    Gamma,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene description (JSON or TOML); a random scene is drawn otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Seed of the random scene.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blob count of the random scene.
    #[arg(long)]
    pub blobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = DarkenKind::Field)]
    pub darken: DarkenKind,
    /// Local concealing factor per training-spacing sample.
    #[arg(long, default_value_t = 0.88)]
    pub omega: f64,
    /// Global concealing factor per training-spacing sample.
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gain: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn read_scene_spec(path: &Path) -> Result<SyntheticSceneSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read scene spec {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    init_threads(args.threads)?;
    let spec = match &args.spec {
        Some(path) => {
            if args.seed.is_some() || args.blobs.is_some() {
                return Err(CliError::config(
                    "--seed and --blobs only apply without --spec",
                ));
            }
            read_scene_spec(path)?
        }
        None => SyntheticSceneSpec::random(args.blobs.unwrap_or(3), args.seed.unwrap_or(0)),
    };
    let darken = match args.darken {
        DarkenKind::Field => DarkenMode::FieldConceal {
            omega: args.omega,
            theta: args.theta,
        },
        DarkenKind::Gamma => DarkenMode::ImageGamma {
            gain: args.gain,
            gamma: args.gamma,
        },
    };
    let out = synthesize(&spec, darken)?;
    write_synthetic(&args.out, &spec, darken, &out)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", args.out.display())))?;
    println!(
        "wrote {} views ({}x{}) to {}, normal-light copies in {}",
        out.lowlight.len(),
        spec.width,
        spec.height,
        args.out.display(),
        args.out.join(NORMAL_DIR).display()
    );
    if out.clipped {
        println!("warning: darkening clipped some values to [0, 1]");
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run name; the run directory is `<runs-dir>/<name>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Continue from a checkpoint. Its stored configuration replaces the
    /// field and training sections.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress the periodic console summary.
    #[arg(long)]
    pub quiet: bool,
}

pub fn train_views(images: &[PosedImage]) -> Vec<TrainView> {
    images
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| TrainView {
            view: View {
                camera: p.camera,
                range: p.range,
            },
            image: p.image.data.clone(),
        })
        .collect()
}

struct RunObserver {
    log: BufWriter<File>,
    ckpt_dir: PathBuf,
    quiet: bool,
    iters: usize,
    start: Instant,
    acc: [f64; 5],
    count: usize,
}

impl TrainObserver for RunObserver {
    fn on_log(&mut self, e: &LogEntry) -> unveil_core::Result<()> {
        writeln!(self.log, "{}", e.to_csv())?;
        let l = &e.loss;
        for (a, v) in self
            .acc
            .iter_mut()
            .zip([l.nerf, l.con, l.st, l.cc, l.total])
        {
            *a += v;
        }
        self.count += 1;
        let done = e.iter + 1;
        if done.is_multiple_of(SUMMARY_EVERY) || done == self.iters {
            if !self.quiet {
                let n = self.count as f64;
                let [nerf, con, st, cc, total] = self.acc.map(|v| v / n);
                println!(
                    "iter {done}/{} lr {:.3e} nerf {nerf:.4e} con {con:.4e} st {st:.4e} cc {cc:.4e} total {total:.4e} ({:.1}s)",
                    self.iters,
                    e.lr,
                    self.start.elapsed().as_secs_f64()
                );
            }
            self.acc = [0.0; 5];
            self.count = 0;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> unveil_core::Result<()> {
        self.log.flush()?;
        save_checkpoint(&self.ckpt_dir.join(checkpoint_name(ckpt.iteration)), ckpt)
    }
}

/// Rewrites `path` keeping the header and the entries of iterations
/// before `iteration`, so a resumed run appends where the checkpoint was
/// taken.
fn truncate_log(path: &Path, iteration: usize) -> Result<(), CliError> {
    let mut kept = vec![LogEntry::HEADER.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let iter: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
            if iter.is_some_and(|i| i < iteration) {
                kept.push(line);
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::resolve(RunConfig::default(), &args.flags)?;
    if let Some(name) = &args.name {
        cfg.name = name.clone();
    }
    if let Some(dir) = &args.runs_dir {
        cfg.runs_dir = dir.clone();
    }
    if let Some(data) = &args.data {
        cfg.data = Some(data.clone());
    }
    cfg.validate()?;
    init_threads(cfg.threads)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            cfg.field = ckpt.field_cfg;
            cfg.train = ckpt.train_cfg;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg.field, cfg.train)?,
    };
    let data = cfg.data.clone().ok_or_else(|| {
        CliError::config("no dataset given (--data or `data` in the config file)")
    })?;
    let images = load_dataset(&data)?;
    let views = train_views(&images);
    if views.is_empty() {
        return Err(CliError::data(format!(
            "{} has no training frames",
            data.display()
        )));
    }

    let run_dir = cfg.run_dir();
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", ckpt_dir.display())))?;
    std::fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let log_path = run_dir.join(LOG_FILE);
    truncate_log(&log_path, trainer.iteration)?;
    let log = BufWriter::new(File::options().append(true).open(&log_path)?);

    if !args.quiet {
        println!(
            "training {} views for {} iterations (from {}), run dir {}",
            views.len(),
            cfg.train.iters,
            trainer.iteration,
            run_dir.display()
        );
    }
    let mut observer = RunObserver {
        log,
        ckpt_dir,
        quiet: args.quiet,
        iters: cfg.train.iters,
        start: Instant::now(),
        acc: [0.0; 5],
        count: 0,
    };
    trainer.run(&views, &mut observer)?;
    observer.log.flush()?;
    let final_path = run_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    if !args.quiet {
        println!("final checkpoint {}", final_path.display());
    }
    Ok(final_path)
}

// ---------------------------------------------------------------- render

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

impl SplitChoice {
    fn accepts(self, split: Split) -> bool {
        match self {
            SplitChoice::Train => split == Split::Train,
            SplitChoice::Val => split == Split::Val,
            SplitChoice::Test => split == Split::Test,
            SplitChoice::All => true,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset providing the poses; defaults to the one recorded in the
    /// run directory of the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// `normal` removes the concealing fields, `lowlight` keeps them.
    #[arg(long, default_value = "normal")]
    pub mode: RenderMode,
    /// Output directory; defaults to `<run dir>/renders/<mode>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Render in 64-bit floating point.
    #[arg(long = "f64")]
    pub f64: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// The run directory holding `checkpoint`, if it follows the layout
/// written by `train`.
fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    [parent, parent.parent()?]
        .into_iter()
        .find(|d| d.join(CONFIG_FILE).is_file())
        .map(Path::to_path_buf)
}

fn render_as<T: Real>(
    params: &ParamStore<f32>,
    field_cfg: &FieldConfig,
    view: &View,
    mode: RenderMode,
) -> Result<Image, CliError> {
    let p: ParamStore<T> = params.cast();
    let r = render_image(&p, field_cfg, view, mode)?;
    let data = r.rgb.iter().map(|v| v.as_f64() as f32).collect();
    Ok(Image::new(view.camera.width, view.camera.height, data)?)
}

pub fn cmd_render(args: &RenderArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    unveil_core::field::check_layout(&ckpt.field_cfg, &ckpt.params)?;
    let run_dir = run_dir_of(&args.checkpoint);
    let data = match (&args.data, &run_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(rd)) => {
            let defaults = RunConfig::default();
            crate::config::load_over(&defaults, &rd.join(CONFIG_FILE))?
                .data
                .ok_or_else(|| CliError::config("run config names no dataset; pass --data"))?
        }
        (None, None) => return Err(CliError::config("no dataset given (--data)")),
    };
    let out = match (&args.out, &run_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(rd)) => rd.join(RENDER_DIR).join(args.mode.to_string()),
        (None, None) => return Err(CliError::config("no output directory given (--out)")),
    };
    let frames: Vec<PosedImage> = load_dataset(&data)?
        .into_iter()
        .filter(|p| args.split.accepts(p.split))
        .collect();
    if frames.is_empty() {
        return Err(CliError::data(format!(
            "{} has no frames in the requested split",
            data.display()
        )));
    }
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    for frame in &frames {
        let view = View {
            camera: frame.camera,
            range: frame.range,
        };
        let img = if args.f64 {
            render_as::<f64>(&ckpt.params, &ckpt.field_cfg, &view, args.mode)?
        } else {
            render_as::<f32>(&ckpt.params, &ckpt.field_cfg, &view, args.mode)?
        };
        write_image(&out.join(format!("{}.png", frame.name)), &img)?;
    }
    println!(
        "rendered {} {} views to {}",
        frames.len(),
        args.mode,
        out.display()
    );
    Ok(out)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Directory of rendered PNG images.
    #[arg(long)]
    pub renders: PathBuf,
    /// Directory of ground-truth PNG images with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory for `<label>.csv`; nothing is written when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub label: String,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<unveil_core::eval::EvalReport, CliError> {
    let report = evaluate(&args.renders, &args.gt, &args.label)?;
    for row in &report.rows {
        println!("{} psnr {:.3} ssim {:.4}", row.name, row.psnr, row.ssim);
    }
    println!("{}", report.summary());
    if let Some(dir) = &args.out {
        report.write(dir, &args.label)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- checkgrad

#[derive(Debug, Clone, clap::Args)]
pub struct CheckgradArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Trunk width of the verification network.
    #[arg(long)]
    pub width: Option<usize>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Largest accepted relative error; larger errors exit with code 4.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

/// Defaults of the verification problem: a 2x2 patch, 3 samples per ray
/// and an 8-wide trunk, everything else as in training.
pub fn checkgrad_defaults() -> RunConfig {
    RunConfig {
        field: FieldConfig {
            trunk_width: 8,
            n_samples: 3,
            ..FieldConfig::default()
        },
        train: TrainConfig {
            patch_w: 2,
            patch_h: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

pub fn cmd_checkgrad(args: &CheckgradArgs) -> Result<unveil_core::FdReport, CliError> {
    let mut cfg = RunConfig::resolve(checkgrad_defaults(), &args.flags)?;
    if let Some(w) = args.width {
        cfg.field.trunk_width = w;
    }
    cfg.validate()?;
    init_threads(cfg.threads)?;
    let t = &cfg.train;
    let (problem, params) = verification_problem(
        cfg.field,
        t.weights,
        t.color_mode,
        t.patch_w,
        t.patch_h,
        t.seed,
    )?;
    let report = finite_difference_check(&problem, &params, args.epsilon)?;
    for (name, err) in &report.per_param {
        println!("{name} {err:.3e}");
    }
    let ok = report.max_rel_error < args.tolerance;
    println!(
        "max_rel_error {:.3e} worst {}[{}] params {} status {}",
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        params.num_scalars(),
        if ok { "ok" } else { "fail" }
    );
    if !ok {
        return Err(CliError {
            kind: crate::error::ErrorKind::Numeric,
            message: format!(
                "gradient check failed: {:.3e} >= {:e} at {}[{}]",
                report.max_rel_error, args.tolerance, report.worst_param, report.worst_index
            ),
        });
    }
    Ok(report)
}
