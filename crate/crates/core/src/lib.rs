//! Neural radiance fields with concealing fields for low-light scenes.
//!
//! The crate renders patches of a scene with a learned density/color field,
//! models the darkening of a low-light capture with a local (per-sample) and
//! a global (per-depth) concealing field, and trains both jointly so that
//! removing the concealing fields renders the scene under normal light.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod render;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use diff::{finite_difference_check, FdReport, GradStore, Objective, ParamStore};
pub use error::{Error, Result};
pub use field::{FieldConfig, THETA_G_INIT};
pub use geometry::{Camera, DepthRange, PatchCoords, Ray, SampleConfig};
pub use losses::{ColorConstancy, LossBreakdown, LossWeights};
pub use pipeline::PatchProblem;
pub use real::Real;
pub use render::{RenderMode, View};
pub use train::{lr_at, AdamState, LogEntry, TrainConfig, TrainView, Trainer};
