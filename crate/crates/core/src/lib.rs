// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept bottleneck classifier whose concept scores are fused from a
//! spatial saliency branch, so every prediction comes with concept-level and
//! class-level saliency maps.
//!
//! The pipeline is split the same way the code is:
//!
//! - [`dataset`]: synthetic shapes with per-concept masks, plus the on-disk format.
//! - [`encoders`]: frozen toy backbone and concept prototypes.
//! - [`model`]: the saliency head, the linear-probe baseline and Grad-CAM.
//! - [`losses`]: training objectives with analytic gradients.
//! - [`metrics`]: accuracy, NEC, overlap and masking-based faithfulness metrics.
//! - [`intervention`]: concept-replacement policies and task-error curves.
//! - [`trainer`]: config, optimizer, checkpoints, evaluation and ablation sweeps.
//! - [`cli`]: the `slcbm` command line tool.

pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod intervention;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
