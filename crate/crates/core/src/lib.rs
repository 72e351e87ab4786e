//! Hierarchical recurrent decoding of motor-imagery EEG.
//!
//! A convolutional [`backbone`] turns a trial into a feature vector, the
//! [`mhsp`] stack slides windows over it and refines them through a
//! low-level and a high-level gated recurrent encoder for several
//! reasoning cycles, and the [`iue`] head scores each cycle so the
//! per-cycle logits can be aggregated and inference can stop early.
//! [`train`] holds the objective, optimizer and checkpointing, and
//! [`data`] the trial file format, leave-one-subject-out splits and a
//! synthetic generator.

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod experiment;
pub mod iue;
pub mod mhsp;
pub mod model;
pub mod numcore;
pub mod report;
pub mod train;

pub use error::{Error, Result};
