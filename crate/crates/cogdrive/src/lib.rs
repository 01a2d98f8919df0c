//! Multimodal trajectory prediction and safety-aware trajectory-tree planning
//! at desk scale.
//!
//! The pipeline: scenes (observed histories + map polylines) are encoded in
//! instance-centric frames, a small attention network predicts K joint future
//! hypotheses with per-step Gaussians, and a QP-based planner turns those into
//! a trajectory tree whose shared root is safe against every predicted mode.
//! A closed-loop harness replays scripted agents while the ego predicts and
//! replans online.

pub mod cli;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod modality;
pub mod planner;
pub mod prednet;
pub mod scene;
pub mod simloop;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{CogError, Result};
