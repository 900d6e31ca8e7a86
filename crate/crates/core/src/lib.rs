//! Counterfactual counting harness for vision-language models.
//!
//! The crate is organised along the evaluation pipeline:
//!
//! - [`manifest`]: dataset schema, loading and validation.
//! - [`region`]: pixel annotations (Mask, BB, Mask-BB) to visual-token selections.
//! - [`attention`]: the logit-level attention modulation math, used as the
//!   reference oracle for inference sidecars.
//! - [`questions`]: open-ended / multiple-choice prompts and MCQ distractors.
//! - [`extract`]: numeric answer extraction, judge protocol, categorization.
//! - [`config`]: modulation configurations, their label grammar and sweep grids.
//! - [`client`]: wire protocol and inference backends (sidecar, chat, replay).
//! - [`sweep`]: scheduled, checkpointed evaluation runs and best-config selection.
//! - [`metrics`]: per-category reports, deltas, convergence and attention curves.
//! - [`cli`]: the `cfcount` command-line workflows.

pub mod attention;
pub mod cli;
pub mod client;
pub mod config;
pub mod extract;
pub mod manifest;
pub mod metrics;
pub mod questions;
pub mod region;
pub mod sweep;

pub use config::{LayerGroup, ModulationConfig, RegionKind};
pub use manifest::{Category, ImageKind, InstanceRecord, Manifest};
