//! Scenario-based validation of semantic segmentation models against an
//! operational design domain (ODD).
//!
//! Scenes are split into instance regions, each region is summarized by a
//! style vector, and per-category clusters of those vectors become named
//! concepts (sunny, night, snow, ...). Re-rendering a test set with concept
//! styles yields condition suites and transition sweeps whose IoU scores are
//! checked against per-condition thresholds.

pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod hash;
pub mod json;
pub mod pipeline;
pub mod registry;
pub mod render;
pub mod scene;
pub mod store;
pub mod style;
pub mod sweep;

pub use config::Config;
pub use error::{AdapterError, Error, Result};
pub use eval::{iou_from_matrix, BaselineModel, ConfusionMatrix, IouReport, ModelAdapter, Segmenter};
pub use pipeline::Workspace;
pub use registry::{Category, CategoryRegistry};
pub use render::{render, render_transition, RenderParams};
pub use scene::{InstanceRegion, Scene, SceneImage, SemanticMask};
pub use store::{Store, Verdict, VerdictKind};
pub use style::{StyleAssignment, StyleCatalog, StyleSpace, StyleVector};
pub use sweep::{ComplianceReport, ConditionSpec, OddSpec, SuiteResults, SweepResult};
