//! Sidewalk imitation-learning toolkit.
//!
//! The crate covers the whole offline pipeline on synthetic sidewalk worlds:
//! scenario generation and ray-cast rendering ([`scenegen`]), dataset curation
//! ([`curation`]), corrective-behavior and relighting expansion ([`expansion`]),
//! horizon-specific K-means anchors ([`anchors`]), a small policy network with
//! its own reverse-mode autodiff ([`policynet`]), multi-scale supervision and
//! training ([`supervision`]) and open-loop metrics ([`metrics`]).
//! [`pipeline`] wires the stages together for the CLI and the acceptance suite.

pub mod anchors;
pub mod camgeom;
pub mod curation;
pub mod error;
pub mod expansion;
pub mod metrics;
pub mod pipeline;
pub mod policynet;
pub mod rng;
pub mod scenegen;
pub mod store;
pub mod supervision;
pub mod trajcore;

pub use anchors::AnchorSet;
pub use camgeom::{CameraModel, ColoredPointCloud, DepthFrame, RgbFrame};
pub use curation::{BehaviorLabel, Provenance, TrainingSample};
pub use error::{Error, Result};
pub use policynet::{PolicyConfig, PredictionBundle};
pub use trajcore::{EgoState, GoalEncoding, Pose, Trajectory};
