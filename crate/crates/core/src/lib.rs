//! Global structure-from-motion from verified keypoint matches.
//!
//! The pipeline estimates per-camera distortion and focal length, global
//! rotations and camera centers, refines them with a re-weighted epipolar
//! adjustment and finally triangulates a sparse point cloud. Every stage is
//! a first-order or brute-force search method; there is no bundle
//! adjustment.
//!
//! Stage order (see [`pipeline::run`]):
//!
//! 1. [`distortion`] division-model interval search per camera
//! 2. [`focal`] singular-value voting over field-of-view candidates
//! 3. [`twoview`] relative pose decomposition in calibrated coordinates
//! 4. [`rotation`] pair filtering, column-wise initialization, geodesic refinement
//! 5. [`tracks`] connected components and track completion
//! 6. [`translation`] relative direction re-estimation and L1 center alignment
//! 7. [`epipolar`] IRLS epipolar adjustment with outlier pruning
//! 8. [`reconstruct`] pairwise triangulation and filtering
//!
//! [`synth`] generates scenes with ground truth and [`metrics`] scores
//! estimated poses against it.

pub mod config;
pub mod distortion;
pub mod epipolar;
pub mod error;
pub mod focal;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reconstruct;
pub mod rotation;
pub mod synth;
pub mod tracks;
pub mod translation;
pub mod twoview;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use model::{CameraModel, MatchSet, PoseState, Rotation3, SceneModel};
pub use nalgebra;
