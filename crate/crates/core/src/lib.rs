//! Online performance prediction for semantic segmentation.
//!
//! The auxiliary depth output of a perception stack is scored against sparse
//! (LiDAR-style) ground truth, the resulting depth accuracy is mapped to a
//! predicted segmentation mIoU through a calibrated quadratic, and predictions
//! can be averaged over a window of frames to trade latency for precision.
//!
//! Modules:
//! - [`frameio`]: raster types and KITTI-convention PNG IO
//! - [`metrics`]: segmentation, depth, correlation and loss metrics
//! - [`perturb`]: strength-normalized input perturbations
//! - [`regress`]: accuracy-to-mIoU regression
//! - [`timeagg`]: temporal aggregation and decision latency
//! - [`synthmodel`]: procedural scenes and a degradable synthetic perceiver
//! - [`pipeline`]: in-memory orchestration shared by the CLI
//! - [`samples`]: CSV and JSON Lines record formats

pub mod error;
pub mod frameio;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod regress;
pub mod samples;
pub mod seed;
pub mod synthmodel;
pub mod timeagg;

pub use error::{Error, Result};
