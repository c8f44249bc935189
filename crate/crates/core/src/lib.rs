//! One-pass multi-task volumetric segmentation.
//!
//! A single shared-backbone 3D network with three task heads performs
//! coarse-to-fine tumor segmentation in one forward pass, trained with a
//! staged curriculum and online data transfer between tasks. Cross-task
//! guided attention recalibrates feature channels from the preceding task's
//! detached predictions. The crate also ships overlap-tile inference, cascade
//! fusion, connected-component post-processing, evaluation metrics, and a
//! synthetic phantom generator for end-to-end runs.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod postproc;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{OmError, Result};
