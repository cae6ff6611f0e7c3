//! Sensor-ablation framework for action-chunking imitation learning.
//!
//! One master dataset holds every sensor stream; a policy name such as
//! `WA-P` selects cameras and proprioceptive blocks, and the masking layer
//! derives that configuration's training data from the identical
//! demonstrations. The crate bundles the pieces needed to run such a sweep
//! end to end at desk scale:
//!
//! - [`tensor`]: reverse-mode autodiff engine and Adam.
//! - [`dataset`]: the binary master-dataset format.
//! - [`mask`]: policy-name grammar, configuration resolution, masking.
//! - [`model`]: the CVAE action-chunking transformer.
//! - [`env`]: a deterministic 2-D pick-and-place world with a scripted demonstrator.
//! - [`train`]: training, rollouts, chunk execution, ablation sweeps.
//! - [`report`]: Pareto flags, CSV and SVG output.

pub mod dataset;
pub mod env;
pub mod fsutil;
pub mod mask;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, Var};
