//! Channel search over a conditional restoration super network.
//!
//! A controller maps a task vector to per-channel gates for every channel
//! selection site of the super network. Sites on which tasks agree form a
//! shared prefix whose features are computed once per image and reused across
//! every requested restoration effect.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod controller;
pub mod cost;
pub mod degrade;
mod error;
pub mod eval;
pub mod extract;
pub mod gradcheck;
pub mod imageconv;
pub mod kernels;
pub mod latency;
pub mod optim;
pub mod supernet;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use arch::{ArchSpec, SliceMode};
pub use autodiff::{Gradients, QuadraticForm, Tape, Var};
pub use controller::{ConsensusConfig, ConsensusState, Controller, ControllerConfig};
pub use cost::{ArchFlops, CostReport, Resolution};
pub use error::{Error, Result};
pub use extract::{ModulationModel, PreparedInput, PrunedNet};
pub use supernet::{SuperNet, SuperNetConfig};
pub use task::{TaskVector, TASK_DIM};
pub use tensor::{Scalar, Tensor};
pub use trainer::{SearchState, TrainConfig};
