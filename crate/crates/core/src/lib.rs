//! Simulated+unlabeled refinement: a refiner network learns to make simulator
//! renders look like unlabeled "real" images while keeping their annotations,
//! trained against a patch-level discriminator fed from a history buffer.

pub mod error;
pub mod experiment;
pub mod grad;
pub mod harness;
pub mod nets;
pub mod objectives;
pub mod params;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{NetKind, NetParams};
pub use replay::ReplayBuffer;
pub use tensor::{Scalar, Tensor};
