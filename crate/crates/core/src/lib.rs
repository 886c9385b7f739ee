//! Learning-based scheduling of multi-class jobs onto server classes with
//! bilinear mean rewards.

pub mod alloc;
pub mod bandit;
pub mod bounds;
pub mod distributed;
pub mod error;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod scenario;
pub mod sim;
pub mod table;
pub mod trace;

pub use error::{Error, Result};
pub use model::{
    vectorize_outer, Algorithm, BilinearEnvironment, JobClass, NoiseLaw, RewardModel,
    ServerClass, SystemConfig,
};
pub use scenario::{Scenario, SyntheticSpec};
