//! Task-conditioned mixture-of-experts transformer: noisy top-K task routers,
//! a task/expert mutual-information objective, per-task expert pruning, and
//! router fine-tuning, on a minimal reverse-mode f64 tensor engine.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mi;
pub mod model;
pub mod optim;
pub mod prune;
pub mod routing;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::ModSquadError;
pub use model::ModSquadModel;
