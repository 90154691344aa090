//! Sparse mixture-of-experts with a long-tailed distribution-aware router.
//!
//! Vision and language tokens share a routed expert pool. Load balancing is
//! applied to language tokens only, and high-variance vision "tail" tokens
//! are dispatched to more experts than the rest. A synthetic multimodal
//! world with a Zipf-distributed vision vocabulary drives training and the
//! routing statistics.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod moe;
pub mod optim;
pub mod routing;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::{parse_config, Arm, ExperimentConfig};
pub use data::{ConceptWorld, Modality, TokenBatch, WorldConfig};
pub use error::{Error, Result};
pub use moe::{MoeConfig, MoeLayer, RouterOutput};
pub use routing::{BalanceMode, TailSelector};
pub use metrics::{RouterRecord, RunStats};
pub use tensor::{Tensor, TensorError};
pub use train::{ablation_suite, run_experiment, AblationTable, TrainTrace};
