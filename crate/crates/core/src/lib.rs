//! Self-supervised vision transformer with rotation and contrastive task
//! tokens, trained jointly on masked-image reconstruction, rotation
//! prediction and a normalised temperature-scaled contrastive loss.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod optim;
pub mod pretext;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, SiTModel, SiTOutput};
pub use tensor::{Real, Tensor};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Split};
pub use eval::EvalReport;
pub use gradsuite::{CheckResult, SuiteOptions};
pub use losses::{ContrastiveConfig, LossBreakdown, UncertaintyWeights};
pub use optim::{AdamConfig, AdamW, Schedule};
pub use pretext::{AugmentParams, CorruptionParams, PretextBatch, PretextParams};
pub use train::{EvalConfig, RunConfig, TaskFlags, Trainer, Weighting};
