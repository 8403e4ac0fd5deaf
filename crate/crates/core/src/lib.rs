//! Task-agnostic continual segmentation with a model pool that grows when
//! batch-norm features drift away from every model's training history.

pub mod baselines;
pub(crate) mod codec;
pub mod error;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod oodgate;
pub mod pool;
pub mod sample;
pub mod stream;

pub use error::{OdexError, Result};
pub use learner::{FeatureVector, Learner, LearnerConfig};
pub use pool::{ModelPool, Strategy};
pub use sample::{Image, Mask, Sample};
