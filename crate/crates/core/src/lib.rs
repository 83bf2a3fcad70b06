//! Compact convolutional EEG decoder with meta-learned initialisation,
//! data-quality screening and spectral probing of learned filters.

pub mod benchmark;
pub mod exec;
pub mod model;
pub mod probe;
pub mod quality;
pub mod seed;
mod serde_str;
pub mod synth;
pub mod task;
pub mod train;

pub use exec::Exec;
pub use model::{init_model, ModelConfig, ModelError, ModelParams};
pub use synth::{generate, SynthSpec, SynthSubject};
pub use task::{SubjectTask, TaskError};
pub use train::{Strategy, TrainConfig, TrainError};
