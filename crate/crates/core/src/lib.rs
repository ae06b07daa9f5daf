//! Tri-modal (audio, video, text) contrastive pre-training on a small
//! reverse-mode autodiff engine, plus the data pipeline, optimiser,
//! training loop and linear-probe evaluation around it.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod ltf;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, OpKind, Var};
pub use checkpoint::{Archive, Checkpoint};
pub use config::Config;
pub use data::{Dataset, Split, SyntheticConfig};
pub use encoders::{EmbeddingSet, EncoderStack, Modality, ModalityFeatures, ModelConfig, Space};
pub use error::{Error, Result};
pub use eval::{EvalReport, ProbeHead, ProbeMode};
pub use losses::{LossBreakdown, LossConfig, NceForm, Term};
pub use tensor::Tensor;
pub use train::Trainer;
