//! Delta self-attention encoders, deep CCA fusion and staged training for
//! multimodal emotion recognition.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcca;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{AttentionConfig, ModelConfig, StageConfig, StagePlan, StageTag};
pub use data::{AlignMode, AlignedSample, Modality, ModalitySequence, EMOTIONS, NUM_CLASSES};
pub use error::{Error, Result};
pub use gradcheck::Parameters;
pub use metrics::MetricsReport;
pub use model::Pipeline;
pub use run::{DataSource, RunConfig};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
