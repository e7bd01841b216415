//! The gated attention MIL model.
//!
//! Pluggable patch encoders (frozen embedding files or a trainable toy
//! encoder), the projection/attention/classifier trunk, parameter
//! initialization, and the binary embedding/checkpoint file formats.

mod checkpoint;
mod embed;
mod forward;
mod linalg;
mod params;
mod toy;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use embed::{patch_key, read_embeddings, write_embeddings, EmbeddingFile};
pub use forward::{
    forward_patch, forward_slide, predict_patterns, relu_pattern, Bag, DropoutMode, SlideForward,
    DROPOUT_P,
};
pub(crate) use forward::{forward_trace, Trace};
pub use linalg::{log_sum_exp, softmax, Affine, Matrix, Real};
pub use params::{
    init_params, EncoderMode, EncoderSpec, GradAccumulator, Gradients, MilParams, ATTN_HIDDEN,
    ATTN_IN, CLASSES, HEAD_HIDDEN, PROJ_DIM, TOY_C1, TOY_C2,
};
pub use toy::{toy_backward, toy_forward, FeatureMap, ToyCache};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty bag")]
    EmptyBag,
    #[error("expected a singleton bag, found {found} items")]
    NotSingleton { found: usize },
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("bag kind does not match the encoder mode; expected {expected}")]
    WrongBagKind { expected: &'static str },
    #[error("non-finite values in tensor {tensor}")]
    NonFinite { tensor: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },
}
