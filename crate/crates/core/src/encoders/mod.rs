//! Tokenization, encoders, and the DE/CE scorers.

pub mod checkpoint;
pub mod models;
pub mod transformer;
pub mod vocab;

pub use checkpoint::{
    checkpoint_kind, from_checkpoint_bytes, load_checkpoint, save_checkpoint, to_checkpoint_bytes, Checkpointable,
};
pub use models::{
    build_joint_input, de_score, dual_pool, dual_pool_backward, project, single_input, Affine,
    CeHead, CeModel, DeModel, DualEncoder, DualPoolOutput, JointInput, Projection,
};
pub use transformer::{pool, pool_backward, Encoder, EncoderConfig, Forward, PoolingKind};
pub use vocab::{detokenize, tokenize, TokenSequence, Vocab, CLS, MASK, PAD, SEP, UNK, FIRST_WORD_ID};
