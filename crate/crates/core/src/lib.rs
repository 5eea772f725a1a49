//! Embedding-matching knowledge distillation for toy neural retrieval models.
//!
//! The crate trains small dual-encoder (DE) and cross-encoder (CE) teachers
//! on synthetic topical corpora, distills them into symmetric or asymmetric
//! DE students with score-based and embedding-matching losses, evaluates
//! retrieval and re-ranking quality, and checks the finite-sample
//! teacher-student risk inequalities numerically.

pub mod bounds;
pub mod datasim;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod numerics;
pub mod queryaug;
pub mod retrieval;

pub use error::{Error, Result};
pub use numerics::{Mat, Rng};
