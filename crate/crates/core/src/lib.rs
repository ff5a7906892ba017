//! Modality-balanced query–video bi-encoders at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`numcore`]: dense tensors and a reverse-mode gradient tape
//! * [`encoders`]: query/text/vision encoders and the attention fusion module
//! * [`losses`]: in-batch contrastive objectives, modality-shuffled negatives,
//!   the visual-relevance margin and the R_vt diagnostic
//! * [`datagen`]: a synthetic corpus with a controllable text-shortcut bias
//! * [`metrics`] and [`retrieval`]: exact top-K search and ranking metrics
//! * [`harness`]: training, evaluation, diagnostics and variant ablation

mod codec;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod retrieval;

pub use error::{MbvrError, Result};
pub use numcore::{Tape, Tensor, Var};
