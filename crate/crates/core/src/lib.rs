//! Contextual knowledge distillation (CKD) for transformer encoders.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: a small post-LN transformer encoder with a hand-written
//!   backward pass that accepts upstream gradients on logits, any hidden
//!   representation, attention maps and value vectors.
//! * [`relations`]: pair-wise distances, triple-wise angles and the
//!   locality-windowed kernel that evaluates them in `O(δ·n·d)` memory.
//! * [`distill`]: word-relation (WR) and layer-transforming-relation (LTR)
//!   objectives, logit distillation, layer alignment and the combined loss.
//! * [`baselines`]: DistilBERT/PKD/TinyBERT/MiniLM objectives and the
//!   architectural compatibility checker.
//! * [`adaptive`]: importance estimation, rewiring and adaptive width/depth
//!   training with CKD.
//! * [`optim`], [`gradcheck`]: optimizer and finite-difference checking.

pub mod adaptive;
pub mod baselines;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod relations;

pub use error::{Error, Result, Violation};
