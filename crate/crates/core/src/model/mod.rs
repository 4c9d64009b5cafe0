//! Transformer encoder with exact manual forward and backward passes.
//!
//! Conventions: matrices are `features × tokens`, so column `i` is token `i`.
//! Blocks are post-LN (`LN(x + MHA(x))`, then `LN(y + FFN(y))`) with a
//! tanh-approximated GELU. The classifier reads the final representation of
//! position 0.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod params;

pub use backward::{backward, Gradients, StateGrads};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use forward::{
    attention_head, embed, encoder_forward, forward, Example, HeadOutput, HeadParams, LayerStates,
    LayerWidth, Structure, TokenSequence,
};
pub use params::{LayerParams, ParamSet};

pub(crate) use backward::softmax_columns_backward;
pub(crate) use forward::masked_softmax_columns;
