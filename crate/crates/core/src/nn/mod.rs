//! Differentiable building blocks. Every forward op has a `*_cached`
//! variant returning the intermediates its `*_backward` counterpart needs.

pub mod attention;
pub mod layers;
pub mod lstm;

pub use attention::{
    multi_head_attention, scaled_dot_product_attention, softmax_rows, AttentionOutput,
    ProjectionWeights,
};
pub use layers::{feed_forward, positional_encoding, residual_layer_norm, LAYER_NORM_EPS};
pub use lstm::{lstm_step, temporal_embed, LstmWeights};
