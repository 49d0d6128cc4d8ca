//! Minimal dense tensors with reverse-mode differentiation, enough to train
//! small transformers and MLPs on a CPU.

mod attention;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use attention::{
    chunked_attention_weights, chunked_intersample_attention, feature_attention, intersample_attention,
    multi_head_attention, scaled_dot_product, AttentionVars,
};
pub use gradcheck::check_gradients;
pub use graph::{sigmoid, BatchStats, Graph, Var, NORM_EPS};
pub use params::{normal, xavier_normal, Adam, Bound, ParamId, ParamStore};
pub use tensor::Tensor;
