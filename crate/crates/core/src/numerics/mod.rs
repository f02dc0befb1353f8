//! Dense tensors, a reverse-mode tape, attention blocks and Adam.

mod adam;
mod attention;
mod gradcheck;
mod kernels;
mod mask;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, adam_update};
pub use attention::{
    BlockParams, LAYER_NORM_EPS, masked_multi_head_attention, multi_head_mix, segment_block, segment_mix, transformer_block,
};
pub use gradcheck::{DEFAULT_FD_EPS, ParamCheck, gradient_check, gradient_check_params, relative_error};
pub use kernels::{compensated_sum, layer_normalize, log_sum_exp, softmax};
pub use mask::AttentionMask;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
