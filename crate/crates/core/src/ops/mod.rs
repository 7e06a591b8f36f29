//! Primitive neural-network operations over NCHW tensors.
//!
//! Each forward operation is a pure function; operations with parameters or
//! non-trivial adjoints come with an explicit backward function used by the
//! gradient tape.

mod conv;
mod elem;
mod norm;
mod resize;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weights, ConvSpec};
pub use elem::{
    add, broadcast_kind, channel_mean, channel_mean_backward, channel_slice, concat_channels, global_avg_pool,
    global_avg_pool_backward, mul_broadcast, mul_broadcast_backward, relu, relu_backward,
    split_by_channels, split_channels, sum_all, BroadcastKind,
};
pub use norm::{
    batch_moments, batch_norm, batch_norm_backward, batch_norm_infer, batch_norm_train,
    update_running, BatchNormState, BnMode, BnSaved,
};
pub use resize::{bilinear_upsample_x2, bilinear_upsample_x2_backward};
