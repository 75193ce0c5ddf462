//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function over [`Tensor`](crate::tensor::Tensor)
//! values; graph recording lives in [`crate::graph`] and [`crate::tape`].

pub mod codebook;
pub mod conv;
pub mod layout;
pub mod norm;
pub mod pointwise;

pub use codebook::{assignment_weights, codebook_aggregate};
pub use conv::{conv2d_forward, ConvGeometry};
pub use layout::{concat_channels, mean_axis, to_channels_first, to_channels_last, upsample_nearest2x};
pub use norm::{batch_norm_forward, group_norm_forward, DEFAULT_EPS};
pub use pointwise::{
    activation_forward, channel_broadcast_mul, elementwise, linear_forward, scale_samples, softmax_forward,
    Activation, Binary,
};
