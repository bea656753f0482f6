//! The non-CDC layers: 3D convolution, max pooling, relu, dropout and the
//! frame-wise softmax loss.

pub mod activation;
pub mod conv3d;
pub mod pool;
pub mod softmax;
pub mod upsample;

pub use activation::{dropout, dropout_backward, relu, relu_backward, DropoutMask, DropoutMode};
pub use conv3d::{
    conv3d_backward, conv3d_backward_with, conv3d_forward, conv3d_forward_with,
    conv3d_param_grads_with, Conv3dGrads, Conv3dSpec, ConvKernel,
};
pub use pool::{
    maxpool3d_backward, maxpool3d_forward, maxpool3d_forward_ext, maxpool_spatial_backward,
    maxpool_spatial_forward, PoolRecord,
};
pub use softmax::{framewise_softmax, softmax_loss, softmax_loss_grad, FrameLabels, ScoreMatrix};
pub use upsample::{temporal_repeat, temporal_repeat_backward};
