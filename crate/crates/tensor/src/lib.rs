//! Dense tensors with reverse-mode differentiation, sized for the
//! convolutional image-to-image networks in `phs-core`.

mod checkpoint;
mod conv;
mod element;
mod elementwise;
mod error;
mod gradcheck;
mod init;
mod norm;
mod optim;
mod resample;
mod tensor;

pub use checkpoint::{
    decode, encode, read_checkpoint, write_checkpoint, CheckpointHeader, NamedTensor, TensorEntry, FORMAT_VERSION,
    MAGIC,
};
pub use conv::{conv2d, conv_output_size, Padding};
pub use element::Element;
pub use elementwise::concat_channels;
pub use error::{Result, TensorError};
pub use gradcheck::fd_check;
pub use init::truncated_normal;
pub use norm::instance_norm;
pub use optim::{zero_grads, AdamConfig, AdamState};
pub use resample::{max_pool2, upsample_nn};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
