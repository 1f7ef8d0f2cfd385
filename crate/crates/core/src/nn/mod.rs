//! Dense-tensor neural layers with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients into a shared [`ParamStore`]. There is no
//! autograd graph: layers are composed in a fixed sequence by the caller.

mod adam;
mod attention;
mod batchnorm;
mod checkpoint;
mod conv;
mod dense;
pub mod gradcheck;
mod loss;
mod lstm;
mod params;
mod pool;
mod reshape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{self_attention, self_attention_backward, SelfAttention};
pub use batchnorm::{batchnorm3d, batchnorm3d_backward, BatchNorm3d, BnCache, RunningStats};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use conv::{conv3d_backward, conv3d_forward, Conv3d, Conv3dGeometry};
pub use dense::Dense;
pub use loss::{one_hot, softmax, softmax_cross_entropy};
pub use lstm::{bilstm_forward, lstm_step, BiLstm, LstmParams};
pub use params::{Param, ParamId, ParamStore};
pub use pool::{avgpool3d, avgpool3d_backward, maxpool3d, maxpool3d_backward, AvgPool3d, MaxPool3d, PoolGeometry};
pub use reshape::{FlattenSteps, MeanOverTime, Relu};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub trait Layer: Send {
    fn name(&self) -> &str;

    /// Output shape for a given input shape, without running the layer.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn forward(&mut self, store: &mut ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Adds parameter gradients into `store` and returns the gradient with
    /// respect to the input of the most recent `forward` call.
    fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor>;
}
