//! Convolutional + bidirectional-LSTM decoder written from scratch.

pub mod checkpoint;
pub mod layers;
pub mod lstm;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use layers::{
    batchnorm_forward, conv1d_forward, dense_forward, maxpool1d, minmax_scale, mse_loss, relu,
    sigmoid, BatchNormParams, Conv1dParams, DenseParams,
};
pub use lstm::{bilstm_forward, lstm_step, LstmParams};
pub use network::{Architecture, ForwardPass, Network, Params, TENSOR_NAMES};
pub use optim::{PlateauSchedule, RmsProp};
pub use tensor::{Mat, Tensor};
pub use train::{
    evaluate_mse, fit_model, plateau_lr, BnStats, EpochRecord, Samples, TrainConfig, TrainReport,
};

use crate::codec::{decode_label, Frame, DEFAULT_THRESHOLD};
use crate::error::Result;
use crate::physics::Spectrum;

/// Min-max scales the spectrum, runs inference and thresholds the outputs.
pub fn predict_bits(net: &Network, spectrum: &Spectrum) -> Result<Frame> {
    let raw = net.scores(&spectrum.samples)?;
    Ok(decode_label(&raw, DEFAULT_THRESHOLD))
}
