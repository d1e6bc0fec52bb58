//! LSTM-Transformer pose estimator and the baseline variants it is compared with.

mod config;
mod network;
mod params;

pub use config::{Architecture, ModelConfig, INPUT_DIM, OUTPUT_DIM};
pub use network::{
    encode_window, ffn_residual, forward, linear, lstm_step, position_encoding, predict_batch,
    transformer_block, windows_tensor, BlockOutput, LstmState, LstmWeights, LAYER_NORM_EPS,
};
pub use params::{layout_hash, param_specs, BoundParams, ModelParams, ParamSpec};
