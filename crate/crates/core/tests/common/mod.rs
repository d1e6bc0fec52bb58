use std::sync::OnceLock;

use fjl_core::kinematics::{generate_dataset, DatagenConfig, Dataset};
use fjl_core::model::{Architecture, ModelConfig};

/// Four short patients over every exercise; a few thousand windows.
pub fn small_dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = DatagenConfig {
            n_patients: 4,
            duration_s: 4.0,
            window_p: 4,
            stride: 4,
            record_robot_state: false,
            ..DatagenConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    })
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        window_p: 4,
        lstm_hidden: 8,
        attn_heads: 2,
        attn_dim: 8,
        ffn_dim: 12,
        mlp_layers: vec![8, 6],
        ..ModelConfig::default()
    }
    .with_architecture(Architecture::LstmTransformer)
}
