use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-timestep patient pose width: position (3) + orientation quaternion (4).
pub const INPUT_DIM: usize = 7;
/// Robot target width: end-effector position (3) + velocity (3).
pub const OUTPUT_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LstmOnly,
    TransformerOnly,
    LstmEncoderDecoder,
    LstmTransformer,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::LstmOnly,
        Architecture::TransformerOnly,
        Architecture::LstmEncoderDecoder,
        Architecture::LstmTransformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::LstmOnly => "lstm_only",
            Architecture::TransformerOnly => "transformer_only",
            Architecture::LstmEncoderDecoder => "lstm_encoder_decoder",
            Architecture::LstmTransformer => "lstm_transformer",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Architecture::LstmOnly => "LSTM",
            Architecture::TransformerOnly => "Transformer",
            Architecture::LstmEncoderDecoder => "LSTM-Encoder-Decoder",
            Architecture::LstmTransformer => "LSTM-Transformer",
        }
    }

    pub fn uses_lstm(&self) -> bool {
        !matches!(self, Architecture::TransformerOnly)
    }

    pub fn uses_transformer(&self) -> bool {
        matches!(self, Architecture::TransformerOnly | Architecture::LstmTransformer)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub window_p: usize,
    pub lstm_hidden: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub mlp_layers: Vec<usize>,
    pub architecture: Architecture,
    pub transformer_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: INPUT_DIM,
            window_p: 16,
            lstm_hidden: 64,
            attn_heads: 4,
            attn_dim: 64,
            ffn_dim: 128,
            mlp_layers: vec![64, 32, OUTPUT_DIM],
            architecture: Architecture::LstmTransformer,
            transformer_blocks: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_p", self.window_p),
            ("lstm_hidden", self.lstm_hidden),
            ("attn_heads", self.attn_heads),
            ("attn_dim", self.attn_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_dim != INPUT_DIM {
            return Err(Error::Config(format!("input_dim must be {INPUT_DIM}, got {}", self.input_dim)));
        }
        if self.attn_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} not divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.mlp_layers.contains(&0) {
            return Err(Error::Config("mlp_layers widths must be positive".into()));
        }
        if self.mlp_layers.last() != Some(&OUTPUT_DIM) {
            return Err(Error::Config(format!("last mlp layer must have width {OUTPUT_DIM}")));
        }
        if self.architecture.uses_transformer() && self.transformer_blocks == 0 {
            return Err(Error::Config("transformer_blocks must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.attn_heads
    }

    /// Width of the pooled feature fed into the MLP head.
    pub fn feature_dim(&self) -> usize {
        if self.architecture.uses_transformer() {
            self.attn_dim
        } else {
            self.lstm_hidden
        }
    }

    pub fn with_architecture(&self, architecture: Architecture) -> Self {
        Self {
            architecture,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_head_width() {
        let mut c = ModelConfig {
            attn_dim: 10,
            attn_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.attn_dim = 12;
        c.validate().unwrap();
        c.mlp_layers = vec![8, 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
        }
        assert!("gru".parse::<Architecture>().is_err());
    }
}
