use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, INPUT_DIM};
use crate::digest::Fnv64;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape and initializer for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn weight(name: String, rows: usize, cols: usize, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![rows, cols],
        init: Init::Uniform { fan_in },
    }
}

fn vector(name: String, len: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![len],
        init,
    }
}

fn lstm_specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
    // Gates stacked as [input, forget, candidate, output].
    vec![
        weight(format!("{prefix}.w_ih"), 4 * hidden, input, input),
        weight(format!("{prefix}.w_hh"), 4 * hidden, hidden, hidden),
        vector(format!("{prefix}.b"), 4 * hidden, Init::Zeros),
    ]
}

fn linear_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        weight(format!("{prefix}.w"), input, output, input),
        vector(format!("{prefix}.b"), output, Init::Zeros),
    ]
}

/// Parameter layout for a config, in canonical (sorted-by-name) order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let arch = config.architecture;
    let h = config.lstm_hidden;
    let d = config.attn_dim;
    let mut specs = Vec::new();
    if arch.uses_lstm() {
        specs.extend(lstm_specs("lstm", INPUT_DIM, h));
    }
    if arch == super::Architecture::LstmEncoderDecoder {
        specs.extend(lstm_specs("dec", h, h));
    }
    if arch.uses_transformer() {
        let source = if arch.uses_lstm() { h } else { INPUT_DIM };
        if source != d || !arch.uses_lstm() {
            specs.extend(linear_specs("in_proj", source, d));
        }
        let dh = config.head_dim();
        for k in 0..config.transformer_blocks {
            let p = format!("block{k}");
            specs.push(vector(format!("{p}.ln1.g"), d, Init::Ones));
            specs.push(vector(format!("{p}.ln1.b"), d, Init::Zeros));
            for head in 0..config.attn_heads {
                for w in ["wq", "wk", "wv"] {
                    specs.push(weight(format!("{p}.attn.head{head}.{w}"), d, dh, d));
                }
            }
            specs.extend(linear_specs(&format!("{p}.attn.out"), d, d));
            specs.push(vector(format!("{p}.ln2.g"), d, Init::Ones));
            specs.push(vector(format!("{p}.ln2.b"), d, Init::Zeros));
            specs.extend(linear_specs(&format!("{p}.ffn.0"), d, config.ffn_dim));
            specs.extend(linear_specs(&format!("{p}.ffn.1"), config.ffn_dim, d));
        }
    }
    let mut width = config.feature_dim();
    for (i, &out) in config.mlp_layers.iter().enumerate() {
        specs.extend(linear_specs(&format!("mlp.{i}"), width, out));
        width = out;
    }
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Digest of the ordered `(name, shape)` table.
pub fn layout_hash(layout: &[(String, Vec<usize>)]) -> u64 {
    let mut h = Fnv64::new();
    for (name, shape) in layout {
        h.update(&(name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            h.update(&(d as u64).to_le_bytes());
        }
    }
    h.finish()
}

/// Learnable state of one model: a named, ordered set of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    pub version: u64,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(config) {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn layout_hash(&self) -> u64 {
        layout_hash(&self.layout())
    }

    /// Concatenate all tensors in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let expected: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if flat.len() != expected {
            return Err(Error::Invalid(format!(
                "flattened parameter length {} does not match layout length {expected}",
                flat.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut offset = 0;
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            tensors.insert(spec.name, Tensor::new(spec.shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            version: 0,
        })
    }

    /// Build from an explicit name -> tensor map, checking it against the config layout.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        for spec in &specs {
            match tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Invalid(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Invalid(format!("missing parameter {}", spec.name))),
            }
        }
        if tensors.len() != specs.len() {
            let extra = tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Invalid(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            version: 0,
        })
    }

    /// Register every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// All parameter vars in canonical order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}
