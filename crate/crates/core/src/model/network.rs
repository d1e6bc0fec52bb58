use super::config::{Architecture, ModelConfig, INPUT_DIM, OUTPUT_DIM};
use super::params::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recurrent state for a batch: `h` and `c` are both `(batch, hidden)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[batch, hidden]));
        let c = g.constant(Tensor::zeros(&[batch, hidden]));
        Self { h, c }
    }
}

/// LSTM weights with the input/recurrent matrices pre-transposed for `x @ W`.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    w_ih_t: Var,
    w_hh_t: Var,
    b: Var,
    hidden: usize,
}

impl LstmWeights {
    pub fn bind(g: &mut Graph, params: &BoundParams, prefix: &str) -> Result<Self> {
        let w_ih = params.var(&format!("{prefix}.w_ih"))?;
        let w_hh = params.var(&format!("{prefix}.w_hh"))?;
        let b = params.var(&format!("{prefix}.b"))?;
        let hidden = g.value(w_hh).shape()[1];
        Ok(Self {
            w_ih_t: g.transpose(w_ih)?,
            w_hh_t: g.transpose(w_hh)?,
            b,
            hidden,
        })
    }
}

/// One LSTM cell update for a batch of inputs `x_t: (batch, input)`.
pub fn lstm_step(g: &mut Graph, w: &LstmWeights, x_t: Var, state: LstmState) -> Result<LstmState> {
    let h = w.hidden;
    let xi = g.matmul(x_t, w.w_ih_t)?;
    let hh = g.matmul(state.h, w.w_hh_t)?;
    let pre = g.add(xi, hh)?;
    let gates = g.add(pre, w.b)?;
    let i_pre = g.slice(gates, 1, 0, h)?;
    let f_pre = g.slice(gates, 1, h, 2 * h)?;
    let c_pre = g.slice(gates, 1, 2 * h, 3 * h)?;
    let o_pre = g.slice(gates, 1, 3 * h, 4 * h)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(c_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h_next = g.mul(o, tc)?;
    Ok(LstmState { h: h_next, c })
}

fn check_windows(g: &Graph, config: &ModelConfig, windows: Var) -> Result<usize> {
    let shape = g.value(windows).shape();
    match *shape {
        [b, p, d] if p == config.window_p && d == INPUT_DIM => Ok(b),
        _ => Err(Error::Shape {
            op: "window",
            lhs: shape.to_vec(),
            rhs: vec![0, config.window_p, INPUT_DIM],
        }),
    }
}

fn run_lstm(g: &mut Graph, params: &BoundParams, windows: Var, p: usize) -> Result<(Var, LstmState)> {
    let batch = g.value(windows).shape()[0];
    let w = LstmWeights::bind(g, params, "lstm")?;
    let mut state = LstmState::zeros(g, batch, w.hidden);
    let mut rows = Vec::with_capacity(p);
    for t in 0..p {
        let x = g.slice(windows, 1, t, t + 1)?;
        let x = g.reshape(x, &[batch, INPUT_DIM])?;
        state = lstm_step(g, &w, x, state)?;
        rows.push(g.reshape(state.h, &[batch, 1, w.hidden])?);
    }
    let encoded = g.concat(&rows, 1)?;
    Ok((encoded, state))
}

/// LSTM-encode a batch of windows `(batch, P, 7)` into `(batch, P, lstm_hidden)`.
///
/// Row `t` is the hidden state after consuming pose `t`, starting from zeros.
pub fn encode_window(g: &mut Graph, params: &BoundParams, config: &ModelConfig, windows: Var) -> Result<Var> {
    check_windows(g, config, windows)?;
    Ok(run_lstm(g, params, windows, config.window_p)?.0)
}

/// `x @ w + b` over the last axis of a 2-D or 3-D input.
pub fn linear(g: &mut Graph, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}.w"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    let shape = g.value(x).shape().to_vec();
    let out_dim = g.value(w).shape()[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, shape[shape.len() - 1]])?;
    let y = g.matmul(flat, w)?;
    let y = g.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out_dim;
    g.reshape(y, &out_shape)
}

fn layer_norm_affine(g: &mut Graph, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gain = params.var(&format!("{prefix}.g"))?;
    let bias = params.var(&format!("{prefix}.b"))?;
    let n = g.layer_norm(x, LAYER_NORM_EPS)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

/// Sinusoidal position encoding `(P, d)`.
pub fn position_encoding(p: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; p * d];
    for pos in 0..p {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![p, d], data).expect("position encoding shape")
}

/// Output of a transformer block plus the per-head attention weights `(batch, P, P)`.
pub struct BlockOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
pub fn transformer_block(
    g: &mut Graph,
    params: &BoundParams,
    config: &ModelConfig,
    block: usize,
    x: Var,
) -> Result<BlockOutput> {
    let shape = g.value(x).shape().to_vec();
    let (batch, p, d) = match *shape.as_slice() {
        [b, p, d] if d == config.attn_dim => (b, p, d),
        _ => {
            return Err(Error::Shape {
                op: "transformer_block",
                lhs: shape,
                rhs: vec![0, 0, config.attn_dim],
            })
        }
    };
    let prefix = format!("block{block}");
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let h = layer_norm_affine(g, params, &format!("{prefix}.ln1"), x)?;
    let h2 = g.reshape(h, &[batch * p, d])?;
    let mut heads = Vec::with_capacity(config.attn_heads);
    let mut attention = Vec::with_capacity(config.attn_heads);
    for k in 0..config.attn_heads {
        let project = |g: &mut Graph, w: &str| -> Result<Var> {
            let w = params.var(&format!("{prefix}.attn.head{k}.{w}"))?;
            let y = g.matmul(h2, w)?;
            g.reshape(y, &[batch, p, dh])
        };
        let q = project(g, "wq")?;
        let key = project(g, "wk")?;
        let v = project(g, "wv")?;
        let kt = g.transpose(key)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores)?;
        attention.push(weights);
        heads.push(g.matmul(weights, v)?);
    }
    let ctx = g.concat(&heads, 2)?;
    let attn_out = linear(g, params, &format!("{prefix}.attn.out"), ctx)?;
    let x1 = g.add(x, attn_out)?;

    let f = ffn_residual(g, params, &prefix, x1)?;
    Ok(BlockOutput { output: f, attention })
}

/// `x + W2 relu(W1 LN(x) + b1) + b2`, the second half of a block.
pub fn ffn_residual(g: &mut Graph, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = layer_norm_affine(g, params, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, params, &format!("{prefix}.ffn.0"), h)?;
    let h = g.relu(h)?;
    let h = linear(g, params, &format!("{prefix}.ffn.1"), h)?;
    g.add(x, h)
}

fn last_step(g: &mut Graph, seq: Var) -> Result<Var> {
    let shape = g.value(seq).shape().to_vec();
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    let last = g.slice(seq, 1, p - 1, p)?;
    g.reshape(last, &[b, d])
}

fn mlp_head(g: &mut Graph, params: &BoundParams, config: &ModelConfig, mut x: Var) -> Result<Var> {
    let n = config.mlp_layers.len();
    for i in 0..n {
        x = linear(g, params, &format!("mlp.{i}"), x)?;
        if i + 1 < n {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

fn run_transformer(g: &mut Graph, params: &BoundParams, config: &ModelConfig, mut x: Var) -> Result<Var> {
    let p = config.window_p;
    let pe = g.constant(position_encoding(p, config.attn_dim));
    x = g.add(x, pe)?;
    for k in 0..config.transformer_blocks {
        x = transformer_block(g, params, config, k, x)?.output;
    }
    Ok(x)
}

/// Forward pass for a batch of windows `(batch, P, 7)`, returning `(batch, 6)`.
pub fn forward(g: &mut Graph, params: &BoundParams, config: &ModelConfig, windows: Var) -> Result<Var> {
    let batch = check_windows(g, config, windows)?;
    let p = config.window_p;
    let feature = match config.architecture {
        Architecture::LstmOnly => {
            let (_, state) = run_lstm(g, params, windows, p)?;
            state.h
        }
        Architecture::LstmEncoderDecoder => {
            let (_, enc) = run_lstm(g, params, windows, p)?;
            let dec = LstmWeights::bind(g, params, "dec")?;
            // One decoding step seeded with the encoder's final state.
            let out = lstm_step(g, &dec, enc.h, enc)?;
            out.h
        }
        Architecture::TransformerOnly => {
            let x = linear(g, params, "in_proj", windows)?;
            let y = run_transformer(g, params, config, x)?;
            last_step(g, y)?
        }
        Architecture::LstmTransformer => {
            let (mut x, _) = run_lstm(g, params, windows, p)?;
            if config.lstm_hidden != config.attn_dim {
                x = linear(g, params, "in_proj", x)?;
            }
            let y = run_transformer(g, params, config, x)?;
            last_step(g, y)?
        }
    };
    let out = mlp_head(g, params, config, feature)?;
    debug_assert_eq!(g.value(out).shape(), &[batch, OUTPUT_DIM]);
    Ok(out)
}

/// Stack flat `P x 7` windows into a `(batch, P, 7)` tensor.
pub fn windows_tensor<'a>(p: usize, windows: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut batch = 0;
    for w in windows {
        if w.len() != p * INPUT_DIM {
            return Err(Error::Invalid(format!(
                "window has {} values, expected {}",
                w.len(),
                p * INPUT_DIM
            )));
        }
        data.extend_from_slice(w);
        batch += 1;
    }
    if batch == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    Tensor::new(vec![batch, p, INPUT_DIM], data)
}

/// Inference without gradient tracking. Returns one 6-vector per window.
pub fn predict_batch(params: &ModelParams, windows: &Tensor) -> Result<Vec<[f64; OUTPUT_DIM]>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(windows.clone());
    let y = forward(&mut g, &bound, params.config(), x)?;
    Ok(g
        .value(y)
        .data()
        .chunks(OUTPUT_DIM)
        .map(|c| {
            let mut out = [0.0; OUTPUT_DIM];
            out.copy_from_slice(c);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Architecture) -> ModelConfig {
        ModelConfig {
            window_p: 5,
            lstm_hidden: 6,
            attn_heads: 2,
            attn_dim: 8,
            ffn_dim: 10,
            mlp_layers: vec![7, OUTPUT_DIM],
            architecture: arch,
            ..Default::default()
        }
    }

    fn random_windows(rng: &mut ChaCha8Rng, batch: usize, p: usize) -> Tensor {
        let data = (0..batch * p * INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![batch, p, INPUT_DIM], data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut g = Graph::new();
        let hidden = 4;
        let w = LstmWeights {
            w_ih_t: g.constant(Tensor::zeros(&[INPUT_DIM, 4 * hidden])),
            w_hh_t: g.constant(Tensor::zeros(&[hidden, 4 * hidden])),
            b: g.constant(Tensor::zeros(&[4 * hidden])),
            hidden,
        };
        let x = g.constant(Tensor::ones(&[1, INPUT_DIM]));
        let s0 = LstmState::zeros(&mut g, 1, hidden);
        let s1 = lstm_step(&mut g, &w, x, s0).unwrap();
        assert_eq!(g.value(s1.h).data(), &[0.0; 4]);
        assert_eq!(g.value(s1.c).data(), &[0.0; 4]);
        assert_eq!(g.value(s1.h).shape(), &[1, hidden]);
    }

    #[test]
    fn encode_window_shape_and_single_step_reduction() {
        let cfg = ModelConfig {
            window_p: 1,
            ..small(Architecture::LstmOnly)
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let win = random_windows(&mut rng, 2, 1);

        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(win.clone());
        let enc = encode_window(&mut g, &b, &cfg, x).unwrap();
        assert_eq!(g.value(enc).shape(), &[2, 1, cfg.lstm_hidden]);

        let w = LstmWeights::bind(&mut g, &b, "lstm").unwrap();
        let x2 = g.constant(win.reshaped(&[2, INPUT_DIM]).unwrap());
        let s0 = LstmState::zeros(&mut g, 2, cfg.lstm_hidden);
        let s1 = lstm_step(&mut g, &w, x2, s0).unwrap();
        assert_eq!(g.value(enc).data(), g.value(s1.h).data());
    }

    #[test]
    fn encode_window_rejects_wrong_length() {
        let cfg = small(Architecture::LstmOnly);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, cfg.window_p + 1, INPUT_DIM]));
        assert!(encode_window(&mut g, &b, &cfg, x).is_err());
    }

    #[test]
    fn encoding_is_order_sensitive() {
        let cfg = small(Architecture::LstmOnly);
        let params = ModelParams::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let win = random_windows(&mut rng, 1, cfg.window_p);
            let mut rev = Vec::new();
            for t in (0..cfg.window_p).rev() {
                rev.extend_from_slice(&win.data()[t * INPUT_DIM..(t + 1) * INPUT_DIM]);
            }
            let rev = Tensor::new(win.shape().to_vec(), rev).unwrap();
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let x = g.constant(win);
            let xr = g.constant(rev);
            let e1 = encode_window(&mut g, &b, &cfg, x).unwrap();
            let e2 = encode_window(&mut g, &b, &cfg, xr).unwrap();
            assert_ne!(g.value(e1).data(), g.value(e2).data());
        }
    }

    #[test]
    fn encoding_is_causal() {
        let cfg = small(Architecture::LstmOnly);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let win = random_windows(&mut rng, 1, cfg.window_p);
        let t = 2;
        let mut zeroed = win.clone();
        zeroed.data_mut()[(t + 1) * INPUT_DIM..(t + 2) * INPUT_DIM].fill(0.0);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(win);
        let xz = g.constant(zeroed);
        let e1 = encode_window(&mut g, &b, &cfg, x).unwrap();
        let e2 = encode_window(&mut g, &b, &cfg, xz).unwrap();
        let h = cfg.lstm_hidden;
        assert_eq!(&g.value(e1).data()[..(t + 1) * h], &g.value(e2).data()[..(t + 1) * h]);
        assert_ne!(&g.value(e1).data()[(t + 1) * h..], &g.value(e2).data()[(t + 1) * h..]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_is_preserved() {
        let cfg = small(Architecture::LstmTransformer);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..3 * cfg.window_p * cfg.attn_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![3, cfg.window_p, cfg.attn_dim], data).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x);
        let out = transformer_block(&mut g, &b, &cfg, 0, xv).unwrap();
        assert_eq!(g.value(out.output).shape(), g.value(xv).shape());
        assert_eq!(out.attention.len(), cfg.attn_heads);
        for a in out.attention {
            for row in g.value(a).data().chunks(cfg.window_p) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zeroed_value_and_output_projection_leave_ffn_residual() {
        let cfg = small(Architecture::LstmTransformer);
        let base = ModelParams::init(&cfg, 6).unwrap();
        let mut map: std::collections::BTreeMap<String, Tensor> =
            base.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, t) in map.iter_mut() {
            if name.ends_with(".wv") || name.starts_with("block0.attn.out") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let params = ModelParams::from_tensors(&cfg, map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..2 * cfg.window_p * cfg.attn_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, cfg.window_p, cfg.attn_dim], data).unwrap();

        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x);
        let out = transformer_block(&mut g, &b, &cfg, 0, xv).unwrap().output;
        let expected = ffn_residual(&mut g, &b, "block0", xv).unwrap();
        assert_eq!(g.value(out).data(), g.value(expected).data());
    }

    #[test]
    fn predict_outputs_six_values_deterministically() {
        for arch in Architecture::ALL {
            let cfg = small(arch);
            let params = ModelParams::init(&cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let win = random_windows(&mut rng, 4, cfg.window_p);
            let a = predict_batch(&params, &win).unwrap();
            let b = predict_batch(&params, &win).unwrap();
            assert_eq!(a.len(), 4);
            assert_eq!(a, b, "{arch:?}");
        }
    }

    #[test]
    fn position_encoding_first_row() {
        let pe = position_encoding(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
