use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central differences.
///
/// `f` builds its computation on the supplied graph from the parameter leaf it
/// is handed. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Invalid(format!("finite difference step must be > 0, got {step}")));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p.clone());
        let y = f(&mut g, x)?;
        scalar_value(&g, y)
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    scalar_value(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_value(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::Invalid(format!(
            "finite_diff_check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// A differentiable op wrapped as a scalar function of one tensor, for
/// gradient checking. Points are drawn uniformly from `domain`.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub domain: (f64, f64),
    pub build: fn(&mut Graph, Var) -> Result<Var>,
}

/// Fixed, non-symmetric values of a given shape.
fn pattern(shape: &[usize], offset: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64) * 0.7 + offset).sin() * 0.9 + 0.1).collect();
    Tensor::new(shape.to_vec(), data).expect("pattern shape")
}

fn positive(shape: &[usize]) -> Tensor {
    let p = pattern(shape, 0.3);
    Tensor::new(shape.to_vec(), p.data().iter().map(|v| 1.5 + 0.5 * v).collect()).expect("shape")
}

/// Reduce to a scalar with fixed uneven weights so every output element matters.
fn weigh(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(pattern(g.value(y).shape(), 1.1));
    let p = g.mul(y, w)?;
    g.sum(p)
}

macro_rules! case {
    ($name:literal, $shape:expr, $domain:expr, |$g:ident, $x:ident| $body:expr) => {
        OpCase {
            name: $name,
            shape: $shape,
            domain: $domain,
            build: |$g: &mut Graph, $x: Var| -> Result<Var> {
                let y = $body;
                weigh($g, y)
            },
        }
    };
}

/// Every tape op, each exercised on the tensor being differentiated.
pub fn op_cases() -> Vec<OpCase> {
    const D: (f64, f64) = (-2.0, 2.0);
    vec![
        case!("add", &[3, 4], D, |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.0));
            g.add(x, c)?
        }),
        case!("add_broadcast_rhs", &[4], D, |g, x| {
            let c = g.constant(pattern(&[2, 3, 4], 0.0));
            g.add(c, x)?
        }),
        case!("sub", &[3, 4], D, |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.5));
            g.sub(c, x)?
        }),
        case!("mul", &[3, 4], D, |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.2));
            g.mul(x, c)?
        }),
        case!("mul_broadcast_rhs", &[4], D, |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.2));
            g.mul(c, x)?
        }),
        case!("mul_self", &[5], D, |g, x| g.mul(x, x)?),
        case!("div_numerator", &[3, 4], D, |g, x| {
            let c = g.constant(positive(&[3, 4]));
            g.div(x, c)?
        }),
        case!("div_denominator", &[3, 4], (0.5, 2.0), |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.4));
            g.div(c, x)?
        }),
        case!("scale", &[6], D, |g, x| g.scale(x, -1.7)?),
        case!("add_scalar", &[6], D, |g, x| g.add_scalar(x, 0.3)?),
        case!("neg", &[6], D, |g, x| g.neg(x)?),
        case!("sigmoid", &[2, 5], (-4.0, 4.0), |g, x| g.sigmoid(x)?),
        case!("tanh", &[2, 5], D, |g, x| g.tanh(x)?),
        case!("relu", &[2, 5], D, |g, x| g.relu(x)?),
        case!("exp", &[2, 5], D, |g, x| g.exp(x)?),
        case!("sqrt", &[2, 5], (0.5, 3.0), |g, x| g.sqrt(x)?),
        case!("square", &[2, 5], D, |g, x| g.square(x)?),
        case!("matmul_lhs", &[3, 4], D, |g, x| {
            let c = g.constant(pattern(&[4, 2], 0.1));
            g.matmul(x, c)?
        }),
        case!("matmul_rhs", &[4, 2], D, |g, x| {
            let c = g.constant(pattern(&[3, 4], 0.1));
            g.matmul(c, x)?
        }),
        case!("matmul_batched_lhs", &[2, 3, 4], D, |g, x| {
            let c = g.constant(pattern(&[2, 4, 2], 0.6));
            g.matmul(x, c)?
        }),
        case!("matmul_batched_rhs", &[2, 4, 2], D, |g, x| {
            let c = g.constant(pattern(&[2, 3, 4], 0.6));
            g.matmul(c, x)?
        }),
        case!("transpose", &[2, 3, 4], D, |g, x| g.transpose(x)?),
        case!("reshape", &[2, 3, 4], D, |g, x| g.reshape(x, &[6, 4])?),
        case!("concat", &[2, 3], D, |g, x| {
            let c = g.constant(pattern(&[2, 2], 0.9));
            g.concat(&[c, x, c], 1)?
        }),
        case!("slice", &[3, 5], D, |g, x| g.slice(x, 1, 1, 4)?),
        case!("sum", &[3, 4], D, |g, x| {
            let s = g.sum(x)?;
            g.square(s)?
        }),
        case!("mean", &[3, 4], D, |g, x| {
            let s = g.mean(x)?;
            g.square(s)?
        }),
        case!("sum_axis", &[2, 3, 4], D, |g, x| g.sum_axis(x, 1)?),
        case!("mean_axis", &[2, 3, 4], D, |g, x| g.mean_axis(x, 2)?),
        case!("softmax", &[3, 5], (-3.0, 3.0), |g, x| g.softmax(x)?),
        case!("layer_norm", &[3, 6], D, |g, x| g.layer_norm(x, 1e-5)?),
    ]
}
