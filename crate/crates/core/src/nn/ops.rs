//! Network building blocks recorded on a [`Tape`], plus eager wrappers.

use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamSet, Tape, Tensor2};

/// `x · W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear_on(tape: &mut Tape, params: &ParamSet, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Parameter names of one attention block.
pub fn attention_param_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.w_query"),
        format!("{prefix}.w_key"),
        format!("{prefix}.w_value"),
        format!("{prefix}.w_out"),
    ]
}

/// Nodes of one attention evaluation, for inspection in tests.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub weights: NodeId,
    /// Attention output before the residual connection.
    pub attended: NodeId,
    pub output: NodeId,
}

/// Single-head scaled dot-product attention with residual:
/// `softmax(Q Kᵀ / √d) V W_out + x_query`, where `Q = x_query W_query` and
/// `K, V` are projections of `x_context`.
pub fn attention_on(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x_query: NodeId,
    x_context: NodeId,
) -> Result<AttentionNodes> {
    let [nq, nk, nv, no] = attention_param_names(prefix);
    let wq = tape.param(params, &nq)?;
    let wk = tape.param(params, &nk)?;
    let wv = tape.param(params, &nv)?;
    let wo = tape.param(params, &no)?;
    let d_model = tape.value(wq).cols();
    if tape.value(wo).cols() != tape.value(x_query).cols() {
        return Err(Error::Shape(format!(
            "attention {prefix}: output width {} cannot be added to query width {}",
            tape.value(wo).cols(),
            tape.value(x_query).cols()
        )));
    }
    let q = tape.matmul(x_query, wq)?;
    let k = tape.matmul(x_context, wk)?;
    let v = tape.matmul(x_context, wv)?;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d_model as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(weights, v)?;
    let attended = tape.matmul(mixed, wo)?;
    let output = tape.add(attended, x_query)?;
    Ok(AttentionNodes {
        weights,
        attended,
        output,
    })
}

/// Eager `x · w + b`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let mut params = ParamSet::new();
    params.insert("l.weight", w.clone())?;
    params.insert("l.bias", b.clone())?;
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone())?;
    let y = linear_on(&mut tape, &params, "l", xi)?;
    Ok(tape.value(y).clone())
}

/// Eager attention; `params` must hold the four matrices under `prefix`.
pub fn attention(x_query: &Tensor2, x_context: &Tensor2, params: &ParamSet, prefix: &str) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let q = tape.constant(x_query.clone())?;
    let c = tape.constant(x_context.clone())?;
    let nodes = attention_on(&mut tape, params, prefix, q, c)?;
    Ok(tape.value(nodes.output).clone())
}

/// Mean binary cross-entropy. Scores are clamped into the sigmoid band first.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "bce over {} scores and {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let eps = crate::nn::SIGMOID_CLAMP;
    let clamped: Vec<f64> = scores.iter().map(|s| s.clamp(eps, 1.0 - eps)).collect();
    let n = scores.len();
    let mut tape = Tape::new();
    let s = tape.constant(Tensor2::new(n, 1, clamped)?)?;
    let loss = tape.bce(s, &Tensor2::new(n, 1, targets.to_vec())?)?;
    Ok(tape.value(loss).get(0, 0))
}
