//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and `backward` walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamSet, Tensor2};

pub type NodeId = usize;

/// Sigmoid outputs are clamped into this band before any log is taken.
pub const SIGMOID_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SigmoidClamped(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    Bce { scores: NodeId, targets: Tensor2 },
    SigmoidBce { logits: NodeId, targets: Tensor2 },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    /// Leaf for a named parameter. Repeated calls return the same node so
    /// shared weights accumulate their gradient in one place.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = params.value(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()))?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b))
    }

    /// `x + b` with the 1-row `b` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (y, bb) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *y += bb;
            }
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let v = av.zip_map(bv, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Logistic sigmoid, clamped to `[SIGMOID_CLAMP, 1 - SIGMOID_CLAMP]`.
    /// The clamp has zero derivative outside the band.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .map(|z| sigmoid(z).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP));
        self.push(v, Op::SigmoidClamped(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push(v, Op::ConcatCols(a, b))
    }

    /// `Σ_s weights[0, s] · items[s]` for a `1 x S` weight row.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let w = self.value(weights);
        if w.rows() != 1 || w.cols() != items.len() || items.is_empty() {
            return Err(Error::Shape(format!(
                "weights {:?} for {} items",
                w.shape(),
                items.len()
            )));
        }
        let shape = self.value(items[0]).shape();
        let mut v = Tensor2::zeros(shape.0, shape.1);
        for (s, &item) in items.iter().enumerate() {
            let x = self.value(item);
            if x.shape() != shape {
                return Err(Error::Shape(format!("weighted_sum item {:?} vs {:?}", x.shape(), shape)));
            }
            let ws = w.get(0, s);
            for (o, xi) in v.data_mut().iter_mut().zip(x.data()) {
                *o += ws * xi;
            }
        }
        self.push(
            v,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy between clamped probabilities and targets.
    pub fn bce(&mut self, scores: NodeId, targets: &Tensor2) -> Result<NodeId> {
        let s = self.value(scores);
        if s.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce scores {:?} vs targets {:?}",
                s.shape(),
                targets.shape()
            )));
        }
        let v = bce_value(s.data(), targets.data());
        self.push(
            Tensor2::scalar(v),
            Op::Bce {
                scores,
                targets: targets.clone(),
            },
        )
    }

    /// `bce(sigmoid(logits), targets)` as one node. The value is identical;
    /// the gradient with respect to the logits is `(σ(z) - y) / n` with the
    /// unclamped sigmoid, so clips pushed past the clamp band keep a learning
    /// signal instead of a zero derivative.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: &Tensor2) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let s: Vec<f64> = z
            .data()
            .iter()
            .map(|&z| sigmoid(z).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP))
            .collect();
        let v = bce_value(&s, targets.data());
        self.push(
            Tensor2::scalar(v),
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sum();
        self.push(Tensor2::scalar(v), Op::Sum(a))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// leaf on the tape. Calling it again yields the same gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "node {loss} has not been recorded (tape holds {} nodes)",
                self.nodes.len()
            )));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Backward(format!(
                "loss must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients::new();

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut send = |target: NodeId, g: Tensor2| match &mut grads[target] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), dy);
                }
                Op::MatMul(a, b) => {
                    send(*a, dy.matmul_t(self.value(*b))?);
                    send(*b, self.value(*a).t_matmul(&dy)?);
                }
                Op::MatMulT(a, b) => {
                    send(*a, dy.matmul(self.value(*b))?);
                    send(*b, dy.t_matmul(self.value(*a))?);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor2::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (acc, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *acc += g;
                        }
                    }
                    send(*b, db);
                    send(*x, dy);
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Scale(a, s) => send(*a, dy.map(|g| g * s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, dy.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::SigmoidClamped(a) => {
                    let z = self.value(*a);
                    send(
                        *a,
                        dy.zip_map(z, |g, z| {
                            let s = sigmoid(z);
                            if s > SIGMOID_CLAMP && s < 1.0 - SIGMOID_CLAMP {
                                g * s * (1.0 - s)
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = y * (g - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Tensor2::zeros(dy.rows(), ca);
                    let mut gb = Tensor2::zeros(dy.rows(), cb);
                    for r in 0..dy.rows() {
                        ga.row_mut(r).copy_from_slice(&dy.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&dy.row(r)[ca..]);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.value(*weights).clone();
                    let mut dw = Tensor2::zeros(1, items.len());
                    for (s, &item) in items.iter().enumerate() {
                        let x = self.value(item);
                        dw.set(0, s, dy.data().iter().zip(x.data()).map(|(g, x)| g * x).sum());
                        let ws = w.get(0, s);
                        send(item, dy.map(|g| g * ws));
                    }
                    send(*weights, dw);
                }
                Op::Bce { scores, targets } => {
                    let g = dy.get(0, 0);
                    let s = self.value(*scores);
                    let n = s.len() as f64;
                    send(*scores, s.zip_map(targets, |s, y| g * (-y / s + (1.0 - y) / (1.0 - s)) / n));
                }
                Op::SigmoidBce { logits, targets } => {
                    let g = dy.get(0, 0);
                    let z = self.value(*logits);
                    let n = z.len() as f64;
                    send(*logits, z.zip_map(targets, |z, y| g * (sigmoid(z) - y) / n));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(*a, Tensor2::filled(r, c, dy.get(0, 0)));
                }
            }
        }
        Ok(out)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::SigmoidClamped(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax",
        Op::ConcatCols(..) => "concat",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Bce { .. } => "bce",
        Op::SigmoidBce { .. } => "sigmoid_bce",
        Op::Sum(_) => "sum",
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn bce_value(scores: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&s, &y)| -(y * s.ln() + (1.0 - y) * (1.0 - s).ln()))
        .sum();
    total / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::new(2, 3, vec![0.1, -2.0, 3.0, 4.0, 5.5, -6.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["w"], Tensor2::filled(2, 3, 1.0));
    }

    #[test]
    fn backward_twice_gives_identical_gradients() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::new(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::new(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let w = tape.param(&params, "w").unwrap();
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let loss = tape.sum(s).unwrap();
        assert_eq!(tape.backward(loss).unwrap(), tape.backward(loss).unwrap());
    }

    #[test]
    fn fused_sigmoid_bce_matches_composition_inside_band() {
        let mut params = ParamSet::new();
        params.insert("z", Tensor2::new(4, 1, vec![0.3, -1.2, 2.5, -0.1]).unwrap()).unwrap();
        let y = Tensor2::new(4, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        let mut a = Tape::new();
        let z = a.param(&params, "z").unwrap();
        let s = a.sigmoid(z).unwrap();
        let la = a.bce(s, &y).unwrap();
        let mut b = Tape::new();
        let z = b.param(&params, "z").unwrap();
        let lb = b.sigmoid_bce(z, &y).unwrap();

        assert_eq!(a.value(la).get(0, 0), b.value(lb).get(0, 0));
        let (ga, gb) = (a.backward(la).unwrap(), b.backward(lb).unwrap());
        for (x, y) in ga["z"].data().iter().zip(gb["z"].data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_sigmoid_bce_keeps_gradient_when_saturated() {
        let mut params = ParamSet::new();
        params.insert("z", Tensor2::scalar(40.0)).unwrap();
        let mut tape = Tape::new();
        let z = tape.param(&params, "z").unwrap();
        let loss = tape.sigmoid_bce(z, &Tensor2::scalar(0.0)).unwrap();
        assert!((tape.value(loss).get(0, 0) + (SIGMOID_CLAMP).ln()).abs() < 1e-9);
        assert!((tape.backward(loss).unwrap()["z"].get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_on_unrecorded_node_fails() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(0), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::zeros(2, 2)).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(w * w) through matmul of w (1x1) with itself: d/dw w² = 2w
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let w2 = tape.param(&params, "w").unwrap();
        assert_eq!(w, w2);
        let sq = tape.matmul(w, w2).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(loss).unwrap()["w"].get(0, 0), 6.0);
    }
}
