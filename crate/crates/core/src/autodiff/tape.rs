use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gelu, gelu_grad, gemm, sigmoid, swap_axes};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

/// Epsilon inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// The closed primitive set. Every layer in the crate is a composition of these.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k]·[k,n]`, batched `[..,m,k]·[..,k,n]` with equal leading axes, or
    /// `[..,m,k]·[k,n]` with a shared right operand.
    MatMul,
    /// Elementwise sum; the right operand may be a trailing-axes suffix of the left.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    ScalarMul(f64),
    ConcatLast,
    MeanAxis(usize),
    Transpose(usize, usize),
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Row gather from a `[rows, d]` table.
    EmbeddingLookup(Vec<usize>),
    Relu,
    /// Tanh approximation.
    Gelu,
    Sigmoid,
    SoftmaxLast,
    /// Normalisation without affine parameters.
    LayerNormLast,
    /// Mean of squared differences, scalar result.
    SquaredError,
    /// Mean binary cross-entropy of probabilities against fixed targets.
    BinaryCrossEntropy {
        targets: Vec<f64>,
        pos_weight: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::ConcatLast => "concat_last",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::Transpose(..) => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::EmbeddingLookup(_) => "embedding_lookup",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::SoftmaxLast => "softmax_last",
            Primitive::LayerNormLast => "layer_norm_last",
            Primitive::SquaredError => "squared_error",
            Primitive::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
}

struct Record {
    op: Primitive,
    inputs: Vec<usize>,
    output: usize,
    /// Per-op forward intermediates (layer-norm inverse std).
    saved: Vec<f64>,
}

/// Reverse-mode differentiation tape.
///
/// Values live in an arena indexed by [`Var`]. Only applications with at least
/// one gradient-carrying input are recorded, so a tape whose leaves are all
/// constants doubles as a plain evaluator.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the gradient-carrying leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.index)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.by_node.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// Gradient-carrying leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Number of values held (leaves and results).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded primitive applications.
    pub fn recorded(&self) -> usize {
        self.records.len()
    }

    /// Applies `op` to `inputs`, recording it when any input carries gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
            forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let out = self.push(value, requires_grad);
        if requires_grad {
            self.records.push(Record {
                op,
                inputs: inputs.iter().map(|v| v.index).collect(),
                output: out.index,
                saved,
            });
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[a])
    }

    /// `a - b`, composed from `scalar_mul` and `add`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLast, parts)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanAxis(axis), &[a])
    }

    /// Mean over every element, as a chain of `reshape` and `mean_axis`.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![n])?;
        self.mean_axis(flat, 0)
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.apply(Primitive::Transpose(ax0, ax1), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn lookup(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::EmbeddingLookup(ids), &[table])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxLast, &[a])
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LayerNormLast, &[a])
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::SquaredError, &[a, b])
    }

    pub fn bce(&mut self, probs: Var, targets: Vec<f64>, pos_weight: f64) -> Result<Var> {
        self.apply(
            Primitive::BinaryCrossEntropy {
                targets,
                pos_weight,
            },
            &[probs],
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    ///
    /// Records are visited in exact reverse recording order; gradients of
    /// shared nodes are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if !self.nodes[loss.index].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.index].requires_grad {
            return Ok(Gradients::default());
        }
        grads[loss.index] = Some(vec![1.0]);
        for rec in self.records.iter().rev() {
            let Some(g_out) = grads[rec.output].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let output = &self.nodes[rec.output].value;
            let in_grads = backward_rule(&rec.op, &inputs, output, &rec.saved, g_out, &needs);
            for (slot, g) in rec.inputs.iter().zip(in_grads) {
                let Some(g) = g else { continue };
                match &mut grads[*slot] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    empty => *empty = Some(g),
                }
            }
            // Leaves keep their gradient; intermediates were taken above.
        }
        let recorded_outputs: std::collections::HashSet<usize> =
            self.records.iter().map(|r| r.output).collect();
        let mut by_node = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || recorded_outputs.contains(&i) {
                continue;
            }
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            by_node.insert(i, Tensor::from_parts(node.value.shape().to_vec(), data));
        }
        Ok(Gradients { by_node })
    }
}

fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Shape analysis for matmul: (batch, m, k, n, rhs_shared).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let bad = || Error::dim("matmul", format!("{a:?} x {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(bad());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let batch: usize = lead_a.iter().product();
    if lead_b.is_empty() {
        Ok((batch, m, k, n, true))
    } else if lead_a == lead_b {
        Ok((batch, m, k, n, false))
    } else {
        Err(bad())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(op: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let name = op.name();
    let arity = match op {
        Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::SquaredError => Some(2),
        Primitive::ConcatLast => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if x.len() != n {
            return Err(Error::dim(
                name,
                format!("expected {n} inputs, got {}", x.len()),
            ));
        }
    } else if x.is_empty() {
        return Err(Error::dim(name, "no inputs"));
    }
    let out = match op {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
            let mut shape = a.shape()[..a.rank() - 2].to_vec();
            shape.extend([m, n]);
            let mut out = vec![0.0; batch * m * n];
            if shared {
                gemm(
                    batch * m,
                    k,
                    n,
                    a.data(),
                    (k, 1),
                    b.data(),
                    (n, 1),
                    0.0,
                    &mut out,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..],
                        (k, 1),
                        &b.data()[bi * k * n..],
                        (n, 1),
                        0.0,
                        &mut out[bi * m * n..],
                    );
                }
            }
            Tensor::from_parts(shape, out)
        }
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            if !is_suffix(a.shape(), b.shape()) {
                return Err(Error::dim(
                    name,
                    format!("{:?} with {:?}", a.shape(), b.shape()),
                ));
            }
            let r = b.len();
            let bd = b.data();
            let add = matches!(op, Primitive::Add);
            let mut data = a.data().to_vec();
            for c in data.chunks_exact_mut(r) {
                if add {
                    c.iter_mut().zip(bd).for_each(|(p, q)| *p += q);
                } else {
                    c.iter_mut().zip(bd).for_each(|(p, q)| *p *= q);
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Primitive::ScalarMul(c) => Tensor::from_parts(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|v| v * c).collect(),
        ),
        Primitive::ConcatLast => {
            let first = x[0].shape();
            if first.is_empty() {
                return Err(Error::dim(name, "cannot concatenate scalars"));
            }
            let lead = &first[..first.len() - 1];
            for t in x {
                let s = t.shape();
                if s.is_empty() || s[..s.len() - 1] != *lead {
                    return Err(Error::dim(name, format!("{first:?} with {s:?}")));
                }
            }
            let rows: usize = lead.iter().product();
            let widths: Vec<usize> = x.iter().map(|t| *t.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in x.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, data)
        }
        Primitive::MeanAxis(axis) => {
            let s = x[0].shape();
            if *axis >= s.len() {
                return Err(Error::dim(name, format!("axis {axis} of {s:?}")));
            }
            let (outer, len, inner) = axis_split(s, *axis);
            let d = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                let inv = 1.0 / len as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
            let mut shape = s.to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, out)
        }
        Primitive::Transpose(a0, a1) => {
            let s = x[0].shape();
            if *a0 >= s.len() || *a1 >= s.len() {
                return Err(Error::dim(name, format!("axes ({a0},{a1}) of {s:?}")));
            }
            let mut shape = s.to_vec();
            shape.swap(*a0, *a1);
            Tensor::from_parts(shape, swap_axes(x[0].data(), s, *a0, *a1))
        }
        Primitive::Reshape(shape) => x[0].clone().reshaped(shape.clone())?,
        Primitive::Slice { axis, start, end } => {
            let s = x[0].shape();
            if *axis >= s.len() || start >= end || *end > s[*axis] {
                return Err(Error::dim(
                    name,
                    format!("[{start},{end}) on axis {axis} of {s:?}"),
                ));
            }
            let (outer, len, inner) = axis_split(s, *axis);
            let w = end - start;
            let d = x[0].data();
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                data.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = w;
            Tensor::from_parts(shape, data)
        }
        Primitive::EmbeddingLookup(ids) => {
            let s = x[0].shape();
            if s.len() != 2 || ids.is_empty() {
                return Err(Error::dim(name, format!("table {s:?}, {} ids", ids.len())));
            }
            let (rows, d) = (s[0], s[1]);
            if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(Error::dim(name, format!("id {bad} out of {rows} rows")));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                data.extend_from_slice(&x[0].data()[i * d..(i + 1) * d]);
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        }
        Primitive::Relu => map(x[0], |v| v.max(0.0)),
        Primitive::Gelu => map(x[0], gelu),
        Primitive::Sigmoid => map(x[0], sigmoid),
        Primitive::SoftmaxLast => {
            let s = x[0].shape();
            if s.is_empty() {
                return Err(Error::dim(name, "scalar input"));
            }
            let c = s[s.len() - 1];
            let mut data = x[0].data().to_vec();
            for row in data.chunks_exact_mut(c) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            Tensor::from_parts(s.to_vec(), data)
        }
        Primitive::LayerNormLast => {
            let s = x[0].shape();
            if s.is_empty() {
                return Err(Error::dim(name, "scalar input"));
            }
            let c = s[s.len() - 1];
            let mut data = x[0].data().to_vec();
            let mut rstds = Vec::with_capacity(data.len() / c);
            for row in data.chunks_exact_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
                rstds.push(rstd);
            }
            return Ok((Tensor::from_parts(s.to_vec(), data), rstds));
        }
        Primitive::SquaredError => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(Error::dim(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let n = a.len() as f64;
            let se: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            Tensor::scalar(se / n)
        }
        Primitive::BinaryCrossEntropy {
            targets,
            pos_weight,
        } => {
            let p = x[0];
            if targets.len() != p.len() {
                return Err(Error::dim(
                    name,
                    format!("{} probabilities vs {} targets", p.len(), targets.len()),
                ));
            }
            let n = p.len() as f64;
            let total: f64 = p
                .data()
                .iter()
                .zip(targets)
                .map(|(&q, &y)| {
                    let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    -(pos_weight * y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                })
                .sum();
            Tensor::scalar(total / n)
        }
    };
    Ok((out, Vec::new()))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn backward_rule(
    op: &Primitive,
    x: &[&Tensor],
    y: &Tensor,
    saved: &[f64],
    g_out: Vec<f64>,
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let g = &g_out[..];
    match op {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n, shared) =
                matmul_dims(a.shape(), b.shape()).expect("validated in forward");
            let mut ga = None;
            let mut gb = None;
            if needs[0] {
                // dA = dC · Bᵀ
                let mut d = vec![0.0; a.len()];
                if shared {
                    gemm(batch * m, n, k, g, (n, 1), b.data(), (1, n), 0.0, &mut d);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &b.data()[bi * k * n..],
                            (1, n),
                            0.0,
                            &mut d[bi * m * k..],
                        );
                    }
                }
                ga = Some(d);
            }
            if needs[1] {
                // dB = Aᵀ · dC
                let mut d = vec![0.0; b.len()];
                if shared {
                    gemm(k, batch * m, n, a.data(), (1, k), g, (n, 1), 0.0, &mut d);
                } else {
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[bi * m * k..],
                            (1, k),
                            &g[bi * m * n..],
                            (n, 1),
                            0.0,
                            &mut d[bi * k * n..],
                        );
                    }
                }
                gb = Some(d);
            }
            vec![ga, gb]
        }
        Primitive::Add => {
            let r = x[1].len();
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; r];
                for c in g.chunks_exact(r) {
                    d.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
                d
            });
            vec![needs[0].then_some(g_out), gb]
        }
        Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let r = b.len();
            let ga = needs[0].then(|| {
                let mut d = g.to_vec();
                for c in d.chunks_exact_mut(r) {
                    c.iter_mut().zip(b.data()).for_each(|(p, q)| *p *= q);
                }
                d
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; r];
                for (gc, ac) in g.chunks_exact(r).zip(a.data().chunks_exact(r)) {
                    for ((acc, p), q) in d.iter_mut().zip(gc).zip(ac) {
                        *acc += p * q;
                    }
                }
                d
            });
            vec![ga, gb]
        }
        Primitive::ScalarMul(c) => {
            let mut d = g_out;
            d.iter_mut().for_each(|v| *v *= c);
            vec![Some(d)]
        }
        Primitive::ConcatLast => {
            let widths: Vec<usize> = x.iter().map(|t| *t.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut outs: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&widths)
                .map(|(&need, &w)| need.then(|| Vec::with_capacity(rows * w)))
                .collect();
            for r in 0..rows {
                let mut off = r * total;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    if let Some(v) = o {
                        v.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            outs
        }
        Primitive::MeanAxis(axis) => {
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let inv = 1.0 / len as f64;
            let mut d = vec![0.0; x[0].len()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a = b * inv);
                }
            }
            vec![Some(d)]
        }
        Primitive::Transpose(a0, a1) => vec![Some(swap_axes(g, y.shape(), *a0, *a1))],
        Primitive::Reshape(_) => vec![Some(g_out)],
        Primitive::Slice { axis, start, end } => {
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let w = end - start;
            let mut d = vec![0.0; x[0].len()];
            for o in 0..outer {
                d[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(d)]
        }
        Primitive::EmbeddingLookup(ids) => {
            let d = x[0].shape()[1];
            let mut out = vec![0.0; x[0].len()];
            for (r, &i) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(out)]
        }
        Primitive::Relu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
        )],
        Primitive::Gelu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| gv * gelu_grad(v))
                .collect(),
        )],
        Primitive::Sigmoid => vec![Some(
            y.data()
                .iter()
                .zip(g)
                .map(|(&s, &gv)| gv * s * (1.0 - s))
                .collect(),
        )],
        Primitive::SoftmaxLast => {
            let c = *y.shape().last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(g.chunks_exact(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &s), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = s * (gv - dot);
                }
            }
            vec![Some(d)]
        }
        Primitive::LayerNormLast => {
            let c = *y.shape().last().unwrap();
            let inv_c = 1.0 / c as f64;
            let mut d = vec![0.0; y.len()];
            for (((dr, yr), gr), &rstd) in d
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(g.chunks_exact(c))
                .zip(saved)
            {
                let mean_g: f64 = gr.iter().sum::<f64>() * inv_c;
                let mean_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = rstd * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(d)]
        }
        Primitive::SquaredError => {
            let (a, b) = (x[0], x[1]);
            let scale = 2.0 * g[0] / a.len() as f64;
            let diff: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * scale)
                .collect();
            let gb = needs[1].then(|| diff.iter().map(|v| -v).collect());
            vec![needs[0].then_some(diff), gb]
        }
        Primitive::BinaryCrossEntropy {
            targets,
            pos_weight,
        } => {
            let n = x[0].len() as f64;
            let d = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&q, &t)| {
                    let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    -g[0] * (pos_weight * t / q - (1.0 - t) / (1.0 - q)) / n
                })
                .collect();
            vec![Some(d)]
        }
    }
}
