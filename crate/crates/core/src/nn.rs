//! Parameter storage and the layers shared by the encoders and fusion heads.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Overwrites an existing parameter with a value of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "set",
                format!("{name} is {:?}, value is {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn shape<'t>(&self, tape: &'t Tape, name: &str) -> Result<&'t [usize]> {
        Ok(tape.shape(self.var(name)?))
    }

    /// Replaces (or adds) the variable bound to `name`.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Parameter initialisation helpers writing into a [`ParamStore`].
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Xavier-uniform weight `[d_in, d_out]` and zero bias.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.weight(&format!("{prefix}.weight"), d_in, d_out);
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
    }

    /// Xavier-uniform matrix `[d_in, d_out]` stored under `name`.
    pub fn weight(&mut self, name: &str, d_in: usize, d_out: usize) {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = Tensor::uniform(&[d_in, d_out], bound, self.rng);
        self.store.insert(name.to_string(), w);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store
            .insert(format!("{prefix}.gain"), Tensor::ones(&[d]));
        self.store
            .insert(format!("{prefix}.shift"), Tensor::zeros(&[d]));
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize, std: f64) {
        self.store
            .insert(name.to_string(), Tensor::randn(&[rows, d], std, self.rng));
    }

    /// The key projection has no bias: it would shift every score in a
    /// softmax row by the same amount and never affect the output.
    pub fn attention(&mut self, prefix: &str, d: usize) {
        self.weight(&format!("{prefix}.qkv.weight"), d, 3 * d);
        self.store
            .insert(format!("{prefix}.qkv.bias_qv"), Tensor::zeros(&[2 * d]));
        self.linear(&format!("{prefix}.out"), d, d);
    }

    pub fn transformer_block(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d, hidden);
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, d);
    }
}

/// `x·W + b` over the last axis. Rank-1 inputs are treated as a single row.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let shape = tape.shape(x).to_vec();
    if shape.len() == 1 {
        let row = tape.reshape(x, vec![1, shape[0]])?;
        let y = tape.matmul(row, w)?;
        let y = tape.add(y, b)?;
        let d = tape.shape(y)[1];
        return tape.reshape(y, vec![d]);
    }
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gain"))?;
    let s = p.var(&format!("{prefix}.shift"))?;
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, g)?;
    tape.add(n, s)
}

pub fn mlp(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

pub struct Attention {
    pub out: Var,
    /// `[groups * heads, n, n]`, rows sum to one.
    pub weights: Var,
}

/// Multi-head self-attention applied independently to each group of `x: [groups, n, d]`.
pub fn self_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Attention> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(
            "self_attention",
            format!("expected [groups, n, d], got {shape:?}"),
        ));
    }
    let (g, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(
            "self_attention",
            format!("dim {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let qkv = tape.matmul(x, p.var(&format!("{prefix}.qkv.weight"))?)?;
    let b = p.var(&format!("{prefix}.qkv.bias_qv"))?;
    let bq = tape.slice(b, 0, 0, d)?;
    let bk = tape.constant(Tensor::zeros(&[d]));
    let bv = tape.slice(b, 0, d, 2 * d)?;
    let bias = tape.concat(&[bq, bk, bv])?;
    let qkv = tape.add(qkv, bias)?;
    let split = |tape: &mut Tape, i: usize| -> Result<Var> {
        let s = tape.slice(qkv, 2, i * d, (i + 1) * d)?;
        let s = tape.reshape(s, vec![g, n, heads, dh])?;
        let s = tape.transpose(s, 1, 2)?;
        tape.reshape(s, vec![g * heads, n, dh])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let v = split(tape, 2)?;
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.reshape(ctx, vec![g, heads, n, dh])?;
    let ctx = tape.transpose(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, vec![g, n, d])?;
    let out = linear(tape, p, &format!("{prefix}.out"), ctx)?;
    Ok(Attention { out, weights })
}

/// Pre-norm transformer block on `[groups, n, d]`.
pub fn transformer_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(tape, p, &format!("{prefix}.attn"), h, heads)?;
    let x = tape.add(x, a.out)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let m = mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}

/// Repeats a rank-1 `v: [d]` into `[n, d]`.
pub fn repeat_rows(tape: &mut Tape, v: Var, n: usize) -> Result<Var> {
    let d = tape.shape(v)[0];
    let row = tape.reshape(v, vec![1, d])?;
    tape.lookup(row, vec![0; n])
}

/// Stacks rank-2 tensors with equal width along the first axis, using
/// transposes around `concat_last`.
pub fn stack_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut ts = Vec::with_capacity(parts.len());
    for &p in parts {
        if tape.shape(p).len() != 2 {
            return Err(Error::dim("stack_rows", format!("{:?}", tape.shape(p))));
        }
        ts.push(tape.transpose(p, 0, 1)?);
    }
    let c = tape.concat(&ts)?;
    tape.transpose(c, 0, 1)
}
