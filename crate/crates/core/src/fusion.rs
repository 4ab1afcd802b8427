//! Modality projections and the three ways of combining text with each candidate image.
//!
//! All fusion functions work on the `n` candidates of one sample at once and
//! return an `[n, fused_dim]` matrix, text features first.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn key(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Late,
    Early,
    CrossAttention,
}

impl FusionStrategy {
    pub fn fused_dim(self, proj_dim: usize) -> usize {
        match self {
            FusionStrategy::Early => proj_dim,
            FusionStrategy::Late | FusionStrategy::CrossAttention => 2 * proj_dim,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Late => "late",
            FusionStrategy::Early => "early",
            FusionStrategy::CrossAttention => "cross_attention",
        })
    }
}

/// Shared encoder used by early fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyFusionConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Longest allowed text + patch sequence.
    pub max_len: usize,
}

impl Default for EarlyFusionConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_heads: 4,
            mlp_hidden: 64,
            max_len: 96,
        }
    }
}

/// Text and image projections, `d_text → d_p` and `d_image → d_p`.
pub fn init_projections<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    d_text: usize,
    d_image: usize,
    d_p: usize,
) {
    init.linear(&format!("{prefix}.text"), d_text, d_p);
    init.linear(&format!("{prefix}.image"), d_image, d_p);
}

pub fn init_early<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    d_p: usize,
    cfg: &EarlyFusionConfig,
) {
    init.embedding(&format!("{prefix}.type_text"), 1, d_p, 0.1);
    init.embedding(&format!("{prefix}.type_image"), 1, d_p, 0.1);
    for b in 0..cfg.num_blocks {
        init.transformer_block(&format!("{prefix}.blocks.{b}"), d_p, cfg.mlp_hidden);
    }
}

/// Query, key and value maps for both directions. Keys have no bias term.
pub fn init_cross_attention<R: Rng>(init: &mut Init<'_, R>, prefix: &str, d_p: usize) {
    for side in ["t2i", "i2t"] {
        init.linear(&format!("{prefix}.{side}.q"), d_p, d_p);
        init.weight(&format!("{prefix}.{side}.k.weight"), d_p, d_p);
        init.linear(&format!("{prefix}.{side}.v"), d_p, d_p);
    }
}

/// Affine map of a `which` embedding (vector or rows) to the shared dimension.
pub fn project(tape: &mut Tape, p: &Bound, prefix: &str, which: Modality, u: Var) -> Result<Var> {
    let name = format!("{prefix}.{}", which.key());
    let want = p.shape(tape, &format!("{name}.weight"))?[0];
    let got = tape.shape(u).last().copied().unwrap_or(0);
    if got != want {
        return Err(Error::dim(
            "project",
            format!("{which} embedding has dimension {got}, projection expects {want}"),
        ));
    }
    nn::linear(tape, p, &name, u)
}

/// `[t; i]`, text first. Inputs are vectors or matrices of equal shape.
pub fn fuse_late(tape: &mut Tape, t: Var, i: Var) -> Result<Var> {
    if tape.shape(t) != tape.shape(i) {
        return Err(Error::dim(
            "fuse_late",
            format!("text {:?} and image {:?}", tape.shape(t), tape.shape(i)),
        ));
    }
    tape.concat(&[t, i])
}

/// Builds one `[text; patches_k]` sequence per candidate, adds modality-type
/// embeddings, runs the shared blocks and mean-pools.
///
/// `text_tokens` is `[len, d_p]`, `patch_tokens` is `[n, patches, d_p]`.
pub fn fuse_early(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &EarlyFusionConfig,
    text_tokens: Var,
    patch_tokens: Var,
) -> Result<Var> {
    let ts = tape.shape(text_tokens).to_vec();
    let ps = tape.shape(patch_tokens).to_vec();
    if ts.len() != 2 || ps.len() != 3 || ts[1] != ps[2] {
        return Err(Error::dim(
            "fuse_early",
            format!("text tokens {ts:?} with patch tokens {ps:?}"),
        ));
    }
    let (len, n, np, d) = (ts[0], ps[0], ps[1], ts[1]);
    if len + np > cfg.max_len {
        return Err(Error::Input(format!(
            "early fusion sequence of {} tokens exceeds the maximum of {}",
            len + np,
            cfg.max_len
        )));
    }
    let tt = p.var(&format!("{prefix}.type_text"))?;
    let tt = tape.reshape(tt, vec![d])?;
    let text = tape.add(text_tokens, tt)?;
    let ti = p.var(&format!("{prefix}.type_image"))?;
    let ti = tape.reshape(ti, vec![d])?;
    let patches = tape.add(patch_tokens, ti)?;
    let patches = tape.reshape(patches, vec![n * np, d])?;
    let all = nn::stack_rows(tape, &[text, patches])?;
    let mut ids = Vec::with_capacity(n * (len + np));
    for k in 0..n {
        ids.extend(0..len);
        ids.extend(len + k * np..len + (k + 1) * np);
    }
    let seq = tape.lookup(all, ids)?;
    let mut x = tape.reshape(seq, vec![n, len + np, d])?;
    for b in 0..cfg.num_blocks {
        x = nn::transformer_block(tape, p, &format!("{prefix}.blocks.{b}"), x, cfg.num_heads)?;
    }
    tape.mean_axis(x, 1)
}

pub struct CrossAttention {
    /// `[n, 2·d_p]`
    pub fused: Var,
    /// Text-to-image weights, `[n, 1, patches]`.
    pub text_weights: Var,
    /// Image-to-text weights, `[n, 1, len]`.
    pub image_weights: Var,
}

/// Single-head attention from `queries` `[n, d]` over `keys` `[n, m, d]` or a
/// shared `[m, d]`.
fn attend(tape: &mut Tape, p: &Bound, prefix: &str, queries: Var, seq: Var) -> Result<(Var, Var)> {
    let qs = tape.shape(queries).to_vec();
    let (n, d) = (qs[0], qs[1]);
    let q = nn::linear(tape, p, &format!("{prefix}.q"), queries)?;
    let q = tape.reshape(q, vec![n, 1, d])?;
    let k = tape.matmul(seq, p.var(&format!("{prefix}.k.weight"))?)?;
    let v = nn::linear(tape, p, &format!("{prefix}.v"), seq)?;
    let kt = if tape.shape(k).len() == 3 {
        tape.transpose(k, 1, 2)?
    } else {
        tape.transpose(k, 0, 1)?
    };
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let w = tape.softmax(scores)?;
    let out = tape.matmul(w, v)?;
    Ok((tape.reshape(out, vec![n, d])?, w))
}

/// Pooled text attends over each candidate's patch tokens and each pooled
/// image attends over the text tokens; the two results are concatenated.
///
/// Shapes: `t_seq` `[len, d_p]`, `i_seq` `[n, patches, d_p]`, `t_pooled`
/// `[d_p]`, `i_pooled` `[n, d_p]`.
pub fn fuse_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    t_seq: Var,
    i_seq: Var,
    t_pooled: Var,
    i_pooled: Var,
) -> Result<CrossAttention> {
    let (ts, is) = (tape.shape(t_seq).to_vec(), tape.shape(i_seq).to_vec());
    let (tp, ip) = (tape.shape(t_pooled).to_vec(), tape.shape(i_pooled).to_vec());
    let d = tp.first().copied().unwrap_or(0);
    let ok = ts.len() == 2
        && is.len() == 3
        && tp.len() == 1
        && ip.len() == 2
        && ip[0] == is[0]
        && [ts[1], is[2], ip[1]].iter().all(|&x| x == d);
    if !ok {
        return Err(Error::dim(
            "fuse_cross_attention",
            format!("text seq {ts:?}, image seq {is:?}, pooled text {tp:?}, pooled images {ip:?}"),
        ));
    }
    let n = is[0];
    let tq = nn::repeat_rows(tape, t_pooled, n)?;
    let (t_att, text_weights) = attend(tape, p, &format!("{prefix}.t2i"), tq, i_seq)?;
    let (i_att, image_weights) = attend(tape, p, &format!("{prefix}.i2t"), i_pooled, t_seq)?;
    Ok(CrossAttention {
        fused: tape.concat(&[t_att, i_att])?,
        text_weights,
        image_weights,
    })
}
