//! Whitespace-token vocabulary and the small transformer text encoder.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary; duplicates and the reserved tokens are skipped,
    /// first occurrence order is kept.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        v.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::Input(
                "vocabulary must start with the reserved lines <pad> and <unk>".into(),
            ));
        }
        let v = Self::from_tokens(lines[2..].iter().copied());
        if v.len() != lines.len() {
            return Err(Error::Input("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Right-padded token ids plus the number of real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<usize>,
    pub len: usize,
}

pub fn tokenize<S: AsRef<str>>(
    phrase: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenIds> {
    if phrase.is_empty() {
        return Err(Error::Input("cannot tokenize an empty phrase".into()));
    }
    let mut ids: Vec<usize> = phrase
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(TokenIds { ids, len })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 64,
            max_len: 16,
        }
    }
}

impl TextEncoderConfig {
    /// The higher-capacity variant used by the `lm_capacity: large` ablation arm.
    pub fn large() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 4,
            mlp_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "text embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("text max_len must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn init_params<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    cfg: &TextEncoderConfig,
    vocab_size: usize,
) {
    let d = cfg.embed_dim;
    init.embedding(&format!("{prefix}.tok_embed"), vocab_size, d, 0.5);
    init.embedding(&format!("{prefix}.pos_embed"), cfg.max_len, d, 0.1);
    for l in 0..cfg.num_layers {
        init.transformer_block(&format!("{prefix}.layers.{l}"), d, cfg.mlp_hidden);
    }
}

/// Encoder outputs for one phrase.
pub struct TextOutput {
    /// `[len, d_t]` contextual states of the real (non-pad) tokens.
    pub tokens: Var,
    /// `[d_t]` mean over the real tokens.
    pub pooled: Var,
}

/// The real (non-pad) prefix of a right-padded id sequence.
pub fn real_ids(ids: &[usize]) -> Result<&[usize]> {
    let len = ids.iter().take_while(|&&i| i != PAD_ID).count();
    if len == 0 {
        return Err(Error::Input("token sequence is all padding".into()));
    }
    if ids[len..].iter().any(|&i| i != PAD_ID) {
        return Err(Error::Input(
            "padding must only appear at the end of a sequence".into(),
        ));
    }
    Ok(&ids[..len])
}

/// Token embedding plus learned position embedding for the real tokens.
pub fn embed_tokens(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &TextEncoderConfig,
    ids: &[usize],
) -> Result<Var> {
    let real = real_ids(ids)?;
    if real.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "{} tokens exceed max_len {}",
            real.len(),
            cfg.max_len
        )));
    }
    let tok = tape.lookup(p.var(&format!("{prefix}.tok_embed"))?, real.to_vec())?;
    let pos = tape.lookup(
        p.var(&format!("{prefix}.pos_embed"))?,
        (0..real.len()).collect(),
    )?;
    tape.add(tok, pos)
}

/// Encodes right-padded ids.
///
/// Padding positions are dropped before attention, which is exactly
/// equivalent to masking them as keys and excluding them from the mean.
pub fn encode_text(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &TextEncoderConfig,
    ids: &[usize],
) -> Result<TextOutput> {
    let x = embed_tokens(tape, p, prefix, cfg, ids)?;
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let mut h = tape.reshape(x, vec![1, n, d])?;
    for l in 0..cfg.num_layers {
        h = nn::transformer_block(tape, p, &format!("{prefix}.layers.{l}"), h, cfg.num_heads)?;
    }
    let tokens = tape.reshape(h, vec![n, d])?;
    let pooled = tape.mean_axis(tokens, 0)?;
    Ok(TextOutput { tokens, pooled })
}
