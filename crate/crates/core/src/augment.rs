//! Sense inventory, text augmentation (substitution, insertion, deletion,
//! pivot-table back translation) and image augmentation (quarter-turn
//! rotation, horizontal flip, Gaussian noise).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::Image;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sense {
    pub id: String,
    pub synonyms: Vec<String>,
    pub gloss: Vec<String>,
}

/// Word → senses, each with its synonym list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynsetTable {
    words: BTreeMap<String, Vec<Sense>>,
}

impl SynsetTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, sense: Sense) -> Result<()> {
        if sense.synonyms.is_empty() {
            return Err(Error::Input(format!(
                "sense {} of {word} has no synonyms",
                sense.id
            )));
        }
        let senses = self.words.entry(word.to_string()).or_default();
        if senses.iter().any(|s| s.id == sense.id) {
            return Err(Error::Input(format!(
                "duplicate sense {} for {word}",
                sense.id
            )));
        }
        senses.push(sense);
        Ok(())
    }

    pub fn senses(&self, word: &str) -> Option<&[Sense]> {
        self.words.get(word).map(Vec::as_slice)
    }

    pub fn sense(&self, word: &str, id: &str) -> Option<&Sense> {
        self.senses(word)?.iter().find(|s| s.id == id)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains_key(word)
    }

    pub fn is_ambiguous(&self, word: &str) -> bool {
        self.senses(word).is_some_and(|s| s.len() >= 2)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Sense])> {
        self.words.iter().map(|(w, s)| (w.as_str(), s.as_slice()))
    }

    /// Head words, synonyms and gloss tokens, sorted and deduplicated.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut all = BTreeSet::new();
        for (w, senses) in &self.words {
            all.insert(w.clone());
            for s in senses {
                all.extend(s.synonyms.iter().cloned());
                all.extend(s.gloss.iter().cloned());
            }
        }
        all.into_iter().collect()
    }

    /// `word<TAB>sense_id<TAB>syn,syn,…[<TAB>gloss tokens]`, one sense per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, senses) in &self.words {
            for s in senses {
                out.push_str(&format!("{w}\t{}\t{}", s.id, s.synonyms.join(",")));
                if !s.gloss.is_empty() {
                    out.push('\t');
                    out.push_str(&s.gloss.join(" "));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(err(format!(
                    "expected 3 or 4 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            if cols[0].is_empty() || cols[1].is_empty() {
                return Err(err("empty word or sense id".into()));
            }
            let synonyms: Vec<String> = cols[2].split(',').map(str::to_string).collect();
            if synonyms.iter().any(String::is_empty) {
                return Err(err("empty synonym".into()));
            }
            let gloss = cols
                .get(3)
                .map(|g| g.split_whitespace().map(str::to_string).collect())
                .unwrap_or_default();
            table
                .insert(
                    cols[0],
                    Sense {
                        id: cols[1].to_string(),
                        synonyms,
                        gloss,
                    },
                )
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Word-level stand-in for a translation round trip through one pivot language.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PivotTable {
    pub forward: BTreeMap<String, String>,
    pub reverse: BTreeMap<String, String>,
}

impl PivotTable {
    /// Collapse tables: every member of a synonym group of unambiguous words
    /// maps to one pivot form, which maps back to a single member picked by
    /// `variant`. Ambiguous words are left out and pass through unchanged.
    pub fn from_synsets(table: &SynsetTable, name: &str, variant: usize) -> Self {
        let mut pt = Self::default();
        let mut group = 0;
        for (_, senses) in table.iter() {
            for s in senses {
                let members: Vec<&String> = s
                    .synonyms
                    .iter()
                    .filter(|w| !table.is_ambiguous(w) && !pt.forward.contains_key(*w))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let form = format!("{name}{group:04}");
                group += 1;
                for w in &members {
                    pt.forward.insert((*w).clone(), form.clone());
                }
                pt.reverse
                    .insert(form, members[variant % members.len()].clone());
            }
        }
        pt
    }

    pub fn translate(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| {
                self.forward
                    .get(t)
                    .and_then(|f| self.reverse.get(f))
                    .unwrap_or(t)
                    .clone()
            })
            .collect()
    }

    fn pairs_to_tsv(map: &BTreeMap<String, String>) -> String {
        map.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    fn pairs_from_tsv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| err("expected two tab-separated columns"))?;
            if a.is_empty() || b.is_empty() || b.contains('\t') {
                return Err(err("expected two non-empty tab-separated columns"));
            }
            if map.insert(a.to_string(), b.to_string()).is_some() {
                return Err(err("duplicate key"));
            }
        }
        Ok(map)
    }

    /// Writes `{dir}/{name}.fwd.tsv` and `{dir}/{name}.rev.tsv`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        for (suffix, map) in [("fwd", &self.forward), ("rev", &self.reverse)] {
            let path = dir.join(format!("{name}.{suffix}.tsv"));
            std::fs::write(&path, Self::pairs_to_tsv(map)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let read = |suffix: &str| -> Result<BTreeMap<String, String>> {
            let path = dir.join(format!("{name}.{suffix}.tsv"));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Self::pairs_from_tsv(&text, &path)
        };
        Ok(Self {
            forward: read("fwd")?,
            reverse: read("rev")?,
        })
    }
}

/// Named pivot tables.
pub type PivotSet = BTreeMap<String, PivotTable>;

/// Pivot tables for `names`, built from the synset table with a distinct
/// return variant per pivot.
pub fn default_pivots(table: &SynsetTable, names: &[String]) -> PivotSet {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), PivotTable::from_synsets(table, n, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Enables the text pipeline on training samples.
    pub text: bool,
    /// Enables the image pipeline on training candidates.
    pub image: bool,
    pub p_substitute: f64,
    pub p_insert: f64,
    pub n_insert: usize,
    pub p_delete: f64,
    pub p_back_translate: f64,
    pub pivots: Vec<String>,
    /// Allowed rotations in degrees, multiples of 90.
    pub rotations: Vec<u32>,
    pub flip_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            text: true,
            image: true,
            p_substitute: 0.3,
            p_insert: 0.3,
            n_insert: 1,
            p_delete: 0.1,
            p_back_translate: 0.3,
            pivots: vec!["fa".into(), "it".into()],
            rotations: vec![0, 90, 180, 270],
            flip_prob: 0.5,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Every operation disabled.
    pub fn none() -> Self {
        Self {
            text: false,
            image: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_substitute", self.p_substitute),
            ("p_insert", self.p_insert),
            ("p_delete", self.p_delete),
            ("p_back_translate", self.p_back_translate),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| r % 90 != 0 || *r >= 360) {
            return Err(Error::Config(format!(
                "rotations must be a non-empty subset of {{0, 90, 180, 270}}, got {:?}",
                self.rotations
            )));
        }
        if self.text && self.p_back_translate > 0.0 && self.pivots.is_empty() {
            return Err(Error::Config(
                "back translation enabled without pivots".into(),
            ));
        }
        Ok(())
    }
}

/// Inserts up to `n_insert` synonyms of unambiguous content words found in the
/// sentence, each at an independently drawn position. The target word is never
/// used as an anchor. Returns the tokens and the target's new index.
///
/// Insertions beyond `max_len` are dropped with a warning. A sentence without
/// any anchor is returned unchanged.
pub fn random_insertion<R: Rng>(
    tokens: &[String],
    target: usize,
    n_insert: usize,
    table: &SynsetTable,
    max_len: usize,
    rng: &mut R,
) -> (Vec<String>, usize) {
    let mut out = tokens.to_vec();
    let mut target = target;
    let room = max_len.saturating_sub(tokens.len());
    let n = if n_insert > room {
        log::warn!("random_insertion: {n_insert} insertions requested, only {room} fit within {max_len} tokens");
        room
    } else {
        n_insert
    };
    let pool: Vec<&String> = tokens
        .iter()
        .enumerate()
        .filter(|&(i, w)| i != target && table.contains(w) && !table.is_ambiguous(w))
        .flat_map(|(_, w)| &table.senses(w).expect("checked")[0].synonyms)
        .collect();
    if pool.is_empty() {
        return (out, target);
    }
    for _ in 0..n {
        let word = (*pool.choose(rng).expect("non-empty")).clone();
        let pos = rng.random_range(0..=out.len());
        if pos <= target {
            target += 1;
        }
        out.insert(pos, word);
    }
    (out, target)
}

/// Drops every non-target token independently with probability `p_delete`.
pub fn random_deletion<R: Rng>(
    tokens: &[String],
    p_delete: f64,
    target: usize,
    rng: &mut R,
) -> (Vec<String>, usize) {
    let mut out = Vec::with_capacity(tokens.len());
    let mut new_target = 0;
    for (i, t) in tokens.iter().enumerate() {
        let drop = i != target && rng.random_bool(p_delete);
        if i == target {
            new_target = out.len();
        }
        if !drop {
            out.push(t.clone());
        }
    }
    (out, new_target)
}

/// Round trip through the named pivot's tables.
pub fn back_translate(tokens: &[String], pivot: &str, pivots: &PivotSet) -> Result<Vec<String>> {
    let table = pivots
        .get(pivot)
        .ok_or_else(|| Error::Config(format!("unknown pivot {pivot:?}")))?;
    Ok(table.translate(tokens))
}

/// Replaces the target with a uniformly drawn synonym of `sense` (or of a
/// uniformly drawn sense when `None`).
pub fn lexical_substitute<R: Rng>(
    tokens: &[String],
    target: usize,
    table: &SynsetTable,
    sense: Option<&str>,
    rng: &mut R,
) -> Result<Vec<String>> {
    let word = tokens
        .get(target)
        .ok_or_else(|| Error::Input(format!("target index {target} out of range")))?;
    let senses = table
        .senses(word)
        .ok_or_else(|| Error::Input(format!("{word:?} is not in the synset table")))?;
    let chosen = match sense {
        Some(id) => senses
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Input(format!("{word:?} has no sense {id:?}")))?,
        None => senses.choose(rng).expect("senses are non-empty"),
    };
    let mut out = tokens.to_vec();
    out[target] = chosen
        .synonyms
        .choose(rng)
        .expect("synonyms are non-empty")
        .clone();
    Ok(out)
}

/// Substitution, insertion, deletion and back translation, each applied with
/// its configured probability.
pub fn augment_text<R: Rng>(
    tokens: &[String],
    target: usize,
    sense: Option<&str>,
    table: &SynsetTable,
    pivots: &PivotSet,
    cfg: &AugmentConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<String>, usize)> {
    let mut toks = tokens.to_vec();
    let mut target = target;
    if rng.random_bool(cfg.p_substitute) && table.contains(&toks[target]) {
        toks = lexical_substitute(&toks, target, table, sense, rng)?;
    }
    if rng.random_bool(cfg.p_insert) {
        (toks, target) = random_insertion(&toks, target, cfg.n_insert, table, max_len, rng);
    }
    (toks, target) = random_deletion(&toks, cfg.p_delete, target, rng);
    if rng.random_bool(cfg.p_back_translate) {
        let pivot = cfg.pivots.choose(rng).expect("validated non-empty");
        toks = back_translate(&toks, pivot, pivots)?;
    }
    Ok((toks, target))
}

/// Quarter turn clockwise.
pub fn rotate90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut px = Vec::with_capacity(h * w);
    for r in 0..w {
        for c in 0..h {
            px.push(img.get(h - 1 - c, r));
        }
    }
    Image::new(w, h, px).expect("same pixel count")
}

pub fn rotate(img: &Image, degrees: u32) -> Image {
    let mut out = img.clone();
    for _ in 0..(degrees / 90) % 4 {
        out = rotate90(&out);
    }
    out
}

/// Mirror left to right.
pub fn flip_horizontal(img: &Image) -> Image {
    let rows: Vec<Vec<f64>> = img
        .rows()
        .into_iter()
        .map(|mut r| {
            r.reverse();
            r
        })
        .collect();
    Image::from_rows(&rows).expect("same shape")
}

/// Adds N(0, sigma²) per pixel and clamps to [0, 1].
pub fn add_noise<R: Rng>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let px = img
        .pixels()
        .iter()
        .map(|&p| p + normal.sample(rng))
        .collect();
    Image::new(img.height(), img.width(), px).expect("same shape")
}

/// Rotation from the allowed set, then a flip with `flip_prob`, then noise.
pub fn augment_image<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let deg = *cfg.rotations.choose(rng).unwrap_or(&0);
    let mut out = rotate(img, deg);
    if rng.random_bool(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    add_noise(&out, cfg.noise_sigma, rng)
}

pub fn dot_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(
            "dot_similarity",
            format!("{} vs {} entries", u.len(), v.len()),
        ));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}
