//! Procedural V-WSD datasets, JSON-lines manifests and a SemEval-layout loader.
//!
//! Every word owns a visual pattern (family and scale) and each of its senses
//! renders that pattern at its own base intensity. Samples pair a short
//! context phrase with 10 candidate images: the gold sense, other senses of
//! the same word, senses of other words that share a context word, and random
//! distractors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Sense, SynsetTable};
use crate::error::{Error, Result};
use crate::rng::{derive, StreamKind};
use crate::vision::Image;

pub const NUM_CANDIDATES: usize = 10;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternFamily {
    Stripes,
    Checkerboard,
    Gradient,
    Blob,
}

const FAMILIES: [PatternFamily; 4] = [
    PatternFamily::Stripes,
    PatternFamily::Checkerboard,
    PatternFamily::Gradient,
    PatternFamily::Blob,
];

/// Visual prototype of one sense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub family: PatternFamily,
    /// Degrees; 0 makes stripes and gradients vary down the rows only.
    pub orientation: f64,
    /// Cycles across the image for periodic families, blob radius otherwise.
    pub frequency: f64,
    /// Blob centre as fractions of the image side.
    pub position: (f64, f64),
    /// Base intensity.
    pub level: f64,
    /// Pattern contrast around the base intensity.
    pub amplitude: f64,
}

impl Prototype {
    /// Pattern value in `[-1, 1]` at normalized coordinates.
    fn pattern(&self, u: f64, v: f64) -> f64 {
        let theta = self.orientation.to_radians();
        let t = v * theta.cos() + u * theta.sin();
        let square = |x: f64| {
            if (2.0 * std::f64::consts::PI * x).sin() >= 0.0 {
                1.0
            } else {
                -1.0
            }
        };
        match self.family {
            PatternFamily::Stripes => square(self.frequency * t),
            PatternFamily::Checkerboard => square(self.frequency * u) * square(self.frequency * v),
            PatternFamily::Gradient => 2.0 * (self.frequency * t).fract() - 1.0,
            PatternFamily::Blob => {
                let (cu, cv) = self.position;
                let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                2.0 * (-d2 / (2.0 * self.frequency.powi(2))).exp() - 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenseSpec {
    pub word: String,
    pub sense_id: String,
    pub prototype: Prototype,
    pub context_pool: Vec<String>,
}

/// Prototype plus per-pixel Gaussian noise and a global brightness offset,
/// clamped to `[0, 1]` and quantized to 8 bits.
pub fn render_sense_image<R: Rng>(
    spec: &SenseSpec,
    side: usize,
    rng: &mut R,
    noise_sigma: f64,
    brightness_offset: f64,
) -> Image {
    let proto = &spec.prototype;
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("sigma >= 0"));
    let mut px = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let u = (c as f64 + 0.5) / side as f64;
            let v = (r as f64 + 0.5) / side as f64;
            let mut p = proto.level + proto.amplitude * proto.pattern(u, v) + brightness_offset;
            if let Some(n) = &noise {
                p += n.sample(rng);
            }
            px.push(p);
        }
    }
    Image::new(side, side, px)
        .expect("square raster")
        .quantized()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStorage {
    /// PGM files referenced by relative path.
    #[default]
    External,
    /// Pixel bytes embedded in the manifest.
    Inline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_words: usize,
    pub min_senses: usize,
    pub max_senses: usize,
    pub context_vocab: usize,
    /// Context words per sense.
    pub context_pool: usize,
    /// Synonyms per sense besides the head word.
    pub extra_synonyms: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub amplitude: f64,
    pub level_low: f64,
    pub level_high: f64,
    pub relational_mode: bool,
    /// Shared offsets are drawn from `U(-brightness_offset, brightness_offset)`.
    pub brightness_offset: f64,
    pub image_storage: ImageStorage,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_words: 8,
            min_senses: 2,
            max_senses: 4,
            context_vocab: 24,
            context_pool: 3,
            extra_synonyms: 1,
            train_samples: 4000,
            test_samples: 500,
            image_size: 32,
            noise_sigma: 0.03,
            amplitude: 0.12,
            level_low: 0.3,
            level_high: 0.7,
            relational_mode: false,
            brightness_offset: 0.18,
            image_storage: ImageStorage::External,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_words < 2 {
            return bad(format!(
                "num_words must be at least 2, got {}",
                self.num_words
            ));
        }
        if !(2..=4).contains(&self.min_senses) || !(self.min_senses..=4).contains(&self.max_senses)
        {
            return bad(format!(
                "senses per word must satisfy 2 <= min_senses <= max_senses <= 4, got {}..{}",
                self.min_senses, self.max_senses
            ));
        }
        if self.num_words * self.min_senses < NUM_CANDIDATES {
            return bad(format!(
                "num_words x min_senses = {} must be at least {NUM_CANDIDATES} so every candidate is a distinct sense",
                self.num_words * self.min_senses
            ));
        }
        if self.context_pool == 0 {
            return bad("context_pool must be positive".into());
        }
        if self.image_size < 4 {
            return bad(format!(
                "image_size must be at least 4, got {}",
                self.image_size
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("amplitude", self.amplitude),
            ("brightness_offset", self.brightness_offset),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.level_low)
            || !(0.0..=1.0).contains(&self.level_high)
            || self.level_low >= self.level_high
        {
            return bad(format!(
                "levels must satisfy 0 <= level_low < level_high <= 1, got {} and {}",
                self.level_low, self.level_high
            ));
        }
        Ok(())
    }
}

/// Sense inventory and the synset table derived from it.
#[derive(Clone, Debug)]
pub struct Inventory {
    pub senses: Vec<SenseSpec>,
    pub context_words: Vec<String>,
    pub synsets: SynsetTable,
}

impl Inventory {
    fn senses_of<'a>(&'a self, word: &'a str) -> impl Iterator<Item = (usize, &'a SenseSpec)> + 'a {
        self.senses
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.word == word)
    }
}

fn pseudo_words<R: Rng>(n: usize, taken: &mut BTreeSet<String>, rng: &mut R) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn word_prototype(index: usize, level: f64, amplitude: f64) -> Prototype {
    let family = FAMILIES[index % FAMILIES.len()];
    let scale = (index / FAMILIES.len()) as f64;
    let frequency = match family {
        PatternFamily::Stripes | PatternFamily::Checkerboard => 2.0 + 2.0 * scale,
        PatternFamily::Gradient => 1.0 + scale,
        PatternFamily::Blob => 0.3 / (1.0 + scale),
    };
    Prototype {
        family,
        orientation: 0.0,
        frequency,
        position: (0.5, 0.5),
        level,
        amplitude,
    }
}

pub fn build_inventory(cfg: &GenConfig, seed: u64) -> Result<Inventory> {
    cfg.validate()?;
    if cfg.max_senses * cfg.context_pool > cfg.context_vocab {
        return Err(Error::Generation(format!(
            "context pools must be disjoint across senses of a word: max_senses * context_pool = {} exceeds context_vocab = {}",
            cfg.max_senses * cfg.context_pool,
            cfg.context_vocab
        )));
    }
    let mut rng = derive(seed, StreamKind::Generate, "inventory");
    let mut taken = BTreeSet::new();
    let words = pseudo_words(cfg.num_words, &mut taken, &mut rng);
    let context_words = pseudo_words(cfg.context_vocab, &mut taken, &mut rng);
    let mut synsets = SynsetTable::new();
    let mut senses = Vec::new();
    for (i, word) in words.iter().enumerate() {
        let k = rng.random_range(cfg.min_senses..=cfg.max_senses);
        let mut pool: Vec<String> = context_words.clone();
        pool.shuffle(&mut rng);
        for s in 0..k {
            let level =
                cfg.level_low + (cfg.level_high - cfg.level_low) * s as f64 / (k - 1) as f64;
            let sense_id = format!("{word}.{:02}", s + 1);
            let context_pool = pool[s * cfg.context_pool..(s + 1) * cfg.context_pool].to_vec();
            let mut synonyms = vec![word.clone()];
            synonyms.extend(pseudo_words(cfg.extra_synonyms, &mut taken, &mut rng));
            synsets.insert(
                word,
                Sense {
                    id: sense_id.clone(),
                    synonyms,
                    gloss: context_pool.clone(),
                },
            )?;
            senses.push(SenseSpec {
                word: word.clone(),
                sense_id,
                prototype: word_prototype(i, level, cfg.amplitude),
                context_pool,
            });
        }
    }
    for c in &context_words {
        let mut synonyms = vec![c.clone()];
        synonyms.extend(pseudo_words(cfg.extra_synonyms, &mut taken, &mut rng));
        synsets.insert(
            c,
            Sense {
                id: format!("{c}.01"),
                synonyms,
                gloss: vec![],
            },
        )?;
    }
    Ok(Inventory {
        senses,
        context_words,
        synsets,
    })
}

/// One candidate image, with its manifest reference when stored externally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateImage {
    pub reference: Option<String>,
    pub height: usize,
    pub width: usize,
    pub bytes: Vec<u8>,
}

impl CandidateImage {
    pub fn from_image(img: &Image, reference: Option<String>) -> Self {
        Self {
            reference,
            height: img.height(),
            width: img.width(),
            bytes: img.to_bytes(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_bytes(self.height, self.width, &self.bytes).expect("validated raster")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    pub target: String,
    pub target_index: usize,
    pub images: Vec<CandidateImage>,
    pub gold: usize,
    pub sense_id: String,
}

impl Sample {
    pub fn candidate_images(&self) -> Vec<Image> {
        self.images.iter().map(CandidateImage::to_image).collect()
    }

    fn validate(&self) -> Result<()> {
        let err = |msg: String| {
            Err(Error::Sample {
                id: self.id.clone(),
                msg,
            })
        };
        if self.images.len() != NUM_CANDIDATES {
            return err(format!(
                "expected {NUM_CANDIDATES} images, found {}",
                self.images.len()
            ));
        }
        if self.gold >= NUM_CANDIDATES {
            return err(format!(
                "gold index {} out of range [0, {NUM_CANDIDATES})",
                self.gold
            ));
        }
        if self.tokens.get(self.target_index) != Some(&self.target) {
            return err(format!(
                "target {:?} is not at target_index {} of {:?}",
                self.target, self.target_index, self.tokens
            ));
        }
        let (h, w) = (self.images[0].height, self.images[0].width);
        for img in &self.images {
            if (img.height, img.width) != (h, w) || img.height == 0 || img.width == 0 {
                return err(format!(
                    "candidate images must share one non-empty size, found {}x{} and {}x{}",
                    h, w, img.height, img.width
                ));
            }
            if img.bytes.len() != img.height * img.width {
                return err("image byte count does not match its size".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: String,
    pub image_storage: ImageStorage,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    schema_version: u32,
    split: String,
    image_storage: ImageStorage,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageRecord {
    Path(String),
    Inline {
        height: usize,
        width: usize,
        pixels: Vec<u8>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    tokens: Vec<String>,
    target: String,
    target_index: usize,
    images: Vec<ImageRecord>,
    gold: usize,
    sense_id: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported manifest schema version {}",
                self.schema_version
            )));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    msg: "duplicate sample id".into(),
                });
            }
            s.validate()?;
            if self.image_storage == ImageStorage::External
                && s.images.iter().any(|i| i.reference.is_none())
            {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    msg: "external storage requires a path for every image".into(),
                });
            }
        }
        Ok(())
    }

    /// JSON lines: a header object, then one object per sample.
    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let header = HeaderRecord {
            schema_version: self.schema_version,
            split: self.split.clone(),
            image_storage: self.image_storage,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            let images = s
                .images
                .iter()
                .map(|img| match self.image_storage {
                    ImageStorage::External => {
                        ImageRecord::Path(img.reference.clone().expect("validated"))
                    }
                    ImageStorage::Inline => ImageRecord::Inline {
                        height: img.height,
                        width: img.width,
                        pixels: img.bytes.clone(),
                    },
                })
                .collect();
            let rec = SampleRecord {
                id: s.id.clone(),
                tokens: s.tokens.clone(),
                target: s.target.clone(),
                target_index: s.target_index,
                images,
                gold: s.gold,
                sense_id: s.sense_id.clone(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the manifest only; external images are written by [`write_dataset`].
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Parses and fully validates a manifest. External image paths resolve
    /// relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let line_err = |line: usize, msg: String| Error::Line {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| line_err(1, "empty manifest".into()))?;
        let header: HeaderRecord =
            serde_json::from_str(first).map_err(|e| line_err(1, format!("invalid header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(line_err(
                1,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord =
                serde_json::from_str(line).map_err(|e| line_err(i + 1, e.to_string()))?;
            let mut images = Vec::with_capacity(rec.images.len());
            for img in rec.images {
                images.push(match (header.image_storage, img) {
                    (ImageStorage::External, ImageRecord::Path(p)) => {
                        let full = base.join(&p);
                        if !full.is_file() {
                            return Err(Error::Sample {
                                id: rec.id,
                                msg: format!("missing image file {}", full.display()),
                            });
                        }
                        let loaded = Image::load_pgm(&full).map_err(|e| Error::Sample {
                            id: rec.id.clone(),
                            msg: e.to_string(),
                        })?;
                        CandidateImage::from_image(&loaded, Some(p))
                    }
                    (
                        ImageStorage::Inline,
                        ImageRecord::Inline {
                            height,
                            width,
                            pixels,
                        },
                    ) => CandidateImage {
                        reference: None,
                        height,
                        width,
                        bytes: pixels,
                    },
                    _ => {
                        return Err(Error::Sample {
                            id: rec.id,
                            msg: format!(
                                "image record does not match storage mode {:?}",
                                header.image_storage
                            ),
                        })
                    }
                });
            }
            samples.push(Sample {
                id: rec.id,
                tokens: rec.tokens,
                target: rec.target,
                target_index: rec.target_index,
                images,
                gold: rec.gold,
                sense_id: rec.sense_id,
            });
        }
        let m = Self {
            schema_version: header.schema_version,
            split: header.split,
            image_storage: header.image_storage,
            samples,
        };
        m.validate()?;
        Ok(m)
    }
}

/// A dataset directory: `train.jsonl`, `test.jsonl`, `synsets.tsv`, `images/`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub synsets: SynsetTable,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in [&ds.train, &ds.test] {
        if m.image_storage == ImageStorage::External {
            for s in &m.samples {
                for img in &s.images {
                    let rel = img.reference.as_ref().ok_or_else(|| Error::Sample {
                        id: s.id.clone(),
                        msg: "external storage requires a path for every image".into(),
                    })?;
                    let path = dir.join(rel);
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    img.to_image().save_pgm(&path)?;
                }
            }
        }
        m.save(&dir.join(format!("{}.jsonl", m.split)))?;
    }
    ds.synsets.save(&dir.join("synsets.tsv"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        synsets: SynsetTable::load(&dir.join("synsets.tsv"))?,
        train: DatasetManifest::load(&dir.join("train.jsonl"))?,
        test: DatasetManifest::load(&dir.join("test.jsonl"))?,
    })
}

fn generate_sample(
    inv: &Inventory,
    cfg: &GenConfig,
    seed: u64,
    split: &str,
    index: usize,
) -> Result<Sample> {
    let id = format!("{split}-{index:06}");
    let mut rng = derive(seed, StreamKind::Generate, &id);
    let gold_sense = rng.random_range(0..inv.senses.len());
    let spec = &inv.senses[gold_sense];
    let word = spec.word.as_str();
    let own: Vec<usize> = inv.senses_of(word).map(|(i, _)| i).collect();

    let shares = |c: &String| {
        inv.senses
            .iter()
            .any(|s| s.word != word && s.context_pool.contains(c))
    };
    let shared: Vec<&String> = spec.context_pool.iter().filter(|c| shares(c)).collect();
    let first = *shared.choose(&mut rng).ok_or_else(|| {
        Error::Generation(format!(
            "no context word of sense {} is shared with another word, so no context confounder exists",
            spec.sense_id
        ))
    })?;
    let mut context = vec![first.clone()];
    if rng.random_bool(0.5) {
        let rest: Vec<&String> = spec.context_pool.iter().filter(|c| *c != first).collect();
        if let Some(c) = rest.choose(&mut rng) {
            context.push((*c).clone());
        }
    }
    let target_index = rng.random_range(0..=context.len());
    let mut tokens = context.clone();
    tokens.insert(target_index, word.to_string());

    let mut others: Vec<usize> = own.iter().copied().filter(|&i| i != gold_sense).collect();
    others.shuffle(&mut rng);
    let n_same = rng.random_range(2..=3).min(others.len());
    let mut picks: Vec<usize> = others[..n_same].to_vec();

    let mut ctx_senses: Vec<usize> = inv
        .senses
        .iter()
        .enumerate()
        .filter(|(_, s)| s.word != word && s.context_pool.iter().any(|c| context.contains(c)))
        .map(|(i, _)| i)
        .collect();
    ctx_senses.shuffle(&mut rng);
    let n_ctx = rng.random_range(2..=3).min(ctx_senses.len());
    picks.extend_from_slice(&ctx_senses[..n_ctx]);
    let mut foreign: Vec<usize> = (0..inv.senses.len())
        .filter(|&i| inv.senses[i].word != word && !picks.contains(&i))
        .collect();
    foreign.shuffle(&mut rng);
    let missing = (NUM_CANDIDATES - 1).saturating_sub(picks.len());
    if foreign.len() < missing {
        return Err(Error::Generation(format!(
            "sample {id} needs {NUM_CANDIDATES} distinct senses but only {} are available",
            1 + picks.len() + foreign.len()
        )));
    }
    picks.extend_from_slice(&foreign[..missing]);
    picks.shuffle(&mut rng);
    let gold = rng.random_range(0..NUM_CANDIDATES);
    picks.insert(gold, gold_sense);

    let mut render = derive(seed, StreamKind::Render, &id);
    let offset = if cfg.relational_mode && cfg.brightness_offset > 0.0 {
        render.random_range(-cfg.brightness_offset..=cfg.brightness_offset)
    } else {
        0.0
    };
    let images = picks
        .iter()
        .enumerate()
        .map(|(k, &si)| {
            let img = render_sense_image(
                &inv.senses[si],
                cfg.image_size,
                &mut render,
                cfg.noise_sigma,
                offset,
            );
            let reference = (cfg.image_storage == ImageStorage::External)
                .then(|| format!("images/{split}/{id}_{k}.pgm"));
            CandidateImage::from_image(&img, reference)
        })
        .collect();
    Ok(Sample {
        id,
        tokens,
        target: word.to_string(),
        target_index,
        images,
        gold,
        sense_id: spec.sense_id.clone(),
    })
}

fn generate_split(
    inv: &Inventory,
    cfg: &GenConfig,
    seed: u64,
    split: &str,
    n: usize,
) -> Result<DatasetManifest> {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(inv, cfg, seed, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        split: split.to_string(),
        image_storage: cfg.image_storage,
        samples,
    })
}

/// Train and test splits; a pure function of `(cfg, seed)`.
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    let inv = build_inventory(cfg, seed)?;
    Ok(Dataset {
        train: generate_split(&inv, cfg, seed, "train", cfg.train_samples)?,
        test: generate_split(&inv, cfg, seed, "test", cfg.test_samples)?,
        synsets: inv.synsets,
    })
}

/// Held-out perturbation of a split: random quarter turns, flips and extra
/// pixel noise on every candidate, and context words swapped for synonyms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub noise_sigma: f64,
    pub rotate: bool,
    pub flip: bool,
    pub p_synonym: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            rotate: true,
            flip: true,
            p_synonym: 0.5,
        }
    }
}

pub fn perturb_split(
    m: &DatasetManifest,
    synsets: &SynsetTable,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&cfg.p_synonym)
        || !cfg.noise_sigma.is_finite()
        || cfg.noise_sigma < 0.0
    {
        return Err(Error::Config(format!(
            "invalid perturbation settings {cfg:?}"
        )));
    }
    let samples = m
        .samples
        .par_iter()
        .map(|s| {
            let mut rng = derive(seed, StreamKind::TestNoise, &s.id);
            let tokens = s
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let syns = synsets
                        .senses(t)
                        .filter(|_| i != s.target_index && !synsets.is_ambiguous(t));
                    match syns {
                        Some(senses) if rng.random_bool(cfg.p_synonym) => senses[0]
                            .synonyms
                            .choose(&mut rng)
                            .expect("non-empty")
                            .clone(),
                        _ => t.clone(),
                    }
                })
                .collect();
            let images = s
                .images
                .iter()
                .map(|c| {
                    let mut img = c.to_image();
                    if cfg.rotate {
                        img = augment::rotate(&img, 90 * rng.random_range(0..4u32));
                    }
                    if cfg.flip && rng.random_bool(0.5) {
                        img = augment::flip_horizontal(&img);
                    }
                    img = augment::add_noise(&img, cfg.noise_sigma, &mut rng).quantized();
                    CandidateImage::from_image(&img, None)
                })
                .collect();
            Sample {
                tokens,
                images,
                ..s.clone()
            }
        })
        .collect();
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        split: format!("{}-perturbed", m.split),
        image_storage: ImageStorage::Inline,
        samples,
    })
}

/// Loads `{split}.data.v1.txt`, `{split}.gold.v1.txt` and the images in
/// `{split}_images_v1/`. Data rows are `word<TAB>phrase<TAB>img1 … img10`;
/// the gold file holds one filename per data row. Images are converted to
/// grayscale and resized to `side × side` by nearest-neighbour sampling.
pub fn load_semeval_layout(dir: &Path, split: &str, side: usize) -> Result<DatasetManifest> {
    let data_path = dir.join(format!("{split}.data.v1.txt"));
    let gold_path = dir.join(format!("{split}.gold.v1.txt"));
    let image_dir = dir.join(format!("{split}_images_v1"));
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let data = read(&data_path)?;
    let gold_text = read(&gold_path)?;
    let golds: Vec<&str> = gold_text.lines().collect();
    let mut cache: BTreeMap<String, CandidateImage> = BTreeMap::new();
    let mut samples = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let lineno = i + 1;
        let err = |path: &Path, msg: String| Error::Line {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 + NUM_CANDIDATES {
            return Err(err(
                &data_path,
                format!(
                    "expected {} tab-separated columns (word, phrase, {NUM_CANDIDATES} images), found {}",
                    2 + NUM_CANDIDATES,
                    cols.len()
                ),
            ));
        }
        let target = cols[0].trim();
        let tokens: Vec<String> = cols[1].split_whitespace().map(str::to_string).collect();
        let target_index = tokens.iter().position(|t| t == target).ok_or_else(|| {
            err(
                &data_path,
                format!("target {target:?} does not occur in phrase {:?}", cols[1]),
            )
        })?;
        let gold_name = golds
            .get(i)
            .map(|g| g.trim())
            .filter(|g| !g.is_empty())
            .ok_or_else(|| err(&gold_path, "missing gold entry".into()))?;
        let names: Vec<&str> = cols[2..].iter().map(|c| c.trim()).collect();
        let gold = names.iter().position(|n| *n == gold_name).ok_or_else(|| {
            err(
                &gold_path,
                format!("gold image {gold_name:?} is not among the row's candidates"),
            )
        })?;
        let mut images = Vec::with_capacity(NUM_CANDIDATES);
        for name in &names {
            if let Some(c) = cache.get(*name) {
                images.push(c.clone());
                continue;
            }
            let path = image_dir.join(name);
            let decoded = image::open(&path)
                .map_err(|e| {
                    err(
                        &data_path,
                        format!("cannot read image {}: {e}", path.display()),
                    )
                })?
                .to_luma8();
            let resized = image::imageops::resize(
                &decoded,
                side as u32,
                side as u32,
                image::imageops::FilterType::Nearest,
            );
            let c = CandidateImage {
                reference: None,
                height: side,
                width: side,
                bytes: resized.into_raw(),
            };
            cache.insert(name.to_string(), c.clone());
            images.push(c);
        }
        samples.push(Sample {
            id: format!("{split}-{lineno:06}"),
            tokens,
            target: target.to_string(),
            target_index,
            images,
            gold,
            sense_id: gold_name.to_string(),
        });
    }
    if golds.iter().filter(|g| !g.trim().is_empty()).count() > samples.len() {
        return Err(Error::Line {
            path: gold_path,
            line: samples.len() + 1,
            msg: "gold entry without a data row".into(),
        });
    }
    let m = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        split: split.to_string(),
        image_storage: ImageStorage::Inline,
        samples,
    };
    m.validate()?;
    Ok(m)
}
