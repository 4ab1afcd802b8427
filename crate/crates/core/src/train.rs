//! Training loop, evaluation, checkpoints and the ablation runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentConfig, PivotSet, SynsetTable};
use crate::autodiff::Tensor;
use crate::data::{Dataset, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::head::{rank_and_metrics, MetricsReport};
use crate::model::{Model, ModelConfig, SampleInput};
use crate::nn::ParamStore;
use crate::rng::{derive, epoch_seed, StreamKind};
use crate::text::{TextEncoderConfig, Vocabulary};
use crate::vision::VisionArch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 24,
            optimizer: AdamConfig::default(),
            seed: 42,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                o.lr
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {o:?}")));
        }
        self.model.validate()?;
        self.augment.validate()
    }
}

/// Hex SHA-256 of the sorted-key JSON rendering of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let text = serde_json::to_string(&canonical)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with gradients in parameter name order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: MetricsReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// `epoch,train_loss,test_accuracy,test_mrr`. Wall-clock time is kept out
    /// so the file is reproducible; see [`RunHistory::write_timing_csv`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Input(format!("history csv: {e}"));
        w.write_record(["epoch", "train_loss", "test_accuracy", "test_mrr"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.test.accuracy.to_string(),
                e.test.mrr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Input(format!("history csv: {e}")))
    }

    /// `epoch,seconds`.
    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Input(format!("timing csv: {e}"));
        w.write_record(["epoch", "seconds"]).map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.3}", e.seconds)])
                .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Input(format!("timing csv: {e}")))
    }
}

/// Vocabulary of a dataset's synset table.
pub fn dataset_vocabulary(synsets: &SynsetTable) -> Vocabulary {
    Vocabulary::from_tokens(synsets.vocabulary())
}

/// Training-time view of one sample, augmented with streams keyed by the
/// epoch seed and the sample id.
pub fn augmented_input(
    s: &Sample,
    synsets: &SynsetTable,
    pivots: &PivotSet,
    cfg: &AugmentConfig,
    max_len: usize,
    seed: u64,
) -> Result<SampleInput> {
    let mut input = SampleInput::from_sample(s);
    if cfg.text {
        let mut rng = derive(seed, StreamKind::TextAugment, &s.id);
        let (tokens, _) = augment::augment_text(
            &s.tokens,
            s.target_index,
            Some(&s.sense_id),
            synsets,
            pivots,
            cfg,
            max_len,
            &mut rng,
        )?;
        input.tokens = tokens;
    }
    if cfg.image {
        let mut rng = derive(seed, StreamKind::ImageAugment, &s.id);
        input.images = input
            .images
            .iter()
            .map(|img| augment::augment_image(img, cfg, &mut rng))
            .collect();
    }
    Ok(input)
}

/// Scores every sample of a split with `scorer`, fanning out across the
/// rayon pool; results keep sample order.
pub fn score_split<F>(split: &DatasetManifest, scorer: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Sample) -> Result<Vec<f64>> + Sync + Send,
{
    split.samples.par_iter().map(scorer).collect()
}

/// Accuracy and MRR of `scorer` on a split.
pub fn evaluate_with<F>(
    split: &DatasetManifest,
    scorer: F,
    run_id: &str,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport>
where
    F: Fn(&Sample) -> Result<Vec<f64>> + Sync + Send,
{
    if split.samples.is_empty() {
        return Err(Error::Input(format!("split {} is empty", split.split)));
    }
    let scores = score_split(split, scorer)?;
    let golds: Vec<usize> = split.samples.iter().map(|s| s.gold).collect();
    let m = rank_and_metrics(&scores, &golds)?;
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        split: split.split.clone(),
        accuracy: m.accuracy,
        mrr: m.mrr,
        n_samples: split.samples.len(),
        seed,
        config_hash: config_hash.to_string(),
    })
}

/// Un-augmented evaluation of `model`.
pub fn evaluate(
    model: &Model,
    split: &DatasetManifest,
    run_id: &str,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    evaluate_with(
        split,
        |s| model.predict(&SampleInput::from_sample(s)),
        run_id,
        seed,
        config_hash,
    )
}

/// Mean loss over `inputs` and its gradient in parameter name order.
pub fn batch_gradients(model: &Model, inputs: &[SampleInput]) -> Result<(f64, Vec<Tensor>)> {
    if inputs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut acc: Vec<Tensor> = model
        .params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut total = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let (loss, grads) = model.loss_and_grads(input)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} on batch item {k}")));
        }
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += y);
        }
    }
    let scale = 1.0 / inputs.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, acc))
}

/// Trains `model` in place on `data.train`, evaluating on `eval` after every
/// epoch.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: &DatasetManifest,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<RunHistory> {
    cfg.validate()?;
    if data.train.samples.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let hash = config_hash(cfg)?;
    let pivots = augment::default_pivots(&data.synsets, &cfg.augment.pivots);
    let max_len = model.config.text.max_len;
    let mut adam = Adam::new(cfg.optimizer.clone(), &model.params);
    let mut history = RunHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let eseed = epoch_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.samples.len()).collect();
        order.shuffle(&mut derive(eseed, StreamKind::Shuffle, "order"));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let s = &data.train.samples[i];
                    augmented_input(s, &data.synsets, &pivots, &cfg.augment, max_len, eseed)
                })
                .collect::<Result<Vec<_>>>()?;
            let (batch_loss, acc) = batch_gradients(model, &inputs).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            loss_sum += batch_loss * batch.len() as f64;
            adam.update(&mut model.params, &acc)?;
        }
        let train_loss = loss_sum / data.train.samples.len() as f64;
        let test = evaluate(model, eval, run_id, cfg.seed, &hash)?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{run_id} epoch {}/{}: train loss {train_loss:.4}, {} accuracy {:.4}, mrr {:.4} ({seconds:.1}s)",
            epoch + 1,
            cfg.epochs,
            eval.split,
            test.accuracy,
            test.mrr
        );
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            test,
            seconds,
        });
    }
    Ok(history)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ARPACKPT";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config_hash: String,
    model: ModelConfig,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model: Model,
}

impl Checkpoint {
    /// `ARPACKPT`, the JSON header length as a little-endian `u64`, the
    /// header, then every tensor's values as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config_hash: self.config_hash.clone(),
            model: self.model.config.clone(),
            vocabulary: self.model.vocab.tokens().to_vec(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("invalid checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing ARPACKPT magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let vocab = Vocabulary::from_tokens(header.vocabulary.iter().cloned());
        if vocab.tokens() != header.vocabulary.as_slice() {
            return Err(bad(
                "vocabulary must start with the reserved tokens and contain no duplicates",
            ));
        }
        let mut params = ParamStore::new();
        let mut pos = 16 + len;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let expected = Model::init(header.model.clone(), vocab.clone(), 0)?;
        let same_layout = expected.params.len() == params.len()
            && expected
                .params
                .iter()
                .zip(params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same_layout {
            return Err(bad(
                "tensor names or shapes do not match the model configuration",
            ));
        }
        Ok(Self {
            config_hash: header.config_hash,
            model: Model {
                config: header.model,
                vocab,
                params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One ablation arm: config deltas keyed by `lm_capacity`, `vision`, `gcn`,
/// `augment` or `fusion`. No deltas is the base arm.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Arm {
    pub deltas: BTreeMap<String, String>,
}

impl Arm {
    /// Parses `key=value[,key=value…]` or `base`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        if spec.trim() != "base" {
            for part in spec.split(',') {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("arm delta {part:?} is not key=value")))?;
                deltas.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let arm = Self { deltas };
        arm.apply(&TrainConfig::default())?;
        Ok(arm)
    }

    pub fn name(&self) -> String {
        if self.deltas.is_empty() {
            return "base".into();
        }
        self.deltas
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.deltas {
            let bad = || Error::Config(format!("invalid value {v:?} for arm key {k:?}"));
            match k.as_str() {
                "lm_capacity" => {
                    let max_len = cfg.model.text.max_len;
                    cfg.model.text = match v.as_str() {
                        "small" => TextEncoderConfig::default(),
                        "large" => TextEncoderConfig::large(),
                        _ => return Err(bad()),
                    };
                    cfg.model.text.max_len = max_len;
                }
                "vision" => {
                    cfg.model.vision.arch = match v.as_str() {
                        "swin" => VisionArch::Swin,
                        "vit" => VisionArch::Vit,
                        _ => return Err(bad()),
                    }
                }
                "gcn" => {
                    cfg.model.gcn_bypass = match v.as_str() {
                        "on" => false,
                        "bypass" => true,
                        _ => return Err(bad()),
                    }
                }
                "augment" => {
                    let (t, i) = match v.as_str() {
                        "none" => (false, false),
                        "text" => (true, false),
                        "image" => (false, true),
                        "both" => (true, true),
                        _ => return Err(bad()),
                    };
                    cfg.augment.text = t;
                    cfg.augment.image = i;
                }
                "fusion" => {
                    cfg.model.fusion = match v.as_str() {
                        "late" => FusionStrategy::Late,
                        "early" => FusionStrategy::Early,
                        "cross_attention" => FusionStrategy::CrossAttention,
                        _ => return Err(bad()),
                    }
                }
                _ => return Err(Error::Config(format!("unknown arm key {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub accuracy: f64,
    pub mrr: f64,
    pub history: RunHistory,
}

/// Trains every arm with every seed from a fresh initialization and
/// evaluates on `eval`. Runs share a pool of `jobs` threads.
pub fn run_ablation(
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    data: &Dataset,
    eval: &DatasetManifest,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one arm and one seed".into(),
        ));
    }
    let configs: Vec<(String, TrainConfig)> = arms
        .iter()
        .map(|a| Ok((a.name(), a.apply(base)?)))
        .collect::<Result<_>>()?;
    let runs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        runs.par_iter()
            .map(|&(a, seed)| {
                let (name, cfg) = &configs[a];
                let cfg = TrainConfig {
                    seed,
                    ..cfg.clone()
                };
                let mut model =
                    Model::init(cfg.model.clone(), dataset_vocabulary(&data.synsets), seed)?;
                let run_id = format!("{name}/seed-{seed}");
                let history = train(&mut model, data, eval, &cfg, &run_id)?;
                let last = &history.epochs.last().expect("epochs >= 1").test;
                Ok(AblationRow {
                    arm: name.clone(),
                    seed,
                    accuracy: last.accuracy,
                    mrr: last.mrr,
                    history,
                })
            })
            .collect()
    })
}

/// Mean and sample standard deviation.
pub fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `arm,seed,accuracy,mrr`: one row per run, then a `mean` and a `spread`
/// row per arm in first-appearance order.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("ablation csv: {e}"));
    w.write_record(["arm", "seed", "accuracy", "mrr"])
        .map_err(csv_err)?;
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
        w.write_record([
            r.arm.clone(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.mrr.to_string(),
        ])
        .map_err(csv_err)?;
    }
    for arm in order {
        let acc: Vec<f64> = rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.accuracy)
            .collect();
        let mrr: Vec<f64> = rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.mrr)
            .collect();
        let (am, asd) = mean_spread(&acc);
        let (mm, msd) = mean_spread(&mrr);
        w.write_record([arm, "mean", &am.to_string(), &mm.to_string()])
            .map_err(csv_err)?;
        w.write_record([arm, "spread", &asd.to_string(), &msd.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Input(format!("ablation csv: {e}")))
}
