//! End-to-end wiring: text and image encoders, projection, fusion, the
//! candidate graph and the scoring head.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, CheckReport, Tape, Tensor, Var};
use crate::data::{generate_dataset, GenConfig, ImageStorage, Sample, NUM_CANDIDATES};
use crate::error::{Error, Result};
use crate::fusion::{self, EarlyFusionConfig, FusionStrategy, Modality};
use crate::gcn::{self, GraphMode};
use crate::head;
use crate::nn::{Bound, Init, ParamStore};
use crate::rng::{derive_seed, StreamKind};
use crate::text::{self, TextEncoderConfig, Vocabulary};
use crate::vision::{self, Image, VisionEncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub vision: VisionEncoderConfig,
    /// Shared dimension of the projected text and image embeddings.
    pub proj_dim: usize,
    pub fusion: FusionStrategy,
    pub early: EarlyFusionConfig,
    pub graph_mode: GraphMode,
    /// Neighbours per node in `knn` mode.
    pub graph_k: usize,
    pub gcn_layers: usize,
    /// Skips the graph stage; node features go straight to the head.
    pub gcn_bypass: bool,
    /// Adds a separate self-connection weight to every graph layer.
    pub gcn_root_weight: bool,
    /// Weight of the gold term in the binary cross-entropy.
    pub pos_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            vision: VisionEncoderConfig::default(),
            proj_dim: 32,
            fusion: FusionStrategy::Late,
            early: EarlyFusionConfig::default(),
            graph_mode: GraphMode::Full,
            graph_k: 3,
            gcn_layers: 1,
            gcn_bypass: false,
            gcn_root_weight: true,
            pos_weight: 1.0,
        }
    }
}

impl ModelConfig {
    /// Shrunken configuration with `d_t = d_v = 4` for gradient checks.
    pub fn tiny() -> Self {
        Self {
            text: TextEncoderConfig {
                embed_dim: 4,
                num_layers: 1,
                num_heads: 2,
                mlp_hidden: 8,
                max_len: 8,
            },
            vision: VisionEncoderConfig {
                image_size: 8,
                patch_size: 2,
                embed_dim: 4,
                num_stages: 1,
                blocks_per_stage: 2,
                window_size: 2,
                num_heads: 2,
                mlp_ratio: 2,
                ..VisionEncoderConfig::default()
            },
            proj_dim: 4,
            early: EarlyFusionConfig {
                num_blocks: 1,
                num_heads: 2,
                mlp_hidden: 8,
                max_len: 32,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.vision.validate()?;
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        if self.fusion == FusionStrategy::Early
            && (self.early.num_heads == 0 || self.proj_dim % self.early.num_heads != 0)
        {
            return Err(Error::Config(format!(
                "proj_dim {} must be divisible by early.num_heads {}",
                self.proj_dim, self.early.num_heads
            )));
        }
        if self.graph_mode == GraphMode::Knn && !(1..NUM_CANDIDATES).contains(&self.graph_k) {
            return Err(Error::Config(format!(
                "graph_k must be in [1, {}), got {}",
                NUM_CANDIDATES, self.graph_k
            )));
        }
        if !self.pos_weight.is_finite() || self.pos_weight <= 0.0 {
            return Err(Error::Config(format!(
                "pos_weight must be positive, got {}",
                self.pos_weight
            )));
        }
        Ok(())
    }

    fn uses_graph(&self) -> bool {
        !self.gcn_bypass && self.gcn_layers > 0
    }
}

/// Model inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub tokens: Vec<String>,
    pub images: Vec<Image>,
    pub gold: usize,
}

impl SampleInput {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            tokens: s.tokens.clone(),
            images: s.candidate_images(),
            gold: s.gold,
        }
    }
}

/// Configuration, vocabulary and parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::Rng::seed_from_u64(derive_seed(seed, StreamKind::Init, "model"));
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;
        text::init_params(&mut init, "text", &c.text, vocab.len());
        vision::init_params(&mut init, "vision", &c.vision);
        fusion::init_projections(
            &mut init,
            "proj",
            c.text.embed_dim,
            c.vision.output_dim(),
            c.proj_dim,
        );
        match c.fusion {
            FusionStrategy::Late => {}
            FusionStrategy::Early => fusion::init_early(&mut init, "early", c.proj_dim, &c.early),
            FusionStrategy::CrossAttention => {
                fusion::init_cross_attention(&mut init, "cross", c.proj_dim)
            }
        }
        let d = c.fusion.fused_dim(c.proj_dim);
        if c.uses_graph() {
            gcn::init_params(&mut init, "gcn", d, c.gcn_layers, c.gcn_root_weight);
        }
        head::init_params(&mut init, "head", d);
        Ok(Self {
            config,
            vocab,
            params: store,
        })
    }

    /// Candidate probabilities `[n]` for one sample, built on `tape` with the
    /// parameters bound in `p`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &SampleInput) -> Result<Var> {
        let c = &self.config;
        if input.images.len() != NUM_CANDIDATES {
            return Err(Error::Input(format!(
                "expected {NUM_CANDIDATES} candidate images, got {}",
                input.images.len()
            )));
        }
        let ids = text::tokenize(&input.tokens, &self.vocab, c.text.max_len)?;
        let t = text::encode_text(tape, p, "text", &c.text, &ids.ids)?;
        let images: Vec<&Image> = input.images.iter().collect();
        let v = vision::encode_images(tape, p, "vision", &c.vision, &images)?;
        let n = images.len();

        let nodes = match c.fusion {
            FusionStrategy::Late => {
                let tp = fusion::project(tape, p, "proj", Modality::Text, t.pooled)?;
                let ip = fusion::project(tape, p, "proj", Modality::Image, v.pooled)?;
                let tp = crate::nn::repeat_rows(tape, tp, n)?;
                fusion::fuse_late(tape, tp, ip)?
            }
            FusionStrategy::Early | FusionStrategy::CrossAttention => {
                let g = v.tokens;
                let patches = g.side * g.side;
                let ts = fusion::project(tape, p, "proj", Modality::Text, t.tokens)?;
                let is = fusion::project(tape, p, "proj", Modality::Image, g.var)?;
                let is = tape.reshape(is, vec![n, patches, c.proj_dim])?;
                if c.fusion == FusionStrategy::Early {
                    fusion::fuse_early(tape, p, "early", &c.early, ts, is)?
                } else {
                    let tp = fusion::project(tape, p, "proj", Modality::Text, t.pooled)?;
                    let ip = fusion::project(tape, p, "proj", Modality::Image, v.pooled)?;
                    fusion::fuse_cross_attention(tape, p, "cross", ts, is, tp, ip)?.fused
                }
            }
        };
        let nodes = if c.uses_graph() {
            let adj = gcn::adjacency_for(tape, nodes, c.graph_mode, c.graph_k)?;
            gcn::gcn_forward(tape, p, "gcn", &adj, nodes, c.gcn_layers)?
        } else {
            nodes
        };
        head::score_candidates(tape, p, "head", nodes)
    }

    /// Candidate probabilities without recording gradients.
    pub fn predict(&self, input: &SampleInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let probs = self.forward(&mut tape, &p, input)?;
        Ok(tape.value(probs).data().to_vec())
    }

    pub fn loss(&self, tape: &mut Tape, p: &Bound, input: &SampleInput) -> Result<Var> {
        let probs = self.forward(tape, p, input)?;
        head::bce_loss(tape, probs, input.gold, self.config.pos_weight)
    }

    /// Loss value and its gradient for every parameter, in name order.
    /// Parameters the sample does not touch get zero gradients.
    pub fn loss_and_grads(&self, input: &SampleInput) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let loss = self.loss(&mut tape, &p, input)?;
        let value = tape.value(loss).item();
        let vars: Vec<Var> = p.iter().map(|(_, &v)| v).collect();
        let mut grads = tape.backward(loss)?;
        let out = vars
            .into_iter()
            .zip(self.params.iter())
            .map(|(v, (_, t))| grads.remove(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    }

    /// The loss as a function of a flat parameter list in name order, for
    /// finite-difference checks.
    pub fn loss_fn<'a>(
        &'a self,
        input: &'a SampleInput,
    ) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
        move |tape: &mut Tape, vars: &[Var]| {
            let p: Bound = self
                .params
                .names()
                .cloned()
                .zip(vars.iter().copied())
                .collect();
            self.loss(tape, &p, input)
        }
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Finite-difference check of the whole training loss for a `tiny()` model
/// with the given fusion strategy on a freshly generated sample.
pub fn end_to_end_grad_check(
    fusion: FusionStrategy,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<CheckReport> {
    let gen = GenConfig {
        train_samples: 1,
        test_samples: 0,
        image_size: 8,
        image_storage: ImageStorage::Inline,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, seed)?;
    let vocab = Vocabulary::from_tokens(ds.synsets.vocabulary());
    let model = Model::init(
        ModelConfig {
            fusion,
            ..ModelConfig::tiny()
        },
        vocab,
        seed,
    )?;
    let input = SampleInput::from_sample(&ds.train.samples[0]);
    grad_check(model.loss_fn(&input), &model.param_tensors(), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig, ImageStorage};

    fn tiny_data(seed: u64) -> crate::data::Dataset {
        let cfg = GenConfig {
            train_samples: 4,
            test_samples: 0,
            image_size: 8,
            image_storage: ImageStorage::Inline,
            ..GenConfig::default()
        };
        generate_dataset(&cfg, seed).unwrap()
    }

    fn model_for(ds: &crate::data::Dataset, cfg: ModelConfig, seed: u64) -> Model {
        Model::init(cfg, Vocabulary::from_tokens(ds.synsets.vocabulary()), seed).unwrap()
    }

    #[test]
    fn output_is_ten_probabilities() {
        let ds = tiny_data(1);
        for fusion in [
            FusionStrategy::Late,
            FusionStrategy::Early,
            FusionStrategy::CrossAttention,
        ] {
            let m = model_for(
                &ds,
                ModelConfig {
                    fusion,
                    ..ModelConfig::tiny()
                },
                3,
            );
            let probs = m
                .predict(&SampleInput::from_sample(&ds.train.samples[0]))
                .unwrap();
            assert_eq!(probs.len(), NUM_CANDIDATES);
            assert!(
                probs.iter().all(|&p| p > 0.0 && p < 1.0),
                "{fusion}: {probs:?}"
            );
        }
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let ds = tiny_data(1);
        let mut m = model_for(&ds, ModelConfig::tiny(), 3);
        m.params.zero_all();
        let probs = m
            .predict(&SampleInput::from_sample(&ds.train.samples[0]))
            .unwrap();
        assert!(probs.iter().all(|&p| p == 0.5), "{probs:?}");
    }

    #[test]
    fn parameter_names_depend_only_on_config() {
        let ds = tiny_data(1);
        let a = model_for(&ds, ModelConfig::tiny(), 1);
        let b = model_for(&ds, ModelConfig::tiny(), 2);
        assert_eq!(
            a.params.names().collect::<Vec<_>>(),
            b.params.names().collect::<Vec<_>>()
        );
        assert_ne!(a.params, b.params);
        let bypass = model_for(
            &ds,
            ModelConfig {
                gcn_bypass: true,
                ..ModelConfig::tiny()
            },
            1,
        );
        assert!(bypass.params.names().all(|n| !n.starts_with("gcn")));
    }

    #[test]
    fn analytic_and_tape_gradients_agree_in_order() {
        let ds = tiny_data(2);
        let m = model_for(&ds, ModelConfig::tiny(), 4);
        let input = SampleInput::from_sample(&ds.train.samples[1]);
        let (loss, grads) = m.loss_and_grads(&input).unwrap();
        let f = m.loss_fn(&input);
        let direct = crate::autodiff::analytic_gradients(&f, &m.param_tensors()).unwrap();
        assert_eq!(grads, direct);
        assert_eq!(
            loss,
            crate::autodiff::eval_scalar(&f, &m.param_tensors()).unwrap()
        );
    }

    #[test]
    fn end_to_end_gradient_check_all_strategies() {
        for (i, fusion) in [
            FusionStrategy::Late,
            FusionStrategy::Early,
            FusionStrategy::CrossAttention,
        ]
        .into_iter()
        .enumerate()
        {
            let report = end_to_end_grad_check(fusion, 10 + i as u64, 1e-6, 1e-5).unwrap();
            assert!(
                report.passed(),
                "{fusion}: max rel error {:.2e}",
                report.max_rel_error()
            );
            assert!(report.params.len() > 10);
        }
    }
}
