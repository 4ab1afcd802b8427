//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use arpa_core::data::{GenConfig, PerturbConfig};
use arpa_core::train::{Arm, TrainConfig};
use arpa_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Split the ablation arms are scored on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    Test,
    /// The test split passed through `perturb_split`.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub arms: Vec<Arm>,
    /// Empty means three consecutive seeds starting at the master seed.
    pub seeds: Vec<u64>,
    pub eval: EvalSplit,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            arms: vec![Arm::default()],
            seeds: Vec::new(),
            eval: EvalSplit::Test,
        }
    }
}

impl AblationSettings {
    pub fn seeds_for(&self, master: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..3).map(|i| master.wrapping_add(i)).collect()
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub generator: GenConfig,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub ablation: AblationSettings,
}

impl RunConfigFile {
    /// Reads `path` (or the defaults when absent), replaces the training
    /// seed with `seed` and validates every section.
    pub fn load(path: Option<&Path>, seed: u64) -> Result<Self> {
        let mut cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.train.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.perturb.p_synonym)
            || !(self.perturb.noise_sigma.is_finite() && self.perturb.noise_sigma >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid perturbation settings {:?}",
                self.perturb
            )));
        }
        if self.ablation.arms.is_empty() {
            return Err(Error::Config("ablation.arms must not be empty".into()));
        }
        for arm in &self.ablation.arms {
            arm.apply(&self.train)?.validate()?;
        }
        Ok(())
    }
}
