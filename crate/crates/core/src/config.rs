//! Run configuration: corpus, model, training and evaluation settings in one
//! JSON document, with cross-section consistency checks and seed resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::{CalmError, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "CALM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    #[serde(default)]
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Overrides `train.seed` (and the eval seed) when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}


impl RunConfig {
    /// Widths and step sizes that train the default corpus on one core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CalmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CalmError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed precedence: `CALM_SEED`, then `seed`, then `train.seed`.
    pub fn resolve_seed(&self, env: Option<&str>) -> Result<u64> {
        if let Some(v) = env {
            return v
                .trim()
                .parse()
                .map_err(|_| CalmError::Config(format!("{SEED_ENV}={v:?} is not a u64")));
        }
        Ok(self.seed.unwrap_or(self.train.seed))
    }

    /// Copy with the resolved seed written into `train` and `eval`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = Some(seed);
        out.train.seed = seed;
        out.eval.seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let bad = |m: String| Err(CalmError::Config(m));
        if self.model.num_cultures != self.corpus.num_cultures {
            return bad(format!(
                "model.num_cultures {} != corpus.num_cultures {}",
                self.model.num_cultures, self.corpus.num_cultures
            ));
        }
        if self.model.task_labels != self.corpus.task_label_count {
            return bad(format!(
                "model.task_labels {} != corpus.task_label_count {}",
                self.model.task_labels, self.corpus.task_label_count
            ));
        }
        if self.model.encoder.vocab_size < self.corpus.vocab_size {
            return bad(format!(
                "encoder vocab {} smaller than corpus vocab {}",
                self.model.encoder.vocab_size, self.corpus.vocab_size
            ));
        }
        if self.model.encoder.max_len < self.corpus.sequence_length_range[1] {
            return bad(format!(
                "encoder max_len {} shorter than corpus max length {}",
                self.model.encoder.max_len, self.corpus.sequence_length_range[1]
            ));
        }
        if self.model.contrastive.batch_size != self.train.batch_size {
            return bad(format!(
                "contrastive.batch_size {} != train.batch_size {}",
                self.model.contrastive.batch_size, self.train.batch_size
            ));
        }
        Ok(())
    }
}
