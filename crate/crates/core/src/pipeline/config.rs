//! Training configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::kemb::EmbeddingTable;
use crate::network::{Mode, ModelConfig};
use crate::text::EmbeddingSource;

/// Every key is optional; missing keys take the defaults below.
///
/// ```toml
/// alpha = 1e-6          # weight of the matching loss
/// beta = 1.0            # weight of the heatmap MSE
/// sigma = 2.0           # ground-truth Gaussian std, heatmap pixels
/// lr = 1e-3             # Adam step size; x0.1 at 70% and 90% of steps
/// adam_beta1 = 0.9
/// adam_beta2 = 0.999
/// adam_eps = 1e-8
/// steps = 2000          # optimizer steps (ignored when `epochs` is set)
/// epochs = 210          # optional: steps = ceil(epochs * train_samples / batch_size)
/// batch_size = 16
/// seed = 0              # initialization, data order, dropout, augmentation
/// augment = true        # random scale / rotation of training samples
/// embed_seed = 0        # synthetic text encoder seed
/// embeddings = "t.kemb" # optional KEMB table instead of the synthetic encoder
/// allow_synth_fallback = false
/// kmeans_max_iter = 100
/// checkpoint_every = 0  # 0 disables periodic checkpoints
/// log_every = 100
///
/// [model]
/// mode = "kdsm"         # or "baseline"
/// k = 100
/// o = 100
/// c = 64
/// c0 = 512
/// d = 512
/// heads = 4
/// self_layers = 3
/// cross_layers = 3
/// ffn = 2048
/// dropout = 0.1
/// image_size = 64
/// heatmap_size = 64
/// enc_channels = [64, 64, 64]
/// head_channels = [64, 64, 64]
/// vadapter_hidden = 64
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub embed_seed: u64,
    pub embeddings: Option<PathBuf>,
    pub allow_synth_fallback: bool,
    pub kmeans_max_iter: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            alpha: 1e-6,
            beta: 1.0,
            sigma: 2.0,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            epochs: None,
            batch_size: 16,
            seed: 0,
            augment: true,
            embed_seed: 0,
            embeddings: None,
            allow_synth_fallback: false,
            kmeans_max_iter: crate::grouping::DEFAULT_MAX_ITER,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Long schedule: 210 epochs at batch 64.
    pub fn full() -> Self {
        TrainConfig {
            epochs: Some(210),
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    /// Narrow network that trains the default 2,000-step schedule in under
    /// ten minutes on one CPU core. Prompt, group and heatmap geometry keep
    /// their defaults except for `K` and `O`, which are sized to the
    /// synthetic world.
    pub fn desk(mode: Mode) -> Self {
        TrainConfig {
            model: ModelConfig {
                mode,
                k: 8,
                o: 16,
                c: 32,
                c0: 512,
                d: 32,
                heads: 4,
                self_layers: 3,
                cross_layers: 3,
                ffn: 64,
                dropout: 0.1,
                image_size: 64,
                heatmap_size: 64,
                enc_channels: vec![32, 64, 64],
                head_channels: vec![64, 32, 32],
                vadapter_hidden: 32,
            },
            ..TrainConfig::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| KdsmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| KdsmError::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(KdsmError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("lr must be positive and Adam betas in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs.is_none() && self.steps == 0 {
            return bad("steps must be positive");
        }
        Ok(())
    }

    /// Total optimizer steps for a training set of `n_train` samples.
    pub fn total_steps(&self, n_train: usize) -> usize {
        match self.epochs {
            Some(e) => (e * n_train).div_ceil(self.batch_size).max(1),
            None => self.steps,
        }
    }

    /// Step size after the x0.1 decays at 70% and 90% of training.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.lr;
        if step * 10 >= total * 7 {
            lr *= 0.1;
        }
        if step * 10 >= total * 9 {
            lr *= 0.1;
        }
        lr
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        let src = match &self.embeddings {
            None => EmbeddingSource::Synthetic {
                dim: self.model.c0,
                seed: self.embed_seed,
            },
            Some(path) => EmbeddingSource::Table {
                table: EmbeddingTable::load(path)?,
                allow_synth_fallback: self.allow_synth_fallback,
                seed: self.embed_seed,
            },
        };
        src.check_dim(self.model.c0)?;
        Ok(src)
    }
}
