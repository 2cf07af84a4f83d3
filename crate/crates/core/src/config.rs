//! Run configuration: one declarative struct mirrored one-to-one by the
//! TOML config file. Field defaults are the published hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Normalization;

/// All knobs for building snapshots, training, and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Observation window length in weeks.
    pub window: usize,
    /// Forecast horizon in weeks.
    pub horizon: usize,
    /// Weight of the spectral alignment term.
    pub lambda1: f64,
    /// Weight of the L2 parameter regularizer.
    pub lambda2: f64,
    /// Decoder blend weight on the previous decoded output.
    pub lambda_o: f64,
    /// Decoder blend weight on the encoder context.
    pub lambda_p: f64,
    /// Cross-layer smoothing rounds.
    pub smoothing_rounds: usize,
    /// Graph layers in encoder and decoder stacks.
    pub sage_layers: usize,
    /// Hash code length in bits.
    pub code_bits: usize,
    /// Candidate edge budget for the hash sampler.
    pub max_candidates: usize,
    /// Hamming radius for candidate supplementation (0 or 1).
    pub hamming_radius: u32,
    /// Spatial kernel bandwidth in km.
    pub sigma_km: f64,
    /// Genetic kernel bandwidth in substitutions/site; 0 = use the batch
    /// mean distance.
    pub sigma_genetic: f64,
    /// Embedding size.
    pub embed_dim: usize,
    /// Raw case feature size produced by the genetic embedding.
    pub case_feature_dim: usize,
    /// Number of leading eigenvalues aligned by the spectral term.
    pub spectral_k: usize,
    /// Attention heads (must divide embed_dim).
    pub attention_heads: usize,
    /// Normalization scheme for count/abundance series.
    pub normalization: Normalization,
    /// SGD learning rate.
    pub learning_rate: f64,
    /// SGD momentum (0 disables).
    pub momentum: f64,
    /// Epoch budget.
    pub epochs: usize,
    /// Optional cap on total update steps across epochs.
    pub max_steps: Option<usize>,
    /// Dropout rate on hidden layers during training.
    pub dropout: f64,
    /// RNG seed for parameter init, hyperplanes, dropout, and data synthesis.
    pub seed: u64,
    /// Keep threshold on link probabilities.
    pub p_keep: f64,
    /// Minimum kernel weight kept when building spatial/genetic edges.
    pub w_min: f64,
    /// Case-count threshold defining an outbreak positive.
    pub outbreak_threshold: f64,
    /// Weight messages by edge weights during smoothing.
    pub weighted_messages: bool,
    /// Decoder hidden-state blend: z_h = blend * d~_h + (1-blend) * z_{h-1}.
    pub decoder_blend: f64,
    /// Disable the cross-layer smoothing block (ablation).
    pub disable_smoothing: bool,
    /// Drop genetic edges from snapshots (ablation).
    pub disable_genetic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            window: 4,
            horizon: 4,
            lambda1: 0.1,
            lambda2: 5e-4,
            lambda_o: 0.1,
            lambda_p: 0.3,
            smoothing_rounds: 3,
            sage_layers: 2,
            code_bits: 10,
            max_candidates: 2000,
            hamming_radius: 1,
            sigma_km: 10.0,
            sigma_genetic: 0.0,
            embed_dim: 8,
            case_feature_dim: 8,
            spectral_k: 8,
            attention_heads: 2,
            normalization: Normalization::LogPlusOne,
            learning_rate: 1e-5,
            momentum: 0.0,
            epochs: 100,
            max_steps: None,
            dropout: 0.3,
            seed: 42,
            p_keep: 0.5,
            w_min: 1e-3,
            outbreak_threshold: 1.0,
            weighted_messages: true,
            decoder_blend: 0.5,
            disable_smoothing: false,
            disable_genetic: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.horizon < 1 {
            return Err(Error::Config("window and horizon must be >= 1".into()));
        }
        if self.lambda_o < 0.0 || self.lambda_p < 0.0 || self.lambda_o + self.lambda_p > 1.0 {
            return Err(Error::Config(
                "lambda_o, lambda_p must be nonnegative with lambda_o + lambda_p <= 1".into(),
            ));
        }
        if self.smoothing_rounds < 1 {
            return Err(Error::Config("smoothing_rounds must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.case_feature_dim == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "attention_heads ({}) must divide embed_dim ({})",
                self.attention_heads, self.embed_dim
            )));
        }
        if self.code_bits == 0 || self.code_bits > 62 {
            return Err(Error::Config("code_bits must be in 1..=62".into()));
        }
        if self.hamming_radius > 1 {
            return Err(Error::Config("hamming_radius must be 0 or 1".into()));
        }
        if self.sigma_km <= 0.0 {
            return Err(Error::Config("sigma_km must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_keep) {
            return Err(Error::Config("p_keep must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.decoder_blend) {
            return Err(Error::Config("decoder_blend must be in [0, 1]".into()));
        }
        if self.spectral_k == 0 {
            return Err(Error::Config("spectral_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse from TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn blend_constraint_rejected_at_load() {
        let mut cfg = RunConfig::default();
        cfg.lambda_o = 0.7;
        cfg.lambda_p = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_and_unknown_key() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.window, cfg.window);
        assert!(RunConfig::from_toml("bogus_key = 3").is_err());
    }
}
