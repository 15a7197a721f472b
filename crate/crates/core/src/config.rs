//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::dpo::DpoConfig;
use crate::flow::SamplerConfig;
use crate::model::{ModelConfig, ReferencePositions};
use crate::optim::AdamWConfig;
use crate::data::{DatasetSpec, MAX_IDENTITIES};
use crate::train::{PretrainOptions, Stage1Options};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Dataset sizes used by the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    pub num_identities: usize,
    pub frames_per_identity: usize,
    /// Unseen identities generated for the held-out split.
    pub eval_identities: usize,
    pub losers_per_mode: usize,
    /// Held-out preference pairs used to score implicit-reward accuracy.
    pub eval_pairs: usize,
    /// Identities in the base pretraining corpus, taken from the top of the
    /// id range so they never meet the train or eval splits.
    pub pretrain_identities: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            num_identities: 8,
            frames_per_identity: 8,
            eval_identities: 4,
            losers_per_mode: 2,
            eval_pairs: 200,
            pretrain_identities: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub dpo: DpoConfig,
    /// Optimizer settings; `lr` is the stage-1 learning rate.
    pub adam: AdamWConfig,
    pub stage1_steps: usize,
    /// Base pretraining before `Φ` is frozen; 0 keeps the random base.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub caption_dropout: f64,
    pub group_size: usize,
    pub seed: u64,
    pub data: DataOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            dpo: DpoConfig::default(),
            adam: AdamWConfig::default(),
            stage1_steps: 20_000,
            pretrain_steps: 4000,
            pretrain_lr: 1e-3,
            caption_dropout: 0.1,
            group_size: 3,
            seed: 0,
            data: DataOptions::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, RunConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| RunConfigError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "hidden_dim",
        "num_heads",
        "depth",
        "latent_grid",
        "latent_channels",
        "patch_size",
        "text_len",
        "vocab_size",
        "lora_rank",
        "lora_alpha",
        "time_freq_dim",
        "mlp_ratio",
        "max_references",
        "reference_positions",
        "reference_text",
        "reference_grad",
        "sampler_steps",
        "cfg_scale",
        "drop_refs_in_uncond",
        "dpo_beta",
        "dpo_lr",
        "dpo_steps",
        "stage1_lr",
        "stage1_steps",
        "pretrain_steps",
        "pretrain_lr",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "caption_dropout",
        "group_size",
        "seed",
        "num_identities",
        "frames_per_identity",
        "eval_identities",
        "losers_per_mode",
        "eval_pairs",
        "pretrain_identities",
    ];

    fn set(&mut self, key: &str, v: &str) -> Result<(), RunConfigError> {
        let m = &mut self.model;
        match key {
            "hidden_dim" => m.hidden_dim = parse(key, v)?,
            "num_heads" => m.num_heads = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "latent_grid" => m.latent_grid = parse(key, v)?,
            "latent_channels" => m.latent_channels = parse(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "text_len" => m.text_len = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "lora_rank" => m.lora_rank = parse(key, v)?,
            "lora_alpha" => m.lora_alpha = parse(key, v)?,
            "time_freq_dim" => m.time_freq_dim = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "max_references" => m.max_references = parse(key, v)?,
            "reference_positions" => {
                m.reference_positions = ReferencePositions::from_name(v).ok_or_else(|| RunConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    msg: "expected shared, per-reference or none".into(),
                })?
            }
            "reference_text" => m.reference_text = parse(key, v)?,
            "reference_grad" => m.reference_grad = parse(key, v)?,
            "sampler_steps" => self.sampler.steps = parse(key, v)?,
            "cfg_scale" => self.sampler.cfg_scale = parse(key, v)?,
            "drop_refs_in_uncond" => self.sampler.drop_refs_in_uncond = parse(key, v)?,
            "dpo_beta" => self.dpo.beta = parse(key, v)?,
            "dpo_lr" => self.dpo.learning_rate = parse(key, v)?,
            "dpo_steps" => self.dpo.steps = parse(key, v)?,
            "stage1_lr" => self.adam.lr = parse(key, v)?,
            "stage1_steps" => self.stage1_steps = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "caption_dropout" => self.caption_dropout = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "num_identities" => self.data.num_identities = parse(key, v)?,
            "frames_per_identity" => self.data.frames_per_identity = parse(key, v)?,
            "eval_identities" => self.data.eval_identities = parse(key, v)?,
            "losers_per_mode" => self.data.losers_per_mode = parse(key, v)?,
            "eval_pairs" => self.data.eval_pairs = parse(key, v)?,
            "pretrain_identities" => self.data.pretrain_identities = parse(key, v)?,
            other => return Err(RunConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parses and validates; keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self, RunConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| RunConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(RunConfigError::Duplicate(k.into()));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "hidden_dim" => m.hidden_dim.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "depth" => m.depth.to_string(),
            "latent_grid" => m.latent_grid.to_string(),
            "latent_channels" => m.latent_channels.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "text_len" => m.text_len.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "lora_rank" => m.lora_rank.to_string(),
            "lora_alpha" => m.lora_alpha.to_string(),
            "time_freq_dim" => m.time_freq_dim.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "max_references" => m.max_references.to_string(),
            "reference_positions" => m.reference_positions.name().to_string(),
            "reference_text" => m.reference_text.to_string(),
            "reference_grad" => m.reference_grad.to_string(),
            "sampler_steps" => self.sampler.steps.to_string(),
            "cfg_scale" => self.sampler.cfg_scale.to_string(),
            "drop_refs_in_uncond" => self.sampler.drop_refs_in_uncond.to_string(),
            "dpo_beta" => self.dpo.beta.to_string(),
            "dpo_lr" => self.dpo.learning_rate.to_string(),
            "dpo_steps" => self.dpo.steps.to_string(),
            "stage1_lr" => self.adam.lr.to_string(),
            "stage1_steps" => self.stage1_steps.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "weight_decay" => self.adam.weight_decay.to_string(),
            "caption_dropout" => self.caption_dropout.to_string(),
            "group_size" => self.group_size.to_string(),
            "seed" => self.seed.to_string(),
            "num_identities" => self.data.num_identities.to_string(),
            "frames_per_identity" => self.data.frames_per_identity.to_string(),
            "eval_identities" => self.data.eval_identities.to_string(),
            "losers_per_mode" => self.data.losers_per_mode.to_string(),
            "eval_pairs" => self.data.eval_pairs.to_string(),
            "pretrain_identities" => self.data.pretrain_identities.to_string(),
            _ => unreachable!("key list and getter out of sync"),
        }
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<(), RunConfigError> {
        let bad = |m: String| Err(RunConfigError::Invalid(m));
        self.model.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        self.dpo.validate().map_err(|e| RunConfigError::Invalid(e.to_string()))?;
        if self.sampler.steps == 0 {
            return bad("sampler_steps must be at least 1".into());
        }
        if !(self.sampler.cfg_scale >= 0.0 && self.sampler.cfg_scale.is_finite()) {
            return bad(format!("cfg_scale {} must be finite and >= 0", self.sampler.cfg_scale));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad(format!("stage1_lr {} must be positive", a.lr));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return bad(format!("caption_dropout {} outside [0, 1]", self.caption_dropout));
        }
        if self.group_size < 2 || self.group_size - 1 > self.model.max_references {
            return bad(format!(
                "group_size {} must be in 2..={}",
                self.group_size,
                self.model.max_references + 1
            ));
        }
        let d = &self.data;
        if d.num_identities < 2 || d.frames_per_identity < 4 {
            return bad("need at least 2 identities with at least 4 frames".into());
        }
        if d.frames_per_identity < self.group_size {
            return bad(format!(
                "frames_per_identity {} is smaller than group_size {}",
                d.frames_per_identity, self.group_size
            ));
        }
        if d.eval_identities < 2 || d.losers_per_mode == 0 || d.eval_pairs == 0 {
            return bad("eval_identities >= 2, losers_per_mode >= 1 and eval_pairs >= 1 required".into());
        }
        let pretrain_ids = if self.pretrain_steps > 0 { d.pretrain_identities } else { 0 };
        if d.num_identities + d.eval_identities + pretrain_ids > MAX_IDENTITIES {
            return bad(format!("at most {MAX_IDENTITIES} identities in total across train, eval and pretraining"));
        }
        if self.pretrain_steps > 0 {
            if d.pretrain_identities < 2 {
                return bad("pretrain_identities must be at least 2".into());
            }
            if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
                return bad(format!("pretrain_lr {} must be positive", self.pretrain_lr));
            }
        }
        Ok(())
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.pretrain_steps,
            adam: AdamWConfig { lr: self.pretrain_lr, ..self.adam },
            caption_dropout: self.caption_dropout,
            seed: self.seed ^ 0xba5e,
        }
    }

    /// The base pretraining corpus: the highest `pretrain_identities` ids.
    pub fn pretrain_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_identities: self.data.pretrain_identities,
            frames_per_identity: self.data.frames_per_identity,
            first_identity: MAX_IDENTITIES - self.data.pretrain_identities.min(MAX_IDENTITIES),
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn stage1_options(&self, use_gsa: bool) -> Stage1Options {
        Stage1Options {
            steps: self.stage1_steps,
            adam: self.adam,
            caption_dropout: self.caption_dropout,
            group_size: self.group_size,
            seed: self.seed,
            use_gsa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.model.reference_positions = ReferencePositions::PerReference;
        cfg.adam.lr = 3e-4;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# run\n\nseed = 9  # pinned\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        assert_eq!(
            RunConfig::parse("learning_rate = 1"),
            Err(RunConfigError::UnknownKey("learning_rate".into()))
        );
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(RunConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(RunConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("depth = two"), Err(RunConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("dpo_beta = -1"), Err(RunConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("group_size = 1"), Err(RunConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("num_heads = 5"), Err(RunConfigError::Invalid(_))));
    }

    #[test]
    fn every_key_is_settable() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn pretraining_corpus_is_disjoint_from_the_splits() {
        let cfg = RunConfig::default();
        let spec = cfg.pretrain_spec();
        assert_eq!(spec.first_identity + spec.num_identities, MAX_IDENTITIES);
        assert!(spec.first_identity >= cfg.data.num_identities + cfg.data.eval_identities);
        assert_eq!(cfg.pretrain_options().adam.lr, cfg.pretrain_lr);
        assert_eq!(cfg.pretrain_options().adam.beta2, cfg.adam.beta2);
        assert!(matches!(RunConfig::parse("pretrain_identities = 250"), Err(RunConfigError::Invalid(_))));
        // Unused when pretraining is off.
        assert!(RunConfig::parse("pretrain_steps = 0\npretrain_identities = 250").is_ok());
    }
}
