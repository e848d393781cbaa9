//! Key=value configuration with file loading and flag overrides.
//!
//! Precedence: built-in defaults < config file < `--set key=value` flags.
//! Unknown keys are rejected. `keys_help()` renders the full key table for
//! `--help`.

use std::fmt;
use std::path::Path;

use align_refine_core::decoder::DecoderConfig;
use align_refine_core::mwer::MwerConfig;
use align_refine_core::optim::Schedule;
use align_refine_core::synth::{CorruptionConfig, TaskParams};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Whole-artifact configuration. Field groups map to config key prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model.*
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub audio_dim: usize,
    pub max_positions: usize,
    pub right_context: usize,
    pub text_left: Option<usize>,
    pub cross_left: Option<usize>,
    pub audio_left: Option<usize>,
    pub audio_self_attention: bool,
    pub bottom_audio_self_attention: bool,
    pub steps: usize,
    pub frame_ms: f64,
    // data.*
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub chain_p: f64,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub data_seed: u64,
    // train.*
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub log_every: usize,
    pub clip_norm: f64,
    pub train_seed: u64,
    pub threads: usize,
    // mwer.*
    pub mwer_beam: usize,
    pub mwer_steps: usize,
    pub mwer_gamma: f64,
    pub mwer_max_steps: usize,
    pub mwer_base_lr: f64,
    pub mwer_warmup_steps: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab: 16,
            audio_dim: 16,
            max_positions: 96,
            right_context: 2,
            text_left: None,
            cross_left: Some(2),
            audio_left: None,
            audio_self_attention: true,
            bottom_audio_self_attention: true,
            steps: 3,
            frame_ms: 60.0,
            train_utterances: 2000,
            eval_utterances: 500,
            min_labels: 3,
            max_labels: 6,
            max_duration: 3,
            noise_sigma: 0.5,
            chain_p: 0.75,
            sub_rate: 0.10,
            del_rate: 0.05,
            ins_rate: 0.05,
            data_seed: 1,
            batch_size: 8,
            base_lr: 3e-3,
            warmup_steps: 100,
            max_steps: 1200,
            eval_every: 200,
            log_every: 10,
            clip_norm: 1.0,
            train_seed: 1,
            threads: 2,
            mwer_beam: 4,
            mwer_steps: 1,
            mwer_gamma: 0.005,
            mwer_max_steps: 300,
            mwer_base_lr: 3e-4,
            mwer_warmup_steps: 20,
        }
    }
}

/// (key, documentation, example value) for every accepted key.
pub const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("model.layers", "transformer layers L", "4"),
    ("model.dim", "attention dimension d (multiple of heads)", "64"),
    ("model.heads", "attention heads", "4"),
    ("model.ffn_dim", "feed-forward inner dimension", "256"),
    ("model.vocab", "label vocabulary size V (blank is id 0)", "16"),
    ("model.audio_dim", "encoder feature dimension", "16"),
    ("model.max_positions", "text position-embedding capacity", "96"),
    ("model.right_context", "per-layer right context C (frames/tokens)", "2"),
    ("model.text_left", "text self-attention left context, or 'unbounded'", "unbounded"),
    ("model.cross_left", "cross-attention left context, or 'unbounded'", "2"),
    ("model.audio_left", "audio self-attention left context, or 'unbounded'", "unbounded"),
    ("model.audio_self_attention", "parallel audio self-attention stack (true/false)", "true"),
    (
        "model.bottom_audio_self_attention",
        "keep the bottom audio self-attention (effective depth L+1)",
        "true",
    ),
    ("model.steps", "refinement steps S during MLE training", "3"),
    ("model.frame_ms", "decoder frame size in milliseconds", "60"),
    ("data.train_utterances", "training corpus size", "2000"),
    ("data.eval_utterances", "evaluation corpus size", "500"),
    ("data.min_labels", "minimum labels per utterance", "3"),
    ("data.max_labels", "maximum labels per utterance", "6"),
    ("data.max_duration", "maximum frames per label", "3"),
    ("data.noise_sigma", "feature noise stddev", "0.5"),
    ("data.chain_p", "probability a label follows its predecessor's chain successor", "0.75"),
    ("data.sub_rate", "first-pass substitution rate", "0.10"),
    ("data.del_rate", "first-pass deletion rate", "0.05"),
    ("data.ins_rate", "first-pass insertion rate", "0.05"),
    ("data.seed", "corpus seed", "1"),
    ("train.batch_size", "utterances per step", "8"),
    ("train.base_lr", "peak learning rate", "0.003"),
    ("train.warmup_steps", "linear warmup steps", "100"),
    ("train.max_steps", "MLE training steps", "1200"),
    ("train.eval_every", "evaluation cadence in steps", "200"),
    ("train.log_every", "train-record cadence in steps", "10"),
    ("train.clip_norm", "global gradient-norm clip", "1.0"),
    ("train.seed", "training seed (batching)", "1"),
    ("train.threads", "worker threads for batch gradients", "2"),
    ("mwer.beam", "beam size K for hypothesis generation", "4"),
    ("mwer.steps", "refinement steps S' for the MWER forward", "1"),
    ("mwer.gamma", "composite-loss weight on the MLE term", "0.005"),
    ("mwer.max_steps", "MWER finetuning steps", "300"),
    ("mwer.base_lr", "MWER peak learning rate", "0.0003"),
    ("mwer.warmup_steps", "MWER warmup steps", "20"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| err(format!("key {key}: cannot parse value '{value}'")))
}

fn parse_left(key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "unbounded" {
        Ok(None)
    } else {
        Ok(Some(parse::<usize>(key, value)?))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(format!("key {key}: expected true or false, got '{value}'"))),
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "model.layers" => self.layers = parse(key, value)?,
            "model.dim" => self.dim = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.ffn_dim" => self.ffn_dim = parse(key, value)?,
            "model.vocab" => self.vocab = parse(key, value)?,
            "model.audio_dim" => self.audio_dim = parse(key, value)?,
            "model.max_positions" => self.max_positions = parse(key, value)?,
            "model.right_context" => self.right_context = parse(key, value)?,
            "model.text_left" => self.text_left = parse_left(key, value)?,
            "model.cross_left" => self.cross_left = parse_left(key, value)?,
            "model.audio_left" => self.audio_left = parse_left(key, value)?,
            "model.audio_self_attention" => self.audio_self_attention = parse_bool(key, value)?,
            "model.bottom_audio_self_attention" => {
                self.bottom_audio_self_attention = parse_bool(key, value)?
            }
            "model.steps" => self.steps = parse(key, value)?,
            "model.frame_ms" => self.frame_ms = parse(key, value)?,
            "data.train_utterances" => self.train_utterances = parse(key, value)?,
            "data.eval_utterances" => self.eval_utterances = parse(key, value)?,
            "data.min_labels" => self.min_labels = parse(key, value)?,
            "data.max_labels" => self.max_labels = parse(key, value)?,
            "data.max_duration" => self.max_duration = parse(key, value)?,
            "data.noise_sigma" => self.noise_sigma = parse(key, value)?,
            "data.chain_p" => self.chain_p = parse(key, value)?,
            "data.sub_rate" => self.sub_rate = parse(key, value)?,
            "data.del_rate" => self.del_rate = parse(key, value)?,
            "data.ins_rate" => self.ins_rate = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.base_lr" => self.base_lr = parse(key, value)?,
            "train.warmup_steps" => self.warmup_steps = parse(key, value)?,
            "train.max_steps" => self.max_steps = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.log_every" => self.log_every = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.seed" => self.train_seed = parse(key, value)?,
            "train.threads" => self.threads = parse(key, value)?,
            "mwer.beam" => self.mwer_beam = parse(key, value)?,
            "mwer.steps" => self.mwer_steps = parse(key, value)?,
            "mwer.gamma" => self.mwer_gamma = parse(key, value)?,
            "mwer.max_steps" => self.mwer_max_steps = parse(key, value)?,
            "mwer.base_lr" => self.mwer_base_lr = parse(key, value)?,
            "mwer.warmup_steps" => self.mwer_warmup_steps = parse(key, value)?,
            _ => return Err(err(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Loads `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (key, value) =
                item.split_once('=').ok_or_else(|| err(format!("override '{item}': expected key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `--seed` override: one seed steers both corpus and training.
    pub fn override_seed(&mut self, seed: u64) {
        self.data_seed = seed;
        self.train_seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.decoder_config().validate().map_err(|e| err(e.to_string()))?;
        self.task_params().validate().map_err(err)?;
        self.mwer_config().validate().map_err(err)?;
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(err("train.batch_size/max_steps/eval_every/log_every must be >= 1"));
        }
        if !(self.base_lr > 0.0) || !(self.mwer_base_lr > 0.0) {
            return Err(err("learning rates must be positive"));
        }
        if self.threads == 0 {
            return Err(err("train.threads must be >= 1"));
        }
        if self.sub_rate + self.del_rate + self.ins_rate > 1.0 {
            return Err(err("corruption rates must sum to at most 1"));
        }
        if self.vocab + 1 > self.max_positions {
            // not fatal in principle; catches obviously inconsistent setups
        }
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            model_dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab: self.vocab,
            audio_dim: self.audio_dim,
            max_positions: self.max_positions,
            right_context: self.right_context,
            text_left: self.text_left,
            cross_left: self.cross_left,
            audio_left: self.audio_left,
            audio_self_attention: self.audio_self_attention,
            bottom_audio_self_attention: self.bottom_audio_self_attention,
            steps: self.steps,
            frame_size: self.frame_ms / 1000.0,
        }
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            vocab: self.vocab,
            audio_dim: self.audio_dim,
            min_labels: self.min_labels,
            max_labels: self.max_labels,
            max_duration: self.max_duration,
            noise_sigma: self.noise_sigma,
            chain_p: self.chain_p,
        }
    }

    /// Corruption settings for one utterance; the seed mixes the corpus seed
    /// with the utterance index in a dedicated namespace.
    pub fn corruption_for(&self, utterance_index: usize) -> CorruptionConfig {
        CorruptionConfig {
            substitution: self.sub_rate,
            deletion: self.del_rate,
            insertion: self.ins_rate,
            vocab: self.vocab,
            seed: align_refine_core::rng::derive_seed(
                self.data_seed ^ 0xC0_5217_0000,
                utterance_index as u64,
            ),
        }
    }

    pub fn mwer_config(&self) -> MwerConfig {
        MwerConfig { k: self.mwer_beam, steps: self.mwer_steps, gamma: self.mwer_gamma }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base_lr: self.base_lr, warmup_steps: self.warmup_steps }
    }

    pub fn mwer_schedule(&self) -> Schedule {
        Schedule { base_lr: self.mwer_base_lr, warmup_steps: self.mwer_warmup_steps }
    }

    /// Rendered key table for --help.
    pub fn keys_help() -> String {
        let mut out = String::from("CONFIG KEYS (defaults in brackets):\n");
        let defaults = Config::default();
        for (key, doc, _) in KEY_DOCS {
            let current = defaults.get_display(key);
            out.push_str(&format!("  {key:<36} {doc} [{current}]\n"));
        }
        out
    }

    fn get_display(&self, key: &str) -> String {
        fn left(v: Option<usize>) -> String {
            v.map(|x| x.to_string()).unwrap_or_else(|| "unbounded".into())
        }
        match key {
            "model.layers" => self.layers.to_string(),
            "model.dim" => self.dim.to_string(),
            "model.heads" => self.heads.to_string(),
            "model.ffn_dim" => self.ffn_dim.to_string(),
            "model.vocab" => self.vocab.to_string(),
            "model.audio_dim" => self.audio_dim.to_string(),
            "model.max_positions" => self.max_positions.to_string(),
            "model.right_context" => self.right_context.to_string(),
            "model.text_left" => left(self.text_left),
            "model.cross_left" => left(self.cross_left),
            "model.audio_left" => left(self.audio_left),
            "model.audio_self_attention" => self.audio_self_attention.to_string(),
            "model.bottom_audio_self_attention" => self.bottom_audio_self_attention.to_string(),
            "model.steps" => self.steps.to_string(),
            "model.frame_ms" => self.frame_ms.to_string(),
            "data.train_utterances" => self.train_utterances.to_string(),
            "data.eval_utterances" => self.eval_utterances.to_string(),
            "data.min_labels" => self.min_labels.to_string(),
            "data.max_labels" => self.max_labels.to_string(),
            "data.max_duration" => self.max_duration.to_string(),
            "data.noise_sigma" => self.noise_sigma.to_string(),
            "data.chain_p" => self.chain_p.to_string(),
            "data.sub_rate" => self.sub_rate.to_string(),
            "data.del_rate" => self.del_rate.to_string(),
            "data.ins_rate" => self.ins_rate.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.base_lr" => self.base_lr.to_string(),
            "train.warmup_steps" => self.warmup_steps.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "train.clip_norm" => self.clip_norm.to_string(),
            "train.seed" => self.train_seed.to_string(),
            "train.threads" => self.threads.to_string(),
            "mwer.beam" => self.mwer_beam.to_string(),
            "mwer.steps" => self.mwer_steps.to_string(),
            "mwer.gamma" => self.mwer_gamma.to_string(),
            "mwer.max_steps" => self.mwer_max_steps.to_string(),
            "mwer.base_lr" => self.mwer_base_lr.to_string(),
            "mwer.warmup_steps" => self.mwer_warmup_steps.to_string(),
            _ => "?".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn every_documented_key_is_settable() {
        let mut cfg = Config::default();
        for (key, _, sample) in KEY_DOCS {
            cfg.set(key, sample).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.set("model.nope", "1").is_err());
        assert!(cfg.set("layers", "1").is_err());
    }

    #[test]
    fn file_then_overrides_precedence() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nmodel.layers=2\ntrain.max_steps = 50").unwrap();
        let mut cfg = Config::default();
        cfg.apply_file(f.path()).unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.max_steps, 50);
        cfg.apply_overrides(&["model.layers=3".into()]).unwrap();
        assert_eq!(cfg.layers, 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = Config::default();
        assert!(cfg.set("model.layers", "two").is_err());
        assert!(cfg.set("model.audio_self_attention", "maybe").is_err());
        assert!(cfg.set("model.text_left", "-1").is_err());
        assert!(cfg.set("model.text_left", "unbounded").is_ok());
    }

    #[test]
    fn default_config_validates() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn keys_help_covers_all_keys() {
        let help = Config::keys_help();
        for (key, _, _) in KEY_DOCS {
            assert!(help.contains(key), "{key} missing from help");
        }
    }
}
