//! Model and training hyper-parameters, read from flat `key = value` files.
//!
//! Defaults follow the full-size setup (512/2048, 4 layers, 8 heads, 4 capsules,
//! 4 routing iterations, 3 history sentences, Adam at a fixed 1e-4).
//! `batch_size` counts sentences, not tokens.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub layers: usize,
    pub heads: usize,
    /// Dropout for the context-agnostic model.
    pub dropout_agnostic: f64,
    /// Dropout for the context-aware model.
    pub dropout_context: f64,
    /// Output capsules per routing (`m`).
    pub capsules: usize,
    /// Routing iterations (`r`).
    pub iterations: usize,
    /// History sentences routed per source sentence (`K`).
    pub context_sentences: usize,
    /// Capsule and query dimension.
    pub capsule_dim: usize,
    /// Regularizer weight (`λ`); 0 disables the regularization layer.
    pub lambda: f64,
    /// Context-aware encoder with query-guided capsules. `false` gives a
    /// plain sentence-level Transformer encoder.
    pub use_qcn: bool,
    /// Routing strategy (see `RoutingRegistry`) used by the context capsules.
    pub routing: String,
    pub squash_inputs: bool,
    pub layer_norm_eps: f64,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_ffn: 2048,
            layers: 4,
            heads: 8,
            dropout_agnostic: 0.1,
            dropout_context: 0.2,
            capsules: 4,
            iterations: 4,
            context_sentences: 3,
            capsule_dim: 64,
            lambda: 1.0,
            use_qcn: true,
            routing: "query-guided".into(),
            squash_inputs: false,
            layer_norm_eps: 1e-6,
            max_len: 64,
            src_vocab: 0,
            tgt_vocab: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("layers", self.layers),
            ("heads", self.heads),
            ("capsules", self.capsules),
            ("iterations", self.iterations),
            ("capsule_dim", self.capsule_dim),
            ("max_len", self.max_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lambda > 0.0 && self.capsules * self.capsule_dim < 2 {
            return Err(Error::Config(
                "regularizer needs capsules * capsule_dim >= 2".into(),
            ));
        }
        for (k, p) in [
            ("dropout_agnostic", self.dropout_agnostic),
            ("dropout_context", self.dropout_context),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn dropout(&self) -> f64 {
        if self.use_qcn {
            self.dropout_context
        } else {
            self.dropout_agnostic
        }
    }

    pub fn uses_context(&self) -> bool {
        self.use_qcn && self.context_sentences > 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            clip_norm: 5.0,
            log_interval: 100,
            checkpoint_interval: 0,
            min_count: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl Config {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, v)?,
            "d_ffn" => m.d_ffn = parse(key, v)?,
            "layers" => m.layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "dropout_agnostic" => m.dropout_agnostic = parse(key, v)?,
            "dropout_context" => m.dropout_context = parse(key, v)?,
            "dropout" => {
                m.dropout_agnostic = parse(key, v)?;
                m.dropout_context = m.dropout_agnostic;
            }
            "capsules" => m.capsules = parse(key, v)?,
            "iterations" => m.iterations = parse(key, v)?,
            "context_sentences" => m.context_sentences = parse(key, v)?,
            "capsule_dim" => m.capsule_dim = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "use_qcn" => m.use_qcn = parse_bool(key, v)?,
            "routing" => m.routing = v.to_string(),
            "squash_inputs" => m.squash_inputs = parse_bool(key, v)?,
            "layer_norm_eps" => m.layer_norm_eps = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "src_vocab" => m.src_vocab = parse(key, v)?,
            "tgt_vocab" => m.tgt_vocab = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "log_interval" => t.log_interval = parse(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, v)?,
            "min_count" => t.min_count = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", &m.d_model);
        kv("d_ffn", &m.d_ffn);
        kv("layers", &m.layers);
        kv("heads", &m.heads);
        kv("dropout_agnostic", &m.dropout_agnostic);
        kv("dropout_context", &m.dropout_context);
        kv("capsules", &m.capsules);
        kv("iterations", &m.iterations);
        kv("context_sentences", &m.context_sentences);
        kv("capsule_dim", &m.capsule_dim);
        kv("lambda", &m.lambda);
        kv("use_qcn", &m.use_qcn);
        kv("routing", &m.routing);
        kv("squash_inputs", &m.squash_inputs);
        kv("layer_norm_eps", &m.layer_norm_eps);
        kv("max_len", &m.max_len);
        kv("src_vocab", &m.src_vocab);
        kv("tgt_vocab", &m.tgt_vocab);
        kv("learning_rate", &t.learning_rate);
        kv("beta1", &t.beta1);
        kv("beta2", &t.beta2);
        kv("adam_eps", &t.adam_eps);
        kv("batch_size", &t.batch_size);
        kv("clip_norm", &t.clip_norm);
        kv("log_interval", &t.log_interval);
        kv("checkpoint_interval", &t.checkpoint_interval);
        kv("min_count", &t.min_count);
        kv("seed", &t.seed);
        s
    }
}
