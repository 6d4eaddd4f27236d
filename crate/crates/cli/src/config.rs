//! Flat `key = value` run configuration.
//!
//! Keys may be written in full (`train.lr = 0.003`) or inside a section
//! header (`[train]` followed by `lr = 0.003`). `#` starts a comment. Every
//! key has a default; unknown keys and malformed values are rejected with the
//! offending line number.

use std::path::{Path, PathBuf};

use rewired_core::data::VocabMode;
use rewired_core::evaluation::{default_temperature_grid, DynevalConfig, GradNorm};
use rewired_core::model::ModelConfig;
use rewired_core::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: VocabMode,
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: PathBuf,
    /// Use only the first this many validation tokens (0 = all).
    pub valid_limit: usize,
    /// Model settings; `vocab_size` is filled in from the corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` means: the tuned value if a temperature file exists, else 1.
    pub temperature: Option<f64>,
    pub temperature_grid: Vec<f64>,
    pub eval_split: Split,
    pub dyneval: DynevalConfig,
    /// Optional tuning grids; when non-empty they are searched on the validation split.
    pub dyneval_lr_grid: Vec<f64>,
    pub dyneval_decay_grid: Vec<f64>,
    pub gradcheck_trials: usize,
    pub checkpoint: PathBuf,
    pub averaged: PathBuf,
    pub metrics: PathBuf,
    pub temperature_file: PathBuf,
    pub vocab_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: VocabMode::Byte,
            train_path: "train.txt".into(),
            valid_path: "valid.txt".into(),
            test_path: "test.txt".into(),
            valid_limit: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            temperature: None,
            temperature_grid: default_temperature_grid(),
            eval_split: Split::Test,
            dyneval: DynevalConfig { segment: 100, lr: 0.0, decay: 0.0, norm: GradNorm::None },
            dyneval_lr_grid: Vec::new(),
            dyneval_decay_grid: Vec::new(),
            gradcheck_trials: 20,
            checkpoint: "model.ckpt".into(),
            averaged: "model.avg.ckpt".into(),
            metrics: "metrics.log".into(),
            temperature_file: "temperature.txt".into(),
            vocab_file: None,
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(x.trim(), "a number")).collect()
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `0` in the file means "none" for optional counts.
fn opt_count<T: TryFrom<u64>>(v: &str) -> Result<Option<T>, String> {
    let n: u64 = parse(v, "a non-negative integer")?;
    if n == 0 {
        Ok(None)
    } else {
        T::try_from(n).map(Some).map_err(|_| format!("`{v}` is out of range"))
    }
}

fn show_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or("0".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg = Self::parse_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| ConfigError::Line { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let full = if section.is_empty() || key.contains('.') { key.to_string() } else { format!("{section}.{key}") };
            cfg.set(&full, value).map_err(|m| err(format!("{full}: {m}")))?;
        }
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.train_path,
            &mut self.valid_path,
            &mut self.test_path,
            &mut self.checkpoint,
            &mut self.averaged,
            &mut self.metrics,
            &mut self.temperature_file,
        ] {
            fix(p);
        }
        if let Some(p) = &mut self.vocab_file {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(1);
        model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.dyneval.validate().map_err(|e| e.to_string())?;
        if self.temperature_grid.is_empty() || self.temperature_grid.iter().any(|&t| t.is_nan() || t <= 0.0) {
            return Err("eval.temperature_grid must be a non-empty list of positive values".into());
        }
        if self.temperature.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return Err("eval.temperature must be positive".into());
        }
        if self.gradcheck_trials == 0 {
            return Err("gradcheck.trials must be positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" | "run.seed" => self.seed = parse(v, "an integer")?,
            "data.mode" => self.mode = v.parse().map_err(|e: rewired_core::Error| e.to_string())?,
            "data.train" => self.train_path = v.into(),
            "data.valid" => self.valid_path = v.into(),
            "data.test" => self.test_path = v.into(),
            "data.valid_limit" => self.valid_limit = parse(v, "a non-negative integer")?,
            "data.vocab" => self.vocab_file = (!v.is_empty()).then(|| v.into()),
            "model.layers" => m.layers = parse(v, "an integer")?,
            "model.state_size" => m.state_size = parse(v, "an integer")?,
            "model.cell" => m.cell = v.to_string(),
            "model.mogrifier_rounds" => m.mogrifier_rounds = parse(v, "an integer")?,
            "model.mogrifier_rank" => m.mogrifier_rank = opt_count(v)?,
            "model.keep_input" => m.keep_input = parse(v, "a probability")?,
            "model.keep_cell" => m.keep_cell = parse(v, "a probability")?,
            "model.keep_state" => m.keep_state = parse(v, "a probability")?,
            "model.keep_output" => m.keep_output = parse(v, "a probability")?,
            "model.input_mask_rows" => m.input_mask_rows = parse_bool(v)?,
            "model.tie_embeddings" => m.tie_embeddings = parse_bool(v)?,
            "model.dropout_samples" => m.dropout_samples = parse(v, "an integer")?,
            "model.residual_includes_embedding" => m.residual_includes_embedding = parse_bool(v)?,
            "model.chrono_t_max" => m.chrono_t_max = parse(v, "a number")?,
            "train.batch_size" => t.batch_size = parse(v, "an integer")?,
            "train.window" => t.window = parse(v, "an integer")?,
            "train.epochs" => t.epochs = parse(v, "an integer")?,
            "train.lr" => t.lr = parse(v, "a number")?,
            "train.beta1" => t.beta1 = parse(v, "a number")?,
            "train.beta2" => t.beta2 = parse(v, "a number")?,
            "train.eps" => t.eps = parse(v, "a number")?,
            "train.clip_norm" => {
                let c: f64 = parse(v, "a number")?;
                t.clip_norm = (c > 0.0).then_some(c);
            }
            "train.valid_every" => t.valid_every = opt_count(v)?,
            "train.valid_batch" => t.valid_batch = parse(v, "an integer")?,
            "train.patience" => t.patience = parse(v, "an integer")?,
            "train.max_restarts" => t.max_restarts = parse(v, "an integer")?,
            "train.divergence_factor" => t.divergence_factor = parse(v, "a number")?,
            "train.max_steps" => t.max_steps = opt_count(v)?,
            "train.inject_nan_at" => t.inject_nan_at = opt_count(v)?,
            "eval.temperature" => {
                self.temperature = if v == "auto" { None } else { Some(parse(v, "a number or `auto`")?) }
            }
            "eval.temperature_grid" => self.temperature_grid = parse_list(v)?,
            "eval.split" => {
                self.eval_split = match v {
                    "train" => Split::Train,
                    "valid" => Split::Valid,
                    "test" => Split::Test,
                    _ => return Err(format!("expected train, valid or test, got `{v}`")),
                }
            }
            "dyneval.segment" => self.dyneval.segment = parse(v, "an integer")?,
            "dyneval.lr" => self.dyneval.lr = parse(v, "a number")?,
            "dyneval.decay" => self.dyneval.decay = parse(v, "a number")?,
            "dyneval.norm" => {
                self.dyneval.norm = if v == "none" { GradNorm::None } else { GradNorm::Clip(parse(v, "`none` or a number")?) }
            }
            "dyneval.lr_grid" => self.dyneval_lr_grid = parse_list(v)?,
            "dyneval.decay_grid" => self.dyneval_decay_grid = parse_list(v)?,
            "gradcheck.trials" => self.gradcheck_trials = parse(v, "an integer")?,
            "output.checkpoint" => self.checkpoint = v.into(),
            "output.averaged" => self.averaged = v.into(),
            "output.metrics" => self.metrics = v.into(),
            "output.temperature" => self.temperature_file = v.into(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let p = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("data.mode", self.mode.to_string()),
            ("data.train", p(&self.train_path)),
            ("data.valid", p(&self.valid_path)),
            ("data.test", p(&self.test_path)),
            ("data.valid_limit", self.valid_limit.to_string()),
            ("data.vocab", self.vocab_file.as_deref().map(p).unwrap_or_default()),
            ("model.layers", m.layers.to_string()),
            ("model.state_size", m.state_size.to_string()),
            ("model.cell", m.cell.clone()),
            ("model.mogrifier_rounds", m.mogrifier_rounds.to_string()),
            ("model.mogrifier_rank", show_opt(m.mogrifier_rank)),
            ("model.keep_input", m.keep_input.to_string()),
            ("model.keep_cell", m.keep_cell.to_string()),
            ("model.keep_state", m.keep_state.to_string()),
            ("model.keep_output", m.keep_output.to_string()),
            ("model.input_mask_rows", m.input_mask_rows.to_string()),
            ("model.tie_embeddings", m.tie_embeddings.to_string()),
            ("model.dropout_samples", m.dropout_samples.to_string()),
            ("model.residual_includes_embedding", m.residual_includes_embedding.to_string()),
            ("model.chrono_t_max", m.chrono_t_max.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.window", t.window.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.clip_norm", t.clip_norm.unwrap_or(0.0).to_string()),
            ("train.valid_every", show_opt(t.valid_every)),
            ("train.valid_batch", t.valid_batch.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.max_restarts", t.max_restarts.to_string()),
            ("train.divergence_factor", t.divergence_factor.to_string()),
            ("train.max_steps", show_opt(t.max_steps)),
            ("train.inject_nan_at", show_opt(t.inject_nan_at)),
            ("eval.temperature", self.temperature.map_or("auto".into(), |x| x.to_string())),
            ("eval.temperature_grid", show_list(&self.temperature_grid)),
            ("eval.split", self.eval_split.name().into()),
            ("dyneval.segment", self.dyneval.segment.to_string()),
            ("dyneval.lr", self.dyneval.lr.to_string()),
            ("dyneval.decay", self.dyneval.decay.to_string()),
            (
                "dyneval.norm",
                match self.dyneval.norm {
                    GradNorm::None => "none".into(),
                    GradNorm::Clip(c) => c.to_string(),
                },
            ),
            ("dyneval.lr_grid", show_list(&self.dyneval_lr_grid)),
            ("dyneval.decay_grid", show_list(&self.dyneval_decay_grid)),
            ("gradcheck.trials", self.gradcheck_trials.to_string()),
            ("output.checkpoint", p(&self.checkpoint)),
            ("output.averaged", p(&self.averaged)),
            ("output.metrics", p(&self.metrics)),
            ("output.temperature", p(&self.temperature_file)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = RunConfig::parse_str(
            "seed = 9\n[model]\nstate_size = 16 # comment\ncell = lstm\n\n[train]\nlr=0.01\nmodel.layers = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.state_size, 16);
        assert_eq!(cfg.model.cell, "lstm");
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn unknown_key_has_line_number() {
        let err = RunConfig::parse_str("[model]\nlayers = 2\nbogus = 1\n").unwrap_err();
        assert_eq!(err.to_string(), "line 3: model.bogus: unknown key");
        let err = RunConfig::parse_str("\n\ntrain.lr = fast\n").unwrap_err();
        assert!(err.to_string().starts_with("line 3: train.lr"), "{err}");
        let err = RunConfig::parse_str("just words\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1:"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse_str("model.keep_state = 0\n").is_err());
        assert!(RunConfig::parse_str("train.lr = -1\n").is_err());
        assert!(RunConfig::parse_str("eval.temperature_grid = 1.0,-2\n").is_err());
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = RunConfig::parse_str("model.mogrifier_rank = 3\ndyneval.norm = 2.5\neval.temperature = 1.1\n").unwrap();
        cfg.dyneval_lr_grid = vec![0.0, 0.1];
        let text: String = cfg.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
