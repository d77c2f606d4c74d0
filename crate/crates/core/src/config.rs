//! Run configuration: line-oriented `key = value` files with `#` comments.
//!
//! Precedence is flags over file over defaults; unknown keys are rejected
//! with the offending key and line. The resolved configuration can be
//! echoed back out in a canonical, reparseable form.

use std::collections::HashMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::generate::{CacheMode, SamplerConfig};
use crate::model::ModelConfig;
use crate::train::LrSchedule;

/// Everything a run needs: model, schedule, sampler, data paths, and
/// training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub sample_rate: u32,
    /// Training context in samples; must divide by `model.chunk_len`.
    pub context_len: usize,
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    pub sampler: SamplerConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    pub max_epochs: u64,
    pub positions_per_epoch: usize,
    pub eval_every: u64,
    pub eval_positions: usize,
    pub checkpoint_every: u64,
    pub shards: usize,
    pub grad_clip: f32,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_manifest: None,
            valid_manifest: None,
            test_manifest: None,
            sample_rate: 16_000,
            context_len: 128_000,
            model: ModelConfig::default(),
            schedule: LrSchedule::default(),
            sampler: SamplerConfig::default(),
            batch_size: 40,
            max_steps: 500_000,
            max_epochs: 2,
            positions_per_epoch: 10_000_000,
            eval_every: 1000,
            eval_positions: 256,
            checkpoint_every: 1000,
            shards: 1,
            grad_clip: 0.0,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| bad(line, format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| bad(line, format!("{key}: bad list entry {:?}", p.trim())))
        })
        .collect()
}

fn parse_list5(key: &str, value: &str, line: usize) -> Result<[usize; 5]> {
    parse_list(key, value, line)?
        .try_into()
        .map_err(|v: Vec<usize>| bad(line, format!("{key}: expected 5 entries, got {}", v.len())))
}

impl RunConfig {
    /// Parse a whole config file over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut lines_by_key = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            cfg.apply_line(raw, i + 1, &mut lines_by_key)?;
        }
        cfg.validate(&lines_by_key)?;
        Ok(cfg)
    }

    /// Apply a `key=value` override (command-line `--set`); validates the
    /// result against everything set so far.
    pub fn apply_override(&mut self, setting: &str) -> Result<()> {
        let mut lines = HashMap::new();
        self.apply_line(setting, 0, &mut lines)?;
        if setting.split('=').next().map(str::trim) == Some("") || !setting.contains('=') {
            return Err(bad(0, format!("override {setting:?} is not of the form key=value")));
        }
        self.validate(&lines)?;
        Ok(())
    }

    fn apply_line(
        &mut self,
        raw: &str,
        line: usize,
        lines_by_key: &mut HashMap<&'static str, usize>,
    ) -> Result<()> {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            return Ok(());
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut mark = |k: &'static str| {
            lines_by_key.insert(k, line);
        };
        match key {
            "train_manifest" => self.train_manifest = Some(PathBuf::from(value)),
            "valid_manifest" => self.valid_manifest = Some(PathBuf::from(value)),
            "test_manifest" => self.test_manifest = Some(PathBuf::from(value)),
            "sample_rate" => self.sample_rate = parse_num(key, value, line)?,
            "context_len" => {
                self.context_len = parse_num(key, value, line)?;
                mark("context_len");
            }
            "chunk_len" => {
                self.model.chunk_len = parse_num(key, value, line)?;
                mark("chunk_len");
            }
            "conv_channels" => self.model.conv_channels = parse_list5(key, value, line)?,
            "conv_strides" => self.model.conv_strides = parse_list5(key, value, line)?,
            "conv_kernel" => self.model.conv_kernel = parse_num(key, value, line)?,
            "embed_dim" => self.model.embed_dim = parse_num(key, value, line)?,
            "n_layers" => self.model.n_layers = parse_num(key, value, line)?,
            "ff_dim" => self.model.ff_dim = parse_num(key, value, line)?,
            "n_heads" => self.model.n_heads = parse_num(key, value, line)?,
            "attn_dropout" => self.model.attn_dropout = parse_num(key, value, line)?,
            "token_dropout" => self.model.token_dropout = parse_num(key, value, line)?,
            "conv_dropout" => self.model.conv_dropout = parse_num(key, value, line)?,
            "head_dims" => self.model.head_dims = parse_list(key, value, line)?,
            "head_dropout" => self.model.head_dropout = parse_num(key, value, line)?,
            "lr_initial" => self.schedule.lr_initial = parse_num(key, value, line)?,
            "lr_final" => self.schedule.lr_final = parse_num(key, value, line)?,
            "lr_switch_step" => self.schedule.switch_step = parse_num(key, value, line)?,
            "batch_size" => self.batch_size = parse_num(key, value, line)?,
            "max_steps" => self.max_steps = parse_num(key, value, line)?,
            "max_epochs" => self.max_epochs = parse_num(key, value, line)?,
            "positions_per_epoch" => self.positions_per_epoch = parse_num(key, value, line)?,
            "eval_every" => self.eval_every = parse_num(key, value, line)?,
            "eval_positions" => self.eval_positions = parse_num(key, value, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value, line)?,
            "shards" => self.shards = parse_num(key, value, line)?,
            "grad_clip" => self.grad_clip = parse_num(key, value, line)?,
            "seed" => self.seed = parse_num(key, value, line)?,
            "temperature" => self.sampler.temperature = parse_num(key, value, line)?,
            "top_k" => self.sampler.top_k = parse_num(key, value, line)?,
            "greedy" => self.sampler.greedy = parse_bool(key, value, line)?,
            "n_samples" => self.sampler.n_samples = parse_num(key, value, line)?,
            "cache_mode" => {
                self.sampler.cache_mode =
                    value.parse::<CacheMode>().map_err(|e| bad(line, format!("cache_mode: {e}")))?;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(bad(line, format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn validate(&mut self, lines_by_key: &HashMap<&'static str, usize>) -> Result<()> {
        let line = |k: &str| lines_by_key.get(k).copied().unwrap_or(0);
        if self.model.chunk_len == 0 {
            return Err(bad(line("chunk_len"), "chunk_len must be positive"));
        }
        if self.context_len == 0 || !self.context_len.is_multiple_of(self.model.chunk_len) {
            return Err(bad(
                line("context_len"),
                format!(
                    "context_len: {} is not a positive multiple of chunk_len {}",
                    self.context_len, self.model.chunk_len
                ),
            ));
        }
        self.model.n_tokens_train = self.context_len / self.model.chunk_len;
        self.model.validate()?;
        self.sampler.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.schedule.lr_initial <= 0.0 || self.schedule.lr_final <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.shards == 0 {
            return Err(Error::Config("shards must be at least 1".into()));
        }
        for (key, v) in [
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(bad(line(key), format!("{key} must be at least 1")));
            }
        }
        if self.positions_per_epoch == 0 {
            return Err(Error::Config("positions_per_epoch must be at least 1".into()));
        }
        Ok(())
    }

    /// Tokens per training context.
    pub fn n_tokens(&self) -> usize {
        self.context_len / self.model.chunk_len
    }

    /// Canonical echo of the resolved configuration; reparses to an equal
    /// config.
    pub fn resolved_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let list = |xs: &[usize]| xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            if !v.is_empty() {
                s.push_str(k);
                s.push_str(" = ");
                s.push_str(&v);
                s.push('\n');
            }
        };
        kv("train_manifest", path(&self.train_manifest));
        kv("valid_manifest", path(&self.valid_manifest));
        kv("test_manifest", path(&self.test_manifest));
        kv("sample_rate", self.sample_rate.to_string());
        kv("context_len", self.context_len.to_string());
        kv("chunk_len", self.model.chunk_len.to_string());
        kv("conv_channels", list(&self.model.conv_channels));
        kv("conv_strides", list(&self.model.conv_strides));
        kv("conv_kernel", self.model.conv_kernel.to_string());
        kv("embed_dim", self.model.embed_dim.to_string());
        kv("n_layers", self.model.n_layers.to_string());
        kv("ff_dim", self.model.ff_dim.to_string());
        kv("n_heads", self.model.n_heads.to_string());
        kv("attn_dropout", self.model.attn_dropout.to_string());
        kv("token_dropout", self.model.token_dropout.to_string());
        kv("conv_dropout", self.model.conv_dropout.to_string());
        kv("head_dims", list(&self.model.head_dims));
        kv("head_dropout", self.model.head_dropout.to_string());
        kv("lr_initial", self.schedule.lr_initial.to_string());
        kv("lr_final", self.schedule.lr_final.to_string());
        kv("lr_switch_step", self.schedule.switch_step.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("positions_per_epoch", self.positions_per_epoch.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_positions", self.eval_positions.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("shards", self.shards.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("seed", self.seed.to_string());
        kv("temperature", self.sampler.temperature.to_string());
        kv("top_k", self.sampler.top_k.to_string());
        kv("greedy", self.sampler.greedy.to_string());
        kv("n_samples", self.sampler.n_samples.to_string());
        kv("cache_mode", self.sampler.cache_mode.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
