//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored; later assignments override earlier ones. Optional values accept
//! `none`. Lists are comma-separated.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::align::{OtAxis, OtConfig, OtGradient, SinkhornOptions, TaskLoss};
use crate::backbone::BackboneConfig;
use crate::data::{Phases, SynthSpec};
use crate::error::ConfigError;
use crate::model::ModelConfig;
use crate::tensor::PairwiseCost;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// CSV input; synthetic data when `None`.
    pub data_path: Option<String>,
    pub synth_len: usize,
    pub synth_variates: usize,
    pub synth_periods: Vec<f64>,
    pub synth_amplitudes: Vec<f64>,
    pub synth_trend: f64,
    pub synth_noise_std: f64,
    pub synth_level: f64,
    /// Seed of the generator; the run seed when `None`.
    pub synth_seed: Option<u64>,

    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub normalize: bool,

    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub prompt_len: usize,
    pub vocab_size: usize,
    pub anchor_dim: Option<usize>,
    pub max_anchor_tokens: usize,
    pub rank_tol: f64,
    pub qr_pivoting: bool,

    pub task_loss: TaskLoss,
    pub teacher_task_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub mu: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub ot_axis: OtAxis,
    pub ot_cost: PairwiseCost,
    pub ot_gradient: OtGradient,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub use_dag: bool,
    pub use_feature: bool,
    pub use_ot: bool,

    /// Seasonal period for mase/owa; owa is omitted when `None`.
    pub seasonality: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            synth_len: 600,
            synth_variates: 3,
            synth_periods: vec![24.0, 12.0],
            synth_amplitudes: vec![1.0, 0.5],
            synth_trend: 0.0,
            synth_noise_std: 0.1,
            synth_level: 10.0,
            synth_seed: None,
            lookback: 32,
            horizon: 8,
            stride: 1,
            train_ratio: 0.7,
            val_ratio: 0.1,
            normalize: true,
            width: 32,
            layers: 3,
            heads: 4,
            ffn_mult: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            prompt_len: 8,
            vocab_size: 512,
            anchor_dim: None,
            max_anchor_tokens: 64,
            rank_tol: 1e-10,
            qr_pivoting: false,
            task_loss: TaskLoss::SmoothL1,
            teacher_task_weight: 0.0,
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.8,
            tau: 0.1,
            mu: 0.1,
            sinkhorn_iters: 100,
            sinkhorn_tol: 1e-10,
            ot_axis: OtAxis::Variates,
            ot_cost: PairwiseCost::SquaredEuclidean,
            ot_gradient: OtGradient::Envelope,
            lr: 5e-4,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            use_dag: true,
            use_feature: true,
            use_ot: true,
            seasonality: None,
        }
    }
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "data_path",
    "synth_len",
    "synth_variates",
    "synth_periods",
    "synth_amplitudes",
    "synth_trend",
    "synth_noise_std",
    "synth_level",
    "synth_seed",
    "lookback",
    "horizon",
    "stride",
    "train_ratio",
    "val_ratio",
    "normalize",
    "width",
    "layers",
    "heads",
    "ffn_mult",
    "lora_rank",
    "lora_scale",
    "prompt_len",
    "vocab_size",
    "anchor_dim",
    "max_anchor_tokens",
    "rank_tol",
    "qr_pivoting",
    "task_loss",
    "teacher_task_weight",
    "alpha",
    "beta",
    "gamma",
    "tau",
    "mu",
    "sinkhorn_iters",
    "sinkhorn_tol",
    "ot_axis",
    "ot_cost",
    "ot_gradient",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "use_dag",
    "use_feature",
    "use_ot",
    "seasonality",
];

fn invalid(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| invalid(key, format!("'{v}': {e}")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got '{v}'"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn axis_name(a: OtAxis) -> &'static str {
    match a {
        OtAxis::Variates => "variates",
        OtAxis::Horizon => "horizon",
    }
}

fn cost_name(c: PairwiseCost) -> &'static str {
    match c {
        PairwiseCost::SquaredEuclidean => "squared_euclidean",
        PairwiseCost::Absolute => "absolute",
    }
}

fn gradient_name(g: OtGradient) -> &'static str {
    match g {
        OtGradient::Envelope => "envelope",
        OtGradient::Unrolled => "unrolled",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(assignment, "override must be key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "data_path" => self.data_path = (v != "none" && !v.is_empty()).then(|| v.to_string()),
            "synth_len" => self.synth_len = num(key, v)?,
            "synth_variates" => self.synth_variates = num(key, v)?,
            "synth_periods" => self.synth_periods = list(key, v)?,
            "synth_amplitudes" => self.synth_amplitudes = list(key, v)?,
            "synth_trend" => self.synth_trend = num(key, v)?,
            "synth_noise_std" => self.synth_noise_std = num(key, v)?,
            "synth_level" => self.synth_level = num(key, v)?,
            "synth_seed" => self.synth_seed = opt(key, v)?,
            "lookback" => self.lookback = num(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "stride" => self.stride = num(key, v)?,
            "train_ratio" => self.train_ratio = num(key, v)?,
            "val_ratio" => self.val_ratio = num(key, v)?,
            "normalize" => self.normalize = boolean(key, v)?,
            "width" => self.width = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "ffn_mult" => self.ffn_mult = num(key, v)?,
            "lora_rank" => self.lora_rank = num(key, v)?,
            "lora_scale" => self.lora_scale = num(key, v)?,
            "prompt_len" => self.prompt_len = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "anchor_dim" => self.anchor_dim = opt(key, v)?,
            "max_anchor_tokens" => self.max_anchor_tokens = num(key, v)?,
            "rank_tol" => self.rank_tol = num(key, v)?,
            "qr_pivoting" => self.qr_pivoting = boolean(key, v)?,
            "task_loss" => {
                self.task_loss = TaskLoss::parse(v)
                    .ok_or_else(|| invalid(key, format!("expected smooth_l1, smape or mse, got '{v}'")))?
            }
            "teacher_task_weight" => self.teacher_task_weight = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "sinkhorn_iters" => self.sinkhorn_iters = num(key, v)?,
            "sinkhorn_tol" => self.sinkhorn_tol = num(key, v)?,
            "ot_axis" => {
                self.ot_axis = match v {
                    "variates" => OtAxis::Variates,
                    "horizon" => OtAxis::Horizon,
                    _ => return Err(invalid(key, format!("expected variates or horizon, got '{v}'"))),
                }
            }
            "ot_cost" => {
                self.ot_cost = match v {
                    "squared_euclidean" => PairwiseCost::SquaredEuclidean,
                    "absolute" => PairwiseCost::Absolute,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("expected squared_euclidean or absolute, got '{v}'"),
                        ))
                    }
                }
            }
            "ot_gradient" => {
                self.ot_gradient = match v {
                    "envelope" => OtGradient::Envelope,
                    "unrolled" => OtGradient::Unrolled,
                    _ => return Err(invalid(key, format!("expected envelope or unrolled, got '{v}'"))),
                }
            }
            "lr" => self.lr = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "use_dag" => self.use_dag = boolean(key, v)?,
            "use_feature" => self.use_feature = boolean(key, v)?,
            "use_ot" => self.use_ot = boolean(key, v)?,
            "seasonality" => self.seasonality = opt(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data_path" => self.data_path.clone().unwrap_or_else(|| "none".into()),
            "synth_len" => self.synth_len.to_string(),
            "synth_variates" => self.synth_variates.to_string(),
            "synth_periods" => show_list(&self.synth_periods),
            "synth_amplitudes" => show_list(&self.synth_amplitudes),
            "synth_trend" => self.synth_trend.to_string(),
            "synth_noise_std" => self.synth_noise_std.to_string(),
            "synth_level" => self.synth_level.to_string(),
            "synth_seed" => show_opt(&self.synth_seed),
            "lookback" => self.lookback.to_string(),
            "horizon" => self.horizon.to_string(),
            "stride" => self.stride.to_string(),
            "train_ratio" => self.train_ratio.to_string(),
            "val_ratio" => self.val_ratio.to_string(),
            "normalize" => self.normalize.to_string(),
            "width" => self.width.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_scale" => self.lora_scale.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "anchor_dim" => show_opt(&self.anchor_dim),
            "max_anchor_tokens" => self.max_anchor_tokens.to_string(),
            "rank_tol" => self.rank_tol.to_string(),
            "qr_pivoting" => self.qr_pivoting.to_string(),
            "task_loss" => self.task_loss.name().to_string(),
            "teacher_task_weight" => self.teacher_task_weight.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "tau" => self.tau.to_string(),
            "mu" => self.mu.to_string(),
            "sinkhorn_iters" => self.sinkhorn_iters.to_string(),
            "sinkhorn_tol" => self.sinkhorn_tol.to_string(),
            "ot_axis" => axis_name(self.ot_axis).to_string(),
            "ot_cost" => cost_name(self.ot_cost).to_string(),
            "ot_gradient" => gradient_name(self.ot_gradient).to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "use_dag" => self.use_dag.to_string(),
            "use_feature" => self.use_feature.to_string(),
            "use_ot" => self.use_ot.to_string(),
            "seasonality" => show_opt(&self.seasonality),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("synth_len", self.synth_len),
            ("synth_variates", self.synth_variates),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("sinkhorn_iters", self.sinkhorn_iters),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, "must be >= 1"));
            }
        }
        if !(self.train_ratio > 0.0 && self.val_ratio >= 0.0 && self.train_ratio + self.val_ratio < 1.0) {
            return Err(invalid(
                "train_ratio",
                format!("train {} and val {} must leave a test split", self.train_ratio, self.val_ratio),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be finite and >= 0"));
        }
        if !(self.sinkhorn_tol >= 0.0) {
            return Err(invalid("sinkhorn_tol", "must be >= 0"));
        }
        if self.seasonality == Some(0) {
            return Err(invalid("seasonality", "must be >= 1 or none"));
        }
        if self.data_path.is_none() {
            if self.synth_periods.len() != self.synth_amplitudes.len() {
                return Err(invalid("synth_amplitudes", "one amplitude per period required"));
            }
            if self.synth_periods.iter().any(|p| !(*p > 0.0)) {
                return Err(invalid("synth_periods", "periods must be positive"));
            }
        }
        self.model_config(1).validate()
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            periods: self.synth_periods.clone(),
            amplitudes: self.synth_amplitudes.clone(),
            trend: self.synth_trend,
            noise_std: self.synth_noise_std,
            level: self.synth_level,
            phases: Phases::Random,
        }
    }

    /// Model settings with the ablation toggles folded in: a disabled feature
    /// or transport loss has weight zero; a disabled gate uses the self branch.
    pub fn model_config(&self, variates: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                width: self.width,
                layers: self.layers,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                lookback: self.lookback,
            },
            horizon: self.horizon,
            variates,
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            prompt_len: self.prompt_len,
            vocab_size: self.vocab_size,
            anchor_dim: self.anchor_dim,
            max_anchors: self.max_anchor_tokens,
            rank_tol: self.rank_tol,
            qr_pivoting: self.qr_pivoting,
            task: self.task_loss,
            teacher_task_weight: self.teacher_task_weight,
            alpha: if self.use_feature { self.alpha } else { 0.0 },
            beta: if self.use_ot { self.beta } else { 0.0 },
            gamma: self.gamma,
            tau: self.tau,
            ot: OtConfig {
                sinkhorn: SinkhornOptions {
                    mu: self.mu,
                    max_iters: self.sinkhorn_iters,
                    tol: self.sinkhorn_tol,
                },
                cost: self.ot_cost,
                axis: self.ot_axis,
                gradient: self.ot_gradient,
            },
            dag: self.use_dag,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.alpha, c.beta, c.mu, c.gamma), (5e-4, 0.1, 0.01, 0.1, 0.8));
        assert_eq!(c.sinkhorn_iters, 100);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.data_path = Some("data/x.csv".into());
        c.seasonality = Some(24);
        c.alpha = 0.123456789;
        c.ot_axis = OtAxis::Horizon;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn errors_name_the_key_or_line() {
        let e = RunConfig::parse("lr = 1e-3\nbogus = 1\n").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("bogus".into()));
        let e = RunConfig::parse("# c\nlr 3\n").unwrap_err();
        assert_eq!(e, ConfigError::Syntax { line: 2 });
        let e = RunConfig::parse("epochs = -1").unwrap_err();
        assert!(e.to_string().contains("epochs"));
        let e = RunConfig::parse("heads = 5").unwrap_err();
        assert!(e.to_string().contains("heads"));
    }

    #[test]
    fn ablation_toggles_zero_weights() {
        let c = RunConfig {
            use_feature: false,
            use_ot: false,
            use_dag: false,
            ..RunConfig::default()
        };
        let m = c.model_config(3);
        assert_eq!((m.alpha, m.beta, m.dag), (0.0, 0.0, false));
    }
}
