//! The run configuration: one JSON document with a block per pipeline stage.
//!
//! Any object may carry a `_doc` key; it is stripped before parsing. Missing fields
//! take their defaults, unknown fields are rejected with their path.

use std::path::{Path, PathBuf};

use alphanet::barra::StyleConfig;
use alphanet::evaluation::EvalConfig;
use alphanet::market_data::{SynthConfig, N_FEATURES};
use alphanet::nn::{ModelConfig, OutputActivation};
use alphanet::spearman_dropout::DEFAULT_THRESHOLD;
use alphanet::training::{MaskMode, RollingConfig, TrainConfig};
use alphanet::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Panel CSV. When unset, `run` and `train` synthesize a panel from the `synth` block.
    pub panel: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            panel: None,
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub primary_window: usize,
    pub aux_windows: Vec<usize>,
    pub seq_len: usize,
    pub stride: usize,
    pub spearman_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            primary_window: 10,
            aux_windows: vec![2, 5, 22],
            seq_len: 20,
            stride: 1,
            spearman_threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub heads: usize,
    pub encoder_layers: usize,
    /// Attention-pooling width; 0 means the number of kept features.
    pub attention_width: usize,
    pub dropout: f64,
    pub output_activation: OutputActivation,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        NetworkConfig {
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            attention_width: m.attention_width,
            dropout: m.dropout,
            output_activation: m.output_activation,
            leaky_slope: m.leaky_slope,
        }
    }
}

/// Expanding-window retraining over the tail of the panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub cycles: usize,
    /// Trading days predicted by each cycle before retraining.
    pub retrain_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cycles: 5,
            retrain_every: 126,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// A random feature subset of the Spearman mask's size.
    RandomDropout,
    /// Bi-LSTM only, no auxiliary Transformer branches.
    NoTransformer,
    /// Three time steps at stride 10.
    ShortSequence,
    /// Keep every extracted feature.
    NoMask,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::RandomDropout,
        Ablation::NoTransformer,
        Ablation::ShortSequence,
        Ablation::NoMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::RandomDropout => "random_dropout",
            Ablation::NoTransformer => "no_transformer",
            Ablation::ShortSequence => "short_sequence",
            Ablation::NoMask => "no_mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::config("ablation", format!("unknown variant `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub barra: StyleConfig,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
    /// Cycles trained concurrently; 0 uses the available parallelism.
    pub threads: usize,
}

fn strip_doc(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("_doc");
            map.values_mut().for_each(strip_doc);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_doc),
        _ => {}
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        strip_doc(&mut value);
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The network configuration after applying the ablation.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig {
            n_inputs: N_FEATURES,
            primary_window: self.features.primary_window,
            aux_windows: self.features.aux_windows.clone(),
            seq_len: self.features.seq_len,
            stride: self.features.stride,
            heads: self.model.heads,
            encoder_layers: self.model.encoder_layers,
            attention_width: self.model.attention_width,
            dropout: self.model.dropout,
            output_activation: self.model.output_activation,
            leaky_slope: self.model.leaky_slope,
            use_transformer: true,
        };
        match self.ablation {
            Ablation::NoTransformer => m.use_transformer = false,
            Ablation::ShortSequence => {
                m.seq_len = 3;
                m.stride = 10;
            }
            _ => {}
        }
        m
    }

    pub fn mask_mode(&self) -> MaskMode {
        match self.ablation {
            Ablation::RandomDropout => MaskMode::Random,
            Ablation::NoMask => MaskMode::Full,
            _ => MaskMode::Spearman,
        }
    }

    pub fn rolling_config(&self) -> RollingConfig {
        RollingConfig {
            model: self.model_config(),
            train: self.train.clone(),
            styles: self.barra.clone(),
            eval: self.eval.clone(),
            mask_threshold: self.features.spearman_threshold,
            mask_mode: self.mask_mode(),
            threads: self.threads,
        }
    }

    /// Field-level checks that do not need the panel.
    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.n_stocks < 2 {
            return Err(Error::config("synth.n_stocks", "need at least 2 stocks"));
        }
        if s.n_days < 60 {
            return Err(Error::config("synth.n_days", "need at least 60 days"));
        }
        if !(0.0..=1.0).contains(&s.alpha_strength) {
            return Err(Error::config("synth.alpha_strength", "must lie in [0, 1]"));
        }
        if s.n_industries == 0 {
            return Err(Error::config("synth.n_industries", "must be positive"));
        }
        if !(self.features.spearman_threshold > 0.0 && self.features.spearman_threshold <= 1.0) {
            return Err(Error::config("features.spearman_threshold", "must lie in (0, 1]"));
        }
        if self.schedule.cycles == 0 {
            return Err(Error::config("schedule.cycles", "must be positive"));
        }
        if self.schedule.retrain_every == 0 {
            return Err(Error::config("schedule.retrain_every", "must be positive"));
        }
        self.model_config().validate()?;
        self.barra.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}
