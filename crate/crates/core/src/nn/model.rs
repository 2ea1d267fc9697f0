//! The composed network: per-window batch normalization of masked features, a
//! Bi-LSTM on the primary window, Transformer branches on the auxiliary windows,
//! residual merge, attention pooling and the output head.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::layers::{self, register_affine, register_attention_pool, register_auxiliary_branch, register_batch_norm, register_bi_lstm};
use super::params::{ParameterStore, Session};
use crate::error::{Error, Result};
use crate::feature_ops::{extract_columns, Registry, WindowSpec};
use crate::market_data::{image_from_series, Panel};
use crate::spearman_dropout::FeatureMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    LeakyRelu,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_inputs: usize,
    pub primary_window: usize,
    pub aux_windows: Vec<usize>,
    pub seq_len: usize,
    pub stride: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// Width of the attention-pooling projection; 0 means n_keep.
    pub attention_width: usize,
    pub dropout: f64,
    pub output_activation: OutputActivation,
    pub leaky_slope: f64,
    /// When false the auxiliary branches are dropped (no-Transformer ablation).
    pub use_transformer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_inputs: crate::market_data::N_FEATURES,
            primary_window: 10,
            aux_windows: vec![2, 5, 22],
            seq_len: 20,
            stride: 1,
            heads: 2,
            encoder_layers: 2,
            attention_width: 0,
            dropout: 0.2,
            output_activation: OutputActivation::LeakyRelu,
            leaky_slope: 0.01,
            use_transformer: true,
        }
    }
}

impl ModelConfig {
    /// Windows the forward pass reads, primary first.
    pub fn windows(&self) -> Vec<usize> {
        let mut w = vec![self.primary_window];
        if self.use_transformer {
            w.extend(self.aux_windows.iter().copied());
        }
        w
    }

    pub fn window_spec(&self, d: usize) -> WindowSpec {
        WindowSpec::with_sequence(d, self.seq_len, self.stride)
    }

    /// Trailing rows a stock needs at a date for every window image.
    pub fn history_needed(&self) -> usize {
        self.windows()
            .into_iter()
            .map(|d| self.window_spec(d).image_len() + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.windows() {
            self.window_spec(d)
                .validate()
                .map_err(|e| Error::config("model.windows", e.to_string()))?;
        }
        if self.aux_windows.contains(&self.primary_window) {
            return Err(Error::config("model.aux_windows", "must not repeat the primary window"));
        }
        let mut sorted = self.aux_windows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.aux_windows.len() {
            return Err(Error::config("model.aux_windows", "duplicate window"));
        }
        if self.heads == 0 {
            return Err(Error::config("model.heads", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.n_inputs < 2 {
            return Err(Error::config("model.n_inputs", "need at least 2 inputs"));
        }
        Ok(())
    }
}

/// Masked feature sequences for one batch, keyed by window length. Each matrix is
/// (batch · seq_len) × n_keep with sample-major rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub images: BTreeMap<usize, Array2<f64>>,
}

/// Intermediate results of a forward pass.
pub struct Forward {
    pub output: Var,
    pub bilstm: Var,
    pub merged: Var,
    pub branches: Vec<Var>,
    pub attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaNet {
    pub config: ModelConfig,
    pub mask: FeatureMask,
    pub store: ParameterStore,
}

fn bn_name(d: usize) -> String {
    format!("input_bn.d{d}")
}

fn branch_name(d: usize) -> String {
    format!("aux.d{d}")
}

impl AlphaNet {
    pub fn new(config: ModelConfig, mask: FeatureMask, seed: u64) -> Result<Self> {
        config.validate()?;
        mask.check_registry(&Registry::new(config.n_inputs))?;
        if mask.is_empty() {
            return Err(Error::Mask("mask keeps no columns".into()));
        }
        let n = mask.len();
        let width = 2 * n;
        if !width.is_multiple_of(config.heads) {
            return Err(Error::config(
                "model.heads",
                format!("merge width {width} is not divisible by {} heads", config.heads),
            ));
        }
        let attn = if config.attention_width == 0 { n } else { config.attention_width };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for d in config.windows() {
            register_batch_norm(&mut store, &bn_name(d), n, &mut rng)?;
        }
        register_bi_lstm(&mut store, "bilstm", n, n, &mut rng)?;
        if config.use_transformer {
            for &d in &config.aux_windows {
                register_auxiliary_branch(&mut store, &branch_name(d), n, width, config.encoder_layers, config.heads, &mut rng)?;
            }
        }
        register_batch_norm(&mut store, "merge_bn", width, &mut rng)?;
        register_attention_pool(&mut store, "pool", width, attn, &mut rng)?;
        register_affine(&mut store, "head", width, 1, &mut rng)?;
        Ok(AlphaNet { config, mask, store })
    }

    pub fn n_keep(&self) -> usize {
        self.mask.len()
    }

    /// Builds the graph for one batch inside `s`. The output is batch × 1.
    pub fn forward(&self, s: &mut Session, input: &ModelInput) -> Result<Forward> {
        let steps = self.config.seq_len;
        let rows = input.batch * steps;
        let mut normalized = BTreeMap::new();
        for d in self.config.windows() {
            let img = input
                .images
                .get(&d)
                .ok_or_else(|| Error::Shape(format!("missing input image for d={d}")))?;
            if img.dim() != (rows, self.n_keep()) {
                return Err(Error::Shape(format!(
                    "d={d} input is {:?}, expected ({rows}, {})",
                    img.dim(),
                    self.n_keep()
                )));
            }
            let x = s.graph.constant(img.clone())?;
            normalized.insert(d, layers::batch_norm(s, x, &bn_name(d)).map_err(|e| e.in_stage("input_bn"))?);
        }
        let (bilstm, query) = layers::bi_lstm(s, normalized[&self.config.primary_window], steps, "bilstm", self.config.dropout)
            .map_err(|e| e.in_stage("bilstm"))?;
        let mut branches = Vec::new();
        if self.config.use_transformer {
            for &d in &self.config.aux_windows {
                let y = layers::auxiliary_branch(s, normalized[&d], steps, self.config.encoder_layers, self.config.heads, &branch_name(d))
                    .map_err(|e| e.in_stage("auxiliary_branch"))?;
                branches.push(y);
            }
        }
        let merged = layers::residual_merge(s, bilstm, &branches, "merge_bn").map_err(|e| e.in_stage("merge"))?;
        let (ctx, attention) =
            layers::attention_pool(s, bilstm, query, merged, steps, "pool").map_err(|e| e.in_stage("attention_pool"))?;
        let y = layers::affine(s, ctx, "head")?;
        let output = match self.config.output_activation {
            OutputActivation::LeakyRelu => s.graph.leaky_relu(y, self.config.leaky_slope)?,
            OutputActivation::Linear => y,
        };
        Ok(Forward {
            output,
            bilstm,
            merged,
            branches,
            attention,
        })
    }

    /// Inference-mode scores, one per batch row.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut s = Session::new(&self.store, false, 0);
        let f = self.forward(&mut s, input)?;
        Ok(s.graph.value(f.output).column(0).to_vec())
    }

    /// Writes queued running-statistic updates back into the store.
    pub fn apply_updates(&mut self, updates: Vec<(String, Array2<f64>)>) -> Result<()> {
        for (name, v) in updates {
            self.store.set(&name, v)?;
        }
        Ok(())
    }

    /// Extracts masked inputs for `stocks` (panel indices) at `date`.
    pub fn build_input(&self, panel: &Panel, stocks: &[usize], date: i64) -> Result<ModelInput> {
        build_input(&self.config, &self.mask, panel, stocks, date)
    }
}

pub fn build_input(config: &ModelConfig, mask: &FeatureMask, panel: &Panel, stocks: &[usize], date: i64) -> Result<ModelInput> {
    let steps = config.seq_len;
    let n = mask.len();
    let mut images = BTreeMap::new();
    for d in config.windows() {
        let spec = config.window_spec(d);
        let mut m = Array2::zeros((stocks.len() * steps, n));
        for (b, &i) in stocks.iter().enumerate() {
            let img = image_from_series(panel.stock(i), date, &spec)?;
            let feats = extract_columns(&img, &spec, &mask.kept)?;
            m.slice_mut(ndarray::s![b * steps..(b + 1) * steps, ..]).assign(&feats.values);
        }
        images.insert(d, m);
    }
    Ok(ModelInput {
        batch: stocks.len(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_inputs: usize, aux: Vec<usize>) -> AlphaNet {
        let cfg = ModelConfig {
            n_inputs,
            seq_len: 4,
            aux_windows: aux,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mask = FeatureMask::full(&Registry::new(n_inputs));
        AlphaNet::new(cfg, mask, 5).unwrap()
    }

    fn input(model: &AlphaNet, batch: usize) -> ModelInput {
        let rows = batch * model.config.seq_len;
        let images = model
            .config
            .windows()
            .into_iter()
            .map(|d| {
                (
                    d,
                    Array2::from_shape_fn((rows, model.n_keep()), |(r, c)| ((r * 7 + c * 3 + d) as f64 * 0.31).sin()),
                )
            })
            .collect();
        ModelInput { batch, images }
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = tiny(2, vec![2, 5]);
        let x = input(&m, 3);
        let a = m.predict(&x).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, m.predict(&x).unwrap());
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let m = tiny(2, vec![2]);
        let x = input(&m, 3);
        let r = crate::nn::grad_check_store(&m.store, true, 1, Some(3), |s| {
            Ok(m.forward(s, &x)?.output)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn missing_window_is_reported() {
        let m = tiny(2, vec![2]);
        let mut x = input(&m, 2);
        x.images.remove(&2);
        assert!(m.predict(&x).is_err());
    }

    #[test]
    fn odd_heads_rejected() {
        let cfg = ModelConfig {
            n_inputs: 2,
            heads: 3,
            ..ModelConfig::default()
        };
        let r = AlphaNet::new(cfg, FeatureMask::full(&Registry::new(2)), 0);
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
