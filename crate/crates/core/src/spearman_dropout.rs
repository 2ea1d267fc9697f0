//! Deterministic feature dropout from Spearman rank correlations.
//!
//! The mask is fitted once on the first batch of primary-window feature images:
//! columns are visited in registry order and a column survives only if its absolute
//! rank correlation with every column kept so far is at most the threshold.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_ops::{registry_width, FeatureImage, Registry};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// |ρ| at or above this is an exact rank duplicate and is dropped even at threshold 1.
const PERFECT_RANK_CORRELATION: f64 = 1.0 - 1e-12;

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Centers and scales to unit norm; `None` for a zero-variance series.
fn unit_centered(x: &[f64]) -> Option<Vec<f64>> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        None
    } else {
        Some(c.into_iter().map(|v| v / norm).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson correlation of average-tie ranks; 0 when either rank series is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("series lengths {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Shape("spearman needs at least 2 points".into()));
    }
    match (
        unit_centered(&average_ranks(a)),
        unit_centered(&average_ranks(b)),
    ) {
        (Some(ra), Some(rb)) => Ok(dot(&ra, &rb).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

/// Retained registry columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub threshold: f64,
    pub kept: Vec<usize>,
    pub registry_hash: String,
    #[serde(default)]
    pub fitted_on: String,
}

impl FeatureMask {
    /// Keeps every column of the registry.
    pub fn full(registry: &Registry) -> Self {
        FeatureMask {
            threshold: 1.0,
            kept: (0..registry.len()).collect(),
            registry_hash: registry.hash(),
            fitted_on: "identity".into(),
        }
    }

    /// Uniformly random subset of `n_keep` columns (the random-sampling ablation).
    pub fn random(registry: &Registry, n_keep: usize, seed: u64) -> Result<Self> {
        if n_keep == 0 || n_keep > registry.len() {
            return Err(Error::Param(format!(
                "n_keep must lie in 1..={}, got {n_keep}",
                registry.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kept = sample(&mut rng, registry.len(), n_keep).into_vec();
        kept.sort_unstable();
        Ok(FeatureMask {
            threshold: f64::NAN,
            kept,
            registry_hash: registry.hash(),
            fitted_on: format!("random sample, seed {seed}"),
        })
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Wire<'a> {
            threshold: Option<f64>,
            kept: &'a [usize],
            registry_hash: &'a str,
            fitted_on: &'a str,
        }
        Ok(serde_json::to_string_pretty(&Wire {
            threshold: self.threshold.is_finite().then_some(self.threshold),
            kept: &self.kept,
            registry_hash: &self.registry_hash,
            fitted_on: &self.fitted_on,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wire {
            threshold: Option<f64>,
            kept: Vec<usize>,
            registry_hash: String,
            #[serde(default)]
            fitted_on: String,
        }
        let w: Wire = serde_json::from_str(s)?;
        if w.kept.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Mask("kept indices must be strictly increasing".into()));
        }
        Ok(FeatureMask {
            threshold: w.threshold.unwrap_or(f64::NAN),
            kept: w.kept,
            registry_hash: w.registry_hash,
            fitted_on: w.fitted_on,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Verifies the mask was fitted against `registry`.
    pub fn check_registry(&self, registry: &Registry) -> Result<()> {
        if self.registry_hash != registry.hash() {
            return Err(Error::Mask("registry hash differs from the fitted mask".into()));
        }
        if let Some(&bad) = self.kept.iter().find(|&&k| k >= registry.len()) {
            return Err(Error::Mask(format!("kept index {bad} outside registry")));
        }
        Ok(())
    }
}

/// Stacks column `c` of every image, flattened over (sample, time step).
fn flattened_columns(batch: &[FeatureImage]) -> Array2<f64> {
    let steps = batch[0].values.nrows();
    let width = batch[0].values.ncols();
    let mut out = Array2::zeros((width, batch.len() * steps));
    for (s, img) in batch.iter().enumerate() {
        for t in 0..steps {
            for c in 0..width {
                out[[c, s * steps + t]] = img.values[[t, c]];
            }
        }
    }
    out
}

/// Greedy first-kept-wins selection in registry order: drop a column iff its
/// |Spearman ρ| with some already kept column exceeds `threshold`.
pub fn fit_mask(first_batch: &[FeatureImage], threshold: f64) -> Result<FeatureMask> {
    let first = first_batch
        .first()
        .ok_or_else(|| Error::Batch("cannot fit a mask on an empty batch".into()))?;
    if first_batch.len() < 2 {
        return Err(Error::Batch("mask fitting needs at least 2 samples".into()));
    }
    if !first.is_full() {
        return Err(Error::Mask("mask must be fitted on unmasked feature images".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Param(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    for img in first_batch {
        if img.values.dim() != first.values.dim() || img.n_inputs != first.n_inputs {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
    }
    let registry = Registry::new(first.n_inputs);
    let flat = flattened_columns(first_batch);
    let ranked: Vec<Option<Vec<f64>>> = flat
        .rows()
        .into_iter()
        .map(|r| unit_centered(&average_ranks(&r.to_vec())))
        .collect();

    let mut kept: Vec<usize> = Vec::new();
    for (c, cand) in ranked.iter().enumerate() {
        let redundant = kept.iter().any(|&k| {
            let rho = match (cand, &ranked[k]) {
                (Some(a), Some(b)) => dot(a, b).clamp(-1.0, 1.0),
                // Constant columns have no rank correlation but may still be copies.
                _ => return flat.row(c) == flat.row(k),
            };
            rho.abs() > threshold || rho.abs() >= PERFECT_RANK_CORRELATION
        });
        if !redundant {
            kept.push(c);
        }
    }
    Ok(FeatureMask {
        threshold,
        kept,
        registry_hash: registry.hash(),
        fitted_on: format!(
            "{} samples × {} steps, {}",
            first_batch.len(),
            first.values.nrows(),
            first.window
        ),
    })
}

/// Restricts a full feature image to the mask's columns.
pub fn apply_mask(img: &FeatureImage, mask: &FeatureMask) -> Result<FeatureImage> {
    let registry = Registry::new(img.n_inputs);
    if img.width() != registry_width(img.n_inputs) || !img.is_full() {
        return Err(Error::Mask(format!(
            "image has {} columns, expected the full registry of {}",
            img.width(),
            registry.len()
        )));
    }
    mask.check_registry(&registry)?;
    let values = Array2::from_shape_fn((img.values.nrows(), mask.kept.len()), |(t, c)| {
        img.values[[t, mask.kept[c]]]
    });
    Ok(FeatureImage {
        window: img.window,
        n_inputs: img.n_inputs,
        columns: mask.kept.clone(),
        values,
        flagged: img.flagged,
    })
}
