//! Optimization: weighted MSE, Adam with exponential learning-rate decay,
//! validation-Sharpe early stopping and the rolling train/predict protocol.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barra::{build_exposures, neutralize_labels, residual_projector, MarketSeries, StyleConfig};
use crate::error::{Error, Result};
use crate::evaluation::{top_layer_sharpe, EvalConfig, ScoreTable};
use crate::feature_ops::{extract_feature_image, Registry};
use crate::market_data::{filter_universe, forward_return, image_from_series, Label, Panel, LABEL_HORIZON};
use crate::nn::{AlphaNet, Graph, ModelConfig, Session, Var};
use crate::spearman_dropout::{fit_mask, FeatureMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Targets are Barra residual returns.
    LabelResidual,
    /// Predictions are residualized against the exposures and compared with raw excess returns.
    PredictionResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub patience: usize,
    /// Training dates drawn per epoch; 0 uses all of them.
    pub dates_per_epoch: usize,
    /// Spacing between candidate training dates.
    pub date_stride: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Trailing share of each training window held out for validation.
    pub validation_fraction: f64,
    /// Rescale each date's targets to unit cross-sectional standard deviation.
    pub standardize_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 90,
            lr_start: 1e-3,
            lr_end: 1e-7,
            patience: 10,
            dates_per_epoch: 0,
            date_stride: 1,
            seed: 0,
            loss_mode: LossMode::LabelResidual,
            validation_fraction: 0.15,
            standardize_labels: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if !(self.lr_end > 0.0 && self.lr_end < self.lr_start) {
            return Err(Error::config("train.lr_end", "need 0 < lr_end < lr_start"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if self.date_stride == 0 {
            return Err(Error::config("train.date_stride", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("train.validation_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// w_i = max(y_i, 0) / Σ max(y_j, 0), uniform when no label is positive.
pub fn loss_weights(labels: &[f64]) -> Vec<f64> {
    let pos: f64 = labels.iter().map(|y| y.max(0.0)).sum();
    if pos > 0.0 {
        labels.iter().map(|y| y.max(0.0) / pos).collect()
    } else {
        vec![1.0 / labels.len() as f64; labels.len()]
    }
}

pub fn weighted_mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(loss_weights(labels)
        .iter()
        .zip(preds.iter().zip(labels))
        .map(|(w, (p, y))| w * (y - p).powi(2))
        .sum())
}

/// The weighted MSE of a batch × 1 prediction node.
pub fn weighted_mse_node(g: &mut Graph, preds: Var, labels: &[f64]) -> Result<Var> {
    if g.shape(preds) != (labels.len(), 1) || labels.is_empty() {
        return Err(Error::Shape(format!(
            "predictions {:?} for {} labels",
            g.shape(preds),
            labels.len()
        )));
    }
    let y = g.constant(Array2::from_shape_vec((labels.len(), 1), labels.to_vec()).expect("column"))?;
    let diff = g.sub(preds, y)?;
    let sq = g.mul(diff, diff)?;
    let w = Array2::from_shape_vec((labels.len(), 1), loss_weights(labels)).expect("column");
    let weighted = g.mul_const(sq, w)?;
    g.sum(weighted)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// lr(e) = lr_start · (lr_end / lr_start)^(e / (max_epochs − 1)), epochs from 0.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.max_epochs <= 1 {
        return cfg.lr_start;
    }
    let frac = epoch.min(cfg.max_epochs - 1) as f64 / (cfg.max_epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update. Any non-finite gradient aborts the step before a parameter changes.
    pub fn step(&mut self, store: &mut crate::nn::ParameterStore, grads: &BTreeMap<String, Array2<f64>>, lr: f64) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step);
        let b2t = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.value_mut(name)?;
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Stops once the validation Sharpe has failed to exceed its running maximum for
/// `patience` consecutive epochs; ties count as failures.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_improvement: 0,
        }
    }

    /// Records an epoch's Sharpe; returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, sharpe: f64) -> (bool, bool) {
        let s = if sharpe.is_nan() { f64::NEG_INFINITY } else { sharpe };
        if self.best_epoch.is_none() || s > self.best {
            self.best = s;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            (true, false)
        } else {
            self.since_improvement += 1;
            (false, self.since_improvement >= self.patience)
        }
    }
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One cross-sectional batch: every eligible stock on a date with its target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub date: i64,
    pub stocks: Vec<usize>,
    pub target: Vec<f64>,
    /// Residual projector for the prediction-residual loss.
    pub projector: Option<Array2<f64>>,
}

impl TrainSample {
    /// Divides the targets by their cross-sectional standard deviation. Signs, and so the
    /// loss weights' support, are unchanged.
    pub fn standardize_target(&mut self) {
        let n = self.target.len() as f64;
        let mean = self.target.iter().sum::<f64>() / n;
        let sd = (self.target.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 && sd.is_finite() {
            self.target.iter_mut().for_each(|y| *y /= sd);
        }
    }
}

/// Per-date labels after Barra neutralization.
#[derive(Clone, Debug, PartialEq)]
pub struct Neutralized {
    pub date: i64,
    pub stocks: Vec<usize>,
    pub residual: Vec<f64>,
    pub excess: Vec<f64>,
}

/// Neutralizes the 10-day forward returns of `candidates` at `date`; stocks without
/// a realized forward return are dropped.
pub fn neutralized_labels(
    panel: &Panel,
    date: i64,
    candidates: &[usize],
    styles: &StyleConfig,
    market: &MarketSeries,
) -> Result<(Neutralized, crate::barra::ExposureMatrix)> {
    let stocks: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| forward_return(panel.stock(i), date).is_ok())
        .collect();
    let x = build_exposures(panel, date, &stocks, styles, market)?;
    let mut labels: Vec<Label> = stocks
        .iter()
        .map(|&i| {
            let s = panel.stock(i);
            Ok(Label {
                stock_id: s.id.clone(),
                date,
                raw_forward_return: forward_return(s, date)?,
                residual_return: None,
            })
        })
        .collect::<Result<_>>()?;
    neutralize_labels(&mut labels, &x, styles.riskfree)?;
    let rf = (1.0 + styles.riskfree).powi(LABEL_HORIZON as i32) - 1.0;
    Ok((
        Neutralized {
            date,
            stocks,
            residual: labels.iter().map(|l| l.residual_return.unwrap_or(0.0)).collect(),
            excess: labels.iter().map(|l| l.raw_forward_return - rf).collect(),
        },
        x,
    ))
}

/// Realized neutralized 10-day returns of the scored stocks on each scored date.
/// Dates whose labels are not yet realized or cannot be neutralized are left out.
pub fn realized_residuals(panel: &Panel, scores: &ScoreTable, styles: &StyleConfig, market: &MarketSeries) -> ScoreTable {
    let mut out = ScoreTable::new();
    for (&date, rows) in &scores.by_date {
        let covered = filter_universe(panel, date, styles.return_lookback() + 1);
        let stocks: Vec<usize> = rows.iter().map(|r| r.0).filter(|i| covered.binary_search(i).is_ok()).collect();
        match neutralized_labels(panel, date, &stocks, styles, market) {
            Ok((n, _)) if n.stocks.len() >= 2 => out.insert(date, n.stocks.into_iter().zip(n.residual).collect()),
            Ok(_) => log::debug!("date {date}: labels not realized"),
            Err(e) => log::warn!("date {date}: no realized residuals: {e}"),
        }
    }
    out
}

/// Stocks eligible for the model and the factor model at `date`.
pub fn eligible(panel: &Panel, date: i64, model: &ModelConfig, styles: &StyleConfig) -> Vec<usize> {
    filter_universe(panel, date, model.history_needed().max(styles.return_lookback() + 1))
}

pub fn prepare_sample(
    panel: &Panel,
    date: i64,
    model: &ModelConfig,
    styles: &StyleConfig,
    market: &MarketSeries,
    mode: LossMode,
) -> Result<TrainSample> {
    let universe = eligible(panel, date, model, styles);
    let (n, x) = neutralized_labels(panel, date, &universe, styles, market)?;
    if n.stocks.len() < 2 {
        return Err(Error::Batch(format!("date {date} has {} eligible stocks", n.stocks.len())));
    }
    Ok(match mode {
        LossMode::LabelResidual => TrainSample {
            date,
            stocks: n.stocks,
            target: n.residual,
            projector: None,
        },
        LossMode::PredictionResidual => TrainSample {
            date,
            stocks: n.stocks,
            target: n.excess,
            projector: Some(residual_projector(&x)?),
        },
    })
}

/// Fits the Spearman mask on the full primary-window images of every eligible stock at `date`.
pub fn fit_mask_on_date(panel: &Panel, date: i64, stocks: &[usize], model: &ModelConfig, threshold: f64) -> Result<FeatureMask> {
    let spec = model.window_spec(model.primary_window);
    let batch = stocks
        .iter()
        .map(|&i| extract_feature_image(&image_from_series(panel.stock(i), date, &spec)?, &spec))
        .collect::<Result<Vec<_>>>()?;
    let mask = fit_mask(&batch, threshold)?;
    mask.check_registry(&Registry::new(model.n_inputs))?;
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_sharpe: f64,
    pub stopped: bool,
}

pub fn write_training_log<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "lr", "train_loss", "val_sharpe", "stopped"])?;
    for e in log {
        out.write_record([
            e.epoch.to_string(),
            format!("{}", e.lr),
            format!("{}", e.train_loss),
            format!("{}", e.val_sharpe),
            e.stopped.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CycleOutput {
    /// Parameters from the best-validation epoch.
    pub model: AlphaNet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_sharpe: f64,
    /// Set when training ended on a numeric failure.
    pub diagnostic: Option<String>,
}

/// One gradient step on a sample; returns the batch loss.
pub fn train_step(model: &mut AlphaNet, adam: &mut Adam, sample: &TrainSample, panel: &Panel, lr: f64, seed: u64) -> Result<f64> {
    let input = model.build_input(panel, &sample.stocks, sample.date)?;
    let (loss, grads, updates) = {
        let mut s = Session::new(&model.store, true, seed);
        let f = model.forward(&mut s, &input)?;
        let pred = match &sample.projector {
            Some(p) => {
                let proj = s.graph.constant(p.clone())?;
                s.graph.matmul(proj, f.output)?
            }
            None => f.output,
        };
        let loss = weighted_mse_node(&mut s.graph, pred, &sample.target)?;
        s.graph.backward(loss)?;
        (s.graph.value(loss)[[0, 0]], s.gradients(), s.take_updates())
    };
    adam.step(&mut model.store, &grads, lr)?;
    model.apply_updates(updates)?;
    Ok(loss)
}

/// Inference scores for every eligible stock on each date.
pub fn predict_dates(model: &AlphaNet, panel: &Panel, dates: &[i64], styles: Option<&StyleConfig>) -> Result<ScoreTable> {
    let mut table = ScoreTable::new();
    for &d in dates {
        let stocks = match styles {
            Some(st) => eligible(panel, d, &model.config, st),
            None => filter_universe(panel, d, model.config.history_needed()),
        };
        if stocks.is_empty() {
            continue;
        }
        let input = model.build_input(panel, &stocks, d)?;
        let scores = model.predict(&input)?;
        table.insert(d, stocks.into_iter().zip(scores).collect());
    }
    Ok(table)
}

/// Trains from `model`'s current parameters; validation Sharpe is the top-layer
/// fee-free Sharpe over `val_dates`.
pub fn train_cycle(
    mut model: AlphaNet,
    panel: &Panel,
    samples: &[TrainSample],
    val_dates: &[i64],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<CycleOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Batch("training slice is empty".into()));
    }
    let mut adam = Adam::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut diagnostic = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for epoch in 0..cfg.max_epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let take = if cfg.dates_per_epoch == 0 {
            samples.len()
        } else {
            cfg.dates_per_epoch.min(samples.len())
        };
        let mut total = 0.0;
        for (b, &k) in order[..take].iter().enumerate() {
            let seed = cfg.seed ^ ((epoch as u64) << 32) ^ b as u64;
            match train_step(&mut model, &mut adam, &samples[k], panel, lr, seed) {
                Ok(l) => total += l,
                Err(e @ Error::Numeric(_)) => {
                    log::warn!("epoch {epoch}: {e}; keeping the last good checkpoint");
                    diagnostic = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let scores = predict_dates(&model, panel, val_dates, None)?;
        let sharpe = top_layer_sharpe(&scores, panel, eval)?;
        let (improved, stop) = stopper.observe(epoch, sharpe);
        if improved {
            best = model.clone();
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: total / take as f64,
            val_sharpe: sharpe,
            stopped: stop,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.6e} val sharpe {sharpe:.4}",
            total / take as f64
        );
        if stop {
            break;
        }
    }
    Ok(CycleOutput {
        model: best,
        log,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_sharpe: stopper.best,
        diagnostic,
    })
}

// ---------------------------------------------------------------------------
// Rolling protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub train_start: i64,
    pub train_end: i64,
    pub predict_start: i64,
    pub predict_end: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingSchedule {
    pub cycles: Vec<Cycle>,
}

impl RollingSchedule {
    pub fn new(cycles: Vec<Cycle>) -> Result<Self> {
        if cycles.is_empty() {
            return Err(Error::config("schedule", "no cycles"));
        }
        for (k, c) in cycles.iter().enumerate() {
            if c.train_start > c.train_end || c.train_end >= c.predict_start || c.predict_start > c.predict_end {
                return Err(Error::config("schedule", format!("cycle {k} is out of order: {c:?}")));
            }
            if let Some(n) = cycles.get(k + 1) {
                if n.predict_start != c.predict_end + 1 {
                    return Err(Error::config(
                        "schedule",
                        format!("prediction spans of cycles {k} and {} overlap or leave a gap", k + 1),
                    ));
                }
            }
        }
        Ok(RollingSchedule { cycles })
    }

    /// Expanding windows from `train_start`; [test_start, test_end] is cut into
    /// `n_cycles` contiguous prediction spans.
    pub fn expanding(train_start: i64, test_start: i64, test_end: i64, n_cycles: usize) -> Result<Self> {
        if n_cycles == 0 || test_end < test_start || (test_end - test_start + 1) < n_cycles as i64 {
            return Err(Error::config("schedule.cycles", "test span too short for the cycle count"));
        }
        let span = test_end - test_start + 1;
        let cycles = (0..n_cycles as i64)
            .map(|k| {
                let ps = test_start + span * k / n_cycles as i64;
                let pe = test_start + span * (k + 1) / n_cycles as i64 - 1;
                Cycle {
                    train_start,
                    train_end: ps - 1,
                    predict_start: ps,
                    predict_end: pe,
                }
            })
            .collect();
        Self::new(cycles)
    }
}

/// How each cycle chooses its kept feature columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Greedy Spearman dropout fitted on the first training date.
    #[default]
    Spearman,
    /// A random subset the size of the Spearman mask.
    Random,
    /// Every extracted column.
    Full,
}

/// Everything the rolling protocol needs besides the panel.
#[derive(Clone, Debug)]
pub struct RollingConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub styles: StyleConfig,
    pub eval: EvalConfig,
    pub mask_threshold: f64,
    pub mask_mode: MaskMode,
    /// Cycles trained concurrently; 0 uses the available parallelism.
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct CycleRecord {
    pub cycle: Cycle,
    pub result: std::result::Result<CycleOutput, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RollingOutput {
    pub predictions: ScoreTable,
    pub cycles: Vec<CycleRecord>,
}

/// Splits a training window into sample dates (labels realized before validation
/// starts) and validation rebalance dates (fills realized before the window ends).
pub fn split_window(cycle: &Cycle, cfg: &TrainConfig, eval: &EvalConfig) -> (Vec<i64>, Vec<i64>) {
    let len = cycle.train_end - cycle.train_start + 1;
    let n_val = ((len as f64) * cfg.validation_fraction).ceil() as i64;
    let val_start = cycle.train_end - n_val + 1;
    let train: Vec<i64> = (cycle.train_start..val_start - LABEL_HORIZON)
        .step_by(cfg.date_stride)
        .collect();
    let step = eval.rebalance_every as i64;
    let val: Vec<i64> = (val_start..=cycle.train_end)
        .step_by(eval.rebalance_every)
        .filter(|d| d + step < cycle.train_end)
        .collect();
    (train, val)
}

/// Training samples for every usable date of a cycle's training slice, plus its
/// validation dates.
pub fn cycle_samples(panel: &Panel, market: &MarketSeries, cycle: &Cycle, cfg: &RollingConfig) -> Result<(Vec<TrainSample>, Vec<i64>)> {
    let (train_dates, val_dates) = split_window(cycle, &cfg.train, &cfg.eval);
    let mut samples = Vec::new();
    for &d in &train_dates {
        match prepare_sample(panel, d, &cfg.model, &cfg.styles, market, cfg.train.loss_mode) {
            Ok(mut s) => {
                if cfg.train.standardize_labels {
                    s.standardize_target();
                }
                samples.push(s)
            }
            Err(e) => log::debug!("date {d} skipped: {e}"),
        }
    }
    if samples.is_empty() {
        return Err(Error::Batch(format!(
            "no usable training dates in {}..={}",
            cycle.train_start, cycle.train_end
        )));
    }
    Ok((samples, val_dates))
}

/// The cycle's feature mask, fitted on the first training sample.
pub fn cycle_mask(panel: &Panel, first: &TrainSample, cfg: &RollingConfig, seed: u64) -> Result<FeatureMask> {
    let registry = Registry::new(cfg.model.n_inputs);
    if cfg.mask_mode == MaskMode::Full {
        return Ok(FeatureMask::full(&registry));
    }
    let mask = fit_mask_on_date(panel, first.date, &first.stocks, &cfg.model, cfg.mask_threshold)?;
    match cfg.mask_mode {
        MaskMode::Random => FeatureMask::random(&registry, mask.len(), seed),
        _ => Ok(mask),
    }
}

/// Trains one cycle and returns the model plus its log.
pub fn run_cycle(panel: &Panel, market: &MarketSeries, cycle: &Cycle, cfg: &RollingConfig, cycle_idx: usize) -> Result<CycleOutput> {
    let (samples, val_dates) = cycle_samples(panel, market, cycle, cfg).map_err(|e| e.in_stage("barra"))?;
    let seed = cfg.train.seed.wrapping_add(cycle_idx as u64);
    let mask = cycle_mask(panel, &samples[0], cfg, seed).map_err(|e| e.in_stage("mask"))?;
    let model = AlphaNet::new(cfg.model.clone(), mask, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    train_cycle(model, panel, &samples, &val_dates, &train_cfg, &cfg.eval).map_err(|e| e.in_stage("train"))
}

fn cycle_with_predictions(panel: &Panel, market: &MarketSeries, c: &Cycle, cfg: &RollingConfig, k: usize) -> Result<(CycleOutput, ScoreTable)> {
    let out = run_cycle(panel, market, c, cfg, k)?;
    let dates: Vec<i64> = (c.predict_start..=c.predict_end)
        .step_by(cfg.eval.rebalance_every)
        .collect();
    let p = predict_dates(&out.model, panel, &dates, None).map_err(|e| e.in_stage("predict"))?;
    Ok((out, p))
}

/// Runs every cycle; failures are recorded and the remaining cycles continue.
/// Cycles are independent, so they are spread over `cfg.threads` workers; the
/// result does not depend on the thread count.
pub fn rolling_run(panel: &Panel, schedule: &RollingSchedule, cfg: &RollingConfig) -> Result<RollingOutput> {
    let market = MarketSeries::from_panel(panel);
    let n = schedule.cycles.len();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |p| p.get()),
        t => t,
    }
    .min(n)
    .max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(Result<(CycleOutput, ScoreTable)>, f64)>>> = Mutex::new((0..n).map(|_| None).collect());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= n {
            break;
        }
        let start = Instant::now();
        let r = cycle_with_predictions(panel, &market, &schedule.cycles[k], cfg, k);
        let secs = start.elapsed().as_secs_f64();
        log::info!("cycle {k} finished in {secs:.1}s");
        slots.lock().expect("cycle results")[k] = Some((r, secs));
    };
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut predictions = ScoreTable::new();
    let mut cycles = Vec::new();
    for (k, slot) in slots.into_inner().expect("cycle results").into_iter().enumerate() {
        let cycle = schedule.cycles[k];
        let (r, seconds) = slot.expect("every cycle runs");
        match r {
            Ok((out, p)) => {
                predictions.extend(p);
                cycles.push(CycleRecord {
                    cycle,
                    result: Ok(out),
                    seconds,
                });
            }
            Err(e) => {
                log::warn!("cycle {k} failed: {e}");
                cycles.push(CycleRecord {
                    cycle,
                    result: Err(e.to_string()),
                    seconds,
                });
            }
        }
    }
    Ok(RollingOutput { predictions, cycles })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((weighted_mse(&[0.0, 0.0], &[0.1, -0.1]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(weighted_mse(&[0.2, 0.3], &[0.2, 0.3]).unwrap(), 0.0);
        // weights 0.25 and 0.75 on squared errors 0.01 and 0.09
        assert!((weighted_mse(&[0.0, 0.0], &[0.1, 0.3]).unwrap() - 0.07).abs() < 1e-12);
        assert_eq!(loss_weights(&[-1.0, 0.0]), vec![0.5, 0.5]);
        assert!(weighted_mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        assert!((learning_rate(&cfg, 0) - 1e-3).abs() < 1e-18);
        assert!((learning_rate(&cfg, 89) - 1e-7).abs() < 1e-18);
    }

    #[test]
    fn constant_sharpe_stops_after_patience() {
        let mut es = EarlyStopping::new(10);
        let mut stopped_at = None;
        for e in 0..90 {
            if es.observe(e, 1.0).1 {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(10));
        assert_eq!(es.best_epoch, Some(0));
    }

    #[test]
    fn schedule_invariants() {
        let s = RollingSchedule::expanding(0, 100, 199, 5).unwrap();
        assert_eq!(s.cycles.len(), 5);
        assert_eq!(s.cycles[0].predict_start, 100);
        assert_eq!(s.cycles[4].predict_end, 199);
        let mut bad = s.cycles.clone();
        bad[1].predict_start -= 1;
        assert!(RollingSchedule::new(bad).is_err());
    }
}
