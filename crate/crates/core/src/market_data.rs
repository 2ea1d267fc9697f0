//! Panel ingestion, the 13 derived model inputs, data images and forward-return labels.
//!
//! Dates are plain trading-day indices. Every row carries its own feature vector,
//! computed once when the panel is built; rows whose denominators vanish (zero
//! turnover, free turnover, low or high) or whose previous close is missing are
//! unusable and poison any image that touches them.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_ops::WindowSpec;

pub const N_FEATURES: usize = 13;

/// Canonical input order. Every downstream index contract depends on it.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "div_open_close",
    "div_high_close",
    "div_low_close",
    "close",
    "div_vwap_close",
    "volume_sqrt",
    "return",
    "turnover",
    "div_close_freeturn",
    "div_price_turnover",
    "div_volume_low",
    "div_low_high",
    "div_vwap_close_2",
];

pub const IDX_CLOSE: usize = 3;
pub const IDX_DIV_VWAP_CLOSE: usize = 4;
pub const IDX_RETURN: usize = 6;
pub const IDX_TURNOVER: usize = 7;

/// Forward horizon of the label, in trading days.
pub const LABEL_HORIZON: i64 = 10;

pub const BASE_COLUMNS: [&str; 13] = [
    "stock_id",
    "date",
    "open",
    "high",
    "low",
    "close",
    "vwap",
    "volume",
    "turnover",
    "free_turnover",
    "market_cap",
    "industry_id",
    "excluded",
];

pub const FUNDAMENTAL_COLUMNS: [&str; 11] = [
    "epibs", "etop", "cetop", "sgro", "egro", "egibs", "egibs_s", "btop", "mlev", "dtoa", "blev",
];

/// Optional fundamental inputs for the CNE5 fundamental style factors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fundamentals {
    pub epibs: Option<f64>,
    pub etop: Option<f64>,
    pub cetop: Option<f64>,
    pub sgro: Option<f64>,
    pub egro: Option<f64>,
    pub egibs: Option<f64>,
    pub egibs_s: Option<f64>,
    pub btop: Option<f64>,
    pub mlev: Option<f64>,
    pub dtoa: Option<f64>,
    pub blev: Option<f64>,
}

impl Fundamentals {
    fn as_array(&self) -> [Option<f64>; 11] {
        [
            self.epibs,
            self.etop,
            self.cetop,
            self.sgro,
            self.egro,
            self.egibs,
            self.egibs_s,
            self.btop,
            self.mlev,
            self.dtoa,
            self.blev,
        ]
    }

    fn from_array(v: [Option<f64>; 11]) -> Self {
        Fundamentals {
            epibs: v[0],
            etop: v[1],
            cetop: v[2],
            sgro: v[3],
            egro: v[4],
            egibs: v[5],
            egibs_s: v[6],
            btop: v[7],
            mlev: v[8],
            dtoa: v[9],
            blev: v[10],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.as_array().iter().all(Option::is_none)
    }
}

/// One stock-day of market data.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelRow {
    pub stock_id: String,
    pub date: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub vwap: f64,
    pub volume: f64,
    pub turnover: f64,
    pub free_turnover: f64,
    pub market_cap: f64,
    pub industry_id: usize,
    pub excluded: bool,
    pub fundamentals: Fundamentals,
}

/// The 13 derived inputs in canonical order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn get(&self, idx: usize) -> f64 {
        self.0[idx]
    }

    pub fn close(&self) -> f64 {
        self.0[IDX_CLOSE]
    }

    pub fn ret(&self) -> f64 {
        self.0[IDX_RETURN]
    }
}

/// Derives the model inputs for one row. Returns `None` when the row is unusable
/// (a zero denominator or a non-positive previous close).
pub fn compute_input_features(row: &PanelRow, prev_close: f64) -> Option<FeatureVector> {
    let PanelRow {
        open,
        high,
        low,
        close,
        vwap,
        volume,
        turnover,
        free_turnover,
        ..
    } = *row;
    if close <= 0.0 || prev_close <= 0.0 {
        return None;
    }
    if turnover == 0.0 || free_turnover == 0.0 || low == 0.0 || high == 0.0 {
        return None;
    }
    let v = [
        (open - close) / close,
        (high - close) / close,
        (low - close) / close,
        close,
        (vwap - close) / close,
        volume.powf(0.125),
        close / prev_close - 1.0,
        turnover,
        close / free_turnover,
        (open * free_turnover) / (turnover * close),
        volume / low,
        low / high,
        vwap / close,
    ];
    if v.iter().all(|x| x.is_finite()) {
        Some(FeatureVector(v))
    } else {
        None
    }
}

/// One stock's rows, sorted by date, with cached feature vectors.
#[derive(Clone, Debug)]
pub struct StockSeries {
    pub id: String,
    pub rows: Vec<PanelRow>,
    features: Vec<Option<FeatureVector>>,
}

impl StockSeries {
    fn new(id: String, rows: Vec<PanelRow>) -> Self {
        let features = rows
            .iter()
            .enumerate()
            .map(|(j, row)| {
                let prev = j.checked_sub(1).map(|p| &rows[p])?;
                if prev.date + 1 != row.date {
                    return None;
                }
                compute_input_features(row, prev.close)
            })
            .collect();
        StockSeries { id, rows, features }
    }

    /// Position of `date` in `rows`.
    pub fn position(&self, date: i64) -> Option<usize> {
        self.rows.binary_search_by_key(&date, |r| r.date).ok()
    }

    pub fn row_at(&self, date: i64) -> Option<&PanelRow> {
        self.position(date).map(|p| &self.rows[p])
    }

    pub fn features_at(&self, date: i64) -> Option<&FeatureVector> {
        self.position(date).and_then(|p| self.features[p].as_ref())
    }

    pub fn feature_slice(&self) -> &[Option<FeatureVector>] {
        &self.features
    }

    /// True when the `count` rows ending at `date` exist on consecutive days and are all usable.
    pub fn has_valid_history(&self, date: i64, count: usize) -> bool {
        let Some(end) = self.position(date) else {
            return false;
        };
        if count == 0 {
            return true;
        }
        if end + 1 < count {
            return false;
        }
        let start = end + 1 - count;
        self.rows[end].date - self.rows[start].date == (count as i64 - 1)
            && self.features[start..=end].iter().all(Option::is_some)
    }
}

/// Long-form market panel grouped by stock.
#[derive(Clone, Debug)]
pub struct Panel {
    stocks: Vec<StockSeries>,
    index: HashMap<String, usize>,
    n_industries: usize,
    first_date: i64,
    last_date: i64,
    has_fundamentals: bool,
}

impl Panel {
    /// Groups rows by stock (first-appearance order) and validates them.
    pub fn from_rows(rows: Vec<PanelRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("panel has no rows".into()));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut grouped: Vec<(String, Vec<PanelRow>)> = Vec::new();
        let mut n_industries = 0;
        let mut has_fundamentals = false;
        for row in rows {
            for (name, v) in [
                ("open", row.open),
                ("high", row.high),
                ("low", row.low),
                ("close", row.close),
                ("vwap", row.vwap),
                ("volume", row.volume),
                ("turnover", row.turnover),
                ("free_turnover", row.free_turnover),
                ("market_cap", row.market_cap),
            ] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Domain(format!(
                        "{name} = {v} for {} at date {}",
                        row.stock_id, row.date
                    )));
                }
            }
            if row.close <= 0.0 || row.market_cap <= 0.0 {
                return Err(Error::Domain(format!(
                    "non-positive close or market cap for {} at date {}",
                    row.stock_id, row.date
                )));
            }
            n_industries = n_industries.max(row.industry_id + 1);
            has_fundamentals |= !row.fundamentals.is_empty();
            let slot = *index.entry(row.stock_id.clone()).or_insert_with(|| {
                grouped.push((row.stock_id.clone(), Vec::new()));
                grouped.len() - 1
            });
            grouped[slot].1.push(row);
        }
        let mut first_date = i64::MAX;
        let mut last_date = i64::MIN;
        for (id, rows) in &grouped {
            if rows.windows(2).any(|w| w[1].date <= w[0].date) {
                return Err(Error::Param(format!(
                    "dates are not strictly increasing for {id}"
                )));
            }
            first_date = first_date.min(rows[0].date);
            last_date = last_date.max(rows[rows.len() - 1].date);
        }
        let stocks = grouped
            .into_iter()
            .map(|(id, rows)| StockSeries::new(id, rows))
            .collect();
        Ok(Panel {
            stocks,
            index,
            n_industries,
            first_date,
            last_date,
            has_fundamentals,
        })
    }

    pub fn stocks(&self) -> &[StockSeries] {
        &self.stocks
    }

    pub fn stock(&self, idx: usize) -> &StockSeries {
        &self.stocks[idx]
    }

    pub fn stock_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn n_stocks(&self) -> usize {
        self.stocks.len()
    }

    pub fn n_industries(&self) -> usize {
        self.n_industries
    }

    pub fn first_date(&self) -> i64 {
        self.first_date
    }

    pub fn last_date(&self) -> i64 {
        self.last_date
    }

    pub fn has_fundamentals(&self) -> bool {
        self.has_fundamentals
    }

    pub fn n_rows(&self) -> usize {
        self.stocks.iter().map(|s| s.rows.len()).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &PanelRow> {
        self.stocks.iter().flat_map(|s| s.rows.iter())
    }

    fn series(&self, stock_id: &str) -> Result<&StockSeries> {
        self.stock_index(stock_id)
            .map(|i| &self.stocks[i])
            .ok_or_else(|| Error::Param(format!("unknown stock {stock_id}")))
    }
}

/// 13 × k matrix of inputs for one stock ending at `end_date`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataImage {
    pub stock_id: String,
    pub end_date: i64,
    pub values: Array2<f64>,
}

impl DataImage {
    pub fn n_inputs(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Assembles the data image for `stock_id` ending at `t`, sized so that the
/// extraction layer yields exactly `spec.seq_len` steps.
pub fn assemble_data_image(
    panel: &Panel,
    stock_id: &str,
    t: i64,
    spec: &WindowSpec,
) -> Result<DataImage> {
    let series = panel.series(stock_id)?;
    image_from_series(series, t, spec)
}

pub(crate) fn image_from_series(
    series: &StockSeries,
    t: i64,
    spec: &WindowSpec,
) -> Result<DataImage> {
    let k = spec.image_len();
    let needed = k + 1;
    let end = series.position(t).ok_or_else(|| Error::History {
        stock: series.id.clone(),
        date: t,
        needed,
        available: 0,
    })?;
    if end + 1 < needed {
        return Err(Error::History {
            stock: series.id.clone(),
            date: t,
            needed,
            available: end + 1,
        });
    }
    let start = end + 1 - k;
    let mut values = Array2::zeros((N_FEATURES, k));
    for (col, pos) in (start..=end).enumerate() {
        let row = &series.rows[pos];
        if row.date != t - (end - pos) as i64 {
            return Err(Error::Gap {
                stock: series.id.clone(),
                date: t - (end - pos) as i64,
            });
        }
        let fv = series.features[pos].ok_or_else(|| Error::Gap {
            stock: series.id.clone(),
            date: row.date,
        })?;
        for (r, v) in fv.0.iter().enumerate() {
            values[[r, col]] = *v;
        }
    }
    Ok(DataImage {
        stock_id: series.id.clone(),
        end_date: t,
        values,
    })
}

/// Forward-return label; `residual_return` is filled by neutralization.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub stock_id: String,
    pub date: i64,
    pub raw_forward_return: f64,
    pub residual_return: Option<f64>,
}

pub fn build_label(panel: &Panel, stock_id: &str, t: i64) -> Result<Label> {
    let series = panel.series(stock_id)?;
    forward_return(series, t).map(|r| Label {
        stock_id: stock_id.to_string(),
        date: t,
        raw_forward_return: r,
        residual_return: None,
    })
}

/// close(t + 10) / close(t) - 1.
pub fn forward_return(series: &StockSeries, t: i64) -> Result<f64> {
    let missing = |available| Error::History {
        stock: series.id.clone(),
        date: t,
        needed: LABEL_HORIZON as usize + 1,
        available,
    };
    let now = series.row_at(t).ok_or_else(|| missing(0))?;
    let later = series
        .row_at(t + LABEL_HORIZON)
        .ok_or_else(|| missing((series.last_date() - t).max(0) as usize + 1))?;
    Ok(later.close / now.close - 1.0)
}

impl StockSeries {
    fn last_date(&self) -> i64 {
        self.rows.last().map_or(i64::MIN, |r| r.date)
    }
}

/// Indices of stocks tradable at `t`: present, not excluded, and with `lookback`
/// consecutive usable rows ending at `t`.
pub fn filter_universe(panel: &Panel, t: i64, lookback: usize) -> Vec<usize> {
    panel
        .stocks
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.row_at(t).is_some_and(|r| !r.excluded) && s.has_valid_history(t, lookback.max(1))
        })
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic panels
// ---------------------------------------------------------------------------

/// Number of trailing feature vectors the planted signal reads.
pub const SIGNAL_WINDOW: usize = 10;
/// Trading days over which each date's planted signal is paid out.
pub const SIGNAL_HORIZON: usize = 10;
/// Return over the next [`SIGNAL_HORIZON`] days per unit of the (cross-sectionally
/// standardized) planted signal at full strength.
pub const SIGNAL_LOADING: f64 = 0.02;
/// Weights of the two signal components: short-term reversal and decayed vwap premium.
pub const SIGNAL_WEIGHTS: [f64; 2] = [-0.8, 0.6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_stocks: usize,
    pub n_days: usize,
    pub alpha_strength: f64,
    pub n_industries: usize,
    pub excluded_fraction: f64,
    pub emit_fundamentals: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_stocks: 100,
            n_days: 600,
            alpha_strength: 1.0,
            n_industries: 8,
            excluded_fraction: 0.005,
            emit_fundamentals: false,
        }
    }
}

/// The two raw planted-signal components from the trailing [`SIGNAL_WINDOW`] feature vectors:
/// the window's close-to-close return and the linearly decayed mean of `div_vwap_close`.
pub fn signal_components(trailing: &[FeatureVector]) -> (f64, f64) {
    let w = &trailing[trailing.len() - SIGNAL_WINDOW..];
    let past_return = w[SIGNAL_WINDOW - 1].close() / w[0].close() - 1.0;
    let norm = (SIGNAL_WINDOW * (SIGNAL_WINDOW + 1)) as f64 / 2.0;
    let vwap_premium = w
        .iter()
        .enumerate()
        .map(|(i, f)| (i + 1) as f64 * f.get(IDX_DIV_VWAP_CLOSE))
        .sum::<f64>()
        / norm;
    (past_return, vwap_premium)
}

fn zscore_in_place(v: &mut [f64]) {
    let n = v.len() as f64;
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// g = z(-0.8 z(past_return) + 0.6 z(vwap_premium)), standardized across the given stocks.
pub fn combine_signal(components: &[(f64, f64)]) -> Vec<f64> {
    let mut a: Vec<f64> = components.iter().map(|c| c.0).collect();
    let mut b: Vec<f64> = components.iter().map(|c| c.1).collect();
    zscore_in_place(&mut a);
    zscore_in_place(&mut b);
    let mut g: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| SIGNAL_WEIGHTS[0] * x + SIGNAL_WEIGHTS[1] * y)
        .collect();
    zscore_in_place(&mut g);
    g
}

/// Planted signal at date `t` for every stock with a full usable trailing window.
pub fn planted_signal(panel: &Panel, t: i64) -> Vec<(usize, f64)> {
    let mut idx = Vec::new();
    let mut comps = Vec::new();
    for (i, s) in panel.stocks.iter().enumerate() {
        if !s.has_valid_history(t, SIGNAL_WINDOW) {
            continue;
        }
        let end = s.position(t).expect("checked by has_valid_history");
        let trailing: Vec<FeatureVector> = s.features[end + 1 - SIGNAL_WINDOW..=end]
            .iter()
            .map(|f| f.expect("checked by has_valid_history"))
            .collect();
        idx.push(i);
        comps.push(signal_components(&trailing));
    }
    idx.into_iter().zip(combine_signal(&comps)).collect()
}

struct SynthStock {
    id: String,
    industry: usize,
    shares: f64,
    beta: f64,
    size_loading: f64,
    idio_vol: f64,
    base_turnover: f64,
    free_ratio: f64,
    fundamentals: Fundamentals,
}

/// Generates a deterministic panel: geometric random walks driven by market, industry and
/// size factors. Each date's [`planted_signal`] adds `alpha_strength * SIGNAL_LOADING * g`
/// to the stock's return, spread evenly over the following [`SIGNAL_HORIZON`] days.
pub fn generate_synthetic_panel(cfg: &SynthConfig) -> Result<Panel> {
    if cfg.n_stocks < 2 {
        return Err(Error::Param(format!(
            "n_stocks must be at least 2, got {}",
            cfg.n_stocks
        )));
    }
    if cfg.n_days < 60 {
        return Err(Error::Param(format!(
            "n_days must be at least 60, got {}",
            cfg.n_days
        )));
    }
    if !(0.0..=1.0).contains(&cfg.alpha_strength) {
        return Err(Error::Param(format!(
            "alpha_strength must lie in [0, 1], got {}",
            cfg.alpha_strength
        )));
    }
    if cfg.n_industries == 0 {
        return Err(Error::Param("n_industries must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.excluded_fraction) {
        return Err(Error::Param(format!(
            "excluded_fraction must lie in [0, 1), got {}",
            cfg.excluded_fraction
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let width = (cfg.n_stocks as f64).log10().ceil().max(4.0) as usize;

    let mut stocks = Vec::with_capacity(cfg.n_stocks);
    let mut log_caps = Vec::with_capacity(cfg.n_stocks);
    let mut prices = Vec::with_capacity(cfg.n_stocks);
    for i in 0..cfg.n_stocks {
        let industry = rng.random_range(0..cfg.n_industries);
        let log_cap = (5e9f64).ln() + std_normal.sample(&mut rng);
        let price = rng.random_range(5.0..50.0);
        let beta = rng.random_range(0.5..1.5);
        let idio_vol = 0.012 + 0.008 * rng.random::<f64>();
        let base_turnover = (0.015f64.ln() + 0.5 * std_normal.sample(&mut rng)).exp();
        let free_ratio = rng.random_range(1.2..2.5);
        let fundamentals = if cfg.emit_fundamentals {
            let mut draw = |m: f64, s: f64| Some(m + s * std_normal.sample(&mut rng));
            Fundamentals {
                epibs: draw(0.05, 0.02),
                etop: draw(0.05, 0.02),
                cetop: draw(0.06, 0.03),
                sgro: draw(0.1, 0.1),
                egro: draw(0.1, 0.15),
                egibs: draw(0.1, 0.1),
                egibs_s: draw(0.1, 0.1),
                btop: draw(0.5, 0.2),
                mlev: draw(1.5, 0.4),
                dtoa: draw(0.45, 0.15),
                blev: draw(1.3, 0.3),
            }
        } else {
            Fundamentals::default()
        };
        log_caps.push(log_cap);
        prices.push(price);
        stocks.push(SynthStock {
            id: format!("S{i:0width$}"),
            industry,
            shares: log_cap.exp() / price,
            beta,
            size_loading: 0.0,
            idio_vol,
            base_turnover,
            free_ratio,
            fundamentals,
        });
    }
    let mut size_z = log_caps.clone();
    zscore_in_place(&mut size_z);
    for (s, z) in stocks.iter_mut().zip(&size_z) {
        s.size_loading = -z;
    }

    let drift = SIGNAL_LOADING * cfg.alpha_strength / SIGNAL_HORIZON as f64;
    // Signals of the most recent dates; today's drift is their sum.
    let mut pending: VecDeque<Vec<f64>> = VecDeque::with_capacity(SIGNAL_HORIZON);
    let mut rows: Vec<Vec<PanelRow>> = (0..cfg.n_stocks)
        .map(|_| Vec::with_capacity(cfg.n_days))
        .collect();
    let mut features: Vec<Vec<FeatureVector>> = (0..cfg.n_stocks)
        .map(|_| Vec::with_capacity(cfg.n_days))
        .collect();

    for day in 0..cfg.n_days {
        let market = 0.0003 + 0.01 * std_normal.sample(&mut rng);
        let industry: Vec<f64> = (0..cfg.n_industries)
            .map(|_| 0.005 * std_normal.sample(&mut rng))
            .collect();
        let size_factor = 0.003 * std_normal.sample(&mut rng);

        if features[0].len() >= SIGNAL_WINDOW && drift > 0.0 {
            let comps: Vec<(f64, f64)> = features.iter().map(|f| signal_components(f)).collect();
            if pending.len() == SIGNAL_HORIZON {
                pending.pop_front();
            }
            pending.push_back(combine_signal(&comps));
        }
        let signal: Vec<f64> = (0..cfg.n_stocks)
            .map(|i| pending.iter().map(|g| g[i]).sum())
            .collect();

        for (i, s) in stocks.iter().enumerate() {
            let eps = std_normal.sample(&mut rng);
            let open_noise = std_normal.sample(&mut rng);
            let high_noise = std_normal.sample(&mut rng).abs();
            let low_noise = std_normal.sample(&mut rng).abs();
            let vwap_noise = std_normal.sample(&mut rng);
            let turnover_noise = std_normal.sample(&mut rng);
            let excluded = rng.random::<f64>() < cfg.excluded_fraction;

            let prev_close = prices[i];
            let ret = if day == 0 {
                0.0
            } else {
                (s.beta * market
                    + industry[s.industry]
                    + s.size_loading * size_factor
                    + drift * signal[i]
                    + s.idio_vol * eps)
                    .clamp(-0.2, 0.2)
            };
            let close = prev_close * (1.0 + ret);
            let open = prev_close * (1.0 + 0.3 * s.idio_vol * open_noise).max(0.5);
            let high = open.max(close) * (1.0 + 0.4 * s.idio_vol * high_noise);
            let low = open.min(close) * (1.0 - 0.4 * s.idio_vol * low_noise).max(0.5);
            let vwap = 0.5 * (open + close) * (1.0 + 0.2 * s.idio_vol * vwap_noise);
            let turnover = s.base_turnover * (0.3 * turnover_noise + 5.0 * ret.abs()).exp();
            let row = PanelRow {
                stock_id: s.id.clone(),
                date: day as i64,
                open,
                high,
                low,
                close,
                vwap,
                volume: turnover * s.shares,
                turnover,
                free_turnover: turnover * s.free_ratio,
                market_cap: close * s.shares,
                industry_id: s.industry,
                excluded,
                fundamentals: s.fundamentals.clone(),
            };
            if day > 0 {
                let fv = compute_input_features(&row, prev_close)
                    .expect("synthetic rows have positive denominators");
                features[i].push(fv);
            }
            prices[i] = close;
            rows[i].push(row);
        }
    }
    Panel::from_rows(rows.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_panel_csv<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
    if panel.has_fundamentals {
        header.extend(FUNDAMENTAL_COLUMNS);
    }
    w.write_record(&header)?;
    for row in panel.rows() {
        let mut rec = vec![
            row.stock_id.clone(),
            row.date.to_string(),
            fmt_f64(row.open),
            fmt_f64(row.high),
            fmt_f64(row.low),
            fmt_f64(row.close),
            fmt_f64(row.vwap),
            fmt_f64(row.volume),
            fmt_f64(row.turnover),
            fmt_f64(row.free_turnover),
            fmt_f64(row.market_cap),
            row.industry_id.to_string(),
            u8::from(row.excluded).to_string(),
        ];
        if panel.has_fundamentals {
            rec.extend(
                row.fundamentals
                    .as_array()
                    .iter()
                    .map(|v| v.map(fmt_f64).unwrap_or_default()),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<panel csv>", e))?;
    Ok(())
}

pub fn save_panel(panel: &Panel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_csv(panel, std::io::BufWriter::new(file))
}

pub fn read_panel_csv<R: Read>(reader: R) -> Result<Panel> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut base = [0usize; 13];
    for (slot, name) in base.iter_mut().zip(BASE_COLUMNS) {
        *slot = col(name).ok_or_else(|| Error::Param(format!("missing column `{name}`")))?;
    }
    let fund: Vec<Option<usize>> = FUNDAMENTAL_COLUMNS.iter().map(|n| col(n)).collect();

    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Param(format!(
                    "row {}: cannot parse `{}` as a number in column `{}`",
                    line + 2,
                    field(i),
                    &headers[i]
                ))
            })
        };
        let int = |i: usize| -> Result<i64> {
            field(i).parse::<i64>().map_err(|_| {
                Error::Param(format!(
                    "row {}: cannot parse `{}` as an integer in column `{}`",
                    line + 2,
                    field(i),
                    &headers[i]
                ))
            })
        };
        let excluded = match field(base[12]).to_ascii_lowercase().as_str() {
            "1" | "true" => true,
            "0" | "false" | "" => false,
            other => {
                return Err(Error::Param(format!(
                    "row {}: bad excluded flag `{other}`",
                    line + 2
                )))
            }
        };
        let industry = int(base[11])?;
        if industry < 0 {
            return Err(Error::Param(format!(
                "row {}: negative industry_id",
                line + 2
            )));
        }
        let mut f = [None; 11];
        for (slot, c) in f.iter_mut().zip(&fund) {
            if let Some(c) = *c {
                if !field(c).is_empty() {
                    *slot = Some(num(c)?);
                }
            }
        }
        rows.push(PanelRow {
            stock_id: field(base[0]).to_string(),
            date: int(base[1])?,
            open: num(base[2])?,
            high: num(base[3])?,
            low: num(base[4])?,
            close: num(base[5])?,
            vwap: num(base[6])?,
            volume: num(base[7])?,
            turnover: num(base[8])?,
            free_turnover: num(base[9])?,
            market_cap: num(base[10])?,
            industry_id: industry as usize,
            excluded,
            fundamentals: Fundamentals::from_array(f),
        });
    }
    Panel::from_rows(rows)
}

pub fn load_panel(path: &Path) -> Result<Panel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel_csv(std::io::BufReader::new(file))
}
