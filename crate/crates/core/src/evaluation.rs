//! Scoring predictions: rank IC, equal-weight layered backtests, an index-relative
//! backtest with a turnover cap, performance metrics and parameter significance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_ops::Registry;
use crate::market_data::Panel;
use crate::nn::AlphaNet;
use crate::spearman_dropout::spearman_rho;

/// Trading days per year over a 10-day rebalance period.
pub const PERIODS_PER_YEAR: f64 = 25.2;
pub const TRADING_DAYS_PER_YEAR: i64 = 252;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_layers: usize,
    pub rebalance_every: usize,
    pub fee_rate: f64,
    /// Charged on sells only.
    pub stamp_rate: f64,
    pub turnover_cap: f64,
    /// Dates with fewer scored stocks are left out of the IC series.
    pub min_ic_stocks: usize,
    /// Fraction of the universe, by market cap, forming the benchmark.
    pub benchmark_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_layers: 5,
            rebalance_every: 10,
            fee_rate: 0.00002,
            stamp_rate: 0.00015,
            turnover_cap: 0.30,
            min_ic_stocks: 5,
            benchmark_fraction: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("eval.n_layers", "must be positive"));
        }
        if self.rebalance_every == 0 {
            return Err(Error::config("eval.rebalance_every", "must be positive"));
        }
        if self.fee_rate < 0.0 || self.stamp_rate < 0.0 {
            return Err(Error::config("eval.fee_rate", "fees must be non-negative"));
        }
        if !(self.turnover_cap > 0.0 && self.turnover_cap <= 1.0) {
            return Err(Error::config("eval.turnover_cap", "must lie in (0, 1]"));
        }
        if !(self.benchmark_fraction > 0.0 && self.benchmark_fraction <= 1.0) {
            return Err(Error::config("eval.benchmark_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn without_fees(&self) -> Self {
        EvalConfig {
            fee_rate: 0.0,
            stamp_rate: 0.0,
            ..self.clone()
        }
    }
}

/// Per-date scores keyed by panel stock index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub by_date: BTreeMap<i64, Vec<(usize, f64)>>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: i64, scores: Vec<(usize, f64)>) {
        self.by_date.insert(date, scores);
    }

    pub fn dates(&self) -> Vec<i64> {
        self.by_date.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.by_date.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extend(&mut self, other: ScoreTable) {
        self.by_date.extend(other.by_date);
    }

    /// `date,stock_id,score` rows in date then panel order.
    pub fn write_csv<W: Write>(&self, panel: &Panel, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "stock_id", "score"])?;
        for (date, rows) in &self.by_date {
            let mut rows = rows.clone();
            rows.sort_by_key(|r| r.0);
            for (i, s) in rows {
                out.write_record([date.to_string(), panel.stock(i).id.clone(), format!("{s}")])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(panel: &Panel, r: R) -> Result<Self> {
        let mut table = ScoreTable::new();
        let mut rdr = csv::Reader::from_reader(r);
        for rec in rdr.records() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).ok_or_else(|| Error::Validation("short score row".into()));
            let date: i64 = field(0)?
                .parse()
                .map_err(|_| Error::Validation(format!("bad date {:?}", rec.get(0))))?;
            let id = field(1)?;
            let idx = panel
                .stock_index(id)
                .ok_or_else(|| Error::Validation(format!("unknown stock {id}")))?;
            let score: f64 = field(2)?
                .parse()
                .map_err(|_| Error::Validation(format!("bad score {:?}", rec.get(2))))?;
            table.by_date.entry(date).or_default().push((idx, score));
        }
        Ok(table)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ann_return: f64,
    pub ann_std: f64,
    /// ±∞ when the series has zero dispersion and nonzero mean, 0 when both vanish.
    pub sharpe: f64,
    pub max_drawdown: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1).
fn sample_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

/// Largest peak-to-trough fall of the compounded wealth path starting at 1.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let mut wealth = 1.0;
    let mut peak = 1.0;
    let mut worst: f64 = 0.0;
    for r in returns {
        wealth *= 1.0 + r;
        peak = f64::max(peak, wealth);
        worst = worst.max((peak - wealth) / peak);
    }
    worst.clamp(0.0, 1.0)
}

fn ratio_or_sentinel(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else if num < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Arithmetic annualization: mean·P, std·√P, Sharpe = their ratio.
pub fn metrics(returns: &[f64], riskfree: f64, periods_per_year: f64) -> Result<Metrics> {
    if returns.len() < 2 {
        return Err(Error::Validation(format!(
            "metrics need at least 2 periods, got {}",
            returns.len()
        )));
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - riskfree).collect();
    let ann_return = mean(&excess) * periods_per_year;
    let sd = sample_std(&excess);
    let ann_std = if sd < 1e-15 { 0.0 } else { sd * periods_per_year.sqrt() };
    Ok(Metrics {
        ann_return,
        ann_std,
        sharpe: ratio_or_sentinel(ann_return, ann_std),
        max_drawdown: max_drawdown(returns),
    })
}

// ---------------------------------------------------------------------------
// IC
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcReport {
    pub series: Vec<(i64, f64)>,
    pub mean: f64,
    pub std: f64,
    /// mean / std, +∞ (or −∞) when std is zero.
    pub ir: f64,
    pub skipped: Vec<i64>,
}

/// Per-date Spearman correlation between scores and realized returns over the
/// stocks present in both tables.
pub fn ic_test(scores: &ScoreTable, realized: &ScoreTable, min_stocks: usize) -> Result<IcReport> {
    let mut series = Vec::new();
    let mut skipped = Vec::new();
    for (&date, rows) in &scores.by_date {
        let Some(real) = realized.by_date.get(&date) else {
            skipped.push(date);
            continue;
        };
        let real: BTreeMap<usize, f64> = real.iter().copied().collect();
        let (a, b): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|(i, s)| real.get(i).map(|r| (*s, *r)))
            .unzip();
        if a.len() < min_stocks.max(2) {
            log::warn!("IC: date {date} has {} stocks, skipped", a.len());
            skipped.push(date);
            continue;
        }
        series.push((date, spearman_rho(&a, &b)?));
    }
    if series.len() < 3 {
        return Err(Error::Validation(format!(
            "IC test needs at least 3 dates, got {}",
            series.len()
        )));
    }
    let ics: Vec<f64> = series.iter().map(|x| x.1).collect();
    let m = mean(&ics);
    let sd = sample_std(&ics);
    let sd = if sd < 1e-15 { 0.0 } else { sd };
    Ok(IcReport {
        series,
        mean: m,
        std: sd,
        ir: ratio_or_sentinel(m, sd),
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Shared portfolio accounting
// ---------------------------------------------------------------------------

/// One holding period: trade at the next day's vwap after the rebalance date and
/// hold until the fill after the following rebalance.
#[derive(Clone, Debug)]
struct Period {
    date: i64,
    /// Scored stocks with fill prices at both ends, with their period return.
    returns: BTreeMap<usize, f64>,
    scores: Vec<(usize, f64)>,
}

fn periods(scores: &ScoreTable, panel: &Panel, cfg: &EvalConfig) -> Vec<Period> {
    let dates = scores.dates();
    let mut out = Vec::new();
    for (k, &date) in dates.iter().enumerate() {
        let entry = date + 1;
        let exit = dates
            .get(k + 1)
            .map_or(date + cfg.rebalance_every as i64, |&n| n)
            + 1;
        let mut returns = BTreeMap::new();
        let mut kept = Vec::new();
        for &(i, s) in &scores.by_date[&date] {
            let st = panel.stock(i);
            if let (Some(a), Some(b)) = (st.row_at(entry), st.row_at(exit)) {
                returns.insert(i, b.vwap / a.vwap - 1.0);
                kept.push((i, s));
            }
        }
        if kept.is_empty() {
            continue;
        }
        out.push(Period {
            date,
            returns,
            scores: kept,
        });
    }
    out
}

/// Descending score order, ties broken by stock index.
fn ranked(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|x| x.0).collect()
}

/// Splits `n` ranked items into `layers` equal-count groups, extras to the top layers.
pub fn layer_sizes(n: usize, layers: usize) -> Vec<usize> {
    let base = n / layers;
    let rem = n % layers;
    (0..layers).map(|l| base + usize::from(l < rem)).collect()
}

/// Holdings after a period: w_i (1 + r_i) / (1 + R).
fn drift(weights: &BTreeMap<usize, f64>, returns: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let grown: BTreeMap<usize, f64> = weights
        .iter()
        .map(|(i, w)| (*i, w * (1.0 + returns.get(i).copied().unwrap_or(0.0))))
        .collect();
    let total: f64 = grown.values().sum();
    if total <= 0.0 {
        return BTreeMap::new();
    }
    grown.into_iter().map(|(i, w)| (i, w / total)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub buys: f64,
    pub sells: f64,
    /// One-way turnover Σ|Δw| / 2.
    pub turnover: f64,
    pub fee: f64,
}

fn trade(from: &BTreeMap<usize, f64>, to: &BTreeMap<usize, f64>, cfg: &EvalConfig) -> Trade {
    let keys: BTreeSet<usize> = from.keys().chain(to.keys()).copied().collect();
    let (mut buys, mut sells) = (0.0, 0.0);
    for k in keys {
        let d = to.get(&k).copied().unwrap_or(0.0) - from.get(&k).copied().unwrap_or(0.0);
        if d > 0.0 {
            buys += d;
        } else {
            sells -= d;
        }
    }
    Trade {
        buys,
        sells,
        turnover: (buys + sells) / 2.0,
        fee: cfg.fee_rate * (buys + sells) + cfg.stamp_rate * sells,
    }
}

fn portfolio_return(w: &BTreeMap<usize, f64>, returns: &BTreeMap<usize, f64>) -> f64 {
    w.iter().map(|(i, x)| x * returns.get(i).copied().unwrap_or(0.0)).sum()
}

/// Per-rebalance record of one portfolio.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub dates: Vec<i64>,
    pub holdings: Vec<BTreeMap<usize, f64>>,
    pub trades: Vec<Trade>,
    pub gross: Vec<f64>,
    pub net: Vec<f64>,
}

impl Ledger {
    fn push(&mut self, date: i64, w: BTreeMap<usize, f64>, t: Trade, gross: f64) {
        self.dates.push(date);
        self.holdings.push(w);
        self.trades.push(t);
        self.gross.push(gross);
        self.net.push(gross - t.fee);
    }
}

// ---------------------------------------------------------------------------
// Layered backtest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredResult {
    pub dates: Vec<i64>,
    pub layers: Vec<Ledger>,
    /// Equal-weighted return of every stock held in some layer.
    pub universe: Vec<f64>,
    /// Net layer return minus universe return, per layer then period.
    pub excess: Vec<Vec<f64>>,
    pub ann_excess: Vec<f64>,
    pub skipped: Vec<i64>,
}

pub fn layered_backtest(scores: &ScoreTable, panel: &Panel, cfg: &EvalConfig) -> Result<LayeredResult> {
    cfg.validate()?;
    let l = cfg.n_layers;
    let mut layers = vec![Ledger::default(); l];
    let mut prev: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); l];
    let mut universe = Vec::new();
    let mut dates = Vec::new();
    let mut skipped = Vec::new();
    let mut last_returns: BTreeMap<usize, f64> = BTreeMap::new();
    for p in periods(scores, panel, cfg) {
        if p.scores.len() < l {
            skipped.push(p.date);
            continue;
        }
        let order = ranked(&p.scores);
        let mut start = 0;
        for (k, size) in layer_sizes(order.len(), l).into_iter().enumerate() {
            let w = 1.0 / size as f64;
            let target: BTreeMap<usize, f64> = order[start..start + size].iter().map(|&i| (i, w)).collect();
            start += size;
            let before = drift(&prev[k], &last_returns);
            let t = trade(&before, &target, cfg);
            let gross = portfolio_return(&target, &p.returns);
            layers[k].push(p.date, target.clone(), t, gross);
            prev[k] = target;
        }
        universe.push(mean(&p.returns.values().copied().collect::<Vec<_>>()));
        dates.push(p.date);
        last_returns = p.returns;
    }
    let excess: Vec<Vec<f64>> = layers
        .iter()
        .map(|ld| ld.net.iter().zip(&universe).map(|(a, b)| a - b).collect())
        .collect();
    let ann_excess = excess
        .iter()
        .map(|e| if e.is_empty() { 0.0 } else { mean(e) * PERIODS_PER_YEAR })
        .collect();
    Ok(LayeredResult {
        dates,
        layers,
        universe,
        excess,
        ann_excess,
        skipped,
    })
}

/// Annualized Sharpe of the top layer's excess return, without fees.
pub fn top_layer_sharpe(scores: &ScoreTable, panel: &Panel, cfg: &EvalConfig) -> Result<f64> {
    let r = layered_backtest(scores, panel, &cfg.without_fees())?;
    if r.dates.len() < 3 {
        return Err(Error::Validation(format!(
            "validation slice spans {} rebalance dates, need at least 3",
            r.dates.len()
        )));
    }
    Ok(metrics(&r.excess[0], 0.0, PERIODS_PER_YEAR)?.sharpe)
}

// ---------------------------------------------------------------------------
// Index-relative backtest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearRow {
    /// Year index counted from the first rebalance date, or -1 for the whole run.
    pub year: i64,
    pub excess_return: f64,
    pub n_stocks: f64,
    pub std: f64,
    pub sharpe: f64,
    pub max_drawdown: f64,
    /// Mean one-way turnover per rebalance.
    pub turnover: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeResult {
    pub ledger: Ledger,
    pub benchmark: Vec<f64>,
    pub excess: Vec<f64>,
    pub targets: Vec<BTreeMap<usize, f64>>,
    pub benchmark_weights: Vec<BTreeMap<usize, f64>>,
    pub years: Vec<YearRow>,
}

/// Cap-weighted largest `fraction` of the stocks by market cap at `date`.
pub fn benchmark_weights(panel: &Panel, stocks: &[usize], date: i64, fraction: f64) -> Result<BTreeMap<usize, f64>> {
    let mut caps: Vec<(usize, f64)> = stocks
        .iter()
        .filter_map(|&i| panel.stock(i).row_at(date).map(|r| (i, r.market_cap)))
        .collect();
    caps.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ((caps.len() as f64 * fraction).ceil() as usize).min(caps.len());
    let top = &caps[..n];
    let total: f64 = top.iter().map(|x| x.1).sum();
    if n == 0 || total <= 0.0 {
        return Err(Error::config("eval.benchmark_fraction", format!("empty benchmark on date {date}")));
    }
    Ok(top.iter().map(|&(i, c)| (i, c / total)).collect())
}

fn industry_of(panel: &Panel, i: usize, date: i64) -> usize {
    panel.stock(i).row_at(date).map_or(usize::MAX, |r| r.industry_id)
}

/// Top-quintile stocks reweighted to the benchmark's industry weights. A benchmark
/// industry with no top-quintile member is filled by its best-scored stock.
fn industry_matched_target(
    panel: &Panel,
    p: &Period,
    bench: &BTreeMap<usize, f64>,
    n_layers: usize,
) -> BTreeMap<usize, f64> {
    let order = ranked(&p.scores);
    let top_n = layer_sizes(order.len(), n_layers)[0];
    let mut industry_weight: BTreeMap<usize, f64> = BTreeMap::new();
    for (&i, &w) in bench {
        *industry_weight.entry(industry_of(panel, i, p.date)).or_default() += w;
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order[..top_n] {
        members.entry(industry_of(panel, i, p.date)).or_default().push(i);
    }
    let mut target = BTreeMap::new();
    for (&ind, &w) in &industry_weight {
        let chosen = match members.get(&ind) {
            Some(m) => m.clone(),
            None => order
                .iter()
                .find(|&&i| industry_of(panel, i, p.date) == ind)
                .map(|&i| vec![i])
                .unwrap_or_default(),
        };
        for &i in &chosen {
            *target.entry(i).or_insert(0.0) += w / chosen.len() as f64;
        }
    }
    target
}

/// Largest λ ≤ 1 with turnover((1−λ)·from + λ·to) ≤ cap.
fn capped_blend(from: &BTreeMap<usize, f64>, to: &BTreeMap<usize, f64>, cap: f64, cfg: &EvalConfig) -> BTreeMap<usize, f64> {
    let full = trade(from, to, cfg).turnover;
    if full <= cap {
        return to.clone();
    }
    let lambda = cap / full;
    let keys: BTreeSet<usize> = from.keys().chain(to.keys()).copied().collect();
    keys.into_iter()
        .map(|k| {
            let a = from.get(&k).copied().unwrap_or(0.0);
            let b = to.get(&k).copied().unwrap_or(0.0);
            (k, (1.0 - lambda) * a + lambda * b)
        })
        .filter(|(_, w)| *w > 0.0)
        .collect()
}

/// The portfolio starts from the benchmark holdings and moves toward the
/// industry-matched top-quintile target under the turnover cap.
pub fn index_relative_backtest(scores: &ScoreTable, panel: &Panel, cfg: &EvalConfig) -> Result<RelativeResult> {
    cfg.validate()?;
    let mut ledger = Ledger::default();
    let mut bench_returns = Vec::new();
    let mut targets = Vec::new();
    let mut bench_ws = Vec::new();
    let mut held: Option<BTreeMap<usize, f64>> = None;
    let mut last_returns = BTreeMap::new();
    for p in periods(scores, panel, cfg) {
        if p.scores.len() < cfg.n_layers {
            continue;
        }
        let stocks: Vec<usize> = p.scores.iter().map(|x| x.0).collect();
        let bench = benchmark_weights(panel, &stocks, p.date, cfg.benchmark_fraction)?;
        let target = industry_matched_target(panel, &p, &bench, cfg.n_layers);
        let before = match &held {
            Some(w) => drift(w, &last_returns),
            None => bench.clone(),
        };
        let w = capped_blend(&before, &target, cfg.turnover_cap, cfg);
        let t = trade(&before, &w, cfg);
        let gross = portfolio_return(&w, &p.returns);
        bench_returns.push(portfolio_return(&bench, &p.returns));
        ledger.push(p.date, w.clone(), t, gross);
        targets.push(target);
        bench_ws.push(bench);
        held = Some(w);
        last_returns = p.returns;
    }
    let excess: Vec<f64> = ledger.net.iter().zip(&bench_returns).map(|(a, b)| a - b).collect();
    let years = yearly_rows(&ledger, &excess);
    Ok(RelativeResult {
        ledger,
        benchmark: bench_returns,
        excess,
        targets,
        benchmark_weights: bench_ws,
        years,
    })
}

fn year_row(year: i64, idx: &[usize], ledger: &Ledger, excess: &[f64]) -> YearRow {
    let e: Vec<f64> = idx.iter().map(|&k| excess[k]).collect();
    let m = metrics(&e, 0.0, PERIODS_PER_YEAR).ok();
    YearRow {
        year,
        excess_return: e.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0,
        n_stocks: idx.iter().map(|&k| ledger.holdings[k].len() as f64).sum::<f64>() / idx.len() as f64,
        std: m.map_or(0.0, |m| m.ann_std),
        sharpe: m.map_or(0.0, |m| m.sharpe),
        max_drawdown: max_drawdown(&e),
        turnover: idx.iter().map(|&k| ledger.trades[k].turnover).sum::<f64>() / idx.len() as f64,
    }
}

fn yearly_rows(ledger: &Ledger, excess: &[f64]) -> Vec<YearRow> {
    let Some(&first) = ledger.dates.first() else {
        return Vec::new();
    };
    let mut by_year: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (k, d) in ledger.dates.iter().enumerate() {
        by_year.entry((d - first) / TRADING_DAYS_PER_YEAR).or_default().push(k);
    }
    let mut rows: Vec<YearRow> = by_year
        .iter()
        .map(|(y, idx)| year_row(*y, idx, ledger, excess))
        .collect();
    let all: Vec<usize> = (0..ledger.dates.len()).collect();
    rows.push(year_row(-1, &all, ledger, excess));
    rows
}

// ---------------------------------------------------------------------------
// Parameter significance
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub rank: usize,
    pub column: usize,
    pub feature: String,
    pub score: f64,
}

/// Mean |weight| of the Bi-LSTM input rows belonging to each kept feature column,
/// over both directions and all gates, ranked descending.
pub fn parameter_significance(model: &AlphaNet) -> Result<Vec<Significance>> {
    let n = model.n_keep();
    let labels = Registry::new(model.config.n_inputs).labels();
    let mut scores = vec![0.0; n];
    for dir in ["fwd", "bwd"] {
        let w = model.store.value(&format!("bilstm.{dir}.w"))?;
        let hidden = w.nrows() - n;
        for (c, s) in scores.iter_mut().enumerate() {
            let row = w.row(hidden + c);
            *s += row.iter().map(|v| v.abs()).sum::<f64>() / (2.0 * row.len() as f64);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, c)| Significance {
            rank: rank + 1,
            column: model.mask.kept[c],
            feature: labels[model.mask.kept[c]].clone(),
            score: scores[c],
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ic_mean: Option<f64>,
    pub ic_std: Option<f64>,
    pub ir: Option<f64>,
    pub ic_dates: usize,
    pub layer_ann_excess: Vec<f64>,
    pub top_minus_bottom: Option<f64>,
    pub relative: Vec<YearRow>,
    pub n_predictions: usize,
    pub n_keep: Option<usize>,
    /// Extra string fields (variant tag, seed, ...).
    pub info: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default)]
pub struct Reports {
    pub ic: Option<IcReport>,
    pub layered: Option<LayeredResult>,
    pub relative: Option<RelativeResult>,
    pub significance: Vec<Significance>,
    pub n_predictions: usize,
    pub n_keep: Option<usize>,
    pub info: BTreeMap<String, String>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Reports {
    pub fn summary(&self) -> Summary {
        let layers = self.layered.as_ref().map(|l| l.ann_excess.clone()).unwrap_or_default();
        Summary {
            ic_mean: self.ic.as_ref().map(|r| r.mean),
            ic_std: self.ic.as_ref().map(|r| r.std),
            ir: self.ic.as_ref().and_then(|r| finite(r.ir)),
            ic_dates: self.ic.as_ref().map_or(0, |r| r.series.len()),
            top_minus_bottom: match (layers.first(), layers.last()) {
                (Some(a), Some(b)) if layers.len() > 1 => Some(a - b),
                _ => None,
            },
            layer_ann_excess: layers,
            relative: self.relative.as_ref().map(|r| r.years.clone()).unwrap_or_default(),
            n_predictions: self.n_predictions,
            n_keep: self.n_keep,
            info: self.info.clone(),
        }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes ic.csv, layers.csv, layer_cumulative.csv, relative.csv, significance.csv
/// and summary.json into `dir`.
pub fn emit_report(reports: &Reports, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = writer(dir, "ic.csv")?;
    w.write_record(["date", "ic"])?;
    for (d, ic) in reports.ic.iter().flat_map(|r| r.series.iter()) {
        w.write_record([d.to_string(), fmt_f(*ic)])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("ic.csv"), e))?;

    let mut w = writer(dir, "layers.csv")?;
    w.write_record(["layer", "ann_excess"])?;
    let mut c = writer(dir, "layer_cumulative.csv")?;
    if let Some(l) = &reports.layered {
        for (k, a) in l.ann_excess.iter().enumerate() {
            w.write_record([(k + 1).to_string(), fmt_f(*a)])?;
        }
        let mut header = vec!["date".to_string()];
        header.extend((1..=l.excess.len()).map(|k| format!("layer{k}")));
        c.write_record(&header)?;
        let mut cum = vec![1.0; l.excess.len()];
        for (t, d) in l.dates.iter().enumerate() {
            let mut rec = vec![d.to_string()];
            for (k, e) in l.excess.iter().enumerate() {
                cum[k] *= 1.0 + e[t];
                rec.push(fmt_f(cum[k] - 1.0));
            }
            c.write_record(&rec)?;
        }
    } else {
        c.write_record(["date"])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("layers.csv"), e))?;
    c.flush().map_err(|e| Error::io(dir.join("layer_cumulative.csv"), e))?;

    let mut w = writer(dir, "relative.csv")?;
    w.write_record(["year", "return", "n_stocks", "std", "sharpe", "max_dd", "turnover"])?;
    for y in reports.relative.iter().flat_map(|r| r.years.iter()) {
        let year = if y.year < 0 { "all".to_string() } else { y.year.to_string() };
        w.write_record([
            year,
            fmt_f(y.excess_return),
            fmt_f(y.n_stocks),
            fmt_f(y.std),
            fmt_f(y.sharpe),
            fmt_f(y.max_drawdown),
            fmt_f(y.turnover),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("relative.csv"), e))?;

    let mut w = writer(dir, "significance.csv")?;
    w.write_record(["rank", "feature", "score"])?;
    for s in &reports.significance {
        w.write_record([s.rank.to_string(), s.feature.clone(), fmt_f(s.score)])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("significance.csv"), e))?;

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&reports.summary())?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drawdown_examples() {
        assert_eq!(max_drawdown(&[0.01, 0.01, 0.01]), 0.0);
        assert!((max_drawdown(&[0.1, -0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn metrics_sentinels() {
        let m = metrics(&[0.01, 0.01, 0.01], 0.0, PERIODS_PER_YEAR).unwrap();
        assert_eq!(m.sharpe, f64::INFINITY);
        assert!(metrics(&[0.01], 0.0, PERIODS_PER_YEAR).is_err());
    }

    #[test]
    fn layer_sizes_favor_top() {
        assert_eq!(layer_sizes(12, 5), vec![3, 3, 2, 2, 2]);
        assert_eq!(layer_sizes(10, 5), vec![2; 5]);
    }

    #[test]
    fn trade_accounting() {
        let cfg = EvalConfig::default();
        let from: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.5)].into();
        let to: BTreeMap<usize, f64> = [(1, 0.25), (2, 0.75)].into();
        let t = trade(&from, &to, &cfg);
        assert!((t.buys - 0.75).abs() < 1e-15);
        assert!((t.sells - 0.75).abs() < 1e-15);
        assert!((t.turnover - 0.75).abs() < 1e-15);
        assert!((t.fee - (0.00002 * 1.5 + 0.00015 * 0.75)).abs() < 1e-18);
        let b = capped_blend(&from, &to, 0.3, &cfg);
        assert!((trade(&from, &b, &cfg).turnover - 0.3).abs() < 1e-12);
        assert!((b.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
