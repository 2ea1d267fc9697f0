//! CNE5-style exposures and the constrained cross-sectional return regression.
//!
//! Each date's excess returns are regressed on a country column, one-hot industry
//! dummies and standardized style columns with weights √cap. The country and
//! industry columns are collinear; the constraint Σ_p w_p f_p = 0 (w_p = industry
//! cap share) is imposed by substituting the last present industry out of the basis.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr, weighted_lstsq, Qr};
use crate::market_data::{Fundamentals, Label, Panel, StockSeries, LABEL_HORIZON};

/// Floor inside the liquidity logarithms.
pub const LIQUIDITY_FLOOR: f64 = 1e-12;
pub const LIQUIDITY_WEIGHTS: [f64; 3] = [0.35, 0.35, 0.30];
pub const EARNINGS_YIELD_WEIGHTS: [f64; 3] = [0.68, 0.11, 0.21];
pub const GROWTH_WEIGHTS: [f64; 4] = [0.47, 0.24, 0.18, 0.11];
pub const LEVERAGE_WEIGHTS: [f64; 3] = [0.38, 0.35, 0.27];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub beta: bool,
    pub momentum: bool,
    pub size: bool,
    pub residual_volatility: bool,
    pub liquidity: bool,
    pub nonlinear_size: bool,
    /// Fundamental blends, used only when every stock on the date has the inputs.
    pub fundamentals: bool,
    pub beta_window: usize,
    pub beta_half_life: f64,
    pub momentum_window: usize,
    pub momentum_lag: usize,
    pub momentum_half_life: f64,
    pub dastd_window: usize,
    pub dastd_half_life: f64,
    pub cmra_months: usize,
    pub month_len: usize,
    /// DASTD, CMRA, HSIGMA blend.
    pub residual_volatility_weights: [f64; 3],
    /// Daily risk-free rate.
    pub riskfree: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            beta: true,
            momentum: true,
            size: true,
            residual_volatility: true,
            liquidity: true,
            nonlinear_size: true,
            fundamentals: true,
            beta_window: 252,
            beta_half_life: 63.0,
            momentum_window: 252,
            momentum_lag: 21,
            momentum_half_life: 126.0,
            dastd_window: 252,
            dastd_half_life: 63.0,
            cmra_months: 12,
            month_len: 21,
            residual_volatility_weights: [0.74, 0.16, 0.10],
            riskfree: 0.0,
        }
    }
}

impl StyleConfig {
    /// Shorter windows for desk-scale synthetic panels.
    pub fn compact() -> Self {
        StyleConfig {
            beta_window: 60,
            beta_half_life: 20.0,
            momentum_window: 60,
            momentum_lag: 10,
            momentum_half_life: 30.0,
            dastd_window: 60,
            dastd_half_life: 20.0,
            cmra_months: 3,
            month_len: 10,
            ..StyleConfig::default()
        }
    }

    /// Daily returns needed ending at the exposure date.
    pub fn return_lookback(&self) -> usize {
        let mut n = 1;
        if self.beta || self.residual_volatility {
            n = n.max(self.beta_window);
        }
        if self.momentum {
            n = n.max(self.momentum_window + self.momentum_lag);
        }
        if self.residual_volatility {
            n = n.max(self.dastd_window).max(self.cmra_months * self.month_len);
        }
        if self.liquidity {
            n = n.max(12 * self.month_len);
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("barra.{field}"), msg))
            }
        };
        check(self.beta_window >= 2, "beta_window", "must be at least 2")?;
        check(self.beta_half_life > 0.0, "beta_half_life", "must be positive")?;
        check(
            self.beta_window as f64 >= 2.0 * self.beta_half_life,
            "beta_window",
            "must cover two half-lives",
        )?;
        check(self.momentum_window >= 1, "momentum_window", "must be positive")?;
        check(self.momentum_half_life > 0.0, "momentum_half_life", "must be positive")?;
        check(self.dastd_window >= 2, "dastd_window", "must be at least 2")?;
        check(self.dastd_half_life > 0.0, "dastd_half_life", "must be positive")?;
        check(self.cmra_months >= 1, "cmra_months", "must be positive")?;
        check(self.month_len >= 1, "month_len", "must be positive")?;
        Ok(())
    }
}

/// EWMA weights for `n` observations ordered oldest → newest, newest weight 1.
pub fn ewma_weights(n: usize, half_life: f64) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5f64.powf((n - 1 - i) as f64 / half_life))
        .collect()
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Beta regression result; `residuals` feeds HSIGMA.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaFit {
    pub beta: f64,
    pub alpha: f64,
    pub residuals: Vec<f64>,
}

/// EWMA-weighted regression of `stock - riskfree` on the market return.
pub fn style_beta(
    stock: &[f64],
    market: &[f64],
    riskfree: &[f64],
    half_life: f64,
) -> Result<BetaFit> {
    let n = stock.len();
    if market.len() != n || riskfree.len() != n {
        return Err(Error::Shape("beta inputs differ in length".into()));
    }
    let needed = (2.0 * half_life).ceil() as usize;
    if n < needed.max(2) {
        return Err(Error::ShortSeries {
            needed: needed.max(2),
            available: n,
        });
    }
    let w = normalized(ewma_weights(n, half_life));
    let y: Vec<f64> = stock.iter().zip(riskfree).map(|(r, f)| r - f).collect();
    let mx: f64 = w.iter().zip(market).map(|(a, b)| a * b).sum();
    let my: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = (0..n).map(|i| w[i] * (market[i] - mx).powi(2)).sum();
    let sxy: f64 = (0..n).map(|i| w[i] * (market[i] - mx) * (y[i] - my)).sum();
    let scale = market.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sxx <= (1e-12 * scale.max(f64::MIN_POSITIVE)).powi(2) || scale == 0.0 {
        return Err(Error::Beta);
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let residuals = (0..n).map(|i| y[i] - alpha - beta * market[i]).collect();
    Ok(BetaFit {
        beta,
        alpha,
        residuals,
    })
}

fn log_excess(r: f64, rf: f64) -> Result<f64> {
    if r <= -1.0 {
        return Err(Error::LogDomain(1.0 + r));
    }
    if rf <= -1.0 {
        return Err(Error::LogDomain(1.0 + rf));
    }
    Ok((1.0 + r).ln() - (1.0 + rf).ln())
}

/// Σ_k w_k [ln(1 + r) − ln(1 + r_f)] over lags L .. L+T−1 (lag 0 = last element).
/// `weights[k]` applies to lag `L + k`.
pub fn style_momentum(
    returns: &[f64],
    riskfree: &[f64],
    window: usize,
    lag: usize,
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != window || riskfree.len() != returns.len() {
        return Err(Error::Shape("momentum weights or riskfree length mismatch".into()));
    }
    let n = returns.len();
    if n < window + lag {
        return Err(Error::ShortSeries {
            needed: window + lag,
            available: n,
        });
    }
    let mut total = 0.0;
    for (k, w) in weights.iter().enumerate() {
        let idx = n - 1 - lag - k;
        total += w * log_excess(returns[idx], riskfree[idx])?;
    }
    Ok(total)
}

pub fn style_size(market_cap: f64) -> Result<f64> {
    if !(market_cap > 0.0) {
        return Err(Error::Domain(format!("market cap {market_cap} is not positive")));
    }
    Ok(market_cap.ln())
}

/// EWMA standard deviation of excess returns.
pub fn dastd(excess: &[f64], half_life: f64) -> f64 {
    let w = normalized(ewma_weights(excess.len(), half_life));
    let m: f64 = w.iter().zip(excess).map(|(a, b)| a * b).sum();
    w.iter()
        .zip(excess)
        .map(|(a, b)| a * (b - m).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Range of a cumulative log excess-return path.
pub fn cmra_from_path(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    if z.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// CMRA over `months` trailing sub-periods of `month_len` days each.
pub fn cmra(returns: &[f64], riskfree: &[f64], months: usize, month_len: usize) -> Result<f64> {
    let n = returns.len();
    if n < months * month_len {
        return Err(Error::ShortSeries {
            needed: months * month_len,
            available: n,
        });
    }
    let mut z = Vec::with_capacity(months);
    let mut acc = 0.0;
    for day in 0..months * month_len {
        let idx = n - 1 - day;
        acc += log_excess(returns[idx], riskfree[idx])?;
        if (day + 1) % month_len == 0 {
            z.push(acc);
        }
    }
    Ok(cmra_from_path(&z))
}

fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Components of the residual volatility factor before cross-sectional treatment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualVolatility {
    pub dastd: f64,
    pub cmra: f64,
    pub hsigma: f64,
    pub blended: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualVolatilityParams {
    pub dastd_window: usize,
    pub dastd_half_life: f64,
    pub cmra_months: usize,
    pub month_len: usize,
    pub weights: [f64; 3],
}

impl From<&StyleConfig> for ResidualVolatilityParams {
    fn from(c: &StyleConfig) -> Self {
        ResidualVolatilityParams {
            dastd_window: c.dastd_window,
            dastd_half_life: c.dastd_half_life,
            cmra_months: c.cmra_months,
            month_len: c.month_len,
            weights: c.residual_volatility_weights,
        }
    }
}

/// Blend of DASTD, CMRA and HSIGMA for one stock. Orthogonalization against beta is
/// cross-sectional and happens in [`build_exposures`].
pub fn style_residual_volatility(
    returns: &[f64],
    riskfree: &[f64],
    beta_residuals: &[f64],
    params: &ResidualVolatilityParams,
) -> Result<ResidualVolatility> {
    let n = returns.len();
    let needed = params
        .dastd_window
        .max(params.cmra_months * params.month_len);
    if n < needed || riskfree.len() != n {
        return Err(Error::ShortSeries {
            needed,
            available: n.min(riskfree.len()),
        });
    }
    let excess: Vec<f64> = returns[n - params.dastd_window..]
        .iter()
        .zip(&riskfree[n - params.dastd_window..])
        .map(|(r, f)| r - f)
        .collect();
    let d = dastd(&excess, params.dastd_half_life);
    let c = cmra(returns, riskfree, params.cmra_months, params.month_len)?;
    let h = sample_std(beta_residuals);
    let [a, b, e] = params.weights;
    Ok(ResidualVolatility {
        dastd: d,
        cmra: c,
        hsigma: h,
        blended: a * d + b * c + e * h,
    })
}

/// 0.35·STOM + 0.35·STOQ + 0.30·STOA from daily turnover (oldest → newest).
/// STOM = ln Σ month; STOQ and STOA are logs of the mean monthly sum over 3 and 12 months.
pub fn style_liquidity(turnover: &[f64], month_len: usize) -> Result<f64> {
    let n = turnover.len();
    if n < 12 * month_len {
        return Err(Error::ShortSeries {
            needed: 12 * month_len,
            available: n,
        });
    }
    let trailing = |months: usize| -> f64 {
        let s: f64 = turnover[n - months * month_len..].iter().sum();
        (s / months as f64).max(LIQUIDITY_FLOOR).ln()
    };
    let [a, b, c] = LIQUIDITY_WEIGHTS;
    Ok(a * trailing(1) + b * trailing(3) + c * trailing(12))
}

/// Cap-weighted regression of `y` on `x` with intercept; returns the residuals.
fn weighted_residualize(y: &[f64], x: &[f64], weights: &[f64]) -> Vec<f64> {
    let sw: f64 = weights.iter().sum();
    let mx = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() / sw;
    let my = weights.iter().zip(y).map(|(w, v)| w * v).sum::<f64>() / sw;
    let sxx: f64 = (0..x.len()).map(|i| weights[i] * (x[i] - mx).powi(2)).sum();
    let sxy: f64 = (0..x.len())
        .map(|i| weights[i] * (x[i] - mx) * (y[i] - my))
        .sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (0..y.len())
        .map(|i| y[i] - my - slope * (x[i] - mx))
        .collect()
}

/// Size cubed, cap-weighted regressed on size, then standardized.
pub fn style_nonlinear_size(size: &[f64], cap_weights: &[f64]) -> Vec<f64> {
    let cube: Vec<f64> = size.iter().map(|s| s.powi(3)).collect();
    let mut resid = weighted_residualize(&cube, size, cap_weights);
    let scale = cube.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if resid.iter().all(|v| v.abs() <= 1e-12 * scale.max(1.0)) {
        return vec![0.0; size.len()];
    }
    standardize_exposures(&mut resid, cap_weights);
    resid
}

/// Fundamental style blends; each is `None` unless all its inputs are present.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FundamentalStyles {
    pub earnings_yield: Option<f64>,
    pub growth: Option<f64>,
    pub book_to_price: Option<f64>,
    pub leverage: Option<f64>,
}

fn blend<const N: usize>(weights: [f64; N], inputs: [Option<f64>; N]) -> Option<f64> {
    let mut total = 0.0;
    for (w, v) in weights.iter().zip(inputs) {
        total += w * v?;
    }
    Some(total)
}

pub fn style_fundamental_blends(f: &Fundamentals) -> FundamentalStyles {
    FundamentalStyles {
        earnings_yield: blend(EARNINGS_YIELD_WEIGHTS, [f.epibs, f.etop, f.cetop]),
        growth: blend(GROWTH_WEIGHTS, [f.sgro, f.egro, f.egibs, f.egibs_s]),
        book_to_price: f.btop,
        leverage: blend(LEVERAGE_WEIGHTS, [f.mlev, f.dtoa, f.blev]),
    }
}

/// Shifts to cap-weighted mean 0 and scales to equal-weighted (population) std 1.
/// A zero-variance column is zeroed. Returns false in that case.
pub fn standardize_exposures(column: &mut [f64], cap_weights: &[f64]) -> bool {
    let n = column.len() as f64;
    let sw: f64 = cap_weights.iter().sum();
    let wmean = column.iter().zip(cap_weights).map(|(x, w)| x * w).sum::<f64>() / sw;
    let mean = column.iter().sum::<f64>() / n;
    let sd = (column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = column.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(sd > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        column.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    column.iter_mut().for_each(|x| *x = (*x - wmean) / sd);
    true
}

/// Cross-sectional exposures on one date.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureMatrix {
    pub date: i64,
    pub stock_ids: Vec<String>,
    /// Country, then one column per industry present, then styles.
    pub factor_names: Vec<String>,
    /// Industry ids of the industry columns, in column order.
    pub industries: Vec<usize>,
    pub n_styles: usize,
    pub values: Array2<f64>,
    /// Market caps aligned with the rows.
    pub caps: Vec<f64>,
}

impl ExposureMatrix {
    /// Builds the country and industry block from per-stock industry ids and appends `styles`.
    pub fn new(
        date: i64,
        stock_ids: Vec<String>,
        industry_of: &[usize],
        caps: Vec<f64>,
        styles: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = stock_ids.len();
        if industry_of.len() != n || caps.len() != n || styles.iter().any(|(_, c)| c.len() != n) {
            return Err(Error::Shape("exposure inputs differ in length".into()));
        }
        let mut industries: Vec<usize> = industry_of.to_vec();
        industries.sort_unstable();
        industries.dedup();
        let k = 1 + industries.len() + styles.len();
        let mut values = Array2::zeros((n, k));
        for i in 0..n {
            values[[i, 0]] = 1.0;
            let col = industries
                .binary_search(&industry_of[i])
                .expect("industry collected above");
            values[[i, 1 + col]] = 1.0;
            for (q, (_, c)) in styles.iter().enumerate() {
                values[[i, 1 + industries.len() + q]] = c[i];
            }
        }
        let mut factor_names = vec!["country".to_string()];
        factor_names.extend(industries.iter().map(|p| format!("industry_{p}")));
        factor_names.extend(styles.iter().map(|(name, _)| name.clone()));
        Ok(ExposureMatrix {
            date,
            stock_ids,
            factor_names,
            industries,
            n_styles: styles.len(),
            values,
            caps,
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_industries(&self) -> usize {
        self.industries.len()
    }

    pub fn style_column(&self, q: usize) -> Vec<f64> {
        self.values.column(1 + self.industries.len() + q).to_vec()
    }

    /// Regression weights √cap.
    pub fn regression_weights(&self) -> Vec<f64> {
        self.caps.iter().map(|c| c.sqrt()).collect()
    }

    /// Industry cap shares w_p, aligned with the industry columns.
    pub fn industry_shares(&self) -> Vec<f64> {
        let total: f64 = self.caps.iter().sum();
        (0..self.industries.len())
            .map(|p| {
                (0..self.n_stocks())
                    .filter(|&i| self.values[[i, 1 + p]] == 1.0)
                    .map(|i| self.caps[i])
                    .sum::<f64>()
                    / total
            })
            .collect()
    }

    /// Design in the reduced basis (last industry substituted out) plus the map back
    /// to full factor returns: f_full = expand · f_reduced.
    fn reduced_design(&self) -> (Array2<f64>, Array2<f64>, Vec<String>) {
        let (n, k) = self.values.dim();
        let p = self.industries.len();
        let shares = self.industry_shares();
        let mut expand = Array2::zeros((k, k - 1));
        expand[[0, 0]] = 1.0;
        for j in 0..p - 1 {
            expand[[1 + j, 1 + j]] = 1.0;
            expand[[p, 1 + j]] = -shares[j] / shares[p - 1];
        }
        for q in 0..self.n_styles {
            expand[[1 + p + q, p + q]] = 1.0;
        }
        let design = self.values.dot(&expand);
        let mut names = vec![self.factor_names[0].clone()];
        names.extend(self.factor_names[1..p].iter().cloned());
        names.extend(self.factor_names[1 + p..].iter().cloned());
        debug_assert_eq!(design.dim(), (n, k - 1));
        (design, expand, names)
    }
}

/// Fitted factor returns for one date.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorReturns {
    pub date: i64,
    pub factor_names: Vec<String>,
    /// All factor returns aligned with `factor_names` (country, industries, styles).
    pub values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub n_industries: usize,
}

impl FactorReturns {
    pub fn country(&self) -> f64 {
        self.values[0]
    }

    pub fn industry(&self) -> &[f64] {
        &self.values[1..1 + self.n_industries]
    }

    pub fn style(&self) -> &[f64] {
        &self.values[1 + self.n_industries..]
    }
}

/// Weighted least squares of `excess` on the exposures under the industry constraint.
pub fn cross_sectional_regression(excess: &[f64], x: &ExposureMatrix) -> Result<FactorReturns> {
    let n = x.n_stocks();
    if excess.len() != n {
        return Err(Error::Shape(format!(
            "{} returns for {} exposure rows",
            excess.len(),
            n
        )));
    }
    let k = x.values.ncols();
    if n <= k {
        return Err(Error::Regression {
            columns: vec![format!("{n} stocks cannot identify {k} factors")],
        });
    }
    let (design, expand, names) = x.reduced_design();
    let reduced = weighted_lstsq(&design, excess, &x.regression_weights(), &names)?;
    let full = expand.dot(&reduced);
    let fitted = x.values.dot(&full);
    let residuals = excess.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
    Ok(FactorReturns {
        date: x.date,
        factor_names: x.factor_names.clone(),
        values: full.to_vec(),
        residuals,
        n_industries: x.n_industries(),
    })
}

/// The linear map y ↦ residuals of [`cross_sectional_regression`] as an N × N matrix.
pub fn residual_projector(x: &ExposureMatrix) -> Result<Array2<f64>> {
    let n = x.n_stocks();
    let (design, _, names) = x.reduced_design();
    let v = x.regression_weights();
    let sv: Vec<f64> = v.iter().map(|w| w.sqrt()).collect();
    let scaled = Array2::from_shape_fn(design.dim(), |(i, j)| design[[i, j]] * sv[i]);
    let Qr { q, .. } = qr(&scaled, &names)?;
    let qqt = q.dot(&q.t());
    // u = D⁻¹ (I − QQᵀ) D y with D = diag(√v)
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let id = if i == j { 1.0 } else { 0.0 };
        (id - qqt[[i, j]]) * sv[j] / sv[i]
    }))
}

/// Fills `residual_return` with the regression residual of each label's excess forward
/// return on the date's exposures. Labels must be aligned with the exposure rows.
pub fn neutralize_labels(
    labels: &mut [Label],
    x: &ExposureMatrix,
    riskfree_daily: f64,
) -> Result<FactorReturns> {
    if labels.len() != x.n_stocks()
        || labels
            .iter()
            .zip(&x.stock_ids)
            .any(|(l, id)| &l.stock_id != id || l.date != x.date)
    {
        return Err(Error::Shape("labels are not aligned with exposure rows".into()));
    }
    let rf = (1.0 + riskfree_daily).powi(LABEL_HORIZON as i32) - 1.0;
    let excess: Vec<f64> = labels.iter().map(|l| l.raw_forward_return - rf).collect();
    let fit = cross_sectional_regression(&excess, x)?;
    for (l, u) in labels.iter_mut().zip(&fit.residuals) {
        l.residual_return = Some(*u);
    }
    Ok(fit)
}

/// Cap-weighted daily market return, indexed from the panel's first date.
#[derive(Clone, Debug)]
pub struct MarketSeries {
    first_date: i64,
    returns: Vec<f64>,
}

impl MarketSeries {
    pub fn from_panel(panel: &Panel) -> Self {
        let span = (panel.last_date() - panel.first_date() + 1) as usize;
        let mut num = vec![0.0; span];
        let mut den = vec![0.0; span];
        for s in panel.stocks() {
            for (j, f) in s.feature_slice().iter().enumerate() {
                if let Some(f) = f {
                    let prev_cap = s.rows[j - 1].market_cap;
                    let slot = (s.rows[j].date - panel.first_date()) as usize;
                    num[slot] += prev_cap * f.ret();
                    den[slot] += prev_cap;
                }
            }
        }
        let returns = num
            .iter()
            .zip(&den)
            .map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 })
            .collect();
        MarketSeries {
            first_date: panel.first_date(),
            returns,
        }
    }

    /// The `n` market returns ending at `t`.
    pub fn window(&self, t: i64, n: usize) -> Option<&[f64]> {
        let end = usize::try_from(t - self.first_date).ok()?;
        if end >= self.returns.len() || end + 1 < n {
            return None;
        }
        Some(&self.returns[end + 1 - n..=end])
    }
}

fn trailing_returns(series: &StockSeries, t: i64, n: usize) -> Option<Vec<f64>> {
    if !series.has_valid_history(t, n) {
        return None;
    }
    let end = series.position(t)?;
    Some(
        series.feature_slice()[end + 1 - n..=end]
            .iter()
            .map(|f| f.expect("valid history").ret())
            .collect(),
    )
}

fn trailing_turnover(series: &StockSeries, t: i64, n: usize) -> Option<Vec<f64>> {
    let end = series.position(t)?;
    if end + 1 < n {
        return None;
    }
    Some(series.rows[end + 1 - n..=end].iter().map(|r| r.turnover).collect())
}

/// Builds standardized exposures at `t` for the given stock indices. Stocks without
/// enough history for the enabled styles are rejected with a history error.
pub fn build_exposures(
    panel: &Panel,
    t: i64,
    universe: &[usize],
    cfg: &StyleConfig,
    market: &MarketSeries,
) -> Result<ExposureMatrix> {
    let lookback = cfg.return_lookback();
    let mut ids = Vec::with_capacity(universe.len());
    let mut industries = Vec::with_capacity(universe.len());
    let mut caps = Vec::with_capacity(universe.len());
    let mut raw: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut fundamentals = Vec::with_capacity(universe.len());

    for &i in universe {
        let s = panel.stock(i);
        let row = s.row_at(t).ok_or_else(|| Error::History {
            stock: s.id.clone(),
            date: t,
            needed: lookback,
            available: 0,
        })?;
        let returns = trailing_returns(s, t, lookback).ok_or_else(|| Error::History {
            stock: s.id.clone(),
            date: t,
            needed: lookback,
            available: s.position(t).map_or(0, |p| p + 1),
        })?;
        ids.push(s.id.clone());
        industries.push(row.industry_id);
        caps.push(row.market_cap);
        fundamentals.push(style_fundamental_blends(&row.fundamentals));
        let rf = vec![cfg.riskfree; returns.len()];

        let beta_fit = if cfg.beta || cfg.residual_volatility {
            let w = cfg.beta_window;
            let mkt = market.window(t, w).ok_or(Error::ShortSeries {
                needed: w,
                available: 0,
            })?;
            Some(style_beta(&returns[lookback - w..], mkt, &rf[lookback - w..], cfg.beta_half_life)?)
        } else {
            None
        };
        if cfg.beta {
            raw.entry("beta").or_default().push(beta_fit.as_ref().expect("fitted").beta);
        }
        if cfg.momentum {
            let weights = normalized(
                ewma_weights(cfg.momentum_window, cfg.momentum_half_life)
                    .into_iter()
                    .rev()
                    .collect(),
            );
            raw.entry("momentum").or_default().push(style_momentum(
                &returns,
                &rf,
                cfg.momentum_window,
                cfg.momentum_lag,
                &weights,
            )?);
        }
        if cfg.size || cfg.nonlinear_size {
            raw.entry("size").or_default().push(style_size(row.market_cap)?);
        }
        if cfg.residual_volatility {
            let rv = style_residual_volatility(
                &returns,
                &rf,
                &beta_fit.as_ref().expect("fitted").residuals,
                &cfg.into(),
            )?;
            raw.entry("residual_volatility").or_default().push(rv.blended);
        }
        if cfg.liquidity {
            let turnover = trailing_turnover(s, t, 12 * cfg.month_len).ok_or(Error::ShortSeries {
                needed: 12 * cfg.month_len,
                available: 0,
            })?;
            raw.entry("liquidity")
                .or_default()
                .push(style_liquidity(&turnover, cfg.month_len)?);
        }
    }

    let mut styles: Vec<(String, Vec<f64>)> = Vec::new();
    let push = |name: &str, mut col: Vec<f64>, styles: &mut Vec<(String, Vec<f64>)>| {
        if !standardize_exposures(&mut col, &caps) {
            warn!("style `{name}` has zero cross-sectional variance at date {t}; zeroed");
        }
        styles.push((name.to_string(), col));
    };
    let mut std_beta = None;
    if let Some(b) = raw.remove("beta") {
        push("beta", b, &mut styles);
        std_beta = styles.last().map(|(_, c)| c.clone());
    }
    if let Some(m) = raw.remove("momentum") {
        push("momentum", m, &mut styles);
    }
    let mut std_size = None;
    if let Some(sz) = raw.remove("size") {
        let mut col = sz;
        standardize_exposures(&mut col, &caps);
        std_size = Some(col.clone());
        if cfg.size {
            styles.push(("size".to_string(), col));
        }
    }
    if let Some(rv) = raw.remove("residual_volatility") {
        let col = match &std_beta {
            Some(b) => weighted_residualize(&rv, b, &caps),
            None => rv,
        };
        push("residual_volatility", col, &mut styles);
    }
    if let Some(l) = raw.remove("liquidity") {
        push("liquidity", l, &mut styles);
    }
    if cfg.nonlinear_size {
        let size = std_size.expect("size computed when nonlinear size is enabled");
        styles.push(("nonlinear_size".to_string(), style_nonlinear_size(&size, &caps)));
    }
    if cfg.fundamentals && panel.has_fundamentals() {
        let picks: [(&str, fn(&FundamentalStyles) -> Option<f64>); 4] = [
            ("earnings_yield", |f| f.earnings_yield),
            ("growth", |f| f.growth),
            ("book_to_price", |f| f.book_to_price),
            ("leverage", |f| f.leverage),
        ];
        for (name, pick) in picks {
            let col: Option<Vec<f64>> = fundamentals.iter().map(pick).collect();
            match col {
                Some(c) => push(name, c, &mut styles),
                None => warn!("style `{name}` omitted at date {t}: inputs missing for some stocks"),
            }
        }
    }
    ExposureMatrix::new(t, ids, &industries, caps, styles)
}

/// Writes `date,factor_name,value` rows.
pub fn write_factor_returns<W: Write>(fits: &[FactorReturns], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "factor_name", "value"])?;
    for f in fits {
        for (name, v) in f.factor_names.iter().zip(&f.values) {
            out.write_record([f.date.to_string(), name.clone(), format!("{v}")])?;
        }
    }
    out.flush().map_err(|e| Error::io("<factor returns>", e))?;
    Ok(())
}

/// Writes `date,stock_id,residual` rows.
pub fn write_residuals<W: Write>(rows: &[(i64, String, f64)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "stock_id", "residual"])?;
    for (d, id, u) in rows {
        out.write_record([d.to_string(), id.clone(), format!("{u}")])?;
    }
    out.flush().map_err(|e| Error::io("<residuals>", e))?;
    Ok(())
}
