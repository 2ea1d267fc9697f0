//! Pipeline commands behind the `alphanet` binary: synthesize a panel, fit the
//! feature mask, train the rolling cycles, backtest the predictions and report.

pub mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alphanet::barra::MarketSeries;
use alphanet::evaluation::{
    emit_report, ic_test, index_relative_backtest, layered_backtest, parameter_significance, Reports, ScoreTable, Summary,
};
use alphanet::feature_ops::Registry;
use alphanet::market_data::{generate_synthetic_panel, load_panel, save_panel, Panel};
use alphanet::nn::{checkpoint, AlphaNet};
use alphanet::spearman_dropout::FeatureMask;
use alphanet::training::{
    cycle_mask, cycle_samples, realized_residuals, rolling_run, split_window, write_training_log, RollingOutput, RollingSchedule,
};
use alphanet::{Error, Result};
use serde::Serialize;

pub use config::{Ablation, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Exit code for an error: configuration and usage problems map to 2, the rest to 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Stage { source, .. } => exit_code(source),
        _ => EXIT_FAILURE,
    }
}

/// Wall-clock seconds per completed stage, in execution order.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}: start");
        let out = f().map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => e.in_stage(name),
        })?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("stage {name}: done in {secs:.2}s");
        self.0.push((name.to_string(), secs));
        Ok(out)
    }
}

fn require_dir(path: &Path, field: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::config(field, format!("directory {} does not exist", path.display())))
    }
}

/// Directory receiving a run's artifacts; ablations get a subdirectory named after
/// the variant.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match cfg.ablation {
        Ablation::None => cfg.paths.work_dir.clone(),
        a => cfg.paths.work_dir.join(a.name()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Generates the configured synthetic panel and writes it as CSV to the configured
/// panel path, or `work_dir/panel.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    require_dir(&cfg.paths.work_dir, "paths.work_dir")?;
    let path = cfg.paths.panel.clone().unwrap_or_else(|| cfg.paths.work_dir.join("panel.csv"));
    let panel = generate_synthetic_panel(&cfg.synth)?;
    save_panel(&panel, &path)?;
    log::info!("wrote {} rows to {}", panel.n_rows(), path.display());
    Ok(path)
}

/// Loads the configured panel, or synthesizes one when no path is set.
pub fn load_or_synthesize(cfg: &RunConfig) -> Result<Panel> {
    match &cfg.paths.panel {
        Some(p) if !p.is_file() => Err(Error::config("paths.panel", format!("file {} does not exist", p.display()))),
        Some(p) => load_panel(p),
        None => generate_synthetic_panel(&cfg.synth),
    }
}

/// Expanding-window cycles ending `rebalance_every + 1` days before the panel ends,
/// so every prediction has an exit price. Training starts once every stock can
/// have full feature and style history.
pub fn schedule_for(panel: &Panel, cfg: &RunConfig) -> Result<RollingSchedule> {
    let model = cfg.model_config();
    let warmup = model.history_needed().max(cfg.barra.return_lookback() + 1) as i64;
    let train_start = panel.first_date() + warmup;
    let test_end = panel.last_date() - cfg.eval.rebalance_every as i64 - 1;
    let span = (cfg.schedule.cycles * cfg.schedule.retrain_every) as i64;
    let test_start = test_end - span + 1;
    let min_train = 4 * cfg.eval.rebalance_every as i64;
    if test_start - train_start < min_train {
        return Err(Error::config(
            "schedule",
            format!(
                "panel days {}..={} leave {} training days before a {span}-day test span (need {min_train})",
                panel.first_date(),
                panel.last_date(),
                test_start - train_start
            ),
        ));
    }
    let schedule = RollingSchedule::expanding(train_start, test_start, test_end, cfg.schedule.cycles)?;
    let (train, val) = split_window(&schedule.cycles[0], &cfg.train, &cfg.eval);
    if train.is_empty() || val.len() < 3 {
        return Err(Error::config(
            "schedule",
            format!(
                "the first cycle's window {}..={} yields {} training and {} validation dates (need 3); \
                 lengthen the panel, shorten the test span or raise train.validation_fraction",
                train_start,
                test_start - 1,
                train.len(),
                val.len()
            ),
        ));
    }
    Ok(schedule)
}

/// Fits the first cycle's feature mask and writes `mask.json` and `features.csv`.
pub fn cmd_extract(cfg: &RunConfig) -> Result<FeatureMask> {
    require_dir(&cfg.paths.work_dir, "paths.work_dir")?;
    let dir = output_dir(cfg);
    create_dir(&dir)?;
    let mut timings = Timings::default();
    let panel = timings.stage("load", || load_or_synthesize(cfg))?;
    let schedule = schedule_for(&panel, cfg)?;
    let rolling = cfg.rolling_config();
    let market = MarketSeries::from_panel(&panel);
    let (samples, _) = timings.stage("barra", || cycle_samples(&panel, &market, &schedule.cycles[0], &rolling))?;
    let mask = timings.stage("mask", || cycle_mask(&panel, &samples[0], &rolling, cfg.train.seed))?;
    mask.save(&dir.join("mask.json"))?;
    let labels = Registry::new(rolling.model.n_inputs).labels();
    let path = dir.join("features.csv");
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
    w.write_record(["position", "column", "feature"])?;
    for (k, &c) in mask.kept.iter().enumerate() {
        w.write_record([k.to_string(), c.to_string(), labels[c].clone()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    log::info!("kept {} of {} features", mask.len(), labels.len());
    Ok(mask)
}

#[derive(Serialize)]
struct CycleSummary {
    index: usize,
    train_start: i64,
    train_end: i64,
    predict_start: i64,
    predict_end: i64,
    best_epoch: Option<usize>,
    best_sharpe: Option<f64>,
    epochs: Option<usize>,
    n_keep: Option<usize>,
    diagnostic: Option<String>,
    error: Option<String>,
}

fn cycle_dir(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("cycle{k}"))
}

/// Writes per-cycle checkpoints, masks and training logs, `cycles.json` and
/// `predictions.csv`.
fn write_training_artifacts(dir: &Path, panel: &Panel, out: &RollingOutput) -> Result<()> {
    let mut rows = Vec::new();
    for (k, rec) in out.cycles.iter().enumerate() {
        let c = rec.cycle;
        let mut row = CycleSummary {
            index: k,
            train_start: c.train_start,
            train_end: c.train_end,
            predict_start: c.predict_start,
            predict_end: c.predict_end,
            best_epoch: None,
            best_sharpe: None,
            epochs: None,
            n_keep: None,
            diagnostic: None,
            error: None,
        };
        match &rec.result {
            Ok(o) => {
                let cd = cycle_dir(dir, k);
                create_dir(&cd)?;
                checkpoint::save(&o.model, &cd.join("model.ckpt"))?;
                o.model.mask.save(&cd.join("mask.json"))?;
                let path = cd.join("training_log.csv");
                write_training_log(&o.log, File::create(&path).map_err(|e| Error::io(&path, e))?)?;
                row.best_epoch = Some(o.best_epoch);
                row.best_sharpe = o.best_sharpe.is_finite().then_some(o.best_sharpe);
                row.epochs = Some(o.log.len());
                row.n_keep = Some(o.model.n_keep());
                row.diagnostic = o.diagnostic.clone();
            }
            Err(e) => row.error = Some(e.clone()),
        }
        rows.push(row);
    }
    write_json(&dir.join("cycles.json"), &rows)?;
    let path = dir.join("predictions.csv");
    out.predictions
        .write_csv(panel, BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
}

/// Trains every cycle and writes checkpoints and predictions.
pub fn cmd_train(cfg: &RunConfig) -> Result<RollingOutput> {
    require_dir(&cfg.paths.work_dir, "paths.work_dir")?;
    let dir = output_dir(cfg);
    create_dir(&dir)?;
    let mut timings = Timings::default();
    let panel = timings.stage("load", || load_or_synthesize(cfg))?;
    let out = train_stages(cfg, &panel, &dir, &mut timings)?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(out)
}

fn train_stages(cfg: &RunConfig, panel: &Panel, dir: &Path, timings: &mut Timings) -> Result<RollingOutput> {
    let schedule = timings.stage("schedule", || schedule_for(panel, cfg))?;
    let out = timings.stage("train", || rolling_run(panel, &schedule, &cfg.rolling_config()))?;
    for (k, rec) in out.cycles.iter().enumerate() {
        timings.0.push((format!("cycle{k}"), rec.seconds));
    }
    if out.cycles.iter().all(|c| c.result.is_err()) {
        let first = out.cycles.iter().find_map(|c| c.result.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Validation(format!("every training cycle failed; first error: {first}")).in_stage("train"));
    }
    timings.stage("write_models", || write_training_artifacts(dir, panel, &out))?;
    Ok(out)
}

/// IC against realized residual returns, the layered test, the index-relative
/// backtest and, when a model is given, its parameter significance.
pub fn evaluate(panel: &Panel, predictions: &ScoreTable, cfg: &RunConfig, model: Option<&AlphaNet>) -> Result<Reports> {
    let market = MarketSeries::from_panel(panel);
    let realized = realized_residuals(panel, predictions, &cfg.barra, &market);
    let ic = ic_test(predictions, &realized, cfg.eval.min_ic_stocks).map_err(|e| e.in_stage("ic_test"))?;
    let layered = layered_backtest(predictions, panel, &cfg.eval).map_err(|e| e.in_stage("layered_backtest"))?;
    let relative = index_relative_backtest(predictions, panel, &cfg.eval).map_err(|e| e.in_stage("relative_backtest"))?;
    let significance = match model {
        Some(m) => parameter_significance(m).map_err(|e| e.in_stage("significance"))?,
        None => Vec::new(),
    };
    let mut info = BTreeMap::new();
    info.insert("variant".to_string(), cfg.ablation.name().to_string());
    info.insert("train_seed".to_string(), cfg.train.seed.to_string());
    if cfg.paths.panel.is_none() {
        info.insert("synth_seed".to_string(), cfg.synth.seed.to_string());
        info.insert("alpha_strength".to_string(), cfg.synth.alpha_strength.to_string());
    }
    Ok(Reports {
        ic: Some(ic),
        layered: Some(layered),
        relative: Some(relative),
        significance,
        n_predictions: predictions.by_date.values().map(Vec::len).sum(),
        n_keep: model.map(AlphaNet::n_keep),
        info,
    })
}

/// The model of the last cycle that wrote a checkpoint.
fn latest_model(dir: &Path, n_cycles: usize) -> Result<Option<AlphaNet>> {
    for k in (0..n_cycles).rev() {
        let p = cycle_dir(dir, k).join("model.ckpt");
        if p.is_file() {
            return checkpoint::load(&p).map(Some);
        }
    }
    Ok(None)
}

/// Evaluates `predictions.csv` from a previous `train` and writes the report files.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<Summary> {
    let dir = output_dir(cfg);
    let path = dir.join("predictions.csv");
    if !path.is_file() {
        return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "run `train` first")));
    }
    let mut timings = Timings::default();
    let panel = timings.stage("load", || load_or_synthesize(cfg))?;
    let predictions = ScoreTable::read_csv(&panel, File::open(&path).map_err(|e| Error::io(&path, e))?)?;
    let model = latest_model(&dir, cfg.schedule.cycles)?;
    let reports = timings.stage("evaluate", || evaluate(&panel, &predictions, cfg, model.as_ref()))?;
    timings.stage("report", || emit_report(&reports, &dir))?;
    Ok(reports.summary())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub timings: Timings,
}

/// The full pipeline: load, mask fit, neutralization and training per cycle,
/// prediction, the three evaluations and the report. Writes the effective config to
/// `config.json` and stage timings to `timings.json`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    require_dir(&cfg.paths.work_dir, "paths.work_dir")?;
    let dir = output_dir(cfg);
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut timings = Timings::default();
    let panel = timings.stage("load", || load_or_synthesize(cfg))?;
    let out = train_stages(cfg, &panel, &dir, &mut timings)?;
    let model = out.cycles.iter().rev().find_map(|c| c.result.as_ref().ok()).map(|o| &o.model);
    let reports = timings.stage("evaluate", || evaluate(&panel, &out.predictions, cfg, model))?;
    timings.stage("report", || emit_report(&reports, &dir))?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(RunOutput {
        dir,
        summary: reports.summary(),
        timings,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Renders the report in `dir`: the summary tables, or `summary.json` verbatim when
/// `json` is set.
pub fn cmd_report(dir: &Path, json: bool) -> Result<String> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if json {
        return Ok(text);
    }
    let s: Summary = serde_json::from_str(&text)?;
    let mut out = String::new();
    for (k, v) in &s.info {
        out += &format!("{k}: {v}\n");
    }
    out += &format!(
        "predictions: {}  kept features: {}\n\n",
        s.n_predictions,
        s.n_keep.map_or_else(|| "n/a".to_string(), |n| n.to_string())
    );
    out += &format!(
        "IC test over {} dates: mean {}  std {}  IR {}\n\n",
        s.ic_dates,
        opt(s.ic_mean),
        opt(s.ic_std),
        opt(s.ir)
    );
    out += "layer  ann_excess\n";
    for (k, a) in s.layer_ann_excess.iter().enumerate() {
        out += &format!("{:>5}  {a:>10.4}\n", k + 1);
    }
    out += &format!("top - bottom: {}\n\n", opt(s.top_minus_bottom));
    out += "year   excess_return  n_stocks     std   sharpe   max_dd  turnover/rebalance\n";
    for y in &s.relative {
        let year = if y.year < 0 { "all".to_string() } else { y.year.to_string() };
        out += &format!(
            "{year:>4}  {:>14.4}  {:>8.1}  {:>6.4}  {:>7.3}  {:>7.4}  {:>8.4}\n",
            y.excess_return, y.n_stocks, y.std, y.sharpe, y.max_drawdown, y.turnover
        );
    }
    let sig = dir.join("significance.csv");
    if sig.is_file() {
        let mut r = csv::Reader::from_path(&sig)?;
        out += "\nrank  feature  score\n";
        for rec in r.records().take(10) {
            let rec = rec?;
            out += &format!("{:>4}  {}  {}\n", &rec[0], &rec[1], &rec[2]);
        }
    }
    Ok(out)
}
