use std::collections::BTreeSet;

use alphanet::evaluation::*;
use alphanet::market_data::{generate_synthetic_panel, Panel, SynthConfig};
use proptest::prelude::*;

fn panel() -> Panel {
    generate_synthetic_panel(&SynthConfig {
        seed: 5,
        n_stocks: 23,
        n_days: 160,
        ..Default::default()
    })
    .unwrap()
}

fn random_scores(panel: &Panel, seed: u64, every: usize) -> ScoreTable {
    let mut s = seed | 1;
    let mut u = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut table = ScoreTable::new();
    for date in (40..140).step_by(every) {
        let mut rows = Vec::new();
        for i in 0..panel.n_stocks() {
            if u() > 0.1 {
                rows.push((i, (u() * 8.0).floor()));
            }
        }
        table.insert(date, rows);
    }
    table
}

/// Worst peak-to-trough fall over every pair of points of the wealth path.
fn drawdown_oracle(returns: &[f64]) -> f64 {
    let mut wealth = vec![1.0];
    for r in returns {
        wealth.push(wealth.last().unwrap() * (1.0 + r));
    }
    let mut worst: f64 = 0.0;
    for i in 0..wealth.len() {
        for j in i..wealth.len() {
            worst = worst.max((wealth[i] - wealth[j]) / wealth[i]);
        }
    }
    worst
}

proptest! {
    #[test]
    fn drawdown_matches_pairwise_oracle(r in prop::collection::vec(-0.3f64..0.3, 1..60)) {
        prop_assert!((max_drawdown(&r) - drawdown_oracle(&r)).abs() < 1e-12);
    }

    #[test]
    fn sharpe_is_return_over_risk(r in prop::collection::vec(-0.1f64..0.1, 2..40)) {
        let m = metrics(&r, 0.0, PERIODS_PER_YEAR).unwrap();
        if m.ann_std > 0.0 {
            prop_assert!((m.sharpe - m.ann_return / m.ann_std).abs() < 1e-9 * (1.0 + m.sharpe.abs()));
        }
    }

    #[test]
    fn layer_sizes_partition(n in 0usize..200, l in 1usize..12) {
        let sizes = layer_sizes(n, l);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}

#[test]
fn layers_partition_the_priced_universe() {
    let p = panel();
    let cfg = EvalConfig::default();
    for seed in 0..5 {
        let scores = random_scores(&p, seed, 10);
        let res = layered_backtest(&scores, &p, &cfg).unwrap();
        let dates = scores.dates();
        for (k, &date) in res.dates.iter().enumerate() {
            let pos = dates.iter().position(|&d| d == date).unwrap();
            let exit = dates.get(pos + 1).copied().unwrap_or(date + cfg.rebalance_every as i64) + 1;
            let priced: BTreeSet<usize> = scores.by_date[&date]
                .iter()
                .map(|x| x.0)
                .filter(|&i| p.stock(i).row_at(date + 1).is_some() && p.stock(i).row_at(exit).is_some())
                .collect();
            let mut seen = BTreeSet::new();
            let mut sizes = Vec::new();
            for layer in &res.layers {
                let h = &layer.holdings[k];
                sizes.push(h.len());
                for &i in h.keys() {
                    assert!(seen.insert(i), "stock {i} held by two layers on {date}");
                }
                assert!((h.values().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(seen, priced, "date {date}");
            assert_eq!(sizes, layer_sizes(priced.len(), cfg.n_layers));
            let score: std::collections::BTreeMap<usize, f64> = scores.by_date[&date].iter().copied().collect();
            for pair in res.layers.windows(2) {
                let low_above = pair[0].holdings[k].keys().map(|i| score[i]).fold(f64::INFINITY, f64::min);
                let high_below = pair[1].holdings[k].keys().map(|i| score[i]).fold(f64::NEG_INFINITY, f64::max);
                assert!(low_above >= high_below);
            }
        }
    }
}

#[test]
fn fees_reconcile() {
    let p = panel();
    let cfg = EvalConfig {
        fee_rate: 0.0003,
        stamp_rate: 0.001,
        ..Default::default()
    };
    let scores = random_scores(&p, 9, 5);
    let layered = layered_backtest(&scores, &p, &cfg).unwrap();
    let relative = index_relative_backtest(&scores, &p, &cfg).unwrap();
    let ledgers = layered.layers.iter().chain(std::iter::once(&relative.ledger));
    for ledger in ledgers {
        for (k, t) in ledger.trades.iter().enumerate() {
            let expected = cfg.fee_rate * (t.buys + t.sells) + cfg.stamp_rate * t.sells;
            assert!((t.fee - expected).abs() < 1e-12);
            assert!((ledger.net[k] - (ledger.gross[k] - t.fee)).abs() < 1e-12);
            assert!((t.turnover - (t.buys + t.sells) / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn relative_turnover_respects_the_cap() {
    let p = panel();
    for cap in [0.05, 0.3, 0.6] {
        let cfg = EvalConfig {
            turnover_cap: cap,
            ..Default::default()
        };
        for seed in 0..4 {
            let r = index_relative_backtest(&random_scores(&p, seed, 10), &p, &cfg).unwrap();
            assert!(!r.ledger.trades.is_empty());
            for t in &r.ledger.trades {
                assert!(t.turnover <= cap + 1e-12, "turnover {} above cap {cap}", t.turnover);
            }
            for w in &r.ledger.holdings {
                assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn perfect_scores_give_unit_ic() {
    let p = panel();
    let scores = random_scores(&p, 2, 10);
    let ic = ic_test(&scores, &scores, 5).unwrap();
    assert!(ic.series.iter().all(|x| (x.1 - 1.0).abs() < 1e-12));
    assert_eq!(ic.ir, f64::INFINITY);
}
