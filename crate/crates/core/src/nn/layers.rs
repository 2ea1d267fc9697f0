//! Network layers. Each layer has a `register_*` function adding its parameters
//! under a name prefix and a forward function evaluated inside a [`Session`].
//!
//! Sequences are stored as (B·T) × F matrices with sample-major rows: row b·T + t
//! is time step t of sample b.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Var;
use super::params::{Init, ParameterStore, Session};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub fn register_affine(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add_weight(&name(prefix, "w"), fan_in, fan_out, rng)?;
    store.add(&name(prefix, "b"), (1, fan_out), Init::Zeros, true, rng)
}

/// x·W + b.
pub fn affine(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&name(prefix, "w"))?;
    let b = s.param(&name(prefix, "b"))?;
    s.graph.affine(x, w, b)
}

pub fn register_batch_norm(store: &mut ParameterStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.add(&name(prefix, "gamma"), (1, width), Init::Ones, true, rng)?;
    store.add(&name(prefix, "beta"), (1, width), Init::Zeros, true, rng)?;
    store.add(&name(prefix, "running_mean"), (1, width), Init::Zeros, false, rng)?;
    store.add(&name(prefix, "running_var"), (1, width), Init::Ones, false, rng)
}

/// Column-wise batch normalization over all rows. Training mode uses batch statistics
/// and queues a running-statistic update; inference uses the running statistics.
pub fn batch_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let gamma = s.param(&name(prefix, "gamma"))?;
    let beta = s.param(&name(prefix, "beta"))?;
    let normalized = if s.training {
        let xv = s.graph.value(x);
        if xv.nrows() < 2 {
            return Err(Error::Batch("batch normalization in training needs at least 2 rows".into()));
        }
        let mean = xv.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let var = xv.var_axis(Axis(0), 0.0).insert_axis(Axis(0));
        let rm_name = name(prefix, "running_mean");
        let rv_name = name(prefix, "running_var");
        let rm = s.store().value(&rm_name)?;
        let rv = s.store().value(&rv_name)?;
        let new_rm = rm * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
        let new_rv = rv * (1.0 - BN_MOMENTUM) + &var * BN_MOMENTUM;
        s.push_update(&rm_name, new_rm);
        s.push_update(&rv_name, new_rv);
        s.graph.batch_norm_raw(x, NORM_EPS)?
    } else {
        let rm = s.store().value(&name(prefix, "running_mean"))?.clone();
        let rv = s.store().value(&name(prefix, "running_var"))?;
        let inv = rv.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let shift = s.graph.constant(-rm)?;
        let inv = s.graph.constant(inv)?;
        let centered = s.graph.add_row(x, shift)?;
        s.graph.mul_row(centered, inv)?
    };
    s.graph.scale_shift(normalized, gamma, beta)
}

pub fn register_layer_norm(store: &mut ParameterStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.add(&name(prefix, "gamma"), (1, width), Init::Ones, true, rng)?;
    store.add(&name(prefix, "beta"), (1, width), Init::Zeros, true, rng)
}

pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let gamma = s.param(&name(prefix, "gamma"))?;
    let beta = s.param(&name(prefix, "beta"))?;
    let n = s.graph.layer_norm(x, NORM_EPS)?;
    s.graph.scale_shift(n, gamma, beta)
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(s: &mut Session, x: Var, rate: f64) -> Result<Var> {
    if !s.training || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = s.graph.shape(x);
    let rng = s.rng();
    let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    s.graph.mul_const(x, mask)
}

/// Gate weights act on [h_{t-1}, x_t]; columns are the f, i, C̃, o blocks.
pub fn register_lstm(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.add_weight(&name(prefix, "w"), hidden + input, 4 * hidden, rng)?;
    store.add(&name(prefix, "b"), (1, 4 * hidden), Init::Zeros, true, rng)
}

/// One LSTM step on a batch: returns (h_t, C_t).
pub fn lstm_cell(s: &mut Session, x: Var, h: Var, c: Var, prefix: &str) -> Result<(Var, Var)> {
    let hidden = s.graph.shape(h).1;
    let w = s.param(&name(prefix, "w"))?;
    let (rows, cols) = s.graph.shape(w);
    let input = s.graph.shape(x).1;
    if cols != 4 * hidden || rows != hidden + input || s.graph.shape(c) != s.graph.shape(h) {
        return Err(Error::Shape(format!(
            "lstm {prefix}: weights {rows}×{cols} for input {input}, hidden {hidden}"
        )));
    }
    let b = s.param(&name(prefix, "b"))?;
    let hx = s.graph.concat_cols(&[h, x])?;
    let z = s.graph.affine(hx, w, b)?;
    let zf = s.graph.slice_cols(z, 0, hidden)?;
    let zi = s.graph.slice_cols(z, hidden, hidden)?;
    let zc = s.graph.slice_cols(z, 2 * hidden, hidden)?;
    let zo = s.graph.slice_cols(z, 3 * hidden, hidden)?;
    let f = s.graph.sigmoid(zf)?;
    let i = s.graph.sigmoid(zi)?;
    let cand = s.graph.tanh(zc)?;
    let o = s.graph.sigmoid(zo)?;
    let keep = s.graph.mul(f, c)?;
    let write = s.graph.mul(i, cand)?;
    let c_new = s.graph.add(keep, write)?;
    let tc = s.graph.tanh(c_new)?;
    let h_new = s.graph.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs an LSTM over every sequence of a (B·T) × F input. Returns the per-step
/// outputs as (B·T) × H and the final hidden state (B × H). `reverse` runs t = T..1.
pub fn lstm(s: &mut Session, x: Var, steps: usize, prefix: &str, reverse: bool, dropout_rate: f64) -> Result<(Var, Var)> {
    let (n, _) = s.graph.shape(x);
    if steps == 0 || n % steps != 0 {
        return Err(Error::Shape(format!("{n} rows is not a multiple of {steps} steps")));
    }
    let batch = n / steps;
    let hidden = s.store().value(&name(prefix, "w"))?.ncols() / 4;
    let mut h = s.graph.constant(Array2::zeros((batch, hidden)))?;
    let mut c = s.graph.constant(Array2::zeros((batch, hidden)))?;
    let mut outputs = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for &t in &order {
        let xt = s.graph.gather_rows(x, (0..batch).map(|b| b * steps + t).collect())?;
        let (hn, cn) = lstm_cell(s, xt, h, c, prefix)?;
        h = hn;
        c = cn;
        outputs[t] = dropout(s, h, dropout_rate)?;
    }
    // Rows of `stacked` are t-major (t·B + b); reorder to sample-major.
    let stacked = s.graph.concat_rows(&outputs)?;
    let seq = s
        .graph
        .gather_rows(stacked, (0..n).map(|r| (r % steps) * batch + r / steps).collect())?;
    Ok((seq, h))
}

pub fn register_bi_lstm(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    register_lstm(store, &name(prefix, "fwd"), input, hidden, rng)?;
    register_lstm(store, &name(prefix, "bwd"), input, hidden, rng)
}

/// Forward and backward LSTMs concatenated per step: (B·T) × 2H, plus the query
/// state [h_fwd at T, h_bwd at 1] as B × 2H.
pub fn bi_lstm(s: &mut Session, x: Var, steps: usize, prefix: &str, dropout_rate: f64) -> Result<(Var, Var)> {
    let (fwd, hf) = lstm(s, x, steps, &name(prefix, "fwd"), false, dropout_rate)?;
    let (bwd, hb) = lstm(s, x, steps, &name(prefix, "bwd"), true, dropout_rate)?;
    let seq = s.graph.concat_cols(&[fwd, bwd])?;
    let last = s.graph.concat_cols(&[hf, hb])?;
    Ok((seq, last))
}

/// softmax(Q·Kᵀ/√d_k)·V per sequence.
pub fn scaled_dot_attention(s: &mut Session, q: Var, k: Var, v: Var, steps: usize) -> Result<Var> {
    let dk = s.graph.shape(q).1;
    s.graph.block_attention(q, k, v, steps, 1.0 / (dk as f64).sqrt())
}

pub fn register_encoder_block(
    store: &mut ParameterStore,
    prefix: &str,
    width: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::config(
            "model.heads",
            format!("width {width} is not divisible by {heads} heads"),
        ));
    }
    let dk = width / heads;
    for h in 0..heads {
        for m in ["wq", "wk", "wv"] {
            store.add_weight(&format!("{prefix}.head{h}.{m}"), width, dk, rng)?;
        }
    }
    store.add_weight(&name(prefix, "wo"), width, width, rng)?;
    register_layer_norm(store, &name(prefix, "ln1"), width, rng)?;
    register_affine(store, &name(prefix, "ffn1"), width, width, rng)?;
    register_affine(store, &name(prefix, "ffn2"), width, width, rng)?;
    register_layer_norm(store, &name(prefix, "ln2"), width, rng)
}

/// Multi-head self-attention with Add & Norm, then a GELU feed-forward with Add & Norm.
pub fn encoder_block(s: &mut Session, x: Var, steps: usize, heads: usize, prefix: &str) -> Result<Var> {
    let width = s.graph.shape(x).1;
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::config(
            "model.heads",
            format!("width {width} is not divisible by {heads} heads"),
        ));
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = s.param(&format!("{prefix}.head{h}.wq"))?;
        let wk = s.param(&format!("{prefix}.head{h}.wk"))?;
        let wv = s.param(&format!("{prefix}.head{h}.wv"))?;
        let q = s.graph.matmul(x, wq)?;
        let k = s.graph.matmul(x, wk)?;
        let v = s.graph.matmul(x, wv)?;
        outs.push(scaled_dot_attention(s, q, k, v, steps)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        s.graph.concat_cols(&outs)?
    };
    let wo = s.param(&name(prefix, "wo"))?;
    let att = s.graph.matmul(cat, wo)?;
    let res = s.graph.add(x, att)?;
    let y = layer_norm(s, res, &name(prefix, "ln1"))?;
    let hid = affine(s, y, &name(prefix, "ffn1"))?;
    let hid = s.graph.gelu(hid)?;
    let ff = affine(s, hid, &name(prefix, "ffn2"))?;
    let res2 = s.graph.add(y, ff)?;
    layer_norm(s, res2, &name(prefix, "ln2"))
}

pub fn register_auxiliary_branch(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    width: usize,
    layers: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    register_affine(store, &name(prefix, "proj"), input, width, rng)?;
    for l in 0..layers {
        register_encoder_block(store, &format!("{prefix}.enc{l}"), width, heads, rng)?;
    }
    Ok(())
}

/// Affine projection to the merge width followed by stacked encoder blocks.
pub fn auxiliary_branch(s: &mut Session, x: Var, steps: usize, layers: usize, heads: usize, prefix: &str) -> Result<Var> {
    let mut y = affine(s, x, &name(prefix, "proj"))?;
    for l in 0..layers {
        y = encoder_block(s, y, steps, heads, &format!("{prefix}.enc{l}"))?;
    }
    Ok(y)
}

/// Batch normalization of primary + Σ auxiliaries.
pub fn residual_merge(s: &mut Session, primary: Var, aux: &[Var], prefix: &str) -> Result<Var> {
    let mut sum = primary;
    for &a in aux {
        sum = s.graph.add(sum, a)?;
    }
    batch_norm(s, sum, prefix)
}

pub fn register_attention_pool(store: &mut ParameterStore, prefix: &str, state: usize, attn: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.add_weight(&name(prefix, "w"), 2 * state, attn, rng)?;
    store.add_weight(&name(prefix, "v"), attn, 1, rng)
}

/// Scores ā_i = v·tanh([h_i; s₀]·W) from `states` (B·T × D) and `query` (B × D);
/// returns (context Σ a_i·values_i as B × D_v, weights a as B·T × 1).
pub fn attention_pool(s: &mut Session, states: Var, query: Var, values: Var, steps: usize, prefix: &str) -> Result<(Var, Var)> {
    let (n, d) = s.graph.shape(states);
    if s.graph.shape(query) != (n / steps.max(1), d) || s.graph.shape(values).0 != n {
        return Err(Error::Shape(format!(
            "attention pool: states {:?}, query {:?}, values {:?}",
            s.graph.shape(states),
            s.graph.shape(query),
            s.graph.shape(values)
        )));
    }
    let w = s.param(&name(prefix, "w"))?;
    let v = s.param(&name(prefix, "v"))?;
    let q = s.graph.gather_rows(query, (0..n).map(|r| r / steps).collect())?;
    let hq = s.graph.concat_cols(&[states, q])?;
    let proj = s.graph.matmul(hq, w)?;
    let act = s.graph.tanh(proj)?;
    let scores = s.graph.matmul(act, v)?;
    let weights = s.graph.segment_softmax(scores, steps)?;
    let ctx = s.graph.segment_weighted_sum(weights, values, steps)?;
    Ok((ctx, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_lstm_cell() {
        let mut store = ParameterStore::new();
        store.add("l.w", (3, 4), Init::Zeros, true, &mut rng()).unwrap();
        store.add("l.b", (1, 4), Init::Zeros, true, &mut rng()).unwrap();
        let mut s = Session::new(&store, false, 0);
        let x = s.graph.constant(array![[0.3, -2.0]]).unwrap();
        let h = s.graph.constant(array![[0.7]]).unwrap();
        let c = s.graph.constant(array![[1.5]]).unwrap();
        let (h1, c1) = lstm_cell(&mut s, x, h, c, "l").unwrap();
        assert!((s.graph.value(c1)[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((s.graph.value(h1)[[0, 0]] - 0.5 * 0.75f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_modes() {
        let mut store = ParameterStore::new();
        register_batch_norm(&mut store, "bn", 2, &mut rng()).unwrap();
        let mut s = Session::new(&store, true, 0);
        let x = s.graph.constant(array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let y = batch_norm(&mut s, x, "bn").unwrap();
        let yv = s.graph.value(y).clone();
        assert!(yv.column(0).mean().unwrap().abs() < 1e-12);
        assert!(yv.column(1).iter().all(|v| *v == 0.0));
        let updates = s.take_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1[[0, 0]] - 0.3).abs() < 1e-12);

        let mut s = Session::new(&store, true, 0);
        let one = s.graph.constant(array![[1.0, 2.0]]).unwrap();
        assert!(matches!(batch_norm(&mut s, one, "bn"), Err(Error::Batch(_))));
        let mut s = Session::new(&store, false, 0);
        let one = s.graph.constant(array![[1.0, 2.0]]).unwrap();
        let y = batch_norm(&mut s, one, "bn").unwrap();
        assert!((s.graph.value(y)[[0, 1]] - 2.0 / (1.0 + NORM_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn encoder_rejects_indivisible_heads() {
        let mut store = ParameterStore::new();
        assert!(matches!(
            register_encoder_block(&mut store, "e", 5, 2, &mut rng()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn lstm_sequence_reordering() {
        let mut store = ParameterStore::new();
        register_lstm(&mut store, "l", 2, 3, &mut rng()).unwrap();
        let x = Array2::from_shape_fn((8, 2), |(i, j)| ((i * 2 + j) as f64 * 0.37).sin());
        let mut s = Session::new(&store, false, 0);
        let xv = s.graph.constant(x.clone()).unwrap();
        let (seq, last) = lstm(&mut s, xv, 4, "l", false, 0.0).unwrap();
        let seq = s.graph.value(seq).clone();
        let last = s.graph.value(last).clone();
        // Sample 1 alone must give the same outputs as rows 4..8 of the batch.
        let mut s1 = Session::new(&store, false, 0);
        let x1 = s1.graph.constant(x.slice(ndarray::s![4..8, ..]).to_owned()).unwrap();
        let (seq1, _) = lstm(&mut s1, x1, 4, "l", false, 0.0).unwrap();
        assert_eq!(s1.graph.value(seq1), &seq.slice(ndarray::s![4..8, ..]));
        assert_eq!(last.row(1), seq.row(7));
    }
}
