//! Rolling time-series operators and the feature extraction layer.
//!
//! A data image of `n` input rows is swept by `seq_len` stride-`stride` windows of
//! length `d`. At every placement all `C(n, 2)` ordered input pairs go through
//! `ts_corr` and `ts_cov`, and every input goes through the four unary operators,
//! giving `2·C(n,2) + 4·n` columns (208 for the 13 canonical inputs).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market_data::{DataImage, FEATURE_NAMES};

/// Relative scale below which a window's standard deviation counts as zero.
const ZERO_VARIANCE_RTOL: f64 = 1e-12;

fn check_window(d: usize, min: usize) -> Result<()> {
    if d < min {
        Err(Error::Window(d))
    } else {
        Ok(())
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn negligible(sum_sq: f64, scale: f64, d: usize) -> bool {
    sum_sq <= d as f64 * (ZERO_VARIANCE_RTOL * scale).powi(2)
}

/// Sum of squared deviations and whether it is numerically zero.
fn centered_ss(x: &[f64]) -> (f64, f64, bool) {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (m, ss, negligible(ss, max_abs(x), x.len()))
}

pub fn ts_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths {} vs {}", x.len(), y.len())));
    }
    check_window(x.len(), 2)?;
    let (mx, sx, zx) = centered_ss(x);
    let (my, sy, zy) = centered_ss(y);
    if zx || zy {
        return Ok(0.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok((sxy / (sx.sqrt() * sy.sqrt())).clamp(-1.0, 1.0))
}

/// Sample covariance (divisor d - 1).
pub fn ts_cov(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths {} vs {}", x.len(), y.len())));
    }
    check_window(x.len(), 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / (x.len() - 1) as f64)
}

/// Sample standard deviation (divisor d - 1).
pub fn ts_stddev(x: &[f64]) -> Result<f64> {
    check_window(x.len(), 2)?;
    let (_, ss, zero) = centered_ss(x);
    Ok(if zero { 0.0 } else { (ss / (x.len() - 1) as f64).sqrt() })
}

/// mean / stddev, 0 when the window is constant.
pub fn ts_zscore(x: &[f64]) -> Result<f64> {
    check_window(x.len(), 2)?;
    let (m, ss, zero) = centered_ss(x);
    Ok(if zero {
        0.0
    } else {
        m / (ss / (x.len() - 1) as f64).sqrt()
    })
}

/// Endpoint return `x[d-1] / x[0] - 1`; the flag is set when `x[0] == 0` and 0 is returned.
pub fn ts_return_flagged(x: &[f64]) -> Result<(f64, bool)> {
    check_window(x.len(), 2)?;
    let first = x[0];
    if first == 0.0 {
        return Ok((0.0, true));
    }
    Ok((x[x.len() - 1] / first - 1.0, false))
}

pub fn ts_return(x: &[f64]) -> Result<f64> {
    ts_return_flagged(x).map(|(v, _)| v)
}

/// Linearly decaying weighted mean; the newest point has the largest weight.
pub fn ts_decaylinear(x: &[f64]) -> Result<f64> {
    check_window(x.len(), 1)?;
    let d = x.len();
    let norm = (d * (d + 1)) as f64 / 2.0;
    Ok(x
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1) as f64 * v)
        .sum::<f64>()
        / norm)
}

/// Extraction operators, in registry block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Corr,
    Cov,
    Stddev,
    Zscore,
    Return,
    DecayLinear,
}

impl Operator {
    pub const ALL: [Operator; 6] = [
        Operator::Corr,
        Operator::Cov,
        Operator::Stddev,
        Operator::Zscore,
        Operator::Return,
        Operator::DecayLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Corr => "ts_corr",
            Operator::Cov => "ts_cov",
            Operator::Stddev => "ts_stddev",
            Operator::Zscore => "ts_zscore",
            Operator::Return => "ts_return",
            Operator::DecayLinear => "ts_decaylinear",
        }
    }

    pub fn is_pairwise(self) -> bool {
        matches!(self, Operator::Corr | Operator::Cov)
    }
}

/// What one extracted column computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnSpec {
    Pair { op: Operator, i: usize, j: usize },
    Single { op: Operator, i: usize },
}

impl ColumnSpec {
    pub fn op(&self) -> Operator {
        match *self {
            ColumnSpec::Pair { op, .. } | ColumnSpec::Single { op, .. } => op,
        }
    }

    /// Input rows the column reads.
    pub fn inputs(&self) -> (usize, Option<usize>) {
        match *self {
            ColumnSpec::Pair { i, j, .. } => (i, Some(j)),
            ColumnSpec::Single { i, .. } => (i, None),
        }
    }

    pub fn label(&self, input_names: &[&str]) -> String {
        let name = |i: usize| input_names.get(i).map_or_else(|| format!("x{i}"), |s| s.to_string());
        match *self {
            ColumnSpec::Pair { op, i, j } => format!("{}({},{})", op.name(), name(i), name(j)),
            ColumnSpec::Single { op, i } => format!("{}({})", op.name(), name(i)),
        }
    }
}

/// Column registry for `n_inputs` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    n_inputs: usize,
    columns: Vec<ColumnSpec>,
}

impl Registry {
    pub fn new(n_inputs: usize) -> Self {
        let mut columns = Vec::with_capacity(registry_width(n_inputs));
        for op in [Operator::Corr, Operator::Cov] {
            for i in 0..n_inputs {
                for j in i + 1..n_inputs {
                    columns.push(ColumnSpec::Pair { op, i, j });
                }
            }
        }
        for op in [
            Operator::Stddev,
            Operator::Zscore,
            Operator::Return,
            Operator::DecayLinear,
        ] {
            for i in 0..n_inputs {
                columns.push(ColumnSpec::Single { op, i });
            }
        }
        Registry { n_inputs, columns }
    }

    /// Registry over the 13 canonical inputs.
    pub fn canonical() -> Self {
        Registry::new(FEATURE_NAMES.len())
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> ColumnSpec {
        self.columns[idx]
    }

    pub fn labels(&self) -> Vec<String> {
        let names: Vec<&str> = if self.n_inputs == FEATURE_NAMES.len() {
            FEATURE_NAMES.to_vec()
        } else {
            Vec::new()
        };
        self.columns.iter().map(|c| c.label(&names)).collect()
    }

    /// SHA-256 over the ordered column labels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for label in self.labels() {
            h.update(label.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// 2·C(n,2) + 4·n.
pub fn registry_width(n_inputs: usize) -> usize {
    n_inputs * n_inputs.saturating_sub(1) + 4 * n_inputs
}

/// Window length `d`, extraction stride and number of time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub d: usize,
    pub stride: usize,
    pub seq_len: usize,
}

impl WindowSpec {
    /// Stride 1, 20 steps.
    pub fn new(d: usize) -> Self {
        WindowSpec {
            d,
            stride: 1,
            seq_len: 20,
        }
    }

    pub fn with_sequence(d: usize, seq_len: usize, stride: usize) -> Self {
        WindowSpec { d, stride, seq_len }
    }

    /// Number of image columns needed: d + (seq_len - 1) · stride.
    pub fn image_len(&self) -> usize {
        self.d + (self.seq_len - 1) * self.stride
    }

    pub fn validate(&self) -> Result<()> {
        check_window(self.d, 2)?;
        if self.stride == 0 || self.seq_len == 0 {
            return Err(Error::Param(format!(
                "stride and seq_len must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d={} stride={} seq_len={}", self.d, self.stride, self.seq_len)
    }
}

/// seq_len × columns matrix of extracted features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub window: WindowSpec,
    pub n_inputs: usize,
    /// Registry indices of the columns present, in order.
    pub columns: Vec<usize>,
    pub values: Array2<f64>,
    /// Cells where `ts_return` hit a zero base.
    pub flagged: usize,
}

impl FeatureImage {
    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_full(&self) -> bool {
        self.columns.len() == registry_width(self.n_inputs)
            && self.columns.iter().enumerate().all(|(a, &b)| a == b)
    }
}

/// Extracts every registry column.
pub fn extract_feature_image(img: &DataImage, spec: &WindowSpec) -> Result<FeatureImage> {
    let all: Vec<usize> = (0..registry_width(img.n_inputs())).collect();
    extract_columns(img, spec, &all)
}

/// Extracts only the requested registry columns; skipped columns cost nothing.
pub fn extract_columns(img: &DataImage, spec: &WindowSpec, columns: &[usize]) -> Result<FeatureImage> {
    spec.validate()?;
    let n = img.n_inputs();
    let k = spec.image_len();
    if img.len() != k {
        return Err(Error::Shape(format!(
            "image has {} columns, window {spec} needs {k}",
            img.len()
        )));
    }
    let registry = Registry::new(n);
    if let Some(&bad) = columns.iter().find(|&&c| c >= registry.len()) {
        return Err(Error::Shape(format!(
            "column {bad} outside registry of width {}",
            registry.len()
        )));
    }
    let specs: Vec<ColumnSpec> = columns.iter().map(|&c| registry.column(c)).collect();

    // Rows that need centered statistics.
    let mut need_center = vec![false; n];
    for c in &specs {
        if matches!(c.op(), Operator::Corr | Operator::Cov | Operator::Stddev | Operator::Zscore) {
            let (i, j) = c.inputs();
            need_center[i] = true;
            if let Some(j) = j {
                need_center[j] = true;
            }
        }
    }

    let d = spec.d;
    let norm = (d * (d + 1)) as f64 / 2.0;
    let mut values = Array2::zeros((spec.seq_len, specs.len()));
    let mut flagged = 0;
    let mut centered = vec![0.0; n * d];
    let mut stats = vec![(0.0, 0.0, false); n]; // (mean, sum of squares, zero variance)
    let rows: Vec<Vec<f64>> = (0..n).map(|r| img.values.row(r).to_vec()).collect();

    for step in 0..spec.seq_len {
        let end = d - 1 + step * spec.stride;
        let start = end + 1 - d;
        for r in 0..n {
            if !need_center[r] {
                continue;
            }
            let w = &rows[r][start..=end];
            let m = mean(w);
            let out = &mut centered[r * d..(r + 1) * d];
            let mut ss = 0.0;
            for (o, v) in out.iter_mut().zip(w) {
                *o = v - m;
                ss += *o * *o;
            }
            stats[r] = (m, ss, negligible(ss, max_abs(w), d));
        }
        for (col, c) in specs.iter().enumerate() {
            let v = match *c {
                ColumnSpec::Pair { op, i, j } => {
                    let ci = &centered[i * d..(i + 1) * d];
                    let cj = &centered[j * d..(j + 1) * d];
                    let sxy: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                    match op {
                        Operator::Cov => sxy / (d - 1) as f64,
                        _ => {
                            let (_, si, zi) = stats[i];
                            let (_, sj, zj) = stats[j];
                            if zi || zj {
                                0.0
                            } else {
                                (sxy / (si.sqrt() * sj.sqrt())).clamp(-1.0, 1.0)
                            }
                        }
                    }
                }
                ColumnSpec::Single { op, i } => {
                    let w = &rows[i][start..=end];
                    match op {
                        Operator::Stddev => {
                            let (_, ss, zero) = stats[i];
                            if zero {
                                0.0
                            } else {
                                (ss / (d - 1) as f64).sqrt()
                            }
                        }
                        Operator::Zscore => {
                            let (m, ss, zero) = stats[i];
                            if zero {
                                0.0
                            } else {
                                m / (ss / (d - 1) as f64).sqrt()
                            }
                        }
                        Operator::Return => {
                            if w[0] == 0.0 {
                                flagged += 1;
                                0.0
                            } else {
                                w[d - 1] / w[0] - 1.0
                            }
                        }
                        _ => {
                            w.iter()
                                .enumerate()
                                .map(|(a, v)| (a + 1) as f64 * v)
                                .sum::<f64>()
                                / norm
                        }
                    }
                }
            };
            values[[step, col]] = v;
        }
    }
    Ok(FeatureImage {
        window: *spec,
        n_inputs: n,
        columns: columns.to_vec(),
        values,
        flagged,
    })
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    shape: [usize; 3],
    window: WindowSpec,
    n_inputs: usize,
    columns: Vec<usize>,
    labels: Vec<String>,
    registry_hash: String,
}

/// Writes a batch as a row-major float64 blob plus a JSON sidecar at `<path>.json`.
pub fn write_feature_batch(path: &Path, images: &[FeatureImage]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Batch("cannot write an empty batch".into()))?;
    for img in images {
        if img.window != first.window || img.columns != first.columns {
            return Err(Error::Shape("batch images disagree on window or columns".into()));
        }
    }
    let registry = Registry::new(first.n_inputs);
    let labels = registry.labels();
    let header = BatchHeader {
        shape: [images.len(), first.window.seq_len, first.columns.len()],
        window: first.window,
        n_inputs: first.n_inputs,
        columns: first.columns.clone(),
        labels: first
            .columns
            .iter()
            .map(|&c| labels.get(c).cloned().unwrap_or_default())
            .collect(),
        registry_hash: registry.hash(),
    };
    let mut blob = Vec::with_capacity(images.len() * first.values.len() * 8);
    for img in images {
        for v in img.values.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_feature_batch(path: &Path) -> Result<Vec<FeatureImage>> {
    let side = sidecar(path);
    let header: BatchHeader = serde_json::from_slice(
        &std::fs::read(&side).map_err(|e| Error::io(&side, e))?,
    )?;
    if Registry::new(header.n_inputs).hash() != header.registry_hash {
        return Err(Error::Mask("batch registry hash mismatch".into()));
    }
    let mut blob = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(path, e))?;
    let [n, t, c] = header.shape;
    if blob.len() != n * t * c * 8 {
        return Err(Error::Shape(format!(
            "blob has {} bytes, header implies {}",
            blob.len(),
            n * t * c * 8
        )));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    floats
        .chunks_exact(t * c)
        .map(|chunk| {
            Ok(FeatureImage {
                window: header.window,
                n_inputs: header.n_inputs,
                columns: header.columns.clone(),
                values: Array2::from_shape_vec((t, c), chunk.to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?,
                flagged: 0,
            })
        })
        .collect()
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
