//! Dense Householder QR for the small least-squares systems in the factor model.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Relative size of a diagonal of R below which the column is declared dependent.
const RANK_RTOL: f64 = 1e-10;

/// Thin QR factorization `a = q · r` with `q` (n × p) orthonormal and `r` (p × p) upper triangular.
pub(crate) struct Qr {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
}

/// Factorizes `a` (n × p, n ≥ p). Fails with the names of nearly dependent columns.
pub(crate) fn qr(a: &Array2<f64>, names: &[String]) -> Result<Qr> {
    let (n, p) = a.dim();
    if n < p {
        return Err(Error::Regression {
            columns: vec![format!("{p} columns but only {n} observations")],
        });
    }
    let col_norms: Vec<f64> = (0..p)
        .map(|j| a.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut dependent = Vec::new();
    for k in 0..p {
        let norm: f64 = (k..n).map(|i| r[[i, k]] * r[[i, k]]).sum::<f64>().sqrt();
        let scale = col_norms[k].max(f64::MIN_POSITIVE);
        if norm <= RANK_RTOL * scale || col_norms[k] == 0.0 {
            dependent.push(names.get(k).cloned().unwrap_or_else(|| format!("column {k}")));
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if r[[k, k]] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..p {
                let s: f64 = (k..n).map(|i| v[i - k] * r[[i, j]]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..n {
                    r[[i, j]] -= s * v[i - k];
                }
            }
        }
        reflectors.push(v);
    }
    if !dependent.is_empty() {
        return Err(Error::Regression { columns: dependent });
    }
    // Accumulate Q = H_0 H_1 ... H_{p-1} applied to the first p unit vectors.
    let mut q = Array2::zeros((n, p));
    for j in 0..p {
        q[[j, j]] = 1.0;
    }
    for k in (0..p).rev() {
        let v = &reflectors[k];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..p {
            let s: f64 = (k..n).map(|i| v[i - k] * q[[i, j]]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..n {
                q[[i, j]] -= s * v[i - k];
            }
        }
    }
    let r = Array2::from_shape_fn((p, p), |(i, j)| if j >= i { r[[i, j]] } else { 0.0 });
    Ok(Qr { q, r })
}

/// Solves `r x = b` for upper-triangular `r`.
pub(crate) fn solve_upper(r: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let p = r.nrows();
    let mut x = Array1::zeros(p);
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| r[[i, j]] * x[j]).sum();
        x[i] = (b[i] - s) / r[[i, i]];
    }
    x
}

/// Minimizes Σ w_i (y_i − a_i·x)². Returns coefficients.
pub(crate) fn weighted_lstsq(
    a: &Array2<f64>,
    y: &[f64],
    weights: &[f64],
    names: &[String],
) -> Result<Array1<f64>> {
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled = Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * sw[i]);
    let ys: Array1<f64> = y.iter().zip(&sw).map(|(v, s)| v * s).collect();
    let Qr { q, r } = qr(&scaled, names)?;
    Ok(solve_upper(&r, &q.t().dot(&ys)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_reconstructs() {
        let a = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin() + (j as f64));
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let Qr { q, r } = qr(&a, &names).unwrap();
        let back = q.dot(&r);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let qtq = q.t().dot(&q);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dependent_columns_are_named() {
        let a = Array2::from_shape_fn((5, 3), |(i, j)| if j == 2 { 2.0 * i as f64 } else { (i + j) as f64 });
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        match qr(&a, &names) {
            Err(Error::Regression { columns }) => assert_eq!(columns, vec!["c".to_string()]),
            other => panic!("expected rank deficiency, got {:?}", other.map(|_| ())),
        }
    }
}
