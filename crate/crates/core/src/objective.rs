//! Invariance / redundancy-reduction objective.
//!
//! The cross-correlation matrix between twin embedding batches is pushed
//! toward the identity: its diagonal toward 1 (distortion invariance) and
//! its off-diagonal toward 0 (non-redundant embedding dimensions). Also
//! includes scalar cross-covariance/correlation of lagged time series, the
//! classical signal-processing quantities the batch objective mirrors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Array, Graph, Tensor};

/// Default trade-off weight between the invariance and redundancy terms.
pub const DEFAULT_LAMBDA: f64 = 0.0051;

/// Loss components of one step. `total = invariance + lambda * redundancy`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub redundancy: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Batch cross-correlation between twin embeddings:
/// `C[i, j] = sum_b A[b,i] B[b,j] / (||A[:,i]|| ||B[:,j]||)`.
///
/// Columns with zero norm are an error: they signal collapsed embeddings
/// and should be loud, not damped by an epsilon.
pub fn cross_correlation(g: &mut Graph, za: Tensor, zb: Tensor) -> Result<Tensor> {
    let sa = g.shape(za).to_vec();
    let sb = g.shape(zb).to_vec();
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch {
            context: "cross_correlation",
            expected: "two equal [b, d] batches".into(),
            actual: format!("{sa:?} vs {sb:?}"),
        });
    }
    let (b, d) = (sa[0], sa[1]);
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross_correlation needs batch size >= 2, got {b}"
        )));
    }
    let a_data = g.value(za).data();
    let b_data = g.value(zb).data();

    let col_norms = |data: &[f64], side: &'static str| -> Result<Vec<f64>> {
        let mut norms = vec![0.0; d];
        for row in 0..b {
            for (n, &v) in norms.iter_mut().zip(&data[row * d..(row + 1) * d]) {
                *n += v * v;
            }
        }
        for (i, n) in norms.iter_mut().enumerate() {
            if *n == 0.0 {
                return Err(Error::DegenerateColumn { side, index: i });
            }
            *n = n.sqrt();
        }
        Ok(norms)
    };
    let norms_a = col_norms(a_data, "A")?;
    let norms_b = col_norms(b_data, "B")?;

    let mut c = vec![0.0; d * d];
    kernels::matmul_at(a_data, b_data, b, d, d, &mut c);
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] /= norms_a[i] * norms_b[j];
        }
    }
    let c_values = c.clone();
    let value = Array::from_vec(&[d, d], c)?;
    let req = g.requires_grad(za) || g.requires_grad(zb);
    g.push_op(
        value,
        req,
        Box::new(move |grad, vals, sink| {
            let a = vals.get(za).data();
            let bm = vals.get(zb).data();
            // m[i,j] = grad[i,j] / (|a_i| |b_j|)
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = grad[i * d + j] / (norms_a[i] * norms_b[j]);
                }
            }
            // row/column contractions of grad with c itself
            let mut row_gc = vec![0.0; d];
            let mut col_gc = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    let gc = grad[i * d + j] * c_values[i * d + j];
                    row_gc[i] += gc;
                    col_gc[j] += gc;
                }
            }
            // dA[b,i] = sum_j m[i,j] B[b,j] - A[b,i] * row_gc[i] / |a_i|^2
            let mut da = vec![0.0; b * d];
            kernels::matmul_bt(bm, &m, b, d, d, &mut da);
            for row in 0..b {
                for i in 0..d {
                    da[row * d + i] -= a[row * d + i] * row_gc[i] / (norms_a[i] * norms_a[i]);
                }
            }
            sink.accumulate(za, &da);
            // dB[b,j] = sum_i m[i,j] A[b,i] - B[b,j] * col_gc[j] / |b_j|^2
            let mut db = vec![0.0; b * d];
            kernels::matmul(a, &m, b, d, d, &mut db);
            for row in 0..b {
                for j in 0..d {
                    db[row * d + j] -= bm[row * d + j] * col_gc[j] / (norms_b[j] * norms_b[j]);
                }
            }
            sink.accumulate(zb, &db);
        }),
        "cross_correlation",
    )
}

/// Scalar objective on a cross-correlation matrix:
/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_loss(g: &mut Graph, c: Tensor, lambda: f64) -> Result<(Tensor, LossBreakdown)> {
    let cs = g.shape(c).to_vec();
    if cs.len() != 2 || cs[0] != cs[1] {
        return Err(Error::ShapeMismatch {
            context: "barlow_loss",
            expected: "square matrix".into(),
            actual: format!("{cs:?}"),
        });
    }
    let d = cs[0];
    let data = g.value(c).data();
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = data[i * d + j];
            if i == j {
                invariance += (1.0 - v) * (1.0 - v);
            } else {
                redundancy += v * v;
            }
        }
    }
    let total = invariance + lambda * redundancy;
    let breakdown = LossBreakdown {
        invariance,
        redundancy,
        lambda,
        total,
    };
    let req = g.requires_grad(c);
    let loss = g.push_op(
        Array::scalar(total),
        req,
        Box::new(move |grad, vals, sink| {
            let cv = vals.get(c).data();
            let scale = grad[0];
            let mut dc = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let v = cv[i * d + j];
                    dc[i * d + j] = if i == j {
                        scale * -2.0 * (1.0 - v)
                    } else {
                        scale * 2.0 * lambda * v
                    };
                }
            }
            sink.accumulate(c, &dc);
        }),
        "barlow_loss",
    )?;
    Ok((loss, breakdown))
}

// ── lagged time-series reference quantities ─────────────────────────

/// Cross-covariance of two equal-length series at integer lag `tau`:
/// `(1/(N-1)) * sum_t (x[t - tau] - mean_x)(y[t] - mean_y)`, truncating the
/// sum to indices where both samples exist while keeping the 1/(N-1)
/// normalizer.
pub fn signal_cross_covariance(x: &[f64], y: &[f64], tau: i64) -> Result<f64> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            context: "signal_cross_covariance",
            expected: format!("{n} samples"),
            actual: format!("{}", y.len()),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "cross-covariance needs at least 2 samples".into(),
        ));
    }
    if tau.unsigned_abs() as usize >= n {
        return Err(Error::InvalidArgument(format!(
            "lag {tau} out of range for {n} samples"
        )));
    }
    let mean_x: f64 = x.iter().sum::<f64>() / n as f64;
    let mean_y: f64 = y.iter().sum::<f64>() / n as f64;
    let mut acc = 0.0;
    for t in 0..n as i64 {
        let shifted = t - tau;
        if shifted < 0 || shifted >= n as i64 {
            continue;
        }
        acc += (x[shifted as usize] - mean_x) * (y[t as usize] - mean_y);
    }
    Ok(acc / (n as f64 - 1.0))
}

/// Normalized cross-correlation at lag `tau`, in [-1, 1]:
/// `cov_xy(tau) / sqrt(cov_xx(0) cov_yy(0))`. Constant series are an error.
pub fn signal_cross_correlation(x: &[f64], y: &[f64], tau: i64) -> Result<f64> {
    let var_x = signal_cross_covariance(x, x, 0)?;
    let var_y = signal_cross_covariance(y, y, 0)?;
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::Numerical(
            "cross-correlation undefined for a constant series".into(),
        ));
    }
    Ok(signal_cross_covariance(x, y, tau)? / (var_x * var_y).sqrt())
}
