//! Kernel alignment between two feature matrices with equal row counts.
//!
//! `KA(X, Y) = ||YᵀX||²_F / (||XᵀX||_F · ||YᵀY||_F)`, uncentered. Feature
//! widths may differ. Two evaluation routes are provided: the direct
//! `p × p` form and the `n × n` Gram form using
//! `||YᵀX||²_F = <vec(XXᵀ), vec(YYᵀ)>`. All accumulation is in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// `n × p` row-major feature matrix; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub layer_id: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, layer_id: impl Into<String>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature matrix data length");
        assert!(rows >= 1 && cols >= 1, "feature matrix must be non-empty");
        FeatureMatrix {
            rows,
            cols,
            data,
            layer_id: layer_id.into(),
        }
    }

    /// Flattens each sample in (channel, row, column) order.
    pub fn from_tensor(t: &Tensor4, layer_id: impl Into<String>) -> Self {
        let [n, c, h, w] = t.shape();
        FeatureMatrix::new(n, c * h * w, t.data().to_vec(), layer_id)
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Dense row-major f64 view used by the numeric routines.
#[derive(Debug, Clone, Copy)]
pub struct Mat<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> Mat<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `XXᵀ`, n × n.
pub fn gram(x: Mat<'_>) -> Vec<f64> {
    let n = x.rows;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(x.row(i), x.row(j));
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// `AᵀB` for `A: n × p`, `B: n × q`; result `p × q`.
fn cross(a: Mat<'_>, b: Mat<'_>) -> Vec<f64> {
    let (p, q) = (a.cols, b.cols);
    let mut out = vec![0.0; p * q];
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[i * q..(i + 1) * q];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check(x: Mat<'_>, y: Mat<'_>) -> Result<()> {
    if x.rows != y.rows {
        return Err(Error::BatchMismatch {
            left: x.rows,
            right: y.rows,
        });
    }
    Ok(())
}

fn ratio(cross_sq: f64, xx: f64, yy: f64) -> Result<f64> {
    if xx == 0.0 {
        return Err(Error::DegenerateInput("||XᵀX||_F is zero"));
    }
    if yy == 0.0 {
        return Err(Error::DegenerateInput("||YᵀY||_F is zero"));
    }
    Ok(cross_sq / (xx * yy))
}

/// Direct form: builds `YᵀX`, `XᵀX` and `YᵀY`.
pub fn ka_naive_f64(x: Mat<'_>, y: Mat<'_>) -> Result<f64> {
    check(x, y)?;
    let yx = sq_norm(&cross(y, x));
    let xx = sq_norm(&cross(x, x)).sqrt();
    let yy = sq_norm(&cross(y, y)).sqrt();
    ratio(yx, xx, yy)
}

/// Gram form: only `n × n` matrices are formed.
pub fn ka_gram_f64(x: Mat<'_>, y: Mat<'_>) -> Result<f64> {
    check(x, y)?;
    let kx = gram(x);
    let ky = gram(y);
    ratio(dot(&kx, &ky), sq_norm(&kx).sqrt(), sq_norm(&ky).sqrt())
}

/// Picks the cheaper route: Gram when `n² < p1 · p2`.
pub fn ka_f64(x: Mat<'_>, y: Mat<'_>) -> Result<f64> {
    if x.rows * x.rows < x.cols * y.cols {
        ka_gram_f64(x, y)
    } else {
        ka_naive_f64(x, y)
    }
}

/// Gradients of KA with respect to both inputs, plus the KA value.
///
/// `∂KA/∂X = 2·K_Y·X / (a·b) − 2·KA·K_X·X / a²` with `K_X = XXᵀ`,
/// `a = ||K_X||_F`, `b = ||K_Y||_F`; symmetric for Y.
pub fn ka_grad_f64(x: Mat<'_>, y: Mat<'_>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check(x, y)?;
    let n = x.rows;
    let kx = gram(x);
    let ky = gram(y);
    let a = sq_norm(&kx).sqrt();
    let b = sq_norm(&ky).sqrt();
    let ka = ratio(dot(&kx, &ky), a, b)?;
    // K·M for symmetric n×n K and n×p M
    let kmul = |k: &[f64], m: Mat<'_>| -> Vec<f64> {
        let mut out = vec![0.0; n * m.cols];
        for i in 0..n {
            let o = &mut out[i * m.cols..(i + 1) * m.cols];
            for j in 0..n {
                let kij = k[i * n + j];
                if kij == 0.0 {
                    continue;
                }
                for (ov, &mv) in o.iter_mut().zip(m.row(j)) {
                    *ov += kij * mv;
                }
            }
        }
        out
    };
    let grad = |k_other: &[f64], k_self: &[f64], m: Mat<'_>, own: f64| -> Vec<f64> {
        let c1 = 2.0 / (a * b);
        let c2 = 2.0 * ka / (own * own);
        kmul(k_other, m)
            .into_iter()
            .zip(kmul(k_self, m))
            .map(|(u, v)| c1 * u - c2 * v)
            .collect()
    };
    let gx = grad(&ky, &kx, x, a);
    let gy = grad(&kx, &ky, y, b);
    Ok((ka, gx, gy))
}

/// Subtracts each column's mean. Only used by the centered variant.
pub fn center_columns(m: Mat<'_>) -> Vec<f64> {
    let mut out = m.data.to_vec();
    for c in 0..m.cols {
        let mean = (0..m.rows).map(|r| m.data[r * m.cols + c]).sum::<f64>() / m.rows as f64;
        for r in 0..m.rows {
            out[r * m.cols + c] -= mean;
        }
    }
    out
}

fn with_mats<T>(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    f: impl FnOnce(Mat<'_>, Mat<'_>) -> Result<T>,
) -> Result<T> {
    let xd = x.to_f64();
    let yd = y.to_f64();
    f(Mat::new(x.rows, x.cols, &xd), Mat::new(y.rows, y.cols, &yd))
}

/// Uncentered kernel alignment in `[0, 1]`.
pub fn ka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f32> {
    with_mats(x, y, |x, y| ka_naive_f64(x, y).map(|v| v as f32))
}

/// Same value as [`ka`], through the Gram identity.
pub fn ka_gram(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f32> {
    with_mats(x, y, |x, y| ka_gram_f64(x, y).map(|v| v as f32))
}

/// Kernel alignment with column centering applied first. Not used for
/// distillation; kept for ablations.
pub fn ka_centered(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f32> {
    with_mats(x, y, |x, y| {
        let xc = center_columns(x);
        let yc = center_columns(y);
        ka_f64(Mat::new(x.rows, x.cols, &xc), Mat::new(y.rows, y.cols, &yc)).map(|v| v as f32)
    })
}

/// Gradients of [`ka`] with respect to `x` and `y`, as f32 matrices shaped
/// like the inputs.
pub fn ka_grad(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<(Vec<f32>, Vec<f32>)> {
    with_mats(x, y, |x, y| {
        let (_, gx, gy) = ka_grad_f64(x, y)?;
        Ok((
            gx.into_iter().map(|v| v as f32).collect(),
            gy.into_iter().map(|v| v as f32).collect(),
        ))
    })
}
