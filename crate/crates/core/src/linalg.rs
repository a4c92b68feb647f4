//! Small dense linear algebra at 64-bit: one-sided Jacobi SVD and
//! regularized canonical correlation analysis. Everything here operates on
//! flat row-major `Vec<f64>` matrices; sizes are tiny (at most a few
//! hundred rows) so simplicity and determinism win over blocking.

use crate::error::{Error, Result};
use crate::tensor::matmul_nn;

/// Row-major m x n matrix of f64.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_nn(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
        );
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Subtract the column mean from every column, in place.
    pub fn center_columns(&mut self) {
        for j in 0..self.cols {
            let mean: f64 = (0..self.rows).map(|i| self.get(i, j)).sum::<f64>() / self.rows as f64;
            for i in 0..self.rows {
                self.data[i * self.cols + j] -= mean;
            }
        }
    }
}

/// Result of a singular value decomposition A = U * diag(s) * Vt.
pub struct Svd {
    /// m x r with orthonormal columns, r = min(m, n).
    pub u: Mat,
    /// Nonincreasing, nonnegative singular values.
    pub s: Vec<f64>,
    /// r x n with orthonormal rows.
    pub vt: Mat,
}

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-14;

/// One-sided Jacobi SVD. Iteratively orthogonalizes column pairs; errors if
/// the sweep cap is reached before convergence.
pub fn svd(a: &Mat) -> Result<Svd> {
    for &v in &a.data {
        if !v.is_finite() {
            return Err(Error::Numeric("svd: non-finite entry".into()));
        }
    }
    if a.rows < a.cols {
        // Work on the transpose and swap factors.
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    let (m, n) = (a.rows, a.cols);
    let mut g = a.clone();
    let mut v = Mat::eye(n);
    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let gp = g.get(i, p);
                    let gq = g.get(i, q);
                    app += gp * gp;
                    aqq += gq * gq;
                    apq += gp * gq;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let gp = g.get(i, p);
                    let gq = g.get(i, q);
                    g.set(i, p, c * gp - s * gq);
                    g.set(i, q, s * gp + c * gq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd: Jacobi sweeps did not converge within {JACOBI_MAX_SWEEPS}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| g.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Mat::zeros(m, n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Mat::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sv = norms[j];
        s.push(sv);
        if sv > 0.0 {
            for i in 0..m {
                u.set(i, k, g.get(i, j) / sv);
            }
        }
        for i in 0..n {
            vt.set(k, i, v.get(i, j));
        }
    }
    Ok(Svd { u, s, vt })
}

/// Inverse square root of a symmetric positive definite matrix.
fn inv_sqrt_sym(s: &Mat) -> Result<Mat> {
    let dec = svd(s)?;
    let n = s.rows;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    for &sv in &dec.s {
        if sv <= 0.0 || sv < smax * 1e-14 {
            return Err(Error::Numeric(
                "cca: covariance rank deficient beyond regularization".into(),
            ));
        }
    }
    // S^(-1/2) = V diag(1/sqrt(s)) Vt  (U == V up to sign for SPD input).
    let mut scaled = Mat::zeros(n, n);
    for k in 0..n {
        let f = 1.0 / dec.s[k].sqrt();
        for j in 0..n {
            scaled.set(k, j, dec.vt.get(k, j) * f);
        }
    }
    Ok(dec.vt.transpose().matmul(&scaled))
}

/// Canonical correlation analysis between column-centered views of X and Y.
pub struct Cca {
    /// top_k x p projection for X.
    pub wx: Mat,
    /// top_k x q projection for Y.
    pub wy: Mat,
    /// Canonical correlations, nonincreasing, clamped to [0, 1].
    pub correlations: Vec<f64>,
}

/// Relative ridge added to both covariance matrices before inversion.
pub const CCA_RIDGE_REL: f64 = 1e-8;

pub fn cca(x: &Mat, y: &Mat, top_k: usize) -> Result<Cca> {
    let s = x.rows;
    if y.rows != s {
        return Err(Error::Shape(format!(
            "cca: sample counts disagree, {} vs {}",
            s, y.rows
        )));
    }
    if s <= x.cols.max(y.cols) {
        return Err(Error::Shape(format!(
            "cca: need more samples ({}) than dimensions ({}, {})",
            s, x.cols, y.cols
        )));
    }
    let mut xc = x.clone();
    let mut yc = y.clone();
    xc.center_columns();
    yc.center_columns();

    let denom = (s - 1) as f64;
    let mut sxx = xc.transpose().matmul(&xc);
    let mut syy = yc.transpose().matmul(&yc);
    let mut sxy = xc.transpose().matmul(&yc);
    for v in sxx.data.iter_mut() {
        *v /= denom;
    }
    for v in syy.data.iter_mut() {
        *v /= denom;
    }
    for v in sxy.data.iter_mut() {
        *v /= denom;
    }
    let trace_x: f64 = (0..sxx.rows).map(|i| sxx.get(i, i)).sum();
    let trace_y: f64 = (0..syy.rows).map(|i| syy.get(i, i)).sum();
    for i in 0..sxx.rows {
        let d = sxx.get(i, i) + CCA_RIDGE_REL * trace_x.max(f64::MIN_POSITIVE);
        sxx.set(i, i, d);
    }
    for i in 0..syy.rows {
        let d = syy.get(i, i) + CCA_RIDGE_REL * trace_y.max(f64::MIN_POSITIVE);
        syy.set(i, i, d);
    }

    let sxx_ih = inv_sqrt_sym(&sxx)?;
    let syy_ih = inv_sqrt_sym(&syy)?;
    let t = sxx_ih.matmul(&sxy).matmul(&syy_ih);
    let dec = svd(&t)?;

    let k = top_k.min(dec.s.len());
    let correlations: Vec<f64> = dec.s[..k].iter().map(|&c| c.clamp(0.0, 1.0)).collect();
    // Wx = U[:, :k]^T * Sxx^(-1/2); rows are canonical directions.
    let mut ut = Mat::zeros(k, x.cols);
    for r in 0..k {
        for j in 0..x.cols {
            ut.set(r, j, dec.u.get(j, r));
        }
    }
    let mut vk = Mat::zeros(k, y.cols);
    for r in 0..k {
        for j in 0..y.cols {
            vk.set(r, j, dec.vt.get(r, j));
        }
    }
    let wx = ut.matmul(&sxx_ih);
    let wy = vk.matmul(&syy_ih);
    Ok(Cca {
        wx,
        wy,
        correlations,
    })
}

/// Keep the smallest set of leading singular directions explaining
/// `var_frac` of the variance; returns the reduced data (samples x k).
pub fn svd_reduce(x: &Mat, var_frac: f64) -> Result<Mat> {
    let mut xc = x.clone();
    xc.center_columns();
    let dec = svd(&xc)?;
    let total: f64 = dec.s.iter().map(|s| s * s).sum();
    let mut k = 0;
    let mut acc = 0.0;
    while k < dec.s.len() {
        acc += dec.s[k] * dec.s[k];
        k += 1;
        if total == 0.0 || acc >= var_frac * total {
            break;
        }
    }
    // X_reduced = U_k * diag(s_k) == Xc * V_k
    let mut out = Mat::zeros(x.rows, k);
    for i in 0..x.rows {
        for j in 0..k {
            out.set(i, j, dec.u.get(i, j) * dec.s[j]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn svd_identity() {
        let dec = svd(&Mat::eye(3)).unwrap();
        for &s in &dec.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_diagonal() {
        let mut a = Mat::zeros(3, 3);
        a.set(0, 0, 3.0);
        a.set(1, 1, 2.0);
        a.set(2, 2, 1.0);
        let dec = svd(&a).unwrap();
        assert!((dec.s[0] - 3.0).abs() < 1e-12);
        assert!((dec.s[1] - 2.0).abs() < 1e-12);
        assert!((dec.s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_random_reconstruction_and_orthogonality() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut a = Mat::zeros(5, 4);
        for v in a.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let dec = svd(&a).unwrap();
        // reconstruction
        let mut us = dec.u.clone();
        for i in 0..us.rows {
            for j in 0..us.cols {
                us.data[i * us.cols + j] *= dec.s[j];
            }
        }
        let rec = us.matmul(&dec.vt);
        let mut diff = 0.0;
        for (x, y) in rec.data.iter().zip(&a.data) {
            diff += (x - y) * (x - y);
        }
        assert!(diff.sqrt() < 1e-8 * a.frobenius());
        // orthogonality U^T U = I, V V^T = I
        let utu = dec.u.transpose().matmul(&dec.u);
        let vvt = dec.vt.matmul(&dec.vt.transpose());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((utu.get(i, j) - want).abs() < 1e-8);
                assert!((vvt.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Mat::eye(2);
        a.set(0, 1, f64::NAN);
        assert!(svd(&a).is_err());
    }

    #[test]
    fn cca_self_correlation_is_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut x = Mat::zeros(12, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let c = cca(&x, &x, 1).unwrap();
        assert!((c.correlations[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cca_orthogonal_rotation_all_ones() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut x = Mat::zeros(20, 2);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let theta: f64 = 0.7;
        let r = Mat::from_rows(&[
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ]);
        let y = x.matmul(&r);
        let c = cca(&x, &y, 2).unwrap();
        for corr in c.correlations {
            assert!((corr - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cca_requires_more_samples_than_dims() {
        let x = Mat::zeros(3, 3);
        assert!(cca(&x, &x, 1).is_err());
    }
}
