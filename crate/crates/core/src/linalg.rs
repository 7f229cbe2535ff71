//! Dense least-squares kernels.
//!
//! Householder QR with column-norm pivoting on unit-norm-scaled columns. Rank
//! is the number of pivots whose magnitude is at least `RANK_TOL` times the
//! first pivot.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const RANK_TOL: f64 = 1e-10;

/// Column-pivoted Householder QR, `A S Π = Q R` with `S` the column scaling.
#[derive(Clone, Debug)]
pub struct PivotedQr {
    m: usize,
    n: usize,
    /// Column-major; R on and above the diagonal, reflectors below.
    qr: Vec<f64>,
    tau: Vec<f64>,
    /// `perm[k]` is the original column in pivot position `k`.
    perm: Vec<usize>,
    /// Multiply original column `j` by `scale[j]` to get unit norm.
    scale: Vec<f64>,
    rank: usize,
}

impl PivotedQr {
    pub fn factor(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut qr: Vec<f64> = a.as_slice().to_vec();
        let mut scale = vec![0.0; n];
        for j in 0..n {
            let col = &mut qr[j * m..(j + 1) * m];
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                scale[j] = 1.0 / norm;
                col.iter_mut().for_each(|v| *v *= scale[j]);
            } else {
                col.iter_mut().for_each(|v| *v = 0.0);
            }
        }

        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut tau = Vec::with_capacity(steps);
        let mut norms: Vec<f64> = (0..n)
            .map(|j| qr[j * m..(j + 1) * m].iter().map(|v| v * v).sum())
            .collect();
        let mut first_pivot = 0.0;
        let mut rank = 0;

        for k in 0..steps {
            // Pivot: remaining column with largest trailing norm.
            let (best, _) = (k..n).fold((k, -1.0), |acc, j| {
                if norms[j] > acc.1 {
                    (j, norms[j])
                } else {
                    acc
                }
            });
            if best != k {
                for i in 0..m {
                    qr.swap(k * m + i, best * m + i);
                }
                norms.swap(k, best);
                perm.swap(k, best);
            }
            // Recompute exactly to avoid drift from the downdates.
            let alpha_norm = qr[k * m + k..(k + 1) * m]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if k == 0 {
                first_pivot = alpha_norm;
            }
            if alpha_norm == 0.0 || alpha_norm < RANK_TOL * first_pivot {
                break;
            }
            rank += 1;

            let x0 = qr[k * m + k];
            let beta = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
            let v0 = x0 - beta;
            for i in k + 1..m {
                qr[k * m + i] /= v0;
            }
            let t = (beta - x0) / beta;
            qr[k * m + k] = beta;
            tau.push(t);

            for j in k + 1..n {
                let (head, tail) = qr.split_at_mut(j * m);
                let v = &head[k * m..(k + 1) * m];
                let c = &mut tail[..m];
                let mut dot = c[k];
                for i in k + 1..m {
                    dot += v[i] * c[i];
                }
                dot *= t;
                c[k] -= dot;
                for i in k + 1..m {
                    c[i] -= dot * v[i];
                }
                norms[j] = c[k + 1..].iter().map(|v| v * v).sum();
            }
        }

        PivotedQr {
            m,
            n,
            qr,
            tau,
            perm,
            scale,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.n
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.n
    }

    /// Overwrites `b` with `Qᵀ b`.
    pub fn apply_qt(&self, b: &mut [f64]) {
        let m = self.m;
        for (k, &t) in self.tau.iter().enumerate() {
            let v = &self.qr[k * m..(k + 1) * m];
            let mut dot = b[k];
            for i in k + 1..m {
                dot += v[i] * b[i];
            }
            dot *= t;
            b[k] -= dot;
            for i in k + 1..m {
                b[i] -= dot * v[i];
            }
        }
    }

    /// Overwrites `b` with `Q b`.
    pub fn apply_q(&self, b: &mut [f64]) {
        let m = self.m;
        for (k, &t) in self.tau.iter().enumerate().rev() {
            let v = &self.qr[k * m..(k + 1) * m];
            let mut dot = b[k];
            for i in k + 1..m {
                dot += v[i] * b[i];
            }
            dot *= t;
            b[k] -= dot;
            for i in k + 1..m {
                b[i] -= dot * v[i];
            }
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.qr[j * self.m + i]
    }

    /// Orthogonal projection of `b` onto the column span.
    pub fn project(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut w = b.as_slice().to_vec();
        self.apply_qt(&mut w);
        w[self.rank..].iter_mut().for_each(|v| *v = 0.0);
        self.apply_q(&mut w);
        DVector::from_vec(w)
    }

    /// Least-squares coefficients; requires full column rank.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.is_full_rank() {
            return Err(Error::rank(format!(
                "rank {} < {} columns",
                self.rank, self.n
            )));
        }
        let mut w = b.as_slice().to_vec();
        self.apply_qt(&mut w);
        let n = self.n;
        let mut z = vec![0.0; n];
        for k in (0..n).rev() {
            let mut s = w[k];
            for j in k + 1..n {
                s -= self.r(k, j) * z[j];
            }
            z[k] = s / self.r(k, k);
        }
        let mut coef = DVector::zeros(n);
        for k in 0..n {
            let j = self.perm[k];
            coef[j] = z[k] * self.scale[j];
        }
        Ok(coef)
    }

    /// `(AᵀA)⁻¹` for the original (unscaled) columns; requires full rank.
    pub fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        if !self.is_full_rank() {
            return Err(Error::rank(format!(
                "rank {} < {} columns",
                self.rank, self.n
            )));
        }
        let n = self.n;
        // R⁻¹ by back substitution.
        let mut rinv = DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            for k in (0..=c).rev() {
                let mut s = if k == c { 1.0 } else { 0.0 };
                for j in k + 1..=c {
                    s -= self.r(k, j) * rinv[(j, c)];
                }
                rinv[(k, c)] = s / self.r(k, k);
            }
        }
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let (ia, ib) = (self.perm[a], self.perm[b]);
                out[(ia, ib)] = inner[(a, b)] * self.scale[ia] * self.scale[ib];
            }
        }
        Ok(symmetrize(out))
    }

    /// Coordinates of every original column in the orthonormal basis formed by
    /// the first `rank` columns of `Q` (a `rank × n` matrix).
    pub fn span_coordinates(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.rank, self.n);
        for k in 0..self.n {
            let j = self.perm[k];
            if self.scale[j] == 0.0 {
                continue;
            }
            for i in 0..self.rank.min(k + 1) {
                t[(i, j)] = self.r(i, k) / self.scale[j];
            }
        }
        t
    }
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Solves `M x = v` for symmetric PSD `M`, falling back to the
/// Moore–Penrose pseudo-inverse when `M` is numerically singular.
/// Returns the solution and whether the fallback was used.
pub fn solve_psd_or_pinv(m: &DMatrix<f64>, v: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12 * m.nrows().max(1) as f64;
    let singular = smax == 0.0 || svd.singular_values.iter().any(|&s| s <= cutoff);
    if !singular {
        if let Some(chol) = m.clone().cholesky() {
            return (chol.solve(v), false);
        }
    }
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let utv = u.transpose() * v;
    let scaled = DVector::from_iterator(
        utv.len(),
        utv.iter()
            .zip(svd.singular_values.iter())
            .map(|(&c, &s)| if s > cutoff { c / s } else { 0.0 }),
    );
    (vt.transpose() * scaled, true)
}
