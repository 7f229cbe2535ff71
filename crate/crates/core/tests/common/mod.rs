//! Oracles shared by the integration tests.
#![allow(dead_code)]

use forestiv::lasso::LassoFit;
use forestiv::seed::rng_from;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Standardized design (population sd) and centred response, computed from
/// the raw rows independently of the solver's moment bookkeeping.
pub fn standardized(x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, Vec<bool>) {
    let n = x.nrows() as f64;
    let mut xs = x.clone();
    let mut live = Vec::new();
    for j in 0..x.ncols() {
        let m = x.column(j).mean();
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        live.push(sd > 1e-12);
        for i in 0..x.nrows() {
            xs[(i, j)] = if sd > 1e-12 { (x[(i, j)] - m) / sd } else { 0.0 };
        }
    }
    let yc = y.add_scalar(-y.mean());
    (xs, yc, live)
}

/// Largest violation of the lasso optimality conditions
/// `xⱼᵀr/n = λ sign(bⱼ)` (active) and `|xⱼᵀr/n| ≤ λ` (inactive).
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, fit: &LassoFit) -> f64 {
    let (xs, yc, live) = standardized(x, y);
    let n = x.nrows() as f64;
    let b = DVector::from_column_slice(&fit.standardized);
    let r = &yc - &xs * &b;
    let g = xs.tr_mul(&r) / n;
    (0..x.ncols())
        .filter(|&j| live[j])
        .map(|j| {
            if b[j] != 0.0 {
                (g[j] - fit.lambda * b[j].signum()).abs()
            } else {
                (g[j].abs() - fit.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn objective(x: &DMatrix<f64>, y: &DVector<f64>, fit: &LassoFit) -> f64 {
    let (xs, yc, _) = standardized(x, y);
    let b = DVector::from_column_slice(&fit.standardized);
    let r = &yc - &xs * &b;
    r.norm_squared() / (2.0 * x.nrows() as f64) + fit.lambda * b.iter().map(|v| v.abs()).sum::<f64>()
}

/// Mixed designs: independent, collinear (shared factor), and wide.
pub fn random_problem(seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = rng_from(seed);
    let n = rng.gen_range(8..80);
    let q = rng.gen_range(1..30);
    let shared: f64 = rng.gen_range(0.0..0.95);
    let f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x = DMatrix::from_fn(n, q, |i, _| {
        shared * f[i] + (1.0 - shared) * rng.sample::<f64, _>(StandardNormal)
    });
    let k = rng.gen_range(0..=q.min(4));
    let y = DVector::from_fn(n, |i, _| {
        (0..k).map(|j| (j as f64 + 1.0) * x[(i, j)]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal)
    });
    (x, y)
}

pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let (xs, yc, _) = standardized(x, y);
    (xs.tr_mul(&yc) / x.nrows() as f64).amax()
}
