//! Simulation–extrapolation correctors: SIMEX for additive measurement error
//! in a continuous covariate and MC-SIMEX for misclassification of a binary
//! one.
//!
//! Both add synthetic error of increasing magnitude `λ`, average the naive OLS
//! estimates over pseudo-replicates, fit a quadratic in `λ` per coefficient
//! (including the naive estimate at `λ = 0`) and evaluate it at `λ = −1`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::design_with;
use crate::error::{Error, Result};
use crate::regression::{ols, EstimateResult, Method};
use crate::seed::rng_for;

const VCOV_CAVEAT: &str = "naive OLS covariance; not a SIMEX sampling variance";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimexConfig {
    pub lambda_grid: Vec<f64>,
    /// Pseudo-replicates per grid point.
    pub b: usize,
    pub seed: u64,
}

impl Default for SimexConfig {
    fn default() -> Self {
        SimexConfig {
            lambda_grid: vec![0.5, 1.0, 1.5, 2.0],
            b: 50,
            seed: 0,
        }
    }
}

impl SimexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::invalid("SIMEX lambda grid is empty"));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("SIMEX lambdas must be positive and finite"));
        }
        if self.lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("SIMEX lambda grid must be strictly ascending"));
        }
        if self.b < 2 {
            return Err(Error::invalid("SIMEX needs at least 2 replicates per lambda"));
        }
        Ok(())
    }
}

/// Mean pseudo-estimates along the `λ` grid, with the naive fit at `λ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimexPath {
    /// `0` followed by the configured grid.
    pub lambdas: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Standard deviation across replicates per grid point (zero at `λ = 0`).
    pub sds: Vec<DVector<f64>>,
    pub naive: EstimateResult,
    /// Some probability in `Π^λ` had to be clamped (MC-SIMEX only).
    pub clamped: bool,
}

impl SimexPath {
    /// Per-coefficient quadratic extrapolation to `λ = −1`.
    pub fn extrapolate(&self) -> DVector<f64> {
        let k = self.naive.k();
        DVector::from_fn(k, |j, _| {
            let ys: Vec<f64> = self.means.iter().map(|m| m[j]).collect();
            extrapolate_quadratic(&self.lambdas, &ys, -1.0)
        })
    }

    fn into_estimate(self, method: Method) -> EstimateResult {
        let beta = self.extrapolate();
        EstimateResult::new(method, beta, self.naive.vcov.clone(), self.naive.n)
            .with_names(self.naive.names.clone())
            .with_caveat(VCOV_CAVEAT)
    }
}

/// Least-squares quadratic through `(xs, ys)` evaluated at `at`. Constant
/// data extrapolates to that constant exactly.
pub fn extrapolate_quadratic(xs: &[f64], ys: &[f64], at: f64) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if ys.iter().all(|&y| y == ys[0]) {
        return ys[0];
    }
    if xs.len() < 3 {
        // Not enough points for a quadratic; fall back to the line.
        let (x0, x1, y0, y1) = (xs[0], xs[xs.len() - 1], ys[0], ys[ys.len() - 1]);
        return y0 + (y1 - y0) / (x1 - x0) * (at - x0);
    }
    // Normal equations in centered λ are well conditioned for small grids.
    let c = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut a = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let t = x - c;
        let v = Vector3::new(1.0, t, t * t);
        a += v * v.transpose();
        rhs += v * y;
    }
    let coef = a.lu().solve(&rhs).expect("distinct grid points");
    let t = at - c;
    coef[0] + coef[1] * t + coef[2] * t * t
}

fn check_lengths(y: &DVector<f64>, x: &DVector<f64>, controls: &DMatrix<f64>) -> Result<()> {
    for len in [x.len(), controls.nrows()] {
        if len != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: len,
            });
        }
    }
    Ok(())
}

/// Runs the simulation step: for each grid `λ`, `b` replicates of
/// `perturb(λ, replicate)` followed by OLS.
fn simex_path_with<F>(
    y: &DVector<f64>,
    x: &DVector<f64>,
    controls: &DMatrix<f64>,
    config: &SimexConfig,
    perturb: F,
) -> Result<SimexPath>
where
    F: Fn(f64, usize, u64) -> DVector<f64> + Sync,
{
    config.validate()?;
    check_lengths(y, x, controls)?;
    let naive = ols(y, &design_with(x, controls))?;
    let k = naive.k();
    let mut lambdas = vec![0.0];
    let mut means = vec![naive.beta.clone()];
    let mut sds = vec![DVector::zeros(k)];
    for (g, &lambda) in config.lambda_grid.iter().enumerate() {
        let reps: Vec<DVector<f64>> = (0..config.b)
            .into_par_iter()
            .map(|r| {
                let xl = perturb(lambda, g, r as u64);
                ols(y, &design_with(&xl, controls)).map(|e| e.beta)
            })
            .collect::<Result<_>>()?;
        let n = reps.len() as f64;
        let mean = if reps.iter().all(|b| b == &reps[0]) {
            reps[0].clone()
        } else {
            reps.iter().fold(DVector::zeros(k), |a, b| a + b) / n
        };
        let sd = DVector::from_fn(k, |j, _| {
            (reps.iter().map(|b| (b[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        lambdas.push(lambda);
        means.push(mean);
        sds.push(sd);
    }
    Ok(SimexPath {
        lambdas,
        means,
        sds,
        naive,
        clamped: false,
    })
}

/// SIMEX grid path for additive error with standard deviation `sigma_e`.
pub fn simex_path(
    y: &DVector<f64>,
    x_noisy: &DVector<f64>,
    controls: &DMatrix<f64>,
    sigma_e: f64,
    config: &SimexConfig,
) -> Result<SimexPath> {
    if !(sigma_e >= 0.0 && sigma_e.is_finite()) {
        return Err(Error::invalid("sigma_e must be finite and nonnegative"));
    }
    let n = x_noisy.len();
    simex_path_with(y, x_noisy, controls, config, |lambda, g, r| {
        let mut rng = rng_for(config.seed, "simex", ((g as u64) << 32) | r);
        let sd = lambda.sqrt() * sigma_e;
        DVector::from_fn(n, |i, _| x_noisy[i] + sd * rng.sample::<f64, _>(StandardNormal))
    })
}

pub fn simex(
    y: &DVector<f64>,
    x_noisy: &DVector<f64>,
    controls: &DMatrix<f64>,
    sigma_e: f64,
    config: &SimexConfig,
) -> Result<EstimateResult> {
    Ok(simex_path(y, x_noisy, controls, sigma_e, config)?.into_estimate(Method::Simex))
}

/// Column-stochastic 2×2 misclassification matrix,
/// `pi[(r, c)] = P(observed = r | true = c)`, with its eigendecomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Misclassification {
    pub pi: Matrix2<f64>,
    vectors: Matrix2<f64>,
    vectors_inv: Matrix2<f64>,
    /// Second eigenvalue `π₀₀ + π₁₁ − 1`; the first is 1.
    tau: f64,
}

impl Misclassification {
    pub fn new(pi: Matrix2<f64>) -> Result<Self> {
        if pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("misclassification probabilities must lie in [0, 1]"));
        }
        for c in 0..2 {
            if (pi[(0, c)] + pi[(1, c)] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("misclassification matrix must be column-stochastic"));
            }
        }
        if !(pi[(0, 0)] > 0.5 && pi[(1, 1)] > 0.5) {
            return Err(Error::invalid(
                "misclassification matrix needs diagonals above 0.5",
            ));
        }
        let tau = pi[(0, 0)] + pi[(1, 1)] - 1.0;
        // Eigenvector for 1 is the stationary distribution; for τ it is (1, −1).
        let (a, b) = (pi[(0, 1)], pi[(1, 0)]);
        let vectors = if a + b == 0.0 {
            Matrix2::identity()
        } else {
            Matrix2::new(a / (a + b), 1.0, b / (a + b), -1.0)
        };
        let vectors_inv = vectors
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("misclassification matrix is not diagonalizable".into()))?;
        Ok(Misclassification {
            pi,
            vectors,
            vectors_inv,
            tau,
        })
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        (1.0, self.tau)
    }

    pub fn eigenvectors(&self) -> Matrix2<f64> {
        self.vectors
    }

    /// `Π^λ = V diag(1, τ^λ) V⁻¹`, with any entry outside `[0, 1]` clamped and
    /// columns renormalized; the flag reports whether that happened.
    pub fn power(&self, lambda: f64) -> (Matrix2<f64>, bool) {
        let d = Matrix2::new(1.0, 0.0, 0.0, self.tau.powf(lambda));
        let mut p = self.vectors * d * self.vectors_inv;
        let mut clamped = false;
        for c in 0..2 {
            for r in 0..2 {
                if p[(r, c)] < 0.0 || p[(r, c)] > 1.0 {
                    clamped = true;
                    p[(r, c)] = p[(r, c)].clamp(0.0, 1.0);
                }
            }
            let s = p[(0, c)] + p[(1, c)];
            p[(0, c)] /= s;
            p[(1, c)] /= s;
        }
        (p, clamped)
    }
}

/// Confusion-count estimate of `P(pred = r | truth = c)`, adding one to any
/// empty cell.
pub fn estimate_misclassification(pred: &[f64], truth: &[f64]) -> Result<Matrix2<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let mut counts = Matrix2::<f64>::zeros();
    for (&p, &t) in pred.iter().zip(truth) {
        let (r, c) = (label(p)?, label(t)?);
        counts[(r, c)] += 1.0;
    }
    for c in 0..2 {
        if counts[(0, c)] + counts[(1, c)] == 0.0 {
            return Err(Error::Degenerate(format!("class {c} absent from test set")));
        }
    }
    counts.iter_mut().filter(|v| **v == 0.0).for_each(|v| *v = 1.0);
    for c in 0..2 {
        let s = counts[(0, c)] + counts[(1, c)];
        counts[(0, c)] /= s;
        counts[(1, c)] /= s;
    }
    Ok(counts)
}

fn label(v: f64) -> Result<usize> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::invalid(format!("expected a 0/1 label, got {v}")))
    }
}

/// MC-SIMEX grid path: each replicate re-classifies the observed labels with
/// `Π^λ`, so the total misclassification is `Π^{1+λ}`.
pub fn mc_simex_path(
    y: &DVector<f64>,
    x_observed: &DVector<f64>,
    controls: &DMatrix<f64>,
    pi: &Matrix2<f64>,
    config: &SimexConfig,
) -> Result<SimexPath> {
    let mis = Misclassification::new(*pi)?;
    let labels: Vec<usize> = x_observed.iter().map(|&v| label(v)).collect::<Result<_>>()?;
    let powers: Vec<(Matrix2<f64>, bool)> = config.lambda_grid.iter().map(|&l| mis.power(l)).collect();
    let clamped = powers.iter().any(|p| p.1);
    let n = labels.len();
    let mut path = simex_path_with(y, x_observed, controls, config, |_, g, r| {
        let mut rng = rng_for(config.seed, "mc-simex", ((g as u64) << 32) | r);
        let p = &powers[g].0;
        DVector::from_fn(n, |i, _| {
            let stay_one = p[(1, labels[i])];
            if rng.gen::<f64>() < stay_one {
                1.0
            } else {
                0.0
            }
        })
    })?;
    path.clamped = clamped;
    Ok(path)
}

pub fn mc_simex(
    y: &DVector<f64>,
    x_observed: &DVector<f64>,
    controls: &DMatrix<f64>,
    pi: &Matrix2<f64>,
    config: &SimexConfig,
) -> Result<EstimateResult> {
    let path = mc_simex_path(y, x_observed, controls, pi, config)?;
    let clamped = path.clamped;
    let mut e = path.into_estimate(Method::McSimex);
    if clamped {
        e = e.with_caveat(format!("{VCOV_CAVEAT}; negative probabilities in Π^λ were clamped"));
    }
    Ok(e)
}

/// Two-regressor SIMEX blindspot condition from sample moments: with `x1`
/// measured with error `e` and `x2` exact,
/// `|σ₂²σ₁² − σ₂ₑ²| < |σ₂²(σ₁² + σₑ²) − σ₂ₑ²|` means SIMEX worsens the `x2`
/// coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindspotCondition {
    pub var_x1: f64,
    pub var_x2: f64,
    pub var_e: f64,
    pub cov_x2_e: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn blindspot_condition(x1: &[f64], x2: &[f64], e: &[f64]) -> Result<BlindspotCondition> {
    let n = x1.len();
    if x2.len() != n || e.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x2.len().min(e.len()),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientRows {
            needed: 2,
            available: n,
        });
    }
    let cov = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (mean(a), mean(b));
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
    };
    let (s1, s2, se, s2e) = (cov(x1, x1), cov(x2, x2), cov(e, e), cov(x2, e));
    let lhs = (s2 * s1 - s2e * s2e).abs();
    let rhs = (s2 * (s1 + se) - s2e * s2e).abs();
    Ok(BlindspotCondition {
        var_x1: s1,
        var_x2: s2,
        var_e: se,
        cov_x2_e: s2e,
        lhs,
        rhs,
        holds: lhs < rhs,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindspotReport {
    pub bias_naive: f64,
    pub bias_simex: f64,
    pub condition: BlindspotCondition,
    /// `|bias_simex| > |bias_naive|` for the exactly measured covariate.
    pub simex_worse: bool,
}

/// Classical-error design with an exactly measured covariate correlated with
/// the error: `y = β₀ + β₁x₁ + β₂x₂ + ε`, `x̂₁ = x₁ + e`, `Corr(x₂, e) = ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlindspotDesign {
    pub n: usize,
    pub beta: [f64; 3],
    pub sd_x1: f64,
    pub sd_e: f64,
    pub rho: f64,
    pub noise_sd: f64,
}

impl Default for BlindspotDesign {
    fn default() -> Self {
        BlindspotDesign {
            n: 2000,
            beta: [1.0, 0.5, 1.0],
            sd_x1: 1.0,
            sd_e: 1.0,
            rho: 0.3,
            noise_sd: 0.1,
        }
    }
}

/// Simulates the blindspot design once and compares naive and SIMEX biases on
/// the exactly measured covariate.
pub fn simex_blindspot_check(design: &BlindspotDesign, config: &SimexConfig) -> Result<BlindspotReport> {
    if !(design.rho.abs() < 1.0) || design.n < 10 {
        return Err(Error::invalid("blindspot design needs |rho| < 1 and n ≥ 10"));
    }
    let mut rng = rng_for(config.seed, "blindspot-design", 0);
    let n = design.n;
    let mut draw = || rng.sample::<f64, _>(StandardNormal);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = design.sd_x1 * draw();
        let u = draw();
        let ee = design.sd_e * u;
        let b = design.rho * u + (1.0 - design.rho * design.rho).sqrt() * draw();
        y.push(design.beta[0] + design.beta[1] * a + design.beta[2] * b + design.noise_sd * draw());
        x1.push(a);
        x2.push(b);
        e.push(ee);
    }
    let x_hat = DVector::from_fn(n, |i, _| x1[i] + e[i]);
    let y = DVector::from_vec(y);
    let controls = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x2[i] });
    let sigma_e = {
        let m = mean(&e);
        (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let est = simex(&y, &x_hat, &controls, sigma_e, config)?;
    let naive = ols(&y, &design_with(&x_hat, &controls))?;
    let bias_naive = naive.beta[2] - design.beta[2];
    let bias_simex = est.beta[2] - design.beta[2];
    Ok(BlindspotReport {
        bias_naive,
        bias_simex,
        condition: blindspot_condition(&x1, &x2, &e)?,
        simex_worse: bias_simex.abs() > bias_naive.abs(),
    })
}
