//! OLS and 2SLS estimators, the Hotelling comparison, empirical MSE and the
//! instrument diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::linalg::{solve_psd_or_pinv, symmetrize, PivotedQr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ols,
    Tsls,
    ForestIv,
    Simex,
    McSimex,
}

/// Coefficients, covariance and sample size: the common currency of every
/// estimator in the crate. Coefficient order is `[intercept, x, controls...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateResult {
    pub method: Method,
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub n: usize,
    /// Set when `vcov` is not a valid sampling variance for `beta`.
    pub caveat: Option<String>,
}

impl EstimateResult {
    pub fn new(method: Method, beta: DVector<f64>, vcov: DMatrix<f64>, n: usize) -> Self {
        let names = default_names(beta.len());
        EstimateResult {
            method,
            names,
            beta,
            vcov: symmetrize(vcov),
            n,
            caveat: None,
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.beta.len(), "one name per coefficient");
        self.names = names;
        self
    }

    pub fn with_caveat(mut self, caveat: impl Into<String>) -> Self {
        self.caveat = Some(caveat.into());
        self
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.vcov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Coefficient by position.
    pub fn coef(&self, j: usize) -> f64 {
        self.beta[j]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn default_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|j| match j {
            0 => "intercept".to_string(),
            1 => "x".to_string(),
            _ => format!("z{}", j - 1),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CoefficientRecord {
    name: String,
    estimate: f64,
    std_error: f64,
}

#[derive(Serialize, Deserialize)]
struct EstimateRecord {
    method: Method,
    n: usize,
    coefficients: Vec<CoefficientRecord>,
    vcov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caveat: Option<String>,
}

impl Serialize for EstimateResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let se = self.std_errors();
        let k = self.k();
        EstimateRecord {
            method: self.method,
            n: self.n,
            coefficients: (0..k)
                .map(|j| CoefficientRecord {
                    name: self.names[j].clone(),
                    estimate: self.beta[j],
                    std_error: se[j],
                })
                .collect(),
            vcov: (0..k)
                .map(|i| (0..k).map(|j| self.vcov[(i, j)]).collect())
                .collect(),
            caveat: self.caveat.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EstimateResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = EstimateRecord::deserialize(d)?;
        let k = rec.coefficients.len();
        if rec.vcov.len() != k || rec.vcov.iter().any(|r| r.len() != k) {
            return Err(serde::de::Error::custom("vcov must be k×k"));
        }
        Ok(EstimateResult {
            method: rec.method,
            names: rec.coefficients.iter().map(|c| c.name.clone()).collect(),
            beta: DVector::from_iterator(k, rec.coefficients.iter().map(|c| c.estimate)),
            vcov: DMatrix::from_fn(k, k, |i, j| rec.vcov[i][j]),
            n: rec.n,
            caveat: rec.caveat,
        })
    }
}

/// Full OLS output including residuals.
#[derive(Clone, Debug)]
pub struct OlsFit {
    pub estimate: EstimateResult,
    pub residuals: DVector<f64>,
    pub rss: f64,
}

/// Ordinary least squares with `vcov = s² (AᵀA)⁻¹`, `s² = RSS/(n−K)`.
pub fn ols(y: &DVector<f64>, design: &DMatrix<f64>) -> Result<EstimateResult> {
    ols_fit(y, design).map(|f| f.estimate)
}

pub fn ols_fit(y: &DVector<f64>, design: &DMatrix<f64>) -> Result<OlsFit> {
    let (n, k) = design.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n <= k {
        return Err(Error::TooFewObservations { n, k });
    }
    let qr = PivotedQr::factor(design);
    if !qr.is_full_rank() {
        return Err(Error::rank("ols design"));
    }
    let beta = qr.solve(y)?;
    let residuals = y - design * &beta;
    let rss = residuals.norm_squared();
    let s2 = rss / (n - k) as f64;
    let vcov = qr.gram_inverse()? * s2;
    Ok(OlsFit {
        estimate: EstimateResult::new(Method::Ols, beta, vcov, n),
        residuals,
        rss,
    })
}

/// Two-stage least squares with one endogenous regressor.
///
/// `controls` must contain the intercept column. Stage 1 projects `x` on
/// `[W, Z]`; stage 2 regresses `y` on `[x̃, Z]`. The covariance is
/// `s² (CᵀC)⁻¹` with `s²` computed from residuals that use the original `x`.
pub fn tsls(
    y: &DVector<f64>,
    x: &DVector<f64>,
    controls: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
) -> Result<EstimateResult> {
    let n = y.len();
    for len in [x.len(), controls.nrows(), instruments.nrows()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let w = instruments.ncols();
    if w == 0 {
        return Err(Error::invalid("2SLS needs at least one instrument"));
    }
    let k = controls.ncols() + 1;
    if n <= k + w {
        return Err(Error::TooFewObservations { n, k: k + w });
    }
    let first = hstack(instruments, controls);
    let qr1 = PivotedQr::factor(&first);
    if !qr1.is_full_rank() {
        return Err(Error::rank("2SLS first stage [W, Z]"));
    }
    let x_tilde = qr1.project(x);

    let c = crate::data::design_with(&x_tilde, controls);
    let qr2 = PivotedQr::factor(&c);
    if !qr2.is_full_rank() {
        return Err(Error::rank("2SLS second stage [x̃, Z]"));
    }
    let beta = qr2.solve(y)?;
    let resid = y - crate::data::design_with(x, controls) * &beta;
    let s2 = resid.norm_squared() / (n - k) as f64;
    let vcov = qr2.gram_inverse()? * s2;
    Ok(EstimateResult::new(Method::Tsls, beta, vcov, n))
}

pub(crate) fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (ka, kb) = (a.ncols(), b.ncols());
    DMatrix::from_fn(n, ka + kb, |i, j| if j < ka { a[(i, j)] } else { b[(i, j - ka)] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotellingResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `Σa + Σb` was numerically singular and the pseudo-inverse was used.
    pub singular: bool,
}

/// Unequal-variance Hotelling statistic
/// `H = Δᵀ (Σa + Σb)⁻¹ Δ`, referred to χ²(K).
pub fn hotelling(a: &EstimateResult, b: &EstimateResult) -> Result<HotellingResult> {
    let k = a.k();
    if b.k() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: b.k(),
        });
    }
    let delta = &a.beta - &b.beta;
    let pooled = &a.vcov + &b.vcov;
    let (sol, singular) = solve_psd_or_pinv(&pooled, &delta);
    let statistic = delta.dot(&sol).max(0.0);
    Ok(HotellingResult {
        statistic,
        dof: k,
        p_value: chi2_sf(statistic, k),
        singular,
    })
}

/// `‖β_iv − β_ref‖² + tr(Σ_iv)`.
pub fn empirical_mse(iv: &EstimateResult, reference: &EstimateResult) -> Result<f64> {
    if iv.k() != reference.k() {
        return Err(Error::DimensionMismatch {
            expected: reference.k(),
            got: iv.k(),
        });
    }
    Ok((&iv.beta - &reference.beta).norm_squared() + iv.vcov.trace())
}

/// Upper tail `P(χ²_k > h)`.
pub fn chi2_sf(h: f64, k: usize) -> f64 {
    if h <= 0.0 {
        return 1.0;
    }
    if h.is_infinite() {
        return 0.0;
    }
    gamma_ur(k as f64 / 2.0, h / 2.0).clamp(0.0, 1.0)
}

/// Critical value `c` with `P(χ²_k > c) = alpha`, by bisection to 1e-10.
pub fn chi2_critical(alpha: f64, k: usize) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let mut hi = (k as f64).max(1.0);
    while chi2_sf(hi, k) > alpha {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if chi2_sf(mid, k) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn residual_ss(v: &DVector<f64>, basis: &DMatrix<f64>) -> (f64, usize) {
    let qr = PivotedQr::factor(basis);
    ((v - qr.project(v)).norm_squared(), qr.rank())
}

/// First-stage F statistic for the joint nullity of the instruments in
/// `x ~ [W, Z]`. Returns `+∞` when the full model fits `x` exactly.
pub fn first_stage_f(
    x: &DVector<f64>,
    instruments: &DMatrix<f64>,
    controls: &DMatrix<f64>,
) -> Result<f64> {
    let n = x.len();
    let w = instruments.ncols();
    let k = controls.ncols();
    if w == 0 {
        return Err(Error::invalid("first-stage F needs at least one instrument"));
    }
    if instruments.nrows() != n || controls.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: instruments.nrows().min(controls.nrows()),
        });
    }
    if n <= w + k {
        return Err(Error::TooFewObservations { n, k: w + k });
    }
    let full = hstack(instruments, controls);
    let (rss_f, rank_f) = residual_ss(x, &full);
    if rank_f < w + k {
        return Err(Error::rank("first-stage [W, Z]"));
    }
    let (rss_r, _) = residual_ss(x, controls);
    if rss_f <= 1e-12 * rss_r.max(f64::MIN_POSITIVE) {
        return Ok(f64::INFINITY);
    }
    Ok(((rss_r - rss_f) / w as f64) / (rss_f / (n - w - k) as f64))
}

/// Adjusted R² of `e ~ [1, W]`; may be negative.
pub fn exclusion_r2(errors: &DVector<f64>, instruments: &DMatrix<f64>) -> Result<f64> {
    let n = errors.len();
    let w = instruments.ncols();
    if instruments.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: instruments.nrows(),
        });
    }
    if n <= w + 1 {
        return Err(Error::TooFewObservations { n, k: w + 1 });
    }
    let ones = DMatrix::from_element(n, 1, 1.0);
    let design = hstack(&ones, instruments);
    let (rss, _) = residual_ss(errors, &design);
    let mean = errors.mean();
    let tss = errors.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if tss <= 0.0 {
        return Err(Error::Degenerate("prediction errors are constant".into()));
    }
    let r2 = (1.0 - rss / tss).min(1.0);
    Ok(1.0 - (1.0 - r2) * (n - 1) as f64 / (n - w - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn col(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn ols_exact_line() {
        let y = col(&[1.0, 2.0, 3.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let fit = ols_fit(&y, &a).unwrap();
        assert_relative_eq!(fit.estimate.beta[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.estimate.beta[1], 1.0, epsilon = 1e-12);
        assert!(fit.rss < 1e-24);
    }

    #[test]
    fn ols_constant_intercept_only() {
        let y = col(&[4.2; 5]);
        let a = DMatrix::from_element(5, 1, 1.0);
        let est = ols(&y, &a).unwrap();
        assert_relative_eq!(est.beta[0], 4.2, epsilon = 1e-12);
        assert!(est.vcov[(0, 0)].abs() < 1e-25);
    }

    #[test]
    fn ols_errors() {
        let y = col(&[1.0, 2.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(ols(&y, &a), Err(Error::TooFewObservations { .. })));
        let y = col(&[1.0, 2.0, 3.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(ols(&y, &a), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn hotelling_scalar_and_identity() {
        let a = EstimateResult::new(Method::Ols, col(&[0.0]), DMatrix::from_element(1, 1, 1.0), 10);
        let b = EstimateResult::new(Method::Ols, col(&[2.0]), DMatrix::from_element(1, 1, 1.0), 10);
        let h = hotelling(&a, &b).unwrap();
        assert_relative_eq!(h.statistic, 2.0, epsilon = 1e-12);
        assert_eq!(h.dof, 1);
        let same = hotelling(&a, &a).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn hotelling_singular_uses_pinv() {
        let z = DMatrix::zeros(2, 2);
        let a = EstimateResult::new(Method::Ols, col(&[1.0, 0.0]), z.clone(), 10);
        let b = EstimateResult::new(Method::Ols, col(&[0.0, 0.0]), z, 10);
        let h = hotelling(&a, &b).unwrap();
        assert!(h.singular);
        assert_eq!(h.statistic, 0.0);
        let c = EstimateResult::new(Method::Ols, col(&[0.0]), DMatrix::zeros(1, 1), 10);
        assert!(hotelling(&a, &c).is_err());
    }

    #[test]
    fn empirical_mse_closed_forms() {
        let zero = EstimateResult::new(Method::Ols, col(&[0.0, 0.0]), DMatrix::zeros(2, 2), 5);
        assert_eq!(empirical_mse(&zero, &zero).unwrap(), 0.0);
        let iv = EstimateResult::new(Method::Tsls, col(&[1.0, 0.0]), DMatrix::identity(2, 2), 5);
        assert_relative_eq!(empirical_mse(&iv, &zero).unwrap(), 3.0);
        assert_relative_eq!(empirical_mse(&iv, &iv).unwrap(), 2.0);
    }

    #[test]
    fn chi2_critical_known_values() {
        assert_relative_eq!(chi2_critical(0.05, 1), 3.841458820694124, epsilon = 1e-8);
        assert_relative_eq!(chi2_critical(0.05, 4), 9.487729036781154, epsilon = 1e-8);
        assert_relative_eq!(chi2_sf(chi2_critical(0.01, 3), 3), 0.01, epsilon = 1e-9);
    }

    #[test]
    fn first_stage_f_perfect_fit_is_infinite() {
        let x = col(&[1.0, 3.0, 2.0, 5.0, 4.0, 7.0]);
        let w = DMatrix::from_column_slice(6, 1, x.as_slice());
        let z = DMatrix::from_element(6, 1, 1.0);
        assert_eq!(first_stage_f(&x, &w, &z).unwrap(), f64::INFINITY);
    }

    #[test]
    fn exclusion_r2_exact_span() {
        let w = DMatrix::from_row_slice(5, 1, &[1.0, 2.0, 0.0, 4.0, 3.0]);
        let e = col(&[2.0, 4.0, 0.0, 8.0, 6.0]);
        assert_relative_eq!(exclusion_r2(&e, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert!(exclusion_r2(&col(&[1.0, 2.0]), &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn estimate_json_roundtrip() {
        let est = EstimateResult::new(
            Method::Tsls,
            col(&[1.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
            100,
        );
        let json = est.to_json().unwrap();
        assert!(json.contains("\"std_error\": 0.3"));
        assert!(json.contains("\"method\": \"tsls\""));
        let back: EstimateResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, est);
    }
}
