//! Synthetic designs and the Monte-Carlo experiment harness.
//!
//! A round draws a fresh dataset with an additive ground truth, splits it into
//! train/test/unlabelled rows, fits a forest, simulates the outcome equation
//! and runs every requested estimator on the same draw. Rounds are seeded
//! from the master seed by index, so reports are reproducible bit-for-bit
//! regardless of thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{estimate_misclassification, mc_simex, simex, SimexConfig};
use crate::data::{design_with, split, Dataset, EconData, EconSample, Partition};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, tree_prediction_matrix, ForestParams, Task};
use crate::forestiv::{
    averaging_estimate, forest_iv_prepared, sample_split_iv, subset_tree_iv, ForestIVOutput,
    ForestIvConfig, Prepared,
};
use crate::regression::{empirical_mse, ols, EstimateResult};
use crate::seed::{derive_seed, rng_for};

/// A univariate additive component `m(f)` on `f ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    /// `amplitude · sin(2π · frequency · f)`
    Sine { amplitude: f64, frequency: f64 },
    /// `coefficient · (f − 0.5)^exponent`
    Power { coefficient: f64, exponent: i32 },
    /// `slope · (f − 0.5)`
    Linear { slope: f64 },
    /// `height` when `f ≥ at`, else 0
    Step { at: f64, height: f64 },
}

impl Component {
    pub fn eval(&self, f: f64) -> f64 {
        match *self {
            Component::Sine {
                amplitude,
                frequency,
            } => amplitude * (2.0 * std::f64::consts::PI * frequency * f).sin(),
            Component::Power {
                coefficient,
                exponent,
            } => coefficient * (f - 0.5).powi(exponent),
            Component::Linear { slope } => slope * (f - 0.5),
            Component::Step { at, height } => {
                if f >= at {
                    height
                } else {
                    0.0
                }
            }
        }
    }
}

/// Additive ground truth `X = offset + scale · (Σⱼ mⱼ(fⱼ) + ζ)` over uniform
/// features; in binary mode `X` is the indicator that the latent sum exceeds
/// its sample median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub n_features: usize,
    /// Component `j` applies to feature `j`; remaining features are noise.
    pub components: Vec<Component>,
    /// Standard deviation of ζ.
    pub noise_sd: f64,
    pub scale: f64,
    pub offset: f64,
    pub binary: bool,
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            n_features: 10,
            components: vec![
                Component::Sine {
                    amplitude: 1.0,
                    frequency: 1.0,
                },
                Component::Power {
                    coefficient: 4.0,
                    exponent: 2,
                },
                Component::Linear { slope: 2.0 },
                Component::Sine {
                    amplitude: 1.0,
                    frequency: 0.5,
                },
                Component::Step {
                    at: 0.5,
                    height: 1.0,
                },
            ],
            noise_sd: 0.5,
            scale: 1.0,
            offset: 0.0,
            binary: false,
        }
    }
}

impl TruthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features < 1 {
            return Err(Error::invalid("truth needs at least one feature"));
        }
        if self.components.len() > self.n_features {
            return Err(Error::invalid("more components than features"));
        }
        if !(self.noise_sd >= 0.0) || !self.scale.is_finite() || !self.offset.is_finite() {
            return Err(Error::invalid("invalid truth noise, scale or offset"));
        }
        Ok(())
    }
}

/// Default additive truth with `p` features.
pub fn synthesize_truth(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    let mut spec = TruthSpec {
        n_features: p,
        ..TruthSpec::default()
    };
    spec.components.truncate(p);
    synthesize_truth_with(n, &spec, seed)
}

pub fn synthesize_truth_with(n: usize, spec: &TruthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::ZeroRows);
    }
    let p = spec.n_features;
    let mut rng = rng_for(seed, "truth", 0);
    let unit = Uniform::new(0.0, 1.0);
    let features: Vec<f64> = (0..n * p).map(|_| unit.sample(&mut rng)).collect();
    let latent: Vec<f64> = (0..n)
        .map(|i| {
            let row = &features[i * p..(i + 1) * p];
            let m: f64 = spec.components.iter().zip(row).map(|(c, &f)| c.eval(f)).sum();
            let zeta = if spec.noise_sd > 0.0 {
                spec.noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            m + zeta
        })
        .collect();
    let truth = if spec.binary {
        let mut sorted = latent.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        latent.iter().map(|&v| if v > median { 1.0 } else { 0.0 }).collect()
    } else {
        latent.iter().map(|&v| spec.offset + spec.scale * v).collect()
    };
    Dataset::from_parts(features, p, truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlDist {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

impl ControlDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ControlDist::Uniform { low, high } => low < high && low.is_finite() && high.is_finite(),
            ControlDist::Normal { mean, sd } => sd >= 0.0 && mean.is_finite() && sd.is_finite(),
            ControlDist::Bernoulli { p } => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid control distribution {self:?}")))
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ControlDist::Uniform { low, high } => rng.gen_range(low..high),
            ControlDist::Normal { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).expect("validated").sample(rng)
                }
            }
            ControlDist::Bernoulli { p } => {
                if rng.gen::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One control drawn to have correlation `rho` with the aggregate
/// prediction error instead of from its own distribution: it keeps the
/// distribution's mean and standard deviation (normal controls only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorCorrelation {
    /// Index into `controls`.
    pub control: usize,
    pub rho: f64,
    /// Build the control from the part of the error that is uncorrelated
    /// with the true covariate, so the control itself is uncorrelated with
    /// it (forest errors are strongly correlated with the truth).
    #[serde(default)]
    pub orthogonal_to_x: bool,
}

/// Outcome equation `y = β₀ + β_x·x + Σ β_k z_k + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    /// `[intercept, x, controls...]`.
    pub beta: Vec<f64>,
    pub controls: Vec<ControlDist>,
    pub noise_sd: f64,
    pub error_correlation: Option<ErrorCorrelation>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec::bike()
    }
}

impl DgpSpec {
    /// `y = 1 + 0.5x + 2z₁ + z₂ + ε`, `z₁ ~ U[−10, 10]`, `z₂ ~ N(0, 10²)`,
    /// `ε ~ N(0, 2²)`.
    pub fn bike() -> Self {
        DgpSpec {
            beta: vec![1.0, 0.5, 2.0, 1.0],
            controls: vec![
                ControlDist::Uniform {
                    low: -10.0,
                    high: 10.0,
                },
                ControlDist::Normal { mean: 0.0, sd: 10.0 },
            ],
            noise_sd: 2.0,
            error_correlation: None,
        }
    }

    /// As [`DgpSpec::bike`] with `z₁ ~ U[−1, 1]`, `z₂ ~ N(0, 1)`.
    pub fn bank() -> Self {
        DgpSpec {
            controls: vec![
                ControlDist::Uniform {
                    low: -1.0,
                    high: 1.0,
                },
                ControlDist::Normal { mean: 0.0, sd: 1.0 },
            ],
            ..DgpSpec::bike()
        }
    }

    /// `z₁ ~ Bernoulli(0.6)`, `z₂ ~ N(0, 1)`, `ε ~ N(0, 0.1²)`.
    pub fn boston() -> Self {
        DgpSpec {
            beta: vec![1.0, 0.5, 2.0, 1.0],
            controls: vec![
                ControlDist::Bernoulli { p: 0.6 },
                ControlDist::Normal { mean: 0.0, sd: 1.0 },
            ],
            noise_sd: 0.1,
            error_correlation: None,
        }
    }

    /// `z₁ ~ U[−1, 1]`, `z₂ ~ N(0, 1)`, `ε ~ N(0, 0.1²)`.
    pub fn cancer() -> Self {
        DgpSpec {
            controls: vec![
                ControlDist::Uniform {
                    low: -1.0,
                    high: 1.0,
                },
                ControlDist::Normal { mean: 0.0, sd: 1.0 },
            ],
            ..DgpSpec::boston()
        }
    }

    /// Boston design with `Corr(z₂, e) = 0.3`, `e` the aggregate prediction
    /// error, and `Corr(z₂, x) = 0`.
    pub fn blindspot() -> Self {
        DgpSpec {
            error_correlation: Some(ErrorCorrelation {
                control: 1,
                rho: 0.3,
                orthogonal_to_x: true,
            }),
            ..DgpSpec::boston()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.controls.len() + 2 {
            return Err(Error::invalid(format!(
                "beta needs {} entries (intercept, x, {} controls), got {}",
                self.controls.len() + 2,
                self.controls.len(),
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("non-finite coefficient"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd must be finite and nonnegative"));
        }
        for c in &self.controls {
            c.validate()?;
        }
        if let Some(ec) = &self.error_correlation {
            if !(ec.rho.abs() < 1.0) {
                return Err(Error::invalid("error correlation must lie in (−1, 1)"));
            }
            match self.controls.get(ec.control) {
                Some(ControlDist::Normal { .. }) => {}
                _ => {
                    return Err(Error::invalid(
                        "error correlation must target a normal control",
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string(), "x".to_string()];
        names.extend((1..=self.controls.len()).map(|k| format!("z{k}")));
        names
    }
}

/// Draws controls and noise and computes the outcome for true `x_values`.
/// `prediction_error` is required when the spec correlates a control with it.
pub fn simulate_econ(
    dgp: &DgpSpec,
    x_values: &[f64],
    prediction_error: Option<&[f64]>,
    seed: u64,
) -> Result<EconSample> {
    dgp.validate()?;
    let n = x_values.len();
    let k = dgp.controls.len();
    let mut rng = rng_for(seed, "econ", 0);
    let mut controls = DMatrix::zeros(n, k + 1);
    controls.column_mut(0).fill(1.0);
    for (c, dist) in dgp.controls.iter().enumerate() {
        for i in 0..n {
            controls[(i, c + 1)] = dist.draw(&mut rng);
        }
    }
    if let Some(ec) = &dgp.error_correlation {
        let e = prediction_error.ok_or_else(|| {
            Error::invalid("error-correlated control needs the prediction error")
        })?;
        if e.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: e.len(),
            });
        }
        let (mean, sd) = match dgp.controls[ec.control] {
            ControlDist::Normal { mean, sd } => (mean, sd),
            _ => unreachable!("validated"),
        };
        let centered = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter().map(|a| a - m).collect::<Vec<f64>>()
        };
        let norm = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
        let ec_dev = centered(e);
        let esd = norm(&ec_dev);
        // Direction the control follows, and its weight so that the
        // correlation with `e` itself is `rho`.
        let (dir, weight) = if ec.orthogonal_to_x {
            let xc = centered(x_values);
            let xx: f64 = xc.iter().map(|a| a * a).sum();
            let k = if xx > 0.0 {
                xc.iter().zip(&ec_dev).map(|(a, b)| a * b).sum::<f64>() / xx
            } else {
                0.0
            };
            let perp: Vec<f64> = ec_dev.iter().zip(&xc).map(|(a, b)| a - k * b).collect();
            let psd = norm(&perp);
            let weight = if psd > 0.0 { ec.rho * esd / psd } else { 0.0 };
            if weight.abs() >= 1.0 {
                return Err(Error::invalid(format!(
                    "error correlation {} unreachable with a control uncorrelated with x",
                    ec.rho
                )));
            }
            (perp.iter().map(|a| if psd > 0.0 { a / psd } else { 0.0 }).collect::<Vec<_>>(), weight)
        } else {
            (ec_dev.iter().map(|a| if esd > 0.0 { a / esd } else { 0.0 }).collect(), ec.rho)
        };
        let w = (1.0 - weight * weight).sqrt();
        for i in 0..n {
            let u: f64 = rng.sample(StandardNormal);
            controls[(i, ec.control + 1)] = mean + sd * (weight * dir[i] + w * u);
        }
    }
    let y = DVector::from_fn(n, |i, _| {
        let mut v = dgp.beta[0] + dgp.beta[1] * x_values[i];
        for c in 0..k {
            v += dgp.beta[c + 2] * controls[(i, c + 1)];
        }
        v
    });
    let noise = DVector::from_fn(n, |_, _| {
        if dgp.noise_sd > 0.0 {
            dgp.noise_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    });
    EconSample::new(y + noise, DVector::from_column_slice(x_values), controls, (0..n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// OLS with the forest prediction in place of the truth.
    Biased,
    /// OLS on the labelled rows with the truth.
    Unbiased,
    ForestIv,
    SampleSplit,
    Subset,
    Averaging,
    Simex,
    McSimex,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Biased => "biased",
            MethodKind::Unbiased => "unbiased",
            MethodKind::ForestIv => "forest_iv",
            MethodKind::SampleSplit => "sample_split",
            MethodKind::Subset => "subset",
            MethodKind::Averaging => "averaging",
            MethodKind::Simex => "simex",
            MethodKind::McSimex => "mc_simex",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            MethodKind::Biased,
            MethodKind::Unbiased,
            MethodKind::ForestIv,
            MethodKind::SampleSplit,
            MethodKind::Subset,
            MethodKind::Averaging,
            MethodKind::Simex,
            MethodKind::McSimex,
        ];
        let norm = s.replace('-', "_");
        all.into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetConfig {
    pub q_percent: f64,
    pub n_draws: usize,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        SubsetConfig {
            q_percent: 50.0,
            n_draws: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truth: TruthSpec,
    pub dgp: DgpSpec,
    pub forest: ForestParams,
    pub n_train: usize,
    pub n_test: usize,
    pub n_unlabel: usize,
    pub methods: Vec<MethodKind>,
    pub rounds: usize,
    pub master_seed: u64,
    pub forest_iv: ForestIvConfig,
    pub simex: SimexConfig,
    pub subset: SubsetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            truth: TruthSpec::default(),
            dgp: DgpSpec::bike(),
            forest: ForestParams::regression(100),
            n_train: 1000,
            n_test: 200,
            n_unlabel: 5000,
            methods: vec![MethodKind::Biased, MethodKind::Unbiased, MethodKind::ForestIv],
            rounds: 30,
            master_seed: 1,
            forest_iv: ForestIvConfig::default(),
            simex: SimexConfig::default(),
            subset: SubsetConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.dgp.validate()?;
        self.forest.validate(self.truth.n_features)?;
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if self.n_train == 0 || self.n_test < 2 {
            return Err(Error::invalid("need n_train ≥ 1 and n_test ≥ 2"));
        }
        let binary = self.truth.binary;
        if binary != (self.forest.task == Task::Classification) {
            return Err(Error::invalid(
                "binary truth requires a classification forest and vice versa",
            ));
        }
        if self.methods.contains(&MethodKind::McSimex) && !binary {
            return Err(Error::invalid("mc_simex needs a binary covariate"));
        }
        if self.methods.contains(&MethodKind::Simex) && binary {
            return Err(Error::invalid("simex needs a continuous covariate; use mc_simex"));
        }
        self.simex.validate()?;
        Ok(())
    }

    fn needs_forest_iv(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m, MethodKind::ForestIv | MethodKind::Averaging))
    }
}

fn truth(n_features: usize, noise_sd: f64, binary: bool) -> TruthSpec {
    TruthSpec {
        n_features,
        noise_sd,
        binary,
        ..TruthSpec::default()
    }
}

/// Named designs; the bundled CLI presets spell out the same settings.
impl ExperimentConfig {
    /// Continuous covariate, 1000/200/5000 rows.
    pub fn bike() -> Self {
        ExperimentConfig {
            truth: truth(7, 1.0, false),
            ..ExperimentConfig::default()
        }
    }

    /// Binary covariate, 1500/500/5000 rows.
    pub fn bank() -> Self {
        ExperimentConfig {
            truth: truth(10, 0.6, true),
            dgp: DgpSpec::bank(),
            forest: ForestParams::classification(100),
            n_train: 1500,
            n_test: 500,
            ..ExperimentConfig::default()
        }
    }

    /// Small continuous sample (200/50/256) with a precise outcome, next to
    /// SIMEX.
    pub fn boston() -> Self {
        ExperimentConfig {
            truth: TruthSpec {
                scale: 6.0,
                offset: 22.5,
                ..truth(13, 0.5, false)
            },
            dgp: DgpSpec::boston(),
            n_train: 200,
            n_test: 50,
            n_unlabel: 256,
            methods: vec![
                MethodKind::Biased,
                MethodKind::Unbiased,
                MethodKind::ForestIv,
                MethodKind::Simex,
            ],
            ..ExperimentConfig::default()
        }
    }

    /// [`ExperimentConfig::boston`] with `z₂` correlated with the prediction
    /// error.
    pub fn blindspot() -> Self {
        ExperimentConfig {
            dgp: DgpSpec::blindspot(),
            ..ExperimentConfig::boston()
        }
    }

    /// Small binary sample (200/50/433), next to MC-SIMEX.
    pub fn cancer() -> Self {
        ExperimentConfig {
            truth: truth(9, 0.3, true),
            dgp: DgpSpec::cancer(),
            forest: ForestParams::classification(100),
            n_train: 200,
            n_test: 50,
            n_unlabel: 433,
            methods: vec![
                MethodKind::Biased,
                MethodKind::Unbiased,
                MethodKind::ForestIv,
                MethodKind::McSimex,
            ],
            ..ExperimentConfig::default()
        }
    }
}

/// Everything one round produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    /// Coefficients per method; `None` when the method gave no estimate.
    pub estimates: BTreeMap<MethodKind, Option<Vec<f64>>>,
    /// Empirical MSE against the labelled-data estimate.
    pub mse: BTreeMap<MethodKind, Option<f64>>,
    pub chosen_hotelling: Option<f64>,
    pub retained: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    /// Two-sided t-test of the across-round mean against the truth.
    pub p_value: f64,
    /// 2.5% and 97.5% percentiles of the across-round estimates.
    pub q025: f64,
    pub q975: f64,
}

impl CoefficientSummary {
    pub fn ci_width(&self) -> f64 {
        self.q975 - self.q025
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub valid_rounds: usize,
    pub failed_rounds: usize,
    pub coefficients: Vec<CoefficientSummary>,
    pub ave_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub summaries: Vec<MethodSummary>,
    pub rounds: Vec<RoundResult>,
    pub mean_chosen_hotelling: Option<f64>,
}

impl ExperimentReport {
    pub fn summary(&self, method: MethodKind) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Summary of the covariate-of-interest coefficient.
    pub fn x_summary(&self, method: MethodKind) -> Option<&CoefficientSummary> {
        self.summary(method).and_then(|s| s.coefficients.get(1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per method × coefficient.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "method,coefficient,truth,mean,sd,p_value,q025,q975,ave_mse,valid_rounds\n",
        );
        for s in &self.summaries {
            for c in &s.coefficients {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.method.as_str(),
                    c.name,
                    c.truth,
                    c.mean,
                    c.sd,
                    c.p_value,
                    c.q025,
                    c.q975,
                    s.ave_mse,
                    s.valid_rounds
                );
            }
        }
        out
    }

    /// Raw per-round estimates, one row per round × method.
    pub fn rounds_csv(&self) -> String {
        let names = self.config.dgp.names();
        let mut out = String::from("round,seed,method");
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        out.push_str(",mse\n");
        for r in &self.rounds {
            for (m, est) in &r.estimates {
                let _ = write!(out, "{},{},{}", r.round, r.seed, m.as_str());
                match est {
                    Some(b) => b.iter().for_each(|v| {
                        let _ = write!(out, ",{v}");
                    }),
                    None => names.iter().for_each(|_| out.push(',')),
                }
                match r.mse.get(m).copied().flatten() {
                    Some(v) => {
                        let _ = writeln!(out, ",{v}");
                    }
                    None => out.push_str(",\n"),
                }
            }
        }
        out
    }
}

/// Data of one round, shared by every method.
pub struct RoundData {
    pub dataset: Dataset,
    pub preds: DMatrix<f64>,
    pub x_hat: Vec<f64>,
    pub econ: EconData,
}

pub fn round_seed(master: u64, round: usize) -> u64 {
    derive_seed(master, "round", round as u64)
}

/// Draws the data of one round: truth, split, forest, predictions, outcome.
pub fn draw_round(config: &ExperimentConfig, seed: u64) -> Result<(RoundData, crate::forest::ForestModel)> {
    let n = config.n_train + config.n_test + config.n_unlabel;
    let truth = synthesize_truth_with(n, &config.truth, derive_seed(seed, "truth", 0))?;
    let d = split(&truth, config.n_train, config.n_test, derive_seed(seed, "split", 0))?;
    let forest = fit_forest(&d, &config.forest, derive_seed(seed, "forest", 0))?;
    let all: Vec<usize> = (0..n).collect();
    let preds = tree_prediction_matrix(&forest, &d, &all)?;
    let x_hat: Vec<f64> = (0..n).map(|i| forest.aggregate(preds.row(i).iter().copied())).collect();
    let x: Vec<f64> = d.truth_column().iter().map(|t| t.expect("synthetic truth")).collect();
    let error: Vec<f64> = x_hat.iter().zip(&x).map(|(a, b)| a - b).collect();
    let sample = simulate_econ(&config.dgp, &x, Some(&error), derive_seed(seed, "econ", 0))?;
    let econ = EconData::new(sample.y, sample.controls)?;
    Ok((
        RoundData {
            dataset: d,
            preds,
            x_hat,
            econ,
        },
        forest,
    ))
}

fn run_round(config: &ExperimentConfig, round: usize) -> Result<RoundResult> {
    let seed = round_seed(config.master_seed, round);
    let (data, _) = draw_round(config, seed)?;
    let d = &data.dataset;
    let fs = config.forest_iv.final_sample;
    let iv_config = ForestIvConfig {
        seed: derive_seed(seed, "forest-iv", 0),
        ..config.forest_iv.clone()
    };
    let prep = Prepared::new(&data.preds, d, &data.econ, fs)?;
    let reference = prep.reference.clone();

    let final_rows = &prep.final_rows;
    let x_hat_final = DVector::from_iterator(final_rows.len(), final_rows.iter().map(|&i| data.x_hat[i]));

    let fiv: Option<ForestIVOutput> = if config.needs_forest_iv() {
        forest_iv_prepared(&prep, &iv_config).ok()
    } else {
        None
    };

    let mut estimates = BTreeMap::new();
    let mut mse = BTreeMap::new();
    for &m in &config.methods {
        let est: Option<EstimateResult> = match m {
            MethodKind::Biased => {
                Some(ols(&prep.final_y, &design_with(&x_hat_final, &prep.final_controls))?)
            }
            MethodKind::Unbiased => Some(reference.clone()),
            MethodKind::ForestIv => fiv.as_ref().and_then(|o| o.chosen_estimate()),
            MethodKind::Averaging => fiv.as_ref().and_then(|o| averaging_estimate(o).ok()),
            MethodKind::Subset => subset_tree_iv(&prep, config.subset.q_percent, config.subset.n_draws, &iv_config)
                .ok()
                .and_then(|o| o.chosen_estimate()),
            MethodKind::SampleSplit => {
                sample_split_iv(d, &data.econ, &config.forest, fs, derive_seed(seed, "sample-split", 0)).ok()
            }
            MethodKind::Simex => {
                let test = d.rows_in(Partition::Test);
                let errs: Vec<f64> = test.iter().map(|&i| data.x_hat[i] - d.truth(i).unwrap()).collect();
                let sigma_e = sample_sd(&errs);
                let cfg = SimexConfig {
                    seed: derive_seed(seed, "simex", 0),
                    ..config.simex.clone()
                };
                Some(simex(&prep.final_y, &x_hat_final, &prep.final_controls, sigma_e, &cfg)?)
            }
            MethodKind::McSimex => {
                let test = d.rows_in(Partition::Test);
                let pred: Vec<f64> = test.iter().map(|&i| data.x_hat[i]).collect();
                let truth = d.truth_for(&test)?;
                let cfg = SimexConfig {
                    seed: derive_seed(seed, "mc-simex", 0),
                    ..config.simex.clone()
                };
                estimate_misclassification(&pred, &truth)
                    .and_then(|pi| mc_simex(&prep.final_y, &x_hat_final, &prep.final_controls, &pi, &cfg))
                    .ok()
            }
        };
        let m_mse = match (m, &est) {
            (MethodKind::Unbiased, Some(_)) => Some(0.0),
            (_, Some(e)) => Some(empirical_mse(e, &reference)?),
            _ => None,
        };
        estimates.insert(m, est.map(|e| e.beta.iter().copied().collect()));
        mse.insert(m, m_mse);
    }
    let chosen = fiv.as_ref().and_then(|o| o.chosen_candidate());
    Ok(RoundResult {
        round,
        seed,
        estimates,
        mse,
        chosen_hotelling: chosen.map(|c| c.hotelling.statistic),
        retained: fiv.as_ref().map(|o| o.retained().count()),
    })
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(config: &ExperimentConfig, rounds: &[RoundResult]) -> Vec<MethodSummary> {
    let names = config.dgp.names();
    config
        .methods
        .iter()
        .map(|&m| {
            let ests: Vec<&Vec<f64>> = rounds
                .iter()
                .filter_map(|r| r.estimates.get(&m).and_then(|e| e.as_ref()))
                .collect();
            let mses: Vec<f64> = rounds.iter().filter_map(|r| r.mse.get(&m).copied().flatten()).collect();
            let valid = ests.len();
            let coefficients = names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let truth = config.dgp.beta[j];
                    let mut vals: Vec<f64> = ests.iter().map(|e| e[j]).collect();
                    if vals.is_empty() {
                        return CoefficientSummary {
                            name: name.clone(),
                            truth,
                            mean: f64::NAN,
                            sd: f64::NAN,
                            p_value: f64::NAN,
                            q025: f64::NAN,
                            q975: f64::NAN,
                        };
                    }
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let sd = if vals.len() > 1 { sample_sd(&vals) } else { 0.0 };
                    let p_value = t_test_p(mean, sd, vals.len(), truth);
                    vals.sort_by(f64::total_cmp);
                    CoefficientSummary {
                        name: name.clone(),
                        truth,
                        mean,
                        sd,
                        p_value,
                        q025: quantile(&vals, 0.025),
                        q975: quantile(&vals, 0.975),
                    }
                })
                .collect();
            MethodSummary {
                method: m,
                valid_rounds: valid,
                failed_rounds: rounds.len() - valid,
                coefficients,
                ave_mse: if mses.is_empty() {
                    f64::NAN
                } else {
                    mses.iter().sum::<f64>() / mses.len() as f64
                },
            }
        })
        .collect()
}

fn t_test_p(mean: f64, sd: f64, n: usize, truth: f64) -> f64 {
    if n < 2 {
        return f64::NAN;
    }
    if sd == 0.0 {
        return if mean == truth { 1.0 } else { 0.0 };
    }
    let t = (mean - truth) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let rounds: Vec<RoundResult> = (0..config.rounds)
        .into_par_iter()
        .map(|r| run_round(config, r))
        .collect::<Result<_>>()?;
    let summaries = summarize(config, &rounds);
    let hs: Vec<f64> = rounds.iter().filter_map(|r| r.chosen_hotelling).collect();
    Ok(ExperimentReport {
        config: config.clone(),
        summaries,
        mean_chosen_hotelling: (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64),
        rounds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    UnlabelSize,
    NoiseSd,
    NTrees,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "unlabel_size" => Ok(SweepAxis::UnlabelSize),
            "noise_sd" => Ok(SweepAxis::NoiseSd),
            "n_trees" => Ok(SweepAxis::NTrees),
            _ => Err(Error::invalid(format!("unknown sweep axis '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: ExperimentReport,
}

/// Re-runs the experiment with one setting varied.
pub fn sensitivity_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match axis {
                SweepAxis::UnlabelSize => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(Error::invalid(format!("invalid unlabelled size {v}")));
                    }
                    cfg.n_unlabel = v as usize;
                }
                SweepAxis::NoiseSd => {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::invalid(format!("invalid noise sd {v}")));
                    }
                    cfg.dgp.noise_sd = v;
                }
                SweepAxis::NTrees => {
                    if !(v >= 2.0 && v.fract() == 0.0) {
                        return Err(Error::invalid(format!("invalid tree count {v}")));
                    }
                    cfg.forest.n_trees = v as usize;
                }
            }
            Ok(SweepPoint {
                value: v,
                report: run_experiment(&cfg)?,
            })
        })
        .collect()
}
