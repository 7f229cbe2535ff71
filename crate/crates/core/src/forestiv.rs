//! ForestIV: individual trees of a forest serve as the endogenous covariate
//! and as instruments for one another.
//!
//! For each tree `i` an iterative two-step lasso picks instruments among the
//! other trees: first drop trees whose predictions explain tree `i`'s
//! labelled error (exclusion), then keep those that predict tree `i` on the
//! pooled test + unlabelled rows (relevance). Every tree with a non-empty
//! instrument set yields a 2SLS candidate; candidates statistically
//! indistinguishable from the labelled-data OLS estimate are retained and the
//! one with the smallest empirical MSE is chosen.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{design_with, Dataset, EconData, Partition};
use crate::error::{Error, Result};
use crate::forest::{fit_forest_rows, predict_forest, tree_prediction_matrix, ForestModel, ForestParams};
use crate::lasso::{cv_lasso_moments, FoldMoments, LassoSettings};
use crate::linalg::PivotedQr;
use crate::regression::{
    chi2_critical, empirical_mse, hotelling, ols, tsls, EstimateResult, HotellingResult, Method,
};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSample {
    /// Unlabelled rows only.
    #[default]
    Unlabel,
    /// Labelled and unlabelled rows, predictions used throughout.
    LabelPlusUnlabel,
}

impl FinalSample {
    pub fn includes(self, p: Partition) -> bool {
        match self {
            FinalSample::Unlabel => p == Partition::Unlabel,
            FinalSample::LabelPlusUnlabel => true,
        }
    }
}

impl std::str::FromStr for FinalSample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabel" => Ok(FinalSample::Unlabel),
            "label_plus_unlabel" | "label-plus-unlabel" => Ok(FinalSample::LabelPlusUnlabel),
            other => Err(Error::invalid(format!("unknown final sample '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestIvConfig {
    pub alpha: f64,
    pub final_sample: FinalSample,
    pub lasso: LassoSettings,
    /// Seeds the cross-validation folds of the selection lassos.
    pub seed: u64,
}

impl Default for ForestIvConfig {
    fn default() -> Self {
        ForestIvConfig {
            alpha: 0.05,
            final_sample: FinalSample::Unlabel,
            lasso: LassoSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IVSelection {
    /// Trees averaged into the endogenous covariate (a single tree normally).
    pub endogenous: Vec<usize>,
    pub instruments: Vec<usize>,
    /// `(|V|, |S|)` after each iteration.
    pub trace: Vec<(usize, usize)>,
    pub converged: bool,
    pub iterations: usize,
}

impl IVSelection {
    pub fn endog_index(&self) -> usize {
        self.endogenous[0]
    }
}

/// Precomputed moments for repeated instrument selection over one set of
/// tree predictions.
pub struct Selector {
    m: usize,
    test: FoldMoments,
    pool: FoldMoments,
    settings: LassoSettings,
}

impl Selector {
    /// `tree_pred_test` and `truth_test` cover the test rows; `tree_pred_pool`
    /// covers test ∪ unlabelled rows.
    pub fn new(
        tree_pred_test: &DMatrix<f64>,
        truth_test: &DVector<f64>,
        tree_pred_pool: &DMatrix<f64>,
        settings: &LassoSettings,
        seed: u64,
    ) -> Result<Self> {
        let m = tree_pred_test.ncols();
        if m < 2 {
            return Err(Error::invalid("instrument selection needs at least 2 trees"));
        }
        if tree_pred_pool.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: tree_pred_pool.ncols(),
            });
        }
        if tree_pred_test.nrows() == 0 {
            return Err(Error::invalid("test partition is empty"));
        }
        if truth_test.len() != tree_pred_test.nrows() {
            return Err(Error::DimensionMismatch {
                expected: tree_pred_test.nrows(),
                got: truth_test.len(),
            });
        }
        let n_test = tree_pred_test.nrows();
        let block = DMatrix::from_fn(n_test, m + 1, |r, c| {
            if c < m {
                tree_pred_test[(r, c)]
            } else {
                truth_test[r]
            }
        });
        let folds_test = settings.n_folds.min(n_test);
        let folds_pool = settings.n_folds.min(tree_pred_pool.nrows());
        Ok(Selector {
            m,
            test: FoldMoments::new(&block, folds_test, derive_seed(seed, "cv-test", 0))?,
            pool: FoldMoments::new(tree_pred_pool, folds_pool, derive_seed(seed, "cv-pool", 0))?,
            settings: settings.clone(),
        })
    }

    pub fn n_trees(&self) -> usize {
        self.m
    }

    /// Selection for tree `i` among all other trees.
    pub fn select(&self, i: usize) -> Result<IVSelection> {
        if i >= self.m {
            return Err(Error::invalid(format!("tree index {i} out of range")));
        }
        let others = (0..self.m).filter(|&j| j != i).collect();
        self.select_for(&[i], others)
    }

    /// Selection for the average of `endogenous` trees among `candidates`.
    pub fn select_for(&self, endogenous: &[usize], candidates: Vec<usize>) -> Result<IVSelection> {
        if endogenous.is_empty() {
            return Err(Error::invalid("empty endogenous tree set"));
        }
        let w = 1.0 / endogenous.len() as f64;
        let x_hat: Vec<(usize, f64)> = endogenous.iter().map(|&j| (j, w)).collect();
        let mut error = x_hat.clone();
        error.push((self.m, -1.0));

        let max_iter = candidates.len().max(1);
        let mut curr = candidates;
        let mut trace = Vec::new();
        loop {
            // Exclusion: keep trees that do not explain the labelled error.
            let valid: Vec<usize> = if curr.is_empty() {
                Vec::new()
            } else {
                let fit = cv_lasso_moments(&self.test, &curr, &error, &self.settings)?.fit;
                curr.iter()
                    .zip(&fit.coefficients)
                    .filter(|(_, &b)| b == 0.0)
                    .map(|(&j, _)| j)
                    .collect()
            };
            // Relevance: keep those that predict the endogenous covariate.
            let strong: Vec<usize> = if valid.is_empty() {
                Vec::new()
            } else {
                let fit = cv_lasso_moments(&self.pool, &valid, &x_hat, &self.settings)?.fit;
                valid
                    .iter()
                    .zip(&fit.coefficients)
                    .filter(|(_, &b)| b != 0.0)
                    .map(|(&j, _)| j)
                    .collect()
            };
            trace.push((valid.len(), strong.len()));
            let fixed = strong == curr;
            assert!(
                fixed || strong.len() < curr.len(),
                "instrument set failed to shrink"
            );
            assert!(trace.len() <= max_iter, "selection exceeded M − 1 iterations");
            if fixed || strong.is_empty() {
                return Ok(IVSelection {
                    endogenous: endogenous.to_vec(),
                    instruments: strong,
                    iterations: trace.len(),
                    trace,
                    converged: true,
                });
            }
            curr = strong;
        }
    }
}

/// Instrument selection for tree `i`.
pub fn select_instruments(
    i: usize,
    tree_pred_test: &DMatrix<f64>,
    truth_test: &DVector<f64>,
    tree_pred_pool: &DMatrix<f64>,
    settings: &LassoSettings,
    seed: u64,
) -> Result<IVSelection> {
    Selector::new(tree_pred_test, truth_test, tree_pred_pool, settings, seed)?.select(i)
}

/// 2SLS for many (endogenous, instrument) choices over one sample.
///
/// `[Z, P]` is factored once; each candidate then works with the coordinates
/// of its columns in the orthonormal basis of that span, which preserves all
/// inner products, so per-candidate cost no longer depends on the row count.
/// Linearly dependent instruments are harmless: only their span is used.
pub struct IvSpace {
    n: usize,
    k: usize,
    coords: DMatrix<f64>,
    qy: DVector<f64>,
    y_perp2: f64,
}

impl IvSpace {
    pub fn new(y: &DVector<f64>, controls: &DMatrix<f64>, trees: &DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if controls.nrows() != n || trees.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: controls.nrows().min(trees.nrows()),
            });
        }
        let k = controls.ncols();
        let a = crate::regression::hstack(controls, trees);
        let qr = PivotedQr::factor(&a);
        let mut w = y.as_slice().to_vec();
        qr.apply_qt(&mut w);
        let r = qr.rank();
        let y_perp2 = w[r..].iter().map(|v| v * v).sum();
        Ok(IvSpace {
            n,
            k,
            coords: qr.span_coordinates(),
            qy: DVector::from_column_slice(&w[..r]),
            y_perp2,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 2SLS of `y` on the averaged `endogenous` trees and the controls,
    /// instrumented by `instruments`.
    pub fn estimate(&self, endogenous: &[usize], instruments: &[usize]) -> Result<EstimateResult> {
        let k = self.k;
        let kk = k + 1;
        let w = instruments.len();
        if w == 0 {
            return Err(Error::invalid("2SLS needs at least one instrument"));
        }
        if self.n <= kk + w {
            return Err(Error::TooFewObservations {
                n: self.n,
                k: kk + w,
            });
        }
        let r = self.coords.nrows();
        let z = self.coords.columns(0, k).into_owned();
        let wt = 1.0 / endogenous.len() as f64;
        let mut tx = DVector::zeros(r);
        for &j in endogenous {
            tx += self.coords.column(k + j) * wt;
        }
        let first = DMatrix::from_fn(r, w + k, |a, b| {
            if b < w {
                self.coords[(a, k + instruments[b])]
            } else {
                z[(a, b - w)]
            }
        });
        let x_tilde = PivotedQr::factor(&first).project(&tx);
        let c = design_with(&x_tilde, &z);
        let qr2 = PivotedQr::factor(&c);
        if !qr2.is_full_rank() {
            return Err(Error::rank("2SLS second stage [x̃, Z]"));
        }
        let beta = qr2.solve(&self.qy)?;
        let resid = &self.qy - design_with(&tx, &z) * &beta;
        let s2 = (resid.norm_squared() + self.y_perp2) / (self.n - kk) as f64;
        let vcov = qr2.gram_inverse()? * s2;
        Ok(EstimateResult::new(Method::Tsls, beta, vcov, self.n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub estimate: EstimateResult,
    pub hotelling: HotellingResult,
    pub mse: f64,
    pub retained: bool,
    pub selection: IVSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestIVOutput {
    pub candidates: Vec<Candidate>,
    /// Position in `candidates` of the chosen estimate.
    pub chosen: Option<usize>,
    pub reference: EstimateResult,
    pub alpha: f64,
    pub critical_value: f64,
    /// Trees whose selection came back empty.
    pub empty_selections: usize,
    /// Trees whose 2SLS could not be computed, with the reason.
    pub failed: Vec<(usize, String)>,
    pub bootstrap_se: Option<Vec<f64>>,
}

impl ForestIVOutput {
    pub fn chosen_candidate(&self) -> Option<&Candidate> {
        self.chosen.map(|c| &self.candidates[c])
    }

    pub fn chosen_estimate(&self) -> Option<EstimateResult> {
        self.chosen_candidate().map(|c| {
            let mut e = c.estimate.clone();
            e.method = Method::ForestIv;
            e
        })
    }

    pub fn retained(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.retained)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per candidate.
    pub fn to_csv(&self) -> String {
        let k = self.reference.k();
        let mut out = String::from("candidate,endogenous,n_instruments,hotelling,p_value,mse,retained,chosen");
        for name in &self.reference.names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (c, cand) in self.candidates.iter().enumerate() {
            let endog: Vec<String> = cand.selection.endogenous.iter().map(|j| j.to_string()).collect();
            let _ = write!(
                out,
                "{c},{},{},{},{},{},{},{}",
                endog.join(" "),
                cand.selection.instruments.len(),
                cand.hotelling.statistic,
                cand.hotelling.p_value,
                cand.mse,
                cand.retained,
                self.chosen == Some(c)
            );
            for j in 0..k {
                let _ = write!(out, ",{}", cand.estimate.beta[j]);
            }
            out.push('\n');
        }
        out
    }
}

/// Tree predictions and econ data split into the pieces the estimators use.
pub struct Prepared {
    pub m: usize,
    pub test_preds: DMatrix<f64>,
    pub test_truth: DVector<f64>,
    pub pool_preds: DMatrix<f64>,
    pub final_rows: Vec<usize>,
    pub final_preds: DMatrix<f64>,
    pub final_y: DVector<f64>,
    pub final_controls: DMatrix<f64>,
    pub reference: EstimateResult,
}

impl Prepared {
    /// `preds` is the `n × M` tree prediction matrix over every dataset row.
    pub fn new(
        preds: &DMatrix<f64>,
        d: &Dataset,
        econ: &EconData,
        final_sample: FinalSample,
    ) -> Result<Self> {
        let n = d.n_rows();
        if preds.nrows() != n || econ.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if preds.nrows() != n { preds.nrows() } else { econ.len() },
            });
        }
        let test = d.rows_in(Partition::Test);
        let unlabel = d.rows_in(Partition::Unlabel);
        let label: Vec<usize> = (0..n).filter(|&i| d.partition(i) != Partition::Unlabel).collect();
        let pool: Vec<usize> = test.iter().chain(&unlabel).copied().collect();
        let final_rows: Vec<usize> = (0..n).filter(|&i| final_sample.includes(d.partition(i))).collect();

        let k = econ.n_coef();
        if label.len() <= k {
            return Err(Error::TooFewObservations {
                n: label.len(),
                k,
            });
        }
        let x_label = DVector::from_vec(d.truth_for(&label)?);
        let reference = ols(&econ.y.select_rows(&label), &design_with(&x_label, &econ.controls.select_rows(&label)))?;

        Ok(Prepared {
            m: preds.ncols(),
            test_preds: preds.select_rows(&test),
            test_truth: DVector::from_vec(d.truth_for(&test)?),
            pool_preds: preds.select_rows(&pool),
            final_preds: preds.select_rows(&final_rows),
            final_y: econ.y.select_rows(&final_rows),
            final_controls: econ.controls.select_rows(&final_rows),
            final_rows,
            reference,
        })
    }

    pub fn selector(&self, config: &ForestIvConfig) -> Result<Selector> {
        Selector::new(
            &self.test_preds,
            &self.test_truth,
            &self.pool_preds,
            &config.lasso,
            config.seed,
        )
    }

    pub fn iv_space(&self) -> Result<IvSpace> {
        IvSpace::new(&self.final_y, &self.final_controls, &self.final_preds)
    }
}

/// Hotelling screening and minimum-MSE choice over already estimated
/// candidates.
fn assemble(
    prep: &Prepared,
    alpha: f64,
    results: Vec<(IVSelection, Option<Result<EstimateResult>>)>,
) -> Result<ForestIVOutput> {
    let reference = prep.reference.clone();
    let critical_value = chi2_critical(alpha, reference.k());
    let mut candidates = Vec::new();
    let mut empty = 0;
    let mut failed = Vec::new();
    for (selection, est) in results {
        match est {
            None => empty += 1,
            Some(Err(e)) => failed.push((selection.endog_index(), e.to_string())),
            Some(Ok(estimate)) => {
                let h = hotelling(&estimate, &reference)?;
                let mse = empirical_mse(&estimate, &reference)?;
                candidates.push(Candidate {
                    retained: h.statistic < critical_value,
                    estimate,
                    hotelling: h,
                    mse,
                    selection,
                });
            }
        }
    }
    if candidates.is_empty() && failed.is_empty() && empty > 0 {
        return Err(Error::NoEstimate("every instrument selection came back empty".into()));
    }
    let chosen = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.retained)
        .fold(None::<(usize, f64)>, |best, (i, c)| match best {
            Some((_, m)) if m <= c.mse => best,
            _ => Some((i, c.mse)),
        })
        .map(|(i, _)| i);
    Ok(ForestIVOutput {
        candidates,
        chosen,
        reference,
        alpha,
        critical_value,
        empty_selections: empty,
        failed,
        bootstrap_se: None,
    })
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// ForestIV on a prepared round.
pub fn forest_iv_prepared(prep: &Prepared, config: &ForestIvConfig) -> Result<ForestIVOutput> {
    validate_alpha(config.alpha)?;
    let selector = prep.selector(config)?;
    let space = prep.iv_space()?;
    let results: Vec<_> = (0..prep.m)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let sel = selector.select(i)?;
            let est = (!sel.instruments.is_empty()).then(|| space.estimate(&sel.endogenous, &sel.instruments));
            Ok((sel, est))
        })
        .collect::<Result<_>>()?;
    assemble(prep, config.alpha, results)
}

/// ForestIV from a precomputed `n × M` tree prediction matrix.
pub fn forest_iv_with_predictions(
    preds: &DMatrix<f64>,
    d: &Dataset,
    econ: &EconData,
    config: &ForestIvConfig,
) -> Result<ForestIVOutput> {
    let prep = Prepared::new(preds, d, econ, config.final_sample)?;
    forest_iv_prepared(&prep, config)
}

pub fn forest_iv(
    forest: &ForestModel,
    d: &Dataset,
    econ: &EconData,
    config: &ForestIvConfig,
) -> Result<ForestIVOutput> {
    let all: Vec<usize> = (0..d.n_rows()).collect();
    let preds = tree_prediction_matrix(forest, d, &all)?;
    forest_iv_with_predictions(&preds, d, econ, config)
}

/// Random subsets of `⌈qM/100⌉` trees, averaged, as the endogenous covariate;
/// instruments are selected among the remaining trees.
pub fn subset_tree_iv(
    prep: &Prepared,
    q_percent: f64,
    n_draws: usize,
    config: &ForestIvConfig,
) -> Result<ForestIVOutput> {
    validate_alpha(config.alpha)?;
    if !(q_percent > 0.0 && q_percent < 100.0) {
        return Err(Error::invalid("subset percentage must lie strictly between 0 and 100"));
    }
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be positive"));
    }
    let m = prep.m;
    let size = ((q_percent * m as f64 / 100.0).ceil() as usize).max(1);
    if size >= m {
        return Err(Error::invalid("subset leaves no trees for instruments"));
    }
    let selector = prep.selector(config)?;
    let space = prep.iv_space()?;
    let results: Vec<_> = (0..n_draws)
        .into_par_iter()
        .map(|d| -> Result<_> {
            let mut rng = rng_for(config.seed, "subset-draw", d as u64);
            let mut subset = sample(&mut rng, m, size).into_vec();
            subset.sort_unstable();
            let rest = (0..m).filter(|j| subset.binary_search(j).is_err()).collect();
            let sel = selector.select_for(&subset, rest)?;
            let est = (!sel.instruments.is_empty()).then(|| space.estimate(&sel.endogenous, &sel.instruments));
            Ok((sel, est))
        })
        .collect::<Result<_>>()?;
    assemble(prep, config.alpha, results)
}

/// Unweighted mean of the retained candidates. The covariance is the mean of
/// their covariances, which is descriptive only.
pub fn averaging_estimate(out: &ForestIVOutput) -> Result<EstimateResult> {
    let retained: Vec<&Candidate> = out.retained().collect();
    if retained.is_empty() {
        return Err(Error::NoEstimate("no retained candidates to average".into()));
    }
    let r = retained.len() as f64;
    let k = out.reference.k();
    let mut beta = DVector::zeros(k);
    let mut vcov = DMatrix::zeros(k, k);
    for c in &retained {
        beta += &c.estimate.beta;
        vcov += &c.estimate.vcov;
    }
    Ok(EstimateResult::new(Method::ForestIv, beta / r, vcov / r, retained[0].estimate.n)
        .with_names(out.reference.names.clone())
        .with_caveat("mean of retained candidates' covariances; not a sampling variance"))
}

/// Two forests on disjoint random halves of the training rows; the first
/// forest's prediction is instrumented by the second's.
pub fn sample_split_iv(
    d: &Dataset,
    econ: &EconData,
    params: &ForestParams,
    final_sample: FinalSample,
    seed: u64,
) -> Result<EstimateResult> {
    let mut train = d.rows_in(Partition::Train);
    let min_half = 2 * params.min_node().max(1);
    if train.len() < 2 * min_half {
        return Err(Error::InsufficientRows {
            needed: 2 * min_half,
            available: train.len(),
        });
    }
    use rand::seq::SliceRandom;
    train.shuffle(&mut rng_for(seed, "sample-split", 0));
    let (a, b) = train.split_at(train.len() / 2);
    let f1 = fit_forest_rows(d, a, params, derive_seed(seed, "sample-split-forest", 1))?;
    let f2 = fit_forest_rows(d, b, params, derive_seed(seed, "sample-split-forest", 2))?;
    let rows: Vec<usize> = (0..d.n_rows()).filter(|&i| final_sample.includes(d.partition(i))).collect();
    let x = DVector::from_vec(predict_forest(&f1, d, &rows)?);
    let w = DMatrix::from_vec(rows.len(), 1, predict_forest(&f2, d, &rows)?);
    let s = econ.sample(&rows, x)?;
    let mut e = tsls(&s.y, &s.x, &s.controls, &w)?;
    e.method = Method::Tsls;
    Ok(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub se: Vec<f64>,
    pub replicates: usize,
    pub degenerate: usize,
}

/// Resamples rows with replacement within each partition and reruns
/// `pipeline` on each replicate. `pipeline` receives the resampled row ids and
/// a replicate seed and returns the chosen coefficients, or `None` when the
/// replicate produced no estimate.
pub fn bootstrap_se<F>(d: &Dataset, b: usize, seed: u64, pipeline: F) -> Result<BootstrapSummary>
where
    F: Fn(&[usize], u64) -> Result<Option<DVector<f64>>> + Sync,
{
    if b < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 replicates"));
    }
    let groups: Vec<Vec<usize>> = [Partition::Train, Partition::Test, Partition::Unlabel]
        .iter()
        .map(|&p| d.rows_in(p))
        .collect();
    let draws: Vec<Option<DVector<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, "bootstrap", r as u64);
            let rows: Vec<usize> = groups
                .iter()
                .flat_map(|g| {
                    (0..g.len())
                        .map(|_| g[rng.gen_range(0..g.len())])
                        .collect::<Vec<_>>()
                })
                .collect();
            pipeline(&rows, derive_seed(seed, "bootstrap-pipeline", r as u64))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&DVector<f64>> = draws.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::NoEstimate("every bootstrap replicate was degenerate".into()));
    }
    let k = ok[0].len();
    let n = ok.len() as f64;
    let se = (0..k)
        .map(|j| {
            if ok.len() < 2 {
                return 0.0;
            }
            let mean = ok.iter().map(|v| v[j]).sum::<f64>() / n;
            (ok.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSummary {
        se,
        replicates: b,
        degenerate: b - ok.len(),
    })
}

/// Counts of `(X, X̂ᵢ, X̂ⱼ)` over `{0,1}³`, indexed `n[x][i][j]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCellCounts {
    pub n: [[[u64; 2]; 2]; 2],
}

impl BinaryCellCounts {
    pub fn from_labels(x: &[u8], xi: &[u8], xj: &[u8]) -> Result<Self> {
        if xi.len() != x.len() || xj.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: xi.len().min(xj.len()),
            });
        }
        let mut c = BinaryCellCounts::default();
        for k in 0..x.len() {
            if x[k] > 1 || xi[k] > 1 || xj[k] > 1 {
                return Err(Error::invalid("labels must be 0 or 1"));
            }
            c.n[x[k] as usize][xi[k] as usize][xj[k] as usize] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.n.iter().flatten().flatten().sum()
    }

    fn get(&self, a: usize, b: usize, c: usize) -> i128 {
        self.n[a][b][c] as i128
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryCovDiagnostics {
    /// Sample covariances (divisor `N − 1`), with `e = X̂ − X`.
    pub cov_ei_x: f64,
    pub cov_ei_ej: f64,
    /// `Cov(e_j, X̂_i)`.
    pub cov_ej_xhat: f64,
    /// Sign of `Cov(e_i, X)` is negative exactly when
    /// `n₁₀(n₀₀ + 2n₀₁) + n₀₁n₁₁ > 0` (zero otherwise).
    pub theorem3_sign_ok: bool,
    /// Value of the sign condition for `Cov(e_i, e_j)`, in probabilities.
    pub theorem4_condition: f64,
    /// Exact signs from integer arithmetic.
    pub cov_ei_ej_sign: i8,
    pub theorem4_sign: i8,
    /// All mass in one `X` cell; covariances reported as zero.
    pub degenerate: bool,
}

/// `N · Σab − Σa Σb` over the cells, where `f` maps a cell to `(a, b)`.
fn scaled_cov(c: &BinaryCellCounts, f: impl Fn(i128, i128, i128) -> (i128, i128)) -> i128 {
    let (mut n, mut sa, mut sb, mut sab) = (0i128, 0i128, 0i128, 0i128);
    for x in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let w = c.get(x, i, j);
                let (a, b) = f(x as i128, i as i128, j as i128);
                n += w;
                sa += w * a;
                sb += w * b;
                sab += w * a * b;
            }
        }
    }
    n * sab - sa * sb
}

pub fn binary_cov_diagnostics(c: &BinaryCellCounts) -> Result<BinaryCovDiagnostics> {
    let n = c.total();
    if n < 2 {
        return Err(Error::InsufficientRows {
            needed: 2,
            available: n as usize,
        });
    }
    let nf = n as f64;
    let denom = nf * (nf - 1.0);
    let x1: i128 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| c.get(1, i, j)).sum();
    let degenerate = x1 == 0 || x1 == n as i128;

    let ei_x = scaled_cov(c, |x, i, _| (i - x, x));
    let ei_ej = scaled_cov(c, |x, i, j| (i - x, j - x));
    let ej_xi = scaled_cov(c, |x, i, j| (j - x, i));

    // Marginal counts of (X, X̂ᵢ).
    let m = |a: usize, b: usize| c.get(a, b, 0) + c.get(a, b, 1);
    let t3 = m(1, 0) * (m(0, 0) + 2 * m(0, 1)) + m(0, 1) * m(1, 1);
    let theorem3_sign_ok = if t3 > 0 { ei_x < 0 } else { ei_x == 0 };

    let p0 = c.get(0, 0, 0) + c.get(0, 0, 1) + c.get(0, 1, 0) + c.get(0, 1, 1);
    let p1 = x1;
    let t4 = (c.get(0, 0, 0) + c.get(1, 1, 1)) * (c.get(0, 1, 1) + c.get(1, 0, 0))
        + 2 * (p0 - c.get(0, 0, 0)) * c.get(1, 0, 0)
        + 2 * (p1 - c.get(1, 1, 1)) * c.get(0, 1, 1)
        + (c.get(0, 1, 0) - c.get(1, 0, 1)) * (c.get(1, 1, 0) - c.get(0, 0, 1));

    let scale = |v: i128| if degenerate { 0.0 } else { v as f64 / denom };
    Ok(BinaryCovDiagnostics {
        cov_ei_x: scale(ei_x),
        cov_ei_ej: scale(ei_ej),
        cov_ej_xhat: scale(ej_xi),
        theorem3_sign_ok,
        theorem4_condition: t4 as f64 / (nf * nf),
        cov_ei_ej_sign: ei_ej.signum() as i8,
        theorem4_sign: t4.signum() as i8,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Diagnostic {
    /// `cov[j][i] = Cov(X̂ⱼ, eᵢ)` on the test rows; the diagonal is zero.
    pub cov: Vec<Vec<f64>>,
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Covariances between each tree's prediction and every other tree's error.
pub fn theorem1_from_predictions(preds: &DMatrix<f64>, truth: &DVector<f64>) -> Result<Theorem1Diagnostic> {
    let (n, m) = preds.shape();
    if n < 3 {
        return Err(Error::InsufficientRows {
            needed: 3,
            available: n,
        });
    }
    if truth.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: truth.len(),
        });
    }
    let centered = |v: DVector<f64>| {
        let mean = v.mean();
        v.map(|x| x - mean)
    };
    let xc: Vec<DVector<f64>> = (0..m).map(|j| centered(preds.column(j).into_owned())).collect();
    let ec: Vec<DVector<f64>> = (0..m).map(|i| centered(preds.column(i) - truth)).collect();
    let mut cov = vec![vec![0.0; m]; m];
    let (mut sum, mut sum_abs, mut max_abs) = (0.0, 0.0, 0.0f64);
    for j in 0..m {
        for i in 0..m {
            if i == j {
                continue;
            }
            let v = xc[j].dot(&ec[i]) / (n - 1) as f64;
            cov[j][i] = v;
            sum += v;
            sum_abs += v.abs();
            max_abs = max_abs.max(v.abs());
        }
    }
    let pairs = (m * m.saturating_sub(1)).max(1) as f64;
    Ok(Theorem1Diagnostic {
        cov,
        mean: sum / pairs,
        mean_abs: sum_abs / pairs,
        max_abs,
    })
}

pub fn theorem1_diagnostic(forest: &ForestModel, d: &Dataset) -> Result<Theorem1Diagnostic> {
    let test = d.rows_in(Partition::Test);
    let preds = tree_prediction_matrix(forest, d, &test)?;
    theorem1_from_predictions(&preds, &DVector::from_vec(d.truth_for(&test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentDiagnostics {
    pub endogenous: Vec<usize>,
    pub n_selected: usize,
    pub first_stage_f: f64,
    pub exclusion_r2: f64,
    pub first_stage_f_all: f64,
    pub exclusion_r2_all: f64,
}

/// Relevance and exclusion diagnostics for a selection, next to the same
/// diagnostics with every other tree as instrument.
pub fn instrument_diagnostics(prep: &Prepared, sel: &IVSelection) -> Result<InstrumentDiagnostics> {
    use crate::regression::{exclusion_r2, first_stage_f};
    let wt = 1.0 / sel.endogenous.len() as f64;
    let combine = |p: &DMatrix<f64>| {
        let mut v = DVector::zeros(p.nrows());
        for &j in &sel.endogenous {
            v += p.column(j) * wt;
        }
        v
    };
    let x_final = combine(&prep.final_preds);
    let e_test = combine(&prep.test_preds) - &prep.test_truth;
    let all: Vec<usize> = (0..prep.m).filter(|j| !sel.endogenous.contains(j)).collect();
    let f = |cols: &[usize]| -> Result<(f64, f64)> {
        let w_final = prep.final_preds.select_columns(cols);
        let w_test = prep.test_preds.select_columns(cols);
        Ok((
            first_stage_f(&x_final, &w_final, &prep.final_controls)?,
            exclusion_r2(&e_test, &w_test)?,
        ))
    };
    let (fs, ex) = f(&sel.instruments)?;
    let (fs_all, ex_all) = f(&all).unwrap_or((f64::NAN, f64::NAN));
    Ok(InstrumentDiagnostics {
        endogenous: sel.endogenous.clone(),
        n_selected: sel.instruments.len(),
        first_stage_f: fs,
        exclusion_r2: ex,
        first_stage_f_all: fs_all,
        exclusion_r2_all: ex_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    #[test]
    fn iv_space_matches_tsls() {
        let mut rng = rng_from(5);
        let n = 300;
        let m = 8;
        let base = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let trees = DMatrix::from_fn(n, m, |i, _| base[i] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let controls = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y = DVector::from_fn(n, |i, _| {
            1.0 + 0.5 * base[i] + 2.0 * controls[(i, 1)] + controls[(i, 2)] + rng.sample::<f64, _>(StandardNormal)
        });
        let space = IvSpace::new(&y, &controls, &trees).unwrap();
        for (endog, inst) in [(vec![0], vec![1, 2, 5]), (vec![3], vec![7]), (vec![1, 2], vec![0, 4, 6])] {
            let fast = space.estimate(&endog, &inst).unwrap();
            let x = DVector::from_fn(n, |i, _| endog.iter().map(|&j| trees[(i, j)]).sum::<f64>() / endog.len() as f64);
            let slow = tsls(&y, &x, &controls, &trees.select_columns(&inst)).unwrap();
            for j in 0..4 {
                assert_relative_eq!(fast.beta[j], slow.beta[j], epsilon = 1e-10, max_relative = 1e-10);
                for l in 0..4 {
                    assert_relative_eq!(fast.vcov[(j, l)], slow.vcov[(j, l)], epsilon = 1e-12, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn binary_diagnostics_perfect_tree() {
        let x = [0, 0, 1, 1, 1, 0];
        let xj = [1, 0, 1, 0, 1, 0];
        let c = BinaryCellCounts::from_labels(&x, &x, &xj).unwrap();
        let d = binary_cov_diagnostics(&c).unwrap();
        assert_eq!(d.cov_ei_x, 0.0);
        assert!(d.theorem3_sign_ok);
    }

    #[test]
    fn binary_diagnostics_degenerate() {
        let c = BinaryCellCounts::from_labels(&[1, 1, 1], &[0, 1, 1], &[1, 0, 1]).unwrap();
        let d = binary_cov_diagnostics(&c).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.cov_ei_ej, 0.0);
    }

    #[test]
    fn averaging_two_candidates() {
        let est = |b: f64| EstimateResult::new(Method::Tsls, DVector::from_vec(vec![b]), DMatrix::identity(1, 1), 10);
        let sel = IVSelection {
            endogenous: vec![0],
            instruments: vec![1],
            trace: vec![(1, 1)],
            converged: true,
            iterations: 1,
        };
        let cand = |b: f64| Candidate {
            estimate: est(b),
            hotelling: HotellingResult {
                statistic: 0.0,
                dof: 1,
                p_value: 1.0,
                singular: false,
            },
            mse: 0.0,
            retained: true,
            selection: sel.clone(),
        };
        let out = ForestIVOutput {
            candidates: vec![cand(0.4), cand(0.6)],
            chosen: Some(0),
            reference: est(0.5),
            alpha: 0.05,
            critical_value: 3.84,
            empty_selections: 0,
            failed: vec![],
            bootstrap_se: None,
        };
        let avg = averaging_estimate(&out).unwrap();
        assert_relative_eq!(avg.beta[0], 0.5, epsilon = 1e-15);
        assert!(avg.caveat.is_some());
    }
}
