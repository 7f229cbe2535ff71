//! Acceptance gate. Runs every criterion and prints one PASS/FAIL line each;
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 6 7`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{kkt_violation, lambda_max, random_problem};
use forestiv::baselines::{simex_path, SimexConfig};
use forestiv::data::design_with;
use forestiv::forestiv::{
    binary_cov_diagnostics, forest_iv_prepared, BinaryCellCounts, ForestIvConfig, Prepared, Selector,
};
use forestiv::lasso::{fit_lasso, LassoSettings};
use forestiv::regression::{chi2_sf, hotelling, ols, tsls};
use forestiv::seed::{derive_seed, rng_from};
use forestiv::simlab::{draw_round, round_seed, run_experiment, ExperimentConfig, ExperimentReport, MethodKind};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

const MASTER: u64 = 20240601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn x_mean(r: &ExperimentReport, m: MethodKind) -> f64 {
    r.x_summary(m).expect("method in report").mean
}

fn run(cfg: ExperimentConfig) -> ExperimentReport {
    run_experiment(&ExperimentConfig {
        master_seed: MASTER,
        ..cfg
    })
    .expect("experiment runs")
}

/// Continuous-case correction and precision gain share the same 30 rounds.
fn criteria_1_and_3() -> (Verdict, Verdict) {
    let r = run(ExperimentConfig::bike());
    let biased = x_mean(&r, MethodKind::Biased);
    let fiv = x_mean(&r, MethodKind::ForestIv);
    let (bb, fb) = ((biased - 0.5).abs(), (fiv - 0.5).abs());
    let c1 = verdict(
        bb > 0.04 && fb < 0.03 && fb < 0.5 * bb,
        format!("biased {biased:.4}, ForestIV {fiv:.4} (|bias| {fb:.4} vs {bb:.4})"),
    );
    let sd_f = r.x_summary(MethodKind::ForestIv).unwrap().sd;
    let sd_u = r.x_summary(MethodKind::Unbiased).unwrap().sd;
    let valid = r.summary(MethodKind::ForestIv).unwrap().valid_rounds;
    let c3 = verdict(
        sd_f < sd_u,
        format!("sd ForestIV {sd_f:.4} vs unbiased {sd_u:.4} ({valid}/30 rounds with an estimate)"),
    );
    (c1, c3)
}

fn criterion_2() -> Verdict {
    let r = run(ExperimentConfig::bank());
    let biased = x_mean(&r, MethodKind::Biased);
    let fiv = x_mean(&r, MethodKind::ForestIv);
    verdict(
        0.5 - biased > 0.1 && (fiv - 0.5).abs() < 0.06,
        format!("biased {biased:.4}, ForestIV {fiv:.4}"),
    )
}

/// Classical error: `x̂ = x + e` with `Var(x) = 1`, `Var(e) = 0.25`.
fn criterion_4() -> Verdict {
    let (n, reps) = (1000, 200);
    let (s1, se) = (1.0f64, 0.5f64);
    let cfg = SimexConfig::default();
    let grid: Vec<f64> = std::iter::once(0.0).chain(cfg.lambda_grid.iter().copied()).collect();
    let mut path_vals = vec![Vec::new(); grid.len()];
    let (mut naive, mut corrected) = (Vec::new(), Vec::new());
    for r in 0..reps {
        let mut rng = rng_from(derive_seed(MASTER, "classical", r));
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let rows: Vec<(f64, f64, f64)> = (0..n).map(|_| (s1 * g(), se * g(), g())).collect();
        let x_hat = DVector::from_fn(n, |i, _| rows[i].0 + rows[i].1);
        let controls = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { rows[i].2 });
        let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * rows[i].0 + rows[i].2 + 0.1 * g());
        let path = simex_path(
            &y,
            &x_hat,
            &controls,
            se,
            &SimexConfig {
                seed: derive_seed(MASTER, "classical-simex", r),
                ..cfg.clone()
            },
        )
        .unwrap();
        for (k, m) in path.means.iter().enumerate() {
            path_vals[k].push(m[1]);
        }
        naive.push(path.naive.beta[1]);
        corrected.push(path.extrapolate()[1]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut curve_ok = true;
    let mut worst = 0.0f64;
    for (k, &l) in grid.iter().enumerate() {
        let v = &path_vals[k];
        let m = mean(v);
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let mc_se = sd / (v.len() as f64).sqrt();
        let analytic = 0.5 * s1 * s1 / (s1 * s1 + (1.0 + l) * se * se);
        let z = (m - analytic).abs() / mc_se;
        worst = worst.max(z);
        curve_ok &= z <= 3.0;
    }
    let bn = (mean(&naive) - 0.5).abs();
    let bs = (mean(&corrected) - 0.5).abs();
    let reduction = 1.0 - bs / bn;

    let r = run(ExperimentConfig::boston());
    let fiv = x_mean(&r, MethodKind::ForestIv);
    let sim = x_mean(&r, MethodKind::Simex);
    let sd_f = r.x_summary(MethodKind::ForestIv).unwrap().sd;
    let sd_s = r.x_summary(MethodKind::Simex).unwrap().sd;
    verdict(
        curve_ok && reduction >= 0.7 && (fiv - 0.5).abs() <= (sim - 0.5).abs(),
        format!(
            "classical: bias reduction {:.1}%, worst grid deviation {worst:.2} MC se; \
             housing design: ForestIV {fiv:.4} (sd {sd_f:.4}) vs SIMEX {sim:.4} (sd {sd_s:.4})",
            100.0 * reduction
        ),
    )
}

fn criterion_5() -> Verdict {
    let r = run(ExperimentConfig::blindspot());
    let z2 = |m: MethodKind| r.summary(m).unwrap().coefficients[3].mean;
    let truth = r.config.dgp.beta[3];
    let (naive, sim, fiv) = (z2(MethodKind::Biased), z2(MethodKind::Simex), z2(MethodKind::ForestIv));
    let b = |v: f64| (v - truth).abs();
    verdict(
        b(sim) > b(naive) && b(fiv) < b(naive),
        format!("z2 coefficient (truth {truth}): naive {naive:.4}, SIMEX {sim:.4}, ForestIV {fiv:.4}"),
    )
}

/// All compositions of `total` into `parts` non-negative cells.
fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .flat_map(|first| {
            compositions(total - first, parts - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

fn sign(v: f64) -> i8 {
    if v > 1e-12 {
        1
    } else if v < -1e-12 {
        -1
    } else {
        0
    }
}

fn criterion_6() -> Verdict {
    let (mut cases, mut degenerate, mut t4_bad, mut t3_bad) = (0, 0, 0, 0);
    for cells in compositions(6, 8) {
        // Expand the counts into label vectors and covary directly.
        let (mut x, mut xi, mut xj) = (Vec::new(), Vec::new(), Vec::new());
        let mut counts = BinaryCellCounts::default();
        for (idx, &c) in cells.iter().enumerate() {
            let (a, b, d) = (idx >> 2, (idx >> 1) & 1, idx & 1);
            counts.n[a][b][d] = c;
            for _ in 0..c {
                x.push(a as f64);
                xi.push(b as f64);
                xj.push(d as f64);
            }
        }
        if x.iter().all(|&v| v == x[0]) {
            degenerate += 1;
            continue;
        }
        cases += 1;
        let n = x.len() as f64;
        let cov = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / (n - 1.0)
        };
        let ei: Vec<f64> = xi.iter().zip(&x).map(|(p, t)| p - t).collect();
        let ej: Vec<f64> = xj.iter().zip(&x).map(|(p, t)| p - t).collect();
        let d = binary_cov_diagnostics(&counts).unwrap();
        if sign(cov(&ei, &ej)) != d.theorem4_sign {
            t4_bad += 1;
        }
        let m = |a: usize, b: usize| (counts.n[a][b][0] + counts.n[a][b][1]) as i64;
        let cond = m(1, 0) * (m(0, 0) + 2 * m(0, 1)) + m(0, 1) * m(1, 1);
        let cei_x = sign(cov(&ei, &x));
        let t3_ok = if cond > 0 { cei_x < 0 } else { cei_x == 0 };
        if !t3_ok || t3_ok != d.theorem3_sign_ok {
            t3_bad += 1;
        }
    }
    verdict(
        t4_bad == 0 && t3_bad == 0 && cases + degenerate == 1716,
        format!(
            "{cases} non-degenerate count vectors ({degenerate} with constant X): \
             {t4_bad} pairwise-sign and {t3_bad} error-truth sign mismatches"
        ),
    )
}

/// χ²_k upper tail by Simpson's rule on `u = √t`, where the integrand
/// `2c u^{k−1} e^{−u²/2}` is smooth.
fn chi2_tail_quadrature(h: f64, k: usize) -> f64 {
    let mut gamma = if k % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut a = if k % 2 == 0 { 1.0 } else { 0.5 };
    while a < k as f64 / 2.0 - 1e-9 {
        gamma *= a;
        a += 1.0;
    }
    let c = 1.0 / (2f64.powf(k as f64 / 2.0) * gamma);
    let f = |u: f64| 2.0 * c * u.powi(k as i32 - 1) * (-u * u / 2.0).exp();
    let (lo, hi) = (h.sqrt(), h.sqrt() + 40.0);
    let steps = 200_000;
    let w = (hi - lo) / steps as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        s += f(lo + i as f64 * w) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * w / 3.0
}

fn criterion_7() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    // 2SLS with x instrumenting itself, and exactly identified Wald ratio.
    let (mut self_err, mut wald_err) = (0.0f64, 0.0f64);
    for s in 0..50 {
        let mut rng = rng_from(derive_seed(MASTER, "tsls", s));
        let n = 100;
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let z: Vec<f64> = (0..n).map(|_| g()).collect();
        let w: Vec<f64> = (0..n).map(|_| g()).collect();
        let x = DVector::from_fn(n, |i, _| 0.8 * w[i] + 0.3 * z[i] + g());
        let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * x[i] - z[i] + g());
        let controls = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
        let a = tsls(&y, &x, &controls, &DMatrix::from_column_slice(n, 1, x.as_slice())).unwrap();
        let b = ols(&y, &design_with(&x, &controls)).unwrap();
        self_err = self_err.max(((&a.beta - &b.beta).norm() / b.beta.norm()).max((&a.vcov - &b.vcov).norm() / b.vcov.norm()));

        let ones = DMatrix::from_element(n, 1, 1.0);
        let wm = DMatrix::from_column_slice(n, 1, &w);
        let iv = tsls(&y, &x, &ones, &wm).unwrap();
        let (mw, mx, my) = (w.iter().sum::<f64>() / n as f64, x.mean(), y.mean());
        let cwy: f64 = (0..n).map(|i| (w[i] - mw) * (y[i] - my)).sum();
        let cwx: f64 = (0..n).map(|i| (w[i] - mw) * (x[i] - mx)).sum();
        let ratio = cwy / cwx;
        wald_err = wald_err.max((iv.beta[1] - ratio).abs() / ratio.abs());
    }
    ok &= self_err < 1e-10 && wald_err < 1e-10;
    notes.push(format!("2SLS vs OLS {self_err:.1e}, Wald {wald_err:.1e}"));

    let mut worst_kkt = 0.0f64;
    for seed in 0..1000 {
        let (x, y) = random_problem(derive_seed(MASTER, "kkt", seed));
        let lambda = lambda_max(&x, &y) * rng_from(seed).gen_range(0.01..1.1);
        let fit = fit_lasso(&x, &y, lambda, 1e-10, 100_000).unwrap();
        worst_kkt = worst_kkt.max(if fit.converged { kkt_violation(&x, &y, &fit) } else { f64::INFINITY });
    }
    ok &= worst_kkt < 1e-6;
    notes.push(format!("lasso KKT worst {worst_kkt:.1e} over 1000"));

    // Two independent samples from one model: the test should reject at
    // its nominal level.
    let draws = 2000;
    let mut rejections = 0;
    for s in 0..draws {
        let mut rng = rng_from(derive_seed(MASTER, "hotelling", s));
        let fit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = 200;
            let mut g = || rng.sample::<f64, _>(StandardNormal);
            let design = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { g() });
            let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * design[(i, 1)] - design[(i, 2)] + g());
            ols(&y, &design).unwrap()
        };
        let (a, b) = (fit(&mut rng), fit(&mut rng));
        if hotelling(&a, &b).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / draws as f64;
    ok &= (0.03..=0.07).contains(&rate);
    notes.push(format!("Hotelling size {rate:.4}"));

    let mut tail_err = 0.0f64;
    for k in 1..=12 {
        for h in [0.05, 0.5, 1.0, 2.0, 3.84, 6.0, 10.0, 20.0, 40.0] {
            tail_err = tail_err.max((chi2_sf(h, k) - chi2_tail_quadrature(h, k)).abs());
        }
    }
    ok &= tail_err < 1e-6;
    notes.push(format!("χ² tail {tail_err:.1e}"));
    verdict(ok, notes.join("; "))
}

/// Tree-prediction matrix with known structure: column 0 is the endogenous
/// tree, `valid` columns carry independent errors, `invalid` columns share
/// column 0's error, `weak` columns are unrelated to the truth.
fn planted(seed: u64, n_test: usize, n_pool: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, Vec<usize>, Vec<usize>) {
    let (valid, invalid, weak) = (12, 2, 2);
    let m = 1 + valid + invalid + weak;
    let mut rng = rng_from(seed);
    let n = n_test + n_pool;
    let mut g = || rng.sample::<f64, _>(StandardNormal);
    let truth: Vec<f64> = (0..n).map(|_| g()).collect();
    let e0: Vec<f64> = (0..n).map(|_| 0.5 * g()).collect();
    let preds = DMatrix::from_fn(n, m, |i, j| {
        if j == 0 {
            truth[i] + e0[i]
        } else if j <= valid {
            truth[i] + 0.5 * g()
        } else if j <= valid + invalid {
            truth[i] + e0[i] + 0.2 * g()
        } else {
            g()
        }
    });
    let test = preds.rows(0, n_test).into_owned();
    let truth_test = DVector::from_fn(n_test, |i, _| truth[i]);
    let invalid_cols = (valid + 1..=valid + invalid).collect();
    let weak_cols = (valid + invalid + 1..m).collect();
    (test, truth_test, preds, invalid_cols, weak_cols)
}

fn criterion_8() -> Verdict {
    let settings = LassoSettings::default();
    let trials = 50;
    let (mut clean, mut bad_runs) = (0, 0);
    for t in 0..trials {
        let (test, truth, pool, invalid, weak) = planted(derive_seed(MASTER, "planted", t), 200, 1000);
        let sel = Selector::new(&test, &truth, &pool, &settings, t).unwrap().select(0).unwrap();
        if !terminates(&sel.trace, test.ncols()) {
            bad_runs += 1;
        }
        if sel.instruments.iter().all(|j| !invalid.contains(j) && !weak.contains(j)) {
            clean += 1;
        }
    }

    // Every tree of a forest grown on the synthetic design.
    let cfg = ExperimentConfig {
        n_unlabel: 1000,
        ..ExperimentConfig::bike()
    };
    let (data, _) = draw_round(&cfg, round_seed(MASTER, 0)).unwrap();
    let prep = Prepared::new(&data.preds, &data.dataset, &data.econ, cfg.forest_iv.final_sample).unwrap();
    let selector = prep.selector(&cfg.forest_iv).unwrap();
    let mut forest_runs = 0;
    for i in 0..prep.m {
        let sel = selector.select(i).unwrap();
        forest_runs += 1;
        if !terminates(&sel.trace, prep.m) {
            bad_runs += 1;
        }
    }
    verdict(
        bad_runs == 0 && clean * 10 >= trials * 9,
        format!(
            "planted invalid/weak excluded in {clean}/{trials} trials; \
             {bad_runs} of {} selection runs broke termination or shrinkage",
            trials + forest_runs
        ),
    )
}

/// At most `M − 1` iterations, and the instrument set shrinks until it is
/// fixed or empty.
fn terminates(trace: &[(usize, usize)], m: usize) -> bool {
    let mut prev = m - 1;
    for (k, &(_, s)) in trace.iter().enumerate() {
        let last = k + 1 == trace.len();
        if s > prev || (!last && s == prev) {
            return false;
        }
        prev = s;
    }
    !trace.is_empty() && trace.len() <= m - 1
}

fn criterion_9() -> Verdict {
    let sizes = [500usize, 5000, 20000];
    let seeds = 10;
    let mut widths = Vec::new();
    let mut missing = 0;
    for &n_unlabel in &sizes {
        let cfg = ExperimentConfig {
            n_unlabel,
            ..ExperimentConfig::bike()
        };
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..seeds {
            let seed = round_seed(MASTER, s);
            let (data, _) = draw_round(&cfg, seed).unwrap();
            let prep = Prepared::new(&data.preds, &data.dataset, &data.econ, cfg.forest_iv.final_sample).unwrap();
            let iv = ForestIvConfig {
                seed: derive_seed(seed, "forest-iv", 0),
                ..cfg.forest_iv.clone()
            };
            match forest_iv_prepared(&prep, &iv).unwrap().chosen_estimate() {
                Some(e) => {
                    total += 2.0 * 1.96 * e.std_errors()[1];
                    count += 1;
                }
                None => missing += 1,
            }
        }
        widths.push(total / count.max(1) as f64);
    }
    verdict(
        widths.windows(2).all(|w| w[1] < w[0]),
        format!(
            "mean 95% CI width at n_unlabel 500/5000/20000: {:.4} / {:.4} / {:.4} ({missing} rounds without estimate)",
            widths[0], widths[1], widths[2]
        ),
    )
}

fn criterion_10() -> Verdict {
    let mut cfg = ExperimentConfig::bike();
    cfg.master_seed = MASTER;
    cfg.rounds = 3;
    cfg.n_unlabel = 400;
    cfg.forest.n_trees = 20;
    cfg.methods = vec![
        MethodKind::Biased,
        MethodKind::Unbiased,
        MethodKind::ForestIv,
        MethodKind::Averaging,
        MethodKind::Subset,
        MethodKind::SampleSplit,
        MethodKind::Simex,
    ];
    cfg.subset.n_draws = 5;
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap().to_json().unwrap())
    };
    let a = in_pool(1);
    let b = in_pool(1);
    let c = in_pool(4);
    verdict(
        a == b && a == c,
        format!("{} bytes; repeat identical: {}, 1 vs 4 threads identical: {}", a.len(), a == b, a == c),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let want = |c: usize| selected.is_empty() || selected.contains(&c);
    let mut results: Vec<(usize, Verdict, f64)> = Vec::new();
    let timed = |c: usize, f: &dyn Fn() -> Verdict, results: &mut Vec<(usize, Verdict, f64)>| {
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        println!("[{}] criterion {c}: {} ({secs:.0}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((c, v, secs));
    };
    for (c, f) in [
        (6usize, criterion_6 as fn() -> Verdict),
        (7, criterion_7),
        (8, criterion_8),
        (10, criterion_10),
        (4, criterion_4),
        (5, criterion_5),
        (2, criterion_2),
        (9, criterion_9),
    ] {
        if want(c) {
            timed(c, &f, &mut results);
        }
    }
    if want(1) || want(3) {
        let t = Instant::now();
        let (v1, v3) = criteria_1_and_3();
        let secs = t.elapsed().as_secs_f64();
        for (c, v) in [(1, v1), (3, v3)] {
            if want(c) {
                println!("[{}] criterion {c}: {} ({secs:.0}s, shared run)", if v.pass { "PASS" } else { "FAIL" }, v.detail);
                results.push((c, v, secs));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
