use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forestiv::baselines::{estimate_misclassification, mc_simex, simex, simex_blindspot_check, SimexConfig};
use forestiv::data::{design_with, load_csv, split, Dataset, EconData, Partition, PARTITION_COLUMN};
use forestiv::forest::{fit_forest as grow, predict_forest, tree_prediction_matrix, ForestModel, Task};
use forestiv::forestiv::{
    averaging_estimate, binary_cov_diagnostics, forest_iv_prepared, instrument_diagnostics, sample_split_iv,
    subset_tree_iv, theorem1_from_predictions, BinaryCellCounts, ForestIVOutput, ForestIvConfig, Prepared,
};
use forestiv::regression::{ols, EstimateResult};
use forestiv::seed::derive_seed;
use forestiv::simlab::{
    draw_round, round_seed, run_experiment, sensitivity_sweep, ExperimentConfig, ExperimentReport, MethodKind,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::{out_path, RunConfig};
use crate::{CliError, Mode};

pub struct Context {
    pub cfg: RunConfig,
    pub timestamp: bool,
}

type Res<T> = std::result::Result<T, CliError>;

fn to_value<T: serde::Serialize>(v: &T) -> Res<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

/// Pretty JSON, with `generated_at` unless timestamps are off.
fn render(ctx: &Context, mut v: Value) -> String {
    if ctx.timestamp {
        if let Value::Object(m) = &mut v {
            m.insert(
                "generated_at".into(),
                Value::String(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
            );
        }
    }
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| CliError::Core(e.into()))
}

fn emit(ctx: &Context, v: Value, out: Option<&Path>) -> Res<()> {
    let text = render(ctx, v);
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Loads the CSV and, when it carries no partition tags, applies the
/// configured random split.
fn load_data(ctx: &Context, path: &Path) -> Res<Dataset> {
    let d = load_csv(path, &ctx.cfg.data.schema())?;
    if d.partitions().iter().any(|&p| p != Partition::Unlabel) {
        return Ok(d);
    }
    match (ctx.cfg.data.n_train, ctx.cfg.data.n_test) {
        (Some(a), Some(b)) => Ok(split(&d, a, b, derive_seed(ctx.cfg.master_seed, "split", 0))?),
        _ => Err(CliError::Config(format!(
            "{} has no `{PARTITION_COLUMN}` column; set data.n_train and data.n_test",
            path.display()
        ))),
    }
}

fn read_columns(path: &Path, names: &[&str]) -> Res<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Core(e.into()))?;
    let header = rdr.headers().map_err(|e| CliError::Core(e.into()))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| CliError::Core(forestiv::Error::MissingColumn(n.to_string())))
        })
        .collect::<Res<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Core(e.into()))?;
        for (k, &c) in idx.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("");
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::Core(forestiv::Error::NonNumeric {
                    column: names[k].to_string(),
                    row,
                    value: cell.to_string(),
                })
            })?;
            cols[k].push(v);
        }
    }
    Ok(cols)
}

/// Outcome and controls (with intercept) from the configured columns.
fn load_econ(ctx: &Context, path: &Path) -> Res<(EconData, Vec<String>)> {
    let data = &ctx.cfg.data;
    let outcome = data
        .outcome
        .as_deref()
        .ok_or_else(|| CliError::Config("data.outcome is required for estimation".into()))?;
    let mut names = vec![outcome];
    names.extend(data.controls.iter().map(String::as_str));
    let cols = read_columns(path, &names)?;
    let n = cols[0].len();
    let y = DVector::from_vec(cols[0].clone());
    let controls = DMatrix::from_fn(n, names.len(), |i, j| if j == 0 { 1.0 } else { cols[j][i] });
    let mut coef = vec!["intercept".to_string(), "x".to_string()];
    coef.extend(data.controls.iter().cloned());
    Ok((EconData::new(y, controls)?, coef))
}

fn load_forest(path: &Path, d: &Dataset) -> Res<ForestModel> {
    let f = ForestModel::load(path)?;
    if f.n_features != d.n_features() {
        return Err(CliError::Core(forestiv::Error::DimensionMismatch {
            expected: f.n_features,
            got: d.n_features(),
        }));
    }
    Ok(f)
}

fn test_metric(forest: &ForestModel, d: &Dataset) -> Res<(String, Option<f64>)> {
    let test = d.rows_in(Partition::Test);
    let name = match forest.task() {
        Task::Regression => "test_rmse",
        Task::Classification => "test_accuracy",
    };
    if test.is_empty() {
        return Ok((name.into(), None));
    }
    let pred = predict_forest(forest, d, &test)?;
    let truth = d.truth_for(&test)?;
    let n = test.len() as f64;
    let v = match forest.task() {
        Task::Regression => (pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt(),
        Task::Classification => pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n,
    };
    Ok((name.into(), Some(v)))
}

/// Copies the CSV with the partition tags in a trailing column.
fn write_partitioned(src: &Path, dst: &Path, d: &Dataset) -> Res<()> {
    let wrap = |e: csv::Error| CliError::Core(e.into());
    let mut rdr = csv::ReaderBuilder::new().from_path(src).map_err(wrap)?;
    let header = rdr.headers().map_err(wrap)?.clone();
    let keep: Vec<usize> = (0..header.len()).filter(|&c| &header[c] != PARTITION_COLUMN).collect();
    let mut w = csv::Writer::from_path(dst).map_err(wrap)?;
    let mut h: Vec<&str> = keep.iter().map(|&c| &header[c]).collect();
    h.push(PARTITION_COLUMN);
    w.write_record(&h).map_err(wrap)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(wrap)?;
        let mut r: Vec<&str> = keep.iter().map(|&c| rec.get(c).unwrap_or("")).collect();
        r.push(d.partition(i).as_str());
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))
}

pub fn fit_forest(ctx: &Context, data: &Path, out: &Path, partitioned: Option<&Path>) -> Res<()> {
    let d = load_data(ctx, data)?;
    let forest = grow(&d, &ctx.cfg.forest, derive_seed(ctx.cfg.master_seed, "forest", 0))?;
    forest.save(out)?;
    if let Some(p) = partitioned {
        write_partitioned(data, p, &d)?;
    }
    let (name, metric) = test_metric(&forest, &d)?;
    let mut v = json!({
        "forest": out.display().to_string(),
        "n_trees": forest.n_trees(),
        "n_train": d.rows_in(Partition::Train).len(),
        "n_test": d.rows_in(Partition::Test).len(),
    });
    v[name] = json!(metric);
    emit(ctx, v, None)
}

pub struct EstimateArgs {
    pub data: PathBuf,
    pub forest: PathBuf,
    pub mode: Mode,
    pub alpha: Option<f64>,
    pub diagnose: bool,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

fn iv_config(ctx: &Context, alpha: Option<f64>) -> ForestIvConfig {
    let mut c = ctx.cfg.forest_iv.clone();
    if let Some(a) = alpha {
        c.alpha = a;
    }
    c.seed = derive_seed(ctx.cfg.master_seed, "forest-iv", 0);
    c
}

fn forest_iv_value(out: &ForestIVOutput) -> Res<Value> {
    let table: Vec<Value> = out
        .candidates
        .iter()
        .enumerate()
        .map(|(c, cand)| {
            json!({
                "candidate": c,
                "endogenous": cand.selection.endogenous,
                "n_instruments": cand.selection.instruments.len(),
                "hotelling": cand.hotelling.statistic,
                "p_value": cand.hotelling.p_value,
                "mse": cand.mse,
                "retained": cand.retained,
            })
        })
        .collect();
    Ok(json!({
        "chosen": to_value(&out.chosen_candidate())?,
        "no_valid_tuple": out.chosen.is_none(),
        "n_retained": out.retained().count(),
        "hotelling_table": table,
        "output": to_value(out)?,
    }))
}

fn named(mut e: EstimateResult, names: &[String]) -> EstimateResult {
    if e.names.len() == names.len() {
        e.names = names.to_vec();
    }
    e
}

pub fn estimate(ctx: &Context, a: &EstimateArgs) -> Res<()> {
    let d = load_data(ctx, &a.data)?;
    let (econ, names) = load_econ(ctx, &a.data)?;
    let forest = load_forest(&a.forest, &d)?;
    let task = forest.task();
    match (a.mode, task) {
        (Mode::Simex, Task::Classification) => {
            return Err(CliError::Config("simex needs a regression forest; use mc-simex".into()))
        }
        (Mode::McSimex, Task::Regression) => {
            return Err(CliError::Config("mc-simex needs a classification forest; use simex".into()))
        }
        _ => {}
    }
    let iv = iv_config(ctx, a.alpha);
    let all: Vec<usize> = (0..d.n_rows()).collect();
    let preds = tree_prediction_matrix(&forest, &d, &all)?;
    let prep = Prepared::new(&preds, &d, &econ, iv.final_sample)?;
    let x_hat: Vec<f64> = (0..d.n_rows()).map(|i| forest.aggregate(preds.row(i).iter().copied())).collect();
    let x_final = DVector::from_iterator(prep.final_rows.len(), prep.final_rows.iter().map(|&i| x_hat[i]));
    let test = d.rows_in(Partition::Test);
    let simex_cfg = SimexConfig {
        seed: derive_seed(ctx.cfg.master_seed, "simex", 0),
        ..ctx.cfg.simex.clone()
    };

    let mut fiv_out = None;
    let result = match a.mode {
        Mode::Biased => to_value(&named(ols(&prep.final_y, &design_with(&x_final, &prep.final_controls))?, &names))?,
        Mode::Unbiased => to_value(&named(prep.reference.clone(), &names))?,
        Mode::SampleSplit => {
            let seed = derive_seed(ctx.cfg.master_seed, "sample-split", 0);
            to_value(&named(sample_split_iv(&d, &econ, &forest.params, iv.final_sample, seed)?, &names))?
        }
        Mode::Forestiv | Mode::Averaging | Mode::Subset => {
            let out = if a.mode == Mode::Subset {
                subset_tree_iv(&prep, ctx.cfg.subset.q_percent, ctx.cfg.subset.n_draws, &iv)?
            } else {
                forest_iv_prepared(&prep, &iv)?
            };
            let v = if a.mode == Mode::Averaging {
                match averaging_estimate(&out) {
                    Ok(e) => json!({ "no_valid_tuple": false, "estimate": to_value(&named(e, &names))? }),
                    Err(_) => json!({ "no_valid_tuple": true, "estimate": null }),
                }
            } else {
                forest_iv_value(&out)?
            };
            if let Some(p) = &a.csv {
                write(p, &out.to_csv())?;
            }
            fiv_out = Some(out);
            v
        }
        Mode::Simex => {
            let errs: Vec<f64> = test.iter().map(|&i| x_hat[i] - d.truth(i).unwrap_or(f64::NAN)).collect();
            let sigma_e = sd(&errs);
            to_value(&named(simex(&prep.final_y, &x_final, &prep.final_controls, sigma_e, &simex_cfg)?, &names))?
        }
        Mode::McSimex => {
            let pred: Vec<f64> = test.iter().map(|&i| x_hat[i]).collect();
            let pi = estimate_misclassification(&pred, &d.truth_for(&test)?)?;
            to_value(&named(mc_simex(&prep.final_y, &x_final, &prep.final_controls, &pi, &simex_cfg)?, &names))?
        }
    };

    let mut v = json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "coefficients": names,
        "result": result,
    });
    if a.diagnose {
        let t1 = theorem1_from_predictions(&prep.test_preds, &prep.test_truth)?;
        let mut diag = json!({ "theorem1": { "mean": t1.mean, "mean_abs": t1.mean_abs, "max_abs": t1.max_abs } });
        if let Some(out) = &fiv_out {
            let per: Vec<Value> = out
                .candidates
                .iter()
                .map(|c| -> Res<Value> {
                    let di = instrument_diagnostics(&prep, &c.selection)?;
                    Ok(json!({
                        "endogenous": di.endogenous,
                        "n_instruments": di.n_selected,
                        "first_stage_f": di.first_stage_f,
                        "exclusion_adj_r2": di.exclusion_r2,
                        "first_stage_f_all_trees": di.first_stage_f_all,
                        "exclusion_adj_r2_all_trees": di.exclusion_r2_all,
                        "hotelling": c.hotelling.statistic,
                        "retained": c.retained,
                    }))
                })
                .collect::<Res<_>>()?;
            diag["candidates"] = Value::Array(per);
        }
        v["diagnostics"] = diag;
    }
    emit(ctx, v, a.out.as_deref())
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn experiment_config(ctx: &Context, rounds: Option<usize>) -> Res<ExperimentConfig> {
    let mut exp = ctx.cfg.experiment.clone();
    exp.master_seed = ctx.cfg.master_seed;
    if let Some(r) = rounds {
        exp.rounds = r;
    }
    exp.validate()?;
    Ok(exp)
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<14} {:>6} {:>10} {:>10} {:>10}", "method", "valid", "mean_x", "sd_x", "ave_mse");
    for s in &report.summaries {
        let x = &s.coefficients[1];
        println!(
            "{:<14} {:>6} {:>10.4} {:>10.4} {:>10.4}",
            s.method.as_str(),
            s.valid_rounds,
            x.mean,
            x.sd,
            s.ave_mse
        );
    }
}

fn write_report(ctx: &Context, dir: &Path, stem: &str, report: &ExperimentReport, extra: Option<Value>) -> Res<()> {
    let mut v = to_value(report)?;
    if let (Value::Object(m), Some(extra)) = (&mut v, extra) {
        m.insert("extra".into(), extra);
    }
    write(&out_path(dir, &format!("{stem}.json"))?, &render(ctx, v))?;
    write(&out_path(dir, &format!("{stem}_summary.csv"))?, &report.summary_csv())?;
    write(&out_path(dir, &format!("{stem}_rounds.csv"))?, &report.rounds_csv())
}

/// One round of synthetic data with outcome and controls, as CSV.
fn write_synthetic(exp: &ExperimentConfig, path: &Path) -> Res<()> {
    let (data, _) = draw_round(exp, round_seed(exp.master_seed, 0))?;
    let d = &data.dataset;
    let wrap = |e: csv::Error| CliError::Core(e.into());
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let k = data.econ.controls.ncols();
    let mut header: Vec<String> = d.feature_names().to_vec();
    header.push("truth".into());
    header.push("y".into());
    header.extend((1..k).map(|c| format!("z{c}")));
    header.push(PARTITION_COLUMN.into());
    w.write_record(&header).map_err(wrap)?;
    for i in 0..d.n_rows() {
        let mut r: Vec<String> = d.row(i).iter().map(|v| v.to_string()).collect();
        r.push(d.truth(i).map(|v| v.to_string()).unwrap_or_default());
        r.push(data.econ.y[i].to_string());
        r.extend((1..k).map(|c| data.econ.controls[(i, c)].to_string()));
        r.push(d.partition(i).as_str().into());
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))
}

pub fn simulate(ctx: Context, rounds: Option<usize>, dir: &Path, data_out: Option<&Path>) -> Res<()> {
    let exp = experiment_config(&ctx, rounds)?;
    if let Some(p) = data_out {
        return write_synthetic(&exp, p);
    }
    match &ctx.cfg.sweep {
        None => {
            let report = run_experiment(&exp)?;
            write_report(&ctx, dir, "report", &report, None)?;
            print_summary(&report);
        }
        Some(sweep) => {
            let points = sensitivity_sweep(&exp, sweep.axis, &sweep.values)?;
            let mut csv = String::from("value,method,valid_rounds,mean_x,sd_x,ci_width_x,ave_mse\n");
            for p in &points {
                for s in &p.report.summaries {
                    let x = &s.coefficients[1];
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        p.value,
                        s.method.as_str(),
                        s.valid_rounds,
                        x.mean,
                        x.sd,
                        x.ci_width(),
                        s.ave_mse
                    ));
                }
            }
            let v = json!({ "axis": to_value(&sweep.axis)?, "points": to_value(&points)? });
            write(&out_path(dir, "sweep.json")?, &render(&ctx, v))?;
            write(&out_path(dir, "sweep_summary.csv")?, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

pub fn benchmark(ctx: Context, rounds: Option<usize>, dir: &Path) -> Res<()> {
    let mut exp = experiment_config(&ctx, rounds)?;
    let corrector = if exp.truth.binary {
        MethodKind::McSimex
    } else {
        MethodKind::Simex
    };
    for m in [MethodKind::Biased, MethodKind::Unbiased, MethodKind::ForestIv, corrector] {
        if !exp.methods.contains(&m) {
            exp.methods.push(m);
        }
    }
    let report = run_experiment(&exp)?;
    let extra = match &ctx.cfg.blindspot {
        Some(design) => {
            let cfg = SimexConfig {
                seed: derive_seed(ctx.cfg.master_seed, "blindspot", 0),
                ..exp.simex.clone()
            };
            Some(json!({ "blindspot": to_value(&simex_blindspot_check(design, &cfg)?)? }))
        }
        None => None,
    };
    write_report(&ctx, dir, "benchmark", &report, extra)?;
    print_summary(&report);
    Ok(())
}

pub fn diagnose(ctx: &Context, data: &Path, forest_path: &Path, out: Option<&Path>) -> Res<()> {
    let d = load_data(ctx, data)?;
    let (econ, _) = load_econ(ctx, data)?;
    let forest = load_forest(forest_path, &d)?;
    let iv = iv_config(ctx, None);
    let all: Vec<usize> = (0..d.n_rows()).collect();
    let preds = tree_prediction_matrix(&forest, &d, &all)?;
    let prep = Prepared::new(&preds, &d, &econ, iv.final_sample)?;
    let selector = prep.selector(&iv)?;
    let mut trees = Vec::with_capacity(prep.m);
    for i in 0..prep.m {
        let sel = selector.select(i)?;
        let mut t = json!({
            "tree": i,
            "n_instruments": sel.instruments.len(),
            "iterations": sel.iterations,
            "converged": sel.converged,
        });
        if !sel.instruments.is_empty() {
            let di = instrument_diagnostics(&prep, &sel)?;
            t["first_stage_f"] = json!(di.first_stage_f);
            t["exclusion_adj_r2"] = json!(di.exclusion_r2);
            t["first_stage_f_all_trees"] = json!(di.first_stage_f_all);
            t["exclusion_adj_r2_all_trees"] = json!(di.exclusion_r2_all);
        }
        trees.push(t);
    }
    let t1 = theorem1_from_predictions(&prep.test_preds, &prep.test_truth)?;
    let mut v = json!({
        "n_trees": prep.m,
        "theorem1": { "mean": t1.mean, "mean_abs": t1.mean_abs, "max_abs": t1.max_abs },
        "trees": trees,
    });
    if forest.task() == Task::Classification {
        v["binary"] = binary_pairs(&prep)?;
    }
    emit(ctx, v, out)
}

/// Error-covariance sign checks over all tree pairs on the test rows.
fn binary_pairs(prep: &Prepared) -> Res<Value> {
    let lab = |v: f64| u8::from(v >= 0.5);
    let x: Vec<u8> = prep.test_truth.iter().map(|&v| lab(v)).collect();
    let cols: Vec<Vec<u8>> = (0..prep.m)
        .map(|j| prep.test_preds.column(j).iter().map(|&v| lab(v)).collect())
        .collect();
    let mut counts = BTreeMap::new();
    let (mut pairs, mut nondeg, mut agree, mut t3) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..prep.m {
        for j in (i + 1)..prep.m {
            let c = binary_cov_diagnostics(&BinaryCellCounts::from_labels(&x, &cols[i], &cols[j])?)?;
            pairs += 1;
            t3 += usize::from(c.theorem3_sign_ok);
            if !c.degenerate {
                nondeg += 1;
                agree += usize::from(c.cov_ei_ej_sign == c.theorem4_sign);
            }
            *counts.entry(c.cov_ei_ej_sign).or_insert(0usize) += 1;
        }
    }
    Ok(json!({
        "pairs": pairs,
        "theorem3_sign_ok": t3,
        "non_degenerate": nondeg,
        "theorem4_sign_agrees": agree,
        "cov_ei_ej_sign_counts": counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
    }))
}
