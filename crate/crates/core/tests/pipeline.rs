use forestiv::data::Partition;
use forestiv::forest::{fit_forest, predict_forest, tree_prediction_matrix, ForestModel, ForestParams};
use forestiv::forestiv::{forest_iv_prepared, ForestIvConfig, Prepared};
use forestiv::simlab::{draw_round, round_seed, ExperimentConfig};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::boston();
    c.forest = ForestParams::regression(20);
    c.n_unlabel = 300;
    c
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn forest_is_deterministic_across_thread_counts() {
    let cfg = small();
    let (round, _) = draw_round(&cfg, round_seed(5, 0)).unwrap();
    let d = &round.dataset;
    let fit = |t| in_pool(t, || fit_forest(d, &cfg.forest, 99).unwrap().to_json().unwrap());
    let a = fit(1);
    assert_eq!(a, fit(3));
    assert_ne!(a, fit_forest(d, &cfg.forest, 100).unwrap().to_json().unwrap());
}

#[test]
fn forest_json_round_trip_preserves_predictions() {
    let cfg = small();
    let (round, forest) = draw_round(&cfg, round_seed(6, 0)).unwrap();
    let d = &round.dataset;
    let back = ForestModel::from_json(&forest.to_json().unwrap()).unwrap();
    let rows: Vec<usize> = (0..d.n_rows()).collect();
    assert_eq!(predict_forest(&forest, d, &rows).unwrap(), predict_forest(&back, d, &rows).unwrap());
}

#[test]
fn forest_prediction_is_mean_of_trees() {
    let cfg = small();
    let (round, forest) = draw_round(&cfg, round_seed(7, 0)).unwrap();
    let d = &round.dataset;
    let rows = d.rows_in(Partition::Test);
    let m = tree_prediction_matrix(&forest, d, &rows).unwrap();
    let agg = predict_forest(&forest, d, &rows).unwrap();
    for (i, p) in agg.iter().enumerate() {
        assert!((m.row(i).mean() - p).abs() < 1e-12);
    }
}

#[test]
fn forest_iv_output_is_internally_consistent() {
    let cfg = small();
    for r in 0..3 {
        let (round, _) = draw_round(&cfg, round_seed(11, r)).unwrap();
        let prep = Prepared::new(&round.preds, &round.dataset, &round.econ, cfg.forest_iv.final_sample).unwrap();
        let iv = ForestIvConfig {
            seed: r as u64,
            ..cfg.forest_iv.clone()
        };
        let out = forest_iv_prepared(&prep, &iv).unwrap();
        assert_eq!(out.candidates.len() + out.empty_selections + out.failed.len(), prep.m);
        for c in &out.candidates {
            // Endogenous tree is never its own instrument.
            assert!(!c.selection.instruments.contains(&c.selection.endog_index()));
            assert!(c.selection.trace.len() < prep.m);
            // Instrument sets shrink until the final, unchanged fixed point.
            let sizes: Vec<usize> = c.selection.trace.iter().map(|t| t.1).collect();
            let n = sizes.len();
            assert!(sizes[..n - 1].windows(2).all(|w| w[1] < w[0]));
            assert!(n < 2 || sizes[n - 1] <= sizes[n - 2]);
            assert_eq!(c.retained, c.hotelling.p_value >= out.alpha, "p {}", c.hotelling.p_value);
            assert_eq!(c.retained, c.hotelling.statistic <= out.critical_value + 1e-9);
        }
        match out.chosen_candidate() {
            Some(best) => {
                assert!(best.retained);
                assert!(out.retained().all(|c| best.mse <= c.mse));
            }
            None => assert_eq!(out.retained().count(), 0),
        }
        let again = forest_iv_prepared(&prep, &iv).unwrap();
        assert_eq!(out.to_json().unwrap(), again.to_json().unwrap());
    }
}

#[test]
fn looser_level_never_retains_more() {
    let cfg = small();
    let (round, _) = draw_round(&cfg, round_seed(12, 0)).unwrap();
    let prep = Prepared::new(&round.preds, &round.dataset, &round.econ, cfg.forest_iv.final_sample).unwrap();
    let retained = |alpha: f64| -> Vec<bool> {
        let iv = ForestIvConfig {
            alpha,
            ..cfg.forest_iv.clone()
        };
        forest_iv_prepared(&prep, &iv).unwrap().candidates.iter().map(|c| c.retained).collect()
    };
    let strict = retained(0.01);
    let loose = retained(0.10);
    assert_eq!(strict.len(), loose.len());
    assert!(strict.iter().zip(&loose).all(|(s, l)| *s || !*l));
}

#[test]
fn invalid_alpha_is_rejected() {
    let cfg = small();
    let (round, _) = draw_round(&cfg, round_seed(13, 0)).unwrap();
    let prep = Prepared::new(&round.preds, &round.dataset, &round.econ, cfg.forest_iv.final_sample).unwrap();
    for alpha in [0.0, 1.0, -0.1, f64::NAN] {
        let iv = ForestIvConfig {
            alpha,
            ..cfg.forest_iv.clone()
        };
        assert!(forest_iv_prepared(&prep, &iv).is_err(), "alpha {alpha}");
    }
}
