//! Shared inputs for the benchmarks.

use forestiv::forest::ForestParams;
use forestiv::seed::rng_from;
use forestiv::simlab::{draw_round, round_seed, ExperimentConfig, RoundData};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense Gaussian regression problem with a sparse signal.
pub fn lasso_problem(n: usize, q: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = rng_from(seed);
    let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| x[(i, 0)] - 0.5 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

/// Bike-style design with a smaller unlabelled pool.
pub fn bike(n_trees: usize, n_unlabel: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::bike();
    c.forest = ForestParams::regression(n_trees);
    c.n_unlabel = n_unlabel;
    c
}

pub fn round(cfg: &ExperimentConfig) -> RoundData {
    draw_round(cfg, round_seed(cfg.master_seed, 0)).expect("draw round").0
}
