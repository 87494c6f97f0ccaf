#![allow(dead_code)]

pub mod oracle;
pub mod stacked;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tvcomb::ForecastPanel;

/// Panel with iid normal forecasts and a target that loads smoothly on them.
pub fn random_panel(n_obs: usize, p: usize, seed: u64) -> ForecastPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let rows: Vec<Vec<f64>> = (0..n_obs).map(|_| (0..p).map(|_| z()).collect()).collect();
    let mut y = vec![z()];
    for (t, r) in rows.iter().enumerate() {
        let tau = (t + 1) as f64 / n_obs as f64;
        let signal: f64 = r
            .iter()
            .enumerate()
            .map(|(j, f)| (0.5 + 0.3 * (tau * (j + 1) as f64).sin()) * f)
            .sum();
        y.push(0.2 + signal + 0.5 * z());
    }
    ForecastPanel::unlabeled(y, rows).unwrap()
}

/// Panel whose target depends on the first `relevant` columns only.
pub fn sparse_panel(n_obs: usize, p: usize, relevant: usize, seed: u64) -> ForecastPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let rows: Vec<Vec<f64>> = (0..n_obs).map(|_| (0..p).map(|_| z()).collect()).collect();
    let mut y = vec![z()];
    for (t, r) in rows.iter().enumerate() {
        let tau = (t + 1) as f64 / n_obs as f64;
        let signal: f64 = r[..relevant].iter().map(|f| (1.0 + 0.5 * tau) * f).sum();
        y.push(signal + 0.3 * z());
    }
    ForecastPanel::unlabeled(y, rows).unwrap()
}
