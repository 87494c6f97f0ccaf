//! Out-of-sample loss and forecast comparison tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_REPS: usize = 1000;
pub const DEFAULT_RESTART_PROB: f64 = 0.1;

/// Squared errors `(actual - forecast)^2`.
pub fn squared_errors(actuals: &[f64], forecasts: &[f64]) -> Result<Vec<f64>> {
    if actuals.len() != forecasts.len() {
        return Err(Error::DimensionMismatch {
            expected: actuals.len(),
            found: forecasts.len(),
        });
    }
    if actuals.is_empty() {
        return Err(Error::InsufficientData("empty forecast window".into()));
    }
    Ok(actuals
        .iter()
        .zip(forecasts)
        .map(|(a, f)| (a - f).powi(2))
        .collect())
}

/// Average squared combined forecast error.
pub fn ascfe(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    let e = squared_errors(actuals, forecasts)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Mean and sample standard deviation (`n - 1` divisor; 0 for a single value).
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Direction of a one-sided comparison of method `a` against method `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    /// `a` has smaller expected loss than `b`.
    #[serde(rename = "a<b")]
    Less,
    /// `a` has larger expected loss than `b`.
    #[serde(rename = "a>b")]
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMeta {
    pub n: usize,
    pub lag: Option<usize>,
    pub bootstrap_reps: Option<usize>,
    pub restart_prob: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: String,
    pub meta: TestMeta,
}

/// Bartlett-weighted long-run variance of `d` around its mean.
pub fn bartlett_lrv(d: &[f64], lag: usize) -> f64 {
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    let gamma = |j: usize| {
        (j..n)
            .map(|t| (d[t] - mean) * (d[t - j] - mean))
            .sum::<f64>()
            / n as f64
    };
    let mut lrv = gamma(0);
    for j in 1..=lag.min(n - 1) {
        lrv += 2.0 * (1.0 - j as f64 / (lag + 1) as f64) * gamma(j);
    }
    lrv
}

/// Diebold–Mariano test on `d_t = loss_a - loss_b` with a Bartlett long-run
/// variance at lag `floor(n^{1/3})` and a standard normal reference.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::DimensionMismatch {
            expected: loss_a.len(),
            found: loss_b.len(),
        });
    }
    let n = loss_a.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "DM test needs at least 5 losses, found {n}"
        )));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let lag = (n as f64).cbrt().floor() as usize;
    let meta = TestMeta {
        n,
        lag: Some(lag),
        bootstrap_reps: None,
        restart_prob: None,
        seed: None,
    };
    let label = match alternative {
        Alternative::Less => "a<b",
        Alternative::Greater => "a>b",
    }
    .to_string();
    let mean = d.iter().sum::<f64>() / n as f64;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 0.5,
            alternative: label,
            meta,
        });
    }
    let lrv = bartlett_lrv(&d, lag);
    if !(lrv > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let statistic = mean / (lrv / n as f64).sqrt();
    let normal = Normal::standard();
    let p_value = match alternative {
        Alternative::Less => normal.cdf(statistic),
        Alternative::Greater => normal.sf(statistic),
    };
    Ok(TestResult {
        statistic,
        p_value,
        alternative: label,
        meta,
    })
}

/// Stationary-bootstrap index series: geometric blocks with restart
/// probability `q`, wrapping around the end of the sample.
pub fn stationary_bootstrap_indices(n: usize, q: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n);
    let mut i = rng.random_range(0..n);
    idx.push(i);
    for _ in 1..n {
        i = if rng.random::<f64>() < q {
            rng.random_range(0..n)
        } else {
            (i + 1) % n
        };
        idx.push(i);
    }
    idx
}

/// White's Reality Check: is any candidate better than the benchmark?
///
/// Statistic `max_k sqrt(n) mean(bench - cand_k)`; the null distribution
/// comes from recentered stationary-bootstrap resamples sharing one index
/// series across candidates. Replicate `b` draws from stream `b` of a
/// ChaCha generator seeded with `seed`, so results do not depend on
/// scheduling.
pub fn rc_test(
    benchmark: &[f64],
    candidates: &[Vec<f64>],
    reps: usize,
    q: f64,
    seed: u64,
) -> Result<TestResult> {
    let n = benchmark.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "reality check needs at least 10 losses, found {n}"
        )));
    }
    if reps < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 bootstrap replicates, got {reps}"
        )));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("restart probability must lie in (0,1), got {q}")));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate losses".into()));
    }
    let d: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
            Ok(benchmark.iter().zip(c).map(|(b, c)| b - c).collect())
        })
        .collect::<Result<_>>()?;
    let root_n = (n as f64).sqrt();
    let means: Vec<f64> = d.iter().map(|dk| dk.iter().sum::<f64>() / n as f64).collect();
    let statistic = means.iter().fold(f64::NEG_INFINITY, |a, &m| a.max(root_n * m));
    let exceed: usize = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx = stationary_bootstrap_indices(n, q, &mut rng);
            let v_star = d
                .iter()
                .zip(&means)
                .map(|(dk, m)| root_n * (idx.iter().map(|&i| dk[i]).sum::<f64>() / n as f64 - m))
                .fold(f64::NEG_INFINITY, f64::max);
            usize::from(v_star >= statistic)
        })
        .sum();
    Ok(TestResult {
        statistic,
        p_value: exceed as f64 / reps as f64,
        alternative: "candidate<benchmark".into(),
        meta: TestMeta {
            n,
            lag: None,
            bootstrap_reps: Some(reps),
            restart_prob: Some(q),
            seed: Some(seed),
        },
    })
}
