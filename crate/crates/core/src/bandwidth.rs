//! Bandwidth choice: leave-one-out cross-validation over a `T^{-1/5}`-scaled
//! grid, and the plug-in optimal bandwidth evaluated from known moments.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::panel::ForecastPanel;
use crate::smoother::{fit_path, KernelSpec};

pub const DEFAULT_C1: f64 = 0.5;
pub const DEFAULT_C2: f64 = 3.0;
pub const DEFAULT_GRID: usize = 20;
/// Points of the uniform quadrature grid on `[0, 1]`.
pub const QUADRATURE_POINTS: usize = 201;

/// Cross-validation score per candidate bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub h_star: f64,
    /// Candidates disqualified by a singular or undersized design.
    pub warnings: Vec<String>,
}

impl CvCurve {
    pub fn min_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["h", "score"])?;
        for (h, s) in self.grid.iter().zip(&self.scores) {
            wtr.write_record([h.to_string(), s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Mean squared leave-one-out one-step error `(y_{s+1} - X_s' beta_s)^2`
/// over every estimable `s`. Singular or undersized local designs return
/// `+inf` so the candidate drops out of the search.
pub fn cv_score(panel: &ForecastPanel, h: f64, kernel: &KernelSpec) -> Result<f64> {
    match cv_score_checked(panel, h, kernel) {
        Ok(s) => Ok(s),
        Err(e) if e.is_design_failure() => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn cv_score_checked(panel: &ForecastPanel, h: f64, kernel: &KernelSpec) -> Result<f64> {
    let path = fit_path(panel, h, kernel)?;
    let fitted = path.fitted(panel);
    let sse: f64 = fitted
        .iter()
        .enumerate()
        .map(|(i, yhat)| {
            let e = panel.y(path.t_of_row(i) + 1) - yhat;
            e * e
        })
        .sum();
    Ok(sse / fitted.len() as f64)
}

/// Log-spaced grid of `n` points on `[c1 T^{-1/5}, c2 T^{-1/5}]`.
pub fn bandwidth_grid(n_obs: usize, c1: f64, c2: f64, n: usize) -> Result<Vec<f64>> {
    if !(c1 > 0.0) || !(c2 > c1) || !c2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need 0 < c1 < c2, got c1={c1}, c2={c2}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("bandwidth grid must be nonempty".into()));
    }
    let scale = (n_obs as f64).powf(-0.2);
    let (lo, hi) = ((c1 * scale).ln(), (c2 * scale).ln());
    if n == 1 {
        return Ok(vec![c1 * scale]);
    }
    Ok((0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// CV over the default-style log grid.
pub fn select_bandwidth(
    panel: &ForecastPanel,
    kernel: &KernelSpec,
    c1: f64,
    c2: f64,
    n_grid: usize,
) -> Result<CvCurve> {
    let grid = bandwidth_grid(panel.n_obs(), c1, c2, n_grid)?;
    select_bandwidth_on_grid(panel, kernel, &grid)
}

/// CV over an explicit strictly increasing grid. Ties go to the smaller `h`.
pub fn select_bandwidth_on_grid(
    panel: &ForecastPanel,
    kernel: &KernelSpec,
    grid: &[f64],
) -> Result<CvCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("bandwidth grid must be nonempty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || !(grid[0] > 0.0) {
        return Err(Error::InvalidArgument(
            "bandwidth grid must be positive and strictly increasing".into(),
        ));
    }
    let results: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&h| cv_score_checked(panel, h, kernel))
        .collect();
    let mut scores = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) if e.is_design_failure() => {
                warnings.push(e.to_string());
                scores.push(f64::INFINITY);
            }
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    let best = best.ok_or(Error::NoAdmissibleBandwidth)?;
    Ok(CvCurve {
        grid: grid.to_vec(),
        scores,
        h_star: grid[best],
        warnings,
    })
}

/// Design and curvature quantities sampled on the uniform quadrature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginInputs {
    pub dim: usize,
    pub tau: Vec<f64>,
    /// `M(tau)`, row-major `dim x dim` per grid point.
    pub m: Vec<Vec<f64>>,
    /// `V(tau)`, row-major `dim x dim` per grid point.
    pub v: Vec<Vec<f64>>,
    /// `beta''(tau)` per grid point.
    pub beta_dd: Vec<Vec<f64>>,
    pub mu2: f64,
    pub nu0: f64,
}

impl PluginInputs {
    /// Samples the supplied functions on [`QUADRATURE_POINTS`] points in `[0, 1]`.
    pub fn from_fns(
        dim: usize,
        kernel: &KernelSpec,
        m: impl Fn(f64) -> Vec<f64>,
        v: impl Fn(f64) -> Vec<f64>,
        beta_dd: impl Fn(f64) -> Vec<f64>,
    ) -> Self {
        let tau: Vec<f64> = (0..QUADRATURE_POINTS)
            .map(|i| i as f64 / (QUADRATURE_POINTS - 1) as f64)
            .collect();
        Self {
            dim,
            m: tau.iter().map(|&x| m(x)).collect(),
            v: tau.iter().map(|&x| v(x)).collect(),
            beta_dd: tau.iter().map(|&x| beta_dd(x)).collect(),
            tau,
            mu2: kernel.mu2,
            nu0: kernel.nu0,
        }
    }
}

/// Composite Simpson rule on an equally spaced grid with an even number of intervals.
fn simpson(values: &[f64], step: f64) -> f64 {
    let n = values.len() - 1;
    debug_assert!(n % 2 == 0);
    let mut s = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * v;
    }
    s * step / 3.0
}

/// Plug-in optimal bandwidth
/// `T^{-1/5} (2 nu0 int tr[V M^{-1}] / (mu2^2 int beta'' ' M beta''))^{1/5}`.
pub fn plugin_h_opt(inputs: &PluginInputs, n_obs: usize) -> Result<f64> {
    let d = inputs.dim;
    let npts = inputs.tau.len();
    if npts < 3 || npts % 2 == 0 {
        return Err(Error::InvalidArgument(
            "quadrature grid needs an odd number of at least 3 points".into(),
        ));
    }
    let mut num = Vec::with_capacity(npts);
    let mut den = Vec::with_capacity(npts);
    for i in 0..npts {
        let mut l = inputs.m[i].clone();
        cholesky_in_place(&mut l, d).map_err(|_| {
            Error::InvalidArgument(format!("M(tau) not positive definite at tau={}", inputs.tau[i]))
        })?;
        // tr[V M^{-1}] = sum_j (M^{-1} V)_{jj}; solve column by column
        let mut tr = 0.0;
        for j in 0..d {
            let mut col: Vec<f64> = (0..d).map(|r| inputs.v[i][r * d + j]).collect();
            cholesky_solve(&l, d, &mut col);
            tr += col[j];
        }
        num.push(tr);
        let b = &inputs.beta_dd[i];
        let mut quad = 0.0;
        for r in 0..d {
            for c in 0..d {
                quad += b[r] * inputs.m[i][r * d + c] * b[c];
            }
        }
        den.push(quad);
    }
    let step = inputs.tau[1] - inputs.tau[0];
    let num = 2.0 * inputs.nu0 * simpson(&num, step);
    let den = inputs.mu2 * inputs.mu2 * simpson(&den, step);
    if !(den > 0.0) {
        return Err(Error::UndefinedOptimum(
            "curvature integral is zero; the bias term vanishes".into(),
        ));
    }
    Ok((n_obs as f64).powf(-0.2) * (num / den).powf(0.2))
}
