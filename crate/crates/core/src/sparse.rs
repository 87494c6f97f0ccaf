//! Two-stage penalized local linear estimation for many candidate forecasts.
//!
//! Stage 1 solves a kernel-weighted Lasso at every time point. Stage 2 treats
//! the whole time path of each coefficient as a group and runs group
//! coordinate descent with weights from the SCAD derivative evaluated at the
//! stage-1 path norms (levels) and smoothness measures (slopes). Penalties are
//! tuned by blocked K-fold CV (stage 1) and a modified BIC (stage 2).
//!
//! Both stages work on the standardized panel; [`fit_two_stage`] maps the
//! chosen paths back to the original scale.
//!
//! Scaling conventions. Observation weights are `k_st / T`, so the stacked
//! loss is `(1/2) (Y - sum Xi theta)' K (Y - sum Xi theta)` with `K` holding
//! `k_st / T`. Each group is orthogonalized by a per-`t` scale
//! `a_{i,t} = (sum_s k_st q_{st,i}^2 / T)^{-1/2}`, which makes the group
//! block update an exact group soft-threshold. Penalties apply to the
//! orthogonalized coefficients.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::panel::{standardize, ForecastPanel, Standardizer};
use crate::smoother::{synthesized_window, window_half_width, KernelSpec};

pub const SCAD_A: f64 = 3.7;
pub const STAGE2_TOLERANCE: f64 = 1e-3;
pub const STAGE1_TOLERANCE: f64 = 1e-7;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_LAMBDA_POINTS: usize = 20;
const LAMBDA_RATIO: f64 = 1e-3;

/// Derivative of the SCAD penalty,
/// `lambda [1(x <= lambda) + (a lambda - x)_+ / ((a - 1) lambda) 1(x > lambda)]`.
pub fn scad_derivative(x: f64, lambda: f64, a: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("SCAD derivative needs x >= 0, got {x}")));
    }
    if !(lambda >= 0.0) || !(a > 2.0) {
        return Err(Error::Domain(format!(
            "SCAD derivative needs lambda >= 0 and a > 2, got lambda={lambda}, a={a}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    if x <= lambda {
        Ok(lambda)
    } else {
        Ok((a * lambda - x).max(0.0) / (a - 1.0))
    }
}

/// Tuning parameters for stage 2. The slope penalty `lambda4` equals `lambda3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda3: f64,
    pub a: f64,
    pub h: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda3: f64, h: f64) -> Self {
        Self {
            lambda1,
            lambda3,
            a: SCAD_A,
            h,
            tolerance: STAGE2_TOLERANCE,
            max_sweeps: 5000,
        }
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda4(&self) -> f64 {
        self.lambda3
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda3 >= 0.0
            && self.a > 2.0
            && self.tolerance > 0.0
            && self.h > 0.0
            && self.max_sweeps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid penalty configuration {self:?}")))
        }
    }
}

/// Dense row-major coefficient matrix; row `i` is time `start + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl CoefMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }
}

/// Centered l2 norm of each column over time.
pub fn smoothness_measure(stage1: &CoefMatrix) -> Vec<f64> {
    (0..stage1.n_cols)
        .map(|j| {
            let col = stage1.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

/// All local windows stacked into one design. Time points run over
/// `start..=T+1`; the last one is the forecast origin.
#[derive(Debug, Clone)]
pub struct StackedDesign {
    pub n_obs: usize,
    pub start: usize,
    pub h: f64,
    pub n_regressors: usize,
    /// Row range of each time point.
    pub blocks: Vec<(usize, usize)>,
    pub y: Vec<f64>,
    /// `k_st / T`.
    pub w: Vec<f64>,
    /// `(s - t) / T`.
    pub u: Vec<f64>,
    /// Observed pair index feeding each row (real or mirrored).
    pub source: Vec<usize>,
    /// Column-major regressors: `x[i * n_rows + row]`.
    pub x: Vec<f64>,
    /// `pair_y[t] = y_{t+1}` for `t = 1..=T` (entry 0 unused).
    pub pair_y: Vec<f64>,
    /// `X_t` for `t = 1..=T`, row-major, row `t - 1`.
    pub pair_x: Vec<f64>,
}

impl StackedDesign {
    pub fn build(panel: &ForecastPanel, h: f64, kernel: &KernelSpec, start: usize) -> Result<Self> {
        let n = panel.n_obs();
        if start < 1 || start > n {
            return Err(Error::InvalidArgument(format!("start {start} outside 1..={n}")));
        }
        let m = panel.n_regressors();
        let nf = n as f64;
        let th = nf * h;
        let mut blocks = Vec::new();
        let (mut y, mut w, mut u, mut source) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rows_x: Vec<f64> = Vec::new();
        let mut xbuf = vec![0.0; m];
        for t in start..=n + 1 {
            let lo = y.len();
            for pt in synthesized_window(t, n, h)? {
                let off = pt.offset(t);
                let k = kernel.evaluate(off / th) / h;
                if k == 0.0 {
                    continue;
                }
                y.push(panel.y(pt.y_index));
                w.push(k / nf);
                u.push(off / nf);
                source.push(pt.f_index);
                panel.regressors_into(pt.f_index, &mut xbuf);
                rows_x.extend_from_slice(&xbuf);
            }
            blocks.push((lo, y.len()));
        }
        let n_rows = y.len();
        let mut x = vec![0.0; m * n_rows];
        for (r, row) in rows_x.chunks_exact(m).enumerate() {
            for i in 0..m {
                x[i * n_rows + r] = row[i];
            }
        }
        let mut pair_y = vec![f64::NAN; n + 1];
        let mut pair_x = vec![0.0; n * m];
        for t in 1..=n {
            pair_y[t] = panel.y(t + 1);
            panel.regressors_into(t, &mut pair_x[(t - 1) * m..t * m]);
        }
        Ok(Self {
            n_obs: n,
            start,
            h,
            n_regressors: m,
            blocks,
            y,
            w,
            u,
            source,
            x,
            pair_y,
            pair_x,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_times(&self) -> usize {
        self.blocks.len()
    }

    /// Number of in-sample time points (excludes the origin).
    pub fn n_in_sample(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Group column `g` at `row`: `x_i` for level groups, `u x_i` for slopes.
    #[inline]
    pub fn q(&self, g: usize, row: usize) -> f64 {
        let m = self.n_regressors;
        let n_rows = self.n_rows();
        if g < m {
            self.x[g * n_rows + row]
        } else {
            self.u[row] * self.x[(g - m) * n_rows + row]
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 1: local Lasso
// ---------------------------------------------------------------------------

/// Weighted Lasso `1/2 sum w (y - x'b)^2 + lambda |b|_1` in Gram form.
#[derive(Debug, Clone)]
struct LassoProblem {
    d: usize,
    gram: Vec<f64>,
    xty: Vec<f64>,
}

impl LassoProblem {
    /// Rescaled regressors `(X_s, ((s - t)/(T h)) X_s)`; rows rejected by `keep` are skipped.
    fn local(design: &StackedDesign, ti: usize, keep: impl Fn(usize) -> bool) -> Self {
        let m = design.n_regressors;
        let d = 2 * m;
        let n_rows = design.n_rows();
        let (lo, hi) = design.blocks[ti];
        let mut gram = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        let mut q = vec![0.0; d];
        for r in lo..hi {
            if !keep(design.source[r]) {
                continue;
            }
            let scale = design.u[r] / design.h;
            for i in 0..m {
                q[i] = design.x[i * n_rows + r];
                q[m + i] = scale * q[i];
            }
            let w = design.w[r];
            let wy = w * design.y[r];
            for a in 0..d {
                xty[a] += wy * q[a];
                let wq = w * q[a];
                for b in 0..=a {
                    gram[a * d + b] += wq * q[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[b * d + a] = gram[a * d + b];
            }
        }
        Self { d, gram, xty }
    }

    fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Cyclic coordinate descent with an active-set inner loop, warm-started at `b`.
    fn solve(&self, lambda: f64, b: &mut [f64], tol: f64, max_sweeps: usize) -> Result<usize> {
        let d = self.d;
        let mut gb: Vec<f64> = (0..d).map(|j| dot(&self.gram[j * d..(j + 1) * d], b)).collect();
        let mut sweeps = 0;
        let mut last;
        loop {
            // full sweep
            let full = self.sweep(lambda, b, &mut gb, None);
            sweeps += 1;
            last = full;
            if full < tol {
                return Ok(sweeps);
            }
            // active set until it settles
            let active: Vec<usize> = (0..d).filter(|&j| b[j] != 0.0).collect();
            loop {
                let c = self.sweep(lambda, b, &mut gb, Some(&active));
                sweeps += 1;
                if c < tol || sweeps >= max_sweeps {
                    break;
                }
            }
            if sweeps >= max_sweeps {
                break;
            }
        }
        Err(Error::Convergence {
            context: format!("stage-1 lasso (lambda1={lambda:e})"),
            iterations: sweeps,
            last_change: last,
        })
    }

    fn sweep(&self, lambda: f64, b: &mut [f64], gb: &mut [f64], set: Option<&[usize]>) -> f64 {
        let d = self.d;
        let mut max_change = 0.0_f64;
        let mut update = |j: usize, b: &mut [f64], gb: &mut [f64]| {
            let gjj = self.gram[j * d + j];
            if gjj <= 0.0 {
                b[j] = 0.0;
                return;
            }
            let z = self.xty[j] - gb[j] + gjj * b[j];
            let new = if z > lambda {
                (z - lambda) / gjj
            } else if z < -lambda {
                (z + lambda) / gjj
            } else {
                0.0
            };
            let delta = new - b[j];
            if delta != 0.0 {
                b[j] = new;
                let col = &self.gram[j * d..(j + 1) * d];
                for (g, c) in gb.iter_mut().zip(col) {
                    *g += c * delta;
                }
                max_change = max_change.max(delta.abs() * gjj.sqrt());
            }
        };
        match set {
            Some(s) => s.iter().for_each(|&j| update(j, b, gb)),
            None => (0..d).for_each(|j| update(j, b, gb)),
        }
        max_change
    }
}

/// Stage-1 output: level and slope paths (rows `start..=T+1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Paths {
    pub lambda1: f64,
    pub level: CoefMatrix,
    pub slope: CoefMatrix,
}

/// Splits in-sample time indices `0..n` into `k` contiguous blocks.
fn contiguous_folds(n: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, n.max(1));
    (0..n).map(|i| i * k / n).collect()
}

/// Local Lasso at every time point for a fixed `lambda1` (with `lambda2 = lambda1`).
pub fn stage1_lasso(design: &StackedDesign, lambda1: f64) -> Result<Stage1Paths> {
    if !(lambda1 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    let m = design.n_regressors;
    let sols: Vec<Result<Vec<f64>>> = (0..design.n_times())
        .into_par_iter()
        .map(|ti| {
            let prob = LassoProblem::local(design, ti, |_| true);
            let mut b = vec![0.0; 2 * m];
            prob.solve(lambda1, &mut b, STAGE1_TOLERANCE, 100_000)
                .map_err(|e| match e {
                    Error::Convergence {
                        iterations,
                        last_change,
                        ..
                    } => Error::Convergence {
                        context: format!(
                            "stage-1 lasso at t={} (lambda1={lambda1:e})",
                            design.start + ti
                        ),
                        iterations,
                        last_change,
                    },
                    e => e,
                })?;
            Ok(b)
        })
        .collect();
    assemble_stage1(design, lambda1, sols)
}

fn assemble_stage1(
    design: &StackedDesign,
    lambda1: f64,
    sols: Vec<Result<Vec<f64>>>,
) -> Result<Stage1Paths> {
    let m = design.n_regressors;
    let mut level = CoefMatrix::zeros(design.n_times(), m);
    let mut slope = CoefMatrix::zeros(design.n_times(), m);
    for (ti, b) in sols.into_iter().enumerate() {
        let b = b?;
        level.row_mut(ti).copy_from_slice(&b[..m]);
        for (dst, v) in slope.row_mut(ti).iter_mut().zip(&b[m..]) {
            *dst = v / design.h;
        }
    }
    Ok(Stage1Paths {
        lambda1,
        level,
        slope,
    })
}

/// Largest `lambda1` with a nonzero local Lasso solution at some time point.
pub fn stage1_lambda_max(design: &StackedDesign) -> f64 {
    (0..design.n_times())
        .into_par_iter()
        .map(|ti| LassoProblem::local(design, ti, |_| true).lambda_max())
        .reduce(|| 0.0, f64::max)
}

/// Blocked K-fold CV curve for `lambda1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCv {
    pub lambdas: Vec<f64>,
    pub errors: Vec<f64>,
    pub best: f64,
}

/// Chooses `lambda1` by K-fold CV with contiguous folds over in-sample time.
///
/// The in-sample time points are split into `folds` contiguous blocks. For a
/// time point in block `k` the local Lasso is refit with every pair whose
/// index falls in block `k` removed, and scored on `(y_{t+1} - X_t' beta_t)^2`.
pub fn select_lambda1(design: &StackedDesign, lambdas: &[f64], folds: usize) -> Result<LambdaCv> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda1 grid is empty".into()));
    }
    let m = design.n_regressors;
    let n_in = design.n_in_sample();
    let fold_of = contiguous_folds(n_in, folds);
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    for (i, &f) in fold_of.iter().enumerate() {
        let t = design.start + i;
        if f == bounds.len() {
            bounds.push((t, t));
        } else {
            bounds[f].1 = t;
        }
    }
    let per_t: Vec<Result<Vec<f64>>> = (0..n_in)
        .into_par_iter()
        .map(|ti| {
            let (lo, hi) = bounds[fold_of[ti]];
            let prob = LassoProblem::local(design, ti, |src| src < lo || src > hi);
            let t = design.start + ti;
            let target = design_target(design, t);
            let mut x = vec![0.0; m];
            design_regressors(design, t, &mut x);
            let mut b = vec![0.0; 2 * m];
            let mut errs = Vec::with_capacity(lambdas.len());
            for &lam in lambdas {
                prob.solve(lam, &mut b, STAGE1_TOLERANCE, 100_000)?;
                let e = target - dot(&x, &b[..m]);
                errs.push(e * e);
            }
            Ok(errs)
        })
        .collect();
    let mut errors = vec![0.0; lambdas.len()];
    for r in per_t {
        for (acc, e) in errors.iter_mut().zip(r?) {
            *acc += e;
        }
    }
    for e in &mut errors {
        *e /= n_in as f64;
    }
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    Ok(LambdaCv {
        lambdas: lambdas.to_vec(),
        errors,
        best: lambdas[best],
    })
}

fn design_target(design: &StackedDesign, t: usize) -> f64 {
    design.pair_y[t]
}

fn design_regressors(design: &StackedDesign, t: usize, out: &mut [f64]) {
    let m = design.n_regressors;
    out.copy_from_slice(&design.pair_x[(t - 1) * m..t * m]);
}

/// Descending log-spaced grid from `max` to `max * ratio`.
pub fn log_grid_desc(max: f64, ratio: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![max];
    }
    (0..n)
        .map(|i| max * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Log grid over `[1e-3, 1e1] * sqrt(log p_T / w)` on the standardized scale,
/// in descending order. `p_T = 1` is treated as 2 so the grid is not empty.
pub fn default_lambda3_grid(n_candidates: usize, window: usize, n: usize) -> Vec<f64> {
    let scale = ((n_candidates.max(2) as f64).ln() / window.max(1) as f64).sqrt();
    log_grid_desc(10.0 * scale, 1e-4, n)
}

// ---------------------------------------------------------------------------
// Stage 2: group coordinate descent with SCAD-derivative weights
// ---------------------------------------------------------------------------

/// Stacked design with per-group orthogonalizing scales and a running residual.
/// Groups `0..m` are coefficient levels, `m..2m` their slopes.
#[derive(Debug, Clone)]
pub struct GcdWorkspace<'a> {
    pub design: &'a StackedDesign,
    /// `group_scales[g][ti] = a_{g,t}`, so `(Xi_g A_g)' K (Xi_g A_g) = I`.
    pub group_scales: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

impl GcdWorkspace<'_> {
    pub fn n_groups(&self) -> usize {
        2 * self.design.n_regressors
    }

    /// Diagonal entries of `Xi_g' K Xi_g` before scaling.
    pub fn group_gram(&self, g: usize) -> Vec<f64> {
        self.group_scales[g].iter().map(|a| 1.0 / (a * a)).collect()
    }

    /// `(Xi_g A_g)' K r` at the current residual.
    fn score(&self, g: usize, out: &mut [f64]) {
        let d = self.design;
        for (ti, &(lo, hi)) in d.blocks.iter().enumerate() {
            let mut acc = 0.0;
            for r in lo..hi {
                acc += d.w[r] * d.q(g, r) * self.residual[r];
            }
            out[ti] = acc * self.group_scales[g][ti];
        }
    }

    /// `r -= Xi_g A_g delta`.
    fn update_residual(&mut self, g: usize, delta: &[f64]) {
        let d = self.design;
        for (ti, &(lo, hi)) in d.blocks.iter().enumerate() {
            let step = delta[ti] * self.group_scales[g][ti];
            if step == 0.0 {
                continue;
            }
            for r in lo..hi {
                self.residual[r] -= d.q(g, r) * step;
            }
        }
    }

    fn loss(&self) -> f64 {
        0.5 * self
            .design
            .w
            .iter()
            .zip(&self.residual)
            .map(|(w, r)| w * r * r)
            .sum::<f64>()
    }
}

/// Builds the per-group orthogonalization. Because `Xi_g` holds one column
/// per time point with disjoint row support, `Xi_g' K Xi_g` is diagonal and
/// its inverse Cholesky factor is a per-`t` scaling.
pub fn orthogonalize_groups(design: &StackedDesign) -> Result<GcdWorkspace<'_>> {
    let n_groups = 2 * design.n_regressors;
    let mut group_scales = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut scales = Vec::with_capacity(design.n_times());
        for (ti, &(lo, hi)) in design.blocks.iter().enumerate() {
            let gram: f64 = (lo..hi).map(|r| design.w[r] * design.q(g, r).powi(2)).sum();
            if !(gram > 0.0) {
                return Err(Error::DegenerateGroup {
                    group: g,
                    t: design.start + ti,
                });
            }
            scales.push(1.0 / gram.sqrt());
        }
        group_scales.push(scales);
    }
    Ok(GcdWorkspace {
        design,
        group_scales,
        residual: design.y.clone(),
    })
}

/// Per-group penalty weights: `tau_i = p'_{lambda3}(|B_i|)` for levels and
/// `h tau*_i = h p'_{lambda4}(D_i)` for slopes.
pub fn group_weights(stage1: &Stage1Paths, config: &PenaltyConfig) -> Result<Vec<f64>> {
    let m = stage1.level.n_cols;
    let in_sample = in_sample_rows(&stage1.level);
    let d = smoothness_measure(&in_sample);
    let mut tau = Vec::with_capacity(2 * m);
    for j in 0..m {
        tau.push(scad_derivative(norm2(&in_sample.column(j)), config.lambda3, config.a)?);
    }
    for dj in d {
        tau.push(config.h * scad_derivative(dj, config.lambda4(), config.a)?);
    }
    Ok(tau)
}

/// Rows `start..=T` of a path matrix whose last row is the forecast origin.
pub fn in_sample_rows(mat: &CoefMatrix) -> CoefMatrix {
    CoefMatrix {
        n_rows: mat.n_rows - 1,
        n_cols: mat.n_cols,
        data: mat.data[..(mat.n_rows - 1) * mat.n_cols].to_vec(),
    }
}

/// Estimated paths from both stages. Row `i` is time `start + i`; the final
/// row is the forecast origin `T + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedPaths {
    pub start: usize,
    pub n_obs: usize,
    pub stage1: CoefMatrix,
    pub stage1_slope: CoefMatrix,
    /// Smoothness of each stage-1 column over in-sample time.
    pub smoothness: Vec<f64>,
    pub stage2: CoefMatrix,
    pub stage2_slope: CoefMatrix,
    /// Columns (0 = intercept) whose stage-2 path is not identically zero.
    pub active_set: Vec<usize>,
}

impl StagedPaths {
    pub fn origin_beta(&self) -> &[f64] {
        self.stage2.row(self.stage2.n_rows - 1)
    }

    /// Active forecasts as 0-based forecast column indices.
    pub fn active_forecasts(&self) -> Vec<usize> {
        self.active_set.iter().filter(|&&j| j > 0).map(|j| j - 1).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let m = self.stage2.n_cols;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|j| format!("stage1_beta_{j}")));
        header.extend((0..m).map(|j| format!("stage2_beta_{j}")));
        header.extend((0..m).map(|j| format!("stage2_slope_{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.stage2.n_rows {
            let mut rec = vec![(self.start + i).to_string()];
            rec.extend(self.stage1.row(i).iter().map(f64::to_string));
            rec.extend(self.stage2.row(i).iter().map(f64::to_string));
            rec.extend(self.stage2_slope.row(i).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Convergence record of a stage-2 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub sweeps: usize,
    pub last_change: f64,
    pub objective: f64,
}

/// Runs stage 2 from the stage-1 initialization and returns standardized-scale paths.
pub fn stage2_gscad(
    workspace: &GcdWorkspace<'_>,
    stage1: &Stage1Paths,
    config: &PenaltyConfig,
) -> Result<(StagedPaths, Stage2Report)> {
    let mut ws = workspace.clone();
    run_stage2(&mut ws, stage1, config, None)
}

/// As [`stage2_gscad`], additionally recording the penalized objective after
/// every single group update (the first entry is the initial value).
pub fn stage2_gscad_traced(
    workspace: &GcdWorkspace<'_>,
    stage1: &Stage1Paths,
    config: &PenaltyConfig,
) -> Result<(StagedPaths, Stage2Report, Vec<f64>)> {
    let mut ws = workspace.clone();
    let mut trace = Vec::new();
    let (paths, report) = run_stage2(&mut ws, stage1, config, Some(&mut trace))?;
    Ok((paths, report, trace))
}

/// `s <- (1 - tau / |s|)_+ s`. Returns whether the group was zeroed; a
/// zeroed group holds exact `0.0` entries.
pub fn group_soft_threshold(s: &mut [f64], tau: f64) -> bool {
    let norm = norm2(s);
    if norm <= tau || norm == 0.0 {
        s.iter_mut().for_each(|v| *v = 0.0);
        return true;
    }
    let shrink = 1.0 - tau / norm;
    s.iter_mut().for_each(|v| *v *= shrink);
    false
}

fn penalty(theta: &[Vec<f64>], tau: &[f64]) -> f64 {
    theta.iter().zip(tau).map(|(th, t)| t * norm2(th)).sum()
}

fn run_stage2(
    ws: &mut GcdWorkspace<'_>,
    stage1: &Stage1Paths,
    config: &PenaltyConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(StagedPaths, Stage2Report)> {
    config.validate()?;
    let design = ws.design;
    let m = design.n_regressors;
    let nt = design.n_times();
    if stage1.level.n_rows != nt || stage1.level.n_cols != m {
        return Err(Error::DimensionMismatch {
            expected: nt * m,
            found: stage1.level.n_rows * stage1.level.n_cols,
        });
    }
    let tau = group_weights(stage1, config)?;

    // Step 1: start from the stage-1 paths in orthogonalized coordinates.
    let mut theta: Vec<Vec<f64>> = (0..2 * m)
        .map(|g| {
            (0..nt)
                .map(|ti| {
                    let alpha = if g < m {
                        stage1.level.get(ti, g)
                    } else {
                        stage1.slope.get(ti, g - m)
                    };
                    alpha / ws.group_scales[g][ti]
                })
                .collect()
        })
        .collect();
    ws.residual.copy_from_slice(&design.y);
    for (g, th) in theta.iter().enumerate() {
        ws.update_residual(g, th);
    }

    let mut objective = ws.loss() + penalty(&theta, &tau);
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(objective);
    }
    let mut s = vec![0.0; nt];
    let mut delta = vec![0.0; nt];
    let mut sweeps = 0;
    let mut last_change = f64::INFINITY;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0_f64;
        for g in 0..2 * m {
            // Step 2: partial score plus current coefficients.
            ws.score(g, &mut s);
            for (si, th) in s.iter_mut().zip(&theta[g]) {
                *si += th;
            }
            // Step 3: group soft-threshold.
            group_soft_threshold(&mut s, tau[g]);
            for ti in 0..nt {
                delta[ti] = s[ti] - theta[g][ti];
                theta[g][ti] = s[ti];
                max_change = max_change.max(delta[ti].abs());
            }
            // Step 4: residual update.
            ws.update_residual(g, &delta);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(ws.loss() + penalty(&theta, &tau));
            }
        }
        let obj = ws.loss() + penalty(&theta, &tau);
        debug_assert!(
            obj <= objective + 1e-9 * objective.abs().max(1.0),
            "stage-2 objective increased: {objective} -> {obj}"
        );
        objective = obj;
        last_change = max_change;
        // Step 5
        if max_change < config.tolerance {
            break;
        }
    }
    if last_change >= config.tolerance {
        return Err(Error::Convergence {
            context: format!("stage-2 group SCAD (lambda3={:e})", config.lambda3),
            iterations: sweeps,
            last_change,
        });
    }

    // Step 6 (orthogonalization part): alpha = A theta.
    let mut level = CoefMatrix::zeros(nt, m);
    let mut slope = CoefMatrix::zeros(nt, m);
    for g in 0..2 * m {
        for ti in 0..nt {
            let v = if theta[g][ti] == 0.0 {
                0.0
            } else {
                theta[g][ti] * ws.group_scales[g][ti]
            };
            if g < m {
                level.row_mut(ti)[g] = v;
            } else {
                slope.row_mut(ti)[g - m] = v;
            }
        }
    }
    let active_set = (0..m).filter(|&j| theta[j].iter().any(|&v| v != 0.0)).collect();
    let paths = StagedPaths {
        start: design.start,
        n_obs: design.n_obs,
        smoothness: smoothness_measure(&in_sample_rows(&stage1.level)),
        stage1: stage1.level.clone(),
        stage1_slope: stage1.slope.clone(),
        stage2: level,
        stage2_slope: slope,
        active_set,
    };
    Ok((
        paths,
        Stage2Report {
            sweeps,
            last_change,
            objective,
        },
    ))
}

/// Smallest `lambda3` (with `tau = lambda3` on every group) at which the
/// all-zero solution satisfies the optimality conditions.
pub fn stage2_lambda_max(workspace: &GcdWorkspace<'_>) -> f64 {
    let mut ws = workspace.clone();
    ws.residual.copy_from_slice(&ws.design.y);
    let m = ws.design.n_regressors;
    let h = ws.design.h;
    let mut s = vec![0.0; ws.design.n_times()];
    let mut best = 0.0_f64;
    for g in 0..2 * m {
        ws.score(g, &mut s);
        let n = norm2(&s);
        best = best.max(if g < m { n } else { n / h });
    }
    best
}

// ---------------------------------------------------------------------------
// Tuning by BIC and the full pipeline
// ---------------------------------------------------------------------------

/// `log(SSR) + log(p_T) * l * log(w) / w` with `w = floor(T h)`. An exact fit
/// returns `-inf`.
pub fn bic_score(ssr: f64, active: usize, n_candidates: usize, window: usize) -> f64 {
    if ssr <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let c_t = (n_candidates as f64).ln();
    let w = window.max(1) as f64;
    ssr.ln() + c_t * (active as f64 * w.ln() / w)
}

/// Mean in-sample squared one-step error of a level path (origin row excluded).
pub fn in_sample_ssr(design: &StackedDesign, level: &CoefMatrix) -> f64 {
    let m = design.n_regressors;
    let n_in = design.n_in_sample();
    let mut x = vec![0.0; m];
    let mut sse = 0.0;
    for ti in 0..n_in {
        let t = design.start + ti;
        design_regressors(design, t, &mut x);
        let e = design_target(design, t) - dot(&x, level.row(ti));
        sse += e * e;
    }
    sse / n_in as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicPoint {
    pub lambda3: f64,
    pub bic: f64,
    pub ssr: f64,
    pub active_forecasts: usize,
    pub exact_fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Constant `C` in `h = C [log(p_T + 1) / T]^{1/5}`.
    pub c_bandwidth: f64,
    /// Explicit `lambda3` grid; `None` uses [`default_lambda3_grid`].
    pub lambda3_grid: Option<Vec<f64>>,
    pub n_lambda3: usize,
    pub n_lambda1: usize,
    pub folds: usize,
    pub kernel: KernelSpec,
    pub a: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            c_bandwidth: 1.0,
            lambda3_grid: None,
            n_lambda3: DEFAULT_LAMBDA_POINTS,
            n_lambda1: DEFAULT_LAMBDA_POINTS,
            folds: DEFAULT_FOLDS,
            kernel: KernelSpec::epanechnikov(),
            a: SCAD_A,
            tolerance: STAGE2_TOLERANCE,
            max_sweeps: 5000,
        }
    }
}

/// Bandwidth rule `C [log(p_T + 1) / T]^{1/5}`.
pub fn high_dim_bandwidth(c: f64, n_forecasts: usize, n_obs: usize) -> f64 {
    c * (((n_forecasts + 1) as f64).ln() / n_obs as f64).powf(0.2)
}

/// First time point of the penalized fit: half a window of real pairs.
pub fn high_dim_start(n_obs: usize, h: f64) -> usize {
    let w = window_half_width(n_obs, h);
    1 + w.div_ceil(2).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageFit {
    /// Paths on the original data scale.
    pub paths: StagedPaths,
    pub h: f64,
    pub lambda1_cv: LambdaCv,
    pub lambda3: f64,
    pub bic_curve: Vec<BicPoint>,
    pub standardizer: Standardizer,
    pub report: Stage2Report,
}

impl TwoStageFit {
    /// One-step combined forecast from the origin weights.
    pub fn forecast(&self, f_new: &[f64]) -> Result<f64> {
        let b = self.paths.origin_beta();
        if f_new.len() + 1 != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len() - 1,
                found: f_new.len(),
            });
        }
        Ok(b[0] + dot(&b[1..], f_new))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_bic_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["lambda3", "bic", "ssr", "active_forecasts", "exact_fit"])?;
        for p in &self.bic_curve {
            wtr.write_record([
                p.lambda3.to_string(),
                p.bic.to_string(),
                p.ssr.to_string(),
                p.active_forecasts.to_string(),
                p.exact_fit.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Standardize, tune `lambda1` by blocked CV, run stage 1 once, then run
/// stage 2 over the `lambda3` grid and keep the BIC minimizer.
pub fn fit_two_stage(panel: &ForecastPanel, config: &TwoStageConfig) -> Result<TwoStageFit> {
    let p = panel.n_forecasts();
    let n = panel.n_obs();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "two-stage estimation needs T >= 10, found {n}"
        )));
    }
    if let Some(g) = &config.lambda3_grid {
        if g.is_empty() {
            return Err(Error::InvalidArgument("lambda3 grid is empty".into()));
        }
        if g.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument("lambda3 values must be >= 0".into()));
        }
    }
    if config.n_lambda1 == 0 || config.n_lambda3 == 0 {
        return Err(Error::InvalidArgument("penalty grids must be nonempty".into()));
    }
    let h = high_dim_bandwidth(config.c_bandwidth, p, n);
    let (std_panel, standardizer) = standardize(panel)?;
    let start = high_dim_start(n, h);
    let design = StackedDesign::build(&std_panel, h, &config.kernel, start)?;

    let lam_max = stage1_lambda_max(&design);
    let lambdas = log_grid_desc(lam_max, LAMBDA_RATIO, config.n_lambda1);
    let lambda1_cv = select_lambda1(&design, &lambdas, config.folds)?;
    let stage1 = stage1_lasso(&design, lambda1_cv.best)?;

    let ws = orthogonalize_groups(&design)?;
    let window = window_half_width(n, h);
    let grid = match &config.lambda3_grid {
        Some(g) => g.clone(),
        None => default_lambda3_grid(p, window, config.n_lambda3),
    };
    let runs: Vec<Result<(StagedPaths, Stage2Report)>> = grid
        .par_iter()
        .map(|&lam3| {
            let cfg = PenaltyConfig {
                lambda1: lambda1_cv.best,
                lambda3: lam3,
                a: config.a,
                h,
                tolerance: config.tolerance,
                max_sweeps: config.max_sweeps,
            };
            stage2_gscad(&ws, &stage1, &cfg)
        })
        .collect();
    let mut bic_curve = Vec::with_capacity(grid.len());
    let mut fits = Vec::with_capacity(grid.len());
    for (lam3, run) in grid.iter().zip(runs) {
        let (paths, report) = run?;
        let ssr = in_sample_ssr(&design, &paths.stage2);
        let l = paths.active_forecasts().len();
        bic_curve.push(BicPoint {
            lambda3: *lam3,
            bic: bic_score(ssr, l, p, window),
            ssr,
            active_forecasts: l,
            exact_fit: ssr <= 0.0,
        });
        fits.push((paths, report));
    }
    let mut best = 0;
    for (i, b) in bic_curve.iter().enumerate() {
        if b.bic < bic_curve[best].bic {
            best = i;
        }
    }
    let (std_paths, report) = fits.swap_remove(best);
    let paths = destandardize_paths(&std_paths, &standardizer);
    Ok(TwoStageFit {
        paths,
        h,
        lambda1_cv,
        lambda3: grid[best],
        bic_curve,
        standardizer,
        report,
    })
}

fn destandardize_paths(p: &StagedPaths, s: &Standardizer) -> StagedPaths {
    let map = |mat: &CoefMatrix, f: &dyn Fn(&[f64]) -> Vec<f64>| {
        let mut out = mat.clone();
        for i in 0..mat.n_rows {
            out.row_mut(i).copy_from_slice(&f(mat.row(i)));
        }
        out
    };
    StagedPaths {
        start: p.start,
        n_obs: p.n_obs,
        stage1: map(&p.stage1, &|r| s.destandardize_beta(r)),
        stage1_slope: map(&p.stage1_slope, &|r| s.destandardize_slope(r)),
        smoothness: p.smoothness.clone(),
        stage2: map(&p.stage2, &|r| s.destandardize_beta(r)),
        stage2_slope: map(&p.stage2_slope, &|r| s.destandardize_slope(r)),
        active_set: p.active_set.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scad_branches() {
        assert_eq!(scad_derivative(0.5, 1.0, 3.7).unwrap(), 1.0);
        assert!((scad_derivative(2.0, 1.0, 3.7).unwrap() - 1.7 / 2.7).abs() < 1e-15);
        assert!((scad_derivative(2.0, 1.0, 3.7).unwrap() - 0.629_630).abs() < 1e-6);
        assert_eq!(scad_derivative(4.0, 1.0, 3.7).unwrap(), 0.0);
        assert_eq!(scad_derivative(1.0, 1.0, 3.7).unwrap(), 1.0);
        assert!(matches!(scad_derivative(-0.1, 1.0, 3.7), Err(Error::Domain(_))));
    }

    #[test]
    fn smoothness_examples() {
        let c = CoefMatrix {
            n_rows: 3,
            n_cols: 1,
            data: vec![2.0, 2.0, 2.0],
        };
        assert_eq!(smoothness_measure(&c), vec![0.0]);
        let c = CoefMatrix {
            n_rows: 2,
            n_cols: 2,
            data: vec![1.0, 3.0, -1.0, -6.0],
        };
        let d = smoothness_measure(&c);
        assert!((d[0] - 2f64.sqrt()).abs() < 1e-15);
        let scaled = CoefMatrix {
            n_rows: 2,
            n_cols: 2,
            data: c.data.iter().map(|v| -2.5 * v).collect(),
        };
        let ds = smoothness_measure(&scaled);
        assert!((ds[1] - 2.5 * d[1]).abs() < 1e-12);
    }

    #[test]
    fn bic_examples() {
        assert_eq!(bic_score(1.0, 0, 12, 48), 0.0);
        assert_eq!(bic_score(0.0, 2, 12, 48), f64::NEG_INFINITY);
        assert_eq!(bic_score(2.0, 3, 1, 48), 2f64.ln());
    }

    #[test]
    fn folds_are_contiguous() {
        let f = contiguous_folds(23, 10);
        assert_eq!(f.len(), 23);
        assert!(f.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!(*f.last().unwrap(), 9);
        assert_eq!(contiguous_folds(3, 10), vec![0, 1, 2]);
    }

    #[test]
    fn grid_is_descending_log() {
        let g = log_grid_desc(10.0, 1e-3, 4);
        assert!((g[0] - 10.0).abs() < 1e-12 && (g[3] - 0.01).abs() < 1e-12);
        assert!((g[1] / g[0] - g[2] / g[1]).abs() < 1e-12);
    }
}
