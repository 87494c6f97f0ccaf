//! Competing combination schemes and univariate benchmarks.
//!
//! All functions index pairs the same way as [`ForecastPanel`]: pair `s`
//! is `(y_{s+1}, f_s)`. A scheme "fit on `n` pairs" sees pairs `1..=n` only.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, least_squares};
use crate::panel::ForecastPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CombinerKind {
    #[serde(rename = "BG")]
    Bg,
    GRregconst,
    GRreg,
    GRregconstr,
    TVGRregconst,
    TVGRreg,
    TVGRregconstr,
    #[serde(rename = "EQ")]
    Eq,
    HistAvg,
    #[serde(rename = "ARMA11")]
    Arma11,
}

impl CombinerKind {
    pub const ALL: [CombinerKind; 10] = [
        Self::Bg,
        Self::GRregconst,
        Self::GRreg,
        Self::GRregconstr,
        Self::TVGRregconst,
        Self::TVGRreg,
        Self::TVGRregconstr,
        Self::Eq,
        Self::HistAvg,
        Self::Arma11,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Bg => "BG",
            Self::GRregconst => "GRregconst",
            Self::GRreg => "GRreg",
            Self::GRregconstr => "GRregconstr",
            Self::TVGRregconst => "TVGRregconst",
            Self::TVGRreg => "TVGRreg",
            Self::TVGRregconstr => "TVGRregconstr",
            Self::Eq => "EQ",
            Self::HistAvg => "HistAvg",
            Self::Arma11 => "ARMA11",
        }
    }

    /// The Granger–Ramanathan variant and whether it is refit on an expanding window.
    pub fn gr_variant(self) -> Option<(GrVariant, bool)> {
        match self {
            Self::GRregconst => Some((GrVariant::Const, false)),
            Self::GRreg => Some((GrVariant::NoConst, false)),
            Self::GRregconstr => Some((GrVariant::Constrained, false)),
            Self::TVGRregconst => Some((GrVariant::Const, true)),
            Self::TVGRreg => Some((GrVariant::NoConst, true)),
            Self::TVGRregconstr => Some((GrVariant::Constrained, true)),
            _ => None,
        }
    }
}

impl fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CombinerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Inverse-MSE weights from pairs `1..=t`. A forecaster with zero error gets
/// all the weight (shared equally if several are perfect).
pub fn bg_weights(panel: &ForecastPanel, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > panel.n_obs() {
        return Err(Error::TimeOutOfRange {
            t,
            max: panel.n_obs(),
        });
    }
    let p = panel.n_forecasts();
    let mut mse = vec![0.0; p];
    for l in 1..=t {
        let y = panel.y(l + 1);
        for (m, f) in mse.iter_mut().zip(panel.f(l)) {
            *m += (y - f).powi(2);
        }
    }
    Ok(inverse_mse_weights(&mse))
}

/// Normalized inverse of `mse` (the common `1/t` factor cancels).
pub fn inverse_mse_weights(mse: &[f64]) -> Vec<f64> {
    let perfect = mse.iter().filter(|&&e| e == 0.0).count();
    if perfect > 0 {
        let w = 1.0 / perfect as f64;
        return mse.iter().map(|&e| if e == 0.0 { w } else { 0.0 }).collect();
    }
    let inv: Vec<f64> = mse.iter().map(|e| 1.0 / e).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrVariant {
    /// OLS of `y_{t+1}` on `(1, f_t)`.
    Const,
    /// OLS on `f_t` without intercept.
    NoConst,
    /// No intercept, weights summing to one.
    Constrained,
}

/// Granger–Ramanathan weights fit on pairs `1..=n_pairs`, returned as
/// `(intercept, w_1, ..., w_p)` with a zero intercept for the variants without one.
pub fn gr_fit(panel: &ForecastPanel, variant: GrVariant, n_pairs: usize) -> Result<Vec<f64>> {
    if n_pairs == 0 || n_pairs > panel.n_obs() {
        return Err(Error::TimeOutOfRange {
            t: n_pairs,
            max: panel.n_obs(),
        });
    }
    let p = panel.n_forecasts();
    let k = match variant {
        GrVariant::Const => p + 1,
        GrVariant::NoConst => p,
        GrVariant::Constrained => p - 1,
    };
    if variant == GrVariant::Constrained && p == 1 {
        return Ok(vec![0.0, 1.0]);
    }
    let mut rows = Vec::with_capacity(n_pairs * k);
    let mut y = Vec::with_capacity(n_pairs);
    for s in 1..=n_pairs {
        let f = panel.f(s);
        match variant {
            GrVariant::Const => {
                rows.push(1.0);
                rows.extend_from_slice(f);
                y.push(panel.y(s + 1));
            }
            GrVariant::NoConst => {
                rows.extend_from_slice(f);
                y.push(panel.y(s + 1));
            }
            GrVariant::Constrained => {
                let last = f[p - 1];
                rows.extend(f[..p - 1].iter().map(|v| v - last));
                y.push(panel.y(s + 1) - last);
            }
        }
    }
    let rank_err = || {
        Error::RankDeficient(format!(
            "Granger-Ramanathan {variant:?} design is rank deficient on {n_pairs} pairs"
        ))
    };
    let b = least_squares(&rows, k, &y).ok_or_else(rank_err)?;
    Ok(match variant {
        GrVariant::Const => b,
        GrVariant::NoConst => std::iter::once(0.0).chain(b).collect(),
        GrVariant::Constrained => {
            let rest: f64 = b.iter().sum();
            std::iter::once(0.0)
                .chain(b)
                .chain(std::iter::once(1.0 - rest))
                .collect()
        }
    })
}

/// `(intercept, weights)` applied to a forecast vector.
pub fn combine(weights: &[f64], f: &[f64]) -> f64 {
    weights[0] + dot(&weights[1..], f)
}

pub fn equal_weights_forecast(f: &[f64]) -> f64 {
    f.iter().sum::<f64>() / f.len() as f64
}

/// Mean of `y_1, ..., y_{t-1}` (1-based), the forecast of `y_t`.
pub fn historical_average(y: &[f64], t: usize) -> Result<f64> {
    if t < 2 || t - 1 > y.len() {
        return Err(Error::TimeOutOfRange { t, max: y.len() + 1 });
    }
    Ok(y[..t - 1].iter().sum::<f64>() / (t - 1) as f64)
}

/// Bound keeping the AR and MA coefficients inside the unit interval.
pub const ARMA_BOUND: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arma11Fit {
    pub c: f64,
    pub phi: f64,
    pub theta: f64,
    /// Conditional sum of squares at the optimum.
    pub css: f64,
    /// Last in-sample innovation.
    pub last_innovation: f64,
}

impl Arma11Fit {
    pub fn forecast(&self, y_last: f64) -> f64 {
        self.c + self.phi * y_last + self.theta * self.last_innovation
    }
}

struct Css<'a> {
    y: &'a [f64],
}

impl Css<'_> {
    /// Returns the sum of squares and the final innovation, with `e_1 = 0`.
    fn eval(&self, c: f64, phi: f64, theta: f64) -> (f64, f64) {
        let phi = phi.clamp(-ARMA_BOUND, ARMA_BOUND);
        let theta = theta.clamp(-ARMA_BOUND, ARMA_BOUND);
        let mut e = 0.0;
        let mut ss = 0.0;
        for w in self.y.windows(2) {
            e = w[1] - c - phi * w[0] - theta * e;
            ss += e * e;
        }
        (ss, e)
    }
}

impl CostFunction for Css<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (ss, _) = self.eval(p[0], p[1], p[2]);
        // steer the simplex back inside the admissible box
        let excess = (p[1].abs() - ARMA_BOUND).max(0.0) + (p[2].abs() - ARMA_BOUND).max(0.0);
        Ok(if ss.is_finite() { ss * (1.0 + excess) } else { f64::MAX })
    }
}

/// Fits `y_t = c + phi y_{t-1} + theta e_{t-1} + e_t` by conditional least
/// squares (innovations started at zero) with a Nelder–Mead search.
pub fn arma11_fit(y: &[f64]) -> Result<Arma11Fit> {
    if y.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "ARMA(1,1) needs at least 10 observations, found {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ARMA(1,1) input".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Ok(Arma11Fit {
            c: mean,
            phi: 0.0,
            theta: 0.0,
            css: 0.0,
            last_innovation: 0.0,
        });
    }
    let problem = Css { y };
    let start = vec![mean, 0.0, 0.0];
    let step = 0.5 * sd;
    let simplex = vec![
        start.clone(),
        vec![mean + step, 0.0, 0.0],
        vec![mean, 0.3, 0.0],
        vec![mean, 0.0, 0.3],
    ];
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12 * sd * sd * n)
        .map_err(|e| Error::Estimation(format!("ARMA(1,1) setup: {e}")))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(5000))
        .run()
        .map_err(|e| Error::Estimation(format!("ARMA(1,1) optimizer failed: {e}")))?;
    let best = res
        .state()
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Estimation("ARMA(1,1) optimizer returned no solution".into()))?;
    let (c, phi, theta) = (
        best[0],
        best[1].clamp(-ARMA_BOUND, ARMA_BOUND),
        best[2].clamp(-ARMA_BOUND, ARMA_BOUND),
    );
    let (css, last_innovation) = Css { y }.eval(c, phi, theta);
    if !css.is_finite() {
        return Err(Error::Estimation("ARMA(1,1) fit diverged".into()));
    }
    Ok(Arma11Fit {
        c,
        phi,
        theta,
        css,
        last_innovation,
    })
}

/// One-step ARMA(1,1) forecast of the value following `y`.
pub fn arma11_forecast(y: &[f64]) -> Result<f64> {
    Ok(arma11_fit(y)?.forecast(*y.last().expect("length checked")))
}

/// Out-of-sample forecasts of several methods over a common window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosForecasts {
    /// Index `t` of the forecast target `y_t`.
    pub horizon_index: Vec<usize>,
    pub methods: Vec<String>,
    /// `yhat[m][k]` for method `m` at OOS point `k`.
    pub yhat: Vec<Vec<f64>>,
    pub actuals: Vec<f64>,
}

impl OosForecasts {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "actual".to_string()];
        header.extend(self.methods.iter().cloned());
        wtr.write_record(&header)?;
        for (k, &t) in self.horizon_index.iter().enumerate() {
            let mut rec = vec![t.to_string(), self.actuals[k].to_string()];
            rec.extend(self.yhat.iter().map(|col| col[k].to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn method(&self, name: &str) -> Option<&[f64]> {
        self.methods
            .iter()
            .position(|m| m == name)
            .map(|i| self.yhat[i].as_slice())
    }
}

/// Forecasts of `y_{n+k+1}` for `k = 1..=n_oos` where `n = n_train`. At
/// point `k` the method sees pairs `1..n+k-1`, the targets `y_1..y_{n+k}`
/// and the current forecasts `f_{n+k}`. Static GR variants use the fit on
/// the first `n_train` pairs throughout.
pub fn baseline_oos(
    panel: &ForecastPanel,
    n_train: usize,
    n_oos: usize,
    methods: &[CombinerKind],
) -> Result<OosForecasts> {
    if n_train < 2 || n_train + n_oos > panel.n_obs() {
        return Err(Error::InvalidArgument(format!(
            "OOS window {n_train}+{n_oos} does not fit in {} pairs",
            panel.n_obs()
        )));
    }
    let y_all = panel.targets();
    let mut yhat = Vec::with_capacity(methods.len());
    for &kind in methods {
        let static_fit = match kind.gr_variant() {
            Some((v, false)) => Some(gr_fit(panel, v, n_train)?),
            _ => None,
        };
        let mut col = Vec::with_capacity(n_oos);
        for k in 1..=n_oos {
            let now = n_train + k;
            let f = panel.f(now);
            let v = match kind {
                CombinerKind::Bg => dot(&bg_weights(panel, now - 1)?, f),
                CombinerKind::Eq => equal_weights_forecast(f),
                CombinerKind::HistAvg => historical_average(y_all, now + 1)?,
                CombinerKind::Arma11 => arma11_forecast(&y_all[..now])?,
                _ => match (&static_fit, kind.gr_variant()) {
                    (Some(w), _) => combine(w, f),
                    (None, Some((v, true))) => combine(&gr_fit(panel, v, now - 1)?, f),
                    _ => unreachable!("every GR kind has a variant"),
                },
            };
            col.push(v);
        }
        yhat.push(col);
    }
    Ok(OosForecasts {
        horizon_index: (1..=n_oos).map(|k| n_train + k + 1).collect(),
        methods: methods.iter().map(|m| m.label().to_string()).collect(),
        yhat,
        actuals: (1..=n_oos).map(|k| panel.y(n_train + k + 1)).collect(),
    })
}
