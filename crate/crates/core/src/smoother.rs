//! Reflected leave-one-out local linear estimation of combination weights.
//!
//! At time `t` the estimator uses the pairs `(y_{s+1}, f_s)` for
//! `t - L <= s <= t - 1` together with pseudodata mirrored across `t`:
//! for `t + 1 <= s <= t + L` the pair is `(y_{2t-s+1}, f_{2t-s})`. Here
//! `L = min(floor(T h), t - 1)`, so the window is truncated at `s = 1` and
//! the mirrored side never reaches outside the sample. The pair at `s = t`
//! (which needs `y_{t+1}`) is never used, so `beta_t` is available at time
//! `t` and `X_t' beta_t` is a genuine one-step forecast of `y_{t+1}`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd_guarded, SpdOutcome};
use crate::panel::ForecastPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Epanechnikov,
    Uniform,
    Quartic,
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(Self::Epanechnikov),
            "uniform" | "rectangular" => Ok(Self::Uniform),
            "quartic" | "biweight" => Ok(Self::Quartic),
            other => Err(Error::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Epanechnikov => "epanechnikov",
            Self::Uniform => "uniform",
            Self::Quartic => "quartic",
        };
        f.write_str(s)
    }
}

/// Symmetric probability density on `[-1, 1]` with its moments
/// `mu2 = int u^2 k(u) du` and `nu0 = int k(u)^2 du`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub mu2: f64,
    pub nu0: f64,
}

impl KernelSpec {
    pub fn epanechnikov() -> Self {
        Self {
            kind: KernelKind::Epanechnikov,
            mu2: 0.2,
            nu0: 0.6,
        }
    }

    pub fn uniform() -> Self {
        Self {
            kind: KernelKind::Uniform,
            mu2: 1.0 / 3.0,
            nu0: 0.5,
        }
    }

    pub fn quartic() -> Self {
        Self {
            kind: KernelKind::Quartic,
            mu2: 1.0 / 7.0,
            nu0: 5.0 / 7.0,
        }
    }

    pub fn from_kind(kind: KernelKind) -> Self {
        match kind {
            KernelKind::Epanechnikov => Self::epanechnikov(),
            KernelKind::Uniform => Self::uniform(),
            KernelKind::Quartic => Self::quartic(),
        }
    }

    #[inline]
    pub fn evaluate(&self, u: f64) -> f64 {
        if !(u.abs() <= 1.0) {
            return 0.0;
        }
        match self.kind {
            KernelKind::Epanechnikov => 0.75 * (1.0 - u * u),
            KernelKind::Uniform => 0.5,
            KernelKind::Quartic => {
                let v = 1.0 - u * u;
                0.9375 * v * v
            }
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

/// `floor(T h)` with a small guard so that e.g. `100 * 0.3` gives 30.
pub fn window_half_width(n_obs: usize, h: f64) -> usize {
    (n_obs as f64 * h + 1e-9).floor() as usize
}

/// One row of the synthesized window around `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPoint {
    /// Pseudo time `s` (may exceed `T` on the mirrored side).
    pub s: usize,
    /// Index of the target supplying `y_{s+1}`.
    pub y_index: usize,
    /// Index of the forecast row supplying `f_s`.
    pub f_index: usize,
}

impl WindowPoint {
    pub fn offset(&self, t: usize) -> f64 {
        self.s as f64 - t as f64
    }

    pub fn is_reflected(&self, t: usize) -> bool {
        self.s > t
    }
}

/// Window of real and mirrored pairs used to estimate `beta_t`.
///
/// `t` ranges over `1..=T+1`; `t = T + 1` is the forecast origin, where all
/// `T` observed pairs are available but `y_{T+2}` is not.
pub fn synthesized_window(t: usize, n_obs: usize, h: f64) -> Result<Vec<WindowPoint>> {
    if t == 0 || t > n_obs + 1 {
        return Err(Error::TimeOutOfRange { t, max: n_obs + 1 });
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let w = window_half_width(n_obs, h);
    if w < 1 {
        return Err(Error::WindowTooSmall {
            t,
            h,
            points: 0,
            needed: 1,
        });
    }
    let l = w.min(t - 1);
    let mut out = Vec::with_capacity(2 * l);
    for s in (t - l)..t {
        out.push(WindowPoint {
            s,
            y_index: s + 1,
            f_index: s,
        });
    }
    for s in (t + 1)..=(t + l) {
        out.push(WindowPoint {
            s,
            y_index: 2 * t - s + 1,
            f_index: 2 * t - s,
        });
    }
    Ok(out)
}

/// Local linear solution at a single time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    /// Level coefficients followed by slope coefficients, each of length `p + 1`.
    pub gamma: Vec<f64>,
    pub t: usize,
    pub h: f64,
    /// Condition estimate of the local Gram matrix.
    pub cond_estimate: f64,
}

impl LocalFit {
    pub fn beta(&self) -> &[f64] {
        &self.gamma[..self.gamma.len() / 2]
    }

    pub fn slope(&self) -> &[f64] {
        &self.gamma[self.gamma.len() / 2..]
    }
}

/// First time index at which the unpenalized local fit can be identified:
/// the window needs `p + 1` real pairs on its left side.
pub fn first_estimable(n_forecasts: usize) -> usize {
    n_forecasts + 2
}

/// Minimizes the kernel-weighted local sum of squares over the synthesized
/// window and returns `gamma_t = (alpha_0', alpha_1')'`.
pub fn local_linear_fit(
    panel: &ForecastPanel,
    t: usize,
    h: f64,
    kernel: &KernelSpec,
) -> Result<LocalFit> {
    let n = panel.n_obs();
    let window = synthesized_window(t, n, h)?;
    let m = panel.n_regressors();
    let d = 2 * m;
    if window.len() < d {
        return Err(Error::WindowTooSmall {
            t,
            h,
            points: window.len(),
            needed: d,
        });
    }
    let nf = n as f64;
    let th = nf * h;
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut q = vec![0.0; d];
    for pt in &window {
        let off = pt.offset(t);
        let k = kernel.evaluate(off / th) / h;
        if k == 0.0 {
            continue;
        }
        let u = off / nf;
        panel.regressors_into(pt.f_index, &mut q[..m]);
        for i in 0..m {
            q[m + i] = u * q[i];
        }
        let ky = k * panel.y(pt.y_index);
        for a in 0..d {
            let kq = k * q[a];
            rhs[a] += ky * q[a];
            let row = &mut gram[a * d..a * d + a + 1];
            for (g, qb) in row.iter_mut().zip(&q[..=a]) {
                *g += kq * qb;
            }
        }
    }
    match solve_spd_guarded(gram, rhs, d) {
        SpdOutcome::Solved { x, cond } => Ok(LocalFit {
            gamma: x,
            t,
            h,
            cond_estimate: cond,
        }),
        SpdOutcome::Singular { cond } => Err(Error::SingularDesign { t, h, cond }),
    }
}

/// Estimated weight path `beta_t` (and local slopes) for `t = start..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPath {
    pub h: f64,
    pub n_obs: usize,
    pub start: usize,
    n_regressors: usize,
    beta: Vec<f64>,
    slope: Vec<f64>,
}

impl WeightPath {
    pub fn from_rows(
        h: f64,
        n_obs: usize,
        start: usize,
        n_regressors: usize,
        beta: Vec<f64>,
        slope: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(beta.len(), slope.len());
        debug_assert_eq!(beta.len() % n_regressors, 0);
        Self {
            h,
            n_obs,
            start,
            n_regressors,
            beta,
            slope,
        }
    }

    pub fn n_regressors(&self) -> usize {
        self.n_regressors
    }

    pub fn n_rows(&self) -> usize {
        self.beta.len() / self.n_regressors
    }

    /// Time index of row `i`.
    pub fn t_of_row(&self, i: usize) -> usize {
        self.start + i
    }

    pub fn beta_row(&self, i: usize) -> &[f64] {
        &self.beta[i * self.n_regressors..(i + 1) * self.n_regressors]
    }

    pub fn slope_row(&self, i: usize) -> &[f64] {
        &self.slope[i * self.n_regressors..(i + 1) * self.n_regressors]
    }

    pub fn beta_at(&self, t: usize) -> Option<&[f64]> {
        (t >= self.start && t < self.start + self.n_rows()).then(|| self.beta_row(t - self.start))
    }

    pub(crate) fn set_row(&mut self, i: usize, beta: &[f64], slope: &[f64]) {
        let m = self.n_regressors;
        self.beta[i * m..(i + 1) * m].copy_from_slice(beta);
        self.slope[i * m..(i + 1) * m].copy_from_slice(slope);
    }

    /// In-sample one-step forecasts `X_t' beta_t`, one per row.
    pub fn fitted(&self, panel: &ForecastPanel) -> Vec<f64> {
        let mut x = vec![0.0; self.n_regressors];
        (0..self.n_rows())
            .map(|i| {
                panel.regressors_into(self.t_of_row(i), &mut x);
                crate::linalg::dot(&x, self.beta_row(i))
            })
            .collect()
    }

    /// CSV with columns `t, beta_0..beta_p, slope_0..slope_p`, one row per
    /// `t = 1..=T`; rows before `start` have empty cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let m = self.n_regressors;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|j| format!("beta_{j}")));
        header.extend((0..m).map(|j| format!("slope_{j}")));
        wtr.write_record(&header)?;
        for t in 1..=self.n_obs {
            let mut rec = vec![t.to_string()];
            match self.beta_at(t) {
                Some(b) => {
                    let i = t - self.start;
                    rec.extend(b.iter().map(f64::to_string));
                    rec.extend(self.slope_row(i).iter().map(f64::to_string));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 2 * m)),
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Local fits at every estimable `t`, evaluated concurrently and assembled
/// in time order. The first failing `t` (in time order) is reported.
pub fn fit_path(panel: &ForecastPanel, h: f64, kernel: &KernelSpec) -> Result<WeightPath> {
    let n = panel.n_obs();
    let m = panel.n_regressors();
    let start = first_estimable(panel.n_forecasts());
    if start > n {
        return Err(Error::InsufficientData(format!(
            "{n} observations cannot identify {m} time-varying weights"
        )));
    }
    let fits: Vec<Result<LocalFit>> = (start..=n)
        .into_par_iter()
        .map(|t| local_linear_fit(panel, t, h, kernel))
        .collect();
    let mut beta = Vec::with_capacity((n + 1 - start) * m);
    let mut slope = Vec::with_capacity((n + 1 - start) * m);
    for fit in fits {
        let fit = fit?;
        beta.extend_from_slice(fit.beta());
        slope.extend_from_slice(fit.slope());
    }
    Ok(WeightPath::from_rows(h, n, start, m, beta, slope))
}

/// Sequential variant of [`fit_path`], kept for determinism checks.
pub fn fit_path_sequential(
    panel: &ForecastPanel,
    h: f64,
    kernel: &KernelSpec,
) -> Result<WeightPath> {
    let n = panel.n_obs();
    let m = panel.n_regressors();
    let start = first_estimable(panel.n_forecasts());
    if start > n {
        return Err(Error::InsufficientData(format!(
            "{n} observations cannot identify {m} time-varying weights"
        )));
    }
    let mut beta = Vec::new();
    let mut slope = Vec::new();
    for t in start..=n {
        let fit = local_linear_fit(panel, t, h, kernel)?;
        beta.extend_from_slice(fit.beta());
        slope.extend_from_slice(fit.slope());
    }
    Ok(WeightPath::from_rows(h, n, start, m, beta, slope))
}

/// Weights at the forecast origin `T + 1`, estimated from all `T` observed
/// pairs without touching the unobserved `y_{T+2}`.
pub fn origin_weights(panel: &ForecastPanel, h: f64, kernel: &KernelSpec) -> Result<LocalFit> {
    local_linear_fit(panel, panel.n_obs() + 1, h, kernel)
}

/// One-step-ahead combined forecast `(1, f_new') beta_{T+1}`.
pub fn forecast_next(
    panel: &ForecastPanel,
    h: f64,
    kernel: &KernelSpec,
    f_new: &[f64],
) -> Result<f64> {
    if f_new.len() != panel.n_forecasts() {
        return Err(Error::DimensionMismatch {
            expected: panel.n_forecasts(),
            found: f_new.len(),
        });
    }
    let fit = origin_weights(panel, h, kernel)?;
    let b = fit.beta();
    Ok(b[0] + crate::linalg::dot(&b[1..], f_new))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn kernel_moments_match_quadrature() {
        for k in [KernelSpec::epanechnikov(), KernelSpec::uniform(), KernelSpec::quartic()] {
            let mass = simpson(|u| k.evaluate(u), -1.0, 1.0, 2000);
            let mu2 = simpson(|u| u * u * k.evaluate(u), -1.0, 1.0, 2000);
            let nu0 = simpson(|u| k.evaluate(u).powi(2), -1.0, 1.0, 2000);
            assert!((mass - 1.0).abs() < 1e-8, "{:?} mass {mass}", k.kind);
            assert!((mu2 - k.mu2).abs() < 1e-8);
            assert!((nu0 - k.nu0).abs() < 1e-8);
        }
    }

    #[test]
    fn epanechnikov_values() {
        let k = KernelSpec::epanechnikov();
        assert_eq!(k.evaluate(0.0), 0.75);
        assert_eq!(k.evaluate(1.0), 0.0);
        assert_eq!(k.evaluate(-1.0), 0.0);
        assert_eq!(k.evaluate(1.5), 0.0);
        assert_eq!((k.mu2, k.nu0), (0.2, 0.6));
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            assert_eq!(k.evaluate(u), k.evaluate(-u));
            assert!(k.evaluate(u) <= k.evaluate(0.0));
        }
    }

    #[test]
    fn reflection_indices_interior() {
        // T = 100, h = 0.03 -> floor(Th) = 3
        let w = synthesized_window(10, 100, 0.03).unwrap();
        let right: Vec<_> = w.iter().filter(|p| p.s > 10).collect();
        assert_eq!(right.len(), 3);
        assert_eq!(
            right.iter().map(|p| (p.s, p.y_index, p.f_index)).collect::<Vec<_>>(),
            vec![(11, 10, 9), (12, 9, 8), (13, 8, 7)]
        );
        let left: Vec<_> = w.iter().filter(|p| p.s < 10).map(|p| p.s).collect();
        assert_eq!(left, vec![7, 8, 9]);
    }

    #[test]
    fn reflection_truncates_near_start() {
        // floor(Th) = 5 at t = 2: one real pair on the left, its mirror on the right
        let w = synthesized_window(2, 100, 0.05).unwrap();
        assert_eq!(
            w.iter().map(|p| (p.s, p.y_index, p.f_index)).collect::<Vec<_>>(),
            vec![(1, 2, 1), (3, 2, 1)]
        );
        assert!(synthesized_window(1, 100, 0.05).unwrap().is_empty());
    }

    #[test]
    fn window_at_end_stays_in_sample() {
        let n = 50;
        for t in [n, n + 1] {
            for p in synthesized_window(t, n, 0.06).unwrap() {
                assert!(p.y_index <= t && p.y_index <= n + 1);
                assert!(p.f_index < t && p.f_index >= 1);
            }
        }
    }

    #[test]
    fn window_errors() {
        assert!(matches!(
            synthesized_window(0, 10, 0.5),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            synthesized_window(12, 10, 0.5),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            synthesized_window(5, 10, 0.05),
            Err(Error::WindowTooSmall { .. })
        ));
    }

    fn affine_panel(n: usize, c0: f64, c1: f64) -> ForecastPanel {
        let f: Vec<f64> = (1..=n).map(|t| ((t as f64) * 0.7).sin() * 2.0 + 0.1 * t as f64).collect();
        let mut y = vec![0.3];
        y.extend(f.iter().map(|v| c0 + c1 * v));
        ForecastPanel::from_flat(y, f, vec!["f1".into()]).unwrap()
    }

    #[test]
    fn exact_affine_recovery() {
        let panel = affine_panel(40, 0.5, -1.25);
        let k = KernelSpec::epanechnikov();
        let path = fit_path(&panel, 0.3, &k).unwrap();
        for i in 0..path.n_rows() {
            let b = path.beta_row(i);
            assert!((b[0] - 0.5).abs() < 1e-10 && (b[1] + 1.25).abs() < 1e-10, "{b:?}");
        }
        let fc = forecast_next(&panel, 0.3, &k, &[2.0]).unwrap();
        assert!((fc - (0.5 - 2.5)).abs() < 1e-10);
        let fc0 = forecast_next(&panel, 0.3, &k, &[0.0]).unwrap();
        let origin = origin_weights(&panel, 0.3, &k).unwrap();
        assert!((fc0 - origin.beta()[0]).abs() < 1e-15);
    }

    #[test]
    fn first_rows_are_not_estimable() {
        let panel = affine_panel(20, 0.0, 1.0);
        let k = KernelSpec::epanechnikov();
        assert!(local_linear_fit(&panel, 1, 0.5, &k).is_err());
        assert!(matches!(
            local_linear_fit(&panel, 2, 0.5, &k),
            Err(Error::WindowTooSmall { .. })
        ));
        assert!(local_linear_fit(&panel, first_estimable(1), 0.5, &k).is_ok());
    }

    #[test]
    fn collinear_forecasts_are_singular() {
        let n = 30;
        let f1: Vec<f64> = (1..=n).map(|t| (t as f64 * 0.3).cos()).collect();
        let rows: Vec<Vec<f64>> = f1.iter().map(|&v| vec![v, 2.0 * v]).collect();
        let y: Vec<f64> = (0..=n).map(|t| t as f64 * 0.1).collect();
        let panel = ForecastPanel::new(y, rows, vec!["a".into(), "b".into()]).unwrap();
        let err = local_linear_fit(&panel, 20, 0.3, &KernelSpec::epanechnikov()).unwrap_err();
        match err {
            Error::SingularDesign { t, h, .. } => assert_eq!((t, h), (20, 0.3)),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn csv_has_t_rows_and_2m_plus_1_columns() {
        let panel = affine_panel(25, 1.0, 0.5);
        let path = fit_path(&panel, 0.4, &KernelSpec::epanechnikov()).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 26);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
    }
}
