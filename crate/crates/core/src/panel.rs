//! Forecast panels: a target series and the matrix of candidate forecasts.
//!
//! Alignment convention: forecast row `t` (1-based) holds the forecasts made
//! at time `t` for the target `y_{t+1}`. A panel with `T` forecast rows
//! therefore carries `T + 1` target values. In CSV form every row holds a
//! target value and the forecasts issued at that date, so the forecasts in
//! the final row pair with a target that has not been observed yet; they are
//! kept aside as [`CsvPanel::next_forecasts`] for one-step forecasting.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoother::WeightPath;

/// Column names treated as a date/time label rather than a forecast.
const TIME_COLUMNS: [&str; 4] = ["date", "time", "period", "t"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PanelRecord", into = "PanelRecord")]
pub struct ForecastPanel {
    y: Vec<f64>,
    // row-major T x p
    f: Vec<f64>,
    p: usize,
    labels: Vec<String>,
    time_index: Option<Vec<String>>,
}

/// Serialized form of a panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PanelRecord {
    y: Vec<f64>,
    forecasts: Vec<Vec<f64>>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_index: Option<Vec<String>>,
}

impl TryFrom<PanelRecord> for ForecastPanel {
    type Error = Error;
    fn try_from(r: PanelRecord) -> Result<Self> {
        let panel = ForecastPanel::new(r.y, r.forecasts, r.labels)?;
        match r.time_index {
            Some(ix) => panel.with_time_index(ix),
            None => Ok(panel),
        }
    }
}

impl From<ForecastPanel> for PanelRecord {
    fn from(p: ForecastPanel) -> Self {
        PanelRecord {
            forecasts: p.f.chunks_exact(p.p).map(<[f64]>::to_vec).collect(),
            y: p.y,
            labels: p.labels,
            time_index: p.time_index,
        }
    }
}

/// `f1, ..., fp`.
pub fn default_labels(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("f{j}")).collect()
}

impl ForecastPanel {
    /// Builds a panel from `T + 1` targets and `T` forecast rows.
    pub fn new(y: Vec<f64>, rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let p = labels.len();
        let mut f = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Schema(format!(
                    "forecast row {} has {} entries, expected {p}",
                    i + 1,
                    row.len()
                )));
            }
            f.extend_from_slice(row);
        }
        Self::from_flat(y, f, labels)
    }

    /// As [`ForecastPanel::new`] with labels `f1, ..., fp`.
    pub fn unlabeled(y: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        Self::new(y, rows, default_labels(p))
    }

    /// Builds a panel from a row-major `T x p` forecast buffer.
    pub fn from_flat(y: Vec<f64>, f: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        let p = labels.len();
        if p == 0 {
            return Err(Error::Schema("at least one forecast column is required".into()));
        }
        if f.len() % p != 0 {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: f.len() % p,
            });
        }
        let rows = f.len() / p;
        if y.len() != rows + 1 {
            return Err(Error::DimensionMismatch {
                expected: rows + 1,
                found: y.len(),
            });
        }
        if rows < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 forecast rows, found {rows}"
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("target at t={}", i + 1)));
        }
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "forecast `{}` at t={}",
                labels[i % p],
                i / p + 1
            )));
        }
        Ok(Self {
            y,
            f,
            p,
            labels,
            time_index: None,
        })
    }

    pub fn with_time_index(mut self, index: Vec<String>) -> Result<Self> {
        if index.len() != self.y.len() {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                found: index.len(),
            });
        }
        self.time_index = Some(index);
        Ok(self)
    }

    /// Number of (target, forecast) pairs `T`.
    pub fn n_obs(&self) -> usize {
        self.y.len() - 1
    }

    /// Number of candidate forecasts `p`.
    pub fn n_forecasts(&self) -> usize {
        self.p
    }

    /// Length of the regressor vector `X_t = (1, f_t')'`.
    pub fn n_regressors(&self) -> usize {
        self.p + 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn time_index(&self) -> Option<&[String]> {
        self.time_index.as_deref()
    }

    /// All targets `y_1 ... y_{T+1}`.
    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Row-major `T x p` forecast matrix.
    pub fn forecast_matrix(&self) -> &[f64] {
        &self.f
    }

    /// Target `y_t`, 1-based, `t` in `1..=T+1`.
    #[inline]
    pub fn y(&self, t: usize) -> f64 {
        self.y[t - 1]
    }

    /// Forecast row `f_t`, 1-based, `t` in `1..=T`.
    #[inline]
    pub fn f(&self, t: usize) -> &[f64] {
        &self.f[(t - 1) * self.p..t * self.p]
    }

    /// Writes `X_t = (1, f_t')'` into `out`.
    #[inline]
    pub fn regressors_into(&self, t: usize, out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].copy_from_slice(self.f(t));
    }

    pub fn regressors(&self, t: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.p + 1];
        self.regressors_into(t, &mut x);
        x
    }

    /// Forecast column `j` (0-based) over `t = 1..=T`.
    pub fn forecast_column(&self, j: usize) -> Vec<f64> {
        self.f.iter().skip(j).step_by(self.p).copied().collect()
    }

    /// The panel restricted to its first `n_pairs` pairs.
    pub fn truncate(&self, n_pairs: usize) -> Result<Self> {
        if n_pairs > self.n_obs() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} pairs to {n_pairs}",
                self.n_obs()
            )));
        }
        let mut out = Self::from_flat(
            self.y[..=n_pairs].to_vec(),
            self.f[..n_pairs * self.p].to_vec(),
            self.labels.clone(),
        )?;
        if let Some(ix) = &self.time_index {
            out.time_index = Some(ix[..=n_pairs].to_vec());
        }
        Ok(out)
    }

    /// Keeps only the forecast columns listed in `cols` (0-based), in order.
    pub fn select_forecasts(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.p) {
            return Err(Error::InvalidArgument(format!("no forecast column {bad}")));
        }
        let f = self
            .f
            .chunks_exact(self.p)
            .flat_map(|row| cols.iter().map(move |&c| row[c]))
            .collect();
        let labels = cols.iter().map(|&c| self.labels[c].clone()).collect();
        let mut out = Self::from_flat(self.y.clone(), f, labels)?;
        out.time_index = self.time_index.clone();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A panel read from CSV together with the trailing forecast row.
#[derive(Debug, Clone)]
pub struct CsvPanel {
    pub panel: ForecastPanel,
    /// Forecasts in the final CSV row, issued for the first unobserved target.
    pub next_forecasts: Vec<f64>,
}

/// Reads a panel from a UTF-8, comma-delimited file with one header row.
///
/// The target column is named by `target_column`; a column called `date`,
/// `time`, `period` or `t` becomes the time index; every other column is a
/// forecast. With `N` data rows the panel has `T = N - 1` pairs.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<CsvPanel> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, target_column)
}

pub fn read_csv(reader: impl Read, target_column: &str) -> Result<CsvPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let target = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Schema(format!("target column `{target_column}` not found")))?;
    let time_col = headers
        .iter()
        .position(|h| TIME_COLUMNS.contains(&h.to_ascii_lowercase().as_str()) && h != target_column);
    let fcols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != target && Some(c) != time_col)
        .collect();
    if fcols.is_empty() {
        return Err(Error::Schema("no forecast columns found".into()));
    }

    let mut y = Vec::new();
    let mut f = Vec::new();
    let mut index = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is row 1
        let row = i + 2;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].clone(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].clone(),
                    message: format!("`{raw}` is not finite"),
                });
            }
            Ok(v)
        };
        y.push(cell(target)?);
        for &c in &fcols {
            f.push(cell(c)?);
        }
        if let Some(tc) = time_col {
            index.push(rec.get(tc).unwrap_or("").to_string());
        }
    }
    if y.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 data rows, found {}",
            y.len()
        )));
    }
    let p = fcols.len();
    let next_forecasts = f.split_off(f.len() - p);
    let labels = fcols.iter().map(|&c| headers[c].clone()).collect();
    let mut panel = ForecastPanel::from_flat(y, f, labels)?;
    if time_col.is_some() {
        panel = panel.with_time_index(index)?;
    }
    Ok(CsvPanel {
        panel,
        next_forecasts,
    })
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let ss: f64 = xs.map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Whole-sample affine maps for the target (entry 0) and each forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self {
            means: vec![0.0; p + 1],
            sds: vec![1.0; p + 1],
        }
    }

    pub fn n_forecasts(&self) -> usize {
        self.means.len() - 1
    }

    pub fn standardize_forecasts(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .enumerate()
            .map(|(j, v)| (v - self.means[j + 1]) / self.sds[j + 1])
            .collect()
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.means[0]) / self.sds[0]
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        self.means[0] + self.sds[0] * z
    }

    /// Maps a standardized-scale coefficient vector `(b_0, b_1..b_p)` to the
    /// original scale so that `X'beta` reproduces the destandardized fit.
    pub fn destandardize_beta(&self, b: &[f64]) -> Vec<f64> {
        let sy = self.sds[0];
        let mut out = vec![0.0; b.len()];
        let mut intercept = self.means[0] + sy * b[0];
        for j in 1..b.len() {
            out[j] = sy * b[j] / self.sds[j];
            intercept -= out[j] * self.means[j];
        }
        out[0] = intercept;
        out
    }

    /// Same map for slope (derivative) coefficients: no target mean shift.
    pub fn destandardize_slope(&self, b: &[f64]) -> Vec<f64> {
        let sy = self.sds[0];
        let mut out = vec![0.0; b.len()];
        let mut intercept = sy * b[0];
        for j in 1..b.len() {
            out[j] = sy * b[j] / self.sds[j];
            intercept -= out[j] * self.means[j];
        }
        out[0] = intercept;
        out
    }

    pub fn destandardize_panel(&self, panel: &ForecastPanel) -> Result<ForecastPanel> {
        self.check_dim(panel.n_regressors())?;
        let p = panel.n_forecasts();
        let y = panel.y.iter().map(|&v| self.destandardize_target(v)).collect();
        let f = panel
            .f
            .iter()
            .enumerate()
            .map(|(i, &v)| self.means[i % p + 1] + self.sds[i % p + 1] * v)
            .collect();
        let mut out = ForecastPanel::from_flat(y, f, panel.labels.clone())?;
        out.time_index = panel.time_index.clone();
        Ok(out)
    }

    fn check_dim(&self, m: usize) -> Result<()> {
        if m != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                found: m,
            });
        }
        Ok(())
    }
}

/// Z-scores the target and every forecast column over the whole sample
/// (sample standard deviation, `N - 1` divisor).
pub fn standardize(panel: &ForecastPanel) -> Result<(ForecastPanel, Standardizer)> {
    let p = panel.n_forecasts();
    let mut means = Vec::with_capacity(p + 1);
    let mut sds = Vec::with_capacity(p + 1);
    let (my, sy) = mean_sd(panel.y.iter().copied());
    means.push(my);
    sds.push(sy);
    for j in 0..p {
        let (m, s) = mean_sd(panel.f.iter().skip(j).step_by(p).copied());
        means.push(m);
        sds.push(s);
    }
    for (j, &s) in sds.iter().enumerate() {
        // relative to the column magnitude so rounding noise on a constant column is caught
        let mag = means[j].abs().max(1e-300);
        if !(s > 0.0) || s <= 1e-14 * mag {
            let name = if j == 0 {
                "target".to_string()
            } else {
                panel.labels[j - 1].clone()
            };
            return Err(Error::DegenerateScale(name));
        }
    }
    let s = Standardizer { means, sds };
    let y = panel.y.iter().map(|&v| s.standardize_target(v)).collect();
    let f = panel
        .f
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - s.means[i % p + 1]) / s.sds[i % p + 1])
        .collect();
    let mut out = ForecastPanel::from_flat(y, f, panel.labels.clone())?;
    out.time_index = panel.time_index.clone();
    Ok((out, s))
}

/// Back-transforms a standardized-scale weight path to the original scale.
pub fn destandardize_weights(weights: &WeightPath, s: &Standardizer) -> Result<WeightPath> {
    s.check_dim(weights.n_regressors())?;
    let mut out = weights.clone();
    for i in 0..weights.n_rows() {
        out.set_row(
            i,
            &s.destandardize_beta(weights.beta_row(i)),
            &s.destandardize_slope(weights.slope_row(i)),
        );
    }
    Ok(out)
}
