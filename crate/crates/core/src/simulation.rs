//! Monte Carlo designs: a two-forecast time-varying DGP, its extension with
//! redundant correlated forecasts, and replication runners that aggregate
//! out-of-sample accuracy across seeds.
//!
//! Every replication draws from its own ChaCha stream, indexed by
//! (design cell, replication, attempt), so results do not depend on the
//! number of worker threads or on scheduling.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidth, PluginInputs, DEFAULT_C1, DEFAULT_C2, DEFAULT_GRID};
use crate::baselines::{baseline_oos, CombinerKind};
use crate::error::{Error, Result};
use crate::evaluation::{ascfe, mean_sd};
use crate::linalg::cholesky_in_place;
use crate::panel::{default_labels, ForecastPanel};
use crate::smoother::{forecast_next, KernelSpec};
use crate::sparse::{fit_two_stage, TwoStageConfig};

/// True combination weights `(omega_0, omega_1, omega_2)` at rescaled time `tau`.
pub fn true_weights(tau: f64) -> [f64; 3] {
    [
        (-3.0 + 2.5 * tau).exp(),
        0.5 * (1.5 * tau - 0.8).powi(3) + 0.5,
        0.2 * (4.0 * tau).sin() + 0.4,
    ]
}

/// Second derivatives of [`true_weights`].
pub fn true_weights_dd(tau: f64) -> [f64; 3] {
    [
        6.25 * (-3.0 + 2.5 * tau).exp(),
        6.75 * (1.5 * tau - 0.8),
        -3.2 * (4.0 * tau).sin(),
    ]
}

/// Loading of the second forecast on `y_t`.
fn f2_loading(tau: f64) -> f64 {
    0.3 * (2.0 * tau + 0.25).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Estimation sample size `T`.
    pub n_obs: usize,
    pub burn_in: usize,
    pub n_oos: usize,
    pub seed: u64,
    /// Number of redundant forecasts `J` (0 for the two-forecast design).
    pub redundant: usize,
    /// Multiplies every shock; 0 gives the deterministic recursion.
    pub noise_scale: f64,
}

impl DgpConfig {
    pub fn lowdim(n_obs: usize, n_oos: usize, seed: u64) -> Self {
        Self {
            n_obs,
            burn_in: 2 * n_obs,
            n_oos,
            seed,
            redundant: 0,
            noise_scale: 1.0,
        }
    }

    pub fn highdim(n_obs: usize, redundant: usize, n_oos: usize, seed: u64) -> Self {
        Self {
            redundant,
            ..Self::lowdim(n_obs, n_oos, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs < 2 || self.n_oos < 1 || self.burn_in < self.n_obs {
            return Err(Error::InvalidArgument(format!(
                "invalid design: T={}, burn-in={}, n_oos={}",
                self.n_obs, self.burn_in, self.n_oos
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPanel {
    /// `T + n_oos` pairs.
    pub panel: ForecastPanel,
    /// True `(omega_0, omega_1, omega_2)` for every pair.
    pub true_beta: Vec<[f64; 3]>,
    /// 0-based forecast columns with nonzero weight.
    pub relevant: Vec<usize>,
}

/// Lower Cholesky factor of `2 exp(-|j - j'|)`.
pub fn redundant_cov_factor(j: usize) -> Vec<f64> {
    let mut l = vec![0.0; j * j];
    for a in 0..j {
        for b in 0..j {
            l[a * j + b] = 2.0 * (-(a.abs_diff(b) as f64)).exp();
        }
    }
    cholesky_in_place(&mut l, j).expect("exponential covariance is positive definite");
    l
}

/// Draws one panel from `rng`. Burn-in steps use the coefficients at
/// `tau = 0`; afterwards pair `t` of the `N = T + n_oos` generated pairs uses
/// `tau = t / N`, so the coefficients stay on `[0, 1]`.
pub fn simulate_with(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<SimulatedPanel> {
    config.validate()?;
    let s = config.noise_scale;
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    };
    let step = |y: f64, tau: f64, e1: f64, e2: f64, u: f64| {
        let w = true_weights(tau);
        let f1 = 0.5 + 0.8 * y + e1;
        let f2 = 0.5 + f2_loading(tau) * y + e2;
        (f1, f2, w[0] + w[1] * f1 + w[2] * f2 + u)
    };
    let mut y = 0.0;
    for _ in 0..config.burn_in {
        let (e1, e2, u) = (draw(rng), draw(rng), draw(rng));
        y = step(y, 0.0, e1, e2, u).2;
    }
    let n_pairs = config.n_obs + config.n_oos;
    let jj = config.redundant;
    let factor = redundant_cov_factor(jj);
    let p = 2 + jj;
    let mut ys = Vec::with_capacity(n_pairs + 1);
    let mut f = Vec::with_capacity(n_pairs * p);
    let mut true_beta = Vec::with_capacity(n_pairs);
    let mut z = vec![0.0; jj];
    ys.push(y);
    for t in 1..=n_pairs {
        let tau = t as f64 / n_pairs as f64;
        let (e1, e2, u) = (draw(rng), draw(rng), draw(rng));
        for zi in z.iter_mut() {
            *zi = draw(rng);
        }
        let (f1, f2, next) = step(y, tau, e1, e2, u);
        f.push(f1);
        f.push(f2);
        for a in 0..jj {
            f.push((0..=a).map(|b| factor[a * jj + b] * z[b]).sum());
        }
        true_beta.push(true_weights(tau));
        y = next;
        ys.push(y);
    }
    let panel = ForecastPanel::from_flat(ys, f, default_labels(p))?;
    Ok(SimulatedPanel {
        panel,
        true_beta,
        relevant: vec![0, 1],
    })
}

/// Two-forecast design, seeded by `config.seed`.
pub fn simulate_lowdim(config: &DgpConfig) -> Result<SimulatedPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with(&DgpConfig { redundant: 0, ..config.clone() }, &mut rng)
}

/// Design with `config.redundant >= 1` extra forecasts, seeded by `config.seed`.
pub fn simulate_highdim(config: &DgpConfig) -> Result<SimulatedPanel> {
    if config.redundant == 0 {
        return Err(Error::InvalidArgument("need at least one redundant forecast".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with(config, &mut rng)
}

/// Generator for replication `rep` (attempt `attempt`) of design cell `cell`.
pub fn replication_rng(seed: u64, cell: usize, rep: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cell as u64) << 40) | ((rep as u64) << 8) | attempt as u64);
    rng
}

/// Moments of the two-forecast design treated as locally stationary at `tau`:
/// `M(tau) = E[X X']` with `X = (1, f_1, f_2)`.
pub fn lowdim_design_moments(tau: f64) -> Vec<f64> {
    let w = true_weights(tau);
    let b = f2_loading(tau);
    let rho = 0.8 * w[1] + b * w[2];
    let c = w[0] + 0.5 * w[1] + 0.5 * w[2];
    let innov = 1.0 + w[1] * w[1] + w[2] * w[2];
    let m = c / (1.0 - rho);
    let ey2 = innov / (1.0 - rho * rho) + m * m;
    let m01 = 0.5 + 0.8 * m;
    let m02 = 0.5 + b * m;
    let m11 = 0.25 + 0.8 * m + 0.64 * ey2 + 1.0;
    let m22 = 0.25 + b * m + b * b * ey2 + 1.0;
    let m12 = 0.25 + 0.5 * b * m + 0.4 * m + 0.8 * b * ey2;
    vec![1.0, m01, m02, m01, m11, m12, m02, m12, m22]
}

/// Plug-in inputs of the two-forecast design (unit error variance, so `V = M`).
pub fn lowdim_plugin_inputs(kernel: &KernelSpec) -> PluginInputs {
    PluginInputs::from_fns(
        3,
        kernel,
        lowdim_design_moments,
        lowdim_design_moments,
        |tau| true_weights_dd(tau).to_vec(),
    )
}

/// Methods of the two-forecast comparison, in table order.
pub const TABLE1_METHODS: [&str; 9] = [
    "NPRf",
    "BG",
    "TVGRregconst",
    "TVGRreg",
    "TVGRregconstr",
    "GRregconst",
    "GRreg",
    "GRregconstr",
    "EQ",
];

fn table1_baselines() -> Vec<CombinerKind> {
    TABLE1_METHODS[1..]
        .iter()
        .map(|m| m.parse().expect("table labels are valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Config {
    pub reps: usize,
    pub t_list: Vec<usize>,
    pub n_oos: usize,
    pub seed: u64,
    pub kernel: KernelSpec,
    pub c1: f64,
    pub c2: f64,
    pub n_grid: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            reps: 500,
            t_list: vec![200, 300, 500],
            n_oos: 50,
            seed: 20240101,
            kernel: KernelSpec::epanechnikov(),
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
            n_grid: DEFAULT_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStat {
    pub method: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Cell {
    pub n_obs: usize,
    pub stats: Vec<MethodStat>,
    /// `ascfe[m][r]` for method `m` and replication `r`.
    pub ascfe: Vec<Vec<f64>>,
    /// Selected bandwidth per replication.
    pub bandwidths: Vec<f64>,
    pub failures: usize,
}

impl Table1Cell {
    pub fn best(&self) -> &str {
        let mut best = &self.stats[0];
        for s in &self.stats[1..] {
            if s.mean < best.mean {
                best = s;
            }
        }
        &best.method
    }

    pub fn stat(&self, method: &str) -> Option<&MethodStat> {
        self.stats.iter().find(|s| s.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Result {
    pub config: Table1Config,
    pub cells: Vec<Table1Cell>,
}

struct Rep1 {
    ascfe: Vec<f64>,
    h: f64,
}

fn table1_replication(config: &Table1Config, n_obs: usize, rng: &mut ChaCha8Rng) -> Result<Rep1> {
    let dgp = DgpConfig::lowdim(n_obs, config.n_oos, 0);
    let sim = simulate_with(&dgp, rng)?;
    let panel = &sim.panel;
    let train = panel.truncate(n_obs)?;
    let cv = select_bandwidth(&train, &config.kernel, config.c1, config.c2, config.n_grid)?;
    let mut nprf = Vec::with_capacity(config.n_oos);
    for k in 1..=config.n_oos {
        let seen = panel.truncate(n_obs + k - 1)?;
        nprf.push(forecast_next(&seen, cv.h_star, &config.kernel, panel.f(n_obs + k))?);
    }
    let base = baseline_oos(panel, n_obs, config.n_oos, &table1_baselines())?;
    let mut out = Vec::with_capacity(TABLE1_METHODS.len());
    out.push(ascfe(&base.actuals, &nprf)?);
    for col in &base.yhat {
        out.push(ascfe(&base.actuals, col)?);
    }
    Ok(Rep1 {
        ascfe: out,
        h: cv.h_star,
    })
}

/// Maximum attempts per replication before the run gives up on it.
const MAX_ATTEMPTS: usize = 20;

/// Runs `rep_fn` for every replication with redraws on failure. Fails when
/// more than 1% of replications needed a redraw.
fn replicate<R: Send>(
    seed: u64,
    cell: usize,
    reps: usize,
    rep_fn: impl Fn(&mut ChaCha8Rng) -> Result<R> + Sync,
) -> Result<(Vec<R>, usize)> {
    let runs: Vec<Result<(R, usize)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = replication_rng(seed, cell, rep, attempt);
                match rep_fn(&mut rng) {
                    Ok(r) => return Ok((r, attempt)),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect();
    let mut out = Vec::with_capacity(reps);
    let mut failed = 0;
    for r in runs {
        let (v, attempts) = r?;
        failed += usize::from(attempts > 0);
        out.push(v);
    }
    if failed * 100 > reps {
        return Err(Error::ReplicationFailures { failed, reps });
    }
    Ok((out, failed))
}

fn summarize(methods: &[&str], ascfe: &[Vec<f64>]) -> Vec<MethodStat> {
    methods
        .iter()
        .zip(ascfe)
        .map(|(m, col)| {
            let (mean, sd) = mean_sd(col);
            MethodStat {
                method: m.to_string(),
                mean,
                sd,
            }
        })
        .collect()
}

/// Monte Carlo comparison on the two-forecast design.
pub fn run_table1(config: &Table1Config) -> Result<Table1Result> {
    if config.reps == 0 || config.t_list.is_empty() {
        return Err(Error::InvalidArgument("need reps >= 1 and a nonempty T list".into()));
    }
    let mut cells = Vec::with_capacity(config.t_list.len());
    for (ci, &n_obs) in config.t_list.iter().enumerate() {
        let (reps, failures) = replicate(config.seed, ci, config.reps, |rng| {
            table1_replication(config, n_obs, rng)
        })?;
        let mut ascfe = vec![Vec::with_capacity(config.reps); TABLE1_METHODS.len()];
        for r in &reps {
            for (col, v) in ascfe.iter_mut().zip(&r.ascfe) {
                col.push(*v);
            }
        }
        cells.push(Table1Cell {
            n_obs,
            stats: summarize(&TABLE1_METHODS, &ascfe),
            ascfe,
            bandwidths: reps.iter().map(|r| r.h).collect(),
            failures,
        });
    }
    Ok(Table1Result {
        config: config.clone(),
        cells,
    })
}

impl Table1Result {
    /// One row per method with `mean`/`sd` columns per `T`, and a closing `Best` row.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["method".to_string()];
        for c in &self.cells {
            header.push(format!("T{}_mean", c.n_obs));
            header.push(format!("T{}_sd", c.n_obs));
        }
        wtr.write_record(&header)?;
        for (i, m) in TABLE1_METHODS.iter().enumerate() {
            let mut rec = vec![m.to_string()];
            for c in &self.cells {
                rec.push(format!("{:.6}", c.stats[i].mean));
                rec.push(format!("{:.6}", c.stats[i].sd));
            }
            wtr.write_record(&rec)?;
        }
        let mut best = vec!["Best".to_string()];
        for c in &self.cells {
            best.push(c.best().to_string());
            best.push(String::new());
        }
        wtr.write_record(&best)?;
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Config {
    pub reps: usize,
    pub t_list: Vec<usize>,
    pub j_list: Vec<usize>,
    pub n_oos: usize,
    pub seed: u64,
    pub two_stage: TwoStageConfig,
}

impl Default for Table2Config {
    fn default() -> Self {
        Self {
            reps: 200,
            t_list: vec![50, 100, 150],
            j_list: vec![10, 50, 100],
            n_oos: 10,
            seed: 20240202,
            two_stage: TwoStageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Cell {
    pub n_obs: usize,
    pub redundant: usize,
    pub ascfe_mean: f64,
    pub ascfe_sd: f64,
    /// Share of replications whose active set is exactly the relevant set at every OOS point.
    pub exact_share: f64,
    /// Share of replications whose active set contains the relevant set at every OOS point.
    pub included_share: f64,
    pub ascfe: Vec<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Result {
    pub config: Table2Config,
    pub cells: Vec<Table2Cell>,
}

struct Rep2 {
    ascfe: f64,
    exact: bool,
    included: bool,
}

fn table2_replication(
    config: &Table2Config,
    n_obs: usize,
    redundant: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rep2> {
    let dgp = DgpConfig::highdim(n_obs, redundant, config.n_oos, 0);
    let sim = simulate_with(&dgp, rng)?;
    let panel = &sim.panel;
    let mut yhat = Vec::with_capacity(config.n_oos);
    let mut actual = Vec::with_capacity(config.n_oos);
    let (mut exact, mut included) = (true, true);
    for k in 1..=config.n_oos {
        let seen = panel.truncate(n_obs + k - 1)?;
        let fit = fit_two_stage(&seen, &config.two_stage)?;
        yhat.push(fit.forecast(panel.f(n_obs + k))?);
        actual.push(panel.y(n_obs + k + 1));
        let active = fit.paths.active_forecasts();
        exact &= active == sim.relevant;
        included &= sim.relevant.iter().all(|r| active.contains(r));
    }
    Ok(Rep2 {
        ascfe: ascfe(&actual, &yhat)?,
        exact,
        included,
    })
}

/// Monte Carlo selection study on the redundant-forecast design.
pub fn run_table2(config: &Table2Config) -> Result<Table2Result> {
    if config.reps == 0 || config.t_list.is_empty() || config.j_list.is_empty() {
        return Err(Error::InvalidArgument("need reps >= 1 and nonempty T and J lists".into()));
    }
    let mut cells = Vec::new();
    let mut ci = 0;
    for &n_obs in &config.t_list {
        for &jj in &config.j_list {
            let (reps, failures) = replicate(config.seed, ci, config.reps, |rng| {
                table2_replication(config, n_obs, jj, rng)
            })?;
            ci += 1;
            let ascfe: Vec<f64> = reps.iter().map(|r| r.ascfe).collect();
            let (mean, sd) = mean_sd(&ascfe);
            let n = reps.len() as f64;
            cells.push(Table2Cell {
                n_obs,
                redundant: jj,
                ascfe_mean: mean,
                ascfe_sd: sd,
                exact_share: reps.iter().filter(|r| r.exact).count() as f64 / n,
                included_share: reps.iter().filter(|r| r.included).count() as f64 / n,
                ascfe,
                failures,
            });
        }
    }
    Ok(Table2Result {
        config: config.clone(),
        cells,
    })
}

impl Table2Result {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "T",
            "J",
            "ascfe_mean",
            "ascfe_sd",
            "exact_share",
            "included_share",
            "failures",
        ])?;
        for c in &self.cells {
            wtr.write_record([
                c.n_obs.to_string(),
                c.redundant.to_string(),
                format!("{:.6}", c.ascfe_mean),
                format!("{:.6}", c.ascfe_sd),
                format!("{:.6}", c.exact_share),
                format!("{:.6}", c.included_share),
                c.failures.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn cell(&self, n_obs: usize, redundant: usize) -> Option<&Table2Cell> {
        self.cells
            .iter()
            .find(|c| c.n_obs == n_obs && c.redundant == redundant)
    }
}

/// Record of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub failures: usize,
    pub wall_time_secs: f64,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(seed: u64, config: &impl Serialize, failures: usize, started: Instant) -> Result<Self> {
        Ok(Self {
            seed,
            config: serde_json::to_value(config)?,
            failures,
            wall_time_secs: started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        })
    }
}
