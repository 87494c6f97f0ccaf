use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use tvcomb::bandwidth::{select_bandwidth, CvCurve, DEFAULT_C1, DEFAULT_C2, DEFAULT_GRID};
use tvcomb::evaluation::{
    ascfe, dm_test, mean_sd, rc_test, squared_errors, Alternative, DEFAULT_BOOTSTRAP_REPS,
    DEFAULT_RESTART_PROB,
};
use tvcomb::panel::{load_csv, CsvPanel};
use tvcomb::simulation::{run_table1, run_table2, RunManifest, Table1Config, Table2Config};
use tvcomb::smoother::{fit_path, origin_weights, KernelKind, KernelSpec};
use tvcomb::sparse::{fit_two_stage, TwoStageConfig};

use crate::config::{
    parse_cv, parse_list, Cli, Command, Common, Design, EvaluateArgs, FileConfig, SimulateArgs,
    SmoothArgs, TwoStageArgs,
};
use crate::CliError;

const DEFAULT_TARGET: &str = "y";
const DEFAULT_SEED: u64 = 20240101;

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Forecast(a) => forecast(a),
        Command::Cv(a) => cv(a),
        Command::TwoStage(a) => two_stage(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

/// Common settings after merging flags over the config file.
struct Resolved {
    input: Option<PathBuf>,
    target: String,
    out: PathBuf,
}

fn resolve(common: &Common, file: &FileConfig) -> Resolved {
    Resolved {
        input: common.input.clone().or_else(|| file.input.clone()),
        target: common
            .target
            .clone()
            .or_else(|| file.target.clone())
            .unwrap_or_else(|| DEFAULT_TARGET.into()),
        out: common
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
    }
}

impl Resolved {
    fn load(&self) -> Result<CsvPanel, CliError> {
        let path = self
            .input
            .as_ref()
            .ok_or_else(|| CliError::Usage("--input is required".into()))?;
        Ok(load_csv(path, &self.target)?)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        let text = serde_json::to_string_pretty(value).map_err(tvcomb::Error::from)?;
        fs::write(self.out.join(name), text + "\n")?;
        Ok(())
    }
}

enum BandwidthChoice {
    Fixed(f64),
    Cv(f64, f64, usize),
}

fn bandwidth_choice(a: &SmoothArgs, file: &FileConfig) -> Result<BandwidthChoice, CliError> {
    if let Some(h) = a.bandwidth {
        return Ok(BandwidthChoice::Fixed(h));
    }
    if let Some(s) = &a.cv {
        let (c1, c2, n) = parse_cv(s)?;
        return Ok(BandwidthChoice::Cv(c1, c2, n));
    }
    match (file.bandwidth, &file.cv) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "config sets both bandwidth and cv".into(),
        )),
        (Some(h), None) => Ok(BandwidthChoice::Fixed(h)),
        (None, Some(s)) => {
            let (c1, c2, n) = parse_cv(s)?;
            Ok(BandwidthChoice::Cv(c1, c2, n))
        }
        (None, None) => Ok(BandwidthChoice::Cv(DEFAULT_C1, DEFAULT_C2, DEFAULT_GRID)),
    }
}

fn kernel(flag: Option<KernelKind>, file: &FileConfig) -> KernelSpec {
    KernelSpec::from_kind(flag.or(file.kernel).unwrap_or(KernelKind::Epanechnikov))
}

/// Fixed or cross-validated bandwidth, with the CV curve when one was computed.
fn bandwidth(
    panel: &tvcomb::ForecastPanel,
    choice: &BandwidthChoice,
    kernel: &KernelSpec,
) -> Result<(f64, Option<CvCurve>), CliError> {
    match *choice {
        BandwidthChoice::Fixed(h) => Ok((h, None)),
        BandwidthChoice::Cv(c1, c2, n) => {
            let curve = select_bandwidth(panel, kernel, c1, c2, n)?;
            Ok((curve.h_star, Some(curve)))
        }
    }
}

fn estimate(a: SmoothArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let k = kernel(a.kernel, &file);
    let choice = bandwidth_choice(&a, &file)?;
    let data = r.load()?;
    let (h, curve) = bandwidth(&data.panel, &choice, &k)?;
    let path = fit_path(&data.panel, h, &k)?;
    path.write_csv(r.create("weights.csv")?)?;
    fs::write(r.out.join("weights.json"), path.to_json()? + "\n")?;
    if let Some(c) = &curve {
        c.write_csv(r.create("cv_curve.csv")?)?;
    }
    r.write_json(
        "estimate.json",
        &json!({
            "h": h,
            "kernel": k.kind,
            "n_obs": data.panel.n_obs(),
            "labels": data.panel.labels(),
            "first_estimable": path.start,
            "cv_warnings": curve.map(|c| c.warnings),
        }),
    )
}

fn forecast(a: SmoothArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let k = kernel(a.kernel, &file);
    let choice = bandwidth_choice(&a, &file)?;
    let data = r.load()?;
    let (h, _) = bandwidth(&data.panel, &choice, &k)?;
    let fit = origin_weights(&data.panel, h, &k)?;
    let b = fit.beta();
    let yhat = b[0]
        + b[1..]
            .iter()
            .zip(&data.next_forecasts)
            .map(|(w, f)| w * f)
            .sum::<f64>();
    let report = json!({
        "h": h,
        "forecast": yhat,
        "weights": b,
        "labels": data.panel.labels(),
        "next_forecasts": data.next_forecasts,
    });
    r.write_json("forecast.json", &report)?;
    println!("{yhat}");
    Ok(())
}

fn cv(a: SmoothArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let k = kernel(a.kernel, &file);
    let (c1, c2, n) = match bandwidth_choice(&a, &file)? {
        BandwidthChoice::Cv(c1, c2, n) => (c1, c2, n),
        BandwidthChoice::Fixed(_) => {
            return Err(CliError::Usage("cv takes --cv c1,c2,n, not --bandwidth".into()))
        }
    };
    let data = r.load()?;
    let curve = select_bandwidth(&data.panel, &k, c1, c2, n)?;
    curve.write_csv(r.create("cv_curve.csv")?)?;
    r.write_json(
        "cv.json",
        &json!({ "h_star": curve.h_star, "min_score": curve.min_score(), "warnings": curve.warnings }),
    )?;
    println!("{}", curve.h_star);
    Ok(())
}

fn two_stage(a: TwoStageArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let mut cfg = TwoStageConfig {
        kernel: kernel(a.kernel, &file),
        ..TwoStageConfig::default()
    };
    if let Some(c) = a.bandwidth_constant.or(file.bandwidth_constant) {
        cfg.c_bandwidth = c;
    }
    if let Some(g) = a.lambda_grid.as_ref().or(file.lambda_grid.as_ref()) {
        if g.trim() != "auto" {
            cfg.lambda3_grid = Some(parse_list("--lambda-grid", g)?);
        }
    }
    let data = r.load()?;
    let fit = fit_two_stage(&data.panel, &cfg)?;
    fit.paths.write_csv(r.create("staged_paths.csv")?)?;
    fit.write_bic_csv(r.create("bic_curve.csv")?)?;
    fs::write(r.out.join("two_stage.json"), fit.to_json()? + "\n")?;
    let yhat = fit.forecast(&data.next_forecasts)?;
    let labels = data.panel.labels();
    let active: Vec<&str> = fit
        .paths
        .active_forecasts()
        .iter()
        .map(|&j| labels[j].as_str())
        .collect();
    r.write_json(
        "two_stage_summary.json",
        &json!({
            "h": fit.h,
            "lambda1": fit.lambda1_cv.best,
            "lambda3": fit.lambda3,
            "active_forecasts": active,
            "forecast": yhat,
        }),
    )?;
    println!("{yhat}");
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let design = a
        .design
        .or(file.design)
        .ok_or_else(|| CliError::Usage("--design table1|table2 is required".into()))?;
    let seed = a.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let reps = a.reps.or(file.reps);
    let t_list = match a.t_list.as_ref().or(file.t_list.as_ref()) {
        Some(s) => Some(parse_list::<usize>("--t-list", s)?),
        None => None,
    };
    let n_oos = a.n_oos.or(file.n_oos);
    let started = Instant::now();
    match design {
        Design::Table1 => {
            let mut cfg = Table1Config {
                seed,
                kernel: kernel(a.kernel, &file),
                ..Table1Config::default()
            };
            if a.smoke {
                cfg.reps = 5;
                cfg.t_list = vec![50];
            }
            if let Some(v) = reps {
                cfg.reps = v;
            }
            if let Some(v) = t_list {
                cfg.t_list = v;
            }
            if let Some(v) = n_oos {
                cfg.n_oos = v;
            }
            if let Some(s) = a.cv.as_ref().or(file.cv.as_ref()) {
                (cfg.c1, cfg.c2, cfg.n_grid) = parse_cv(s)?;
            }
            let res = run_table1(&cfg)?;
            res.write_csv(r.create("table1.csv")?)?;
            let failures = res.cells.iter().map(|c| c.failures).sum();
            let m = RunManifest::new(seed, &cfg, failures, started)?;
            r.write_json("manifest.json", &serde_json::to_value(m).map_err(tvcomb::Error::from)?)
        }
        Design::Table2 => {
            let mut cfg = Table2Config {
                seed,
                ..Table2Config::default()
            };
            cfg.two_stage.kernel = kernel(a.kernel, &file);
            if a.smoke {
                cfg.reps = 5;
                cfg.t_list = vec![50];
                cfg.j_list = vec![10];
            }
            if let Some(v) = reps {
                cfg.reps = v;
            }
            if let Some(v) = t_list {
                cfg.t_list = v;
            }
            if let Some(s) = a.j_list.as_ref().or(file.j_list.as_ref()) {
                cfg.j_list = parse_list("--j-list", s)?;
            }
            if let Some(v) = n_oos {
                cfg.n_oos = v;
            }
            let res = run_table2(&cfg)?;
            res.write_csv(r.create("table2.csv")?)?;
            let failures = res.cells.iter().map(|c| c.failures).sum();
            let m = RunManifest::new(seed, &cfg, failures, started)?;
            r.write_json("manifest.json", &serde_json::to_value(m).map_err(tvcomb::Error::from)?)
        }
    }
}

/// Columns of an OOS forecast file: `actual` plus one column per method.
struct OosTable {
    actual: Vec<f64>,
    methods: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn read_oos(path: &Path) -> Result<OosTable, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(tvcomb::Error::from)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(tvcomb::Error::from)?
        .iter()
        .map(str::to_string)
        .collect();
    let actual_col = headers.iter().position(|h| h == "actual").ok_or_else(|| {
        tvcomb::Error::Schema("OOS file needs an `actual` column".into())
    })?;
    let method_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != actual_col && headers[c] != "t")
        .collect();
    if method_cols.len() < 2 {
        return Err(tvcomb::Error::Schema("OOS file needs at least two method columns".into()).into());
    }
    let mut actual = Vec::new();
    let mut columns = vec![Vec::new(); method_cols.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(tvcomb::Error::from)?;
        let cell = |c: usize| -> Result<f64, CliError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                tvcomb::Error::Parse {
                    row: i + 2,
                    column: headers[c].clone(),
                    message: format!("`{raw}` is not a number"),
                }
                .into()
            })
        };
        actual.push(cell(actual_col)?);
        for (col, &c) in columns.iter_mut().zip(&method_cols) {
            col.push(cell(c)?);
        }
    }
    Ok(OosTable {
        actual,
        methods: method_cols.iter().map(|&c| headers[c].clone()).collect(),
        columns,
    })
}

/// Parses `A<B` or `A>B`.
fn parse_comparison(s: &str) -> Result<(String, String, Alternative), CliError> {
    let (sep, alt) = if s.contains('<') {
        ('<', Alternative::Less)
    } else if s.contains('>') {
        ('>', Alternative::Greater)
    } else {
        return Err(tvcomb::Error::InvalidArgument(format!(
            "comparison `{s}` must look like A<B or A>B"
        ))
        .into());
    };
    let mut parts = s.splitn(2, sep).map(str::trim);
    let a = parts.next().unwrap_or("");
    let b = parts.next().unwrap_or("");
    if a.is_empty() || b.is_empty() || b.contains(['<', '>']) {
        return Err(tvcomb::Error::InvalidArgument(format!("malformed comparison `{s}`")).into());
    }
    Ok((a.to_string(), b.to_string(), alt))
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let r = resolve(&a.common, &file);
    let path = r
        .input
        .clone()
        .ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let table = read_oos(&path)?;
    let seed = a.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let reps = a.reps.or(file.reps).unwrap_or(DEFAULT_BOOTSTRAP_REPS);
    let q = a.q.or(file.q).unwrap_or(DEFAULT_RESTART_PROB);
    let compare = if a.compare.is_empty() {
        file.compare.clone().unwrap_or_default()
    } else {
        a.compare.clone()
    };
    let benchmark = a.benchmark.clone().or_else(|| file.benchmark.clone());

    let losses: Vec<Vec<f64>> = table
        .columns
        .iter()
        .map(|c| squared_errors(&table.actual, c))
        .collect::<Result<_, _>>()?;
    let mut wtr = csv::Writer::from_writer(r.create("ascfe.csv")?);
    wtr.write_record(["method", "ascfe", "sd"]).map_err(tvcomb::Error::from)?;
    for (m, (col, loss)) in table.methods.iter().zip(table.columns.iter().zip(&losses)) {
        let (_, sd) = mean_sd(loss);
        wtr.write_record([m.clone(), format!("{:.6}", ascfe(&table.actual, col)?), format!("{sd:.6}")])
            .map_err(tvcomb::Error::from)?;
    }
    wtr.flush()?;

    let index = |name: &str| -> Result<usize, CliError> {
        table.methods.iter().position(|m| m == name).ok_or_else(|| {
            tvcomb::Error::InvalidArgument(format!("unknown method `{name}` in comparison")).into()
        })
    };
    let mut dm = Vec::new();
    for spec in &compare {
        let (x, y, alt) = parse_comparison(spec)?;
        let res = dm_test(&losses[index(&x)?], &losses[index(&y)?], alt)?;
        dm.push(json!({ "comparison": spec, "result": res }));
    }
    let rc = match &benchmark {
        Some(b) => {
            let bi = index(b)?;
            let cands: Vec<Vec<f64>> = losses
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != bi)
                .map(|(_, l)| l.clone())
                .collect();
            Some(json!({ "benchmark": b, "result": rc_test(&losses[bi], &cands, reps, q, seed)? }))
        }
        None => None,
    };
    r.write_json("tests.json", &json!({ "dm": dm, "rc": rc }))
}
