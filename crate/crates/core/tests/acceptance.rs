//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Stochastic criteria are reported rather than asserted, so a miss shows up
//! as a FAIL line without failing the build; the deterministic pieces they
//! rest on are asserted in the other test targets. Set `ACCEPTANCE_SMOKE=1`
//! for the reduced Monte Carlo variants.

mod common;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tvcomb::bandwidth::{plugin_h_opt, select_bandwidth};
use tvcomb::evaluation::{dm_test, rc_test, Alternative};
use tvcomb::simulation::*;
use tvcomb::smoother::{first_estimable, local_linear_fit, KernelSpec};
use tvcomb::sparse::*;

use common::oracle::{dense_oracle, max_abs_diff, moment_oracle};
use common::stacked::{small_design, stacked_least_squares};

// Table 1
const T1_TARGETS: [(usize, f64); 3] = [(200, 1.06), (300, 1.06), (500, 1.03)];
const T1_TOL: f64 = 0.08;
const T1_SMOKE_TOL: f64 = 0.15;
// Table 2, J = 10: (T, ASCFE, exact share, inclusion share)
const T2_TARGETS: [(usize, f64, f64, f64); 2] = [(50, 1.55, 0.81, 1.00), (100, 1.34, 0.91, 1.00)];
const T2_ASCFE_TOL: f64 = 0.15;
const T2_EXACT_TOL: f64 = 0.08;
const T2_MIN_INCLUSION: f64 = 0.98;
const T2_SMOKE_SHARE_TOL: f64 = 0.15;
// Oracles
const DENSE_TOL: f64 = 1e-8;
const MOMENT_TOL: f64 = 1e-10;
// Solver
const ZERO_PENALTY_TOL: f64 = 1e-4;
// Bandwidth
const RATIO_BAND: (f64, f64) = (0.5, 2.0);
// Tests
const DM_SIZE_BAND: (f64, f64) = (0.03, 0.08);
const RC_LEVEL: f64 = 0.05;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn table1(r: &mut Report, smoke: bool) {
    let (reps, targets, tol): (usize, &[(usize, f64)], f64) = if smoke {
        (50, &T1_TARGETS[..1], T1_SMOKE_TOL)
    } else {
        (500, &T1_TARGETS[..], T1_TOL)
    };
    let cfg = Table1Config {
        reps,
        t_list: targets.iter().map(|t| t.0).collect(),
        ..Table1Config::default()
    };
    let started = Instant::now();
    let res = run_table1(&cfg).expect("table 1 run");
    let mut pass = true;
    let mut parts = Vec::new();
    for (cell, &(n, target)) in res.cells.iter().zip(targets) {
        let nprf = cell.stat("NPRf").expect("NPRf row").mean;
        let best = cell.best();
        let ok = (nprf - target).abs() <= tol && best == "NPRf";
        pass &= ok;
        parts.push(format!("T={n} NPRf {nprf:.3} (target {target}±{tol}) best {best}"));
    }
    r.line(
        "1 (Table 1)",
        pass,
        format!("{reps} reps; {}; {:.0}s", parts.join("; "), started.elapsed().as_secs_f64()),
    );
}

fn table2(r: &mut Report, smoke: bool) {
    let (reps, targets) = if smoke { (50, &T2_TARGETS[..]) } else { (200, &T2_TARGETS[1..]) };
    let cfg = Table2Config {
        reps,
        t_list: targets.iter().map(|t| t.0).collect(),
        j_list: vec![10],
        ..Table2Config::default()
    };
    let started = Instant::now();
    let res = run_table2(&cfg).expect("table 2 run");
    let mut pass = true;
    let mut parts = Vec::new();
    for (c, &(n, ascfe, exact, included)) in res.cells.iter().zip(targets) {
        let (exact_tol, min_included) = if smoke {
            (T2_SMOKE_SHARE_TOL, included - T2_SMOKE_SHARE_TOL)
        } else {
            (T2_EXACT_TOL, T2_MIN_INCLUSION)
        };
        let ok = (c.ascfe_mean - ascfe).abs() <= T2_ASCFE_TOL
            && (c.exact_share - exact).abs() <= exact_tol
            && c.included_share >= min_included;
        pass &= ok;
        parts.push(format!(
            "T={n} J=10 ASCFE {:.3} (target {ascfe}±{T2_ASCFE_TOL}) exact {:.3} (target {exact}±{exact_tol}) included {:.3} (>= {min_included:.2})",
            c.ascfe_mean, c.exact_share, c.included_share
        ));
    }
    r.line(
        "2 (Table 2)",
        pass,
        format!("{reps} reps; {}; {:.0}s", parts.join("; "), started.elapsed().as_secs_f64()),
    );
}

fn oracles(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = KernelSpec::epanechnikov();
    let (mut dense, mut moment, mut fitted) = (0.0_f64, 0.0_f64, 0);
    for inst in 0..200u64 {
        let n = 12 + (inst % 39) as usize;
        let p = 1 + (inst % 3) as usize;
        let h = 0.15 + 0.85 * ((inst * 37) % 100) as f64 / 100.0;
        let panel = common::random_panel(n, p, 1000 + inst);
        let lo = first_estimable(p);
        let u: f64 = rand::Rng::random(&mut rng);
        let t = lo + ((n + 1 - lo) as f64 * u).floor() as usize;
        let Ok(fit) = local_linear_fit(&panel, t, h, &k) else { continue };
        fitted += 1;
        dense = dense.max(max_abs_diff(&fit.gamma, &dense_oracle(&panel, t, h, &k), h));
        moment = moment.max(max_abs_diff(&fit.gamma, &moment_oracle(&panel, t, h, &k), h));
    }
    r.line(
        "3 (oracles)",
        dense <= DENSE_TOL && moment <= MOMENT_TOL && fitted >= 190,
        format!("{fitted}/200 instances fitted; dense max diff {dense:.2e} (<= {DENSE_TOL:e}); moment max diff {moment:.2e} (<= {MOMENT_TOL:e})"),
    );
}

fn solver(r: &mut Report) {
    // zero penalties against the dense stacked solve
    let d = small_design(7);
    let ws = orthogonalize_groups(&d).unwrap();
    let stage1 = stage1_lasso(&d, 0.0).unwrap();
    let cfg = PenaltyConfig {
        tolerance: 1e-11,
        max_sweeps: 1_000_000,
        ..PenaltyConfig::new(0.0, 0.0, d.h)
    };
    let (paths, _) = stage2_gscad(&ws, &stage1, &cfg).unwrap();
    let m = d.n_regressors;
    let mut worst = 0.0_f64;
    for (ti, sol) in stacked_least_squares(&d).iter().enumerate() {
        for i in 0..m {
            worst = worst.max((paths.stage2.get(ti, i) - sol[i]).abs());
            worst = worst.max((paths.stage2_slope.get(ti, i) - sol[m + i]).abs());
        }
    }

    // objective after every group update
    let mut increases = 0;
    for inst in 0..50u64 {
        let p = 2 + (inst % 4) as usize;
        let panel = common::sparse_panel(30 + (inst % 3) as usize * 10, p, 1, 500 + inst);
        let h = 0.35 + 0.05 * (inst % 5) as f64;
        let d = StackedDesign::build(&panel, h, &KernelSpec::epanechnikov(), high_dim_start(panel.n_obs(), h)).unwrap();
        let ws = orthogonalize_groups(&d).unwrap();
        let l1 = stage1_lambda_max(&d) * [0.01, 0.05, 0.2][inst as usize % 3];
        let stage1 = stage1_lasso(&d, l1).unwrap();
        let l3 = stage2_lambda_max(&ws) * [0.01, 0.1, 0.5, 0.9][inst as usize % 4];
        let (_, _, trace) = stage2_gscad_traced(&ws, &stage1, &PenaltyConfig::new(l1, l3, h)).unwrap();
        increases += trace
            .windows(2)
            .filter(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0))
            .count();
    }

    // thresholded groups hold exact zeros
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = true;
    for _ in 0..1000 {
        let len = 1 + rand::Rng::random_range(&mut rng, 0..20);
        let mut s: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tau = norm * rand::Rng::random_range(&mut rng, 1.0..2.0);
        exact &= group_soft_threshold(&mut s, tau) && s.iter().all(|v| v.to_bits() == 0);
    }
    r.line(
        "4 (penalized solver)",
        worst <= ZERO_PENALTY_TOL && increases == 0 && exact,
        format!("zero-penalty max deviation {worst:.2e} (<= {ZERO_PENALTY_TOL:e}); objective increases over 50 instances: {increases}; thresholded groups exactly zero: {exact}"),
    );
}

fn bandwidth_ratio(r: &mut Report) {
    let k = KernelSpec::epanechnikov();
    let n = 500;
    let h_opt = plugin_h_opt(&lowdim_plugin_inputs(&k), n).unwrap();
    let started = Instant::now();
    let ratios: Vec<f64> = (0..50)
        .map(|rep| {
            let mut rng = replication_rng(20240303, 0, rep, 0);
            let sim = simulate_with(&DgpConfig::lowdim(n, 1, 0), &mut rng).unwrap();
            let train = sim.panel.truncate(n).unwrap();
            select_bandwidth(&train, &k, 0.5, 3.0, 20).unwrap().h_star / h_opt
        })
        .collect();
    let med = median(ratios);
    r.line(
        "5 (CV bandwidth)",
        (RATIO_BAND.0..=RATIO_BAND.1).contains(&med),
        format!(
            "median h_CV/h_opt {med:.3} over 50 reps (h_opt {h_opt:.4}; band [{}, {}]); {:.0}s",
            RATIO_BAND.0,
            RATIO_BAND.1,
            started.elapsed().as_secs_f64()
        ),
    );
}

fn calibration(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sims = 2000;
    let zero = vec![0.0; 100];
    let rejections = (0..sims)
        .filter(|_| {
            let a: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            dm_test(&a, &zero, Alternative::Less).unwrap().p_value < 0.05
        })
        .count();
    let size = rejections as f64 / sims as f64;

    let bench: Vec<f64> = (0..100)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * z
        })
        .collect();
    let cand: Vec<f64> = bench.iter().map(|v| 0.5 * v).collect();
    let rc = rc_test(&bench, &[cand], 1000, 0.1, 5).unwrap();
    r.line(
        "6 (test calibration)",
        (DM_SIZE_BAND.0..=DM_SIZE_BAND.1).contains(&size) && rc.p_value < RC_LEVEL,
        format!(
            "DM size {size:.4} over {sims} sims (band [{}, {}]); RC p {:.4} (< {RC_LEVEL})",
            DM_SIZE_BAND.0, DM_SIZE_BAND.1, rc.p_value
        ),
    );
}

fn determinism(r: &mut Report) {
    let t1 = Table1Config { reps: 8, t_list: vec![60, 80], n_oos: 5, ..Table1Config::default() };
    let t2 = Table2Config { reps: 4, t_list: vec![50], j_list: vec![10], n_oos: 3, ..Table2Config::default() };
    let panel = common::sparse_panel(80, 8, 2, 3);
    let run = |threads: usize| -> Vec<Vec<u8>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut out = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            run_table1(&t1).unwrap().write_csv(&mut out[0]).unwrap();
            run_table2(&t2).unwrap().write_csv(&mut out[1]).unwrap();
            let fit = fit_two_stage(&panel, &TwoStageConfig::default()).unwrap();
            fit.paths.write_csv(&mut out[2]).unwrap();
            fit.write_bic_csv(&mut out[3]).unwrap();
            out
        })
    };
    let reference = run(1);
    let same = [1, 2, 4].iter().all(|&n| run(n) == reference);
    r.line(
        "7 (determinism)",
        same,
        "table1, table2, staged-path and BIC CSVs byte-identical across runs with 1, 2 and 4 threads".to_string(),
    );
}

fn main() {
    let smoke = std::env::var("ACCEPTANCE_SMOKE").is_ok_and(|v| v == "1");
    let mut r = Report { failed: Vec::new() };
    table1(&mut r, smoke);
    table2(&mut r, smoke);
    oracles(&mut r);
    solver(&mut r);
    bandwidth_ratio(&mut r);
    calibration(&mut r);
    determinism(&mut r);
    if r.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {}", r.failed.join(", "));
    }
}
