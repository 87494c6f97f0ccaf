//! Independent formulations of the local linear fit: the dense weighted
//! normal equations and the moment-block form built from
//! `S_j = sum k X X' u^j` and `R_j = sum k X y u^j`.

use nalgebra::{DMatrix, DVector};
use tvcomb::smoother::KernelSpec;
use tvcomb::ForecastPanel;

/// Mirrored window written out directly from the definition.
pub fn oracle_window(t: usize, n: usize, h: f64) -> Vec<(i64, usize, usize)> {
    let w = (n as f64 * h + 1e-9).floor() as usize;
    let l = w.min(t - 1);
    let mut pts = Vec::new();
    for s in t - l..t {
        pts.push((s as i64 - t as i64, s + 1, s));
    }
    for s in t + 1..=t + l {
        // pseudodata (y_{s+1}, f_s) = (y_{2t-s+1}, f_{2t-s})
        pts.push((s as i64 - t as i64, 2 * t - s + 1, 2 * t - s));
    }
    pts
}

pub fn regressors(panel: &ForecastPanel, s: usize) -> Vec<f64> {
    std::iter::once(1.0).chain(panel.f(s).iter().copied()).collect()
}

pub fn dense_oracle(panel: &ForecastPanel, t: usize, h: f64, k: &KernelSpec) -> DVector<f64> {
    let n = panel.n_obs();
    let m = panel.n_regressors();
    let pts = oracle_window(t, n, h);
    let th = n as f64 * h;
    let mut z = DMatrix::zeros(pts.len(), 2 * m);
    let mut y = DVector::zeros(pts.len());
    for (r, &(off, yi, fi)) in pts.iter().enumerate() {
        let w = (k.evaluate(off as f64 / th) / h).sqrt();
        let u = off as f64 / n as f64;
        let x = regressors(panel, fi);
        for i in 0..m {
            z[(r, i)] = w * x[i];
            z[(r, m + i)] = w * u * x[i];
        }
        y[r] = w * panel.y(yi);
    }
    let zt = z.transpose();
    (&zt * &z).lu().solve(&(&zt * y)).expect("oracle system solvable")
}

pub fn moment_oracle(panel: &ForecastPanel, t: usize, h: f64, k: &KernelSpec) -> DVector<f64> {
    let n = panel.n_obs();
    let m = panel.n_regressors();
    let th = n as f64 * h;
    let mut s = [DMatrix::zeros(m, m), DMatrix::zeros(m, m), DMatrix::zeros(m, m)];
    let mut r = [DVector::zeros(m), DVector::zeros(m)];
    for (off, yi, fi) in oracle_window(t, n, h) {
        let kw = k.evaluate(off as f64 / th) / h;
        let u = off as f64 / n as f64;
        let x = DVector::from_vec(regressors(panel, fi));
        let xx = &x * x.transpose();
        for (j, sj) in s.iter_mut().enumerate() {
            *sj += kw * u.powi(j as i32) * &xx;
        }
        for (j, rj) in r.iter_mut().enumerate() {
            *rj += kw * u.powi(j as i32) * panel.y(yi) * &x;
        }
    }
    let mut big = DMatrix::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&s[0]);
    big.view_mut((0, m), (m, m)).copy_from(&s[1]);
    big.view_mut((m, 0), (m, m)).copy_from(&s[1]);
    big.view_mut((m, m), (m, m)).copy_from(&s[2]);
    let mut rhs = DVector::zeros(2 * m);
    rhs.rows_mut(0, m).copy_from(&r[0]);
    rhs.rows_mut(m, m).copy_from(&r[1]);
    equilibrated_solve(big, rhs)
}

/// LU solve of `A x = b` after symmetric diagonal equilibration.
pub fn equilibrated_solve(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let d = a.diagonal().map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j]);
    let y = scaled.lu().solve(&b.component_mul(&d)).expect("system solvable");
    y.component_mul(&d)
}

/// Largest difference with slopes measured per window (`h * slope`), the
/// scale on which level and slope terms are comparable, relative to the
/// size of the coefficients once they exceed one.
pub fn max_abs_diff(a: &[f64], b: &DVector<f64>, h: f64) -> f64 {
    let m = a.len() / 2;
    let on_scale = |i: usize, v: f64| if i < m { v } else { h * v };
    let size = b
        .iter()
        .enumerate()
        .map(|(i, v)| on_scale(i, v.abs()))
        .fold(1.0, f64::max);
    a.iter()
        .zip(b.iter())
        .enumerate()
        .map(|(i, (x, y))| on_scale(i, (x - y).abs()))
        .fold(0.0, f64::max)
        / size
}
