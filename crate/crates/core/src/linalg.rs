//! Small dense kernels on row-major `f64` buffers.
//!
//! The local designs in this crate are tiny (a few dozen columns at most) and
//! are rebuilt for every time point, so a flat Cholesky without allocation
//! churn beats pulling in a general matrix library on the hot path.

/// Condition-number threshold above which a Gram matrix is declared singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// In-place lower Cholesky factor of the `n x n` SPD matrix `a` (row-major).
/// Only the lower triangle is read. Returns the failing pivot on breakdown.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L L' x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Outcome of a guarded SPD solve.
#[derive(Debug, Clone)]
pub enum SpdOutcome {
    Solved { x: Vec<f64>, cond: f64 },
    Singular { cond: f64 },
}

/// Solves `A x = b` for symmetric `A` (lower triangle read) with a condition
/// estimate taken from the Cholesky pivots of the unit-diagonal rescaling of
/// `A`. The pivot ratio is a lower bound on the spectral condition number and
/// collapses as soon as a direction loses rank.
pub fn solve_spd_guarded(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> SpdOutcome {
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let d = a[i * n + i];
        if !(d > 0.0) || !d.is_finite() {
            return SpdOutcome::Singular { cond: f64::INFINITY };
        }
        scale[i] = 1.0 / d.sqrt();
    }
    for i in 0..n {
        for j in 0..=i {
            a[i * n + j] *= scale[i] * scale[j];
        }
    }
    if cholesky_in_place(&mut a, n).is_err() {
        return SpdOutcome::Singular { cond: f64::INFINITY };
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let p = a[i * n + i] * a[i * n + i];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let cond = hi / lo;
    if !(cond < SINGULAR_CONDITION) {
        return SpdOutcome::Singular { cond };
    }
    for i in 0..n {
        b[i] *= scale[i];
    }
    cholesky_solve(&a, n, &mut b);
    for i in 0..n {
        b[i] *= scale[i];
    }
    SpdOutcome::Solved { x: b, cond }
}

/// Ordinary least squares through the guarded normal equations. `rows` is a
/// row-major design with `k` columns.
pub fn least_squares(rows: &[f64], k: usize, y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    debug_assert_eq!(rows.len(), n * k);
    if n < k || k == 0 {
        return None;
    }
    let mut g = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (r, &yr) in rows.chunks_exact(k).zip(y) {
        for i in 0..k {
            b[i] += r[i] * yr;
            for j in 0..=i {
                g[i * k + j] += r[i] * r[j];
            }
        }
    }
    match solve_spd_guarded(g, b, k) {
        SpdOutcome::Solved { x, .. } => Some(x),
        SpdOutcome::Singular { .. } => None,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_small_system() {
        // A = [[4,2],[2,3]], b = [2,1] -> x = [0.5, 0]
        match solve_spd_guarded(vec![4.0, 2.0, 2.0, 3.0], vec![2.0, 1.0], 2) {
            SpdOutcome::Solved { x, cond } => {
                assert!((x[0] - 0.5).abs() < 1e-14);
                assert!(x[1].abs() < 1e-14);
                assert!(cond >= 1.0);
            }
            SpdOutcome::Singular { .. } => panic!("expected solve"),
        }
    }

    #[test]
    fn rank_one_matrix_is_singular() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(
            solve_spd_guarded(a, vec![1.0, 1.0], 2),
            SpdOutcome::Singular { .. }
        ));
    }

    #[test]
    fn least_squares_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let rows: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.5 - 0.25 * x).collect();
        let b = least_squares(&rows, 2, &y).unwrap();
        assert!((b[0] - 1.5).abs() < 1e-12 && (b[1] + 0.25).abs() < 1e-12);
    }
}
