use nalgebra::{DMatrix, DVector};
use tvcomb::smoother::{first_estimable, KernelSpec};
use tvcomb::sparse::StackedDesign;

/// T = 12, p = 3, h = 1.
pub fn small_design(seed: u64) -> StackedDesign {
    let panel = super::random_panel(12, 3, seed);
    StackedDesign::build(&panel, 1.0, &KernelSpec::epanechnikov(), first_estimable(3)).unwrap()
}

/// Per-time weighted least squares on the stacked rows, solved densely.
pub fn stacked_least_squares(d: &StackedDesign) -> Vec<DVector<f64>> {
    let m = d.n_regressors;
    d.blocks
        .iter()
        .map(|&(lo, hi)| {
            let mut g = DMatrix::zeros(2 * m, 2 * m);
            let mut b = DVector::zeros(2 * m);
            for r in lo..hi {
                let q = DVector::from_fn(2 * m, |i, _| d.q(i, r));
                g += d.w[r] * &q * q.transpose();
                b += d.w[r] * d.y[r] * &q;
            }
            g.lu().solve(&b).unwrap()
        })
        .collect()
}
