//! Independent reference implementations used by the integration tests.

use nalgebra::DMatrix;
use tsdistill::tensor::Tensor;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Numerical rank as the count of singular values above `tol · σ_max`.
pub fn svd_rank(t: &Tensor, tol: f64) -> usize {
    let s = to_na(t).singular_values();
    let max = s.iter().fold(0.0f64, |m, v| m.max(*v));
    s.iter().filter(|&&v| max > 0.0 && v > tol * max).count()
}

/// Exact optimum of the transportation LP `min ⟨P, W⟩, P1 = a, Pᵀ1 = b, P ≥ 0`
/// by enumerating basic feasible solutions (supports of size `n + m - 1`).
pub fn transport_lp(w: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (w.rows(), w.cols());
    let cells = n * m;
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let mut eq = DMatrix::<f64>::zeros(n + m, k);
        for (c, &cell) in subset.iter().enumerate() {
            eq[(cell / m, c)] = 1.0;
            eq[(n + cell % m, c)] = 1.0;
        }
        let rhs = nalgebra::DVector::from_iterator(n + m, a.iter().chain(b).copied());
        let svd = eq.clone().svd(true, true);
        if svd.rank(1e-9) == k {
            if let Ok(x) = svd.solve(&rhs, 1e-12) {
                let resid = (&eq * &x - &rhs).amax();
                if resid < 1e-9 && x.iter().all(|&v| v >= -1e-12) {
                    let cost: f64 = subset.iter().zip(x.iter()).map(|(&cell, v)| v * w.data()[cell]).sum();
                    best = best.min(cost);
                }
            }
        }
        // Next k-combination of 0..cells in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] < cells - k + i {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}
