//! Small scalar and dense routines shared by the schedule and spectrum
//! modules.

use nalgebra::DMatrix;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Result of a bracketed one-dimensional minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Golden-section search on `[lo, hi]` until the bracket is narrower than
/// `rel_tol * |x|` (absolute `rel_tol` near zero).
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, rel_tol: f64) -> Minimum {
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evaluations = 2;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while (b - a) > rel_tol * best.0.abs().max(1e-12) && evaluations < 500 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        evaluations += 1;
        for (x, v) in [(c, fc), (d, fd)] {
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    Minimum {
        x: best.0,
        value: best.1,
        evaluations,
    }
}

/// Evenly spaced grid of `n` points including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Eigen-decomposition of a small symmetric matrix, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricDecomposition {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi rotations until every off-diagonal entry is negligible
/// against its diagonal pair. Eigenvectors stay accurate for nearly diagonal
/// input, where one coupling may be far below the diagonal spread.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> SymmetricDecomposition {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "symmetric_eigen needs a square matrix");
    let mut a = matrix.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                if apq == 0.0 {
                    continue;
                }
                if (app.abs() + 1e2 * apq.abs() == app.abs()) && (aqq.abs() + 1e2 * apq.abs() == aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(x, x)].total_cmp(&a[(y, y)]));
    SymmetricDecomposition {
        values: order.iter().map(|&k| a[(k, k)]).collect(),
        vectors: DMatrix::from_fn(n, n, |i, j| v[(i, order[j])]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_resolves_weak_couplings() {
        let e = 9.375875929137268e-9;
        let (a, b) = (1.9979309722177367, 2.9958627480345235);
        let m = DMatrix::from_row_slice(2, 2, &[a, e, e, b]);
        let d = symmetric_eigen(&m);
        // first-order perturbation theory
        let want = -e / (b - a);
        assert!((d.vectors[(1, 0)] / d.vectors[(0, 0)] - want).abs() < 1e-20);
        assert!((d.values[0] - (a - e * e / (b - a))).abs() < 1e-15);
    }

    #[test]
    fn jacobi_reconstructs_random_matrix() {
        let n = 7;
        let m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64).sin() + ((j * 7 + i * 3) as f64).sin());
        let d = symmetric_eigen(&m);
        assert!(d.values.windows(2).all(|w| w[0] <= w[1]));
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.values.clone()));
        let rebuilt = &d.vectors * lambda * d.vectors.transpose();
        assert!((rebuilt - &m).abs().max() < 1e-13);
        let gram = d.vectors.transpose() * &d.vectors;
        assert!((gram - DMatrix::<f64>::identity(n, n)).abs().max() < 1e-14);
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let m = golden_section(|x| (x - 0.37).powi(2) + 1.0, 0.0, 2.0, 1e-8);
        assert!((m.x - 0.37).abs() < 1e-7);
        assert!((m.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.02, 3.0, 60);
        assert_eq!(g.len(), 60);
        assert_eq!(g[0], 0.02);
        assert_eq!(g[59], 3.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
