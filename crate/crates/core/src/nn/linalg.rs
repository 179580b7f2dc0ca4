//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition
//! and the PSD matrix square root built on it. Dimensions here are feature
//! counts (tens), so the O(n^3)-per-sweep cost is irrelevant.

use ndarray::{Array1, Array2};

/// Eigendecomposition of a symmetric matrix: returns `(eigenvalues, V)`
/// with `a = V * diag(vals) * V^T`. The input is symmetrized first to
/// absorb round-off asymmetry from upstream products.
pub fn eigh_sym(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh_sym needs a square matrix");
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q] ] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation on both sides.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (vals, v)
}

/// Principal square root of a (numerically) positive semidefinite matrix.
/// Slightly negative eigenvalues from round-off are clamped to zero.
pub fn sqrtm_psd(a: &Array2<f64>) -> Array2<f64> {
    let (vals, v) = eigh_sym(a);
    let n = vals.len();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * v[[i, k]] * v[[j, k]];
            }
        }
    }
    out
}
