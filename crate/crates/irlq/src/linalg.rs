//! Dense-matrix toolkit: Moore-Penrose pseudoinverse, range-inclusion tests,
//! linear matrix equations `L X M = N`, and the projector decomposition that
//! splits the input space along the null space of a PSD weight matrix.
//!
//! Decompositions are backed by a one-sided Jacobi SVD. The iterative QR
//! kernels shipped with the matrix library lose ~5 significant digits on some
//! dense inputs, which is not usable under the tolerances this solver has to
//! honor; Jacobi sweeps converge to machine precision on the small matrices
//! handled here.

use nalgebra::DMatrix;

use crate::{Result, SolverError};

/// Default relative rank tolerance. The effective singular-value cutoff is
/// `rank_tol * sigma_max * max(rows, cols)`.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Max absolute entry; 0 for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Thin SVD `A = U diag(sigma) V'` with `sigma` descending, `V` square
/// orthogonal when `A` has at least as many rows as columns, and `U` columns
/// orthonormal wherever `sigma > 0` (zero columns elsewhere).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

fn jacobi_svd_tall(a: &DMatrix<f64>) -> Svd {
    let (p, q) = a.shape();
    debug_assert!(p >= q);
    let mut w = a.clone();
    let mut v = DMatrix::identity(q, q);
    let eps = f64::EPSILON;
    // Sweep until every column pair is orthogonal to relative eps.
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..q.saturating_sub(1) {
            for j in (i + 1)..q {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..p {
                    let wi = w[(r, i)];
                    let wj = w[(r, j)];
                    alpha += wi * wi;
                    beta += wj * wj;
                    gamma += wi * wj;
                }
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..p {
                    let wi = w[(r, i)];
                    let wj = w[(r, j)];
                    w[(r, i)] = c * wi - s * wj;
                    w[(r, j)] = s * wi + c * wj;
                }
                for r in 0..q {
                    let vi = v[(r, i)];
                    let vj = v[(r, j)];
                    v[(r, i)] = c * vi - s * vj;
                    v[(r, j)] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..q).map(|i| w.column(i).norm()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap());
    let mut u = DMatrix::zeros(p, q);
    let mut v_sorted = DMatrix::zeros(q, q);
    let mut sigma_sorted = vec![0.0; q];
    for (dst, &src) in order.iter().enumerate() {
        sigma_sorted[dst] = sigma[src];
        v_sorted.column_mut(dst).copy_from(&v.column(src));
        if sigma[src] > 0.0 {
            u.column_mut(dst).copy_from(&(w.column(src) / sigma[src]));
        }
    }
    sigma = sigma_sorted;
    Svd {
        u,
        sigma,
        v: v_sorted,
    }
}

/// One-sided Jacobi SVD. For wide matrices the decomposition is computed on
/// the transpose and swapped back.
pub fn jacobi_svd(a: &DMatrix<f64>) -> Svd {
    let (p, q) = a.shape();
    if p >= q {
        jacobi_svd_tall(a)
    } else {
        let t = jacobi_svd_tall(&a.transpose());
        Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    }
}

/// Signed spectral decomposition of a symmetric matrix via [`jacobi_svd`]:
/// eigenvalues ordered by descending magnitude with signs recovered from
/// Rayleigh quotients, eigenvectors as the matching columns.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = jacobi_svd(m);
    let mut eigenvalues = Vec::with_capacity(svd.sigma.len());
    for (i, &s) in svd.sigma.iter().enumerate() {
        if s == 0.0 {
            eigenvalues.push(0.0);
            continue;
        }
        let v = svd.v.column(i);
        let rayleigh = (v.transpose() * m * v)[(0, 0)];
        eigenvalues.push(if rayleigh < 0.0 { -s } else { s });
    }
    (eigenvalues, svd.v)
}

/// Pseudoinverse with its effective rank and singular spectrum.
#[derive(Debug, Clone)]
pub struct RankedPinv {
    /// The Moore-Penrose inverse.
    pub pinv: DMatrix<f64>,
    /// Count of singular values above the cutoff.
    pub rank: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

/// Moore-Penrose pseudoinverse via SVD.
///
/// `rank_tol` is a relative factor: singular values at or below
/// `rank_tol * sigma_max * max(rows, cols)` are treated as zero. The result
/// satisfies the four Penrose identities to roughly that scale.
pub fn pinv(m: &DMatrix<f64>, rank_tol: f64) -> Result<RankedPinv> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::Input(
            "pseudoinverse of a matrix with non-finite entries".into(),
        ));
    }
    if !rank_tol.is_finite() || rank_tol <= 0.0 {
        return Err(SolverError::Input(format!(
            "rank tolerance must be positive, got {rank_tol}"
        )));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(RankedPinv {
            pinv: DMatrix::zeros(cols, rows),
            rank: 0,
            singular_values: Vec::new(),
        });
    }
    let svd = jacobi_svd(m);
    let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
    let cutoff = rank_tol * sigma_max * rows.max(cols) as f64;
    let rank = svd.sigma.iter().filter(|&&s| s > cutoff).count();
    let k = svd.sigma.len();
    let mut sigma_inv = DMatrix::zeros(k, k);
    for i in 0..rank {
        sigma_inv[(i, i)] = 1.0 / svd.sigma[i];
    }
    let pinv = &svd.v * sigma_inv * svd.u.transpose();
    Ok(RankedPinv {
        pinv,
        rank,
        singular_values: svd.sigma,
    })
}

/// Range-inclusion test: `Range(N) ⊆ Range(L)` iff `L L† N = N`, checked as
/// `max_abs(L L† N − N) ≤ tol * (1 + max_abs(N))`.
pub fn range_included(n: &DMatrix<f64>, l: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if n.nrows() != l.nrows() {
        return Err(SolverError::Input(format!(
            "range test needs matching row counts, got {} and {}",
            n.nrows(),
            l.nrows()
        )));
    }
    if n.ncols() == 0 || n.nrows() == 0 {
        return Ok(true);
    }
    let l_pinv = pinv(l, DEFAULT_RANK_TOL)?;
    let residual = l * &l_pinv.pinv * n - n;
    Ok(max_abs(&residual) <= tol * (1.0 + max_abs(n)))
}

/// Minimal-norm solution of `L X M = N`, or `None` when no solution exists.
///
/// Solvability is `L L† N M† M = N` (checked to `tol * (1 + max_abs(N))`);
/// the returned solution is `X = L† N M†`, i.e. the free term of the general
/// solution is taken as zero. Use [`solve_linear_matrix_eq_with_free`] to
/// supply a nonzero free term.
pub fn solve_linear_matrix_eq(
    l: &DMatrix<f64>,
    m: &DMatrix<f64>,
    n: &DMatrix<f64>,
    tol: f64,
) -> Result<Option<DMatrix<f64>>> {
    solve_linear_matrix_eq_with_free(l, m, n, None, tol)
}

/// As [`solve_linear_matrix_eq`], with an explicit free matrix `Y`:
/// `X = L† N M† + Y − L† L Y M M†`.
pub fn solve_linear_matrix_eq_with_free(
    l: &DMatrix<f64>,
    m: &DMatrix<f64>,
    n: &DMatrix<f64>,
    free: Option<&DMatrix<f64>>,
    tol: f64,
) -> Result<Option<DMatrix<f64>>> {
    if l.nrows() != n.nrows() || m.ncols() != n.ncols() {
        return Err(SolverError::Input(format!(
            "L X M = N needs L rows = N rows and M cols = N cols, got L {}x{}, M {}x{}, N {}x{}",
            l.nrows(),
            l.ncols(),
            m.nrows(),
            m.ncols(),
            n.nrows(),
            n.ncols()
        )));
    }
    let l_pinv = pinv(l, DEFAULT_RANK_TOL)?;
    let m_pinv = pinv(m, DEFAULT_RANK_TOL)?;
    // Solvability: L L† N M† M = N.
    let projected = l * &l_pinv.pinv * n * &m_pinv.pinv * m;
    if max_abs(&(&projected - n)) > tol * (1.0 + max_abs(n)) {
        return Ok(None);
    }
    let mut x = &l_pinv.pinv * n * &m_pinv.pinv;
    if let Some(y) = free {
        if y.shape() != x.shape() {
            return Err(SolverError::Input(format!(
                "free matrix must be {}x{}, got {}x{}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        x += y - &l_pinv.pinv * l * y * m * &m_pinv.pinv;
    }
    Ok(Some(x))
}

/// Orthogonal splitting of the input space induced by a symmetric PSD matrix.
///
/// `t0_mat` is orthogonal with its first `m0` rows spanning the range of the
/// input and the remaining rows (`upsilon_t0`) spanning its null space, so
/// `t0_mat * (I − U† U) = [0; upsilon_t0]`. `g0` holds the trailing columns
/// of `t0_mat⁻¹ = t0_matᵀ`.
#[derive(Debug, Clone)]
pub struct ProjectorDecomposition {
    pub t0_mat: DMatrix<f64>,
    pub upsilon_t0: DMatrix<f64>,
    pub g0: DMatrix<f64>,
    pub m0: usize,
}

/// Decompose a symmetric PSD matrix into range/null orthonormal bases.
///
/// The bases come from the same SVD that backs [`pinv`], so the rank decision
/// and the projector `I − U† U` are exactly consistent with it. Right
/// singular vectors are sign-normalized (largest-magnitude component
/// positive) and ordered by descending singular value; the basis freedom
/// inside degenerate spectra remains, so downstream code must only rely on
/// basis-covariant products.
pub fn projector_decomposition(
    upsilon0: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<ProjectorDecomposition> {
    let m = upsilon0.nrows();
    if upsilon0.ncols() != m {
        return Err(SolverError::Input(format!(
            "projector decomposition needs a square matrix, got {}x{}",
            upsilon0.nrows(),
            upsilon0.ncols()
        )));
    }
    let scale = 1.0 + max_abs(upsilon0);
    let asym = max_abs(&(upsilon0 - upsilon0.transpose()));
    if asym > 1e-9 * scale {
        return Err(SolverError::Input(format!(
            "projector decomposition needs a symmetric matrix (asymmetry {asym:.3e})"
        )));
    }
    if m == 0 {
        return Ok(ProjectorDecomposition {
            t0_mat: DMatrix::zeros(0, 0),
            upsilon_t0: DMatrix::zeros(0, 0),
            g0: DMatrix::zeros(0, 0),
            m0: 0,
        });
    }
    let svd = jacobi_svd(upsilon0);
    let sigma_max = svd.sigma[0];
    let cutoff = rank_tol * sigma_max * m as f64;
    let m0 = svd.sigma.iter().filter(|&&s| s > cutoff).count();

    // Rows of T0: range basis first, then null basis, each sign-normalized.
    // The Rayleigh quotient along each range direction must be positive,
    // otherwise the input is indefinite.
    let mut t0_mat = DMatrix::zeros(m, m);
    for col in 0..m {
        let mut v = svd.v.column(col).clone_owned();
        if col < m0 {
            let rayleigh = (v.transpose() * upsilon0 * &v)[(0, 0)];
            if rayleigh < -cutoff.max(1e-9 * scale) {
                return Err(SolverError::Input(format!(
                    "projector decomposition needs a PSD matrix (found eigenvalue {rayleigh:.3e})"
                )));
            }
        }
        let lead = v
            .iter()
            .cloned()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        t0_mat.row_mut(col).copy_from(&v.transpose());
    }
    let upsilon_t0 = t0_mat.rows(m0, m - m0).clone_owned();
    let g0 = upsilon_t0.transpose();
    Ok(ProjectorDecomposition {
        t0_mat,
        upsilon_t0,
        g0,
        m0,
    })
}
