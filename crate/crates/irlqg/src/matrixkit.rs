//! Tolerance-aware dense linear-algebra primitives.
//!
//! Everything downstream (classification, Riccati flows, controller
//! synthesis) reduces to four operations implemented here: the
//! Moore-Penrose pseudoinverse, range-inclusion tests, the row
//! factorization of the annihilator `I - R†R`, and the congruence
//! diagonalization used by the closed-loop gain construction.
//!
//! Rank and zero decisions are relative: singular values (or eigenvalues)
//! below `tol * sigma_max` are treated as zero. [`DEFAULT_TOL`] is the
//! crate-wide default; every public operation accepts an override.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::Error;

/// Default relative tolerance for rank and zero decisions.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Invertible row transformation `T0` with `T0 (I - R†R) = [0; Υ]`,
/// together with the right block `G0` of `T0⁻¹`.
///
/// `upsilon` has full row rank `m - m0` where `m0 = rank(R)`. The
/// construction here makes `t0` orthogonal, so `g0_columns = upsilon'`.
#[derive(Debug, Clone)]
pub struct RankFactorization {
    /// Rank of the weight matrix `R`.
    pub m0: usize,
    /// The row transformation, `m x m`, invertible (orthogonal here).
    pub t0: DMatrix<f64>,
    /// Full-row-rank bottom block, `(m - m0) x m`.
    pub upsilon: DMatrix<f64>,
    /// Last `m - m0` columns of `t0⁻¹`.
    pub g0_columns: DMatrix<f64>,
}

/// Orthogonal congruence `t1' P1 t1 = blockdiag(phat_block, 0)` with
/// `phat_block` invertible of size `rank`.
#[derive(Debug, Clone)]
pub struct CongruenceDecomposition {
    /// Orthogonal transformation, `n x n`.
    pub t1: DMatrix<f64>,
    /// Invertible diagonal block, `rank x rank`.
    pub phat_block: DMatrix<f64>,
    /// Numerical rank of `P1`.
    pub rank: usize,
}

/// Moore-Penrose pseudoinverse with relative cutoff `tol * sigma_max`.
///
/// The zero matrix maps to the zero matrix; a zero-width or zero-height
/// matrix maps to its transposed-shape empty matrix.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    pinv_with_rank(m, tol).0
}

/// Pseudoinverse plus the numerical rank used for the cutoff.
pub fn pinv_with_rank(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    // V S† U'
    let mut s_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > cutoff {
            s_inv[(i, i)] = 1.0 / s;
        }
    }
    (vt.transpose() * s_inv * u.transpose(), rank)
}

/// Numerical rank: count of singular values above `tol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > tol * sigma_max).count()
}

/// Residual of the range-inclusion test: `‖(I - Y Y†) X‖_F`.
pub fn range_inclusion_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, tol: f64) -> f64 {
    assert_eq!(
        x.nrows(),
        y.nrows(),
        "range test needs equal row counts ({} vs {})",
        x.nrows(),
        y.nrows()
    );
    let y_pinv = pinv(y, tol);
    let proj = DMatrix::identity(y.nrows(), y.nrows()) - y * y_pinv;
    (proj * x).norm()
}

/// True iff every column of `x` lies in the column space of `y`,
/// i.e. `‖(I - Y Y†) X‖ ≤ tol (1 + ‖X‖)`.
pub fn range_included(x: &DMatrix<f64>, y: &DMatrix<f64>, tol: f64) -> bool {
    range_inclusion_residual(x, y, tol) <= tol * (1.0 + x.norm())
}

/// `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Minimum eigenvalue of the symmetric part; `0.0` for empty matrices.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().cloned().unwrap_or(0.0)
}

/// Symmetric PSD square root, with small negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut root = DMatrix::zeros(n, n);
    for i in 0..n {
        let lambda = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        root += v * v.transpose() * lambda.sqrt();
    }
    root
}

/// True iff all entries are finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

// Symmetric eigen pairs sorted by |eigenvalue| descending, eigenvector signs
// fixed so the largest-magnitude entry of each vector is positive.
fn sorted_eigen_pairs(m: &DMatrix<f64>) -> Vec<(f64, nalgebra::DVector<f64>)> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut pairs: Vec<(usize, f64)> = eig
        .eigenvalues
        .iter()
        .cloned()
        .enumerate()
        .collect();
    pairs.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    pairs
        .into_iter()
        .map(|(idx, lambda)| {
            let mut v = eig.eigenvectors.column(idx).clone_owned();
            let lead = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            if v[lead] < 0.0 {
                v = -v;
            }
            (lambda, v)
        })
        .collect()
}

/// Row factorization of the annihilator of a PSD weight matrix `R`:
/// finds orthogonal `T0` with `T0 (I - R†R) = [0; Υ]` and extracts the
/// right block `G0` of `T0⁻¹`.
///
/// The annihilator `I - R†R` is the orthogonal projector onto `null(R)`;
/// `T0` stacks an orthonormal basis of `range(R)` on top of one of
/// `null(R)`, so `Υ` is the `null(R)` basis transposed and `G0 = Υ'`.
pub fn rank_factorize_complement(r: &DMatrix<f64>, tol: f64) -> Result<RankFactorization, Error> {
    let m = r.nrows();
    if r.ncols() != m {
        return Err(Error::Dimension(format!(
            "weight matrix must be square, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let scale = 1.0 + r.norm();
    if (r - r.transpose()).norm() > 1e-8 * scale {
        return Err(Error::NotPsd(format!(
            "weight matrix is not symmetric (asymmetry {:.3e})",
            (r - r.transpose()).norm()
        )));
    }
    let min_eig = min_symmetric_eigenvalue(r);
    if min_eig < -1e-8 * scale {
        return Err(Error::NotPsd(format!(
            "weight matrix has negative eigenvalue {:.6e}",
            min_eig
        )));
    }

    let (r_pinv, m0) = pinv_with_rank(r, tol);
    let annihilator = symmetrize(&(DMatrix::identity(m, m) - r_pinv * r));

    // Eigen pairs of the projector cluster at 1 (null R) and 0 (range R);
    // take the m - m0 largest as the null-space basis.
    let pairs = sorted_eigen_pairs(&annihilator);
    let k = m - m0;
    let mut t0 = DMatrix::zeros(m, m);
    let mut upsilon = DMatrix::zeros(k, m);
    let mut g0 = DMatrix::zeros(m, k);
    // Rows m0.. come from the null-space basis (largest projector eigenvalues),
    // rows ..m0 from the range basis.
    for (j, (_, v)) in pairs.iter().take(k).enumerate() {
        t0.row_mut(m0 + j).copy_from(&v.transpose());
        upsilon.row_mut(j).copy_from(&v.transpose());
        g0.column_mut(j).copy_from(v);
    }
    for (j, (_, v)) in pairs.iter().skip(k).enumerate() {
        t0.row_mut(j).copy_from(&v.transpose());
    }
    Ok(RankFactorization {
        m0,
        t0,
        upsilon,
        g0_columns: g0,
    })
}

/// Orthogonal congruence diagonalization of a symmetric matrix:
/// `t1' P1 t1 = blockdiag(phat, 0)` with `phat` the invertible block.
///
/// `t1` comes from the symmetric eigendecomposition with columns sorted
/// by eigenvalue magnitude; `rank` counts eigenvalues above
/// `tol * |lambda|_max`. For `P1 = 0` the transformation is the identity.
pub fn congruence_diag(p1: &DMatrix<f64>, tol: f64) -> CongruenceDecomposition {
    let n = p1.nrows();
    assert_eq!(p1.ncols(), n, "congruence_diag needs a square matrix");
    let pairs = sorted_eigen_pairs(p1);
    let lambda_max = pairs.first().map(|(l, _)| l.abs()).unwrap_or(0.0);
    if lambda_max == 0.0 {
        return CongruenceDecomposition {
            t1: DMatrix::identity(n, n),
            phat_block: DMatrix::zeros(0, 0),
            rank: 0,
        };
    }
    let r = pairs
        .iter()
        .filter(|(l, _)| l.abs() > tol * lambda_max)
        .count();
    let mut t1 = DMatrix::zeros(n, n);
    for (j, (_, v)) in pairs.iter().enumerate() {
        t1.column_mut(j).copy_from(v);
    }
    let mut phat = DMatrix::zeros(r, r);
    for j in 0..r {
        phat[(j, j)] = pairs[j].0;
    }
    CongruenceDecomposition {
        t1,
        phat_block: phat,
        rank: r,
    }
}
