//! Regular/irregular classification and the derived operator family.
//!
//! A node is *regular* when `Range(B'P) ⊆ Range(R)`: the stationarity
//! equation `R u + B' P x = 0` is then solvable for `u` at every state and
//! the classic feedback applies. Otherwise the node (and, by the
//! horizon-wide branching rule, the problem) is *irregular* and synthesis
//! goes through the companion flow and the annihilator geometry below.
//!
//! With `T0 (I - R†R) = [0; Υ]` and `[* G0] = T0⁻¹`, the family per node is
//!
//! ```text
//! A0 = A - B R† B' P          D0 = -B R† B'
//! [* C0'] = P B (I - R†R) T0⁻¹    [* B0] = B (I - R†R) T0⁻¹
//! ```
//!
//! where the starred blocks take the first `m0 = rank R` columns and the
//! named blocks the remaining `m - m0`.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::matrixkit::{self, RankFactorization};
use crate::problem::ProblemSpec;
use crate::riccati::RiccatiSolution;

/// Per-node operator schedules plus the annihilator factorizations they
/// came from. Widths are uniform: `c0[k]` is `(m - m0) x n`, `b0[k]` is
/// `n x (m - m0)`, `g0[k]` is `m x (m - m0)`.
#[derive(Debug, Clone)]
pub struct DerivedOperators {
    pub a0: Vec<DMatrix<f64>>,
    pub d0: Vec<DMatrix<f64>>,
    pub c0: Vec<DMatrix<f64>>,
    pub b0: Vec<DMatrix<f64>>,
    pub g0: Vec<DMatrix<f64>>,
    /// Rank of `R`, constant along the grid.
    pub m0: usize,
    /// Annihilator factorization per node.
    pub factorizations: Vec<RankFactorization>,
    /// Full column-split products `P B (I-R†R) T0⁻¹` per node; diagnostic
    /// only (the leading block is unused by the synthesis).
    pub split_pb: Vec<DMatrix<f64>>,
    /// Full `B (I-R†R) T0⁻¹` per node; diagnostic only.
    pub split_b: Vec<DMatrix<f64>>,
}

/// Outcome of the per-node range test.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    /// `true` where `Range(B'P) ⊆ Range(R)`.
    pub regular_nodes: Vec<bool>,
    pub rank_r: Vec<usize>,
    /// Raw inclusion residuals `‖(I - R R†) B'P‖` per node.
    pub residuals: Vec<f64>,
    pub worst_residual: f64,
    /// Horizon-wide verdict: regular only if every node is regular.
    pub regular: bool,
}

impl RegularityReport {
    pub fn irregular_node_count(&self) -> usize {
        self.regular_nodes.iter().filter(|r| !**r).count()
    }
}

/// Classify every grid node by the range test `Range(B'P) ⊆ Range(R)`.
pub fn classify(spec: &ProblemSpec, p: &RiccatiSolution, tol: f64) -> RegularityReport {
    let nodes = spec.grid.num_nodes();
    let mut regular_nodes = Vec::with_capacity(nodes);
    let mut rank_r = Vec::with_capacity(nodes);
    let mut residuals = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let b = spec.b.at_node(k);
        let r = spec.r.at_node(k);
        let bp = b.transpose() * &p.p[k];
        let res = matrixkit::range_inclusion_residual(&bp, r, tol);
        residuals.push(res);
        regular_nodes.push(res <= tol * (1.0 + bp.norm()));
        rank_r.push(matrixkit::rank(r, tol));
    }
    let worst_residual = residuals.iter().cloned().fold(0.0, f64::max);
    let regular = regular_nodes.iter().all(|r| *r);
    RegularityReport {
        regular_nodes,
        rank_r,
        residuals,
        worst_residual,
        regular,
    }
}

/// Build the derived operator family at every node.
///
/// Fails if `rank R` is not constant along the grid, since the widths of
/// `C0`, `B0`, `G0` would change mid-horizon.
pub fn derive_operators(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    tol: f64,
) -> Result<DerivedOperators, Error> {
    let nodes = spec.grid.num_nodes();
    let (n, m) = (spec.n, spec.m);

    let factorizations: Vec<RankFactorization> = (0..nodes)
        .map(|k| matrixkit::rank_factorize_complement(spec.r.at_node(k), tol))
        .collect::<Result<_, _>>()?;
    let m0 = factorizations[0].m0;
    let offenders: Vec<usize> = factorizations
        .iter()
        .enumerate()
        .filter(|(_, f)| f.m0 != m0)
        .map(|(k, _)| k)
        .collect();
    if !offenders.is_empty() {
        return Err(Error::RankInconsistent(format!(
            "rank R = {m0} at node 0 but differs at nodes {offenders:?}"
        )));
    }
    let width = m - m0;

    let mut a0 = Vec::with_capacity(nodes);
    let mut d0 = Vec::with_capacity(nodes);
    let mut c0 = Vec::with_capacity(nodes);
    let mut b0 = Vec::with_capacity(nodes);
    let mut g0 = Vec::with_capacity(nodes);
    let mut split_pb = Vec::with_capacity(nodes);
    let mut split_b = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let a = spec.a.at_node(k);
        let b = spec.b.at_node(k);
        let r = spec.r.at_node(k);
        let pk = &p.p[k];
        let r_pinv = matrixkit::pinv(r, tol);
        let annihilator = DMatrix::identity(m, m) - &r_pinv * r;
        let t0_inv = factorizations[k].t0.transpose(); // T0 orthogonal
        let brb = b * &r_pinv * b.transpose();

        a0.push(a - &brb * pk);
        d0.push(-&brb);
        let full_pb = pk * b * &annihilator * &t0_inv; // n x m
        let full_b = b * &annihilator * &t0_inv; // n x m
        c0.push(full_pb.columns(m0, width).transpose().clone_owned());
        b0.push(full_b.columns(m0, width).clone_owned());
        g0.push(factorizations[k].g0_columns.clone());
        split_pb.push(full_pb);
        split_b.push(full_b);
        debug_assert_eq!(c0[k].shape(), (width, n));
        debug_assert_eq!(b0[k].shape(), (n, width));
        debug_assert_eq!(g0[k].shape(), (m, width));
    }
    Ok(DerivedOperators {
        a0,
        d0,
        c0,
        b0,
        g0,
        m0,
        factorizations,
        split_pb,
        split_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixkit::DEFAULT_TOL;
    use crate::problem::MatrixSchedule;
    use crate::riccati::solve_p;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn intro_is_irregular_everywhere() {
        let spec = ProblemSpec::intro_scalar(1.0, 100);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let report = classify(&spec, &p, DEFAULT_TOL);
        assert!(!report.regular);
        assert_eq!(report.irregular_node_count(), 101);
        assert_abs_diff_eq!(report.worst_residual, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invertible_weight_is_regular() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 100);
        spec.r = MatrixSchedule::constant(DMatrix::from_element(1, 1, 1.0));
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let report = classify(&spec, &p, DEFAULT_TOL);
        assert!(report.regular);
    }

    #[test]
    fn zero_p_is_regular_even_with_zero_weight() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 100);
        spec.h = DMatrix::zeros(1, 1);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let report = classify(&spec, &p, DEFAULT_TOL);
        assert!(report.regular, "B'P = 0 lies in every range");
    }

    #[test]
    fn intro_operator_family() {
        let spec = ProblemSpec::intro_scalar(1.0, 50);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        assert_eq!(ops.m0, 0);
        for k in 0..spec.grid.num_nodes() {
            assert_abs_diff_eq!(ops.a0[k][(0, 0)], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(ops.d0[k][(0, 0)], 0.0, epsilon = 1e-14);
            // signs of C0, B0, G0 share the basis column, so products are fixed
            assert_abs_diff_eq!(ops.c0[k][(0, 0)] * ops.g0[k][(0, 0)], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ops.b0[k][(0, 0)] * ops.g0[k][(0, 0)], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ops.c0[k][(0, 0)].abs(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn regular_weight_gives_empty_complement() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 50);
        spec.r = MatrixSchedule::constant(DMatrix::from_element(1, 1, 1.0));
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        assert_eq!(ops.m0, 1);
        assert_eq!(ops.c0[0].nrows(), 0);
        assert_eq!(ops.b0[0].ncols(), 0);
        assert_eq!(ops.g0[0].ncols(), 0);
        // A0 = A - B B' P, D0 = -B B'
        assert_abs_diff_eq!(ops.a0[0][(0, 0)], -p.p[0][(0, 0)], epsilon = 1e-14);
        assert_abs_diff_eq!(ops.d0[0][(0, 0)], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn control_free_system() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 50);
        spec.b = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(ops.a0[0][(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ops.d0[0][(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ops.c0[0].norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn reconstruction_of_column_splits() {
        // random 3-state, 2-input instance with singular R
        let mut rng = StdRng::seed_from_u64(7);
        let n = 3;
        let m = 2;
        let rand_mat = |rng: &mut StdRng, r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
        };
        let mut spec = ProblemSpec::intro_scalar(0.5, 40);
        spec.n = n;
        spec.m = m;
        spec.s = 1;
        spec.a = MatrixSchedule::constant(rand_mat(&mut rng, n, n));
        spec.b = MatrixSchedule::constant(rand_mat(&mut rng, n, m));
        spec.d = MatrixSchedule::constant(DMatrix::identity(n, n));
        spec.c = MatrixSchedule::constant(rand_mat(&mut rng, 1, n));
        spec.g = MatrixSchedule::constant(DMatrix::identity(1, 1));
        spec.q = MatrixSchedule::constant(DMatrix::zeros(n, n));
        spec.r = MatrixSchedule::constant(DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.0]));
        let hh = rand_mat(&mut rng, n, n);
        spec.h = &hh * hh.transpose();
        spec.x0_mean = nalgebra::DVector::zeros(n);
        spec.sigma0 = DMatrix::zeros(n, n);

        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        assert_eq!(ops.m0, 1);
        for k in [0usize, 20, 40] {
            let b = spec.b.at_node(k);
            let r = spec.r.at_node(k);
            let r_pinv = matrixkit::pinv(r, DEFAULT_TOL);
            let annihilator = DMatrix::identity(m, m) - &r_pinv * r;
            // [* B0] T0 = B (I - R†R) and [* C0'] T0 = P B (I - R†R)
            let recon_b = &ops.split_b[k] * &ops.factorizations[k].t0;
            assert!((recon_b - b * &annihilator).norm() < 1e-10);
            let recon_pb = &ops.split_pb[k] * &ops.factorizations[k].t0;
            assert!((recon_pb - &p.p[k] * b * &annihilator).norm() < 1e-10);
            // width consistency
            assert_eq!(ops.c0[k].nrows(), m - ops.m0);
            assert_eq!(ops.b0[k].ncols(), m - ops.m0);
            assert_eq!(ops.g0[k].ncols(), m - ops.m0);
        }
    }

    #[test]
    fn verdict_invariant_under_state_basis_change() {
        // range inclusion is basis-free: residual verdict for B'P M equals
        // the one for B'P when M is invertible
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let x = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0f64));
            let y = {
                let base = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0f64));
                &base * base.transpose()
            };
            let m = loop {
                let cand = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0f64));
                if cand.determinant().abs() > 0.1 {
                    break cand;
                }
            };
            let direct = matrixkit::range_included(&x, &y, 1e-8);
            let transformed = matrixkit::range_included(&(&x * m), &y, 1e-8);
            assert_eq!(direct, transformed);
        }
    }
}
