//! Backward/forward matrix-ODE integration on the problem grid.
//!
//! All flows use classical 4th-order fixed-step integration with the grid
//! step; symmetric flows are symmetrized after every step. Coefficients are
//! evaluated at stage times through the schedules (exact for constant
//! coefficients, linear interpolation otherwise).
//!
//! The flows:
//!
//! * `solve_P` — the standard Riccati equation, backward from `P(T) = H`:
//!   `0 = Ṗ + A'P + PA + Q - P B R† B' P`.
//! * `solve_P1` — the companion flow of the irregular branch, backward from
//!   a supplied terminal value: `0 = Ṗ1 + P1 A0 + A0' P1 + P1 D0 P1`,
//!   where `A0 = A - B R† B' P` and `D0 = -B R† B'`. Integrated jointly
//!   with `P` so stage values of `A0`, `D0` stay 4th-order accurate.
//! * `solve_filter_covariance` — the filter Riccati, forward from `sigma0`.
//! * `transition_P2` — the transition family `P2(t0, s)` of `ψ̇ = -A0' ψ`,
//!   as a function of its second argument: `d/ds P2(t0,s) = P2(t0,s) A0'(s)`
//!   from `P2(t0,t0) = I`.
//! * `gramian_G1` — the quadrature `∫ P2 C0' C0 P2' ds` (Simpson when the
//!   step count is even, trapezoid otherwise).

use nalgebra::{DMatrix, DVector};

use crate::classifier::DerivedOperators;
use crate::error::Error;
use crate::kalman::FilterCovarianceSolution;
use crate::matrixkit;
use crate::problem::{MatrixSchedule, ProblemSpec, TimeGrid};

/// Norm cap beyond which a flow is reported as a finite escape.
pub const ESCAPE_NORM: f64 = 1e12;

/// Grid-sampled solution of the standard Riccati equation; `p[k] = P(t_k)`
/// with `p[steps] = H` exactly.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
    /// Non-fatal observations, e.g. a rank change of `R` along the grid.
    pub warnings: Vec<String>,
}

/// Grid-sampled solution of the companion flow with the recorded residual
/// of the pointwise solvability condition `C0(t) + B0'(t) P1(t) = 0`.
#[derive(Debug, Clone)]
pub struct P1Solution {
    pub p1: Vec<DMatrix<f64>>,
    pub terminal_value: DMatrix<f64>,
    /// `‖C0(t_k) + B0'(t_k) P1(t_k)‖` per node.
    pub d4_residuals: Vec<f64>,
    /// Maximum of `d4_residuals`.
    pub d4_residual: f64,
    pub d4_worst_node: usize,
}

/// The transition family `P2(t0, s_k)` per grid node.
#[derive(Debug, Clone)]
pub struct TransitionSolution {
    pub p2: Vec<DMatrix<f64>>,
}

/// Controllability-style Gramian for the terminal-constraint test.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub g1: DMatrix<f64>,
}

// ---------------------------------------------------------------------------
// Fixed-step integration engine
// ---------------------------------------------------------------------------

fn rk4_step(
    y: &DMatrix<f64>,
    t: f64,
    dt: f64,
    rhs: &mut impl FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
) -> DMatrix<f64> {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)));
    let k3 = rhs(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)));
    let k4 = rhs(t + dt, &(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn check_escape(m: &DMatrix<f64>, flow: &'static str, t: f64) -> Result<(), Error> {
    let norm = m.norm();
    if !norm.is_finite() || norm > ESCAPE_NORM {
        return Err(Error::FiniteEscape { flow, t, norm });
    }
    Ok(())
}

/// Backward sweep from `terminal` at `t = T` down the grid. Index `k` of the
/// result holds the value at `t_k`; the last entry is `terminal` unchanged.
pub(crate) fn sweep_backward(
    grid: &TimeGrid,
    terminal: DMatrix<f64>,
    mut rhs: impl FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
    symmetric: bool,
    flow: &'static str,
) -> Result<Vec<DMatrix<f64>>, Error> {
    let h = grid.h();
    let mut out = vec![DMatrix::zeros(terminal.nrows(), terminal.ncols()); grid.num_nodes()];
    out[grid.steps] = terminal;
    for k in (1..=grid.steps).rev() {
        let t = grid.node(k);
        let mut next = rk4_step(&out[k], t, -h, &mut rhs);
        if symmetric {
            next = matrixkit::symmetrize(&next);
        }
        check_escape(&next, flow, t - h)?;
        out[k - 1] = next;
    }
    Ok(out)
}

/// Forward sweep from `initial` at `t = t0` up the grid.
pub(crate) fn sweep_forward(
    grid: &TimeGrid,
    initial: DMatrix<f64>,
    mut rhs: impl FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
    symmetric: bool,
    flow: &'static str,
) -> Result<Vec<DMatrix<f64>>, Error> {
    let h = grid.h();
    let mut out = vec![DMatrix::zeros(initial.nrows(), initial.ncols()); grid.num_nodes()];
    out[0] = initial;
    for k in 0..grid.steps {
        let t = grid.node(k);
        let mut next = rk4_step(&out[k], t, h, &mut rhs);
        if symmetric {
            next = matrixkit::symmetrize(&next);
        }
        check_escape(&next, flow, t + h)?;
        out[k + 1] = next;
    }
    Ok(out)
}

/// Forward sweep for vector states (mean paths).
pub(crate) fn sweep_forward_vector(
    grid: &TimeGrid,
    initial: DVector<f64>,
    mut rhs: impl FnMut(f64, &DVector<f64>) -> DVector<f64>,
    flow: &'static str,
) -> Result<Vec<DVector<f64>>, Error> {
    let h = grid.h();
    let mut out = vec![DVector::zeros(initial.len()); grid.num_nodes()];
    out[0] = initial;
    for k in 0..grid.steps {
        let t = grid.node(k);
        let y = &out[k];
        let k1 = rhs(t, y);
        let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(y + &k3 * h));
        let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let norm = next.norm();
        if !norm.is_finite() || norm > ESCAPE_NORM {
            return Err(Error::FiniteEscape {
                flow,
                t: t + h,
                norm,
            });
        }
        out[k + 1] = next;
    }
    Ok(out)
}

/// Linear interpolation of per-node matrices at an arbitrary time.
pub(crate) fn interp_nodes(nodes: &[DMatrix<f64>], grid: &TimeGrid, t: f64) -> DMatrix<f64> {
    let pos = (t - grid.t0) / grid.h();
    let nearest = pos.round();
    if (pos - nearest).abs() < 1e-9 {
        let k = (nearest.max(0.0) as usize).min(nodes.len() - 1);
        return nodes[k].clone();
    }
    let k = (pos.floor().max(0.0) as usize).min(nodes.len() - 2);
    let alpha = (pos - k as f64).clamp(0.0, 1.0);
    &nodes[k] * (1.0 - alpha) + &nodes[k + 1] * alpha
}

/// Linear interpolation of per-node vectors at an arbitrary time.
pub(crate) fn interp_vector_nodes(nodes: &[DVector<f64>], grid: &TimeGrid, t: f64) -> DVector<f64> {
    let pos = (t - grid.t0) / grid.h();
    let nearest = pos.round();
    if (pos - nearest).abs() < 1e-9 {
        let k = (nearest.max(0.0) as usize).min(nodes.len() - 1);
        return nodes[k].clone();
    }
    let k = (pos.floor().max(0.0) as usize).min(nodes.len() - 2);
    let alpha = (pos - k as f64).clamp(0.0, 1.0);
    &nodes[k] * (1.0 - alpha) + &nodes[k + 1] * alpha
}

/// Per-node quadrature weights over the grid, step size included: Simpson
/// when the step count is even, trapezoid otherwise.
pub(crate) fn quad_weights(grid: &TimeGrid) -> Vec<f64> {
    let h = grid.h();
    let steps = grid.steps;
    (0..=steps)
        .map(|k| {
            if steps % 2 == 0 {
                if k == 0 || k == steps {
                    h / 3.0
                } else if k % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                }
            } else if k == 0 || k == steps {
                0.5 * h
            } else {
                h
            }
        })
        .collect()
}

// Pseudoinverse of a scheduled matrix, hoisted out of the stage loop when the
// schedule is constant.
enum PinvSchedule<'a> {
    Constant(DMatrix<f64>),
    Dynamic {
        sched: &'a MatrixSchedule,
        tol: f64,
    },
}

impl<'a> PinvSchedule<'a> {
    fn new(sched: &'a MatrixSchedule, tol: f64) -> Self {
        match sched {
            MatrixSchedule::Constant(m) => PinvSchedule::Constant(matrixkit::pinv(m, tol)),
            MatrixSchedule::Sampled(_) => PinvSchedule::Dynamic { sched, tol },
        }
    }

    fn eval(&self, grid: &TimeGrid, t: f64) -> DMatrix<f64> {
        match self {
            PinvSchedule::Constant(m) => m.clone(),
            PinvSchedule::Dynamic { sched, tol } => matrixkit::pinv(&sched.eval(grid, t), *tol),
        }
    }
}

fn riccati_rhs(
    spec: &ProblemSpec,
    r_pinv: &PinvSchedule<'_>,
    t: f64,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let grid = &spec.grid;
    let a = spec.a.eval(grid, t);
    let b = spec.b.eval(grid, t);
    let q = spec.q.eval(grid, t);
    let rp = r_pinv.eval(grid, t);
    // backward equation rearranged as dP/dt
    -(a.transpose() * p) - p * a - q + p * &b * rp * b.transpose() * p
}

/// Integrate the standard Riccati equation backward from `P(T) = H`.
///
/// Flags (as a warning, not an error) any change of `rank R(t_k)` along the
/// grid, since the derived-operator construction assumes a fixed rank
/// structure.
pub fn solve_p(spec: &ProblemSpec, tol: f64) -> Result<RiccatiSolution, Error> {
    let r_pinv = PinvSchedule::new(&spec.r, tol);
    let p = sweep_backward(
        &spec.grid,
        spec.h.clone(),
        |t, p| riccati_rhs(spec, &r_pinv, t, p),
        true,
        "P",
    )?;
    let mut warnings = Vec::new();
    if let MatrixSchedule::Sampled(_) = spec.r {
        let ranks: Vec<usize> = (0..spec.grid.num_nodes())
            .map(|k| matrixkit::rank(spec.r.at_node(k), tol))
            .collect();
        if ranks.windows(2).any(|w| w[0] != w[1]) {
            warnings.push(format!(
                "rank of R varies along the grid (min {}, max {}); the derived operators assume a fixed rank structure",
                ranks.iter().min().unwrap(),
                ranks.iter().max().unwrap()
            ));
        }
    }
    Ok(RiccatiSolution { p, warnings })
}

/// Integrate the companion flow backward from `P1(T) = p1_terminal`,
/// re-integrating `P` alongside so `A0`, `D0` are formed from stage-accurate
/// values. Records the pointwise residual `‖C0 + B0' P1‖` against the
/// node-sampled operators in `ops`.
pub fn solve_p1(
    spec: &ProblemSpec,
    ops: &DerivedOperators,
    p1_terminal: &DMatrix<f64>,
    tol: f64,
) -> Result<P1Solution, Error> {
    let n = spec.n;
    if p1_terminal.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "P1 terminal value must be {n}x{n}, got {:?}",
            p1_terminal.shape()
        )));
    }
    let grid = &spec.grid;
    let h = grid.h();
    let r_pinv = PinvSchedule::new(&spec.r, tol);

    // Joint backward RK4 over the pair (P, P1).
    let mut p = spec.h.clone();
    let mut p1 = matrixkit::symmetrize(p1_terminal);
    let mut p1_nodes = vec![DMatrix::zeros(n, n); grid.num_nodes()];
    p1_nodes[grid.steps] = p1.clone();

    let pair_rhs = |t: f64, p: &DMatrix<f64>, p1: &DMatrix<f64>| {
        let a = spec.a.eval(grid, t);
        let b = spec.b.eval(grid, t);
        let q = spec.q.eval(grid, t);
        let rp = r_pinv.eval(grid, t);
        let brb = &b * rp * b.transpose();
        let p_dot = -(a.transpose() * p) - p * &a - q + p * &brb * p;
        let a0 = a - &brb * p;
        // D0 = -B R† B';   dP1/dt = -(P1 A0 + A0' P1 + P1 D0 P1)
        let p1_dot = -(p1 * &a0) - a0.transpose() * p1 + p1 * &brb * p1;
        (p_dot, p1_dot)
    };

    for k in (1..=grid.steps).rev() {
        let t = grid.node(k);
        let dt = -h;
        let (kp1, kq1) = pair_rhs(t, &p, &p1);
        let (kp2, kq2) = pair_rhs(
            t + 0.5 * dt,
            &(&p + &kp1 * (0.5 * dt)),
            &(&p1 + &kq1 * (0.5 * dt)),
        );
        let (kp3, kq3) = pair_rhs(
            t + 0.5 * dt,
            &(&p + &kp2 * (0.5 * dt)),
            &(&p1 + &kq2 * (0.5 * dt)),
        );
        let (kp4, kq4) = pair_rhs(t + dt, &(&p + &kp3 * dt), &(&p1 + &kq3 * dt));
        p = matrixkit::symmetrize(&(&p + (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (dt / 6.0)));
        p1 = matrixkit::symmetrize(&(&p1 + (kq1 + kq2 * 2.0 + kq3 * 2.0 + kq4) * (dt / 6.0)));
        check_escape(&p, "P", t - h)?;
        check_escape(&p1, "P1", t - h)?;
        p1_nodes[k - 1] = p1.clone();
    }

    let mut d4_residuals = Vec::with_capacity(grid.num_nodes());
    for k in 0..grid.num_nodes() {
        let res = (&ops.c0[k] + ops.b0[k].transpose() * &p1_nodes[k]).norm();
        d4_residuals.push(res);
    }
    let (d4_worst_node, d4_residual) = d4_residuals
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap_or((0, 0.0));
    Ok(P1Solution {
        p1: p1_nodes,
        terminal_value: p1_terminal.clone(),
        d4_residuals,
        d4_residual,
        d4_worst_node,
    })
}

/// Integrate the filter covariance forward from `sigma0` and form the filter
/// gain `L = P̂ C' (G G')⁻¹` at every node.
pub fn solve_filter_covariance(spec: &ProblemSpec) -> Result<FilterCovarianceSolution, Error> {
    let grid = &spec.grid;
    let gg_inv_at = |t: f64| -> Result<DMatrix<f64>, Error> {
        let g = spec.g.eval(grid, t);
        (&g * g.transpose()).try_inverse().ok_or_else(|| {
            Error::Numeric(format!("GG' is not invertible at t = {t:.6}"))
        })
    };
    // Fallible coefficients inside an infallible RK4 closure: probe the whole
    // grid (and midpoints) first so failures surface as errors, not panics.
    for k in 0..grid.num_nodes() {
        gg_inv_at(grid.node(k))?;
        if k < grid.steps {
            gg_inv_at(grid.node(k) + 0.5 * grid.h())?;
        }
    }
    let p_hat = sweep_forward(
        grid,
        matrixkit::symmetrize(&spec.sigma0),
        |t, p| {
            let a = spec.a.eval(grid, t);
            let d = spec.d.eval(grid, t);
            let c = spec.c.eval(grid, t);
            let gg_inv = gg_inv_at(t).expect("probed above");
            &a * p + p * a.transpose() + &d * d.transpose()
                - p * c.transpose() * gg_inv * c * p
        },
        true,
        "filter covariance",
    )?;
    let l_gain = (0..grid.num_nodes())
        .map(|k| {
            let t = grid.node(k);
            let c = spec.c.eval(grid, t);
            Ok(&p_hat[k] * c.transpose() * gg_inv_at(t)?)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(FilterCovarianceSolution { p_hat, l_gain })
}

/// Integrate the transition family `P2(t0, s)` over the grid:
/// `d/ds P2(t0,s) = P2(t0,s) A0'(s)` from the identity at `s = t0`.
///
/// This is the two-parameter transition matrix of `ψ̇ = -A0'(t) ψ`
/// evaluated in its second argument, the form the Gramian integrand needs.
pub fn transition_p2(ops: &DerivedOperators, grid: &TimeGrid) -> Result<TransitionSolution, Error> {
    let n = ops.a0[0].nrows();
    let p2 = sweep_forward(
        grid,
        DMatrix::identity(n, n),
        |t, m| {
            let a0 = interp_nodes(&ops.a0, grid, t);
            m * a0.transpose()
        },
        false,
        "P2",
    )?;
    Ok(TransitionSolution { p2 })
}

/// Quadrature of the Gramian `G1[t0,T] = ∫ P2 C0' C0 P2' ds` over the grid.
/// Simpson weights when the step count is even, trapezoid otherwise; the
/// result is symmetrized.
pub fn gramian_g1(
    ops: &DerivedOperators,
    p2: &TransitionSolution,
    grid: &TimeGrid,
) -> Result<Gramian, Error> {
    let n = ops.a0[0].nrows();
    let nodes = grid.num_nodes();
    if p2.p2.len() != nodes || ops.c0.len() != nodes {
        return Err(Error::Dimension(
            "transition and operator schedules must cover the grid".into(),
        ));
    }
    let weights = quad_weights(grid);
    let mut g1 = DMatrix::zeros(n, n);
    for k in 0..nodes {
        let c0p2t = &ops.c0[k] * p2.p2[k].transpose();
        g1 += c0p2t.transpose() * c0p2t * weights[k];
    }
    Ok(Gramian {
        g1: matrixkit::symmetrize(&g1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier;
    use crate::matrixkit::DEFAULT_TOL;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn scalar_spec(a: f64, b: f64, q: f64, r: f64, h: f64, t_end: f64, steps: usize) -> ProblemSpec {
        let mut spec = ProblemSpec::intro_scalar(t_end, steps);
        spec.a = MatrixSchedule::constant(DMatrix::from_element(1, 1, a));
        spec.b = MatrixSchedule::constant(DMatrix::from_element(1, 1, b));
        spec.q = MatrixSchedule::constant(DMatrix::from_element(1, 1, q));
        spec.r = MatrixSchedule::constant(DMatrix::from_element(1, 1, r));
        spec.h = DMatrix::from_element(1, 1, h);
        spec
    }

    #[test]
    fn p_constant_for_singular_intro() {
        let spec = ProblemSpec::intro_scalar(1.0, 200);
        let sol = solve_p(&spec, DEFAULT_TOL).unwrap();
        for p in &sol.p {
            assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn p_matches_closed_form_regular_scalar() {
        // Ṗ = P², P(T) = 1  =>  P(t) = 1 / (1 + T - t)
        let spec = scalar_spec(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 500);
        let sol = solve_p(&spec, DEFAULT_TOL).unwrap();
        for (k, p) in sol.p.iter().enumerate() {
            let t = spec.grid.node(k);
            assert_abs_diff_eq!(p[(0, 0)], 1.0 / (2.0 - t), epsilon = 1e-10);
        }
    }

    #[test]
    fn p_zero_when_unweighted() {
        let spec = scalar_spec(0.3, 1.0, 0.0, 1.0, 0.0, 1.0, 100);
        let sol = solve_p(&spec, DEFAULT_TOL).unwrap();
        assert!(sol.p.iter().all(|p| p[(0, 0)].abs() < 1e-15));
    }

    #[test]
    fn p_grid_halving_is_fourth_order() {
        let errs: Vec<f64> = [200usize, 400]
            .iter()
            .map(|&steps| {
                let spec = scalar_spec(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, steps);
                let sol = solve_p(&spec, DEFAULT_TOL).unwrap();
                (sol.p[0][(0, 0)] - 0.5).abs()
            })
            .collect();
        let ratio = errs[0] / errs[1].max(1e-300);
        assert!(
            (8.0..64.0).contains(&ratio),
            "expected ~16x error drop, got {ratio} ({errs:?})"
        );
    }

    #[test]
    fn p1_constant_with_matching_terminal() {
        let spec = ProblemSpec::intro_scalar(1.0, 200);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        let p1t = DMatrix::from_element(1, 1, -1.0);
        let sol = solve_p1(&spec, &ops, &p1t, DEFAULT_TOL).unwrap();
        for p1 in &sol.p1 {
            assert_abs_diff_eq!(p1[(0, 0)], -1.0, epsilon = 1e-14);
        }
        assert!(sol.d4_residual < 1e-12);
    }

    #[test]
    fn p1_zero_terminal_violates_pointwise_condition() {
        let spec = ProblemSpec::intro_scalar(1.0, 200);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        let sol = solve_p1(&spec, &ops, &DMatrix::zeros(1, 1), DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(sol.d4_residual, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn filter_covariance_matches_tanh() {
        // Ṗ̂ = 1 - P̂², P̂(0) = 0  =>  P̂(t) = tanh t
        let spec = ProblemSpec::intro_scalar(1.0, 1000);
        let sol = solve_filter_covariance(&spec).unwrap();
        for (k, p) in sol.p_hat.iter().enumerate() {
            let t = spec.grid.node(k);
            assert_abs_diff_eq!(p[(0, 0)], t.tanh(), epsilon = 1e-10);
        }
        // L = P̂ C' (GG')⁻¹ = P̂ here
        assert_abs_diff_eq!(sol.l_gain[1000][(0, 0)], 1.0f64.tanh(), epsilon = 1e-10);
    }

    #[test]
    fn filter_covariance_grows_linearly_without_observation() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 400);
        spec.c = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let sol = solve_filter_covariance(&spec).unwrap();
        for (k, p) in sol.p_hat.iter().enumerate() {
            let t = spec.grid.node(k);
            assert_abs_diff_eq!(p[(0, 0)], t, epsilon = 1e-12);
        }
        assert!(sol.l_gain.iter().all(|l| l[(0, 0)] == 0.0));
    }

    #[test]
    fn filter_covariance_zero_without_noise() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 100);
        spec.d = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let sol = solve_filter_covariance(&spec).unwrap();
        assert!(sol.p_hat.iter().all(|p| p[(0, 0)].abs() < 1e-15));
    }

    #[test]
    fn transition_identity_for_zero_generator() {
        let spec = ProblemSpec::intro_scalar(1.0, 100);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        let sol = transition_p2(&ops, &spec.grid).unwrap();
        assert!(sol.p2.iter().all(|m| (m[(0, 0)] - 1.0).abs() < 1e-14));
    }

    #[test]
    fn transition_scalar_constant_generator() {
        // constant A0 = a: P2(t0, s) = exp(a (s - t0)), the flow that makes
        // the Gramian identity ∫ P2 C0' u1 ds = P1(t0) x0 hold.
        let a = 0.7;
        let spec = ProblemSpec::intro_scalar(1.0, 400);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let mut ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        for m in ops.a0.iter_mut() {
            *m = DMatrix::from_element(1, 1, a);
        }
        let sol = transition_p2(&ops, &spec.grid).unwrap();
        for (k, m) in sol.p2.iter().enumerate() {
            let s = spec.grid.node(k);
            assert_abs_diff_eq!(m[(0, 0)], (a * s).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn gramian_equals_horizon_length_for_intro() {
        let spec = ProblemSpec::intro_scalar(2.0, 200);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        let p2 = transition_p2(&ops, &spec.grid).unwrap();
        let g1 = gramian_g1(&ops, &p2, &spec.grid).unwrap();
        assert_abs_diff_eq!(g1.g1[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gramian_zero_for_empty_complement() {
        // regular weight: C0 has zero rows, the integrand is the zero matrix
        let spec = scalar_spec(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 100);
        let p = solve_p(&spec, DEFAULT_TOL).unwrap();
        let ops = classifier::derive_operators(&spec, &p, DEFAULT_TOL).unwrap();
        let p2 = transition_p2(&ops, &spec.grid).unwrap();
        let g1 = gramian_g1(&ops, &p2, &spec.grid).unwrap();
        assert_eq!(g1.g1[(0, 0)], 0.0);
    }

    #[test]
    fn finite_escape_is_reported() {
        // Ṗ = Q-driven growth with huge Q makes the backward flow blow past
        // the cap within the horizon.
        let mut spec = scalar_spec(20.0, 0.0, 1.0, 1.0, 1.0, 40.0, 400);
        spec.q = MatrixSchedule::constant(DMatrix::from_element(1, 1, 1.0));
        let err = solve_p(&spec, DEFAULT_TOL).unwrap_err();
        assert!(matches!(err, Error::FiniteEscape { flow: "P", .. }), "{err}");
    }

    #[test]
    fn mean_sweep_matches_exponential() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let path = sweep_forward_vector(&grid, dvector![1.0], |_, x| -x * 0.5, "mean").unwrap();
        assert_abs_diff_eq!(path[200][0], (-0.5f64).exp(), epsilon = 1e-10);
    }
}
