//! Controller synthesis for both branches of the range dichotomy.
//!
//! The regular branch is the classic one: `u = -R† B' P x̂`. The irregular
//! branch is the substance of this crate. Its pipeline:
//!
//! 1. pick a terminal value for the companion flow `P1` (user-supplied or
//!    the least-squares heuristic of [`resolve_p1_terminal`]);
//! 2. integrate `P1` and require the pointwise condition
//!    `C0(t) + B0'(t) P1(t) = 0` along the whole grid;
//! 3. certify that the terminal constraint `P1(T) E[x̂(T)] = 0` is
//!    reachable, either open-loop through the Gramian range test of
//!    [`solve_open_loop`] or closed-loop through the gain equation of
//!    [`solve_closed_loop`];
//! 4. assemble the control
//!    `u = -R† B' (P + P1) x̂ + G0 u1` for `t < T`, with the deterministic
//!    terminal branch `u(T) = -R† B' H E[x(T)]` (the free annihilator term
//!    is fixed to zero).
//!
//! The optimal cost of the filtered problem is
//! `x̂0' (P(t0) + P1(t0)) x̂0`, and the full output-feedback cost adds the
//! control-independent estimation-error term `∫ tr(Q P̂) dt`.

use nalgebra::{DMatrix, DVector};

use crate::classifier::{self, DerivedOperators, RegularityReport};
use crate::error::Error;
use crate::kalman::FilterCovarianceSolution;
use crate::matrixkit;
use crate::problem::ProblemSpec;
use crate::riccati::{
    self, Gramian, P1Solution, RiccatiSolution, TransitionSolution,
};

/// Tolerances and guard width for the synthesis pipeline.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative rank/zero tolerance fed to every pseudoinverse.
    pub rank_tol: f64,
    /// Acceptance threshold for the pointwise condition residual
    /// `max_t ‖C0 + B0' P1‖ ≤ d4_tol (1 + max_t ‖C0‖)`.
    pub d4_tol: f64,
    /// Acceptance threshold for the Gramian range test,
    /// `‖(I - G1 G1†) P1(t0)‖ ≤ range_tol (1 + ‖P1(t0)‖)`.
    pub range_tol: f64,
    /// Acceptance threshold for the relative residual of the closed-loop
    /// gain equation.
    pub gain_tol: f64,
    /// Width of the terminal guard in grid steps: the closed-loop gain has
    /// a `1/(t-T)` factor and is only solved for `t ≤ T - guard_steps * h`,
    /// then held.
    pub guard_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rank_tol: matrixkit::DEFAULT_TOL,
            d4_tol: 1e-6,
            range_tol: 1e-6,
            gain_tol: 1e-6,
            guard_steps: 10,
        }
    }
}

/// Open-loop synthesis output: the auxiliary input `u1`, the full control
/// along the deterministic mean path, and the Gramian feasibility
/// certificate.
#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    /// Whether `Range(P1(t0)) ⊆ Range(G1)` held within tolerance.
    pub feasible: bool,
    /// Raw residual `‖(I - G1 G1†) P1(t0)‖`.
    pub range_residual: f64,
    /// Auxiliary input per node, width `m - m0`.
    pub u1_schedule: Vec<DVector<f64>>,
    /// Full control per node along the mean path; the final node carries
    /// the deterministic terminal branch.
    pub u_schedule: Vec<DVector<f64>>,
    /// Mean state path under this control.
    pub mean_state: Vec<DVector<f64>>,
    /// `x̂0' (P(t0) + P1(t0)) x̂0`.
    pub optimal_cost_deterministic: f64,
}

/// Closed-loop synthesis output: the gain `K` for `u1 = K x̂` solved from
/// the block equation
/// `T̃1 + Â1 + B1 (K T1) = [I/(t-T)  0]` at every node before the guard.
#[derive(Debug, Clone)]
pub struct ClosedLoopSolution {
    /// Whether the gain equation was satisfied (relative residual below
    /// tolerance) at every node before the guard.
    pub solvable: bool,
    /// Max relative residual of the gain equation over `[t0, T - eps]`.
    pub df7_residual: f64,
    /// Gain per node, `(m - m0) x n`; frozen at its last solved value
    /// inside the guard window.
    pub k_schedule: Vec<DMatrix<f64>>,
    /// Time width of the terminal guard, `guard_steps * h`.
    pub epsilon_guard: f64,
    /// Last node index at which the gain equation is solved.
    pub guard_node: usize,
    /// Composite feedback `-R† B' (P + P1) + G0 K` per node, `m x n`.
    pub full_gain: Vec<DMatrix<f64>>,
    /// Deterministic control applied at `t = T`.
    pub terminal_control: DVector<f64>,
    /// Mean state path under the composite feedback.
    pub mean_state: Vec<DVector<f64>>,
}

/// Classic-branch output: `u = F x̂` with `F = -R† B' P`.
#[derive(Debug, Clone)]
pub struct RegularSolution {
    pub f_gain: Vec<DMatrix<f64>>,
    pub mean_state: Vec<DVector<f64>>,
    /// `x̂0' P(t0) x̂0`.
    pub optimal_cost_deterministic: f64,
}

/// Both sub-certificates behind the solvability decision.
#[derive(Debug, Clone, Copy)]
pub struct SolvabilityVerdict {
    pub d4_ok: bool,
    pub d4_residual: f64,
    pub open_loop_ok: bool,
    pub open_loop_residual: f64,
    pub closed_loop_ok: bool,
    pub closed_loop_residual: f64,
    /// Pointwise condition holds and at least one terminal-constraint
    /// mechanism is available.
    pub solvable: bool,
}

/// A state/control pair along the grid, used for residual verification.
#[derive(Debug, Clone)]
pub struct MeanTrajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

/// Residuals of the optimality system evaluated along a trajectory with
/// the costate ansatz `p = (P + P1) x̂`, `q = (P + P1) L`: the forward
/// dynamics, the backward costate dynamics, the stationarity relation
/// `R u + B' p = 0`, and the terminal relation `p(T) = H E[x(T)]`.
#[derive(Debug, Clone, Copy)]
pub struct CostateCheck {
    pub state_dynamics_max: f64,
    pub state_dynamics_rms: f64,
    pub costate_dynamics_max: f64,
    pub costate_dynamics_rms: f64,
    pub stationarity_max: f64,
    pub stationarity_rms: f64,
    pub terminal_residual: f64,
}

fn c0_scale(ops: &DerivedOperators) -> f64 {
    ops.c0.iter().map(|m| m.norm()).fold(0.0, f64::max)
}

/// Whether the recorded pointwise-condition residual passes at tolerance.
pub fn d4_holds(ops: &DerivedOperators, p1: &P1Solution, opts: &SolverOptions) -> bool {
    p1.d4_residual <= opts.d4_tol * (1.0 + c0_scale(ops))
}

/// Produce the terminal value for the companion flow.
///
/// A user-supplied candidate is passed through (symmetrized). Otherwise the
/// heuristic solves `B0'(T) X = -C0(T)` over symmetric `X` by least squares,
/// integrates the flow, and accepts only if the pointwise condition holds on
/// the whole grid.
pub fn resolve_p1_terminal(
    spec: &ProblemSpec,
    ops: &DerivedOperators,
    opts: &SolverOptions,
) -> Result<DMatrix<f64>, Error> {
    if let Some(p1t) = &spec.p1_terminal {
        return Ok(matrixkit::symmetrize(p1t));
    }
    let n = spec.n;
    let last = spec.grid.steps;
    let b0t = ops.b0[last].transpose(); // (m - m0) x n
    let c0t = &ops.c0[last];
    let width = b0t.nrows();

    // Least squares over the symmetric parametrization X = sum x_ij S_ij.
    let num_params = n * (n + 1) / 2;
    let mut design = DMatrix::zeros(width * n, num_params);
    let mut col = 0;
    for i in 0..n {
        for j in i..n {
            let mut basis = DMatrix::zeros(n, n);
            basis[(i, j)] = 1.0;
            basis[(j, i)] = 1.0;
            let image = &b0t * basis; // width x n
            for (row_idx, v) in image.iter().enumerate() {
                design[(row_idx, col)] = *v;
            }
            col += 1;
        }
    }
    let rhs = DVector::from_iterator(width * n, (-c0t).iter().cloned());
    let coeffs = matrixkit::pinv(&design, opts.rank_tol) * rhs;
    let mut candidate = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            candidate[(i, j)] = coeffs[idx];
            candidate[(j, i)] = coeffs[idx];
            idx += 1;
        }
    }

    let trial = riccati::solve_p1(spec, ops, &candidate, opts.rank_tol)?;
    if d4_holds(ops, &trial, opts) {
        Ok(candidate)
    } else {
        Err(Error::P1TerminalNotFound)
    }
}

/// Solvability decision: the pointwise condition plus reachability of the
/// terminal constraint, tested both open-loop (Gramian range) and
/// closed-loop (gain equation residual).
pub fn check_solvability(
    spec: &ProblemSpec,
    ops: &DerivedOperators,
    p1: &P1Solution,
    opts: &SolverOptions,
) -> Result<SolvabilityVerdict, Error> {
    let d4_ok = d4_holds(ops, p1, opts);
    let p2 = riccati::transition_p2(ops, &spec.grid)?;
    let g1 = riccati::gramian_g1(ops, &p2, &spec.grid)?;
    let open = solve_open_loop(spec, ops, p1, &p2, &g1, opts)?;
    let closed = solve_closed_loop(spec, ops, p1, opts)?;
    Ok(SolvabilityVerdict {
        d4_ok,
        d4_residual: p1.d4_residual,
        open_loop_ok: open.feasible,
        open_loop_residual: open.range_residual,
        closed_loop_ok: closed.solvable,
        closed_loop_residual: closed.df7_residual,
        solvable: d4_ok && (open.feasible || closed.solvable),
    })
}

// -R†(t_k) B'(t_k) (P_k + P1_k), the shared part of both irregular controls.
fn base_gain_at(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    p1: &P1Solution,
    k: usize,
    rank_tol: f64,
) -> DMatrix<f64> {
    let b = spec.b.at_node(k);
    let r_pinv = matrixkit::pinv(spec.r.at_node(k), rank_tol);
    -(r_pinv * b.transpose() * (&p.p[k] + &p1.p1[k]))
}

fn terminal_branch_control(spec: &ProblemSpec, x_final: &DVector<f64>, rank_tol: f64) -> DVector<f64> {
    let last = spec.grid.steps;
    let b = spec.b.at_node(last);
    let r_pinv = matrixkit::pinv(spec.r.at_node(last), rank_tol);
    -(r_pinv * b.transpose() * &spec.h * x_final)
}

/// Open-loop synthesis: Gramian feasibility test, minimum-norm auxiliary
/// input
/// `u1(t) = C0(t) P2'(t0,t) G1† P1(t0) x̂0`,
/// and the full control along the deterministic mean path of the estimate
/// dynamics `dx̄ = (A0 + D0 P1) x̄ + B0 u1`.
pub fn solve_open_loop(
    spec: &ProblemSpec,
    ops: &DerivedOperators,
    p1: &P1Solution,
    p2: &TransitionSolution,
    g1: &Gramian,
    opts: &SolverOptions,
) -> Result<OpenLoopSolution, Error> {
    let grid = &spec.grid;
    let nodes = grid.num_nodes();
    let p = riccati::solve_p(spec, opts.rank_tol)?;

    let p1_t0 = &p1.p1[0];
    let g1_pinv = matrixkit::pinv(&g1.g1, opts.rank_tol);
    let projector = DMatrix::identity(spec.n, spec.n) - &g1.g1 * &g1_pinv;
    let range_residual = (&projector * p1_t0).norm();
    let feasible = range_residual <= opts.range_tol * (1.0 + p1_t0.norm());

    let target = &g1_pinv * p1_t0 * &spec.x0_mean; // G1† P1(t0) x̂0
    let u1_schedule: Vec<DVector<f64>> = (0..nodes)
        .map(|k| &ops.c0[k] * p2.p2[k].transpose() * &target)
        .collect();

    let mean_state = riccati::sweep_forward_vector(
        grid,
        spec.x0_mean.clone(),
        |t, x| {
            let a0 = riccati::interp_nodes(&ops.a0, grid, t);
            let d0 = riccati::interp_nodes(&ops.d0, grid, t);
            let b0 = riccati::interp_nodes(&ops.b0, grid, t);
            let p1_t = riccati::interp_nodes(&p1.p1, grid, t);
            let u1 = riccati::interp_vector_nodes(&u1_schedule, grid, t);
            (a0 + d0 * p1_t) * x + b0 * u1
        },
        "open-loop mean path",
    )?;

    let mut u_schedule = Vec::with_capacity(nodes);
    for k in 0..nodes {
        if k < grid.steps {
            let base = base_gain_at(spec, &p, p1, k, opts.rank_tol);
            u_schedule.push(&base * &mean_state[k] + &ops.g0[k] * &u1_schedule[k]);
        } else {
            u_schedule.push(terminal_branch_control(spec, &mean_state[k], opts.rank_tol));
        }
    }

    let cost = (spec.x0_mean.transpose() * (&p.p[0] + p1_t0) * &spec.x0_mean)[(0, 0)];
    Ok(OpenLoopSolution {
        feasible,
        range_residual,
        u1_schedule,
        u_schedule,
        mean_state,
        optimal_cost_deterministic: cost,
    })
}

// Align the congruence basis at one node to the previous node's: match
// columns within the significant/null blocks by overlap magnitude and fix
// signs, so finite differences of the family are meaningful.
fn align_columns(prev: &DMatrix<f64>, cur: &DMatrix<f64>, split: usize) -> DMatrix<f64> {
    let n = cur.nrows();
    let overlap = prev.transpose() * cur;
    let mut aligned = DMatrix::zeros(n, n);
    for (lo, hi) in [(0, split), (split, n)] {
        let mut used_cols = vec![false; n];
        let mut used_rows = vec![false; n];
        for _ in lo..hi {
            let mut best = (lo, lo, -1.0);
            for i in lo..hi {
                if used_rows[i] {
                    continue;
                }
                for j in lo..hi {
                    if used_cols[j] {
                        continue;
                    }
                    let w = overlap[(i, j)].abs();
                    if w > best.2 {
                        best = (i, j, w);
                    }
                }
            }
            let (i, j, _) = best;
            used_rows[i] = true;
            used_cols[j] = true;
            let sign = if overlap[(i, j)] < 0.0 { -1.0 } else { 1.0 };
            aligned.column_mut(i).copy_from(&(cur.column(j) * sign));
        }
    }
    aligned
}

/// Closed-loop synthesis. Per node `t ≤ T - eps`, diagonalize `P1` by an
/// orthogonal congruence, form the reduced blocks, and solve
///
/// ```text
/// B1 (K T1) = [I/(t-T)  0] - T̃1 - Â1
/// ```
///
/// for `K` by least squares, accepting on relative residual. Inside the
/// guard window the last solved gain is held; the terminal node carries the
/// deterministic branch of the control.
pub fn solve_closed_loop(
    spec: &ProblemSpec,
    ops: &DerivedOperators,
    p1: &P1Solution,
    opts: &SolverOptions,
) -> Result<ClosedLoopSolution, Error> {
    let grid = &spec.grid;
    let nodes = grid.num_nodes();
    let n = spec.n;
    let h = grid.h();
    let t_end = grid.t_end;
    let p = riccati::solve_p(spec, opts.rank_tol)?;
    let width = spec.m - ops.m0;

    // Aligned congruence family along the grid.
    let mut t1_family = Vec::with_capacity(nodes);
    let mut ranks = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let cd = matrixkit::congruence_diag(&p1.p1[k], opts.rank_tol);
        let t1 = if k == 0 {
            cd.t1
        } else {
            align_columns(&t1_family[k - 1], &cd.t1, cd.rank)
        };
        t1_family.push(t1);
        ranks.push(cd.rank);
    }

    let t1_dot = |k: usize| -> DMatrix<f64> {
        if k == 0 {
            (&t1_family[1] - &t1_family[0]) / h
        } else if k == nodes - 1 {
            (&t1_family[k] - &t1_family[k - 1]) / h
        } else {
            (&t1_family[k + 1] - &t1_family[k - 1]) / (2.0 * h)
        }
    };

    let guard_node = grid.steps.saturating_sub(opts.guard_steps);
    // The gain splits exactly into a pole part and a smooth part,
    // K = KM / (t - T) + KS; the split is what the mean-path integrator
    // interpolates, evaluating the pole analytically at stage times.
    let mut k_schedule: Vec<DMatrix<f64>> = Vec::with_capacity(nodes);
    let mut k_pole: Vec<DMatrix<f64>> = Vec::with_capacity(guard_node + 1);
    let mut k_smooth: Vec<DMatrix<f64>> = Vec::with_capacity(guard_node + 1);
    let mut worst = 0.0f64;
    for k in 0..nodes {
        if k > guard_node {
            k_schedule.push(k_schedule[guard_node].clone());
            continue;
        }
        let r = ranks[k];
        let t1 = &t1_family[k];
        let tdot = t1_dot(k);
        let t_tilde = tdot.transpose() * t1; // n x n, rows 0..r are the active block
        let a_hat = t1.transpose() * (&ops.a0[k] + &ops.d0[k] * &p1.p1[k]) * t1;
        let b1 = (t1.transpose() * &ops.b0[k]).rows(0, r).clone_owned(); // r x width
        let b1_pinv = matrixkit::pinv(&b1, opts.rank_tol);
        let pole = 1.0 / (grid.node(k) - t_end);
        let mut eye_block = DMatrix::zeros(r, n);
        for i in 0..r {
            eye_block[(i, i)] = 1.0;
        }
        let smooth_rhs = -(t_tilde.rows(0, r) + a_hat.rows(0, r));
        let rhs = &eye_block * pole + &smooth_rhs;

        let x = &b1_pinv * &rhs; // width x n
        let residual = (&b1 * &x - &rhs).norm() / (1.0 + rhs.norm());
        if residual > worst {
            worst = residual;
        }
        k_schedule.push(&x * t1.transpose());
        k_pole.push(&b1_pinv * eye_block * t1.transpose());
        k_smooth.push(&b1_pinv * smooth_rhs * t1.transpose());
        debug_assert_eq!(k_schedule[k].shape(), (width, n));
    }

    let solvable = worst <= opts.gain_tol;

    let base_gain: Vec<DMatrix<f64>> = (0..nodes)
        .map(|k| base_gain_at(spec, &p, p1, k, opts.rank_tol))
        .collect();
    let full_gain: Vec<DMatrix<f64>> = (0..nodes)
        .map(|k| &base_gain[k] + &ops.g0[k] * &k_schedule[k])
        .collect();

    // Prefix grid covering the nodes where the gain equation is solved;
    // interpolation of the smooth parts happens there, the frozen gain
    // covers the guard window.
    let guard_time = grid.node(guard_node);
    let prefix = crate::problem::TimeGrid {
        t0: grid.t0,
        t_end: guard_time,
        steps: guard_node.max(1),
    };
    let mean_state = riccati::sweep_forward_vector(
        grid,
        spec.x0_mean.clone(),
        |t, x| {
            let a = spec.a.eval(grid, t);
            let b = spec.b.eval(grid, t);
            let gain = if guard_node >= 1 && t < guard_time {
                let km = riccati::interp_nodes(&k_pole, &prefix, t);
                let ks = riccati::interp_nodes(&k_smooth, &prefix, t);
                let base = riccati::interp_nodes(&base_gain, grid, t);
                let g0 = riccati::interp_nodes(&ops.g0, grid, t);
                base + g0 * (km / (t - t_end) + ks)
            } else {
                full_gain[guard_node].clone()
            };
            (a + b * gain) * x
        },
        "closed-loop mean path",
    )?;
    let terminal_control = terminal_branch_control(spec, &mean_state[nodes - 1], opts.rank_tol);

    Ok(ClosedLoopSolution {
        solvable,
        df7_residual: worst,
        k_schedule,
        epsilon_guard: (grid.steps - guard_node) as f64 * h,
        guard_node,
        full_gain,
        terminal_control,
        mean_state,
    })
}

/// Classic branch: feedback `F = -R† B' P` for `u = F x̂`.
pub fn solve_regular(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    opts: &SolverOptions,
) -> Result<RegularSolution, Error> {
    let grid = &spec.grid;
    let f_gain: Vec<DMatrix<f64>> = (0..grid.num_nodes())
        .map(|k| {
            let b = spec.b.at_node(k);
            let r_pinv = matrixkit::pinv(spec.r.at_node(k), opts.rank_tol);
            -(r_pinv * b.transpose() * &p.p[k])
        })
        .collect();
    let mean_state = riccati::sweep_forward_vector(
        grid,
        spec.x0_mean.clone(),
        |t, x| {
            let a = spec.a.eval(grid, t);
            let b = spec.b.eval(grid, t);
            let f = riccati::interp_nodes(&f_gain, grid, t);
            (a + b * f) * x
        },
        "regular mean path",
    )?;
    let cost = (spec.x0_mean.transpose() * &p.p[0] * &spec.x0_mean)[(0, 0)];
    Ok(RegularSolution {
        f_gain,
        mean_state,
        optimal_cost_deterministic: cost,
    })
}

/// Optimal cost of the output-feedback problem: the filtered-problem
/// optimum `x̂0' (P(t0) + P1(t0)) x̂0` plus the control-independent
/// estimation-error term `∫ tr(Q P̂) dt`.
pub fn optimal_lqg_cost(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    p1: Option<&P1Solution>,
    phat: &FilterCovarianceSolution,
) -> f64 {
    let mut head = p.p[0].clone();
    if let Some(p1) = p1 {
        head += &p1.p1[0];
    }
    let mean_term = (spec.x0_mean.transpose() * head * &spec.x0_mean)[(0, 0)];
    let weights = riccati::quad_weights(&spec.grid);
    let error_term: f64 = (0..spec.grid.num_nodes())
        .map(|k| weights[k] * (spec.q.at_node(k) * &phat.p_hat[k]).trace())
        .sum();
    mean_term + error_term
}

/// Evaluate the optimality-system residuals along a trajectory using the
/// costate ansatz `p = (P + P1) x`. Derivatives are central differences, so
/// the two dynamics residuals are reported over interior nodes; the
/// stationarity relation is checked at every node and the terminal relation
/// at the last one.
pub fn fbde_residuals(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    p1: Option<&P1Solution>,
    traj: &MeanTrajectory,
) -> CostateCheck {
    let grid = &spec.grid;
    let nodes = grid.num_nodes();
    assert_eq!(traj.x.len(), nodes, "trajectory must cover the grid");
    assert_eq!(traj.u.len(), nodes, "control must cover the grid");
    let h = grid.h();

    let costate = |k: usize| -> DVector<f64> {
        let mut w = p.p[k].clone();
        if let Some(p1) = p1 {
            w += &p1.p1[k];
        }
        w * &traj.x[k]
    };

    let mut state_res = Vec::with_capacity(nodes);
    let mut costate_res = Vec::with_capacity(nodes);
    let mut stationarity_res = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let a = spec.a.at_node(k);
        let b = spec.b.at_node(k);
        let q = spec.q.at_node(k);
        let r = spec.r.at_node(k);
        let x = &traj.x[k];
        let u = &traj.u[k];
        let pk = costate(k);

        if k > 0 && k < nodes - 1 {
            let xdot = (&traj.x[k + 1] - &traj.x[k - 1]) / (2.0 * h);
            state_res.push((xdot - (a * x + b * u)).norm());
            let pdot = (costate(k + 1) - costate(k - 1)) / (2.0 * h);
            costate_res.push((pdot + a.transpose() * &pk + q * x).norm());
        }
        stationarity_res.push((r * u + b.transpose() * &pk).norm());
    }
    let terminal_residual = (costate(nodes - 1) - &spec.h * &traj.x[nodes - 1]).norm();

    let maxed = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let rms = |v: &[f64]| (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt();
    CostateCheck {
        state_dynamics_max: maxed(&state_res),
        state_dynamics_rms: rms(&state_res),
        costate_dynamics_max: maxed(&costate_res),
        costate_dynamics_rms: rms(&costate_res),
        stationarity_max: maxed(&stationarity_res),
        stationarity_rms: rms(&stationarity_res),
        terminal_residual,
    }
}

impl OpenLoopSolution {
    /// State/control pair along the deterministic mean path.
    pub fn mean_trajectory(&self) -> MeanTrajectory {
        MeanTrajectory {
            x: self.mean_state.clone(),
            u: self.u_schedule.clone(),
        }
    }
}

impl ClosedLoopSolution {
    /// State/control pair along the deterministic mean path; the final node
    /// carries the deterministic terminal branch.
    pub fn mean_trajectory(&self) -> MeanTrajectory {
        let n = self.mean_state.len();
        let mut u: Vec<DVector<f64>> = (0..n - 1)
            .map(|k| &self.full_gain[k] * &self.mean_state[k])
            .collect();
        u.push(self.terminal_control.clone());
        MeanTrajectory {
            x: self.mean_state.clone(),
            u,
        }
    }
}

impl RegularSolution {
    pub fn mean_trajectory(&self) -> MeanTrajectory {
        MeanTrajectory {
            x: self.mean_state.clone(),
            u: self
                .f_gain
                .iter()
                .zip(&self.mean_state)
                .map(|(f, x)| f * x)
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// One-call pipeline
// ---------------------------------------------------------------------------

/// Which irregular synthesis to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    Open,
    Closed,
    Auto,
}

/// Where the terminal value of the companion flow came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P1TerminalSource {
    Supplied,
    Heuristic,
}

/// Everything the irregular pipeline produced.
#[derive(Debug, Clone)]
pub struct IrregularSynthesis {
    pub ops: DerivedOperators,
    pub p1: P1Solution,
    pub p1_terminal_source: P1TerminalSource,
    pub p2: TransitionSolution,
    pub g1: Gramian,
    pub verdict: SolvabilityVerdict,
    pub open_loop: Option<OpenLoopSolution>,
    pub closed_loop: Option<ClosedLoopSolution>,
}

#[derive(Debug, Clone)]
pub enum SynthesisBranch {
    Regular(RegularSolution),
    Irregular(Box<IrregularSynthesis>),
}

/// Full synthesis result: classification, the Riccati solution, and the
/// branch-specific outputs.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub regularity: RegularityReport,
    pub p: RiccatiSolution,
    pub branch: SynthesisBranch,
}

/// Run the whole pipeline: classify, then synthesize the branch the
/// classification selects. The irregular branch always computes the
/// solvability verdict; `mode` narrows which controller(s) to assemble.
pub fn synthesize(
    spec: &ProblemSpec,
    mode: SynthesisMode,
    opts: &SolverOptions,
) -> Result<Synthesis, Error> {
    let p = riccati::solve_p(spec, opts.rank_tol)?;
    let regularity = classifier::classify(spec, &p, opts.rank_tol);
    if regularity.regular {
        let regular = solve_regular(spec, &p, opts)?;
        return Ok(Synthesis {
            regularity,
            p,
            branch: SynthesisBranch::Regular(regular),
        });
    }

    let ops = classifier::derive_operators(spec, &p, opts.rank_tol)?;
    let p1_terminal_source = if spec.p1_terminal.is_some() {
        P1TerminalSource::Supplied
    } else {
        P1TerminalSource::Heuristic
    };
    let p1t = resolve_p1_terminal(spec, &ops, opts)?;
    let p1 = riccati::solve_p1(spec, &ops, &p1t, opts.rank_tol)?;
    let p2 = riccati::transition_p2(&ops, &spec.grid)?;
    let g1 = riccati::gramian_g1(&ops, &p2, &spec.grid)?;

    let open_loop = if matches!(mode, SynthesisMode::Open | SynthesisMode::Auto) {
        Some(solve_open_loop(spec, &ops, &p1, &p2, &g1, opts)?)
    } else {
        None
    };
    let closed_loop = if matches!(mode, SynthesisMode::Closed | SynthesisMode::Auto) {
        Some(solve_closed_loop(spec, &ops, &p1, opts)?)
    } else {
        None
    };

    let d4_ok = d4_holds(&ops, &p1, opts);
    let open_residual = open_loop
        .as_ref()
        .map(|o| o.range_residual)
        .unwrap_or(f64::INFINITY);
    let open_ok = open_loop.as_ref().map(|o| o.feasible).unwrap_or(false);
    let closed_residual = closed_loop
        .as_ref()
        .map(|c| c.df7_residual)
        .unwrap_or(f64::INFINITY);
    let closed_ok = closed_loop.as_ref().map(|c| c.solvable).unwrap_or(false);
    let verdict = SolvabilityVerdict {
        d4_ok,
        d4_residual: p1.d4_residual,
        open_loop_ok: open_ok,
        open_loop_residual: open_residual,
        closed_loop_ok: closed_ok,
        closed_loop_residual: closed_residual,
        solvable: d4_ok && (open_ok || closed_ok),
    };

    Ok(Synthesis {
        regularity,
        p,
        branch: SynthesisBranch::Irregular(Box::new(IrregularSynthesis {
            ops,
            p1,
            p1_terminal_source,
            p2,
            g1,
            verdict,
            open_loop,
            closed_loop,
        })),
    })
}
