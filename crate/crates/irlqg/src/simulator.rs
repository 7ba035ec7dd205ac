//! Monte Carlo closed-loop simulation of plant, output, filter, and
//! controller, with estimators for both cost conventions.
//!
//! Each trial draws `x0 ~ Normal(x0_mean, sigma0)`, simulates the state and
//! the output by Euler-Maruyama on the problem grid, runs the Kalman update
//! against the precomputed gain schedule, and applies the configured
//! controller to the estimate. Two terminal-cost estimators are reported:
//!
//! * classic: mean over trials of `x(T)' H x(T)`;
//! * modified: `(mean x(T))' H (mean x(T))` plus the mean running cost.
//!
//! The modified estimator is the plug-in form; its small-sample bias
//! (`tr(H Cov(x(T))) / trials`) is folded into the reported standard error
//! rather than corrected.
//!
//! Trials use independent, deterministic RNG streams derived from
//! `(seed, trial index)` and are reduced in fixed chunks, so results are
//! bit-identical for a given configuration regardless of thread count or
//! execution order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::Error;
use crate::kalman::FilterCovarianceSolution;
use crate::matrixkit;
use crate::problem::ProblemSpec;
use crate::solver::{self, SolverOptions, SynthesisBranch, SynthesisMode};

const CHUNK: usize = 64;
const MAX_CHECKPOINTS: usize = 33;

/// Control law applied during simulation, all schedules precomposed on the
/// grid.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Fixed input sequence; the final entry is the terminal-branch value.
    OpenLoop { u: Vec<DVector<f64>> },
    /// Full feedback `u = gain x̂` with a deterministic terminal control.
    ClosedLoop {
        gain: Vec<DMatrix<f64>>,
        terminal: DVector<f64>,
    },
    /// Classic-branch feedback `u = gain x̂` at every node.
    Regular { gain: Vec<DMatrix<f64>> },
    /// Arbitrary user-supplied input sequence.
    Custom { u: Vec<DVector<f64>> },
}

impl Controller {
    pub fn open_loop(sol: &solver::OpenLoopSolution) -> Self {
        Controller::OpenLoop {
            u: sol.u_schedule.clone(),
        }
    }

    pub fn closed_loop(sol: &solver::ClosedLoopSolution) -> Self {
        Controller::ClosedLoop {
            gain: sol.full_gain.clone(),
            terminal: sol.terminal_control.clone(),
        }
    }

    pub fn regular(sol: &solver::RegularSolution) -> Self {
        Controller::Regular {
            gain: sol.f_gain.clone(),
        }
    }

    pub fn custom(u: Vec<DVector<f64>>) -> Self {
        Controller::Custom { u }
    }

    fn control(&self, k: usize, last: usize, xhat: &DVector<f64>) -> DVector<f64> {
        match self {
            Controller::OpenLoop { u } | Controller::Custom { u } => u[k].clone(),
            Controller::ClosedLoop { gain, terminal } => {
                if k == last {
                    terminal.clone()
                } else {
                    &gain[k] * xhat
                }
            }
            Controller::Regular { gain } => &gain[k] * xhat,
        }
    }

    fn input_width(&self, m: usize) -> usize {
        match self {
            Controller::OpenLoop { u } | Controller::Custom { u } => {
                u.first().map(|v| v.len()).unwrap_or(m)
            }
            Controller::ClosedLoop { gain, .. } => gain.first().map(|g| g.nrows()).unwrap_or(m),
            Controller::Regular { gain } => gain.first().map(|g| g.nrows()).unwrap_or(m),
        }
    }
}

/// Monte Carlo run configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub trials: usize,
    pub seed: u64,
    pub controller: Controller,
    /// Keep every trial's state and estimate paths (memory heavy; meant for
    /// small runs).
    pub record_paths: bool,
}

/// Ensemble statistics of the estimation error at one grid node.
#[derive(Debug, Clone)]
pub struct CheckpointStat {
    pub node: usize,
    pub mean_xtilde: DVector<f64>,
    pub cov_xtilde: DMatrix<f64>,
    /// Mean and standard error of `x̂' x̃` across trials.
    pub inner_mean: f64,
    pub inner_se: f64,
}

/// Ensemble-mean trajectories.
#[derive(Debug, Clone)]
pub struct MeanPath {
    pub x: Vec<DVector<f64>>,
    pub xhat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

/// One trial's recorded paths (only with `record_paths`).
#[derive(Debug, Clone)]
pub struct TrialPath {
    pub x: Vec<DVector<f64>>,
    pub xhat: Vec<DVector<f64>>,
}

/// Monte Carlo output. Standard errors are sample-based; with fewer than
/// two trials they are reported as infinite.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub trials: usize,
    pub mean_terminal_state: DVector<f64>,
    pub se_terminal_state: DVector<f64>,
    pub terminal_state_cov: DMatrix<f64>,
    pub mean_terminal_estimate: DVector<f64>,
    pub se_terminal_estimate: DVector<f64>,
    pub terminal_estimate_cov: DMatrix<f64>,
    /// Estimator of `E[x(T)' H x(T)]`.
    pub classic_terminal_cost: f64,
    pub classic_terminal_cost_se: f64,
    pub mean_running_cost: f64,
    pub running_cost_se: f64,
    /// `(mean x(T))' H (mean x(T))` plus the mean running cost.
    pub modified_cost: f64,
    pub modified_cost_se: f64,
    /// `‖P1(T) mean(x̂(T))‖` when the companion terminal matrix was given.
    pub terminal_constraint_residual: Option<f64>,
    pub checkpoints: Vec<CheckpointStat>,
    /// Mean and standard error of the per-trial lag-1 autocorrelation of
    /// innovation increments.
    pub innovation_lag1_mean: f64,
    pub innovation_lag1_se: f64,
    pub mean_path: MeanPath,
    pub paths: Option<Vec<TrialPath>>,
}

// Scalar accumulator: sum and sum of squares.
#[derive(Clone, Default)]
struct Moments {
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
    }
    fn merge(&mut self, other: &Moments) {
        self.sum += other.sum;
        self.sumsq += other.sumsq;
    }
    fn mean(&self, n: usize) -> f64 {
        self.sum / n as f64
    }
    fn se(&self, n: usize) -> f64 {
        if n < 2 {
            return f64::INFINITY;
        }
        let mean = self.mean(n);
        let var = ((self.sumsq - self.sum * mean) / (n as f64 - 1.0)).max(0.0);
        (var / n as f64).sqrt()
    }
}

// Vector accumulator: sum and outer-product sum.
#[derive(Clone)]
struct VectorMoments {
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl VectorMoments {
    fn zeros(dim: usize) -> Self {
        VectorMoments {
            sum: DVector::zeros(dim),
            outer: DMatrix::zeros(dim, dim),
        }
    }
    fn push(&mut self, v: &DVector<f64>) {
        self.sum += v;
        self.outer += v * v.transpose();
    }
    fn merge(&mut self, other: &VectorMoments) {
        self.sum += &other.sum;
        self.outer += &other.outer;
    }
    fn mean(&self, n: usize) -> DVector<f64> {
        &self.sum / n as f64
    }
    fn cov(&self, n: usize) -> DMatrix<f64> {
        if n < 2 {
            return DMatrix::from_element(self.sum.len(), self.sum.len(), f64::INFINITY);
        }
        let mean = self.mean(n);
        let raw = (&self.outer - &self.sum * mean.transpose()) / (n as f64 - 1.0);
        matrixkit::symmetrize(&raw)
    }
    fn se(&self, n: usize) -> DVector<f64> {
        self.cov(n).diagonal().map(|v| (v.max(0.0) / n as f64).sqrt())
    }
}

struct ChunkAccum {
    count: usize,
    terminal_state: VectorMoments,
    terminal_estimate: VectorMoments,
    running: Moments,
    classic: Moments,
    lag1: Moments,
    checkpoint_xtilde: Vec<VectorMoments>,
    checkpoint_inner: Vec<Moments>,
    path_sum_x: Vec<DVector<f64>>,
    path_sum_xhat: Vec<DVector<f64>>,
    path_sum_u: Vec<DVector<f64>>,
    paths: Vec<TrialPath>,
}

impl ChunkAccum {
    fn zeros(n: usize, u_width: usize, nodes: usize, checkpoints: usize) -> Self {
        ChunkAccum {
            count: 0,
            terminal_state: VectorMoments::zeros(n),
            terminal_estimate: VectorMoments::zeros(n),
            running: Moments::default(),
            classic: Moments::default(),
            lag1: Moments::default(),
            checkpoint_xtilde: vec![VectorMoments::zeros(n); checkpoints],
            checkpoint_inner: vec![Moments::default(); checkpoints],
            path_sum_x: vec![DVector::zeros(n); nodes],
            path_sum_xhat: vec![DVector::zeros(n); nodes],
            path_sum_u: vec![DVector::zeros(u_width); nodes],
            paths: Vec::new(),
        }
    }

    fn merge(&mut self, other: ChunkAccum) {
        self.count += other.count;
        self.terminal_state.merge(&other.terminal_state);
        self.terminal_estimate.merge(&other.terminal_estimate);
        self.running.merge(&other.running);
        self.classic.merge(&other.classic);
        self.lag1.merge(&other.lag1);
        for (a, b) in self
            .checkpoint_xtilde
            .iter_mut()
            .zip(&other.checkpoint_xtilde)
        {
            a.merge(b);
        }
        for (a, b) in self.checkpoint_inner.iter_mut().zip(&other.checkpoint_inner) {
            a.merge(b);
        }
        for (a, b) in self.path_sum_x.iter_mut().zip(&other.path_sum_x) {
            *a += b;
        }
        for (a, b) in self.path_sum_xhat.iter_mut().zip(&other.path_sum_xhat) {
            *a += b;
        }
        for (a, b) in self.path_sum_u.iter_mut().zip(&other.path_sum_u) {
            *a += b;
        }
        self.paths.extend(other.paths);
    }
}

fn checkpoint_nodes(steps: usize) -> Vec<usize> {
    let count = MAX_CHECKPOINTS.min(steps + 1);
    let mut nodes: Vec<usize> = (0..count)
        .map(|j| (j as f64 * steps as f64 / (count - 1).max(1) as f64).round() as usize)
        .collect();
    nodes.dedup();
    nodes
}

fn draw_standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Run the Monte Carlo ensemble.
///
/// `p1_terminal` is the terminal matrix of the companion flow when the
/// irregular branch produced one; it only feeds the terminal-constraint
/// residual report.
pub fn run_monte_carlo(
    spec: &ProblemSpec,
    phat: &FilterCovarianceSolution,
    p1_terminal: Option<&DMatrix<f64>>,
    cfg: &SimConfig,
) -> Result<SimResult, Error> {
    if cfg.trials == 0 {
        return Err(Error::Validation("simulation needs at least one trial".into()));
    }
    let grid = &spec.grid;
    let steps = grid.steps;
    let nodes = grid.num_nodes();
    let (n, s) = (spec.n, spec.s);
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let sigma0_sqrt = matrixkit::psd_sqrt(&spec.sigma0);
    let ckpt_nodes = checkpoint_nodes(steps);
    let u_width = cfg.controller.input_width(spec.m);

    let run_chunk = |chunk_idx: usize| -> Result<ChunkAccum, Error> {
        let lo = chunk_idx * CHUNK;
        let hi = ((chunk_idx + 1) * CHUNK).min(cfg.trials);
        let mut acc = ChunkAccum::zeros(n, u_width, nodes, ckpt_nodes.len());
        for trial in lo..hi {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64 + 1);

            let z0 = draw_standard_normal(&mut rng, n);
            let mut x = &spec.x0_mean + &sigma0_sqrt * z0;
            let mut xhat = spec.x0_mean.clone();
            let mut running = 0.0;
            let mut prev_innovation: Option<DVector<f64>> = None;
            let mut lag1_num = 0.0;
            let mut lag1_den = 0.0;
            let mut ckpt_cursor = 0;
            let mut trial_path = if cfg.record_paths {
                Some(TrialPath {
                    x: Vec::with_capacity(nodes),
                    xhat: Vec::with_capacity(nodes),
                })
            } else {
                None
            };

            for k in 0..=steps {
                if ckpt_cursor < ckpt_nodes.len() && ckpt_nodes[ckpt_cursor] == k {
                    let xtilde = &x - &xhat;
                    acc.checkpoint_xtilde[ckpt_cursor].push(&xtilde);
                    acc.checkpoint_inner[ckpt_cursor].push(xhat.dot(&xtilde));
                    ckpt_cursor += 1;
                }
                if let Some(path) = trial_path.as_mut() {
                    path.x.push(x.clone());
                    path.xhat.push(xhat.clone());
                }

                let u = cfg.controller.control(k, steps, &xhat);
                let q = spec.q.at_node(k);
                let r = spec.r.at_node(k);
                let weight = if k == 0 || k == steps { 0.5 * h } else { h };
                running += weight * ((q * &x).dot(&x) + (r * &u).dot(&u));
                acc.path_sum_x[k] += &x;
                acc.path_sum_xhat[k] += &xhat;
                acc.path_sum_u[k] += &u;

                if k == steps {
                    break;
                }

                let a = spec.a.at_node(k);
                let b = spec.b.at_node(k);
                let c = spec.c.at_node(k);
                let d = spec.d.at_node(k);
                let g = spec.g.at_node(k);
                let dw = draw_standard_normal(&mut rng, n) * sqrt_h;
                let dv = draw_standard_normal(&mut rng, s) * sqrt_h;
                let dy = c * &x * h + g * dv;
                let innovation = &dy - c * &xhat * h;

                x += (a * &x + b * &u) * h + d * dw;
                xhat += (a * &xhat + b * &u) * h + &phat.l_gain[k] * &innovation;

                if let Some(prev) = &prev_innovation {
                    lag1_num += prev.dot(&innovation);
                }
                lag1_den += innovation.dot(&innovation);
                prev_innovation = Some(innovation);

                let norm_sq = x.norm_squared() + xhat.norm_squared();
                if !norm_sq.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite state in trial {trial} after node {k}"
                    )));
                }
            }

            acc.terminal_state.push(&x);
            acc.terminal_estimate.push(&xhat);
            acc.running.push(running);
            acc.classic.push((&spec.h * &x).dot(&x));
            acc.lag1
                .push(if lag1_den > 0.0 { lag1_num / lag1_den } else { 0.0 });
            if let Some(path) = trial_path {
                acc.paths.push(path);
            }
            acc.count += 1;
        }
        Ok(acc)
    };

    let num_chunks = cfg.trials.div_ceil(CHUNK);
    let chunks: Vec<ChunkAccum> = (0..num_chunks)
        .into_par_iter()
        .map(run_chunk)
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = ChunkAccum::zeros(n, u_width, nodes, ckpt_nodes.len());
    for chunk in chunks {
        total.merge(chunk);
    }

    let trials = total.count;
    let tf = trials as f64;
    let mean_terminal_state = total.terminal_state.mean(trials);
    let terminal_state_cov = total.terminal_state.cov(trials);
    let mean_terminal_estimate = total.terminal_estimate.mean(trials);
    let terminal_estimate_cov = total.terminal_estimate.cov(trials);

    let mean_running = total.running.mean(trials);
    let modified_cost = (&spec.h * &mean_terminal_state).dot(&mean_terminal_state) + mean_running;
    // Delta-method variance of the plug-in quadratic form plus its
    // second-order (chi-square) term, plus the running-cost term.
    let modified_cost_se = if trials < 2 {
        f64::INFINITY
    } else {
        let h_mean = &spec.h * &mean_terminal_state;
        let first = 4.0 * (h_mean.transpose() * &terminal_state_cov * &h_mean)[(0, 0)] / tf;
        let h_cov = &spec.h * &terminal_state_cov;
        let second = 2.0 * (&h_cov * &h_cov).trace() / (tf * tf);
        let running_var = total.running.se(trials).powi(2);
        (first.max(0.0) + second.max(0.0) + running_var).sqrt()
    };

    let checkpoints: Vec<CheckpointStat> = ckpt_nodes
        .iter()
        .enumerate()
        .map(|(j, &node)| CheckpointStat {
            node,
            mean_xtilde: total.checkpoint_xtilde[j].mean(trials),
            cov_xtilde: total.checkpoint_xtilde[j].cov(trials),
            inner_mean: total.checkpoint_inner[j].mean(trials),
            inner_se: total.checkpoint_inner[j].se(trials),
        })
        .collect();

    let mean_path = MeanPath {
        x: total.path_sum_x.iter().map(|v| v / tf).collect(),
        xhat: total.path_sum_xhat.iter().map(|v| v / tf).collect(),
        u: total.path_sum_u.iter().map(|v| v / tf).collect(),
    };

    Ok(SimResult {
        trials,
        se_terminal_state: total.terminal_state.se(trials),
        se_terminal_estimate: total.terminal_estimate.se(trials),
        terminal_constraint_residual: p1_terminal
            .map(|p1t| (p1t * &mean_terminal_estimate).norm()),
        mean_terminal_state,
        terminal_state_cov,
        mean_terminal_estimate,
        terminal_estimate_cov,
        classic_terminal_cost: total.classic.mean(trials),
        classic_terminal_cost_se: total.classic.se(trials),
        mean_running_cost: mean_running,
        running_cost_se: total.running.se(trials),
        modified_cost,
        modified_cost_se,
        checkpoints,
        innovation_lag1_mean: total.lag1.mean(trials),
        innovation_lag1_se: total.lag1.se(trials),
        mean_path,
        paths: if cfg.record_paths {
            Some(total.paths)
        } else {
            None
        },
    })
}

/// Side-by-side comparison of the two cost conventions on the scalar
/// demonstration problem, both under the control that is optimal for the
/// mean-penalizing cost.
#[derive(Debug, Clone)]
pub struct DemoIntroReport {
    pub horizon: f64,
    pub trials: usize,
    pub seed: u64,
    pub classic_cost: f64,
    pub classic_se: f64,
    pub modified_cost: f64,
    pub modified_se: f64,
    pub mean_terminal_state: f64,
    pub mean_terminal_se: f64,
}

impl std::fmt::Display for DemoIntroReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "scalar demo: horizon T = {}, trials = {}, seed = {}",
            self.horizon, self.trials, self.seed
        )?;
        writeln!(f, "control: u(t) = -x0/T (optimal for the mean-penalizing cost)")?;
        writeln!(f)?;
        writeln!(f, "{:<38} {:>14} {:>12}", "cost convention", "estimate", "std err")?;
        writeln!(
            f,
            "{:<38} {:>14.6} {:>12.2e}",
            "classic   E[x(T)' H x(T)]", self.classic_cost, self.classic_se
        )?;
        writeln!(
            f,
            "{:<38} {:>14.6} {:>12.2e}",
            "modified  (E x(T))' H (E x(T))", self.modified_cost, self.modified_se
        )?;
        writeln!(f)?;
        writeln!(
            f,
            "mean terminal state: {:.6} (se {:.2e}); the classic cost stays near T = {} while the modified cost vanishes",
            self.mean_terminal_state, self.mean_terminal_se, self.horizon
        )
    }
}

/// Run the scalar demonstration: synthesize the open-loop optimum for the
/// mean-penalizing cost and report both cost estimators under it.
pub fn demo_intro(t_end: f64, trials: usize, seed: u64) -> Result<DemoIntroReport, Error> {
    let steps = ((t_end / 1e-3).round() as usize).max(100);
    let spec = ProblemSpec::intro_scalar(t_end, steps);
    let opts = SolverOptions::default();
    let synth = solver::synthesize(&spec, SynthesisMode::Open, &opts)?;
    let SynthesisBranch::Irregular(ir) = &synth.branch else {
        return Err(Error::Numeric(
            "demo problem unexpectedly classified regular".into(),
        ));
    };
    let open = ir.open_loop.as_ref().expect("open mode");
    let phat = crate::riccati::solve_filter_covariance(&spec)?;
    let cfg = SimConfig {
        trials,
        seed,
        controller: Controller::open_loop(open),
        record_paths: false,
    };
    let sim = run_monte_carlo(&spec, &phat, Some(&ir.p1.terminal_value), &cfg)?;
    Ok(DemoIntroReport {
        horizon: t_end,
        trials,
        seed,
        classic_cost: sim.classic_terminal_cost,
        classic_se: sim.classic_terminal_cost_se,
        modified_cost: sim.modified_cost,
        modified_se: sim.modified_cost_se,
        mean_terminal_state: sim.mean_terminal_state[0],
        mean_terminal_se: sim.se_terminal_state[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::MatrixSchedule;
    use crate::riccati;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn intro_open_loop(
        t_end: f64,
        steps: usize,
    ) -> (ProblemSpec, FilterCovarianceSolution, solver::OpenLoopSolution, DMatrix<f64>) {
        let spec = ProblemSpec::intro_scalar(t_end, steps);
        let synth =
            solver::synthesize(&spec, SynthesisMode::Open, &SolverOptions::default()).unwrap();
        let SynthesisBranch::Irregular(ir) = synth.branch else {
            panic!("intro must be irregular")
        };
        let phat = riccati::solve_filter_covariance(&spec).unwrap();
        let open = ir.open_loop.clone().unwrap();
        (spec, phat, open, ir.p1.terminal_value.clone())
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let (spec, phat, open, p1t) = intro_open_loop(1.0, 100);
        let cfg = SimConfig {
            trials: 64,
            seed: 7,
            controller: Controller::open_loop(&open),
            record_paths: false,
        };
        let a = run_monte_carlo(&spec, &phat, Some(&p1t), &cfg).unwrap();
        let b = run_monte_carlo(&spec, &phat, Some(&p1t), &cfg).unwrap();
        assert_eq!(a.classic_terminal_cost.to_bits(), b.classic_terminal_cost.to_bits());
        assert_eq!(a.modified_cost.to_bits(), b.modified_cost.to_bits());
        assert_eq!(
            a.mean_terminal_state[0].to_bits(),
            b.mean_terminal_state[0].to_bits()
        );
    }

    #[test]
    fn invariant_to_thread_count() {
        let (spec, phat, open, p1t) = intro_open_loop(1.0, 80);
        let cfg = SimConfig {
            trials: 130, // spans three chunks
            seed: 3,
            controller: Controller::open_loop(&open),
            record_paths: false,
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&spec, &phat, Some(&p1t), &cfg).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&spec, &phat, Some(&p1t), &cfg).unwrap());
        assert_eq!(
            single.classic_terminal_cost.to_bits(),
            many.classic_terminal_cost.to_bits()
        );
        assert_eq!(
            single.mean_path.x[40][0].to_bits(),
            many.mean_path.x[40][0].to_bits()
        );
    }

    #[test]
    fn deterministic_plant_hits_zero_with_open_loop_pull() {
        // D = 0, sigma0 = 0: the plant is the ODE; u = -x0/T lands on zero
        let (mut spec, _, open, _) = intro_open_loop(1.0, 400);
        spec.d = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let phat = riccati::solve_filter_covariance(&spec).unwrap();
        let cfg = SimConfig {
            trials: 3,
            seed: 1,
            controller: Controller::open_loop(&open),
            record_paths: false,
        };
        let sim = run_monte_carlo(&spec, &phat, None, &cfg).unwrap();
        let h = spec.grid.h();
        assert!(
            sim.mean_terminal_state[0].abs() <= 5.0 * h,
            "terminal state {} not within O(h)",
            sim.mean_terminal_state[0]
        );
    }

    #[test]
    fn euler_matches_mean_path_at_first_order() {
        // regular problem with curvature in the mean path
        let mut spec = ProblemSpec::intro_scalar(1.0, 200);
        spec.a = MatrixSchedule::constant(DMatrix::from_element(1, 1, 1.0));
        spec.r = MatrixSchedule::constant(DMatrix::from_element(1, 1, 1.0));
        spec.d = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let errs: Vec<f64> = [200usize, 400]
            .iter()
            .map(|&steps| {
                let mut s = spec.clone();
                s.grid.steps = steps;
                let synth =
                    solver::synthesize(&s, SynthesisMode::Auto, &SolverOptions::default()).unwrap();
                let SynthesisBranch::Regular(reg) = synth.branch else {
                    panic!("regular expected")
                };
                let phat = riccati::solve_filter_covariance(&s).unwrap();
                let cfg = SimConfig {
                    trials: 1,
                    seed: 5,
                    controller: Controller::regular(&reg),
                    record_paths: false,
                };
                let sim = run_monte_carlo(&s, &phat, None, &cfg).unwrap();
                (sim.mean_terminal_state[0] - reg.mean_state[steps][0]).abs()
            })
            .collect();
        let ratio = errs[0] / errs[1].max(1e-300);
        assert!(
            (1.4..3.0).contains(&ratio),
            "expected ~2x first-order drop, got {ratio} ({errs:?})"
        );
    }

    #[test]
    fn modified_estimator_consistent_on_deterministic_problem() {
        // D = 0, sigma0 = 0, G nonzero: filter noise never enters the state,
        // so the modified estimate equals the deterministic cost
        let (mut spec, _, open, _) = intro_open_loop(1.0, 300);
        spec.d = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let phat = riccati::solve_filter_covariance(&spec).unwrap();
        let cfg = SimConfig {
            trials: 8,
            seed: 11,
            controller: Controller::open_loop(&open),
            record_paths: false,
        };
        let sim = run_monte_carlo(&spec, &phat, None, &cfg).unwrap();
        assert_abs_diff_eq!(sim.modified_cost, 0.0, epsilon = 1e-4);
        assert_abs_diff_eq!(sim.classic_terminal_cost, 0.0, epsilon = 1e-4);
    }

    #[test]
    fn single_trial_reports_infinite_se() {
        let (spec, phat, open, _) = intro_open_loop(1.0, 100);
        let cfg = SimConfig {
            trials: 1,
            seed: 9,
            controller: Controller::open_loop(&open),
            record_paths: false,
        };
        let sim = run_monte_carlo(&spec, &phat, None, &cfg).unwrap();
        assert!(sim.classic_terminal_cost_se.is_infinite());
        assert!(sim.modified_cost_se.is_infinite());
    }

    #[test]
    fn custom_zero_control_leaves_brownian_variance() {
        let (spec, phat, _, _) = intro_open_loop(1.0, 250);
        let zero = vec![dvector![0.0]; spec.grid.num_nodes()];
        let cfg = SimConfig {
            trials: 4000,
            seed: 21,
            controller: Controller::custom(zero),
            record_paths: false,
        };
        let sim = run_monte_carlo(&spec, &phat, None, &cfg).unwrap();
        // x(T) = x0 + w(T): classic cost ≈ x0² + T = 2
        let expect = 2.0;
        assert!(
            (sim.classic_terminal_cost - expect).abs() <= 3.0 * sim.classic_terminal_cost_se,
            "classic {} ± {} vs {}",
            sim.classic_terminal_cost,
            sim.classic_terminal_cost_se,
            expect
        );
    }

    #[test]
    fn record_paths_keeps_every_trial() {
        let (spec, phat, open, _) = intro_open_loop(1.0, 50);
        let cfg = SimConfig {
            trials: 5,
            seed: 2,
            controller: Controller::open_loop(&open),
            record_paths: true,
        };
        let sim = run_monte_carlo(&spec, &phat, None, &cfg).unwrap();
        let paths = sim.paths.unwrap();
        assert_eq!(paths.len(), 5);
        assert_eq!(paths[0].x.len(), spec.grid.num_nodes());
    }

    #[test]
    fn demo_intro_matches_both_conventions() {
        let report = demo_intro(1.0, 2000, 42).unwrap();
        assert!(
            (report.classic_cost - 1.0).abs() <= 3.0 * report.classic_se,
            "classic {} ± {}",
            report.classic_cost,
            report.classic_se
        );
        assert!(report.modified_cost <= 0.02f64.max(3.0 * report.modified_se));
        // the table renders
        let table = report.to_string();
        assert!(table.contains("classic"));
        assert!(table.contains("modified"));
    }
}
