//! Problem data model, validation, and file ingestion.
//!
//! A [`ProblemSpec`] carries the full continuous-time instance
//!
//! ```text
//! dx = (A x + B u) dt + D dw          state,  n
//! dy = C x dt + G dv                  output, s
//! J  = E ∫ (x'Qx + u'Ru) dt + (E x(T))' H (E x(T))
//! ```
//!
//! on a uniform grid over `[t0, T]`. Time-varying coefficients are grid
//! samples with linear interpolation; constant matrices are stored once.
//! The initial state enters through its mean `x0_mean` and covariance
//! `sigma0`; simulation draws `x0 ~ Normal(x0_mean, sigma0)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::matrixkit;

/// Uniform time grid: `steps` intervals, `steps + 1` nodes `t_k = t0 + k h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self, Error> {
        if !(t_end > t0) {
            return Err(Error::Validation(format!(
                "horizon must satisfy T > t0, got t0 = {t0}, T = {t_end}"
            )));
        }
        if steps < 2 {
            return Err(Error::Validation(format!(
                "grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    /// Step size `h = (T - t0) / steps`.
    pub fn h(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    /// Node time `t_k`.
    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h()
    }

    /// Number of grid nodes, `steps + 1`.
    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Iterator over node times.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_nodes()).map(|k| self.node(k))
    }
}

/// A matrix-valued coefficient: constant, or one sample per grid node with
/// linear interpolation in between.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSchedule {
    Constant(DMatrix<f64>),
    Sampled(Vec<DMatrix<f64>>),
}

impl MatrixSchedule {
    pub fn constant(m: DMatrix<f64>) -> Self {
        MatrixSchedule::Constant(m)
    }

    pub fn sampled(samples: Vec<DMatrix<f64>>) -> Result<Self, Error> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("sampled schedule has no samples".into()))?;
        let dims = first.shape();
        if samples.iter().any(|m| m.shape() != dims) {
            return Err(Error::Dimension(
                "schedule samples have inconsistent dimensions".into(),
            ));
        }
        Ok(MatrixSchedule::Sampled(samples))
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            MatrixSchedule::Constant(m) => m.shape(),
            MatrixSchedule::Sampled(v) => v[0].shape(),
        }
    }

    /// Sample at grid node `k` (no interpolation, no copy).
    pub fn at_node(&self, k: usize) -> &DMatrix<f64> {
        match self {
            MatrixSchedule::Constant(m) => m,
            MatrixSchedule::Sampled(v) => &v[k.min(v.len() - 1)],
        }
    }

    /// Value at an arbitrary time, linearly interpolated between nodes.
    /// Exactly reproduces the stored sample at (floating-point images of)
    /// grid nodes.
    pub fn eval(&self, grid: &TimeGrid, t: f64) -> DMatrix<f64> {
        match self {
            MatrixSchedule::Constant(m) => m.clone(),
            MatrixSchedule::Sampled(v) => {
                let pos = (t - grid.t0) / grid.h();
                let nearest = pos.round();
                if (pos - nearest).abs() < 1e-9 {
                    let k = (nearest.max(0.0) as usize).min(v.len() - 1);
                    return v[k].clone();
                }
                let k = (pos.floor().max(0.0) as usize).min(v.len() - 2);
                let alpha = (pos - k as f64).clamp(0.0, 1.0);
                &v[k] * (1.0 - alpha) + &v[k + 1] * alpha
            }
        }
    }

    fn num_samples(&self) -> Option<usize> {
        match self {
            MatrixSchedule::Constant(_) => None,
            MatrixSchedule::Sampled(v) => Some(v.len()),
        }
    }
}

/// Full problem instance. Immutable after construction; fields are public
/// for direct assembly in code, [`validate`] checks consistency.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub s: usize,
    pub a: MatrixSchedule,
    pub b: MatrixSchedule,
    pub d: MatrixSchedule,
    pub c: MatrixSchedule,
    pub g: MatrixSchedule,
    pub q: MatrixSchedule,
    pub r: MatrixSchedule,
    /// Terminal weight on the mean of the state, `n x n` PSD.
    pub h: DMatrix<f64>,
    pub grid: TimeGrid,
    /// Mean of the initial state.
    pub x0_mean: DVector<f64>,
    /// Covariance of the initial estimation error.
    pub sigma0: DMatrix<f64>,
    /// Optional user-supplied terminal value for the companion Riccati flow.
    pub p1_terminal: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub severity: Severity,
    pub message: String,
}

/// Outcome of [`validate`]: empty when the problem is well-posed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations
            .iter()
            .all(|v| v.severity != Severity::Error)
    }

    fn error(&mut self, message: String) {
        self.violations.push(Violation {
            severity: Severity::Error,
            message,
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(
                f,
                "{}: {}",
                match v.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                },
                v.message
            )?;
        }
        Ok(())
    }
}

// PSD within a loose absolute/relative floor; used for weight checks only.
fn psd_violation(m: &DMatrix<f64>) -> Option<f64> {
    let min = matrixkit::min_symmetric_eigenvalue(m);
    let asym = (m - m.transpose()).norm();
    let scale = 1.0 + m.norm();
    if asym > 1e-8 * scale {
        return Some(-asym);
    }
    if min < -1e-8 * scale {
        return Some(min);
    }
    None
}

/// Check dimensions, PSD weights, invertibility of `GG'`, and finiteness.
/// Returns a report rather than failing fast, so callers can surface every
/// problem at once.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, m, s) = (spec.n, spec.m, spec.s);

    let expect = [
        ("A", &spec.a, (n, n)),
        ("B", &spec.b, (n, m)),
        ("D", &spec.d, (n, n)),
        ("C", &spec.c, (s, n)),
        ("G", &spec.g, (s, s)),
        ("Q", &spec.q, (n, n)),
        ("R", &spec.r, (m, m)),
    ];
    for (name, sched, dims) in expect {
        if sched.dims() != dims {
            report.error(format!(
                "{name} has dimensions {:?}, expected {:?}",
                sched.dims(),
                dims
            ));
        }
        if let Some(len) = sched.num_samples() {
            if len != spec.grid.num_nodes() {
                report.error(format!(
                    "{name} has {len} samples but the grid has {} nodes",
                    spec.grid.num_nodes()
                ));
            }
        }
    }
    if spec.h.shape() != (n, n) {
        report.error(format!(
            "H has dimensions {:?}, expected ({n}, {n})",
            spec.h.shape()
        ));
    }
    if spec.x0_mean.len() != n {
        report.error(format!(
            "x0_mean has length {}, expected {n}",
            spec.x0_mean.len()
        ));
    }
    if spec.sigma0.shape() != (n, n) {
        report.error(format!(
            "sigma0 has dimensions {:?}, expected ({n}, {n})",
            spec.sigma0.shape()
        ));
    }
    if let Some(p1) = &spec.p1_terminal {
        if p1.shape() != (n, n) {
            report.error(format!(
                "p1_terminal has dimensions {:?}, expected ({n}, {n})",
                p1.shape()
            ));
        }
    }
    if !report.is_ok() {
        return report; // dimension errors make the node checks meaningless
    }

    if spec.grid.t_end <= spec.grid.t0 {
        report.error("horizon must satisfy T > t0".into());
    }
    if spec.grid.steps < 2 {
        report.error("grid needs at least 2 steps".into());
    }

    let finite_check = [
        ("A", &spec.a),
        ("B", &spec.b),
        ("D", &spec.d),
        ("C", &spec.c),
        ("G", &spec.g),
        ("Q", &spec.q),
        ("R", &spec.r),
    ];
    for (name, sched) in finite_check {
        for k in 0..spec.grid.num_nodes() {
            if !matrixkit::all_finite(sched.at_node(k)) {
                report.error(format!("{name} has non-finite entries at node {k}"));
                break;
            }
        }
    }
    if !matrixkit::all_finite(&spec.h) {
        report.error("H has non-finite entries".into());
    }
    if spec.x0_mean.iter().any(|v| !v.is_finite()) || !matrixkit::all_finite(&spec.sigma0) {
        report.error("initial law has non-finite entries".into());
    }

    if let Some(bad) = psd_violation(&spec.h) {
        report.error(format!("H not PSD (witness eigenvalue {bad:.3e})"));
    }
    if let Some(bad) = psd_violation(&spec.sigma0) {
        report.error(format!("sigma0 not PSD (witness eigenvalue {bad:.3e})"));
    }
    for k in 0..spec.grid.num_nodes() {
        if let Some(bad) = psd_violation(spec.q.at_node(k)) {
            report.error(format!("Q not PSD at node {k} (witness {bad:.3e})"));
            break;
        }
    }
    for k in 0..spec.grid.num_nodes() {
        if let Some(bad) = psd_violation(spec.r.at_node(k)) {
            report.error(format!("R not PSD at node {k} (witness {bad:.3e})"));
            break;
        }
    }
    for k in 0..spec.grid.num_nodes() {
        let g = spec.g.at_node(k);
        let gg = g * g.transpose();
        let min = matrixkit::min_symmetric_eigenvalue(&gg);
        if min <= 1e-12 * (1.0 + gg.norm()) {
            report.error(format!(
                "GG' singular at node {k} (min eigenvalue {min:.3e})"
            ));
            break;
        }
    }
    report
}

impl ProblemSpec {
    /// Run [`validate`] and convert any error-severity violation into `Err`.
    pub fn validated(self) -> Result<Self, Error> {
        let report = validate(&self);
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::Validation(report.to_string()))
        }
    }

    /// The scalar demonstration problem: pure integrator driven by Brownian
    /// motion, full observation, all weights zero except the terminal one.
    ///
    /// `dx = u dt + dw`, `dy = x dt + dv`, `J = (E x(T))^2`, `x0 = 1`
    /// known exactly. Its singular control weight makes it irregular.
    pub fn intro_scalar(t_end: f64, steps: usize) -> ProblemSpec {
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::from_element(1, 1, 0.0);
        ProblemSpec {
            n: 1,
            m: 1,
            s: 1,
            a: MatrixSchedule::constant(zero.clone()),
            b: MatrixSchedule::constant(one.clone()),
            d: MatrixSchedule::constant(one.clone()),
            c: MatrixSchedule::constant(one.clone()),
            g: MatrixSchedule::constant(one.clone()),
            q: MatrixSchedule::constant(zero.clone()),
            r: MatrixSchedule::constant(zero.clone()),
            h: one,
            grid: TimeGrid {
                t0: 0.0,
                t_end,
                steps,
            },
            x0_mean: DVector::from_element(1, 1.0),
            sigma0: zero,
            p1_terminal: None,
        }
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleFile {
    Sampled { samples: Vec<Vec<Vec<f64>>> },
    Constant(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    n: usize,
    m: usize,
    s: usize,
    t0: f64,
    #[serde(rename = "T")]
    t_end: f64,
    steps: usize,
    #[serde(rename = "A")]
    a: ScheduleFile,
    #[serde(rename = "B")]
    b: ScheduleFile,
    #[serde(rename = "D")]
    d: ScheduleFile,
    #[serde(rename = "C")]
    c: ScheduleFile,
    #[serde(rename = "G")]
    g: ScheduleFile,
    #[serde(rename = "Q")]
    q: ScheduleFile,
    #[serde(rename = "R")]
    r: ScheduleFile,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    x0_mean: Vec<f64>,
    sigma0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p1_terminal: Option<Vec<Vec<f64>>>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{name} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn schedule_from_file(name: &str, sf: &ScheduleFile) -> Result<MatrixSchedule, Error> {
    match sf {
        ScheduleFile::Constant(rows) => Ok(MatrixSchedule::constant(rows_to_matrix(name, rows)?)),
        ScheduleFile::Sampled { samples } => {
            let mats = samples
                .iter()
                .map(|rows| rows_to_matrix(name, rows))
                .collect::<Result<Vec<_>, _>>()?;
            MatrixSchedule::sampled(mats)
        }
    }
}

fn schedule_to_file(sched: &MatrixSchedule) -> ScheduleFile {
    match sched {
        MatrixSchedule::Constant(m) => ScheduleFile::Constant(matrix_to_rows(m)),
        MatrixSchedule::Sampled(v) => ScheduleFile::Sampled {
            samples: v.iter().map(matrix_to_rows).collect(),
        },
    }
}

/// Load and validate a problem file (UTF-8 JSON).
pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file: ProblemFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let spec = ProblemSpec {
        n: file.n,
        m: file.m,
        s: file.s,
        a: schedule_from_file("A", &file.a)?,
        b: schedule_from_file("B", &file.b)?,
        d: schedule_from_file("D", &file.d)?,
        c: schedule_from_file("C", &file.c)?,
        g: schedule_from_file("G", &file.g)?,
        q: schedule_from_file("Q", &file.q)?,
        r: schedule_from_file("R", &file.r)?,
        h: rows_to_matrix("H", &file.h)?,
        grid: TimeGrid::new(file.t0, file.t_end, file.steps)?,
        x0_mean: DVector::from_vec(file.x0_mean.clone()),
        sigma0: rows_to_matrix("sigma0", &file.sigma0)?,
        p1_terminal: file
            .p1_terminal
            .as_ref()
            .map(|rows| rows_to_matrix("p1_terminal", rows))
            .transpose()?,
    };
    spec.validated()
}

/// Write a problem file. Numbers round-trip exactly through JSON.
pub fn save_problem(spec: &ProblemSpec, path: impl AsRef<Path>) -> Result<(), Error> {
    let file = ProblemFile {
        n: spec.n,
        m: spec.m,
        s: spec.s,
        t0: spec.grid.t0,
        t_end: spec.grid.t_end,
        steps: spec.grid.steps,
        a: schedule_to_file(&spec.a),
        b: schedule_to_file(&spec.b),
        d: schedule_to_file(&spec.d),
        c: schedule_to_file(&spec.c),
        g: schedule_to_file(&spec.g),
        q: schedule_to_file(&spec.q),
        r: schedule_to_file(&spec.r),
        h: matrix_to_rows(&spec.h),
        x0_mean: spec.x0_mean.iter().cloned().collect(),
        sigma0: matrix_to_rows(&spec.sigma0),
        p1_terminal: spec.p1_terminal.as_ref().map(matrix_to_rows),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse {
        path: path.as_ref().display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intro_scalar_is_valid() {
        let spec = ProblemSpec::intro_scalar(1.0, 100);
        assert!(validate(&spec).is_ok());
    }

    #[test]
    fn zero_g_is_flagged() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 100);
        spec.g = MatrixSchedule::constant(DMatrix::zeros(1, 1));
        let report = validate(&spec);
        assert!(!report.is_ok());
        assert!(report.to_string().contains("GG' singular"));
    }

    #[test]
    fn indefinite_r_is_flagged() {
        let mut spec = ProblemSpec::intro_scalar(1.0, 100);
        spec.m = 2;
        spec.b = MatrixSchedule::constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        spec.r = MatrixSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let report = validate(&spec);
        assert!(!report.is_ok());
        assert!(report.to_string().contains("R not PSD"));
    }

    #[test]
    fn missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        // intro problem with H removed
        std::fs::write(
            &path,
            r#"{"n":1,"m":1,"s":1,"t0":0.0,"T":1.0,"steps":10,
                "A":[[0.0]],"B":[[1.0]],"D":[[1.0]],"C":[[1.0]],"G":[[1.0]],
                "Q":[[0.0]],"R":[[0.0]],"x0_mean":[1.0],"sigma0":[[0.0]]}"#,
        )
        .unwrap();
        let err = load_problem(&path).unwrap_err();
        assert!(err.to_string().contains('H'), "got: {err}");
    }

    #[test]
    fn constant_shorthand_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intro.json");
        let spec = ProblemSpec::intro_scalar(1.0, 50);
        save_problem(&spec, &path).unwrap();
        let loaded = load_problem(&path).unwrap();
        assert_eq!(loaded.a, spec.a);
        assert_eq!(loaded.h, spec.h);
        assert_eq!(loaded.x0_mean, spec.x0_mean);
        assert_eq!(loaded.grid, spec.grid);
    }

    #[test]
    fn sampled_round_trip_and_node_exactness() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let samples: Vec<DMatrix<f64>> = (0..=4)
            .map(|k| DMatrix::from_element(1, 1, 0.1 + 0.37 * k as f64))
            .collect();
        let sched = MatrixSchedule::sampled(samples.clone()).unwrap();
        for k in 0..=4 {
            assert_eq!(sched.eval(&grid, grid.node(k)), samples[k]);
        }
        // midpoint interpolates
        let mid = sched.eval(&grid, 0.125);
        assert!((mid[(0, 0)] - (0.1 + 0.5 * 0.37)).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sampled.json");
        let mut spec = ProblemSpec::intro_scalar(1.0, 4);
        spec.a = sched;
        save_problem(&spec, &path).unwrap();
        let loaded = load_problem(&path).unwrap();
        assert_eq!(loaded.a, spec.a);
    }
}
