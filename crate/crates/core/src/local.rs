//! Steps 2 and 3: time-domain least squares on the half line `(0, g)`.
//!
//! The forward model is the scattered-wave problem driven by the measured
//! Neumann trace `p2` at `x = 0` and closed by a Mur condition at `x = g`. The
//! Neumann datum enters through the same second-order one-sided difference that
//! produced `p2` from the full-domain simulation, so noiseless synthetic data
//! are reproduced to rounding error.
//!
//! Gradients are the exact reverse-mode derivative of the discrete scheme.

use serde::{Deserialize, Serialize};

use crate::error::{CipError, Result};
use crate::forward::{
    mur_coefficient, CoefficientProfile, IncidentWave, SpaceTimeGrid, TimeTraces,
};
use crate::optim::{lbfgs, LbfgsConfig, OptimReport};

/// Coefficient values below which a warning is attached to a report.
pub const LOW_COEFFICIENT_WARNING: f64 = 0.05;

/// Penalty on `d = c - c_ref` over `(0, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regularizer {
    /// `‖d‖²_{H¹}`.
    SquaredH1,
    /// `sqrt(‖d‖²_{H¹} + δ²)`: the plain norm, smoothed at `d = 0`.
    SmoothedH1 { delta: f64 },
}

impl Regularizer {
    /// Value and derivative with respect to the squared norm.
    fn outer(&self, sq: f64) -> (f64, f64) {
        match *self {
            Regularizer::SquaredH1 => (sq, 1.0),
            Regularizer::SmoothedH1 { delta } => {
                let r = (sq + delta * delta).sqrt();
                (r - delta, 0.5 / r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisfitConfig {
    pub alpha: f64,
    /// Grid on `(0, g)`.
    pub grid: SpaceTimeGrid,
    pub epsilon: f64,
    pub max_iter: usize,
    pub regularizer: Regularizer,
    pub incident: IncidentWave,
}

impl MisfitConfig {
    pub fn new(alpha: f64, grid: SpaceTimeGrid, epsilon: f64, max_iter: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            grid,
            epsilon,
            max_iter,
            regularizer: Regularizer::SquaredH1,
            incident: IncidentWave::standard(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(CipError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(CipError::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.grid.x_left().abs() > 1e-12 {
            return Err(CipError::Config("local grid must start at x = 0".into()));
        }
        if let Regularizer::SmoothedH1 { delta } = self.regularizer {
            if !(delta > 0.0) {
                return Err(CipError::Config("smoothing delta must be > 0".into()));
            }
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            ..LbfgsConfig::default()
        }
    }
}

fn check_half_profile(c: &CoefficientProfile, grid: &SpaceTimeGrid) -> Result<()> {
    if c.len() != grid.nx() || c.x_left().abs() > 1e-12 || (c.dx() - grid.dx()).abs() > 1e-12 {
        return Err(CipError::Argument(format!(
            "profile with {} nodes from x = {} does not match the half-line grid ({} nodes)",
            c.len(),
            c.x_left(),
            grid.nx()
        )));
    }
    Ok(())
}

fn check_series(len: usize, grid: &SpaceTimeGrid, what: &str) -> Result<()> {
    if len != grid.nt() {
        return Err(CipError::Argument(format!(
            "{what} has {len} samples, grid has {}",
            grid.nt()
        )));
    }
    Ok(())
}

/// Scattered field on `(0, g)` and the total trace at `x = 0`.
#[derive(Debug, Clone)]
pub struct NeumannField {
    nx: usize,
    /// Time-major `nt × nx` scattered field.
    data: Vec<f64>,
    /// `u(0, t_n) = u^i(0, t_n) + u^s(0, t_n)`.
    pub trace: Vec<f64>,
}

impl NeumannField {
    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.data[n * self.nx + i]
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.data[n * self.nx..(n + 1) * self.nx]
    }
}

/// Precomputed quantities shared by forward and adjoint sweeps.
struct Scheme<'a> {
    grid: &'a SpaceTimeGrid,
    /// `dt² u^i_tt(x_i, t_n)`, time-major.
    accel: Vec<f64>,
    /// Scattered Neumann datum `p2 - u^i_x(0, ·)`.
    neumann: Vec<f64>,
    incident0: Vec<f64>,
    kr: f64,
}

impl<'a> Scheme<'a> {
    fn new(grid: &'a SpaceTimeGrid, incident: &IncidentWave, p2: &[f64]) -> Result<Self> {
        check_series(p2.len(), grid, "p2")?;
        let (nx, nt, dt) = (grid.nx(), grid.nt(), grid.dt());
        let mut accel = vec![0.0; nt * nx];
        for n in 0..nt {
            for i in 0..nx {
                accel[n * nx + i] = dt * dt * incident.dtt(grid.x(i), grid.t(n));
            }
        }
        let neumann = (0..nt)
            .map(|n| p2[n] - incident.dx(0.0, grid.t(n)))
            .collect();
        let incident0 = (0..nt).map(|n| incident.value(0.0, grid.t(n))).collect();
        Ok(Self {
            grid,
            accel,
            neumann,
            incident0,
            kr: mur_coefficient(1.0, grid.dx(), dt),
        })
    }

    fn cfl(&self, c: &[f64]) -> Result<()> {
        self.grid
            .check_cfl(c.iter().copied().fold(f64::INFINITY, f64::min))
    }

    fn forward(&self, c: &[f64]) -> Result<NeumannField> {
        self.cfl(c)?;
        let (nx, nt) = (self.grid.nx(), self.grid.nt());
        let dx = self.grid.dx();
        let r2 = (self.grid.dt() / dx).powi(2);
        let kr = self.kr;
        let mut data = vec![0.0; nt * nx];
        let close_left = |u: &mut [f64], g: f64| {
            u[0] = (4.0 * u[1] - u[2] - 2.0 * dx * g) / 3.0;
        };
        if nt > 1 {
            let (u0, rest) = data.split_at_mut(nx);
            let u1 = &mut rest[..nx];
            for i in 1..nx - 1 {
                u1[i] = 0.5 * (1.0 - c[i]) / c[i] * self.accel[i];
            }
            u1[nx - 1] = u0[nx - 2] + kr * (u1[nx - 2] - u0[nx - 1]);
            close_left(u1, self.neumann[1]);
        }
        for n in 1..nt.saturating_sub(1) {
            let (past, future) = data.split_at_mut((n + 1) * nx);
            let prev = &past[(n - 1) * nx..n * nx];
            let cur = &past[n * nx..(n + 1) * nx];
            let next = &mut future[..nx];
            let acc = &self.accel[n * nx..(n + 1) * nx];
            for i in 1..nx - 1 {
                let lap = cur[i + 1] - 2.0 * cur[i] + cur[i - 1];
                next[i] = 2.0 * cur[i] - prev[i] + r2 / c[i] * lap;
                if c[i] != 1.0 {
                    next[i] += (1.0 - c[i]) / c[i] * acc[i];
                }
            }
            next[nx - 1] = cur[nx - 2] + kr * (next[nx - 2] - cur[nx - 1]);
            close_left(next, self.neumann[n + 1]);
        }
        let trace = (0..nt).map(|n| self.incident0[n] + data[n * nx]).collect();
        Ok(NeumannField { nx, data, trace })
    }

    /// Reverse sweep. `source[n]` is `∂J/∂u(0, t_n)`. Returns `∂J/∂c_i` for every
    /// node and, if requested, the adjoint states `ū^{n+1}` for `n = 0..nt-1`.
    fn adjoint(
        &self,
        c: &[f64],
        field: &NeumannField,
        source: &[f64],
        keep_states: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let (nx, nt) = (self.grid.nx(), self.grid.nt());
        let r2 = (self.grid.dt() / self.grid.dx()).powi(2);
        let kr = self.kr;
        let mut grad = vec![0.0; nx];
        let mut states = keep_states.then(|| vec![0.0; nt * nx]);
        // cur, m1, m2 hold ū^n, ū^{n-1}, ū^{n-2} while step n is reversed
        let mut cur = vec![0.0; nx];
        let mut m1 = vec![0.0; nx];
        let mut m2 = vec![0.0; nx];
        for n in (1..nt).rev() {
            cur[0] += source[n];
            if let Some(s) = states.as_mut() {
                s[(n - 1) * nx..n * nx].copy_from_slice(&cur);
            }
            // left closure
            let a0 = cur[0];
            cur[1] += 4.0 / 3.0 * a0;
            cur[2] -= a0 / 3.0;
            cur[0] = 0.0;
            // right Mur condition
            let al = cur[nx - 1];
            cur[nx - 2] += kr * al;
            m1[nx - 2] += al;
            m1[nx - 1] -= kr * al;
            cur[nx - 1] = 0.0;
            // interior
            if n == 1 {
                for i in 1..nx - 1 {
                    grad[i] -= cur[i] * 0.5 * self.accel[i] / (c[i] * c[i]);
                }
            } else {
                let prev = field.slice(n - 1);
                let acc = &self.accel[(n - 1) * nx..n * nx];
                for i in 1..nx - 1 {
                    let a = cur[i];
                    if a == 0.0 {
                        continue;
                    }
                    let k = r2 / c[i];
                    m1[i] += (2.0 - 2.0 * k) * a;
                    m1[i + 1] += k * a;
                    m1[i - 1] += k * a;
                    m2[i] -= a;
                    let lap = prev[i + 1] - 2.0 * prev[i] + prev[i - 1];
                    grad[i] -= a * (r2 * lap + acc[i]) / (c[i] * c[i]);
                }
            }
            // shift: ū^{n-1} becomes current
            std::mem::swap(&mut cur, &mut m1);
            std::mem::swap(&mut m1, &mut m2);
            m2.iter_mut().for_each(|v| *v = 0.0);
        }
        (grad, states)
    }
}

/// Solve the Neumann-driven problem on `(0, g)`.
///
/// `c` must be a half-line profile (`x_left = 0`) on the nodes of `grid`.
pub fn forward_neumann(
    c: &CoefficientProfile,
    p2: &[f64],
    grid: &SpaceTimeGrid,
    incident: &IncidentWave,
) -> Result<NeumannField> {
    check_half_profile(c, grid)?;
    Scheme::new(grid, incident, p2)?.forward(c.values())
}

/// Trapezoid weights times `dt`.
fn time_weights(nt: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; nt];
    if nt > 1 {
        w[0] = 0.5 * dt;
        w[nt - 1] = 0.5 * dt;
    }
    w
}

/// Index of the node at `x = b` on a half-line grid.
fn b_index(grid: &SpaceTimeGrid, b: f64) -> Result<usize> {
    grid.node_index(b)
        .filter(|&m| m >= 2 && m < grid.nx())
        .ok_or_else(|| {
            CipError::Config(format!("b = {b} is not an interior node of the local grid"))
        })
}

/// `R(d)` and `∂R/∂d_i` for `d = c - c_ref` on nodes `0..=m`, with `d_0 = d_m = 0`.
fn regularizer(kind: Regularizer, d: &[f64], m: usize, dx: f64) -> (f64, Vec<f64>) {
    let mut sq = 0.0;
    let mut g = vec![0.0; d.len()];
    for i in 1..m {
        sq += dx * d[i] * d[i];
        g[i] += 2.0 * dx * d[i];
    }
    for i in 0..m {
        let jump = d[i + 1] - d[i];
        sq += jump * jump / dx;
        g[i + 1] += 2.0 * jump / dx;
        g[i] -= 2.0 * jump / dx;
    }
    let (value, scale) = kind.outer(sq);
    g.iter_mut().for_each(|v| *v *= scale);
    g[0] = 0.0;
    g[m] = 0.0;
    (value, g)
}

/// Objective, gradient on every node, and the forward field for one coefficient vector.
struct Evaluation {
    value: f64,
    gradient: Vec<f64>,
}

struct Problem<'a> {
    scheme: Scheme<'a>,
    p1: &'a [f64],
    c_ref: &'a [f64],
    weights: Vec<f64>,
    alpha: f64,
    regularizer: Regularizer,
    m: usize,
    dx: f64,
}

impl<'a> Problem<'a> {
    fn new(
        c_ref: &'a CoefficientProfile,
        traces: &'a TimeTraces,
        cfg: &'a MisfitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_half_profile(c_ref, &cfg.grid)?;
        check_series(traces.p1.len(), &cfg.grid, "p1")?;
        Ok(Self {
            scheme: Scheme::new(&cfg.grid, &cfg.incident, &traces.p2)?,
            p1: &traces.p1,
            c_ref: c_ref.values(),
            weights: time_weights(cfg.grid.nt(), cfg.grid.dt()),
            alpha: cfg.alpha,
            regularizer: cfg.regularizer,
            m: b_index(&cfg.grid, c_ref.b())?,
            dx: cfg.grid.dx(),
        })
    }

    fn residual(&self, field: &NeumannField) -> Vec<f64> {
        field
            .trace
            .iter()
            .zip(self.p1)
            .map(|(u, p)| u - p)
            .collect()
    }

    fn data_term(&self, res: &[f64]) -> f64 {
        0.5 * res
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| w * r * r)
            .sum::<f64>()
    }

    fn penalty(&self, c: &[f64]) -> (f64, Vec<f64>) {
        if self.alpha == 0.0 {
            return (0.0, vec![0.0; c.len()]);
        }
        let d: Vec<f64> = (0..=self.m).map(|i| c[i] - self.c_ref[i]).collect();
        let (r, mut g) = regularizer(self.regularizer, &d, self.m, self.dx);
        g.iter_mut().for_each(|v| *v *= 0.5 * self.alpha);
        g.resize(c.len(), 0.0);
        (0.5 * self.alpha * r, g)
    }

    fn value(&self, c: &[f64]) -> Result<f64> {
        let field = self.scheme.forward(c)?;
        Ok(self.data_term(&self.residual(&field)) + self.penalty(c).0)
    }

    fn evaluate(&self, c: &[f64]) -> Result<Evaluation> {
        let field = self.scheme.forward(c)?;
        let res = self.residual(&field);
        let source: Vec<f64> = res.iter().zip(&self.weights).map(|(r, w)| r * w).collect();
        let (mut gradient, _) = self.scheme.adjoint(c, &field, &source, false);
        let (pen, pg) = self.penalty(c);
        for (g, p) in gradient.iter_mut().zip(&pg) {
            *g += p;
        }
        // restrict to (0, b)
        for (i, g) in gradient.iter_mut().enumerate() {
            if i == 0 || i >= self.m {
                *g = 0.0;
            }
        }
        Ok(Evaluation {
            value: self.data_term(&res) + pen,
            gradient,
        })
    }
}

/// `½ ∫ (u(0, t; c) - p1)² dt + ½ α R(c - c_ref)`.
pub fn misfit(
    c: &CoefficientProfile,
    traces: &TimeTraces,
    c_ref: &CoefficientProfile,
    cfg: &MisfitConfig,
) -> Result<f64> {
    check_half_profile(c, &cfg.grid)?;
    Problem::new(c_ref, traces, cfg)?.value(c.values())
}

/// Gradient of [`misfit`] on every node of the half-line grid, zero outside `(0, b)`.
pub fn misfit_gradient(
    c: &CoefficientProfile,
    traces: &TimeTraces,
    c_ref: &CoefficientProfile,
    cfg: &MisfitConfig,
) -> Result<Vec<f64>> {
    check_half_profile(c, &cfg.grid)?;
    Ok(Problem::new(c_ref, traces, cfg)?
        .evaluate(c.values())?
        .gradient)
}

/// Adjoint states of the discrete forward scheme.
///
/// `η^n` is the multiplier of the update that produces `u^{n+1}`, so the final
/// slice `η^{nt-1}` is identically zero.
#[derive(Debug, Clone)]
pub struct AdjointField {
    nx: usize,
    data: Vec<f64>,
}

impl AdjointField {
    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.data[n * self.nx + i]
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.data[n * self.nx..(n + 1) * self.nx]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Backward solve driven by the boundary residual `r = p1 - u(0, ·)`.
///
/// The data term of [`misfit`] has `∂/∂u(0, t_n) = -w_n r_n`; that is the
/// source injected here. The adjoint recursion is linear and does not depend
/// on the forward field, only on `c`.
pub fn adjoint_solve(
    c: &CoefficientProfile,
    residual: &[f64],
    grid: &SpaceTimeGrid,
) -> Result<AdjointField> {
    check_half_profile(c, grid)?;
    check_series(residual.len(), grid, "residual")?;
    let scheme = Scheme::new(grid, &IncidentWave::standard(), &vec![0.0; grid.nt()])?;
    scheme.cfl(c.values())?;
    let idle = NeumannField {
        nx: grid.nx(),
        data: vec![0.0; grid.nx() * grid.nt()],
        trace: Vec::new(),
    };
    let w = time_weights(grid.nt(), grid.dt());
    let source: Vec<f64> = residual.iter().zip(&w).map(|(r, w)| -r * w).collect();
    let (_, states) = scheme.adjoint(c.values(), &idle, &source, true);
    Ok(AdjointField {
        nx: grid.nx(),
        data: states.expect("states requested"),
    })
}

/// Result of one local minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub optim: OptimReport,
    /// Right end of the optimized support.
    pub support_end: f64,
    pub min_coefficient: f64,
    pub warnings: Vec<String>,
}

impl LocalReport {
    pub fn flagged(&self) -> bool {
        self.optim.flagged()
    }
}

fn minimize_on(
    c_init: &CoefficientProfile,
    traces: &TimeTraces,
    c_ref: &CoefficientProfile,
    cfg: &MisfitConfig,
    support_end: usize,
) -> Result<(CoefficientProfile, LocalReport)> {
    check_half_profile(c_init, &cfg.grid)?;
    let problem = Problem::new(c_ref, traces, cfg)?;
    let unknowns: Vec<usize> = (1..support_end.min(problem.m)).collect();
    let base = c_init.values().to_vec();
    let assemble = |x: &[f64]| -> Vec<f64> {
        let mut c = base.clone();
        for (k, &i) in unknowns.iter().enumerate() {
            c[i] = x[k];
        }
        c
    };
    let x0: Vec<f64> = unknowns.iter().map(|&i| base[i]).collect();
    let eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let c = assemble(x);
        let e = problem.evaluate(&c).ok()?;
        Some((e.value, unknowns.iter().map(|&i| e.gradient[i]).collect()))
    };
    let (x, optim) = lbfgs(x0, eval, &cfg.lbfgs());
    let values = assemble(&x);
    let min_coefficient = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut warnings = Vec::new();
    if min_coefficient < LOW_COEFFICIENT_WARNING {
        warnings.push(format!(
            "coefficient dropped to {min_coefficient:.4} (below {LOW_COEFFICIENT_WARNING})"
        ));
    }
    let profile = CoefficientProfile::new(c_init.x_left(), c_init.dx(), c_init.b(), values)?;
    Ok((
        profile,
        LocalReport {
            optim,
            support_end: cfg.grid.x(support_end.min(problem.m)),
            min_coefficient,
            warnings,
        },
    ))
}

/// Quasi-Newton descent on the values of `c` in `(0, b)` from `c_init`.
pub fn minimize_local(
    c_init: &CoefficientProfile,
    traces: &TimeTraces,
    c_ref: &CoefficientProfile,
    cfg: &MisfitConfig,
) -> Result<(CoefficientProfile, LocalReport)> {
    minimize_on(c_init, traces, c_ref, cfg, usize::MAX)
}

/// Outcome of the support-reduction scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub b1: f64,
    /// Set when no node satisfied the criterion and `b1 = b`.
    pub flagged: bool,
}

/// First node `x` in `(0, b)` with `|c(x) - 1| ≤ ε` and `max_{(0, x)} |c - 1| > ε`.
pub fn reduce_interval(c: &CoefficientProfile, epsilon: f64) -> Reduction {
    let mut prefix_max = 0.0f64;
    for i in c.free_indices() {
        let dev = (c.values()[i] - 1.0).abs();
        if dev <= epsilon && prefix_max > epsilon {
            return Reduction {
                b1: c.x(i),
                flagged: false,
            };
        }
        prefix_max = prefix_max.max(dev);
    }
    Reduction {
        b1: c.b(),
        flagged: true,
    }
}

/// Re-optimize on `(0, b1)` from `c_local1` with `[b1, b)` frozen at 1.
pub fn step3_refine(
    c_local1: &CoefficientProfile,
    traces: &TimeTraces,
    c_ref: &CoefficientProfile,
    cfg: &MisfitConfig,
) -> Result<(CoefficientProfile, Reduction, LocalReport)> {
    let reduction = reduce_interval(c_local1, cfg.epsilon);
    let end = cfg
        .grid
        .node_index(reduction.b1)
        .ok_or_else(|| CipError::Argument(format!("b1 = {} is not a grid node", reduction.b1)))?;
    let mut values = c_local1.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if i >= end && c_local1.is_free(i) {
            *v = 1.0;
        }
    }
    let start = CoefficientProfile::new(c_local1.x_left(), c_local1.dx(), c_local1.b(), values)?;
    let (c, report) = minimize_on(&start, traces, c_ref, cfg, end)?;
    Ok((c, reduction, report))
}
