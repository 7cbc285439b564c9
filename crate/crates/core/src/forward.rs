//! Finite-difference time-domain simulation of the 1-d scattering problem.
//!
//! The total field is split as `u = u^i + u^s`. The incident wave
//! `u^i(x, t) = f(t - |x - x0|)` is known in closed form; the scattered wave
//! solves `c u^s_tt - u^s_xx = (1 - c) u^i_tt` on `(x_left, x_right)` with
//! zero initial data and first-order absorbing conditions at both ends.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CipError, Result};
use crate::io::{read_csv, write_csv};

const GRID_TOL: f64 = 1e-9;

/// Uniform space-time grid on `[x_left, x_right] × [0, t_final]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    x_left: f64,
    x_right: f64,
    dx: f64,
    t_final: f64,
    dt: f64,
    nx: usize,
    nt: usize,
}

fn integer_ratio(len: f64, step: f64, what: &str) -> Result<usize> {
    let r = len / step;
    let n = r.round();
    if (r - n).abs() > GRID_TOL * r.max(1.0) || n < 1.0 {
        return Err(CipError::Config(format!(
            "{what}: length {len} is not an integer multiple of step {step}"
        )));
    }
    Ok(n as usize)
}

impl SpaceTimeGrid {
    pub fn new(x_left: f64, x_right: f64, dx: f64, t_final: f64, dt: f64) -> Result<Self> {
        if !(x_left < 0.0 && 0.0 < x_right) {
            return Err(CipError::Config(format!(
                "need x_left < 0 < x_right, got ({x_left}, {x_right})"
            )));
        }
        if !(dx > 0.0 && dt > 0.0 && t_final > 0.0) {
            return Err(CipError::Config(
                "dx, dt and t_final must be positive".into(),
            ));
        }
        let cells = integer_ratio(x_right - x_left, dx, "space")?;
        let steps = integer_ratio(t_final, dt, "time")?;
        // x = 0 must be a node
        integer_ratio(-x_left, dx, "x_left")?;
        Ok(Self {
            x_left,
            x_right,
            dx,
            t_final,
            dt,
            nx: cells + 1,
            nt: steps + 1,
        })
    }

    /// `k = -0.2`, `g = 0.5`, `Δx = 0.005`, `T = 2`, `Δt = 0.001`.
    pub fn standard() -> Self {
        Self::new(-0.2, 0.5, 0.005, 2.0, 0.001).expect("standard grid is valid")
    }

    pub fn x_left(&self) -> f64 {
        self.x_left
    }
    pub fn x_right(&self) -> f64 {
        self.x_right
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_left + i as f64 * self.dx
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt).map(|n| self.t(n)).collect()
    }

    /// Index of the node at `x = 0`.
    pub fn origin_index(&self) -> usize {
        (-self.x_left / self.dx).round() as usize
    }

    /// Index of the node nearest `x`, if `x` is a node within tolerance.
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let r = (x - self.x_left) / self.dx;
        let i = r.round();
        ((r - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < self.nx).then_some(i as usize)
    }

    /// Same spacing, time axis, and right end, with the left end moved to `x = 0`.
    pub fn right_half(&self) -> Self {
        Self {
            x_left: 0.0,
            nx: self.nx - self.origin_index(),
            ..self.clone()
        }
    }

    /// Stability of the explicit scheme: `dt ≤ dx √(min c)`.
    pub fn check_cfl(&self, min_c: f64) -> Result<()> {
        if !(min_c > 0.0) {
            return Err(CipError::Precondition(format!(
                "coefficient must stay positive, min c = {min_c}"
            )));
        }
        let ratio = self.dt / (self.dx * min_c.sqrt());
        if ratio > 1.0 {
            return Err(CipError::Precondition(format!(
                "CFL violated: dt / (dx sqrt(min c)) = {ratio:.4} > 1"
            )));
        }
        Ok(())
    }
}

/// Dielectric coefficient sampled on the nodes of a spatial grid.
///
/// Equals 1 outside the open inclusion interval `(0, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientProfile {
    x_left: f64,
    dx: f64,
    b: f64,
    values: Vec<f64>,
}

impl CoefficientProfile {
    /// Validate values against the background and positivity invariants.
    pub fn new(x_left: f64, dx: f64, b: f64, values: Vec<f64>) -> Result<Self> {
        if !(b > 0.0) {
            return Err(CipError::Config(format!(
                "inclusion end b must be positive, got {b}"
            )));
        }
        let p = Self {
            x_left,
            dx,
            b,
            values,
        };
        for (i, &v) in p.values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CipError::Argument(format!(
                    "coefficient at x = {} is {v}; must be positive",
                    p.x(i)
                )));
            }
            if !p.is_free(i) && (v - 1.0).abs() > 1e-12 {
                return Err(CipError::Argument(format!(
                    "coefficient at x = {} is {v}; must equal 1 outside (0, b)",
                    p.x(i)
                )));
            }
        }
        Ok(p)
    }

    /// Sample `c(x)` on the grid, forcing 1 outside `(0, b)`.
    pub fn from_fn(grid: &SpaceTimeGrid, b: f64, c: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_nodes(grid.x_left(), grid.dx(), grid.nx(), b, c)
    }

    pub fn from_nodes(
        x_left: f64,
        dx: f64,
        nx: usize,
        b: f64,
        c: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let mut p = Self {
            x_left,
            dx,
            b,
            values: vec![1.0; nx],
        };
        for i in 0..nx {
            if p.is_free(i) {
                p.values[i] = c(p.x(i));
            }
        }
        Self::new(x_left, dx, b, p.values)
    }

    pub fn homogeneous(grid: &SpaceTimeGrid, b: f64) -> Self {
        Self::from_fn(grid, b, |_| 1.0).expect("homogeneous profile is valid")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x_left(&self) -> f64 {
        self.x_left
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_left + i as f64 * self.dx
    }

    /// Whether node `i` lies strictly inside `(0, b)`.
    pub fn is_free(&self, i: usize) -> bool {
        let x = self.x(i);
        x > 0.5 * self.dx * 1e-6 && x < self.b - 0.5 * self.dx * 1e-6
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_free(i)).collect()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same values on the nodes with `x ≥ 0` (for the half-line local problem).
    pub fn right_half(&self) -> Self {
        let start = (-self.x_left / self.dx).round().max(0.0) as usize;
        Self {
            x_left: self.x(start),
            dx: self.dx,
            b: self.b,
            values: self.values[start..].to_vec(),
        }
    }

    /// Re-embed a half-line profile into the grid of `self`, keeping 1 elsewhere.
    pub fn with_right_half(&self, half: &CoefficientProfile) -> Result<Self> {
        let start = (-self.x_left / self.dx).round() as usize;
        if half.len() + start != self.len() || half.dx != self.dx {
            return Err(CipError::Argument(
                "half-line profile does not fit this grid".into(),
            ));
        }
        let mut values = self.values.clone();
        values[start..].copy_from_slice(&half.values);
        Self::new(self.x_left, self.dx, self.b, values)
    }

    /// Replace values without re-validating.
    #[cfg(test)]
    pub(crate) fn with_values_unchecked(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }

    /// Linear interpolation from arbitrary sorted nodes, 1 outside `(0, b)`.
    pub fn interpolate_from(grid: &SpaceTimeGrid, b: f64, xs: &[f64], cs: &[f64]) -> Result<Self> {
        if xs.len() != cs.len() || xs.len() < 2 {
            return Err(CipError::Argument(
                "need at least two matching nodes".into(),
            ));
        }
        let interp = |x: f64| -> f64 {
            if x <= xs[0] {
                return cs[0];
            }
            if x >= xs[xs.len() - 1] {
                return cs[cs.len() - 1];
            }
            let j = xs.partition_point(|&v| v <= x) - 1;
            let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
            cs[j] * (1.0 - w) + cs[j + 1] * w
        };
        Self::from_fn(grid, b, interp)
    }
}

/// Incident pulse `f(t) = A (t - t0) e^{-ω²(t - t0)²}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub omega: f64,
    pub amplitude: f64,
    pub center: f64,
}

impl Default for Waveform {
    /// `ω = 30`, `A = √2 ω e^{1/2}`, `t0 = 0.2`.
    fn default() -> Self {
        let omega = 30.0;
        Self {
            omega,
            amplitude: std::f64::consts::SQRT_2 * omega * 0.5f64.exp(),
            center: 0.2,
        }
    }
}

impl Waveform {
    pub fn value(&self, t: f64) -> f64 {
        let tau = t - self.center;
        self.amplitude * tau * (-self.omega * self.omega * tau * tau).exp()
    }

    pub fn d1(&self, t: f64) -> f64 {
        let tau = t - self.center;
        let w2 = self.omega * self.omega;
        self.amplitude * (1.0 - 2.0 * w2 * tau * tau) * (-w2 * tau * tau).exp()
    }

    pub fn d2(&self, t: f64) -> f64 {
        let tau = t - self.center;
        let w2 = self.omega * self.omega;
        self.amplitude * 2.0 * w2 * tau * (2.0 * w2 * tau * tau - 3.0) * (-w2 * tau * tau).exp()
    }
}

/// `u^i(x, t) = f(t - |x - x0|)` for `t ≥ |x - x0|`, zero before.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncidentWave {
    pub waveform: Waveform,
    pub source_x: f64,
}

impl IncidentWave {
    pub fn new(waveform: Waveform, source_x: f64) -> Self {
        Self { waveform, source_x }
    }

    /// Default pulse launched from `x0 = -0.2`.
    pub fn standard() -> Self {
        Self::new(Waveform::default(), -0.2)
    }

    fn delay(&self, x: f64) -> f64 {
        (x - self.source_x).abs()
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        let d = self.delay(x);
        if t >= d {
            self.waveform.value(t - d)
        } else {
            0.0
        }
    }

    pub fn dtt(&self, x: f64, t: f64) -> f64 {
        let d = self.delay(x);
        if t >= d {
            self.waveform.d2(t - d)
        } else {
            0.0
        }
    }

    pub fn dx(&self, x: f64, t: f64) -> f64 {
        let d = self.delay(x);
        if t >= d {
            -(x - self.source_x).signum() * self.waveform.d1(t - d)
        } else {
            0.0
        }
    }

    /// `u^i(x, t_n)` for every time node.
    pub fn trace(&self, x: f64, grid: &SpaceTimeGrid) -> Vec<f64> {
        (0..grid.nt()).map(|n| self.value(x, grid.t(n))).collect()
    }
}

/// Scattered field `u^s` on the full grid, time-major (`nt × nx`).
#[derive(Debug, Clone)]
pub struct ScatteredField {
    grid: SpaceTimeGrid,
    data: Vec<f64>,
}

impl ScatteredField {
    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.data[n * self.grid.nx() + i]
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.data[n * nx..(n + 1) * nx]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Mur coefficient `(v dt - dx) / (v dt + dx)` for local speed `v = 1/√c`.
pub(crate) fn mur_coefficient(c: f64, dx: f64, dt: f64) -> f64 {
    let v = 1.0 / c.sqrt();
    (v * dt - dx) / (v * dt + dx)
}

fn check_profile_grid(profile: &CoefficientProfile, grid: &SpaceTimeGrid) -> Result<()> {
    if profile.len() != grid.nx()
        || (profile.dx() - grid.dx()).abs() > 1e-12
        || (profile.x_left() - grid.x_left()).abs() > 1e-12
    {
        return Err(CipError::Argument(format!(
            "profile with {} nodes does not match grid with {} nodes",
            profile.len(),
            grid.nx()
        )));
    }
    Ok(())
}

/// Explicit leapfrog solve of the scattered-wave problem.
///
/// Interior: `c_i (u^{n+1} - 2u^n + u^{n-1})/dt² = (u_{i+1} - 2u_i + u_{i-1})/dx² + (1 - c_i) u^i_tt`.
/// Ends: first-order Mur discretization of `u_x = u_t` (left) and `u_x = -u_t` (right).
pub fn solve_scattered(
    profile: &CoefficientProfile,
    grid: &SpaceTimeGrid,
    incident: &IncidentWave,
) -> Result<ScatteredField> {
    check_profile_grid(profile, grid)?;
    grid.check_cfl(profile.min())?;
    let nx = grid.nx();
    let nt = grid.nt();
    let (dx, dt) = (grid.dx(), grid.dt());
    let c = profile.values();
    let r2 = dt * dt / (dx * dx);
    let kl = mur_coefficient(c[0], dx, dt);
    let kr = mur_coefficient(c[nx - 1], dx, dt);
    let contrast: Vec<usize> = (0..nx).filter(|&i| c[i] != 1.0).collect();

    let mut data = vec![0.0; nt * nx];
    let forcing = |n: usize, i: usize| -> f64 {
        dt * dt * (1.0 - c[i]) / c[i] * incident.dtt(grid.x(i), grid.t(n))
    };

    if nt > 1 {
        // u^1 from a Taylor start with u^0 = u_t^0 = 0
        let (u0, rest) = data.split_at_mut(nx);
        let u1 = &mut rest[..nx];
        for &i in &contrast {
            if i > 0 && i < nx - 1 {
                u1[i] = 0.5 * forcing(0, i);
            }
        }
        u1[0] = u0[1] + kl * (u1[1] - u0[0]);
        u1[nx - 1] = u0[nx - 2] + kr * (u1[nx - 2] - u0[nx - 1]);
    }
    for n in 1..nt.saturating_sub(1) {
        let (past, future) = data.split_at_mut((n + 1) * nx);
        let prev = &past[(n - 1) * nx..n * nx];
        let cur = &past[n * nx..(n + 1) * nx];
        let next = &mut future[..nx];
        for i in 1..nx - 1 {
            let lap = cur[i + 1] - 2.0 * cur[i] + cur[i - 1];
            next[i] = 2.0 * cur[i] - prev[i] + r2 / c[i] * lap;
        }
        for &i in &contrast {
            if i > 0 && i < nx - 1 {
                next[i] += forcing(n, i);
            }
        }
        next[0] = cur[1] + kl * (next[1] - cur[0]);
        next[nx - 1] = cur[nx - 2] + kr * (next[nx - 2] - cur[nx - 1]);
    }
    Ok(ScatteredField {
        grid: grid.clone(),
        data,
    })
}

/// Boundary measurements `p1 = u(0, t)`, `p2 = u_x(0, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTraces {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub dt: f64,
}

impl TimeTraces {
    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }
}

/// Second-order one-sided `∂_x` at node `i0` from nodes `i0, i0+1, i0+2`.
#[inline]
pub(crate) fn one_sided_dx(u0: f64, u1: f64, u2: f64, dx: f64) -> f64 {
    (-3.0 * u0 + 4.0 * u1 - u2) / (2.0 * dx)
}

/// Total-field traces at `x = 0`: analytic incident part plus the scattered field.
pub fn extract_traces(field: &ScatteredField, incident: &IncidentWave) -> TimeTraces {
    let grid = field.grid();
    let i0 = grid.origin_index();
    let dx = grid.dx();
    let (p1, p2) = (0..grid.nt())
        .map(|n| {
            let t = grid.t(n);
            let u = field.slice(n);
            (
                incident.value(0.0, t) + u[i0],
                incident.dx(0.0, t) + one_sided_dx(u[i0], u[i0 + 1], u[i0 + 2], dx),
            )
        })
        .unzip();
    TimeTraces {
        p1,
        p2,
        dt: grid.dt(),
    }
}

/// Explicit-state Gaussian source for measurement noise.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    rng: ChaCha8Rng,
}

impl NoiseGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `series + e`, with `e` Gaussian rescaled so `‖e‖₂ = level ‖series‖₂`.
    pub fn perturb(&mut self, series: &[f64], level: f64) -> Result<Vec<f64>> {
        if !(level >= 0.0) {
            return Err(CipError::Argument(format!(
                "noise level must be nonnegative, got {level}"
            )));
        }
        if level == 0.0 {
            return Ok(series.to_vec());
        }
        let e: Vec<f64> = (0..series.len())
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        let norm_e = l2(&e);
        let scale = if norm_e > 0.0 {
            level * l2(series) / norm_e
        } else {
            0.0
        };
        Ok(series.iter().zip(&e).map(|(s, n)| s + scale * n).collect())
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Add independent relative-L2 noise to both traces.
pub fn add_noise(traces: &TimeTraces, level: f64, seed: u64) -> Result<TimeTraces> {
    let mut gen = NoiseGenerator::new(seed);
    add_noise_with(traces, level, &mut gen)
}

pub fn add_noise_with(
    traces: &TimeTraces,
    level: f64,
    gen: &mut NoiseGenerator,
) -> Result<TimeTraces> {
    Ok(TimeTraces {
        p1: gen.perturb(&traces.p1, level)?,
        p2: gen.perturb(&traces.p2, level)?,
        dt: traces.dt,
    })
}

/// Metadata recorded in the header row of exported trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub dx: f64,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub noise_level: f64,
}

impl TraceMetadata {
    fn header_line(&self) -> String {
        format!(
            "dx={:?},dt={:?},T={:?},seed={},noise_level={:?},noise_series=p1+p2",
            self.dx, self.dt, self.t_final, self.seed, self.noise_level
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let mut meta = TraceMetadata {
            dx: f64::NAN,
            dt: f64::NAN,
            t_final: f64::NAN,
            seed: 0,
            noise_level: 0.0,
        };
        for kv in line.split(',') {
            let Some((k, v)) = kv.split_once('=') else {
                continue;
            };
            let bad = |_| CipError::Data(format!("bad trace header field `{kv}`"));
            match k.trim() {
                "dx" => meta.dx = v.parse().map_err(bad)?,
                "dt" => meta.dt = v.parse().map_err(bad)?,
                "T" => meta.t_final = v.parse().map_err(bad)?,
                "seed" => {
                    meta.seed = v
                        .parse()
                        .map_err(|_| CipError::Data(format!("bad seed `{v}`")))?
                }
                "noise_level" => meta.noise_level = v.parse().map_err(bad)?,
                _ => {}
            }
        }
        if !(meta.dt > 0.0) {
            return Err(CipError::Data("trace header lacks dt".into()));
        }
        Ok(meta)
    }
}

/// Write `p1.csv` and `p2.csv` (columns `t,value`) into `dir`.
pub fn write_traces(dir: &Path, traces: &TimeTraces, meta: &TraceMetadata) -> Result<()> {
    let header = meta.header_line();
    for (name, series) in [("p1.csv", &traces.p1), ("p2.csv", &traces.p2)] {
        let rows = series
            .iter()
            .enumerate()
            .map(|(n, &v)| vec![n as f64 * traces.dt, v]);
        write_csv(&dir.join(name), Some(&header), &["t", "value"], rows)?;
    }
    Ok(())
}

pub fn read_traces(dir: &Path) -> Result<(TimeTraces, TraceMetadata)> {
    let load = |name: &str| -> Result<(Vec<f64>, TraceMetadata)> {
        let path = dir.join(name);
        let (_, rows, comment) = read_csv(&path)?;
        let meta = TraceMetadata::parse(comment.as_deref().unwrap_or(""))?;
        let values = rows
            .into_iter()
            .map(|r| {
                r.get(1).copied().ok_or_else(|| {
                    CipError::Data(format!("{}: missing value column", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((values, meta))
    };
    let (p1, meta) = load("p1.csv")?;
    let (p2, _) = load("p2.csv")?;
    if p1.len() != p2.len() {
        return Err(CipError::Data("p1 and p2 have different lengths".into()));
    }
    Ok((
        TimeTraces {
            p1,
            p2,
            dt: meta.dt,
        },
        meta,
    ))
}
