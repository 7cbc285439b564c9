//! End-to-end experiment runs: simulate, transform, Step 1, Steps 2 and 3.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{
    compute_interaction_tensor, read_tensor_cache, write_tensor_cache, InteractionTensor,
    LaguerreBasis, PseudoFrequencyGrid, QuadratureConfig,
};
use crate::error::{CipError, Result};
use crate::forward::{
    add_noise, extract_traces, read_traces, solve_scattered, write_traces, CoefficientProfile,
    IncidentWave, SpaceTimeGrid, TimeTraces, TraceMetadata, Waveform,
};
use crate::global::{
    intervals_for, minimize, recover_c, CarlemanWeight, QGrid, RecoveredCoefficient,
};
use crate::io::{read_csv, write_csv, write_json};
use crate::local::{
    minimize_local, step3_refine, LocalReport, MisfitConfig, Reduction, Regularizer,
};
use crate::optim::{LbfgsConfig, OptimReport, StopReason};
use crate::parallel::{join, Execution};
use crate::transform::{
    boundary_from_traces, fourier_denoise, truncation_warning, write_spectral_csv,
};

/// Coefficient to reconstruct (or simulate).
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSpec {
    Example(u8),
    Homogeneous,
    /// `1 + amplitude · χ[a, b]`.
    Step {
        a: f64,
        b: f64,
        amplitude: f64,
    },
    /// `1 + amplitude · exp(-(x - center)² / width²)`.
    Gaussian {
        center: f64,
        width: f64,
        amplitude: f64,
    },
    /// CSV with columns `x, c`, linearly interpolated.
    File(PathBuf),
}

impl fmt::Display for ProfileSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileSpec::Example(n) => write!(f, "example:{n}"),
            ProfileSpec::Homogeneous => write!(f, "homogeneous"),
            ProfileSpec::Step { a, b, amplitude } => write!(f, "step:{a},{b},{amplitude}"),
            ProfileSpec::Gaussian {
                center,
                width,
                amplitude,
            } => write!(f, "gauss:{center},{width},{amplitude}"),
            ProfileSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

fn parse_numbers(s: &str, count: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CipError::Config(format!("{what}: {e}")))?;
    if v.len() != count {
        return Err(CipError::Config(format!(
            "{what}: expected {count} numbers, got {}",
            v.len()
        )));
    }
    Ok(v)
}

impl FromStr for ProfileSpec {
    type Err = CipError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "example" => {
                let n: u8 = rest
                    .trim()
                    .parse()
                    .map_err(|_| CipError::Config(format!("bad example id `{rest}`")))?;
                if !(1..=4).contains(&n) {
                    return Err(CipError::Argument(format!("unknown example {n}; expected 1..4")));
                }
                Ok(ProfileSpec::Example(n))
            }
            "homogeneous" => Ok(ProfileSpec::Homogeneous),
            "step" => {
                let v = parse_numbers(rest, 3, "step:a,b,amplitude")?;
                Ok(ProfileSpec::Step {
                    a: v[0],
                    b: v[1],
                    amplitude: v[2],
                })
            }
            "gauss" => {
                let v = parse_numbers(rest, 3, "gauss:center,width,amplitude")?;
                Ok(ProfileSpec::Gaussian {
                    center: v[0],
                    width: v[1],
                    amplitude: v[2],
                })
            }
            "file" if !rest.is_empty() => Ok(ProfileSpec::File(PathBuf::from(rest))),
            _ => Err(CipError::Config(format!(
                "unrecognized profile `{s}`; use example:N, homogeneous, step:a,b,amp, gauss:c,w,amp or file:PATH"
            ))),
        }
    }
}

impl Serialize for ProfileSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProfileSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which penalty the local solver applies to `c - c_ref`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    SquaredH1,
    SmoothedH1,
}

/// Every tunable of one experiment. Defaults are the published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: ProfileSpec,
    /// Left end of the simulation domain; also the source position.
    pub x_left: f64,
    pub x_right: f64,
    pub b: f64,
    pub dx: f64,
    pub dt: f64,
    pub t_final: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub ds: f64,
    pub order: usize,
    pub lambda: f64,
    pub h: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub noise_level: f64,
    pub seed: u64,
    /// Fourier bins kept when denoising noisy traces.
    pub denoise_keep: usize,
    pub global_max_iter: usize,
    pub local_max_iter: usize,
    pub regularizer: RegularizerKind,
    /// Smoothing of the plain-norm regularizer.
    pub regularizer_delta: f64,
    /// A-priori bounds `c0 ≤ c ≤ 1 + d` used to make `c_glob` admissible.
    pub c_lower: f64,
    pub c_upper: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: ProfileSpec::Example(1),
            x_left: -0.2,
            x_right: 0.5,
            b: 0.4,
            dx: 0.005,
            dt: 0.001,
            t_final: 2.0,
            s_min: 4.0,
            s_max: 15.0,
            ds: 0.05,
            order: 11,
            lambda: 3.0,
            h: 0.025,
            alpha: 0.001,
            epsilon: 0.2,
            noise_level: 0.1,
            seed: 2013,
            denoise_keep: 60,
            global_max_iter: 2000,
            local_max_iter: 2000,
            regularizer: RegularizerKind::SquaredH1,
            regularizer_delta: 1e-3,
            c_lower: 0.25,
            c_upper: 16.0,
        }
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn for_profile(profile: ProfileSpec) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CipError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CipError::Config(e.to_string()))
    }

    /// Override one key, e.g. `set("lambda", "5")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table =
            toml::Table::try_from(&*self).map_err(|e| CipError::Config(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(CipError::Config(format!("unknown config key `{key}`")));
        }
        let mut v = parse_toml_value(value);
        // integers given for float keys and numbers given for string keys
        match (&table[key], &v) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => v = toml::Value::Float(*i as f64),
            (toml::Value::String(_), toml::Value::Integer(_) | toml::Value::Float(_)) => {
                v = toml::Value::String(value.to_string())
            }
            _ => {}
        }
        table.insert(key.to_string(), v);
        let updated: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| CipError::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dx", self.dx),
            ("dt", self.dt),
            ("t_final", self.t_final),
            ("ds", self.ds),
            ("h", self.h),
            ("epsilon", self.epsilon),
            ("regularizer_delta", self.regularizer_delta),
            ("c_lower", self.c_lower),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(CipError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("noise_level", self.noise_level),
        ] {
            if !(v >= 0.0) {
                return Err(CipError::Config(format!(
                    "{k} must be nonnegative, got {v}"
                )));
            }
        }
        if !(self.x_left < 0.0 && 0.0 < self.b && self.b < self.x_right) {
            return Err(CipError::Config("need x_left < 0 < b < x_right".into()));
        }
        if !(self.s_min > 0.0 && self.s_max > self.s_min) {
            return Err(CipError::Config("need 0 < s_min < s_max".into()));
        }
        if self.order == 0 {
            return Err(CipError::Config("order must be at least 1".into()));
        }
        if !(self.c_upper > 1.0 && self.c_lower < 1.0) {
            return Err(CipError::Config("need c_lower < 1 < c_upper".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(self.x_left, self.x_right, self.dx, self.t_final, self.dt)
    }

    pub fn sgrid(&self) -> Result<PseudoFrequencyGrid> {
        PseudoFrequencyGrid::new(self.s_min, self.s_max, self.ds)
    }

    pub fn basis(&self) -> Result<LaguerreBasis> {
        LaguerreBasis::new(self.order, self.s_min)
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig::standard(self.s_min)
    }

    pub fn incident(&self) -> IncidentWave {
        IncidentWave::new(Waveform::default(), self.x_left)
    }

    pub fn misfit_config(&self) -> Result<MisfitConfig> {
        let mut m = MisfitConfig::new(
            self.alpha,
            self.grid()?.right_half(),
            self.epsilon,
            self.local_max_iter,
        )?;
        m.incident = self.incident();
        m.regularizer = match self.regularizer {
            RegularizerKind::SquaredH1 => Regularizer::SquaredH1,
            RegularizerKind::SmoothedH1 => Regularizer::SmoothedH1 {
                delta: self.regularizer_delta,
            },
        };
        Ok(m)
    }

    fn global_lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.global_max_iter,
            ..LbfgsConfig::default()
        }
    }
}

fn in_closed(x: f64, a: f64, b: f64) -> bool {
    const TOL: f64 = 1e-9;
    x >= a - TOL && x <= b + TOL
}

/// The four published coefficients sampled on `grid`.
pub fn builtin_profile(example: u8, grid: &SpaceTimeGrid, b: f64) -> Result<CoefficientProfile> {
    let f: Box<dyn Fn(f64) -> f64> = match example {
        1 => Box::new(|x| if in_closed(x, 0.03, 0.1) { 4.0 } else { 1.0 }),
        2 => Box::new(|x| if in_closed(x, 0.03, 0.1) { 15.0 } else { 1.0 }),
        3 => Box::new(|x| if in_closed(x, 0.03, 0.15) { 0.5 } else { 1.0 }),
        4 => Box::new(|x: f64| 1.0 + 3.0 * (-(x - 0.1).powi(2) / 0.04f64.powi(2)).exp()),
        _ => {
            return Err(CipError::Argument(format!(
                "unknown example {example}; expected 1..4"
            )))
        }
    };
    CoefficientProfile::from_fn(grid, b, f)
}

pub fn profile_from_spec(
    spec: &ProfileSpec,
    grid: &SpaceTimeGrid,
    b: f64,
) -> Result<CoefficientProfile> {
    match spec {
        ProfileSpec::Example(n) => builtin_profile(*n, grid, b),
        ProfileSpec::Homogeneous => Ok(CoefficientProfile::homogeneous(grid, b)),
        ProfileSpec::Step { a, b: e, amplitude } => CoefficientProfile::from_fn(grid, b, |x| {
            if in_closed(x, *a, *e) {
                1.0 + amplitude
            } else {
                1.0
            }
        }),
        ProfileSpec::Gaussian {
            center,
            width,
            amplitude,
        } => CoefficientProfile::from_fn(grid, b, |x| {
            1.0 + amplitude * (-((x - center) / width).powi(2)).exp()
        }),
        ProfileSpec::File(path) => {
            let (xs, cs) = read_profile_csv(path)?;
            CoefficientProfile::interpolate_from(grid, b, &xs, &cs)
        }
    }
}

/// Read a two-column `x, c` CSV.
pub fn read_profile_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (header, rows, _) = read_csv(path)?;
    let cx = header.iter().position(|h| h == "x");
    let cc = header.iter().position(|h| h == "c");
    let (cx, cc) = match (cx, cc) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(CipError::Data(format!(
                "{}: need columns x and c",
                path.display()
            )))
        }
    };
    Ok(rows.iter().map(|r| (r[cx], r[cc])).unzip())
}

pub fn write_profile_csv(path: &Path, c: &CoefficientProfile) -> Result<()> {
    write_csv(
        path,
        None,
        &["x", "c"],
        (0..c.len()).map(|i| vec![c.x(i), c.values()[i]]),
    )
}

/// Relative L2, sup-norm and inclusion-support agreement of an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub relative_l2: f64,
    pub sup: f64,
    pub jaccard: f64,
}

pub fn metrics(
    est: &CoefficientProfile,
    truth: &CoefficientProfile,
    threshold: f64,
) -> Result<Metrics> {
    if est.len() != truth.len()
        || (est.dx() - truth.dx()).abs() > 1e-12
        || (est.x_left() - truth.x_left()).abs() > 1e-12
    {
        return Err(CipError::Argument(
            "profiles live on different grids".into(),
        ));
    }
    let (mut num, mut den, mut sup) = (0.0, 0.0, 0.0f64);
    let (mut both, mut either) = (0usize, 0usize);
    for (e, t) in est.values().iter().zip(truth.values()) {
        num += (e - t).powi(2);
        den += t * t;
        sup = sup.max((e - t).abs());
        let (ie, it) = ((e - 1.0).abs() > threshold, (t - 1.0).abs() > threshold);
        both += (ie && it) as usize;
        either += (ie || it) as usize;
    }
    Ok(Metrics {
        relative_l2: (num / den).sqrt(),
        sup,
        jaccard: if either == 0 {
            1.0
        } else {
            both as f64 / either as f64
        },
    })
}

/// Synthetic measurements for one configuration.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: CoefficientProfile,
    pub clean: TimeTraces,
    pub measured: TimeTraces,
    pub meta: TraceMetadata,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let grid = cfg.grid()?;
    let truth = profile_from_spec(&cfg.profile, &grid, cfg.b)?;
    let incident = cfg.incident();
    let field = solve_scattered(&truth, &grid, &incident)?;
    let clean = extract_traces(&field, &incident);
    let measured = if cfg.noise_level > 0.0 {
        add_noise(&clean, cfg.noise_level, cfg.seed)?
    } else {
        clean.clone()
    };
    let meta = TraceMetadata {
        dx: cfg.dx,
        dt: cfg.dt,
        t_final: cfg.t_final,
        seed: cfg.seed,
        noise_level: cfg.noise_level,
    };
    Ok(Simulation {
        truth,
        clean,
        measured,
        meta,
    })
}

/// Fourier-truncated copy of the traces when they carry noise.
pub fn preprocess(traces: &TimeTraces, noise_level: f64, keep: usize) -> Result<TimeTraces> {
    if noise_level > 0.0 {
        Ok(TimeTraces {
            p1: fourier_denoise(&traces.p1, keep)?,
            p2: fourier_denoise(&traces.p2, keep)?,
            dt: traces.dt,
        })
    } else {
        Ok(traces.clone())
    }
}

/// Tensor from `cache` when it matches the configuration, else computed (and
/// written to `cache` if a path was given).
pub fn load_or_compute_tensor(
    cfg: &ExperimentConfig,
    cache: Option<&Path>,
    exec: Execution,
) -> Result<InteractionTensor> {
    let basis = cfg.basis()?;
    let quad = cfg.quadrature();
    if let Some(path) = cache {
        if path.exists() {
            return read_tensor_cache(path, &basis, &quad);
        }
    }
    let tensor = compute_interaction_tensor(&basis, &quad, exec)?;
    if let Some(path) = cache {
        write_tensor_cache(path, &tensor, &basis, &quad)?;
    }
    Ok(tensor)
}

/// Step 1 products.
#[derive(Debug, Clone)]
pub struct GlobalOutcome {
    pub qgrid: QGrid,
    pub report: OptimReport,
    pub recovered: RecoveredCoefficient,
    /// `c_glob` on the simulation grid after projection onto `[c_lower, c_upper]`.
    pub c_glob: CoefficientProfile,
    /// Number of `h`-grid nodes moved by the projection.
    pub clamped: usize,
    pub warnings: Vec<String>,
}

pub fn global_stage(
    cfg: &ExperimentConfig,
    traces: &TimeTraces,
    tensor: &InteractionTensor,
    out: Option<&Path>,
    exec: Execution,
) -> Result<GlobalOutcome> {
    let grid = cfg.grid()?;
    let sgrid = cfg.sgrid()?;
    let basis = cfg.basis()?;
    let incident = cfg.incident();
    let mut warnings = Vec::new();
    if let Some(w) = truncation_warning(cfg.t_final, cfg.s_min) {
        warnings.push(w);
    }
    let transformed = boundary_from_traces(traces, &incident.waveform, &basis, &sgrid, exec)
        .map_err(|e| e.in_stage("transform"))?;
    if let Some(dir) = out {
        write_spectral_csv(
            &dir.join("spectral.csv"),
            &sgrid,
            &transformed.spectral,
            &transformed.vq,
        )?;
        transformed
            .boundary
            .write_json(&dir.join("boundary.json"))?;
    }
    let stage = |e: CipError| e.in_stage("global");
    let intervals = intervals_for(cfg.b, cfg.h).map_err(stage)?;
    let weight = CarlemanWeight::new(cfg.lambda).map_err(stage)?;
    let (qgrid, report) = minimize(
        &transformed.boundary,
        tensor,
        &weight,
        intervals,
        cfg.h,
        &cfg.global_lbfgs(),
    )
    .map_err(stage)?;
    let recovered = recover_c(&qgrid, &basis, &sgrid).map_err(stage)?;
    let mut clamped = 0;
    let cs: Vec<f64> = recovered
        .c
        .iter()
        .map(|&c| {
            let v = c.clamp(cfg.c_lower, cfg.c_upper);
            clamped += (v != c) as usize;
            v
        })
        .collect();
    if clamped > 0 {
        warnings.push(format!(
            "c_glob left [{}, {}] at {clamped} of {} nodes; projected onto the bounds",
            cfg.c_lower,
            cfg.c_upper,
            cs.len()
        ));
    }
    if report.stop != StopReason::GradientTolerance {
        warnings.push(format!("global minimization stopped: {:?}", report.stop));
    }
    let c_glob =
        CoefficientProfile::interpolate_from(&grid, cfg.b, &recovered.x, &cs).map_err(stage)?;
    if let Some(dir) = out {
        let n = qgrid.order();
        let mut header = vec!["x".to_string()];
        header.extend((0..n).map(|j| format!("q{j}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &dir.join("qgrid.csv"),
            None,
            &header,
            (0..=qgrid.intervals()).map(|i| {
                let mut row = vec![qgrid.x(i)];
                row.extend_from_slice(qgrid.row(i));
                row
            }),
        )?;
        write_csv(
            &dir.join("c_glob_h.csv"),
            None,
            &["x", "c", "spread"],
            (0..recovered.x.len())
                .map(|i| vec![recovered.x[i], recovered.c[i], recovered.spread[i]]),
        )?;
        write_json(&dir.join("global_convergence.json"), &report)?;
    }
    Ok(GlobalOutcome {
        qgrid,
        report,
        recovered,
        c_glob,
        clamped,
        warnings,
    })
}

/// Steps 2 and 3 products on the full simulation grid.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub c_local1: CoefficientProfile,
    pub report1: LocalReport,
    pub c_local2: CoefficientProfile,
    pub reduction: Reduction,
    pub report2: LocalReport,
}

pub fn local_stages(
    cfg: &ExperimentConfig,
    traces: &TimeTraces,
    c_init: &CoefficientProfile,
    c_ref: &CoefficientProfile,
    out: Option<&Path>,
) -> Result<LocalOutcome> {
    let mcfg = cfg.misfit_config()?;
    let (c1, report1) = minimize_local(&c_init.right_half(), traces, &c_ref.right_half(), &mcfg)
        .map_err(|e| e.in_stage("local step 2"))?;
    let c_local1 = c_init.with_right_half(&c1)?;
    if let Some(dir) = out {
        write_json(&dir.join("local1_convergence.json"), &report1)?;
    }
    let (c2, reduction, report2) = step3_refine(&c1, traces, &c_ref.right_half(), &mcfg)
        .map_err(|e| e.in_stage("local step 3"))?;
    let c_local2 = c_init.with_right_half(&c2)?;
    if let Some(dir) = out {
        write_json(&dir.join("local2_convergence.json"), &report2)?;
    }
    Ok(LocalOutcome {
        c_local1,
        report1,
        c_local2,
        reduction,
        report2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Hybrid,
    LocalOnly,
}

/// Convergence digest of one minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
    pub monotone: bool,
}

impl From<&OptimReport> for ConvergenceSummary {
    fn from(r: &OptimReport) -> Self {
        Self {
            iterations: r.iterations,
            evaluations: r.evaluations,
            stop: r.stop,
            initial_objective: r.objective.first().copied().unwrap_or(f64::NAN),
            final_objective: r.final_objective(),
            final_gradient_norm: r.final_gradient_norm,
            monotone: r.is_monotone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub convergence: ConvergenceSummary,
    /// Discrete H²-type norm of the minimizer, monitored against the set radius.
    pub h2_norm: f64,
    /// Largest per-node spread of `c(x; s)` over the pseudofrequency grid.
    pub max_spread: f64,
    pub clamped_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub c_glob: Option<Metrics>,
    pub c_local1: Metrics,
    pub c_local2: Metrics,
}

/// Everything a run produces except wall-clock timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub config: ExperimentConfig,
    pub x: Vec<f64>,
    pub c_true: Vec<f64>,
    pub c_glob: Option<Vec<f64>>,
    pub c_local1: Vec<f64>,
    pub c_local2: Vec<f64>,
    pub metrics: StageMetrics,
    pub global: Option<GlobalSummary>,
    pub local1: ConvergenceSummary,
    pub local2: ConvergenceSummary,
    pub b1: f64,
    pub b1_flagged: bool,
    pub warnings: Vec<String>,
    /// Any line-search failure in any stage.
    pub flagged: bool,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        let empty = vec![f64::NAN; self.x.len()];
        let glob = self.c_glob.as_ref().unwrap_or(&empty);
        write_csv(
            &dir.join("profiles.csv"),
            None,
            &["x", "c_true", "c_glob", "c_local1", "c_local2"],
            (0..self.x.len()).map(|i| {
                vec![
                    self.x[i],
                    self.c_true[i],
                    glob[i],
                    self.c_local1[i],
                    self.c_local2[i],
                ]
            }),
        )
    }
}

/// Wall-clock seconds per stage, kept out of the report.
#[derive(Debug, Default, Clone, Serialize)]
pub struct Timings(BTreeMap<String, f64>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.0
            .insert(stage.to_string(), start.elapsed().as_secs_f64());
        v
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.0.get(stage).copied()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

/// Options that affect how, not what, a run computes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub tensor_cache: Option<PathBuf>,
    pub exec: Execution,
}

fn prepare_out(opts: &RunOptions) -> Result<Option<&Path>> {
    if let Some(dir) = &opts.out {
        std::fs::create_dir_all(dir)?;
    }
    Ok(opts.out.as_deref())
}

fn finish(
    mode: RunMode,
    cfg: &ExperimentConfig,
    sim: &Simulation,
    global: Option<&GlobalOutcome>,
    local: &LocalOutcome,
    mut warnings: Vec<String>,
) -> Result<RunReport> {
    let truth = &sim.truth;
    let m = |c: &CoefficientProfile| metrics(c, truth, cfg.epsilon);
    for r in [&local.report1, &local.report2] {
        warnings.extend(r.warnings.iter().cloned());
    }
    if local.reduction.flagged {
        warnings.push("step 3 found no support reduction; b1 = b".into());
    }
    let flagged = global.is_some_and(|g| g.report.flagged())
        || local.report1.flagged()
        || local.report2.flagged();
    Ok(RunReport {
        mode,
        config: cfg.clone(),
        x: (0..truth.len()).map(|i| truth.x(i)).collect(),
        c_true: truth.values().to_vec(),
        c_glob: global.map(|g| g.c_glob.values().to_vec()),
        c_local1: local.c_local1.values().to_vec(),
        c_local2: local.c_local2.values().to_vec(),
        metrics: StageMetrics {
            c_glob: global.map(|g| m(&g.c_glob)).transpose()?,
            c_local1: m(&local.c_local1)?,
            c_local2: m(&local.c_local2)?,
        },
        global: global.map(|g| GlobalSummary {
            convergence: (&g.report).into(),
            h2_norm: g.qgrid.h2_norm(),
            max_spread: g.recovered.max_spread(),
            clamped_nodes: g.clamped,
        }),
        local1: (&local.report1.optim).into(),
        local2: (&local.report2.optim).into(),
        b1: local.reduction.b1,
        b1_flagged: local.reduction.flagged,
        warnings,
        flagged,
    })
}

fn persist_inputs(dir: Option<&Path>, cfg: &ExperimentConfig, sim: &Simulation) -> Result<()> {
    if let Some(dir) = dir {
        crate::io::write_atomic(&dir.join("config.toml"), |w| {
            use std::io::Write;
            w.write_all(
                cfg.to_toml_string()
                    .map_err(std::io::Error::other)?
                    .as_bytes(),
            )
        })?;
        write_traces(&dir.join("traces"), &sim.measured, &sim.meta)?;
        write_profile_csv(&dir.join("c_true.csv"), &sim.truth)?;
    }
    Ok(())
}

/// Steps 1 to 3 on simulated data.
pub fn run_hybrid(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    let out = prepare_out(opts)?;
    let mut t = Timings::default();
    let sim = t
        .time("simulate", || simulate(cfg))
        .map_err(|e| e.in_stage("simulate"))?;
    persist_inputs(out, cfg, &sim)?;
    let data = preprocess(&sim.measured, cfg.noise_level, cfg.denoise_keep)
        .map_err(|e| e.in_stage("denoise"))?;
    let tensor = t
        .time("tensor", || {
            load_or_compute_tensor(cfg, opts.tensor_cache.as_deref(), opts.exec)
        })
        .map_err(|e| e.in_stage("tensor"))?;
    let global = t.time("global", || {
        global_stage(cfg, &data, &tensor, out, opts.exec)
    })?;
    let local = t.time("local", || {
        local_stages(cfg, &data, &global.c_glob, &global.c_glob, out)
    })?;
    let report = finish(
        RunMode::Hybrid,
        cfg,
        &sim,
        Some(&global),
        &local,
        global.warnings.clone(),
    )?;
    if let Some(dir) = out {
        report.write(dir)?;
        write_json(&dir.join("timings.json"), &t)?;
    }
    Ok((report, t))
}

/// Steps 2 and 3 from the homogeneous first guess, regularized toward it.
pub fn run_local_only(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    let out = prepare_out(opts)?;
    let mut t = Timings::default();
    let sim = t
        .time("simulate", || simulate(cfg))
        .map_err(|e| e.in_stage("simulate"))?;
    persist_inputs(out, cfg, &sim)?;
    let data = preprocess(&sim.measured, cfg.noise_level, cfg.denoise_keep)
        .map_err(|e| e.in_stage("denoise"))?;
    let start = CoefficientProfile::homogeneous(&cfg.grid()?, cfg.b);
    let local = t.time("local", || local_stages(cfg, &data, &start, &start, out))?;
    let report = finish(RunMode::LocalOnly, cfg, &sim, None, &local, Vec::new())?;
    if let Some(dir) = out {
        report.write(dir)?;
        write_json(&dir.join("timings.json"), &t)?;
    }
    Ok((report, t))
}

/// Hybrid and local-only runs side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub hybrid: RunReport,
    pub local_only: RunReport,
    /// Final hybrid relative L2 error over the local-only one.
    pub error_ratio: f64,
}

pub fn compare(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<(Comparison, Timings, Timings)> {
    let sub = |name: &str| RunOptions {
        out: opts.out.as_ref().map(|d| d.join(name)),
        ..opts.clone()
    };
    let (h_opts, l_opts) = (sub("hybrid"), sub("local_only"));
    let (h, l) = join(
        opts.exec,
        || run_hybrid(cfg, &h_opts),
        || run_local_only(cfg, &l_opts),
    );
    let ((hybrid, th), (local_only, tl)) = (h?, l?);
    let error_ratio = hybrid.metrics.c_local2.relative_l2 / local_only.metrics.c_local2.relative_l2;
    let cmp = Comparison {
        hybrid,
        local_only,
        error_ratio,
    };
    if let Some(dir) = &opts.out {
        write_json(&dir.join("comparison.json"), &cmp)?;
    }
    Ok((cmp, th, tl))
}

/// Step 1 alone on measured traces read from disk.
pub fn invert_global_from_dir(
    cfg: &ExperimentConfig,
    traces_dir: &Path,
    opts: &RunOptions,
) -> Result<GlobalOutcome> {
    let (traces, meta) = read_traces(traces_dir).map_err(|e| e.in_stage("read traces"))?;
    let out = prepare_out(opts)?;
    let data = preprocess(&traces, meta.noise_level, cfg.denoise_keep)?;
    let tensor = load_or_compute_tensor(cfg, opts.tensor_cache.as_deref(), opts.exec)
        .map_err(|e| e.in_stage("tensor"))?;
    let g = global_stage(cfg, &data, &tensor, out, opts.exec)?;
    if let Some(dir) = out {
        write_profile_csv(&dir.join("c_glob.csv"), &g.c_glob)?;
    }
    Ok(g)
}

/// Steps 2 and 3 on traces from disk, starting from (and regularized toward) `init`.
pub fn invert_local_from_dir(
    cfg: &ExperimentConfig,
    traces_dir: &Path,
    init: Option<&Path>,
    opts: &RunOptions,
) -> Result<LocalOutcome> {
    let (traces, meta) = read_traces(traces_dir).map_err(|e| e.in_stage("read traces"))?;
    let out = prepare_out(opts)?;
    let data = preprocess(&traces, meta.noise_level, cfg.denoise_keep)?;
    let grid = cfg.grid()?;
    let start = match init {
        Some(p) => {
            let (xs, cs) = read_profile_csv(p)?;
            CoefficientProfile::interpolate_from(&grid, cfg.b, &xs, &cs)?
        }
        None => CoefficientProfile::homogeneous(&grid, cfg.b),
    };
    let local = local_stages(cfg, &data, &start, &start, out)?;
    if let Some(dir) = out {
        write_profile_csv(&dir.join("c_local1.csv"), &local.c_local1)?;
        write_profile_csv(&dir.join("c_local2.csv"), &local.c_local2)?;
        write_json(&dir.join("reduction.json"), &local.reduction)?;
    }
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_specs_round_trip_through_display() {
        for s in [
            "example:3",
            "homogeneous",
            "step:0.03,0.1,3",
            "gauss:0.1,0.04,3",
            "file:/tmp/c.csv",
        ] {
            let spec: ProfileSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        for bad in [
            "example:5",
            "example:x",
            "step:1,2",
            "gauss:a,b,c",
            "file:",
            "spline",
        ] {
            assert!(bad.parse::<ProfileSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::for_profile(ProfileSpec::Example(4));
        cfg.regularizer = RegularizerKind::SmoothedH1;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
        assert!(ExperimentConfig::from_toml_str("lamda = 3.0").is_err());
        assert!(ExperimentConfig::from_toml_str("dx = -1.0").is_err());
    }

    #[test]
    fn set_coerces_and_validates() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lambda", "5").unwrap();
        assert_eq!(cfg.lambda, 5.0);
        cfg.set("order", "7").unwrap();
        assert_eq!(cfg.order, 7);
        cfg.set("profile", "step:0.1,0.2,1").unwrap();
        assert_eq!(
            cfg.profile,
            ProfileSpec::Step {
                a: 0.1,
                b: 0.2,
                amplitude: 1.0
            }
        );
        cfg.set("regularizer", "smoothed_h1").unwrap();
        assert_eq!(cfg.regularizer, RegularizerKind::SmoothedH1);
        let before = cfg.clone();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("b", "0.6").is_err());
        assert!(cfg.set("order", "1.5").is_err());
        assert_eq!(cfg, before);
    }

    #[test]
    fn builtin_examples_include_interval_ends() {
        let cfg = ExperimentConfig::default();
        let grid = cfg.grid().unwrap();
        let c1 = builtin_profile(1, &grid, cfg.b).unwrap();
        let at = |c: &CoefficientProfile, x: f64| c.values()[grid.node_index(x).unwrap()];
        assert_eq!(at(&c1, 0.03), 4.0);
        assert_eq!(at(&c1, 0.1), 4.0);
        assert_eq!(at(&c1, 0.105), 1.0);
        assert_eq!(c1.values().iter().filter(|&&v| v == 4.0).count(), 15);
        assert_eq!(at(&builtin_profile(2, &grid, cfg.b).unwrap(), 0.05), 15.0);
        assert_eq!(at(&builtin_profile(3, &grid, cfg.b).unwrap(), 0.15), 0.5);
        let c4 = builtin_profile(4, &grid, cfg.b).unwrap();
        assert!((c4.max() - 4.0).abs() < 1e-12);
        assert!(builtin_profile(0, &grid, cfg.b).is_err());
    }

    #[test]
    fn metrics_of_known_profiles() {
        let cfg = ExperimentConfig::default();
        let grid = cfg.grid().unwrap();
        let truth = builtin_profile(1, &grid, cfg.b).unwrap();
        let exact = metrics(&truth, &truth, 0.2).unwrap();
        assert_eq!(
            exact,
            Metrics {
                relative_l2: 0.0,
                sup: 0.0,
                jaccard: 1.0
            }
        );

        let flat = CoefficientProfile::homogeneous(&grid, cfg.b);
        let m = metrics(&flat, &truth, 0.2).unwrap();
        // 15 nodes at 4 against 126 nodes at 1
        let expected = (15.0 * 9.0 / (15.0 * 16.0 + 126.0f64)).sqrt();
        assert!((m.relative_l2 - expected).abs() < 1e-12);
        assert_eq!(m.sup, 3.0);
        assert_eq!(m.jaccard, 0.0);
        assert_eq!(metrics(&flat, &flat, 0.2).unwrap().jaccard, 1.0);
    }

    #[test]
    fn profile_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let grid = cfg.grid().unwrap();
        let c = builtin_profile(4, &grid, cfg.b).unwrap();
        let path = dir.path().join("c.csv");
        write_profile_csv(&path, &c).unwrap();
        let back = profile_from_spec(&ProfileSpec::File(path), &grid, cfg.b).unwrap();
        for (a, b) in back.values().iter().zip(c.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let cfg = ExperimentConfig {
            denoise_keep: 20,
            ..ExperimentConfig::default()
        };
        let err = run_hybrid(&cfg, &RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("transform"), "{err}");
    }
}
