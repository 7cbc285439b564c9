//! Time traces to pseudofrequency boundary data.
//!
//! `w = L[u] / L[f]`, `v = ln(w) / s²`, `q = ∂v/∂s`. The boundary values of
//! `q` and `q_x` at `x = 0`, together with the out-going Neumann datum at
//! `x = b`, are projected onto the Laguerre basis.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::basis::{LaguerreBasis, PseudoFrequencyGrid};
use crate::error::{CipError, Result};
use crate::forward::{TimeTraces, Waveform};
use crate::io::{write_csv, write_json};
use crate::parallel::{map_indices, Execution};

/// Smallest `T · s_min` for which the truncated tail `e^{-sT}` is negligible.
pub const MIN_TRUNCATION_PRODUCT: f64 = 8.0;

/// Composite-trapezoid `∫_0^T g(t) e^{-st} dt` at every grid node.
pub fn laplace_transform(
    series: &[f64],
    dt: f64,
    grid: &PseudoFrequencyGrid,
    exec: Execution,
) -> Result<Vec<f64>> {
    if series.len() < 2 || !(dt > 0.0) {
        return Err(CipError::Argument(
            "Laplace transform needs at least two samples and dt > 0".into(),
        ));
    }
    let last = series.len() - 1;
    Ok(map_indices(grid.len(), exec, |k| {
        let s = grid.node(k);
        // e^{-s t_n} by repeated multiplication drifts; evaluate directly
        let mut acc = 0.0;
        for (n, &g) in series.iter().enumerate() {
            let w = if n == 0 || n == last { 0.5 } else { 1.0 };
            acc += w * g * (-s * n as f64 * dt).exp();
        }
        acc * dt
    }))
}

/// Diagnostic when `T · s_min` is too small for the truncated transform.
pub fn truncation_warning(t_final: f64, s_min: f64) -> Option<String> {
    let prod = t_final * s_min;
    (prod < MIN_TRUNCATION_PRODUCT).then(|| {
        format!(
            "T * s_min = {prod:.3} < {MIN_TRUNCATION_PRODUCT}; Laplace truncation error e^(-sT) is not negligible"
        )
    })
}

/// Low-pass filter: keep DFT bins `0..=keep` and their mirrors, zero the rest.
pub fn fourier_denoise(series: &[f64], keep: usize) -> Result<Vec<f64>> {
    let len = series.len();
    if keep == 0 {
        return Err(CipError::Argument("keep must be at least 1".into()));
    }
    if keep > len {
        return Err(CipError::Argument(format!(
            "keep = {keep} exceeds series length {len}"
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        if k > keep && k < len - keep.min(len) {
            *z = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let scale = 1.0 / len as f64;
    Ok(buf.iter().map(|z| z.re * scale).collect())
}

/// Laplace-domain data at `x = 0` sampled on the pseudofrequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTraces {
    /// `w(0, s) = L[p1] / L[f]`.
    pub w0s: Vec<f64>,
    /// `w_x(0, s) = L[p2] / L[f]`.
    pub wx0s: Vec<f64>,
    /// `L[f](s)`.
    pub fs: Vec<f64>,
}

pub fn spectral_traces(
    traces: &TimeTraces,
    waveform: &Waveform,
    grid: &PseudoFrequencyGrid,
    exec: Execution,
) -> Result<SpectralTraces> {
    let source: Vec<f64> = (0..traces.len())
        .map(|n| waveform.value(n as f64 * traces.dt))
        .collect();
    let fs = laplace_transform(&source, traces.dt, grid, exec)?;
    if let Some(k) = fs.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(CipError::Data(format!(
            "Laplace transform of the source vanishes at s = {}",
            grid.node(k)
        )));
    }
    let l1 = laplace_transform(&traces.p1, traces.dt, grid, exec)?;
    let l2 = laplace_transform(&traces.p2, traces.dt, grid, exec)?;
    Ok(SpectralTraces {
        w0s: l1.iter().zip(&fs).map(|(a, f)| a / f).collect(),
        wx0s: l2.iter().zip(&fs).map(|(a, f)| a / f).collect(),
        fs,
    })
}

/// `v`, `v_x` at `x = 0` and their `s`-derivatives `φ = q(0, s)`, `ψ = q_x(0, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqBoundary {
    pub v: Vec<f64>,
    pub vx: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Second-order `d/ds` on a uniform grid (one-sided three-point at the ends).
pub fn differentiate_uniform(values: &[f64], step: f64) -> Vec<f64> {
    let n = values.len();
    assert!(n >= 3, "need at least three samples to differentiate");
    let mut d = vec![0.0; n];
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * step);
    d[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * step);
    for i in 1..n - 1 {
        d[i] = (values[i + 1] - values[i - 1]) / (2.0 * step);
    }
    d
}

pub fn compute_vq_boundary(
    spectral: &SpectralTraces,
    grid: &PseudoFrequencyGrid,
) -> Result<VqBoundary> {
    if spectral.w0s.len() != grid.len() || spectral.wx0s.len() != grid.len() {
        return Err(CipError::Argument(
            "spectral samples do not match the grid".into(),
        ));
    }
    if grid.len() < 3 {
        return Err(CipError::Config(
            "pseudofrequency grid needs at least 3 nodes".into(),
        ));
    }
    if let Some(k) = spectral.w0s.iter().position(|&w| !(w > 0.0)) {
        return Err(CipError::Data(format!(
            "w(0, s) = {} is not positive at s = {}",
            spectral.w0s[k],
            grid.node(k)
        )));
    }
    let (v, vx): (Vec<f64>, Vec<f64>) = (0..grid.len())
        .map(|k| {
            let s = grid.node(k);
            let (w, wx) = (spectral.w0s[k], spectral.wx0s[k]);
            (w.ln() / (s * s), wx / (s * s * w))
        })
        .unzip();
    let phi = differentiate_uniform(&v, grid.step());
    let psi = differentiate_uniform(&vx, grid.step());
    Ok(VqBoundary { v, vx, phi, psi })
}

/// Out-going wave at `x = b`: `v_x = -1/s`, so `q_x(b, s) = 1/s²`.
pub fn neumann_at_b(grid: &PseudoFrequencyGrid) -> Vec<f64> {
    grid.nodes().iter().map(|s| 1.0 / (s * s)).collect()
}

/// Laguerre coefficients of the boundary data `Q(0) = Φ0`, `Q'(0) = Ψ0`, `Q'(b) = Ψb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBoundaryData {
    pub order: usize,
    pub s_min: f64,
    pub phi0: Vec<f64>,
    pub psi0: Vec<f64>,
    pub psib: Vec<f64>,
}

impl SpectralBoundaryData {
    pub fn zeros(order: usize, s_min: f64) -> Self {
        Self {
            order,
            s_min,
            phi0: vec![0.0; order],
            psi0: vec![0.0; order],
            psib: vec![0.0; order],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phi0", &self.phi0),
            ("psi0", &self.psi0),
            ("psib", &self.psib),
        ] {
            if v.len() != self.order {
                return Err(CipError::Argument(format!(
                    "{name} has {} entries, expected {}",
                    v.len(),
                    self.order
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CipError::Data(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let data: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        data.validate()?;
        Ok(data)
    }
}

pub fn project_boundary(
    basis: &LaguerreBasis,
    grid: &PseudoFrequencyGrid,
    phi: &[f64],
    psi: &[f64],
    psib: &[f64],
) -> Result<SpectralBoundaryData> {
    let data = SpectralBoundaryData {
        order: basis.order(),
        s_min: basis.s_min(),
        phi0: basis.project(grid, phi)?,
        psi0: basis.project(grid, psi)?,
        psib: basis.project(grid, psib)?,
    };
    data.validate()?;
    Ok(data)
}

/// Everything produced by [`boundary_from_traces`], kept for diagnostics.
#[derive(Debug, Clone)]
pub struct TransformOutput {
    pub spectral: SpectralTraces,
    pub vq: VqBoundary,
    pub psib_samples: Vec<f64>,
    pub boundary: SpectralBoundaryData,
}

/// Traces to projected boundary data in one call.
pub fn boundary_from_traces(
    traces: &TimeTraces,
    waveform: &Waveform,
    basis: &LaguerreBasis,
    grid: &PseudoFrequencyGrid,
    exec: Execution,
) -> Result<TransformOutput> {
    let spectral = spectral_traces(traces, waveform, grid, exec)?;
    let vq = compute_vq_boundary(&spectral, grid)?;
    let psib_samples = neumann_at_b(grid);
    let boundary = project_boundary(basis, grid, &vq.phi, &vq.psi, &psib_samples)?;
    Ok(TransformOutput {
        spectral,
        vq,
        psib_samples,
        boundary,
    })
}

/// Diagnostic export with columns `s, w, w_x, v, v_x, phi, psi`.
pub fn write_spectral_csv(
    path: &Path,
    grid: &PseudoFrequencyGrid,
    spectral: &SpectralTraces,
    vq: &VqBoundary,
) -> Result<()> {
    let rows = (0..grid.len()).map(|k| {
        vec![
            grid.node(k),
            spectral.w0s[k],
            spectral.wx0s[k],
            vq.v[k],
            vq.vx[k],
            vq.phi[k],
            vq.psi[k],
        ]
    });
    write_csv(
        path,
        None,
        &["s", "w", "w_x", "v", "v_x", "phi", "psi"],
        rows,
    )
}
