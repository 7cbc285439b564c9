//! Step 1: Carleman-weighted least squares for the Laguerre coefficients of `q`.
//!
//! The unknown `Q_h = {q_j^i}` lives on `x_i = i h`, `i = 0..M`, `h M = b`. Rows
//! `i = 0, 1, M` are eliminated through the boundary data:
//! `q^0 = Φ0`, `q^1 = q^0 + h Ψ0`, `q^M = q^{M-1} + h Ψb`.

use serde::{Deserialize, Serialize};

use crate::basis::{InteractionTensor, LaguerreBasis, PseudoFrequencyGrid};
use crate::error::{CipError, Result};
use crate::optim::{lbfgs, LbfgsConfig, OptimReport};
use crate::transform::SpectralBoundaryData;

/// `φ_λ(x) = e^{-λ x}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanWeight {
    pub lambda: f64,
}

impl CarlemanWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(CipError::Config(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn value(&self, x: f64) -> f64 {
        (-self.lambda * x).exp()
    }
}

/// Discrete unknown `q_j^i` with its boundary rows already applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    order: usize,
    intervals: usize,
    h: f64,
    /// Row-major `(i, j)`, `(M + 1) × N`.
    values: Vec<f64>,
    boundary: SpectralBoundaryData,
}

/// Number of `h`-intervals in `(0, b)`; at least 4 so that a free row exists.
pub fn intervals_for(b: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && b > 0.0) {
        return Err(CipError::Config(format!(
            "need b > 0 and h > 0, got b={b}, h={h}"
        )));
    }
    let r = b / h;
    let m = r.round();
    if (r - m).abs() > 1e-9 * r.max(1.0) {
        return Err(CipError::Config(format!("b / h = {r} is not an integer")));
    }
    if m < 4.0 {
        return Err(CipError::Config(format!(
            "b / h = {m} gives no free unknowns; need at least 4 intervals"
        )));
    }
    Ok(m as usize)
}

impl QGrid {
    /// Build the full grid from the free rows `i = 2..M-1` (row-major, `N` per row).
    pub fn from_free(
        boundary: &SpectralBoundaryData,
        intervals: usize,
        h: f64,
        free: &[f64],
    ) -> Result<Self> {
        boundary.validate()?;
        let n = boundary.order;
        let m = intervals;
        if m < 4 {
            return Err(CipError::Config("need at least 4 intervals".into()));
        }
        if free.len() != (m - 2) * n {
            return Err(CipError::Argument(format!(
                "{} free values, expected {}",
                free.len(),
                (m - 2) * n
            )));
        }
        let mut values = vec![0.0; (m + 1) * n];
        for j in 0..n {
            values[j] = boundary.phi0[j];
            values[n + j] = boundary.phi0[j] + h * boundary.psi0[j];
        }
        values[2 * n..m * n].copy_from_slice(free);
        for j in 0..n {
            values[m * n + j] = values[(m - 1) * n + j] + h * boundary.psib[j];
        }
        Ok(Self {
            order: n,
            intervals: m,
            h,
            values,
            boundary: boundary.clone(),
        })
    }

    /// Starting guess: every free row equal to `Φ0`.
    pub fn initial(boundary: &SpectralBoundaryData, intervals: usize, h: f64) -> Result<Self> {
        let free: Vec<f64> = (2..intervals)
            .flat_map(|_| boundary.phi0.iter().copied())
            .collect();
        Self::from_free(boundary, intervals, h, &free)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn boundary(&self) -> &SpectralBoundaryData {
        &self.boundary
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// `Q(x_i)`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.order..(i + 1) * self.order]
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[i * self.order + j]
    }

    pub fn free(&self) -> &[f64] {
        &self.values[2 * self.order..self.intervals * self.order]
    }

    /// Whether the eliminated rows match the boundary data exactly.
    pub fn satisfies_boundary(&self) -> bool {
        let n = self.order;
        let m = self.intervals;
        (0..n).all(|j| {
            self.get(j, 0) == self.boundary.phi0[j]
                && self.get(j, 1) == self.boundary.phi0[j] + self.h * self.boundary.psi0[j]
                && self.get(j, m) == self.get(j, m - 1) + self.h * self.boundary.psib[j]
        })
    }

    /// Discrete `H²(0, b)`-type norm, monitored against the radius of `G₁`.
    pub fn h2_norm(&self) -> f64 {
        let (n, m, h) = (self.order, self.intervals, self.h);
        let mut acc = 0.0;
        for j in 0..n {
            for i in 0..=m {
                acc += h * self.get(j, i).powi(2);
            }
            for i in 0..m {
                acc += h * ((self.get(j, i + 1) - self.get(j, i)) / h).powi(2);
            }
            for i in 1..m {
                let d2 = (self.get(j, i + 1) - 2.0 * self.get(j, i) + self.get(j, i - 1)) / (h * h);
                acc += h * d2 * d2;
            }
        }
        acc.sqrt()
    }
}

fn check_tensor(q: &QGrid, tensor: &InteractionTensor) -> Result<()> {
    if tensor.order() != q.order {
        return Err(CipError::Argument(format!(
            "tensor order {} does not match grid order {}",
            tensor.order(),
            q.order
        )));
    }
    Ok(())
}

/// Residual row `J^i` for all `j`, given `q^{i-1}, q^i, q^{i+1}`.
fn residual_row(
    tensor: &InteractionTensor,
    prev: &[f64],
    cur: &[f64],
    next: &[f64],
    h: f64,
) -> Vec<f64> {
    let d: Vec<f64> = next.iter().zip(cur).map(|(a, b)| a - b).collect();
    let quad = tensor.bilinear(&d, &d);
    let inv_h2 = 1.0 / (h * h);
    (0..cur.len())
        .map(|j| (next[j] - 2.0 * cur[j] + prev[j] + quad[j]) * inv_h2)
        .collect()
}

/// `J_j^i = (q_j^{i+1} - 2q_j^i + q_j^{i-1})/h² + Σ F_jmn (q_m^{i+1}-q_m^i)(q_n^{i+1}-q_n^i)/h²`.
pub fn residual(q: &QGrid, tensor: &InteractionTensor, j: usize, i: usize) -> Result<f64> {
    check_tensor(q, tensor)?;
    if j >= q.order || i == 0 || i >= q.intervals {
        return Err(CipError::Argument(format!(
            "residual index (j={j}, i={i}) outside 0..{} × 1..{}",
            q.order, q.intervals
        )));
    }
    Ok(residual_row(tensor, q.row(i - 1), q.row(i), q.row(i + 1), q.h)[j])
}

/// `J̄ = h Σ_j Σ_{i=1}^{M-1} (J_j^i)² φ_λ²(x_i)`.
pub fn objective(q: &QGrid, tensor: &InteractionTensor, weight: &CarlemanWeight) -> Result<f64> {
    check_tensor(q, tensor)?;
    let mut acc = 0.0;
    for i in 1..q.intervals {
        let w = weight.value(q.x(i)).powi(2);
        let r = residual_row(tensor, q.row(i - 1), q.row(i), q.row(i + 1), q.h);
        acc += w * r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(q.h * acc)
}

/// Objective and its gradient with respect to the free rows.
pub fn objective_and_gradient(
    q: &QGrid,
    tensor: &InteractionTensor,
    weight: &CarlemanWeight,
) -> Result<(f64, Vec<f64>)> {
    check_tensor(q, tensor)?;
    let (n, m, h) = (q.order, q.intervals, q.h);
    let inv_h2 = 1.0 / (h * h);
    let mut full = vec![0.0; (m + 1) * n];
    let mut value = 0.0;
    let mut sym = vec![0.0; n * n];
    for i in 1..m {
        let (prev, cur, next) = (q.row(i - 1), q.row(i), q.row(i + 1));
        let w = weight.value(q.x(i)).powi(2);
        let r = residual_row(tensor, prev, cur, next, h);
        value += w * r.iter().map(|v| v * v).sum::<f64>();
        let d: Vec<f64> = next.iter().zip(cur).map(|(a, b)| a - b).collect();
        // sym[j][m] = Σ_n (F_jmn + F_jnm) d_n  = ∂(Σ F_jmn d_m d_n)/∂d_m
        for jj in 0..n {
            let slice = tensor.slice(jj);
            for mm in 0..n {
                let mut acc = 0.0;
                for nn in 0..n {
                    acc += (slice[mm * n + nn] + slice[nn * n + mm]) * d[nn];
                }
                sym[jj * n + mm] = acc;
            }
        }
        for jj in 0..n {
            let coef = 2.0 * h * w * r[jj] * inv_h2;
            if coef == 0.0 {
                continue;
            }
            full[(i - 1) * n + jj] += coef;
            full[i * n + jj] -= 2.0 * coef;
            full[(i + 1) * n + jj] += coef;
            for mm in 0..n {
                let g = coef * sym[jj * n + mm];
                full[(i + 1) * n + mm] += g;
                full[i * n + mm] -= g;
            }
        }
    }
    // q^M = q^{M-1} + h Ψb
    for j in 0..n {
        full[(m - 1) * n + j] += full[m * n + j];
    }
    Ok((h * value, full[2 * n..m * n].to_vec()))
}

pub fn gradient(
    q: &QGrid,
    tensor: &InteractionTensor,
    weight: &CarlemanWeight,
) -> Result<Vec<f64>> {
    Ok(objective_and_gradient(q, tensor, weight)?.1)
}

/// Minimize `J̄` from the constant-in-`x` initial guess.
pub fn minimize(
    boundary: &SpectralBoundaryData,
    tensor: &InteractionTensor,
    weight: &CarlemanWeight,
    intervals: usize,
    h: f64,
    opts: &LbfgsConfig,
) -> Result<(QGrid, OptimReport)> {
    let start = QGrid::initial(boundary, intervals, h)?;
    check_tensor(&start, tensor)?;
    let template = start.clone();
    let eval = |free: &[f64]| -> Option<(f64, Vec<f64>)> {
        let q = QGrid::from_free(&template.boundary, intervals, h, free).ok()?;
        objective_and_gradient(&q, tensor, weight).ok()
    };
    let (free, report) = lbfgs(start.free().to_vec(), eval, opts);
    let q = QGrid::from_free(boundary, intervals, h, &free)?;
    Ok((q, report))
}

/// Coefficient recovered from `Q` on the `h`-grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredCoefficient {
    pub x: Vec<f64>,
    /// Mean over the pseudofrequency grid of `c(x; s)`; 1 at `x = 0` and `x = b`.
    pub c: Vec<f64>,
    /// Standard deviation of `c(x; s)` over the pseudofrequency grid.
    pub spread: Vec<f64>,
}

impl RecoveredCoefficient {
    pub fn max_spread(&self) -> f64 {
        self.spread.iter().copied().fold(0.0, f64::max)
    }
}

/// Second-order first and second derivatives on a uniform grid (one-sided at the ends).
fn derivatives(u: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 1..n - 1 {
        d1[i] = (u[i + 1] - u[i - 1]) / (2.0 * h);
        d2[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (h * h);
    }
    d1[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
    d1[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
    d2[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / (h * h);
    d2[n - 1] = (2.0 * u[n - 1] - 5.0 * u[n - 2] + 4.0 * u[n - 3] - u[n - 4]) / (h * h);
    (d1, d2)
}

/// `c(x; s) = v_xx + s² v_x²` with `v(x, s) = -Σ_n q_n(x) ∫_s^∞ f_n`, averaged over `s`.
pub fn recover_c(
    q: &QGrid,
    basis: &LaguerreBasis,
    grid: &PseudoFrequencyGrid,
) -> Result<RecoveredCoefficient> {
    if basis.order() != q.order {
        return Err(CipError::Argument("basis order does not match Q".into()));
    }
    let m = q.intervals;
    let ns = grid.len();
    let mut samples = vec![vec![0.0; ns]; m + 1];
    for k in 0..ns {
        let s = grid.node(k);
        let tails = basis.tail_integrals(s)?;
        let v: Vec<f64> = (0..=m)
            .map(|i| -q.row(i).iter().zip(&tails).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let (vx, vxx) = derivatives(&v, q.h);
        for (row, (d1, d2)) in samples.iter_mut().zip(vx.iter().zip(&vxx)) {
            row[k] = d2 + s * s * d1 * d1;
        }
    }
    let mut c = Vec::with_capacity(m + 1);
    let mut spread = Vec::with_capacity(m + 1);
    for (i, row) in samples.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / ns as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ns as f64;
        spread.push(var.sqrt());
        c.push(if i == 0 || i == m { 1.0 } else { mean });
    }
    Ok(RecoveredCoefficient {
        x: (0..=m).map(|i| q.x(i)).collect(),
        c,
        spread,
    })
}
