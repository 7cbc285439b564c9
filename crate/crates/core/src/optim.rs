//! Limited-memory BFGS with Armijo backtracking.
//!
//! Shared by the global and local solvers. Accepted iterates never increase
//! the objective; a failed line search stops with the best point so far and a
//! flagged report instead of diverging.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Sup-norm of the first (steepest-descent) step.
    pub initial_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            tol: 1e-8,
            max_iter: 2000,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 50,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

/// Convergence record of one minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub final_gradient_norm: f64,
    pub stop: StopReason,
}

impl OptimReport {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::GradientTolerance
    }

    /// Flagged: the optimizer stopped for a reason other than the gradient test.
    pub fn flagged(&self) -> bool {
        self.stop == StopReason::LineSearchFailed
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap_or(&f64::NAN)
    }

    pub fn is_monotone(&self) -> bool {
        self.objective.windows(2).all(|w| w[1] <= w[0])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f` from `x0`. The callback returns `(value, gradient)`, or `None`
/// when the point is infeasible (treated as `+∞` by the line search).
pub fn lbfgs<F>(x0: Vec<f64>, mut f: F, cfg: &LbfgsConfig) -> (Vec<f64>, OptimReport)
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let mut evaluations = 1;
    let Some((mut fx, mut g)) = f(&x) else {
        return (
            x,
            OptimReport {
                iterations: 0,
                evaluations,
                objective: vec![f64::NAN],
                final_gradient_norm: f64::NAN,
                stop: StopReason::LineSearchFailed,
            },
        );
    };
    let mut history = vec![fx];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(cfg.memory);
    let mut iterations = 0;
    let stop = loop {
        if sup(&g) < cfg.tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= cfg.max_iter {
            break StopReason::MaxIterations;
        }

        let mut accepted = None;
        // second attempt discards curvature memory and falls back to steepest descent
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let (d, first_step) = direction(&g, &pairs, cfg);
            let slope = dot(&g, &d);
            if !(slope < 0.0) {
                continue;
            }
            let mut alpha = first_step;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                evaluations += 1;
                if let Some((ft, gt)) = f(&trial) {
                    if ft.is_finite() && ft <= fx + cfg.armijo * alpha * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                alpha *= cfg.shrink;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        iterations += 1;
    };
    let final_gradient_norm = sup(&g);
    (
        x,
        OptimReport {
            iterations,
            evaluations,
            objective: history,
            final_gradient_norm,
            stop,
        },
    )
}

/// Two-loop recursion; returns the direction and the initial trial step.
fn direction(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)], cfg: &LbfgsConfig) -> (Vec<f64>, f64) {
    if pairs.is_empty() {
        let scale = cfg.initial_step / sup(g).max(f64::MIN_POSITIVE);
        return (g.iter().map(|v| -v * scale).collect(), 1.0);
    }
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    let (s, y, _) = pairs.last().unwrap();
    let gamma = dot(s, y) / dot(y, y);
    q.iter_mut().for_each(|v| *v *= gamma);
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let b = rho * dot(y, &q);
        q.iter_mut()
            .zip(s)
            .for_each(|(qi, si)| *qi += (alphas[k] - b) * si);
    }
    (q.iter().map(|v| -v).collect(), 1.0)
}
