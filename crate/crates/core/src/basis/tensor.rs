use serde::{Deserialize, Serialize};

use super::LaguerreBasis;
use crate::error::{CipError, Result};
use crate::parallel::{map_indices, Execution};

/// Outer-integral quadrature for the interaction tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Upper limit replacing `∞` in the outer integrals.
    pub cutoff: f64,
    /// Composite Simpson spacing; rounded down so the interval count is even.
    pub spacing: f64,
}

impl QuadratureConfig {
    /// Cutoff `s_min + 80` with `1e-3` Simpson spacing.
    pub fn standard(s_min: f64) -> Self {
        Self {
            cutoff: s_min + 80.0,
            spacing: 1e-3,
        }
    }

    fn intervals(&self, s_min: f64) -> Result<usize> {
        if !(self.cutoff > s_min) || !self.cutoff.is_finite() {
            return Err(CipError::Config(format!(
                "quadrature cutoff {} must exceed s_min {s_min}",
                self.cutoff
            )));
        }
        if !(self.spacing > 0.0) {
            return Err(CipError::Config(format!(
                "quadrature spacing must be positive, got {}",
                self.spacing
            )));
        }
        let raw = ((self.cutoff - s_min) / self.spacing - 1e-9).ceil() as usize;
        if raw == 0 {
            return Err(CipError::Config("quadrature has zero nodes".into()));
        }
        Ok(raw + raw % 2)
    }
}

/// `F[k][m][n]`, stored flat in `(k, m, n)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTensor {
    order: usize,
    entries: Vec<f64>,
}

impl InteractionTensor {
    pub fn from_entries(order: usize, entries: Vec<f64>) -> Result<Self> {
        if order == 0 || entries.len() != order * order * order {
            return Err(CipError::Argument(format!(
                "{} entries cannot form an order-{order} tensor",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CipError::Argument("tensor entries must be finite".into()));
        }
        Ok(Self { order, entries })
    }

    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            entries: vec![0.0; order * order * order],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize, n: usize) -> f64 {
        self.entries[(k * self.order + m) * self.order + n]
    }

    pub fn set(&mut self, k: usize, m: usize, n: usize, value: f64) {
        let order = self.order;
        self.entries[(k * order + m) * order + n] = value;
    }

    /// The `k`-th slice `F[k]` as an `order × order` row-major block.
    #[inline]
    pub fn slice(&self, k: usize) -> &[f64] {
        let nn = self.order * self.order;
        &self.entries[k * nn..(k + 1) * nn]
    }

    /// `Σ_{m,n} F_kmn a_m b_n` for every `k`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.order)
            .map(|k| {
                let s = self.slice(k);
                let mut acc = 0.0;
                for m in 0..self.order {
                    let row = &s[m * self.order..(m + 1) * self.order];
                    let inner: f64 = row.iter().zip(b).map(|(f, bn)| f * bn).sum();
                    acc += a[m] * inner;
                }
                acc
            })
            .collect()
    }

    /// Copy with each `F[k]` replaced by its `(m, n)`-symmetric part.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        for k in 0..self.order {
            for m in 0..self.order {
                for n in 0..self.order {
                    out.set(k, m, n, 0.5 * (self.get(k, m, n) + self.get(k, n, m)));
                }
            }
        }
        out
    }
}

/// Composite Simpson weights for `intervals` (even) panels of width `h`.
pub(crate) fn simpson_weights(intervals: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; intervals + 1];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == intervals {
            h / 3.0
        } else if i % 2 == 1 {
            4.0 * h / 3.0
        } else {
            2.0 * h / 3.0
        };
    }
    w
}

/// `F_kmn = ∫ 2s f_k I_m I_n ds − ∫ 2s² f_k f_m I_n ds` over `(s_min, cutoff)`,
/// with `I_j(s) = ∫_s^∞ f_j` exact and the outer integral by composite Simpson.
pub fn compute_interaction_tensor(
    basis: &LaguerreBasis,
    quad: &QuadratureConfig,
    exec: Execution,
) -> Result<InteractionTensor> {
    let order = basis.order();
    let s_min = basis.s_min();
    let intervals = quad.intervals(s_min)?;
    let h = (quad.cutoff - s_min) / intervals as f64;
    let weights = simpson_weights(intervals, h);
    let nodes = intervals + 1;

    // node-major tables, transposed to one contiguous row per basis index
    let mut f = vec![vec![0.0; nodes]; order];
    let mut tail = vec![vec![0.0; nodes]; order];
    for p in 0..nodes {
        let s = s_min + p as f64 * h;
        let fv = basis.values(s)?;
        let iv = basis.tail_integrals(s)?;
        for j in 0..order {
            f[j][p] = fv[j];
            tail[j][p] = iv[j];
        }
    }
    let s_nodes: Vec<f64> = (0..nodes).map(|p| s_min + p as f64 * h).collect();

    let slices = map_indices(order, exec, |k| {
        // weight_k(s) = w(s) 2 s f_k(s)
        let wk: Vec<f64> = (0..nodes)
            .map(|p| weights[p] * 2.0 * s_nodes[p] * f[k][p])
            .collect();
        let mut slice = vec![0.0; order * order];
        for m in 0..order {
            for n in 0..order {
                let mut acc = 0.0;
                for p in 0..nodes {
                    acc += wk[p] * tail[n][p] * (tail[m][p] - s_nodes[p] * f[m][p]);
                }
                slice[m * order + n] = acc;
            }
        }
        slice
    });
    InteractionTensor::from_entries(order, slices.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_has_single_entry() {
        let b = LaguerreBasis::new(1, 4.0).unwrap();
        let t =
            compute_interaction_tensor(&b, &QuadratureConfig::standard(4.0), Execution::Sequential)
                .unwrap();
        assert_eq!(t.entries().len(), 1);
        assert!(t.get(0, 0, 0).is_finite());
    }

    #[test]
    fn order_one_closed_form() {
        // f0 = e^{-t/2}, I0 = 2 e^{-t/2}, s = 4 + t:
        // F = ∫ 2s e^{-t/2} 4 e^{-t} − 2 s² e^{-t} 2 e^{-t/2}
        //   = ∫ e^{-3t/2} (8 s − 4 s²) dt
        let t_int = |k: i32| -> f64 {
            // ∫_0^∞ t^k e^{-3t/2} dt = k! (2/3)^{k+1}
            let fact: f64 = (1..=k).map(|v| v as f64).product();
            fact * (2.0f64 / 3.0).powi(k + 1)
        };
        // s = 4 + t: 8s − 4s² = 32 + 8t − 4(16 + 8t + t²) = −32 − 24 t − 4 t²
        let exact = -32.0 * t_int(0) - 24.0 * t_int(1) - 4.0 * t_int(2);
        let b = LaguerreBasis::new(1, 4.0).unwrap();
        let t =
            compute_interaction_tensor(&b, &QuadratureConfig::standard(4.0), Execution::Sequential)
                .unwrap();
        assert!(
            ((t.get(0, 0, 0) - exact) / exact).abs() < 1e-10,
            "{} vs {exact}",
            t.get(0, 0, 0)
        );
    }

    #[test]
    fn bad_quadrature_config() {
        let b = LaguerreBasis::new(3, 4.0).unwrap();
        let bad = QuadratureConfig {
            cutoff: 3.0,
            spacing: 1e-3,
        };
        assert!(matches!(
            compute_interaction_tensor(&b, &bad, Execution::Sequential),
            Err(CipError::Config(_))
        ));
        let bad = QuadratureConfig {
            cutoff: 10.0,
            spacing: 0.0,
        };
        assert!(compute_interaction_tensor(&b, &bad, Execution::Sequential).is_err());
    }

    #[test]
    fn basis_vector_contraction() {
        let b = LaguerreBasis::new(4, 4.0).unwrap();
        let quad = QuadratureConfig {
            cutoff: 60.0,
            spacing: 1e-2,
        };
        let t = compute_interaction_tensor(&b, &quad, Execution::Sequential).unwrap();
        let e0 = [1.0, 0.0, 0.0, 0.0];
        let form = t.bilinear(&e0, &e0);
        for (k, v) in form.iter().enumerate() {
            assert_eq!(*v, t.get(k, 0, 0));
        }
    }

    #[test]
    fn execution_modes_bit_identical() {
        let b = LaguerreBasis::new(5, 4.0).unwrap();
        let quad = QuadratureConfig {
            cutoff: 50.0,
            spacing: 5e-3,
        };
        let a = compute_interaction_tensor(&b, &quad, Execution::Sequential).unwrap();
        let c = compute_interaction_tensor(&b, &quad, Execution::Parallel).unwrap();
        assert_eq!(a, c);
    }
}
