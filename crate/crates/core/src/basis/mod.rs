//! Shifted Laguerre basis on the pseudofrequency half-line `(s_min, ∞)`.
//!
//! `f_n(s) = e^{-(s - s_min)/2} L_n(s - s_min)` with `L_n` the Laguerre
//! polynomial. The family is orthonormal in `L2(s_min, ∞)` and every tail
//! integral `∫_s^∞ f_n` has a closed form, which is what lets the nonlinear
//! system be written without truncating the integral over `s`.

mod cache;
mod tensor;

pub use cache::{
    decode_tensor, encode_tensor, read_tensor_cache, write_tensor_cache, TensorCacheHeader,
    TENSOR_CACHE_VERSION,
};
pub use tensor::{compute_interaction_tensor, InteractionTensor, QuadratureConfig};

use serde::{Deserialize, Serialize};

use crate::error::{CipError, Result};

/// Uniform grid of pseudofrequencies `s_min, s_min + step, ..., s_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoFrequencyGrid {
    s_min: f64,
    s_max: f64,
    step: f64,
    count: usize,
}

impl PseudoFrequencyGrid {
    pub fn new(s_min: f64, s_max: f64, step: f64) -> Result<Self> {
        if !(s_min > 0.0) || !s_min.is_finite() {
            return Err(CipError::Config(format!(
                "s_min must be positive, got {s_min}"
            )));
        }
        if !(s_max > s_min) || !s_max.is_finite() {
            return Err(CipError::Config(format!(
                "s_max ({s_max}) must exceed s_min ({s_min})"
            )));
        }
        if !(step > 0.0) {
            return Err(CipError::Config(format!(
                "step must be positive, got {step}"
            )));
        }
        let ratio = (s_max - s_min) / step;
        let intervals = ratio.round();
        if (ratio - intervals).abs() > 1e-9 {
            return Err(CipError::Config(format!(
                "(s_max - s_min)/step = {ratio} is not an integer"
            )));
        }
        let count = intervals as usize + 1;
        let last = s_min + intervals * step;
        if (last - s_max).abs() > 1e-12 * s_max.abs().max(1.0) {
            return Err(CipError::Config(format!(
                "last node {last} misses s_max {s_max}"
            )));
        }
        Ok(Self {
            s_min,
            s_max,
            step,
            count,
        })
    }

    /// The `[4, 15]`, `Δs = 0.05` working grid.
    pub fn standard() -> Self {
        Self::new(4.0, 15.0, 0.05).expect("standard grid is valid")
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn node(&self, i: usize) -> f64 {
        self.s_min + i as f64 * self.step
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }

    /// Composite trapezoid weights over the grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.step; self.count];
        w[0] *= 0.5;
        w[self.count - 1] *= 0.5;
        w
    }
}

/// `e^{-t/2} L_n(t)` via the three-term recurrence for the polynomial factor.
pub fn laguerre_value(n: usize, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(CipError::Argument(format!(
            "Laguerre argument must be nonnegative, got {t}"
        )));
    }
    Ok(laguerre_polys(n, t)[n] * (-0.5 * t).exp())
}

/// Polynomial values `L_0(t), ..., L_n(t)` (no exponential factor).
fn laguerre_polys(n: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(1.0 - t);
    }
    for k in 1..n {
        let k_f = k as f64;
        let next = ((2.0 * k_f + 1.0 - t) * out[k] - k_f * out[k - 1]) / (k_f + 1.0);
        out.push(next);
    }
    out
}

/// Truncated Laguerre basis `f_0, ..., f_{order-1}` shifted to start at `s_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaguerreBasis {
    order: usize,
    s_min: f64,
}

impl LaguerreBasis {
    pub fn new(order: usize, s_min: f64) -> Result<Self> {
        if order == 0 {
            return Err(CipError::Config("basis order must be at least 1".into()));
        }
        if !(s_min > 0.0) || !s_min.is_finite() {
            return Err(CipError::Config(format!(
                "s_min must be positive, got {s_min}"
            )));
        }
        Ok(Self { order, s_min })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    fn shifted(&self, s: f64) -> Result<f64> {
        if !(s >= self.s_min) {
            return Err(CipError::Domain(format!(
                "pseudofrequency {s} lies below s_min = {}",
                self.s_min
            )));
        }
        Ok(s - self.s_min)
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.order {
            return Err(CipError::Argument(format!(
                "basis index {n} out of range for order {}",
                self.order
            )));
        }
        Ok(())
    }

    pub fn value(&self, n: usize, s: f64) -> Result<f64> {
        self.check_index(n)?;
        laguerre_value(n, self.shifted(s)?)
    }

    /// All `f_n(s)` for `n < order`.
    pub fn values(&self, s: f64) -> Result<Vec<f64>> {
        let t = self.shifted(s)?;
        let e = (-0.5 * t).exp();
        let mut p = laguerre_polys(self.order - 1, t);
        p.iter_mut().for_each(|v| *v *= e);
        Ok(p)
    }

    /// `∫_s^∞ f_n(τ) dτ`, exact.
    pub fn tail_integral(&self, n: usize, s: f64) -> Result<f64> {
        self.check_index(n)?;
        let t = self.shifted(s)?;
        let p = laguerre_polys(n, t);
        Ok(tail_from_polys(&p, n) * (-0.5 * t).exp())
    }

    /// All tail integrals `∫_s^∞ f_n` for `n < order`.
    pub fn tail_integrals(&self, s: f64) -> Result<Vec<f64>> {
        let t = self.shifted(s)?;
        let e = (-0.5 * t).exp();
        let p = laguerre_polys(self.order - 1, t);
        Ok((0..self.order)
            .map(|n| tail_from_polys(&p, n) * e)
            .collect())
    }

    /// Trapezoid projection `c_n = ∫ g f_n ds` over the grid.
    pub fn project(&self, grid: &PseudoFrequencyGrid, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != grid.len() {
            return Err(CipError::Argument(format!(
                "{} samples for a grid of {} nodes",
                samples.len(),
                grid.len()
            )));
        }
        let weights = grid.trapezoid_weights();
        let mut coeffs = vec![0.0; self.order];
        for (i, (&g, &w)) in samples.iter().zip(&weights).enumerate() {
            let f = self.values(grid.node(i))?;
            for (c, fv) in coeffs.iter_mut().zip(f) {
                *c += w * g * fv;
            }
        }
        Ok(coeffs)
    }

    /// `Σ_n coeffs_n f_n(s)`.
    pub fn synthesize(&self, coeffs: &[f64], s: f64) -> Result<f64> {
        if coeffs.len() != self.order {
            return Err(CipError::Argument(format!(
                "{} coefficients for basis order {}",
                coeffs.len(),
                self.order
            )));
        }
        let f = self.values(s)?;
        Ok(coeffs.iter().zip(f).map(|(c, v)| c * v).sum())
    }

    /// Gram matrix of the basis under the grid's trapezoid rule.
    ///
    /// The largest deviation from the identity bounds the error of
    /// [`Self::project`] on combinations of basis functions.
    pub fn grid_gram(&self, grid: &PseudoFrequencyGrid) -> Result<Vec<Vec<f64>>> {
        let weights = grid.trapezoid_weights();
        let mut gram = vec![vec![0.0; self.order]; self.order];
        for (i, &w) in weights.iter().enumerate() {
            let f = self.values(grid.node(i))?;
            for n in 0..self.order {
                for m in 0..self.order {
                    gram[n][m] += w * f[n] * f[m];
                }
            }
        }
        Ok(gram)
    }

    /// `max_{n,m} |G_nm - δ_nm|` for [`Self::grid_gram`].
    pub fn projection_tolerance(&self, grid: &PseudoFrequencyGrid) -> Result<f64> {
        let gram = self.grid_gram(grid)?;
        Ok(max_identity_deviation(&gram))
    }
}

/// Closed form of the tail: `∫_t^∞ e^{-τ/2} L_n(τ) dτ = e^{-t/2} P_n(t)` with
/// `P_n = 2 L_n + 4 Σ_{j<n} (-1)^{n-j} L_j`, obtained by repeated integration
/// by parts and `L_n' = -Σ_{j<n} L_j`.
fn tail_from_polys(p: &[f64], n: usize) -> f64 {
    let mut acc = 2.0 * p[n];
    let mut sign = -1.0;
    for j in (0..n).rev() {
        acc += 4.0 * sign * p[j];
        sign = -sign;
    }
    acc
}

/// Exact `∫_0^∞ e^{-t} L_n(t) L_m(t) dt` in integer arithmetic.
///
/// With `L_n = Σ_i (-1)^i C(n,i) t^i / i!` and `∫ t^k e^{-t} = k!`, every term
/// reduces to `± C(n,i) C(m,j) C(i+j,i)`.
pub fn exact_inner_product(n: usize, m: usize) -> f64 {
    let mut acc: i128 = 0;
    for i in 0..=n {
        for j in 0..=m {
            let term = binom(n, i) * binom(m, j) * binom(i + j, i);
            if (i + j) % 2 == 0 {
                acc += term;
            } else {
                acc -= term;
            }
        }
    }
    acc as f64
}

fn binom(n: usize, k: usize) -> i128 {
    let k = k.min(n - k);
    let mut r: i128 = 1;
    for i in 0..k {
        r = r * (n - i) as i128 / (i + 1) as i128;
    }
    r
}

/// Exact Gram matrix over `(s_min, ∞)` (shift-invariant, so independent of `s_min`).
pub fn exact_gram(order: usize) -> Vec<Vec<f64>> {
    (0..order)
        .map(|n| (0..order).map(|m| exact_inner_product(n, m)).collect())
        .collect()
}

pub(crate) fn max_identity_deviation(gram: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (n, row) in gram.iter().enumerate() {
        for (m, &g) in row.iter().enumerate() {
            let target = if n == m { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn laguerre_trivial_values() {
        assert_eq!(laguerre_value(0, 0.0).unwrap(), 1.0);
        assert_eq!(laguerre_value(5, 0.0).unwrap(), 1.0);
        assert_relative_eq!(
            laguerre_value(1, 2.0).unwrap(),
            -(-1.0f64).exp(),
            max_relative = 1e-15
        );
        assert!(laguerre_value(2, -0.1).is_err());
        assert!(laguerre_value(2, f64::NAN).is_err());
    }

    #[test]
    fn recurrence_matches_explicit_sum_for_moderate_degree() {
        // explicit e^{-t/2} Σ (-1)^k C(n,k) t^k / k!, fine in f64 for small t
        for n in 0..12 {
            for &t in &[0.3f64, 1.7, 4.0, 9.5] {
                let mut sum = 0.0;
                let mut fact = 1.0;
                for k in 0..=n {
                    if k > 0 {
                        fact *= k as f64;
                    }
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    sum += sign * binom(n, k) as f64 * t.powi(k as i32) / fact;
                }
                sum *= (-0.5 * t).exp();
                assert_relative_eq!(
                    laguerre_value(n, t).unwrap(),
                    sum,
                    epsilon = 1e-12,
                    max_relative = 1e-9
                );
            }
        }
    }

    #[test]
    fn high_degree_is_finite_and_bounded() {
        // |e^{-t/2} L_n(t)| ≤ 1 for all t ≥ 0
        for n in [20, 30, 40] {
            for i in 0..400 {
                let v = laguerre_value(n, i as f64 * 0.25).unwrap();
                assert!(v.is_finite() && v.abs() <= 1.0 + 1e-9, "n={n} v={v}");
            }
        }
    }

    #[test]
    fn basis_value_shift_and_domain() {
        let b = LaguerreBasis::new(11, 4.0).unwrap();
        assert_eq!(b.value(0, 4.0).unwrap(), 1.0);
        assert_eq!(b.value(3, 4.0).unwrap(), 1.0);
        assert_relative_eq!(
            b.value(1, 6.0).unwrap(),
            -(-1.0f64).exp(),
            max_relative = 1e-15
        );
        assert!(matches!(b.value(0, 3.9), Err(CipError::Domain(_))));
        assert!(matches!(b.value(11, 5.0), Err(CipError::Argument(_))));
        assert!(LaguerreBasis::new(0, 4.0).is_err());
    }

    #[test]
    fn tail_integral_closed_form_values() {
        let b = LaguerreBasis::new(11, 4.0).unwrap();
        assert_relative_eq!(b.tail_integral(0, 4.0).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(b.tail_integral(1, 4.0).unwrap(), -2.0, max_relative = 1e-15);
        assert!(b.tail_integral(0, 204.0).unwrap().abs() < 1e-40);
        // ∫_0^∞ e^{-t/2} L_n = 2 (-1)^n
        for n in 0..11 {
            let sign = if n % 2 == 0 { 2.0 } else { -2.0 };
            assert_relative_eq!(b.tail_integral(n, 4.0).unwrap(), sign, max_relative = 1e-13);
        }
    }

    #[test]
    fn tail_integral_derivative_is_minus_basis() {
        let b = LaguerreBasis::new(11, 4.0).unwrap();
        let h = 1e-5;
        for n in 0..11 {
            for &s in &[4.3, 5.0, 7.7, 11.2, 14.9, 22.0] {
                let fd = (b.tail_integral(n, s + h).unwrap() - b.tail_integral(n, s - h).unwrap())
                    / (2.0 * h);
                let f = b.value(n, s).unwrap();
                let scale = f.abs().max(1e-3);
                assert!(((fd + f) / scale).abs() < 1e-6, "n={n} s={s} fd={fd} f={f}");
            }
        }
    }

    #[test]
    fn exact_orthonormality() {
        let gram = exact_gram(31);
        assert_eq!(max_identity_deviation(&gram), 0.0);
    }

    #[test]
    fn grid_validation() {
        let g = PseudoFrequencyGrid::standard();
        assert_eq!(g.len(), 221);
        assert!((g.node(g.len() - 1) - 15.0).abs() < 1e-12);
        assert!(PseudoFrequencyGrid::new(0.0, 1.0, 0.1).is_err());
        assert!(PseudoFrequencyGrid::new(4.0, 3.0, 0.1).is_err());
        assert!(PseudoFrequencyGrid::new(4.0, 15.0, 0.07).is_err());
        assert!(PseudoFrequencyGrid::new(4.0, 15.0, -0.05).is_err());
    }

    #[test]
    fn projection_examples() {
        let b = LaguerreBasis::new(11, 4.0).unwrap();
        let g = PseudoFrequencyGrid::standard();
        let tol = b.projection_tolerance(&g).unwrap();
        let f0: Vec<f64> = g.nodes().iter().map(|&s| b.value(0, s).unwrap()).collect();
        let c = b.project(&g, &f0).unwrap();
        assert!((c[0] - 1.0).abs() <= tol);
        assert!(c[1..].iter().all(|v| v.abs() <= tol));

        let zero = b.project(&g, &vec![0.0; g.len()]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let mix: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&s| 2.0 * b.value(1, s).unwrap() + 3.0 * b.value(2, s).unwrap())
            .collect();
        let c = b.project(&g, &mix).unwrap();
        let expected = [0.0, 2.0, 3.0];
        for (n, &v) in c.iter().enumerate() {
            let e = expected.get(n).copied().unwrap_or(0.0);
            assert!((v - e).abs() <= 5.0 * tol, "n={n} v={v} tol={tol}");
        }
        assert!(b.project(&g, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn synthesize_examples() {
        let b = LaguerreBasis::new(11, 4.0).unwrap();
        let mut e0 = vec![0.0; 11];
        e0[0] = 1.0;
        assert_eq!(b.synthesize(&e0, 4.0).unwrap(), 1.0);
        assert_eq!(b.synthesize(&[0.0; 11], 7.0).unwrap(), 0.0);
        assert!(b.synthesize(&e0, 3.0).is_err());
        assert!(b.synthesize(&[1.0], 5.0).is_err());
    }
}
