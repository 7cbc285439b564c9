//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]`.
pub fn composite_rule(a: f64, b: f64, panels: usize, per_panel: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(per_panel);
    let width = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(panels * per_panel);
    let mut ws = Vec::with_capacity(panels * per_panel);
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        for (x, w) in gx.iter().zip(&gw) {
            xs.push(mid + 0.5 * width * x);
            ws.push(0.5 * width * w);
        }
    }
    (xs, ws)
}

/// `e^{-(s - s0)/2} L_n(s - s0)` for `n < order`, by the three-term recurrence.
pub fn laguerre_functions(order: usize, s0: f64, s: f64) -> Vec<f64> {
    let t = s - s0;
    let mut out = Vec::with_capacity(order);
    let (mut prev, mut cur) = (0.0, 1.0);
    for n in 0..order {
        out.push(cur);
        let next =
            ((2 * n + 1) as f64 - t) * cur / (n + 1) as f64 - n as f64 * prev / (n + 1) as f64;
        prev = cur;
        cur = next;
    }
    let e = (-0.5 * t).exp();
    out.iter_mut().for_each(|v| *v *= e);
    out
}

/// Brute-force `F_kmn`: nested quadrature for the outer integrals and the tails alike.
pub fn tensor_oracle(order: usize, s0: f64) -> Vec<f64> {
    // e^{-t/2} t^10 / 10! is below 1e-30 past t = 200
    let (xs, ws) = composite_rule(s0, s0 + 200.0, 500, 12);
    let (ux, uw) = composite_rule(0.0, 200.0, 500, 12);
    let mut acc = vec![0.0; order * order * order];
    for (&s, &w) in xs.iter().zip(&ws) {
        let f = laguerre_functions(order, s0, s);
        let mut tails = vec![0.0; order];
        for (&u, &v) in ux.iter().zip(&uw) {
            let g = laguerre_functions(order, s0, s + u);
            for j in 0..order {
                tails[j] += v * g[j];
            }
        }
        for k in 0..order {
            let a = w * 2.0 * s * f[k];
            for m in 0..order {
                for n in 0..order {
                    acc[(k * order + m) * order + n] +=
                        a * (tails[m] * tails[n] - s * f[m] * tails[n]);
                }
            }
        }
    }
    acc
}

/// Largest violation of `|got - want| ≤ rel · |want|` among entries with
/// `|want| > abs_floor`, and the largest absolute error among the rest.
pub fn compare_entries(got: &[f64], want: &[f64], abs_floor: f64) -> (f64, f64) {
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        if w.abs() > abs_floor {
            worst_rel = worst_rel.max((g - w).abs() / w.abs());
        } else {
            worst_abs = worst_abs.max((g - w).abs());
        }
    }
    (worst_rel, worst_abs)
}
