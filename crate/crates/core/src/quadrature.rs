//! Gauss–Legendre rules and composite rules graded toward breakpoints.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A one-dimensional rule: nodes and weights on an interval.
#[derive(Debug, Clone, Default)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Composite Gauss–Legendre rule on `[a, b]` with `per_panel` nodes per panel.
///
/// Panels start out uniform (`panels` of them). Each interior breakpoint
/// splits its panel and panels touching it are bisected geometrically down to
/// width `h_min`.
pub fn composite_rule(a: f64, b: f64, panels: usize, per_panel: usize, breaks: &[f64], h_min: f64) -> Rule1d {
    let graded: Vec<(f64, f64)> = breaks.iter().map(|&c| (c, h_min)).collect();
    graded_rule(a, b, panels, per_panel, &graded)
}

/// As [`composite_rule`] with a separate minimum width per breakpoint.
/// Breakpoints on the interval ends grade the adjacent panels only.
pub fn graded_rule(a: f64, b: f64, panels: usize, per_panel: usize, breaks: &[(f64, f64)]) -> Rule1d {
    assert!(b > a);
    let mut edges: Vec<f64> = (0..=panels.max(1))
        .map(|k| a + (b - a) * k as f64 / panels.max(1) as f64)
        .collect();
    for &(c, h_min) in breaks.iter().filter(|(c, _)| *c >= a && *c <= b) {
        edges.push(c);
        let mut h = (b - a) / panels.max(1) as f64 / 2.0;
        while h > h_min {
            for s in [c - h, c + h] {
                if s > a && s < b {
                    edges.push(s);
                }
            }
            h /= 2.0;
        }
    }
    edges.sort_by(|x, y| x.total_cmp(y));
    edges.dedup_by(|x, y| (*x - *y).abs() < 1e-15 * (b - a));
    let (gx, gw) = gauss_legendre(per_panel);
    let mut rule = Rule1d::default();
    for win in edges.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (x, w) in gx.iter().zip(&gw) {
            rule.nodes.push(mid + half * x);
            rule.weights.push(half * w);
        }
    }
    rule
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        for n in [1, 2, 5, 16, 24] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn graded_rule_handles_a_kink() {
        let r = composite_rule(-1.0, 1.0, 4, 8, &[0.1], 1e-6);
        let q = r.integrate(|x| (x - 0.1f64).abs().powf(1.5));
        let exact = (1.1f64.powf(2.5) + 0.9f64.powf(2.5)) / 2.5;
        assert!((q - exact).abs() < 1e-12);
    }
}
