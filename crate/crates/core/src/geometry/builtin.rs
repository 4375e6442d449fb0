//! Built-in metric library. Every member is diagonal in its chart.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{
    zero_gradient, zero_hessian, ChartBox, MetricField, MetricGradient, MetricHessian, Point,
    Regularity, MAX_DIM,
};
use crate::error::{LabError, Result};

/// Scale factor `a(t)` of a spatially flat FLRW toy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ScaleFactor {
    /// `a = t^exponent`, chart restricted to `t > 0`.
    Power { exponent: f64 },
    /// `a = exp(rate·t)`.
    Exponential { rate: f64 },
    /// `a = cos(frequency·t)`, chart inside the first half period.
    Cosine { frequency: f64 },
}

impl ScaleFactor {
    /// `(a, a', a'')` at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            ScaleFactor::Power { exponent: p } => {
                let a = t.powf(p);
                (a, p * t.powf(p - 1.0), p * (p - 1.0) * t.powf(p - 2.0))
            }
            ScaleFactor::Exponential { rate } => {
                let a = (rate * t).exp();
                (a, rate * a, rate * rate * a)
            }
            ScaleFactor::Cosine { frequency: w } => {
                let (s, c) = (w * t).sin_cos();
                (c, -w * s, -w * w * c)
            }
        }
    }

    fn default_time_range(&self) -> (f64, f64) {
        match *self {
            ScaleFactor::Power { .. } => (0.5, 4.0),
            ScaleFactor::Exponential { .. } => (-2.0, 2.0),
            ScaleFactor::Cosine { frequency } => (-1.2 / frequency.abs(), 1.2 / frequency.abs()),
        }
    }
}

/// Named metric with parameters, as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum MetricSpec {
    Minkowski {
        dim: usize,
    },
    /// `-dt² + a(t)² δ`.
    FlrwToy {
        dim: usize,
        profile: ScaleFactor,
    },
    /// `-dt² + f(y) dx² + dy² (+dz²)` with `f = 1 + κ|y|^{1+α}`.
    /// In two dimensions the reduction `-dt² + f(x) dx²` is used.
    BranchingStatic {
        alpha: f64,
        kappa: f64,
        #[serde(default = "default_branching_dim")]
        dim: usize,
    },
    /// `-dt² + dx² + (1 + A|x-x0|^{1+α}) dy² (+dz²)`.
    KinkedWave {
        alpha: f64,
        amplitude: f64,
        #[serde(default)]
        x0: f64,
        #[serde(default = "default_wave_dim")]
        dim: usize,
    },
    /// `-dt² + exp(2Ht) δ`.
    DeSitterToy {
        hubble: f64,
        #[serde(default = "default_wave_dim")]
        dim: usize,
    },
}

fn default_branching_dim() -> usize {
    3
}

fn default_wave_dim() -> usize {
    4
}

pub const METRIC_NAMES: [&str; 5] = [
    "Minkowski",
    "FlrwToy",
    "BranchingStatic",
    "KinkedWave",
    "DeSitterToy",
];

impl MetricSpec {
    pub fn dim(&self) -> usize {
        match *self {
            MetricSpec::Minkowski { dim }
            | MetricSpec::FlrwToy { dim, .. }
            | MetricSpec::BranchingStatic { dim, .. }
            | MetricSpec::KinkedWave { dim, .. }
            | MetricSpec::DeSitterToy { dim, .. } => dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricSpec::Minkowski { .. } => "Minkowski",
            MetricSpec::FlrwToy { .. } => "FlrwToy",
            MetricSpec::BranchingStatic { .. } => "BranchingStatic",
            MetricSpec::KinkedWave { .. } => "KinkedWave",
            MetricSpec::DeSitterToy { .. } => "DeSitterToy",
        }
    }

    pub fn default_chart(&self) -> Result<ChartBox> {
        let n = self.dim();
        match self {
            MetricSpec::FlrwToy { profile, .. } => {
                let (t0, t1) = profile.default_time_range();
                let mut lo = vec![-4.0; n];
                let mut hi = vec![4.0; n];
                lo[0] = t0;
                hi[0] = t1;
                ChartBox::new(&lo, &hi)
            }
            MetricSpec::DeSitterToy { .. } => ChartBox::cube(n, 2.0),
            _ => ChartBox::cube(n, 4.0),
        }
    }

    pub fn regularity(&self) -> Regularity {
        match *self {
            MetricSpec::BranchingStatic { alpha, .. } | MetricSpec::KinkedWave { alpha, .. } => {
                Regularity::C1Alpha(alpha)
            }
            _ => Regularity::Smooth,
        }
    }

    fn validate(&self, chart: &ChartBox) -> Result<()> {
        let n = self.dim();
        if !(2..=MAX_DIM).contains(&n) {
            return Err(LabError::InvalidParameter(format!(
                "dimension {n} outside 2..=4"
            )));
        }
        if chart.dim() != n {
            return Err(LabError::InvalidParameter(format!(
                "chart dimension {} does not match metric dimension {n}",
                chart.dim()
            )));
        }
        let bad = |m: String| Err(LabError::InvalidParameter(m));
        match *self {
            MetricSpec::Minkowski { .. } => Ok(()),
            MetricSpec::FlrwToy { profile, .. } => {
                let (lo, hi) = (chart.lower()[0], chart.upper()[0]);
                match profile {
                    ScaleFactor::Power { exponent } if !exponent.is_finite() => {
                        bad("power exponent must be finite".into())
                    }
                    ScaleFactor::Power { .. } if lo <= 0.0 => {
                        bad("power-law scale factor needs a chart with t > 0".into())
                    }
                    ScaleFactor::Exponential { rate } if !rate.is_finite() => {
                        bad("exponential rate must be finite".into())
                    }
                    ScaleFactor::Cosine { frequency }
                        if !(frequency.is_finite() && frequency != 0.0) =>
                    {
                        bad("cosine frequency must be finite and nonzero".into())
                    }
                    ScaleFactor::Cosine { frequency }
                        if frequency.abs() * lo.abs().max(hi.abs())
                            >= std::f64::consts::FRAC_PI_2 =>
                    {
                        bad("cosine scale factor vanishes inside the chart".into())
                    }
                    _ => Ok(()),
                }
            }
            MetricSpec::BranchingStatic { alpha, kappa, .. } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    bad(format!("alpha = {alpha} must lie in (0, 1)"))
                } else if !(kappa > 0.0 && kappa.is_finite()) {
                    bad(format!("kappa = {kappa} must be positive"))
                } else {
                    Ok(())
                }
            }
            MetricSpec::KinkedWave {
                alpha,
                amplitude,
                x0,
                dim,
            } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return bad(format!("alpha = {alpha} must lie in (0, 1)"));
                }
                if dim < 3 {
                    return bad("KinkedWave needs dimension 3 or 4".into());
                }
                if !(amplitude.is_finite() && amplitude != 0.0) {
                    return bad("amplitude must be finite and nonzero".into());
                }
                let reach = (chart.lower()[1] - x0).abs().max((chart.upper()[1] - x0).abs());
                if 1.0 + amplitude.min(0.0) * reach.powf(1.0 + alpha) <= 0.0 {
                    return bad("g_yy degenerates inside the chart".into());
                }
                Ok(())
            }
            MetricSpec::DeSitterToy { hubble, .. } => {
                if hubble > 0.0 && hubble.is_finite() {
                    Ok(())
                } else {
                    bad(format!("hubble = {hubble} must be positive"))
                }
            }
        }
    }
}

/// A built-in metric on a chart.
#[derive(Debug, Clone)]
pub struct BuiltinMetric {
    spec: MetricSpec,
    chart: ChartBox,
}

pub fn builtin_metric(spec: &MetricSpec) -> Result<BuiltinMetric> {
    BuiltinMetric::on_chart(spec, spec.default_chart()?)
}

/// `|u|^p` with its first and second derivatives.
fn abs_pow(u: f64, p: f64) -> (f64, f64, f64) {
    let a = u.abs();
    if a == 0.0 {
        return (0.0, 0.0, if p == 2.0 { 2.0 } else { f64::NAN });
    }
    let v = a.powf(p);
    (v, p * v / a * u.signum(), p * (p - 1.0) * v / (a * a))
}

/// Diagonal entries with their first (`dd[k][i]`) and second
/// (`hh[a][b][i]`) coordinate derivatives.
struct DiagJet {
    d: [f64; MAX_DIM],
    dd: [[f64; MAX_DIM]; MAX_DIM],
    hh: Option<[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM]>,
}

impl BuiltinMetric {
    pub fn on_chart(spec: &MetricSpec, chart: ChartBox) -> Result<Self> {
        spec.validate(&chart)?;
        Ok(BuiltinMetric {
            spec: spec.clone(),
            chart,
        })
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    fn diag(&self, x: &Point) -> DiagJet {
        let n = self.spec.dim();
        let mut d = [1.0; MAX_DIM];
        d[0] = -1.0;
        let mut dd = [[0.0; MAX_DIM]; MAX_DIM];
        let mut hh = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        let mut smooth = true;
        let mut warped = |a: f64, da: f64, dda: f64| {
            for i in 1..n {
                d[i] = a * a;
                dd[0][i] = 2.0 * a * da;
                hh[0][0][i] = 2.0 * (da * da + a * dda);
            }
        };
        match self.spec {
            MetricSpec::Minkowski { .. } => {}
            MetricSpec::FlrwToy { profile, .. } => {
                let (a, da, dda) = profile.eval(x[0]);
                warped(a, da, dda);
            }
            MetricSpec::DeSitterToy { hubble, .. } => {
                let (a, da, dda) = ScaleFactor::Exponential { rate: hubble }.eval(x[0]);
                warped(a, da, dda);
            }
            MetricSpec::BranchingStatic { alpha, kappa, dim } => {
                let s = if dim == 2 { 1 } else { 2 };
                let (v, dv, _) = abs_pow(x[s], 1.0 + alpha);
                d[1] = 1.0 + kappa * v;
                dd[s][1] = kappa * dv;
                smooth = false;
            }
            MetricSpec::KinkedWave {
                alpha,
                amplitude,
                x0,
                ..
            } => {
                let (v, dv, _) = abs_pow(x[1] - x0, 1.0 + alpha);
                d[2] = 1.0 + amplitude * v;
                dd[1][2] = amplitude * dv;
                smooth = false;
            }
        }
        DiagJet {
            d,
            dd,
            hh: smooth.then_some(hh),
        }
    }
}

impl MetricField for BuiltinMetric {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn chart(&self) -> &ChartBox {
        &self.chart
    }

    fn regularity(&self) -> Regularity {
        self.spec.regularity()
    }

    fn label(&self) -> String {
        format!("{:?}", self.spec)
    }

    fn components(&self, x: &Point) -> Matrix4<f64> {
        let j = self.diag(x);
        Matrix4::from_diagonal(&j.d.into())
    }

    fn gradient(&self, x: &Point) -> MetricGradient {
        let j = self.diag(x);
        let mut out = zero_gradient();
        for k in 0..MAX_DIM {
            out[k] = Matrix4::from_diagonal(&j.dd[k].into());
        }
        out
    }

    fn hessian(&self, x: &Point) -> Option<MetricHessian> {
        let hh = self.diag(x).hh?;
        let mut out = zero_hessian();
        for a in 0..MAX_DIM {
            for b in 0..MAX_DIM {
                out[a][b] = Matrix4::from_diagonal(&hh[a][b].into());
            }
        }
        Some(out)
    }

    fn breakpoints(&self) -> Vec<(usize, f64)> {
        match self.spec {
            MetricSpec::BranchingStatic { dim, .. } => vec![(if dim == 2 { 1 } else { 2 }, 0.0)],
            MetricSpec::KinkedWave { x0, .. } => vec![(1, x0)],
            _ => Vec::new(),
        }
    }

    fn active_axes(&self) -> Vec<usize> {
        match self.spec {
            MetricSpec::Minkowski { .. } => Vec::new(),
            MetricSpec::FlrwToy { .. } | MetricSpec::DeSitterToy { .. } => vec![0],
            MetricSpec::BranchingStatic { dim, .. } => vec![if dim == 2 { 1 } else { 2 }],
            MetricSpec::KinkedWave { .. } => vec![1],
        }
    }
}

/// Human-readable summary of a named metric family.
pub fn describe(name: &str) -> Result<String> {
    let text = match name.to_ascii_lowercase().as_str() {
        "minkowski" => "Minkowski(dim): flat, smooth, Ric=0. g = diag(-1, 1, ..., 1).",
        "flrwtoy" => {
            "FlrwToy(dim, profile): smooth, g = -dt² + a(t)²δ with a = t^p, exp(rt) or cos(wt). \
             Ric(∂t,∂t) = -(n-1)a''/a; a comoving curve is a geodesic."
        }
        "branchingstatic" => {
            "BranchingStatic(alpha, kappa): C^{1,alpha}, g = -dt² + (1 + kappa|y|^{1+alpha})dx² + dy² (+dz²); \
             branching locus y = 0, where the geodesic equation for y is not Lipschitz. \
             Parameters: alpha in (0,1), kappa > 0."
        }
        "kinkedwave" => {
            "KinkedWave(alpha, amplitude, x0): C^{1,alpha}, g = -dt² + dx² + (1 + A|x-x0|^{1+alpha})dy² (+dz²); \
             curvature is an order-1 distribution concentrated near x = x0."
        }
        "desittertoy" => {
            "DeSitterToy(hubble): smooth, g = -dt² + exp(2Ht)δ; Einstein space with Ric = (n-1)H² g, \
             constant sectional curvature H²."
        }
        _ => return Err(LabError::InvalidParameter(format!("unknown metric '{name}'"))),
    };
    Ok(text.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{check_signature, gradient_fd_error, point};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn library() -> Vec<MetricSpec> {
        vec![
            MetricSpec::Minkowski { dim: 4 },
            MetricSpec::Minkowski { dim: 2 },
            MetricSpec::FlrwToy {
                dim: 4,
                profile: ScaleFactor::Power { exponent: 2.0 },
            },
            MetricSpec::FlrwToy {
                dim: 3,
                profile: ScaleFactor::Cosine { frequency: 1.0 },
            },
            MetricSpec::BranchingStatic {
                alpha: 0.5,
                kappa: 1.0,
                dim: 3,
            },
            MetricSpec::BranchingStatic {
                alpha: 0.5,
                kappa: 1.0,
                dim: 2,
            },
            MetricSpec::KinkedWave {
                alpha: 0.5,
                amplitude: 1.0,
                x0: 0.0,
                dim: 4,
            },
            MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 },
        ]
    }

    #[test]
    fn signature_holds_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in library() {
            let g = builtin_metric(&spec).unwrap();
            for _ in 0..1000 {
                let x = g.chart().sample(&mut rng);
                assert!(check_signature(&g.components(&x), g.dim()), "{spec:?} at {x:?}");
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in library() {
            let g = builtin_metric(&spec).unwrap();
            let inner = g.chart().shrink(0.01).unwrap();
            let mut checked = 0;
            while checked < 200 {
                let x = inner.sample(&mut rng);
                if g.breakpoints().iter().any(|&(axis, c)| (x[axis] - c).abs() <= 0.1) {
                    continue;
                }
                assert!(gradient_fd_error(&g, &x, 1e-4) <= 1e-6, "{spec:?} at {x:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn smooth_hessians_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in library().into_iter().filter(|s| s.regularity().is_smooth()) {
            let g = builtin_metric(&spec).unwrap();
            let inner = g.chart().shrink(0.01).unwrap();
            for _ in 0..50 {
                let x = inner.sample(&mut rng);
                let h = g.hessian(&x).unwrap();
                for a in 0..g.dim() {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += 1e-5;
                    xm[a] -= 1e-5;
                    let (gp, gm) = (g.gradient(&xp), g.gradient(&xm));
                    for b in 0..g.dim() {
                        let fd = (gp[b] - gm[b]) / 2e-5;
                        assert!((fd - h[a][b]).amax() <= 1e-5 * (1.0 + h[a][b].amax()));
                    }
                }
            }
        }
    }

    #[test]
    fn branching_gradient_example() {
        let g = builtin_metric(&MetricSpec::BranchingStatic {
            alpha: 0.5,
            kappa: 1.0,
            dim: 3,
        })
        .unwrap();
        let dg = g.gradient(&point(&[0.0, 0.0, 0.04]));
        assert!((dg[2][(1, 1)] - 0.3).abs() < 1e-14);
        let dg = g.gradient(&point(&[0.0, 0.0, -0.04]));
        assert!((dg[2][(1, 1)] + 0.3).abs() < 1e-14);
        assert!(g.hessian(&point(&[0.0, 0.0, 0.5])).is_none());
    }

    #[test]
    fn minkowski_is_constant() {
        let g = builtin_metric(&MetricSpec::Minkowski { dim: 4 }).unwrap();
        let x = point(&[0.3, -1.0, 2.0, 0.1]);
        assert_eq!(
            g.components(&x),
            Matrix4::from_diagonal(&nalgebra::Vector4::new(-1.0, 1.0, 1.0, 1.0))
        );
        assert!(g.gradient(&x).iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn flrw_component() {
        let g = builtin_metric(&MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Power { exponent: 2.0 },
        })
        .unwrap();
        assert!((g.components(&point(&[2.0, 0.0, 0.0, 0.0]))[(1, 1)] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        let bad = [
            MetricSpec::BranchingStatic {
                alpha: 1.0,
                kappa: 1.0,
                dim: 3,
            },
            MetricSpec::BranchingStatic {
                alpha: 0.5,
                kappa: 0.0,
                dim: 3,
            },
            MetricSpec::KinkedWave {
                alpha: 0.0,
                amplitude: 1.0,
                x0: 0.0,
                dim: 4,
            },
            MetricSpec::KinkedWave {
                alpha: 0.5,
                amplitude: 1.0,
                x0: 0.0,
                dim: 2,
            },
            MetricSpec::Minkowski { dim: 5 },
            MetricSpec::DeSitterToy { hubble: -1.0, dim: 4 },
        ];
        for spec in bad {
            assert!(builtin_metric(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        for spec in library() {
            let s = serde_json::to_string(&spec).unwrap();
            let back: MetricSpec = serde_json::from_str(&s).unwrap();
            assert_eq!(back, spec);
        }
        let parsed: MetricSpec =
            serde_json::from_str(r#"{"name":"BranchingStatic","alpha":0.5,"kappa":1.0}"#).unwrap();
        assert_eq!(parsed.dim(), 3);
    }

    #[test]
    fn describe_lookup() {
        assert!(describe("Minkowski").unwrap().contains("flat, smooth, Ric=0"));
        assert!(describe("BranchingStatic").unwrap().contains("y = 0"));
        assert!(describe("DeSitterToy").unwrap().contains("(n-1)H²"));
        assert!(describe("Schwarzschild").is_err());
    }
}
