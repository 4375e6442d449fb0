//! Connection coefficients, pointwise curvature of smooth metrics,
//! distributional Ricci pairings and the energy / genericity checkers.
//!
//! Conventions: `R(X,Y)Z = ∇_X∇_Y Z − ∇_Y∇_X Z − ∇_[X,Y] Z`, stored as
//! `riemann[m][i][j][k] = R^m_ijk`, the `∂_m` component of `R(∂_j,∂_k)∂_i`.
//! `Ric_ij = R^m_imj` and `S = g^ij Ric_ij`.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geodesics::{FrameField, GeodesicSolution};
use crate::geometry::{
    inner, inverse_metric, orthonormal_basis, ChartBox, MetricField, MetricGradient, MetricJet,
    Point, Vector, VectorField, MAX_DIM,
};
use crate::mollify::{FamilyMember, MollifiedFamily, MollifiedMetric};
use crate::quadrature::{graded_rule, Rule1d};

/// `gamma[k][i][j] = Γ^k_ij`.
pub type Christoffel = [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM];
/// `riemann[m][i][j][k] = R^m_ijk`.
pub type Riemann = [[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];

pub fn christoffel_from(dim: usize, ginv: &Matrix4<f64>, dg: &MetricGradient) -> Christoffel {
    let mut lower = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
    for l in 0..dim {
        for i in 0..dim {
            for j in i..dim {
                let v = 0.5 * (dg[i][(l, j)] + dg[j][(i, l)] - dg[l][(i, j)]);
                lower[l][i][j] = v;
                lower[l][j][i] = v;
            }
        }
    }
    let mut gamma = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
    for k in 0..dim {
        for i in 0..dim {
            for j in i..dim {
                let v: f64 = (0..dim).map(|l| ginv[(k, l)] * lower[l][i][j]).sum();
                gamma[k][i][j] = v;
                gamma[k][j][i] = v;
            }
        }
    }
    gamma
}

pub fn christoffel_at(g: &dyn MetricField, x: &Point) -> Result<Christoffel> {
    if !g.chart().contains(x) {
        return Err(LabError::outside(x, g.dim()));
    }
    let (gm, dg) = g.first_jet(x);
    let ginv = inverse_metric(&gm, x, g.dim())?;
    Ok(christoffel_from(g.dim(), &ginv, &dg))
}

/// Largest `|∂_k g_ij − Γ^l_ki g_lj − Γ^l_kj g_il|` at `x`.
pub fn metricity_residual(g: &dyn MetricField, x: &Point) -> Result<f64> {
    let n = g.dim();
    let (gm, dg) = g.first_jet(x);
    let ginv = inverse_metric(&gm, x, n)?;
    let gam = christoffel_from(n, &ginv, &dg);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut r = dg[k][(i, j)];
                for l in 0..n {
                    r -= gam[l][k][i] * gm[(l, j)] + gam[l][k][j] * gm[(i, l)];
                }
                worst = worst.max(r.abs());
            }
        }
    }
    Ok(worst)
}

/// Pointwise curvature of a metric with second derivatives.
#[derive(Debug, Clone)]
pub struct CurvatureAt {
    pub dim: usize,
    pub g: Matrix4<f64>,
    pub ginv: Matrix4<f64>,
    pub christoffel: Christoffel,
    pub riemann: Riemann,
    pub ricci: Matrix4<f64>,
    pub scalar: f64,
}

pub fn curvature_from_jet(dim: usize, x: &Point, jet: &MetricJet) -> Result<CurvatureAt> {
    let ddg = jet.ddg.as_ref().ok_or_else(|| {
        LabError::NotSmooth("pointwise curvature needs second derivatives".into())
    })?;
    let n = dim;
    let ginv = inverse_metric(&jet.g, x, n)?;
    let gam = christoffel_from(n, &ginv, &jet.dg);
    // dgam[a][k][i][j] = ∂_a Γ^k_ij
    let mut dgam = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];
    for a in 0..n {
        let dginv = -(ginv * jet.dg[a] * ginv);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut v = 0.0;
                    for l in 0..n {
                        let f = jet.dg[i][(l, j)] + jet.dg[j][(i, l)] - jet.dg[l][(i, j)];
                        let df = ddg[a][i][(l, j)] + ddg[a][j][(i, l)] - ddg[a][l][(i, j)];
                        v += 0.5 * (dginv[(k, l)] * f + ginv[(k, l)] * df);
                    }
                    dgam[a][k][i][j] = v;
                    dgam[a][k][j][i] = v;
                }
            }
        }
    }
    let mut riem = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut v = dgam[j][m][i][k] - dgam[k][m][i][j];
                    for s in 0..n {
                        v += gam[m][j][s] * gam[s][i][k] - gam[m][k][s] * gam[s][i][j];
                    }
                    riem[m][i][j][k] = v;
                }
            }
        }
    }
    let mut ricci = Matrix4::zeros();
    for i in 0..n {
        for j in 0..n {
            ricci[(i, j)] = (0..n).map(|m| riem[m][i][m][j]).sum();
        }
    }
    let scalar = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| ginv[(i, j)] * ricci[(i, j)])
        .sum();
    Ok(CurvatureAt {
        dim: n,
        g: jet.g,
        ginv,
        christoffel: gam,
        riemann: riem,
        ricci,
        scalar,
    })
}

pub fn curvature_at(g: &dyn MetricField, x: &Point) -> Result<CurvatureAt> {
    if !g.chart().contains(x) {
        return Err(LabError::outside(x, g.dim()));
    }
    if !g.regularity().is_smooth() {
        return Err(LabError::NotSmooth(format!(
            "{} is not smooth; pair its curvature distributionally",
            g.label()
        )));
    }
    curvature_from_jet(g.dim(), x, &g.jet(x))
}

/// Coordinate-formula Ricci tensor of a smooth metric.
pub fn ricci_smooth(g: &dyn MetricField, x: &Point) -> Result<Matrix4<f64>> {
    Ok(curvature_at(g, x)?.ricci)
}

impl CurvatureAt {
    /// `R(X,Y)Z`.
    pub fn action(&self, x: &Vector, y: &Vector, z: &Vector) -> Vector {
        let n = self.dim;
        let mut out = Vector::zeros();
        for m in 0..n {
            let mut v = 0.0;
            for i in 0..n {
                if z[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    for k in 0..n {
                        v += self.riemann[m][i][j][k] * z[i] * x[j] * y[k];
                    }
                }
            }
            out[m] = v;
        }
        out
    }

    /// `g(R(X,V)V, X)`.
    pub fn sectional_form(&self, x: &Vector, v: &Vector) -> f64 {
        inner(&self.g, &self.action(x, v, v), x)
    }

    /// `Ric(X,Y)` from the coordinate tensor.
    pub fn ric(&self, x: &Vector, y: &Vector) -> f64 {
        inner(&self.ricci, x, y)
    }

    /// Ricci tensor assembled as `Σ_a ε_a g(R(E_a,∂_i)∂_j, E_a)` over a
    /// g-orthonormal frame.
    pub fn ricci_by_frame(&self) -> Option<Matrix4<f64>> {
        let n = self.dim;
        let (frame, signs) = orthonormal_basis(&self.g, n, &[])?;
        let mut out = Matrix4::zeros();
        let axis = |a: usize| {
            let mut e = Vector::zeros();
            e[a] = 1.0;
            e
        };
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = frame
                    .iter()
                    .zip(&signs)
                    .map(|(e, s)| s * inner(&self.g, &self.action(e, &axis(i), &axis(j)), e))
                    .sum();
            }
        }
        Some(out)
    }

    /// Largest `|R^m_ijk + R^m_jki + R^m_kij|`.
    pub fn bianchi_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for m in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let r = &self.riemann[m];
                        worst = worst.max((r[i][j][k] + r[j][k][i] + r[k][i][j]).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Product of one-dimensional bumps `b(s) ∝ exp(-1/(1-s²))`, unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDensity {
    dim: usize,
    center: Point,
    widths: Point,
}

/// `∫_{-1}^{1} exp(-1/(1-s²)) ds`.
fn bump_mass() -> f64 {
    static MASS: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *MASS.get_or_init(|| {
        graded_rule(-1.0, 1.0, 2, 16, &[(-1.0, 0.01), (1.0, 0.01)]).integrate(|s| bump(s).0)
    })
}

fn bump(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let w = 1.0 - s * s;
    let v = (-1.0 / w).exp();
    (v, -2.0 * s * v / (w * w))
}

impl TestDensity {
    pub fn new(center: &[f64], widths: &[f64]) -> Result<Self> {
        if center.len() != widths.len() || !(2..=MAX_DIM).contains(&center.len()) {
            return Err(LabError::InvalidParameter(
                "test density needs matching center and widths of length 2..=4".into(),
            ));
        }
        if widths.iter().any(|w| !(*w > 0.0)) {
            return Err(LabError::InvalidParameter("test density widths must be positive".into()));
        }
        Ok(TestDensity {
            dim: center.len(),
            center: crate::geometry::point(center),
            widths: crate::geometry::point(widths),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self) -> &Point {
        &self.center
    }

    pub fn support(&self) -> ChartBox {
        let lo: Vec<f64> = (0..self.dim).map(|a| self.center[a] - self.widths[a]).collect();
        let hi: Vec<f64> = (0..self.dim).map(|a| self.center[a] + self.widths[a]).collect();
        ChartBox::new(&lo, &hi).expect("positive widths")
    }

    pub fn value(&self, x: &Point) -> f64 {
        let z = bump_mass();
        (0..self.dim)
            .map(|a| bump((x[a] - self.center[a]) / self.widths[a]).0 / (z * self.widths[a]))
            .product()
    }

    pub fn gradient(&self, x: &Point) -> Vector {
        let z = bump_mass();
        let parts: Vec<(f64, f64)> = (0..self.dim)
            .map(|a| {
                let (v, d) = bump((x[a] - self.center[a]) / self.widths[a]);
                let s = z * self.widths[a];
                (v / s, d / (s * self.widths[a]))
            })
            .collect();
        let mut out = Vector::zeros();
        for a in 0..self.dim {
            out[a] = (0..self.dim)
                .map(|b| if a == b { parts[b].1 } else { parts[b].0 })
                .product();
        }
        out
    }

    fn check_inside(&self, chart: &ChartBox) -> Result<()> {
        let s = self.support();
        if chart.boundary_distance(s.lower()) > 0.0 && chart.boundary_distance(s.upper()) > 0.0 {
            Ok(())
        } else {
            Err(LabError::Precondition(
                "test density support must lie strictly inside the chart".into(),
            ))
        }
    }
}

/// Tensor-product quadrature settings for pairings over a density's support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingQuadrature {
    pub nodes: usize,
    pub panels: usize,
    /// Smallest panel width of the grading toward metric breakpoints.
    pub kink_grading: f64,
    /// Smallest panel width near the edge of the support, relative to the
    /// half-width.
    pub edge_grading: f64,
    /// Single-panel nodes on axes the metric does not depend on.
    pub hidden_nodes: usize,
}

impl Default for PairingQuadrature {
    fn default() -> Self {
        PairingQuadrature {
            nodes: 12,
            panels: 2,
            kink_grading: 1e-5,
            edge_grading: 0.05,
            hidden_nodes: 32,
        }
    }
}

fn density_rules(
    omega: &TestDensity,
    active: &[usize],
    breaks: &[(usize, f64)],
    q: &PairingQuadrature,
) -> Vec<Rule1d> {
    (0..omega.dim)
        .map(|a| {
            let (c, w) = (omega.center[a], omega.widths[a]);
            if !active.contains(&a) {
                return graded_rule(c - w, c + w, 1, q.hidden_nodes, &[]);
            }
            let mut b: Vec<(f64, f64)> = vec![(c - w, q.edge_grading * w), (c + w, q.edge_grading * w)];
            b.extend(
                breaks
                    .iter()
                    .filter(|(axis, p)| *axis == a && (p - c).abs() < w)
                    .map(|(_, p)| (*p, q.kink_grading)),
            );
            graded_rule(c - w, c + w, q.panels, q.nodes, &b)
        })
        .collect()
}

/// Key from the active coordinates of `x`, for reusing metric evaluations
/// at nodes that differ only along axes the metric ignores.
fn active_key(active: &[usize], x: &Point) -> [u64; MAX_DIM] {
    let mut key = [u64::MAX; MAX_DIM];
    for &a in active {
        key[a] = x[a].to_bits();
    }
    key
}

/// Evaluates `f` once per distinct active-coordinate tuple among `points`.
fn eval_by_active<T, F>(g: &dyn MetricField, points: &[Point], f: F) -> Result<Vec<std::sync::Arc<T>>>
where
    T: Send + Sync,
    F: Fn(&Point) -> Result<T> + Send + Sync,
{
    let active = g.active_axes();
    let mut index: HashMap<[u64; MAX_DIM], usize> = HashMap::new();
    let mut reps: Vec<Point> = Vec::new();
    let slots: Vec<usize> = points
        .iter()
        .map(|x| {
            *index.entry(active_key(&active, x)).or_insert_with(|| {
                reps.push(*x);
                reps.len() - 1
            })
        })
        .collect();
    let values = reps
        .par_iter()
        .map(|x| f(x).map(std::sync::Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(slots.into_iter().map(|i| values[i].clone()).collect())
}

/// Discrete mass of `ω` under the product rule; pairings divide by it.
fn discrete_mass(omega: &TestDensity, rules: &[Rule1d]) -> f64 {
    let z = bump_mass();
    rules
        .iter()
        .enumerate()
        .map(|(a, r)| {
            let (c, w) = (omega.center[a], omega.widths[a]);
            r.integrate(|s| bump((s - c) / w).0 / (z * w))
        })
        .product()
}

fn tensor_nodes(rules: &[Rule1d]) -> (Vec<Point>, Vec<f64>) {
    let total: usize = rules.iter().map(|r| r.len()).product();
    let mut pts = Vec::with_capacity(total);
    let mut wts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = Point::zeros();
        let mut w = 1.0;
        for (a, r) in rules.iter().enumerate() {
            let i = rem % r.len();
            rem /= r.len();
            x[a] = r.nodes[i];
            w *= r.weights[i];
        }
        pts.push(x);
        wts.push(w);
    }
    (pts, wts)
}

/// `⟨Ric(X,X), ω⟩` for a C¹ metric, with the derivatives of Γ moved onto
/// `X^i X^j ω` by one integration by parts.
pub fn pair_ricci(
    g: &dyn MetricField,
    field: &dyn VectorField,
    omega: &TestDensity,
    quad: &PairingQuadrature,
) -> Result<f64> {
    omega.check_inside(g.chart())?;
    let n = g.dim();
    let rules = density_rules(omega, &g.active_axes(), &g.breakpoints(), quad);
    let (pts, wts) = tensor_nodes(&rules);
    let gammas = eval_by_active(g, &pts, |x| christoffel_at(g, x))?;
    let terms = pts
        .par_iter()
        .zip(wts.par_iter())
        .zip(gammas.par_iter())
        .map(|((x, w), gam)| -> Result<f64> {
            let om = omega.value(x);
            let dom = omega.gradient(x);
            if om == 0.0 && dom.iter().all(|d| *d == 0.0) {
                return Ok(0.0);
            }
            let xv = field.value(x);
            let dx = field.derivative(x).ok_or_else(|| {
                LabError::Precondition("pairing needs the derivative of X".into())
            })?;
            // ∂_m (X^i X^j ω)
            let dphi = |i: usize, j: usize, m: usize| {
                dx[(i, m)] * xv[j] * om + xv[i] * dx[(j, m)] * om + xv[i] * xv[j] * dom[m]
            };
            let gam = gam.as_ref();
            let mut v = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let phi = xv[i] * xv[j] * om;
                    let mut t = 0.0;
                    for m in 0..n {
                        t -= gam[m][i][j] * dphi(i, j, m);
                        t += gam[m][i][m] * dphi(i, j, j);
                        for s in 0..n {
                            t += (gam[m][m][s] * gam[s][i][j] - gam[m][j][s] * gam[s][i][m]) * phi;
                        }
                    }
                    v += t;
                }
            }
            Ok(w * v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(terms.iter().sum::<f64>() / discrete_mass(omega, &rules))
}

/// `∫ Ric(X,X) ω` by direct quadrature of the pointwise Ricci tensor of a
/// smooth metric. `breaks` adds panel boundaries (for a mollified metric,
/// those of its source).
pub fn pair_ricci_pointwise(
    g: &dyn MetricField,
    field: &dyn VectorField,
    omega: &TestDensity,
    quad: &PairingQuadrature,
    breaks: &[(usize, f64)],
) -> Result<f64> {
    omega.check_inside(g.chart())?;
    let mut all = g.breakpoints();
    all.extend_from_slice(breaks);
    let rules = density_rules(omega, &g.active_axes(), &all, quad);
    let (pts, wts) = tensor_nodes(&rules);
    let curv = eval_by_active(g, &pts, |x| curvature_at(g, x).map(|c| c.ricci))?;
    let sum: f64 = pts
        .par_iter()
        .zip(wts.par_iter())
        .zip(curv.par_iter())
        .map(|((x, w), ric)| {
            let om = omega.value(x);
            if om == 0.0 {
                return 0.0;
            }
            let xv = field.value(x);
            w * inner(ric, &xv, &xv) * om
        })
        .sum();
    Ok(sum / discrete_mass(omega, &rules))
}

/// Which smooth member of a family a check evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MemberKind {
    Plain,
    #[default]
    Narrow,
    Wide,
}

impl MemberKind {
    pub fn pick<'a>(&self, m: &'a FamilyMember) -> &'a MollifiedMetric {
        match self {
            MemberKind::Plain => &m.plain,
            MemberKind::Narrow => &m.narrow,
            MemberKind::Wide => &m.wide,
        }
    }
}

/// `⟨Ric[member_ε](X,X), ω⟩` for every ε of the family.
pub fn pair_ricci_family(
    fam: &MollifiedFamily,
    kind: MemberKind,
    field: &dyn VectorField,
    omega: &TestDensity,
    quad: &PairingQuadrature,
) -> Result<Vec<f64>> {
    let breaks = fam.source.breakpoints();
    fam.members
        .iter()
        .map(|m| pair_ricci_pointwise(kind.pick(m), field, omega, quad, &breaks))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub direction: Vec<f64>,
}

/// Report shape shared by the energy and genericity checkers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub epsilon_grid: Vec<f64>,
    pub min_value: Vec<f64>,
    pub witness: Vec<Witness>,
    pub threshold: f64,
    pub pass_per_epsilon: Vec<bool>,
    /// Largest ε in the grid such that every grid ε ≤ it passes.
    pub epsilon0: Option<f64>,
    pub pass: bool,
}

impl ConditionReport {
    fn finish(condition: &str, grid: Vec<f64>, mins: Vec<(f64, Witness)>, threshold: f64) -> Self {
        let pass_per: Vec<bool> = mins.iter().map(|(v, _)| *v > threshold).collect();
        let mut epsilon0 = None;
        for (i, eps) in grid.iter().enumerate().rev() {
            if pass_per[i] {
                epsilon0 = Some(*eps);
            } else {
                break;
            }
        }
        ConditionReport {
            condition: condition.into(),
            epsilon_grid: grid,
            min_value: mins.iter().map(|m| m.0).collect(),
            witness: mins.into_iter().map(|m| m.1).collect(),
            threshold,
            pass_per_epsilon: pass_per,
            pass: epsilon0.is_some(),
            epsilon0,
        }
    }
}

/// Lattice and direction settings for energy-condition scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanLattice {
    /// Points per axis; `None` means `floor(729^(1/n))`.
    pub points_per_axis: Option<usize>,
    pub directions: usize,
    pub rapidities: usize,
}

impl Default for ScanLattice {
    fn default() -> Self {
        ScanLattice {
            points_per_axis: None,
            directions: 32,
            rapidities: 6,
        }
    }
}

impl ScanLattice {
    fn per_axis(&self, dim: usize) -> usize {
        self.points_per_axis
            .unwrap_or_else(|| (729f64.powf(1.0 / dim as f64) + 1e-9).floor() as usize)
    }
}

/// Unit spatial directions: Fibonacci sphere (n = 4), equally spaced
/// circle (n = 3) or `±∂_x` (n = 2).
pub fn spatial_directions(dim: usize, count: usize) -> Vec<Vector> {
    let count = count.max(1);
    match dim {
        2 => vec![Vector::new(0.0, 1.0, 0.0, 0.0), Vector::new(0.0, -1.0, 0.0, 0.0)],
        3 => (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                Vector::new(0.0, a.cos(), a.sin(), 0.0)
            })
            .collect(),
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    Vector::new(0.0, r * phi.cos(), r * phi.sin(), z)
                })
                .collect()
        }
    }
}

/// Positive root `λ` of `h(T + λe, T + λe) = 0`.
fn null_speed(h: &Matrix4<f64>, t: &Vector, e: &Vector) -> Option<f64> {
    let a = inner(h, e, e);
    let b = inner(h, t, e);
    let c = inner(h, t, t);
    (a > 0.0 && c < 0.0).then(|| (-b + (b * b - a * c).sqrt()) / a)
}

fn member_ricci(member: &MollifiedMetric, pts: &[Point]) -> Result<Vec<std::sync::Arc<CurvatureAt>>> {
    eval_by_active(member, pts, |x| curvature_from_jet(member.dim(), x, &member.try_jet(x)?))
}

/// Scans `X` with `g(X,X) ≤ κ` and `‖X‖ ≤ c_bound` over a point and
/// direction lattice on `k`, and reports `min Ric[ǧ_ε](X,X)` per ε against
/// `−δ`.
pub fn check_timelike_ec(
    fam: &MollifiedFamily,
    k: &ChartBox,
    kappa: f64,
    c_bound: f64,
    delta: f64,
    lattice: &ScanLattice,
) -> Result<ConditionReport> {
    if !(kappa < 0.0) || !(delta > 0.0) || !(c_bound > 0.0) {
        return Err(LabError::InvalidParameter(
            "timelike scan needs kappa < 0, delta > 0, c_bound > 0".into(),
        ));
    }
    if !fam.margin_box.contains_box(k) {
        return Err(LabError::InvalidParameter("scan box must lie in the margin box".into()));
    }
    let n = fam.source.dim();
    let pts = k.grid(lattice.per_axis(n));
    let dirs = spatial_directions(n, lattice.directions);
    let time = fam.source.time_field(&k.center());
    let mut mins = Vec::new();
    for member in &fam.members {
        let curv = member_ricci(&member.narrow, &pts)?;
        let best = pts
            .par_iter()
            .zip(curv.par_iter())
            .map(|(x, c)| {
                let g = fam.source.components(x);
                let mut best = (f64::INFINITY, Witness { point: vec![], direction: vec![] });
                for e in &dirs {
                    let Some(lam) = null_speed(&g, &time, e) else { continue };
                    for r in 0..lattice.rapidities {
                        let u = time + e * (lam * (r as f64 / lattice.rapidities as f64 * 2.5).tanh());
                        let gu = inner(&g, &u, &u);
                        if !(gu < 0.0) {
                            continue;
                        }
                        let lo = kappa / gu;
                        let hi = c_bound * c_bound / u.norm_squared();
                        if lo > hi {
                            continue;
                        }
                        let ric = c.ric(&u, &u);
                        let s = if ric >= 0.0 { lo } else { hi };
                        let v = s * ric;
                        if v < best.0 {
                            best = (
                                v,
                                Witness {
                                    point: x.iter().take(n).copied().collect(),
                                    direction: (u * s.sqrt()).iter().take(n).copied().collect(),
                                },
                            );
                        }
                    }
                }
                best
            })
            .reduce_with(|a, b| if b.0 < a.0 { b } else { a })
            .unwrap_or((f64::INFINITY, Witness { point: vec![], direction: vec![] }));
        mins.push(best);
    }
    Ok(ConditionReport::finish("timelike-energy", fam.epsilons(), mins, -delta))
}

/// Scans ǧ_ε-null `X` with `c1 ≤ ‖X‖ ≤ c2` and reports
/// `min Ric[ǧ_ε](X,X)` per ε against `−δ`.
pub fn check_null_ec(
    fam: &MollifiedFamily,
    k: &ChartBox,
    c1: f64,
    c2: f64,
    delta: f64,
    lattice: &ScanLattice,
) -> Result<ConditionReport> {
    if !(0.0 < c1 && c1 < c2) || !(delta > 0.0) {
        return Err(LabError::InvalidParameter(
            "null scan needs 0 < c1 < c2 and delta > 0".into(),
        ));
    }
    if !fam.margin_box.contains_box(k) {
        return Err(LabError::InvalidParameter("scan box must lie in the margin box".into()));
    }
    let n = fam.source.dim();
    let pts = k.grid(lattice.per_axis(n));
    let dirs = spatial_directions(n, lattice.directions);
    let time = fam.source.time_field(&k.center());
    let mut mins = Vec::new();
    for member in &fam.members {
        let curv = member_ricci(&member.narrow, &pts)?;
        let best = pts
            .par_iter()
            .zip(curv.par_iter())
            .map(|(x, c)| {
                let mut best = (f64::INFINITY, Witness { point: vec![], direction: vec![] });
                for e in &dirs {
                    let Some(lam) = null_speed(&c.g, &time, e) else { continue };
                    let u = time + e * lam;
                    let ric = c.ric(&u, &u);
                    let norm = u.norm();
                    let s = if ric >= 0.0 { c1 / norm } else { c2 / norm };
                    let v = s * s * ric;
                    if v < best.0 {
                        best = (
                            v,
                            Witness {
                                point: x.iter().take(n).copied().collect(),
                                direction: (u * s).iter().take(n).copied().collect(),
                            },
                        );
                    }
                }
                best
            })
            .reduce_with(|a, b| if b.0 < a.0 { b } else { a })
            .unwrap_or((f64::INFINITY, Witness { point: vec![], direction: vec![] }));
        mins.push(best);
    }
    Ok(ConditionReport::finish("null-energy", fam.epsilons(), mins, -delta))
}

/// Settings of the sampled genericity certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenericityOptions {
    pub delta_perturb: f64,
    pub c: f64,
    pub perturbations: usize,
    pub seed: u64,
    /// Parameter samples along the curve.
    pub curve_samples: usize,
    /// Coordinate offset of the tube lattice around the curve.
    pub tube_radius: f64,
    pub member: MemberKind,
    /// Allowed `|g(V, γ̇)| / (|V||γ̇|)` along the curve.
    pub orthogonality_tol: f64,
}

impl Default for GenericityOptions {
    fn default() -> Self {
        GenericityOptions {
            delta_perturb: 0.01,
            c: 0.5,
            perturbations: 32,
            seed: 0,
            curve_samples: 9,
            tube_radius: 0.05,
            member: MemberKind::Narrow,
            orthogonality_tol: 1e-6,
        }
    }
}

/// Smooth bump-modulated perturbation field with sup norm below `amplitude`.
#[derive(Debug, Clone)]
struct BumpPerturbation {
    center: Point,
    radius: f64,
    direction: Vector,
}

impl BumpPerturbation {
    fn random<R: Rng>(rng: &mut R, dim: usize, near: &[Point], amplitude: f64) -> Self {
        let base = near[rng.gen_range(0..near.len())];
        let mut center = base;
        let mut direction = Vector::zeros();
        for a in 0..dim {
            center[a] += rng.gen_range(-0.1..0.1);
            direction[a] = rng.gen_range(-1.0..1.0);
        }
        let norm = direction.norm().max(1e-12);
        BumpPerturbation {
            center,
            radius: rng.gen_range(0.1..0.5),
            direction: direction * (0.999 * amplitude * rng.gen_range(0.5..1.0) / norm),
        }
    }

    fn value(&self, x: &Point) -> Vector {
        let s2 = (x - self.center).norm_squared() / (self.radius * self.radius);
        if s2 >= 1.0 {
            return Vector::zeros();
        }
        self.direction * (1.0 - 1.0 / (1.0 - s2)).exp()
    }
}

/// Sampled certificate for `g_ε(R_ε(X̃,Ṽ)Ṽ,X̃) > c/2` on a tube around the
/// curve, for perturbed fields within `δ_perturb` of `X` and `V`.
pub fn check_genericity(
    fam: &MollifiedFamily,
    gamma: &GeodesicSolution,
    x_field: &dyn VectorField,
    v_field: &dyn VectorField,
    opts: &GenericityOptions,
) -> Result<ConditionReport> {
    if !(opts.delta_perturb > 0.0) {
        return Err(LabError::InvalidParameter("delta_perturb must be positive".into()));
    }
    let n = fam.source.dim();
    let (a, b) = gamma.t_bounds();
    let m = opts.curve_samples.max(2);
    let params: Vec<f64> = (0..m).map(|i| a + (b - a) * (i as f64 + 0.5) / m as f64).collect();
    let mut centers = Vec::new();
    for &t in &params {
        let x = gamma.position(t);
        let vel = gamma.velocity(t);
        let g = fam.source.components(&x);
        let v = v_field.value(&x);
        let scale = v.norm() * vel.norm();
        if scale == 0.0 || inner(&g, &v, &vel).abs() > opts.orthogonality_tol * scale {
            return Err(LabError::Precondition(format!(
                "V is not orthogonal to the curve velocity at t = {t}"
            )));
        }
        centers.push(x);
    }
    let mut lattice = Vec::new();
    for c in &centers {
        lattice.push(*c);
        for axis in 0..n {
            for sgn in [-1.0, 1.0] {
                let mut p = *c;
                p[axis] += sgn * opts.tube_radius;
                lattice.push(p);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let perturb: Vec<(BumpPerturbation, BumpPerturbation)> = (0..opts.perturbations)
        .map(|_| {
            (
                BumpPerturbation::random(&mut rng, n, &centers, opts.delta_perturb),
                BumpPerturbation::random(&mut rng, n, &centers, opts.delta_perturb),
            )
        })
        .collect();
    let mut mins = Vec::new();
    for member in &fam.members {
        let metric = opts.member.pick(member);
        let pts: Vec<Point> = lattice
            .iter()
            .copied()
            .filter(|p| metric.chart().contains(p))
            .collect();
        if pts.is_empty() {
            return Err(LabError::Precondition("tube lattice leaves the margin box".into()));
        }
        let curv = member_ricci(metric, &pts)?;
        let best = pts
            .par_iter()
            .zip(curv.par_iter())
            .map(|(x, c)| {
                let x0 = x_field.value(x);
                let v0 = v_field.value(x);
                let mut best = (c.sectional_form(&x0, &v0), Witness {
                    point: x.iter().take(n).copied().collect(),
                    direction: x0.iter().take(n).copied().collect(),
                });
                for (px, pv) in &perturb {
                    let xt = x0 + px.value(x);
                    let vt = v0 + pv.value(x);
                    let val = c.sectional_form(&xt, &vt);
                    if val < best.0 {
                        best = (
                            val,
                            Witness {
                                point: x.iter().take(n).copied().collect(),
                                direction: xt.iter().take(n).copied().collect(),
                            },
                        );
                    }
                }
                best
            })
            .reduce_with(|a, b| if b.0 < a.0 { b } else { a })
            .expect("nonempty lattice");
        mins.push(best);
    }
    Ok(ConditionReport::finish("genericity", fam.epsilons(), mins, opts.c / 2.0))
}

/// `[R](t)_ij = g(R(E_i, γ̇)γ̇, E_j)` over the perpendicular legs of `frame`.
pub fn tidal_force_matrix(
    metric: &dyn MetricField,
    gamma: &GeodesicSolution,
    frame: &FrameField,
    t: f64,
) -> Result<DMatrix<f64>> {
    let x = gamma.position(t);
    let vel = gamma.velocity(t);
    let legs = frame.perp_legs(t);
    let curv = curvature_at(metric, &x)?;
    tidal_matrix_at(&curv, &vel, &legs)
}

/// Tidal matrix from pointwise curvature, velocity and orthonormal legs.
pub fn tidal_matrix_at(curv: &CurvatureAt, vel: &Vector, legs: &[Vector]) -> Result<DMatrix<f64>> {
    let d = legs.len();
    for i in 0..d {
        for j in 0..d {
            let want = if i == j { 1.0 } else { 0.0 };
            let got = inner(&curv.g, &legs[i], &legs[j]);
            if (got - want).abs() > 1e-8 {
                return Err(LabError::Precondition(format!(
                    "frame not orthonormal: g(E{i},E{j}) = {got}"
                )));
            }
        }
    }
    let rv: Vec<Vector> = legs.iter().map(|e| curv.action(e, vel, vel)).collect();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = inner(&curv.g, &rv[i], &legs[j]);
        }
    }
    Ok(out)
}

/// True iff `M − diag(c̃, −C, …, −C)` is positive definite for every sample.
pub fn tidal_lower_bound_check(samples: &[DMatrix<f64>], c_tilde: f64, big_c: f64) -> bool {
    samples.iter().all(|m| {
        let d = m.nrows();
        let mut shifted = m.clone();
        for i in 0..d {
            shifted[(i, i)] -= if i == 0 { c_tilde } else { -big_c };
        }
        let sym = (&shifted + shifted.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().all(|l| *l > 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_metric, point, ConstantField, MetricSpec, ScaleFactor};
    use crate::mollify::{build_family, Mollifier};
    use std::sync::Arc;

    fn metric(spec: MetricSpec) -> crate::geometry::BuiltinMetric {
        builtin_metric(&spec).unwrap()
    }

    #[test]
    fn christoffel_examples() {
        let flat = metric(MetricSpec::Minkowski { dim: 4 });
        let gam = christoffel_at(&flat, &point(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        assert!(gam.iter().flatten().flatten().all(|v| *v == 0.0));

        let flrw = metric(MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Power { exponent: 1.0 },
        });
        let gam = christoffel_at(&flrw, &point(&[2.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((gam[1][0][1] - 0.5).abs() < 1e-14);
        assert!((gam[0][1][1] - 2.0).abs() < 1e-14);

        let br = metric(MetricSpec::BranchingStatic {
            alpha: 0.5,
            kappa: 1.0,
            dim: 3,
        });
        let gam = christoffel_at(&br, &point(&[0.0, 0.0, 0.04])).unwrap();
        assert!((gam[2][1][1] + 0.15).abs() < 1e-14);
    }

    #[test]
    fn de_sitter_is_einstein() {
        let ds = metric(MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 });
        for x in [point(&[0.0, 0.0, 0.0, 0.0]), point(&[0.7, -0.3, 1.0, 0.2])] {
            let c = curvature_at(&ds, &x).unwrap();
            assert!((c.ricci - c.g * 3.0).amax() < 1e-12);
            assert!((c.scalar - 12.0).abs() < 1e-12);
        }
        let c = curvature_at(&ds, &Point::zeros()).unwrap();
        assert!((c.ricci[(0, 0)] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn flrw_power_law_ricci() {
        let flrw = metric(MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Power { exponent: 2.0 },
        });
        let ric = ricci_smooth(&flrw, &point(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((ric[(0, 0)] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn symmetries_and_frame_route() {
        let specs = [
            MetricSpec::DeSitterToy { hubble: 0.7, dim: 4 },
            MetricSpec::FlrwToy {
                dim: 3,
                profile: ScaleFactor::Cosine { frequency: 1.0 },
            },
        ];
        for spec in specs {
            let g = metric(spec);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..20 {
                let x = g.chart().shrink(0.1).unwrap().sample(&mut rng);
                let c = curvature_at(&g, &x).unwrap();
                assert!(c.bianchi_residual() < 1e-8);
                assert!((c.ricci - c.ricci.transpose()).amax() < 1e-10);
                for m in 0..4 {
                    for i in 0..4 {
                        for j in 0..4 {
                            for k in 0..4 {
                                assert!((c.riemann[m][i][j][k] + c.riemann[m][i][k][j]).abs() < 1e-12);
                            }
                        }
                    }
                }
                let frame = c.ricci_by_frame().unwrap();
                assert!((frame - c.ricci).amax() < 1e-8);
                assert!(metricity_residual(&g, &x).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn non_smooth_metrics_refuse_pointwise_curvature() {
        let kw = metric(MetricSpec::KinkedWave {
            alpha: 0.5,
            amplitude: 1.0,
            x0: 0.0,
            dim: 4,
        });
        assert!(matches!(curvature_at(&kw, &Point::zeros()), Err(LabError::NotSmooth(_))));
    }

    #[test]
    fn density_has_unit_mass() {
        let om = TestDensity::new(&[0.0, 0.3], &[0.5, 0.25]).unwrap();
        let q = PairingQuadrature::default();
        let rules = density_rules(&om, &[0, 1], &[], &q);
        let (pts, wts) = tensor_nodes(&rules);
        let mass: f64 = pts.iter().zip(&wts).map(|(x, w)| w * om.value(x)).sum();
        assert!((mass - 1.0).abs() < 1e-10);
        assert!((discrete_mass(&om, &density_rules(&om, &[0], &[], &q)) - 1.0).abs() < 1e-7);
        let x = point(&[0.1, 0.35]);
        let h = 1e-6;
        let fd = (om.value(&point(&[0.1 + h, 0.35])) - om.value(&point(&[0.1 - h, 0.35]))) / (2.0 * h);
        assert!((fd - om.gradient(&x)[0]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn minkowski_pairing_vanishes() {
        let flat = metric(MetricSpec::Minkowski { dim: 3 });
        let om = TestDensity::new(&[0.0, 0.0, 0.0], &[0.5, 0.5, 0.5]).unwrap();
        let x = ConstantField(Vector::new(1.0, 0.3, 0.2, 0.0));
        let v = pair_ricci(&flat, &x, &om, &PairingQuadrature::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn smooth_pairing_agrees_with_pointwise() {
        let ds = metric(MetricSpec::FlrwToy {
            dim: 3,
            profile: ScaleFactor::Power { exponent: 2.0 },
        });
        let om = TestDensity::new(&[1.5, 0.1, -0.2], &[0.4, 0.5, 0.5]).unwrap();
        let field = crate::geometry::FnField::with_derivative(
            |x| Vector::new(1.0, 0.2 * x[0], 0.1, 0.0),
            |_| {
                let mut d = Matrix4::zeros();
                d[(1, 0)] = 0.2;
                d
            },
            crate::geometry::FieldRegularity::Smooth,
        );
        let q = PairingQuadrature::default();
        let a = pair_ricci(&ds, &field, &om, &q).unwrap();
        let b = pair_ricci_pointwise(&ds, &field, &om, &q, &[]).unwrap();
        assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn de_sitter_pairing_is_average_of_pointwise() {
        let ds = metric(MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 });
        let om = TestDensity::new(&[0.0, 0.0, 0.0, 0.0], &[0.05, 0.05, 0.05, 0.05]).unwrap();
        let x = ConstantField(Vector::new(1.0, 0.0, 0.0, 0.0));
        let v = pair_ricci(&ds, &x, &om, &PairingQuadrature::default()).unwrap();
        assert!((v + 3.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn tidal_bound_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(tidal_lower_bound_check(&[id], 0.5, 1.0));
        assert!(!tidal_lower_bound_check(&[DMatrix::zeros(3, 3)], 0.5, 1.0));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -2.0]));
        assert!(!tidal_lower_bound_check(&[d], 0.5, 1.0));
    }

    #[test]
    fn minkowski_energy_conditions_pass() {
        let fam = build_family(
            Arc::new(metric(MetricSpec::Minkowski { dim: 4 })),
            Mollifier::default(),
            &[0.25, 0.125],
            0.1,
        )
        .unwrap();
        let k = ChartBox::cube(4, 1.0).unwrap();
        let rep = check_timelike_ec(&fam, &k, -0.5, 10.0, 1e-6, &ScanLattice::default()).unwrap();
        assert!(rep.pass && rep.min_value.iter().all(|v| v.abs() < 1e-12));
        let rep = check_null_ec(&fam, &k, 0.5, 2.0, 1e-6, &ScanLattice::default()).unwrap();
        assert!(rep.pass);
    }
}
