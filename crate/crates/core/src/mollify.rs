//! Mollification of metrics and cone-adjusted smooth families.
//!
//! Convolution uses the radial bump `ρ(u) ∝ exp(-s / (1 - |u|²))` on the unit
//! ball. Axes on which the source metric does not depend are integrated out
//! analytically, leaving a marginal kernel on the active axes that is
//! integrated by tensor-product Gauss–Legendre. The discrete mass of the rule
//! in use normalises every evaluation, so constants are reproduced exactly.

use std::sync::{Arc, OnceLock};

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{
    euclid_norm_dim, inner, zero_gradient, zero_hessian, ChartBox, MetricField, MetricGradient,
    MetricHessian, MetricJet, Point, Regularity, SharedMetric, Vector, MAX_DIM,
};
use crate::quadrature::{composite_rule, graded_rule, Rule1d};

/// Radial bump kernel with its quadrature settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mollifier {
    shape: f64,
    nodes: usize,
    /// Smallest panel width of the grading toward the edge of the support.
    edge_grading: f64,
    #[serde(skip)]
    cache: Arc<KernelCache>,
}

impl PartialEq for Mollifier {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.nodes == other.nodes && self.edge_grading == other.edge_grading
    }
}

/// Tensor nodes on the active axes with weights and marginal kernel data.
#[derive(Debug)]
struct KernelTable {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    values: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

#[derive(Debug, Default)]
struct KernelCache {
    tables: [OnceLock<KernelTable>; (MAX_DIM + 1) * (MAX_DIM + 1)],
}

impl Default for Mollifier {
    fn default() -> Self {
        Mollifier::new(1.0, 16).expect("default mollifier")
    }
}

impl Mollifier {
    /// `shape` is the exponent scale `s`; `nodes` the Gauss–Legendre count
    /// per active axis.
    pub fn new(shape: f64, nodes: usize) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(LabError::InvalidParameter(format!(
                "mollifier shape {shape} must be positive"
            )));
        }
        if nodes < 2 {
            return Err(LabError::InvalidParameter(
                "mollifier needs at least two nodes per axis".into(),
            ));
        }
        Ok(Mollifier {
            shape,
            nodes,
            edge_grading: 0.05,
            cache: Arc::default(),
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Sets the smallest panel width near the edge of the support;
    /// a value of 1 or more gives plain single-panel Gauss–Legendre.
    pub fn with_edge_grading(&self, width: f64) -> Self {
        Mollifier {
            edge_grading: width,
            cache: Arc::default(),
            ..self.clone()
        }
    }

    /// Per-axis rule on `[-1, 1]`; graded toward the support edge when at
    /// most two axes are active, and toward the given kink positions.
    fn axis_rule(&self, active: usize, kinks: &[f64]) -> Rule1d {
        let mut breaks: Vec<(f64, f64)> = kinks
            .iter()
            .filter(|u| u.abs() < 1.0 - 1e-12)
            .map(|&u| (u, KINK_GRADING))
            .collect();
        let panels = if active <= 2 && self.edge_grading < 1.0 {
            breaks.push((-1.0, self.edge_grading));
            breaks.push((1.0, self.edge_grading));
            2
        } else {
            1
        };
        graded_rule(-1.0, 1.0, panels, self.nodes, &breaks)
    }

    fn radial_rule(&self) -> Rule1d {
        if self.edge_grading < 1.0 {
            graded_rule(0.0, 1.0, 1, self.nodes, &[(1.0, self.edge_grading)])
        } else {
            composite_rule(0.0, 1.0, 1, self.nodes, &[], 1.0)
        }
    }

    fn build_table(&self, rules: &[Rule1d], hidden: usize) -> KernelTable {
        let radial = self.radial_rule();
        let m = rules.len();
        let total: usize = rules.iter().map(|r| r.len()).product();
        let mut table = KernelTable {
            nodes: Vec::with_capacity(total),
            weights: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            grads: Vec::with_capacity(total),
        };
        let mut u = vec![0.0; m];
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for (k, rule) in rules.iter().enumerate() {
                let i = rem % rule.len();
                rem /= rule.len();
                u[k] = rule.nodes[i];
                w *= rule.weights[i];
            }
            let (v, d) = self.marginal(&u, hidden, &radial);
            if v == 0.0 && d.iter().all(|c| *c == 0.0) {
                continue;
            }
            table.nodes.push(u.clone());
            table.weights.push(w);
            table.values.push(v);
            table.grads.push(d);
        }
        table
    }

    fn standard_table(&self, active: usize, hidden: usize) -> &KernelTable {
        self.cache.tables[active * (MAX_DIM + 1) + hidden].get_or_init(|| {
            let rule = self.axis_rule(active, &[]);
            self.build_table(&vec![rule; active], hidden)
        })
    }

    pub fn with_nodes(&self, nodes: usize) -> Self {
        Mollifier {
            nodes,
            cache: Arc::default(),
            ..self.clone()
        }
    }

    /// Unnormalised profile `φ(q)` with `q = |u|²`, and `dφ/dq`.
    fn profile(&self, q: f64) -> (f64, f64) {
        if q >= 1.0 {
            return (0.0, 0.0);
        }
        let w = 1.0 - q;
        let v = (-self.shape / w).exp();
        (v, -self.shape * v / (w * w))
    }

    /// Unnormalised kernel value at `u` in `dim` dimensions, gradient included.
    pub fn density(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let q: f64 = u.iter().map(|c| c * c).sum();
        let (v, dv) = self.profile(q);
        (v, u.iter().map(|c| 2.0 * c * dv).collect())
    }

    /// Marginal of the kernel over `hidden` integrated-out axes, evaluated
    /// at a point `u` of the active axes, with its gradient.
    fn marginal(&self, u: &[f64], hidden: usize, radial: &Rule1d) -> (f64, Vec<f64>) {
        let q: f64 = u.iter().map(|c| c * c).sum();
        if q >= 1.0 {
            return (0.0, vec![0.0; u.len()]);
        }
        if hidden == 0 {
            return self.density(u);
        }
        let r_max = (1.0 - q).sqrt();
        let (mut m, mut dm) = (0.0, 0.0);
        for (x, w) in radial.nodes.iter().zip(&radial.weights) {
            let r = r_max * x;
            let jac = r_max * w * r.powi(hidden as i32 - 1);
            let (v, dv) = self.profile(q + r * r);
            m += jac * v;
            dm += jac * dv;
        }
        (m, u.iter().map(|c| 2.0 * c * dm).collect())
    }

    /// Discrete mass of the rule used for a kernel in `dim` dimensions with
    /// `active` tensor axes, relative to the mass computed independently
    /// from the radial profile.
    pub fn mass_ratio(&self, dim: usize, active: usize) -> f64 {
        let table = self.standard_table(active, dim - active);
        let mut tensor: f64 = table.weights.iter().zip(&table.values).map(|(w, v)| w * v).sum();
        let sphere = |k: usize| match k {
            1 => 2.0,
            2 => 2.0 * std::f64::consts::PI,
            3 => 4.0 * std::f64::consts::PI,
            _ => 2.0 * std::f64::consts::PI.powi(2),
        };
        if dim > active {
            tensor *= sphere(dim - active);
        }
        let fine = composite_rule(0.0, 1.0, 256, 24, &[], 1.0);
        let exact = sphere(dim) * fine.integrate(|r| self.profile(r * r).0 * r.powi(dim as i32 - 1));
        tensor / exact
    }
}

/// Convolved metric `G = g⋆ρ_ε` with first and second derivatives.
#[derive(Debug, Clone)]
pub struct ConvolvedJet {
    pub g: Matrix4<f64>,
    pub dg: MetricGradient,
    pub ddg: MetricHessian,
}

/// What a convolution pass must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    First,
    Second,
}

/// Smallest panel width of the geometric grading toward a metric kink, in
/// kernel units.
const KINK_GRADING: f64 = 1e-3;

fn convolve_order(
    g: &dyn MetricField,
    rho: &Mollifier,
    eps: f64,
    x: &Point,
    order: Order,
) -> Result<ConvolvedJet> {
    if !(eps > 0.0) {
        return Err(LabError::InvalidParameter(format!("epsilon {eps} must be positive")));
    }
    let dist = g.chart().boundary_distance(x);
    if dist < eps * (1.0 - 1e-12) {
        return Err(LabError::MarginViolation {
            distance: dist,
            epsilon: eps,
        });
    }
    let n = g.dim();
    let active = g.active_axes();
    let m = active.len();
    let hidden = n - m;
    let kinks: Vec<Vec<f64>> = active
        .iter()
        .map(|&a| {
            g.breakpoints()
                .iter()
                .filter(|(axis, c)| *axis == a && (x[a] - c).abs() < eps)
                .map(|(_, c)| (x[a] - c) / eps)
                .collect()
        })
        .collect();
    let local;
    let table = if kinks.iter().all(|k| k.is_empty()) {
        rho.standard_table(m, hidden)
    } else {
        let rules: Vec<Rule1d> = kinks.iter().map(|k| rho.axis_rule(m, k)).collect();
        local = rho.build_table(&rules, hidden);
        &local
    };

    let mut out = ConvolvedJet {
        g: Matrix4::zeros(),
        dg: zero_gradient(),
        ddg: zero_hessian(),
    };
    let mut mass = 0.0;
    for (idx, u) in table.nodes.iter().enumerate() {
        let w = table.weights[idx];
        let kv = table.values[idx];
        let kgrad = &table.grads[idx];
        let mut y = *x;
        for (k, &a) in active.iter().enumerate() {
            y[a] -= eps * u[k];
        }
        mass += w * kv;
        if order == Order::Value {
            out.g += g.components(&y) * (w * kv);
            continue;
        }
        let (gy, dg) = g.first_jet(&y);
        out.g += gy * (w * kv);
        for &a in &active {
            out.dg[a] += dg[a] * (w * kv);
        }
        if order == Order::Second {
            for &a in &active {
                for (kb, &b) in active.iter().enumerate() {
                    out.ddg[a][b] += dg[a] * (w * kgrad[kb] / eps);
                }
            }
        }
    }
    if m == 0 {
        out.g = g.components(x);
        mass = 1.0;
    }
    if !(mass > 0.0) {
        return Err(LabError::Degenerate("kernel quadrature has no mass".into()));
    }
    out.g /= mass;
    for a in 0..MAX_DIM {
        out.dg[a] /= mass;
        for b in 0..MAX_DIM {
            out.ddg[a][b] /= mass;
        }
    }
    if order == Order::Second {
        for a in 0..MAX_DIM {
            for b in (a + 1)..MAX_DIM {
                let s = (out.ddg[a][b] + out.ddg[b][a]) * 0.5;
                out.ddg[a][b] = s;
                out.ddg[b][a] = s;
            }
        }
    }
    Ok(out)
}

/// `(g⋆ρ_ε)(x)` with first and second derivatives; derivatives are taken as
/// `(∂g)⋆ρ_ε` and `(∂g)⋆(∂ρ)_ε`.
pub fn convolve(g: &dyn MetricField, rho: &Mollifier, eps: f64, x: &Point) -> Result<ConvolvedJet> {
    convolve_order(g, rho, eps, x, Order::Second)
}

/// As [`convolve`], additionally comparing against a rule with twice the
/// nodes per axis. Fails when the two differ by more than `tol` (sup norm,
/// metric components and first derivatives).
pub fn convolve_checked(
    g: &dyn MetricField,
    rho: &Mollifier,
    eps: f64,
    x: &Point,
    tol: f64,
) -> Result<ConvolvedJet> {
    let coarse = convolve(g, rho, eps, x)?;
    let fine = convolve(g, &rho.with_nodes(2 * rho.nodes), eps, x)?;
    let mut diff = (coarse.g - fine.g).amax();
    for k in 0..MAX_DIM {
        diff = diff.max((coarse.dg[k] - fine.dg[k]).amax());
    }
    if diff > tol {
        return Err(LabError::QuadratureNonConvergence {
            difference: diff,
            tolerance: tol,
        });
    }
    Ok(fine)
}

/// Time co-normal `σ = -G(T,·)/√(-G(T,T))` for constant `T`, with first and
/// second derivatives (`dsig[k][i] = ∂_k σ_i`).
fn conormal(
    jet: &ConvolvedJet,
    time: &Vector,
    order: Order,
) -> Result<(Vector, [Vector; MAX_DIM], [[Vector; MAX_DIM]; MAX_DIM])> {
    let w = jet.g * time;
    let s = -time.dot(&w);
    if !(s > 0.0) {
        return Err(LabError::Degenerate(
            "time field is not timelike for the mollified metric".into(),
        ));
    }
    let q = s.powf(-0.5);
    let sigma = -w * q;
    let mut dsig = [Vector::zeros(); MAX_DIM];
    let mut ddsig = [[Vector::zeros(); MAX_DIM]; MAX_DIM];
    if order == Order::Value {
        return Ok((sigma, dsig, ddsig));
    }
    let dw: [Vector; MAX_DIM] = std::array::from_fn(|k| jet.dg[k] * time);
    let ds: [f64; MAX_DIM] = std::array::from_fn(|k| -time.dot(&dw[k]));
    let q3 = q * q * q;
    for k in 0..MAX_DIM {
        dsig[k] = -dw[k] * q + w * (0.5 * q3 * ds[k]);
    }
    if order == Order::Second {
        let q5 = q3 * q * q;
        for k in 0..MAX_DIM {
            for l in 0..MAX_DIM {
                let ddw = jet.ddg[k][l] * time;
                let dds = -time.dot(&ddw);
                ddsig[k][l] = -ddw * q
                    + dw[k] * (0.5 * q3 * ds[l])
                    + dw[l] * (0.5 * q3 * ds[k])
                    - w * (0.75 * q5 * ds[k] * ds[l])
                    + w * (0.5 * q3 * dds);
            }
        }
    }
    Ok((sigma, dsig, ddsig))
}

/// One smooth member `g⋆ρ_ε + shift·σ⊗σ` of a mollified family.
#[derive(Clone)]
pub struct MollifiedMetric {
    source: SharedMetric,
    kernel: Mollifier,
    epsilon: f64,
    shift: f64,
    time: Vector,
    chart: ChartBox,
}

impl std::fmt::Debug for MollifiedMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MollifiedMetric")
            .field("source", &self.source.label())
            .field("epsilon", &self.epsilon)
            .field("shift", &self.shift)
            .finish()
    }
}

impl MollifiedMetric {
    /// Positive `shift` narrows the light cones, negative widens them.
    pub fn new(source: SharedMetric, kernel: Mollifier, epsilon: f64, shift: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(LabError::InvalidParameter(format!(
                "epsilon {epsilon} must be positive"
            )));
        }
        let chart = source.chart().shrink(epsilon).map_err(|_| {
            LabError::InvalidParameter(format!("epsilon {epsilon} leaves no margin box"))
        })?;
        let time = source.time_field(&source.chart().center());
        Ok(MollifiedMetric {
            source,
            kernel,
            epsilon,
            shift,
            time,
            chart,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn source(&self) -> &SharedMetric {
        &self.source
    }

    pub fn kernel(&self) -> &Mollifier {
        &self.kernel
    }

    /// The unshifted convolution `g⋆ρ_ε` at `x`.
    pub fn convolved(&self, x: &Point) -> Result<ConvolvedJet> {
        convolve(self.source.as_ref(), &self.kernel, self.epsilon, x)
    }

    fn evaluate(&self, x: &Point, order: Order) -> Result<MetricJet> {
        let conv = convolve_order(self.source.as_ref(), &self.kernel, self.epsilon, x, order)?;
        let mut g = conv.g;
        let mut dg = conv.dg;
        let mut ddg = conv.ddg;
        if self.shift != 0.0 {
            let (s, ds, dds) = conormal(&conv, &self.time, order)?;
            let a = self.shift;
            g += s * s.transpose() * a;
            if order >= Order::First {
                for k in 0..MAX_DIM {
                    dg[k] += (ds[k] * s.transpose() + s * ds[k].transpose()) * a;
                }
            }
            if order == Order::Second {
                for k in 0..MAX_DIM {
                    for l in 0..MAX_DIM {
                        ddg[k][l] += (dds[k][l] * s.transpose()
                            + ds[k] * ds[l].transpose()
                            + ds[l] * ds[k].transpose()
                            + s * dds[k][l].transpose())
                            * a;
                    }
                }
            }
        }
        Ok(MetricJet {
            g,
            dg,
            ddg: (order == Order::Second).then_some(ddg),
        })
    }

    fn eval_or_panic(&self, x: &Point, order: Order) -> MetricJet {
        self.evaluate(x, order)
            .unwrap_or_else(|e| panic!("mollified metric evaluated outside its margin box: {e}"))
    }

    /// Fallible jet evaluation.
    pub fn try_jet(&self, x: &Point) -> Result<MetricJet> {
        self.evaluate(x, Order::Second)
    }
}

impl MetricField for MollifiedMetric {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn chart(&self) -> &ChartBox {
        &self.chart
    }

    fn regularity(&self) -> Regularity {
        Regularity::Smooth
    }

    fn label(&self) -> String {
        format!(
            "{} mollified at eps={} shift={}",
            self.source.label(),
            self.epsilon,
            self.shift
        )
    }

    fn components(&self, x: &Point) -> Matrix4<f64> {
        self.eval_or_panic(x, Order::Value).g
    }

    fn gradient(&self, x: &Point) -> MetricGradient {
        self.eval_or_panic(x, Order::First).dg
    }

    fn hessian(&self, x: &Point) -> Option<MetricHessian> {
        self.eval_or_panic(x, Order::Second).ddg
    }

    fn jet(&self, x: &Point) -> MetricJet {
        self.eval_or_panic(x, Order::Second)
    }

    fn first_jet(&self, x: &Point) -> (Matrix4<f64>, MetricGradient) {
        let j = self.eval_or_panic(x, Order::First);
        (j.g, j.dg)
    }

    fn time_field(&self, _x: &Point) -> Vector {
        self.time
    }

    fn active_axes(&self) -> Vec<usize> {
        self.source.active_axes()
    }
}

/// The triple `(g⋆ρ_ε, ǧ_ε, ĝ_ε)` at one ε.
#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub epsilon: f64,
    pub plain: Arc<MollifiedMetric>,
    pub narrow: Arc<MollifiedMetric>,
    pub wide: Arc<MollifiedMetric>,
}

impl FamilyMember {
    /// Cone shift amplitude `A·ε`.
    pub fn shift(&self) -> f64 {
        self.narrow.shift()
    }
}

#[derive(Clone)]
pub struct MollifiedFamily {
    pub source: SharedMetric,
    pub kernel: Mollifier,
    pub amplitude: f64,
    pub members: Vec<FamilyMember>,
    /// Box on which every member is defined.
    pub margin_box: ChartBox,
}

impl std::fmt::Debug for MollifiedFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MollifiedFamily")
            .field("source", &self.source.label())
            .field("amplitude", &self.amplitude)
            .field("epsilons", &self.epsilons())
            .finish()
    }
}

impl MollifiedFamily {
    pub fn epsilons(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.epsilon).collect()
    }

    pub fn member(&self, epsilon: f64) -> Option<&FamilyMember> {
        self.members
            .iter()
            .find(|m| (m.epsilon - epsilon).abs() <= 1e-15 * epsilon)
    }

    pub fn finest(&self) -> &FamilyMember {
        self.members.last().expect("family has members")
    }
}

/// Default ε-grid `{2^-3, …, 2^-8}`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (3..=8).map(|k| 2f64.powi(-k)).collect()
}

fn check_grid(source: &dyn MetricField, grid: &[f64]) -> Result<ChartBox> {
    if grid.is_empty() {
        return Err(LabError::InvalidParameter("empty epsilon grid".into()));
    }
    if grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(LabError::InvalidParameter("epsilon values must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::InvalidParameter("epsilon grid must be strictly decreasing".into()));
    }
    source
        .chart()
        .shrink(grid[0])
        .map_err(|_| LabError::InvalidParameter("largest epsilon leaves no margin box".into()))
}

/// `ǧ_ε = g⋆ρ_ε + Aε σ⊗σ`, `ĝ_ε = g⋆ρ_ε − Aε σ⊗σ` for every ε in the grid.
pub fn build_family(
    source: SharedMetric,
    kernel: Mollifier,
    epsilon_grid: &[f64],
    amplitude: f64,
) -> Result<MollifiedFamily> {
    let margin_box = check_grid(source.as_ref(), epsilon_grid)?;
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(LabError::InvalidParameter(format!(
            "cone amplitude {amplitude} must be nonnegative"
        )));
    }
    let members = epsilon_grid
        .iter()
        .map(|&eps| {
            let a = amplitude * eps;
            Ok(FamilyMember {
                epsilon: eps,
                plain: Arc::new(MollifiedMetric::new(source.clone(), kernel.clone(), eps, 0.0)?),
                narrow: Arc::new(MollifiedMetric::new(source.clone(), kernel.clone(), eps, a)?),
                wide: Arc::new(MollifiedMetric::new(source.clone(), kernel.clone(), eps, -a)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MollifiedFamily {
        source,
        kernel,
        amplitude,
        members,
        margin_box,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingRow {
    pub epsilon: f64,
    /// Fraction of sampled ǧ-causal vectors that are g-timelike.
    pub narrow_fraction: f64,
    /// Fraction of sampled g-causal vectors that are ĝ-timelike.
    pub wide_fraction: f64,
    /// Smallest `-g(v,v)/|v|²` over the ǧ-causal samples.
    pub narrow_slack: f64,
    /// Smallest `-ĝ(v,v)/|v|²` over the g-causal samples.
    pub wide_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingReport {
    pub pass: bool,
    pub worst_slack: f64,
    pub samples: usize,
    pub rows: Vec<NestingRow>,
}

/// Strictness threshold for "timelike" in the nesting check.
pub const NESTING_TOLERANCE: f64 = 1e-12;

/// Random spatial unit direction (Euclidean) in the first `dim` axes.
fn spatial_direction<R: Rng>(rng: &mut R, dim: usize) -> Vector {
    loop {
        let mut e = Vector::zeros();
        for c in e.iter_mut().take(dim).skip(1) {
            *c = rng.gen_range(-1.0..=1.0);
        }
        let n = euclid_norm_dim(&e, dim);
        if n > 1e-3 && n <= 1.0 {
            return e / n;
        }
    }
}

/// A vector `T + βλe` with `λ` the positive root of `h(T+λe, T+λe) = 0`.
fn causal_sample(h: &Matrix4<f64>, time: &Vector, e: &Vector, beta: f64) -> Option<Vector> {
    let a = inner(h, e, e);
    let b = inner(h, time, e);
    let c = inner(h, time, time);
    if !(a > 0.0) || !(c < 0.0) {
        return None;
    }
    let lam = (-b + (b * b - a * c).sqrt()) / a;
    Some(time + e * (beta * lam))
}

/// Samples points and directions (half of them exactly null for the
/// generating metric) and checks both cone inclusions at every ε.
pub fn verify_nesting(fam: &MollifiedFamily, samples: usize, seed: u64) -> NestingReport {
    let n = fam.source.dim();
    let time = fam.source.time_field(&fam.margin_box.center());
    let rows: Vec<NestingRow> = fam
        .members
        .par_iter()
        .enumerate()
        .map(|(idx, member)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 * (idx as u64 + 1)));
            let mut narrow_ok = 0usize;
            let mut wide_ok = 0usize;
            let mut narrow_total = 0usize;
            let mut wide_total = 0usize;
            let mut narrow_slack = f64::INFINITY;
            let mut wide_slack = f64::INFINITY;
            for s in 0..samples.max(1) {
                let x = fam.margin_box.sample(&mut rng);
                let e = spatial_direction(&mut rng, n);
                let beta = if s % 2 == 0 { 1.0 } else { rng.gen_range(0.0..1.0) };
                let g = fam.source.components(&x);
                let gn = member.narrow.components(&x);
                let gw = member.wide.components(&x);
                if let Some(v) = causal_sample(&gn, &time, &e, beta) {
                    let r = -inner(&g, &v, &v) / v.norm_squared();
                    narrow_total += 1;
                    narrow_slack = narrow_slack.min(r);
                    if r > NESTING_TOLERANCE {
                        narrow_ok += 1;
                    }
                }
                if let Some(v) = causal_sample(&g, &time, &e, beta) {
                    let r = -inner(&gw, &v, &v) / v.norm_squared();
                    wide_total += 1;
                    wide_slack = wide_slack.min(r);
                    if r > NESTING_TOLERANCE {
                        wide_ok += 1;
                    }
                }
            }
            let frac = |ok: usize, tot: usize| if tot == 0 { 0.0 } else { ok as f64 / tot as f64 };
            NestingRow {
                epsilon: member.epsilon,
                narrow_fraction: frac(narrow_ok, narrow_total),
                wide_fraction: frac(wide_ok, wide_total),
                narrow_slack,
                wide_slack,
            }
        })
        .collect();
    let pass = rows
        .iter()
        .all(|r| r.narrow_fraction == 1.0 && r.wide_fraction == 1.0);
    let worst_slack = rows
        .iter()
        .map(|r| r.narrow_slack.min(r.wide_slack))
        .fold(f64::INFINITY, f64::min);
    NestingReport {
        pass,
        worst_slack,
        samples,
        rows,
    }
}

/// Doubles `A` from `1e-3` until sampled nesting holds at every ε, then
/// returns the family at twice that value.
pub fn calibrate(
    source: SharedMetric,
    kernel: Mollifier,
    epsilon_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<MollifiedFamily> {
    let margin_box = check_grid(source.as_ref(), epsilon_grid)?;
    let probe = build_family(source.clone(), kernel.clone(), epsilon_grid, 0.0)?;
    let diag = convergence_diagnostics(&probe, &margin_box, 5)?;
    let a_max = 1e3 * diag.slope_g.unwrap_or(1.0).max(1.0);
    let mut amplitude = 1e-3;
    while amplitude <= a_max {
        let fam = build_family(source.clone(), kernel.clone(), epsilon_grid, amplitude)?;
        if verify_nesting(&fam, samples, seed).pass {
            return build_family(source, kernel, epsilon_grid, (2.0 * amplitude).min(a_max));
        }
        amplitude *= 2.0;
    }
    Err(LabError::CalibrationFailure { max_constant: a_max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub epsilon: f64,
    pub sup_g_err: f64,
    pub sup_dg_err: f64,
    pub cone_shift: f64,
    /// Local log-log slope of `sup_g_err` against the previous row.
    pub slope_fit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsTable {
    pub rows: Vec<DiagnosticsRow>,
    /// Least-squares log-log slopes over the whole grid (None when a
    /// column has fewer than two positive entries).
    pub slope_g: Option<f64>,
    pub slope_dg: Option<f64>,
    pub slope_shift: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`, skipping nonpositive `y`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Sup-norm distances between each member and the source on a uniform grid
/// of `per_axis` points per axis in `k`.
pub fn convergence_diagnostics(
    fam: &MollifiedFamily,
    k: &ChartBox,
    per_axis: usize,
) -> Result<DiagnosticsTable> {
    if !fam.margin_box.contains_box(k) {
        return Err(LabError::InvalidParameter(
            "diagnostic box must lie inside every margin box".into(),
        ));
    }
    let grid = k.grid(per_axis);
    let n = fam.source.dim();
    let mut rows: Vec<DiagnosticsRow> = fam
        .members
        .par_iter()
        .map(|member| {
            let mut row = DiagnosticsRow {
                epsilon: member.epsilon,
                sup_g_err: 0.0,
                sup_dg_err: 0.0,
                cone_shift: 0.0,
                slope_fit: None,
            };
            for x in &grid {
                let conv = member.plain.convolved(x)?;
                let g = fam.source.components(x);
                let dg = fam.source.gradient(x);
                row.sup_g_err = row.sup_g_err.max((conv.g - g).amax());
                for a in 0..n {
                    row.sup_dg_err = row.sup_dg_err.max((conv.dg[a] - dg[a]).amax());
                }
                let narrow = member.narrow.components(x);
                row.cone_shift = row.cone_shift.max((narrow - conv.g).amax());
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    for i in 1..rows.len() {
        let (a, b) = (&rows[i - 1], &rows[i]);
        if a.sup_g_err > 0.0 && b.sup_g_err > 0.0 {
            rows[i].slope_fit =
                Some((b.sup_g_err / a.sup_g_err).ln() / (b.epsilon / a.epsilon).ln());
        }
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let col = |f: fn(&DiagnosticsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(DiagnosticsTable {
        slope_g: loglog_slope(&eps, &col(|r| r.sup_g_err)),
        slope_dg: loglog_slope(&eps, &col(|r| r.sup_dg_err)),
        slope_shift: loglog_slope(&eps, &col(|r| r.cone_shift)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_metric, point, MetricSpec};
    use nalgebra::Vector4;

    fn shared(spec: MetricSpec) -> SharedMetric {
        Arc::new(builtin_metric(&spec).unwrap())
    }

    fn kinked() -> SharedMetric {
        shared(MetricSpec::KinkedWave {
            alpha: 0.5,
            amplitude: 1.0,
            x0: 0.0,
            dim: 4,
        })
    }

    /// Test-local metric with an affine `g_tt`.
    struct Affine;
    impl MetricField for Affine {
        fn dim(&self) -> usize {
            3
        }
        fn chart(&self) -> &ChartBox {
            static CHART: std::sync::OnceLock<ChartBox> = std::sync::OnceLock::new();
            CHART.get_or_init(|| ChartBox::cube(3, 1.0).unwrap())
        }
        fn regularity(&self) -> Regularity {
            Regularity::Smooth
        }
        fn label(&self) -> String {
            "affine".into()
        }
        fn components(&self, x: &Point) -> Matrix4<f64> {
            Matrix4::from_diagonal(&Vector4::new(-1.0 + 0.3 * x[1], 1.0, 1.0, 1.0))
        }
        fn gradient(&self, _x: &Point) -> MetricGradient {
            let mut d = zero_gradient();
            d[1][(0, 0)] = 0.3;
            d
        }
    }

    #[test]
    fn mass_is_one() {
        let rho = Mollifier::default();
        for dim in 1..=4 {
            for active in 0..=dim.min(2) {
                let r = rho.mass_ratio(dim, active);
                assert!((r - 1.0).abs() < 1e-10, "dim {dim} active {active}: {r}");
            }
        }
    }

    #[test]
    fn constants_and_affine_are_fixed() {
        let g = shared(MetricSpec::Minkowski { dim: 4 });
        let j = convolve(g.as_ref(), &Mollifier::default(), 0.5, &point(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(j.g, g.components(&Point::zeros()));
        assert!(j.dg.iter().all(|m| m.amax() == 0.0));
        for x in [point(&[0.0, 0.3, 0.1]), point(&[0.2, -0.4, 0.0])] {
            let j = convolve(&Affine, &Mollifier::default(), 0.5, &x).unwrap();
            assert!((j.g[(0, 0)] - (-1.0 + 0.3 * x[1])).abs() < 1e-14);
            assert!((j.dg[1][(0, 0)] - 0.3).abs() < 1e-14);
            assert!(j.ddg.iter().flatten().all(|m| m.amax() < 1e-12));
        }
    }

    #[test]
    fn margin_violation() {
        let g = kinked();
        let err = convolve(g.as_ref(), &Mollifier::default(), 0.5, &point(&[3.8, 0.0, 0.0, 0.0]));
        assert!(matches!(err, Err(LabError::MarginViolation { .. })));
    }

    /// `∫|u_y|^p ρ(u) du` over the unit 3-ball via the radial profile and
    /// the spherical average of `|cos θ|^p`.
    fn moment_oracle(shape: f64, p: f64) -> f64 {
        let rule = composite_rule(0.0, 1.0, 200, 20, &[], 1.0);
        let prof = |r: f64| if r < 1.0 { (-shape / (1.0 - r * r)).exp() } else { 0.0 };
        let num = rule.integrate(|r| prof(r) * r.powf(p + 2.0)) / (p + 1.0);
        let den = rule.integrate(|r| prof(r) * r * r);
        num / den
    }

    #[test]
    fn branching_moment_matches_radial_oracle() {
        let g = shared(MetricSpec::BranchingStatic {
            alpha: 0.5,
            kappa: 1.0,
            dim: 3,
        });
        let oracle = moment_oracle(1.0, 1.5);
        for (rho, tol) in [(Mollifier::default(), 1e-8), (Mollifier::default().with_nodes(32), 1e-10)] {
            for eps in [0.25, 0.0625] {
                let j = convolve(g.as_ref(), &rho, eps, &point(&[0.0, 0.0, 0.0])).unwrap();
                let expected = 1.0 + eps.powf(1.5) * oracle;
                assert!((j.g[(1, 1)] - expected).abs() < tol, "{} vs {}", j.g[(1, 1)], expected);
            }
        }
    }

    #[test]
    fn derivative_commutes_with_convolution() {
        let g = kinked();
        let rho = Mollifier::default();
        for x in [point(&[0.0, 0.03, 0.0, 0.0]), point(&[0.0, 0.2, 0.5, 0.0])] {
            let j = convolve(g.as_ref(), &rho, 0.125, &x).unwrap();
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[1] += h;
            xm[1] -= h;
            let fd = (convolve(g.as_ref(), &rho, 0.125, &xp).unwrap().g
                - convolve(g.as_ref(), &rho, 0.125, &xm).unwrap().g)
                / (2.0 * h);
            assert!((fd - j.dg[1]).amax() < 1e-6, "{}", (fd - j.dg[1]).amax());
            let fd2 = (convolve(g.as_ref(), &rho, 0.125, &xp).unwrap().dg[1]
                - convolve(g.as_ref(), &rho, 0.125, &xm).unwrap().dg[1])
                / (2.0 * h);
            assert!((fd2 - j.ddg[1][1]).amax() < 1e-4 * (1.0 + fd2.amax()));
        }
    }

    #[test]
    fn smooth_second_derivatives_converge() {
        let g = shared(MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 });
        let x = point(&[0.3, 0.0, 0.1, 0.0]);
        let j = convolve(g.as_ref(), &Mollifier::default(), 2f64.powi(-8), &x).unwrap();
        let exact = g.hessian(&x).unwrap();
        assert!((j.ddg[0][0] - exact[0][0]).amax() < 1e-4);
    }

    #[test]
    fn checked_convolution() {
        let g = kinked();
        let x = point(&[0.0, 0.01, 0.0, 0.0]);
        assert!(convolve_checked(g.as_ref(), &Mollifier::default(), 0.125, &x, 1e-8).is_ok());
        let coarse = Mollifier::new(1.0, 2).unwrap().with_edge_grading(1.0);
        assert!(matches!(
            convolve_checked(g.as_ref(), &coarse, 0.125, &x, 1e-12),
            Err(LabError::QuadratureNonConvergence { .. })
        ));
    }

    #[test]
    fn shifted_minkowski_examples() {
        let g = shared(MetricSpec::Minkowski { dim: 4 });
        let fam = build_family(g, Mollifier::default(), &[1.0], 0.1).unwrap();
        let v = Vector4::new(1.0, 1.0, 0.0, 0.0);
        let x = Point::zeros();
        let m = &fam.members[0];
        assert!((inner(&m.narrow.components(&x), &v, &v) - 0.1).abs() < 1e-14);
        assert!((inner(&m.wide.components(&x), &v, &v) + 0.1).abs() < 1e-14);
    }

    #[test]
    fn nesting_pass_and_degenerate_fail() {
        let g = shared(MetricSpec::Minkowski { dim: 4 });
        let fam = build_family(g.clone(), Mollifier::default(), &default_epsilon_grid(), 0.1).unwrap();
        let rep = verify_nesting(&fam, 1000, 1);
        assert!(rep.pass);
        let zero = build_family(g, Mollifier::default(), &default_epsilon_grid(), 0.0).unwrap();
        assert!(!verify_nesting(&zero, 1000, 1).pass);
    }

    #[test]
    fn shift_derivatives_match_differences() {
        let g = shared(MetricSpec::FlrwToy {
            dim: 3,
            profile: crate::geometry::ScaleFactor::Power { exponent: 2.0 },
        });
        let m = MollifiedMetric::new(g, Mollifier::default(), 0.125, 0.3).unwrap();
        let x = point(&[1.5, 0.2, -0.1]);
        let j = m.jet(&x);
        let h = 1e-5;
        let mut xp = x;
        let mut xm = x;
        xp[0] += h;
        xm[0] -= h;
        let fd = (m.components(&xp) - m.components(&xm)) / (2.0 * h);
        assert!((fd - j.dg[0]).amax() < 1e-7);
        let fd2 = (m.gradient(&xp)[0] - m.gradient(&xm)[0]) / (2.0 * h);
        assert!((fd2 - j.ddg.unwrap()[0][0]).amax() < 1e-5);
    }

    #[test]
    fn kinked_diagnostics_slopes() {
        let fam = build_family(kinked(), Mollifier::default(), &default_epsilon_grid(), 0.5).unwrap();
        let k = ChartBox::cube(4, 1.0).unwrap();
        let t = convergence_diagnostics(&fam, &k, 5).unwrap();
        assert!(t.slope_g.unwrap() >= 1.4, "{:?}", t.slope_g);
        assert!((t.slope_shift.unwrap() - 1.0).abs() < 1e-9);
        for r in &t.rows {
            assert!((r.cone_shift - 0.5 * r.epsilon).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_metric_diagnostics_vanish() {
        let fam = build_family(
            shared(MetricSpec::Minkowski { dim: 3 }),
            Mollifier::default(),
            &default_epsilon_grid(),
            0.0,
        )
        .unwrap();
        let t = convergence_diagnostics(&fam, &ChartBox::cube(3, 1.0).unwrap(), 4).unwrap();
        assert!(t
            .rows
            .iter()
            .all(|r| r.sup_g_err == 0.0 && r.sup_dg_err == 0.0 && r.cone_shift == 0.0));
    }

    #[test]
    fn calibration_finds_nesting_for_branching() {
        let g = shared(MetricSpec::BranchingStatic {
            alpha: 0.5,
            kappa: 1.0,
            dim: 3,
        });
        let fam = calibrate(g, Mollifier::default(), &default_epsilon_grid(), 500, 5).unwrap();
        assert!(verify_nesting(&fam, 1000, 99).pass);
    }
}
