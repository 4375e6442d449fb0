//! Geodesics of C¹ metrics and their mollifications: integration, family
//! convergence, branching probes, parallel frames, cylindrical extensions
//! and a 1+1 time-separation estimator.

use nalgebra::{Matrix2, Matrix4, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{christoffel_from, Christoffel, MemberKind};
use crate::error::{LabError, Result};
use crate::geometry::{
    classify, inner, inverse_metric, orthonormal_basis, CausalType, FieldRegularity, MetricField,
    Point, Vector, VectorField, NULL_TOLERANCE,
};
use crate::mollify::MollifiedFamily;
use crate::ode::{dopri5, DenseTrajectory, OdeOptions, OdeStats, Termination};

/// Tolerances used for smooth metrics.
pub fn smooth_tolerances() -> OdeOptions {
    OdeOptions::tol(1e-9, 1e-11)
}

/// Relaxed tolerances for metrics with merely continuous Christoffels.
pub fn rough_tolerances() -> OdeOptions {
    OdeOptions::tol(1e-6, 1e-8)
}

pub fn default_tolerances(metric: &dyn MetricField) -> OdeOptions {
    if metric.regularity().is_smooth() {
        smooth_tolerances()
    } else {
        rough_tolerances()
    }
}

fn gamma_at(metric: &dyn MetricField, x: &Point) -> Result<Christoffel> {
    if !metric.chart().contains(x) {
        return Err(LabError::outside(x, metric.dim()));
    }
    let (g, dg) = metric.first_jet(x);
    let ginv = inverse_metric(&g, x, metric.dim())?;
    Ok(christoffel_from(metric.dim(), &ginv, &dg))
}

/// `Γ^k_ij a^i b^j`.
fn contract(gam: &Christoffel, n: usize, a: &[f64], b: &[f64], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            s += gam[k][i][j] * a[i] * b[j];
        }
    }
    s
}

fn to_vec(n: usize, s: &[f64]) -> Vector {
    let mut v = Vector::zeros();
    v.as_mut_slice()[..n].copy_from_slice(&s[..n]);
    v
}

/// Integrated geodesic with a dense interpolant for `(γ, γ̇)`.
#[derive(Debug, Clone)]
pub struct GeodesicSolution {
    dim: usize,
    traj: DenseTrajectory,
    requested: (f64, f64),
    causal: CausalType,
    source: String,
    initial_norm: f64,
}

impl GeodesicSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, t: f64) -> Point {
        to_vec(self.dim, &self.traj.eval(t))
    }

    pub fn velocity(&self, t: f64) -> Vector {
        to_vec(self.dim, &self.traj.eval(t)[self.dim..])
    }

    /// Interpolated `γ̈`.
    pub fn acceleration(&self, t: f64) -> Vector {
        to_vec(self.dim, &self.traj.eval_derivative(t)[self.dim..])
    }

    pub fn state(&self, t: f64) -> (Point, Vector) {
        let y = self.traj.eval(t);
        (to_vec(self.dim, &y), to_vec(self.dim, &y[self.dim..]))
    }

    /// Parameter interval actually covered.
    pub fn t_bounds(&self) -> (f64, f64) {
        self.traj.bounds()
    }

    pub fn requested_span(&self) -> (f64, f64) {
        self.requested
    }

    /// The integration stopped before the requested end (chart exit).
    pub fn truncated(&self) -> bool {
        !matches!(self.traj.termination, Termination::Completed)
    }

    pub fn causal_type(&self) -> CausalType {
        self.causal
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn stats(&self) -> OdeStats {
        self.traj.stats
    }

    pub fn tolerances(&self) -> (f64, f64) {
        (self.traj.options.rtol, self.traj.options.atol)
    }

    /// `g(γ̇, γ̇)` at the start.
    pub fn initial_norm(&self) -> f64 {
        self.initial_norm
    }

    pub fn require_complete(&self) -> Result<()> {
        if self.truncated() {
            Err(LabError::BoundaryExit {
                t: self.traj.t_end(),
                target: self.requested.1,
            })
        } else {
            Ok(())
        }
    }

    /// Largest `|g(γ̇,γ̇)(t) − g(γ̇,γ̇)(a)| / (1 + |t − a|)` over `samples`
    /// points.
    pub fn norm_drift(&self, metric: &dyn MetricField, samples: usize) -> f64 {
        let (a, b) = self.t_bounds();
        (0..=samples.max(1))
            .map(|i| {
                let t = a + (b - a) * i as f64 / samples.max(1) as f64;
                let (x, v) = self.state(t);
                let g = metric.components(&x);
                (inner(&g, &v, &v) - self.initial_norm).abs() / (1.0 + (t - a).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Largest `‖γ̈ + Γ(γ̇,γ̇)‖` at the accepted step boundaries, where the
    /// interpolant derivative equals the integrator's own stage value.
    pub fn equation_residual(&self, metric: &dyn MetricField) -> Result<f64> {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        let steps = self.traj.step_times();
        for &t in &steps[1..] {
            let (x, v) = self.state(t);
            let acc = self.acceleration(t);
            let gam = gamma_at(metric, &x)?;
            for k in 0..n {
                let r = acc[k] + contract(&gam, n, v.as_slice(), v.as_slice(), k);
                worst = worst.max(r.abs());
            }
        }
        Ok(worst)
    }

    /// Rows `(t, x^i, v^i, g(v,v))` at `samples + 1` uniform parameters.
    pub fn trace(&self, metric: &dyn MetricField, samples: usize) -> Vec<Vec<f64>> {
        let (a, b) = self.t_bounds();
        (0..=samples.max(1))
            .map(|i| {
                let t = a + (b - a) * i as f64 / samples.max(1) as f64;
                let (x, v) = self.state(t);
                let g = metric.components(&x);
                let mut row = vec![t];
                row.extend(x.iter().take(self.dim));
                row.extend(v.iter().take(self.dim));
                row.push(inner(&g, &v, &v));
                row
            })
            .collect()
    }
}

/// Integrates `γ̈^k = −Γ^k_ij γ̇^i γ̇^j` from `(p, v)` at `span.0` to `span.1`.
/// Leaving the chart ends the run early with [`GeodesicSolution::truncated`].
pub fn integrate_geodesic(
    metric: &dyn MetricField,
    p: &Point,
    v: &Vector,
    span: (f64, f64),
    opts: Option<OdeOptions>,
) -> Result<GeodesicSolution> {
    let n = metric.dim();
    if !metric.chart().contains(p) {
        return Err(LabError::outside(p, n));
    }
    if v.iter().take(n).all(|c| *c == 0.0) {
        return Err(LabError::InvalidParameter("initial velocity must be nonzero".into()));
    }
    if !(span.1 > span.0) {
        return Err(LabError::InvalidParameter("span must be increasing".into()));
    }
    let opts = opts.unwrap_or_else(|| default_tolerances(metric));
    let g0 = metric.components(p);
    let initial_norm = inner(&g0, v, v);
    let (causal, _) = classify(&g0, &metric.time_field(p), v, n, NULL_TOLERANCE);
    let mut y0 = Vec::with_capacity(2 * n);
    y0.extend(p.iter().take(n));
    y0.extend(v.iter().take(n));
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = to_vec(n, y);
        let gam = gamma_at(metric, &x)?;
        let vel = &y[n..];
        dy[..n].copy_from_slice(vel);
        for k in 0..n {
            dy[n + k] = -contract(&gam, n, vel, vel, k);
        }
        Ok(())
    };
    let traj = dopri5(rhs, span.0, &y0, span.1, &opts, |_, _| true)?;
    Ok(GeodesicSolution {
        dim: n,
        traj,
        requested: span,
        causal,
        source: metric.label(),
        initial_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub sup_c0: f64,
    pub sup_c1: f64,
    /// The member geodesic left the chart before the span end.
    pub escaped: bool,
}

/// Sup deviations of ε-geodesics (from `data(ε)`) against the g-geodesic
/// from `(p, v)` over the common span, on `samples + 1` uniform parameters.
/// `sup_c1` is the larger of the position and velocity deviations.
#[allow(clippy::too_many_arguments)]
pub fn geodesic_family_convergence(
    fam: &MollifiedFamily,
    kind: MemberKind,
    p: &Point,
    v: &Vector,
    data: &(dyn Fn(f64) -> (Point, Vector) + Sync),
    span: (f64, f64),
    samples: usize,
) -> Result<Vec<ConvergenceRow>> {
    let limit = integrate_geodesic(fam.source.as_ref(), p, v, span, None)?;
    let n = fam.source.dim();
    fam.members
        .par_iter()
        .map(|m| {
            let metric = kind.pick(m);
            let (pk, vk) = data(m.epsilon);
            let sol = integrate_geodesic(metric, &pk, &vk, span, None)?;
            let (a, b) = sol.t_bounds();
            let (la, lb) = limit.t_bounds();
            let (lo, hi) = (a.max(la), b.min(lb));
            let mut c0: f64 = 0.0;
            let mut c1: f64 = 0.0;
            for i in 0..=samples.max(1) {
                let t = lo + (hi - lo) * i as f64 / samples.max(1) as f64;
                let (x1, v1) = sol.state(t);
                let (x2, v2) = limit.state(t);
                for k in 0..n {
                    c0 = c0.max((x1[k] - x2[k]).abs());
                    c1 = c1.max((v1[k] - v2[k]).abs());
                }
            }
            Ok(ConvergenceRow {
                epsilon: m.epsilon,
                sup_c0: c0,
                sup_c1: c0.max(c1),
                escaped: sol.truncated() || limit.truncated(),
            })
        })
        .collect()
}

/// Settings of the perturb-and-limit branching probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Terminal states closer than this share a cluster.
    pub cluster_tol: f64,
    /// Successive terminal states along the η-grid must end closer than this.
    pub cauchy_tol: f64,
    pub ode: OdeOptions,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            cluster_tol: 1e-2,
            cauchy_tol: 1e-3,
            ode: OdeOptions::tol(1e-10, 1e-16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCluster {
    pub terminal_position: Vec<f64>,
    pub terminal_velocity: Vec<f64>,
    /// Which probes landed here: `0` unperturbed, `+1`/`-1` the sign of the
    /// perturbation.
    pub members: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchingReport {
    pub point: Vec<f64>,
    pub velocity: Vec<f64>,
    pub direction: Vec<f64>,
    pub eta_grid: Vec<f64>,
    pub span: (f64, f64),
    pub clusters: Vec<BranchCluster>,
    pub branch_count: usize,
    /// Smallest and largest terminal position distance between clusters.
    pub min_separation: Option<f64>,
    pub max_separation: Option<f64>,
    /// Successive-η terminal distances for the `+` and `−` sequences.
    pub cauchy_gaps: Vec<(f64, f64)>,
    pub note: String,
}

/// Default transverse perturbation direction: the first axis carrying a
/// breakpoint of the metric, else the last spatial axis.
pub fn transverse_axis(metric: &dyn MetricField) -> usize {
    metric
        .breakpoints()
        .first()
        .map(|b| b.0)
        .unwrap_or(metric.dim() - 1)
}

/// Integrates from `(p, v ± η w)` for every η and from `(p, v)`, then
/// clusters the η → 0 limits of the terminal states.
pub fn branch_probe(
    metric: &dyn MetricField,
    p: &Point,
    v: &Vector,
    direction: Option<Vector>,
    eta_grid: &[f64],
    span: (f64, f64),
    opts: &ProbeOptions,
) -> Result<BranchingReport> {
    let n = metric.dim();
    if eta_grid.is_empty()
        || eta_grid.iter().any(|e| !(*e > 0.0))
        || eta_grid.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(LabError::InvalidParameter(
            "eta grid must be positive and strictly decreasing".into(),
        ));
    }
    let w = direction.unwrap_or_else(|| {
        let mut e = Vector::zeros();
        e[transverse_axis(metric)] = 1.0;
        e
    });
    let terminal = |vel: Vector| -> Result<(Point, Vector)> {
        let sol = integrate_geodesic(metric, p, &vel, span, Some(opts.ode))?;
        sol.require_complete()?;
        Ok(sol.state(span.1))
    };
    let base = terminal(*v)?;
    let mut gaps = Vec::new();
    let mut limits = Vec::new();
    for sign in [1.0, -1.0] {
        let ends = eta_grid
            .par_iter()
            .map(|eta| terminal(v + w * (sign * eta)))
            .collect::<Result<Vec<_>>>()?;
        let dist = |a: &(Point, Vector), b: &(Point, Vector)| (a.0 - b.0).norm();
        let last_gap = if ends.len() >= 2 {
            dist(&ends[ends.len() - 1], &ends[ends.len() - 2])
        } else {
            0.0
        };
        gaps.push(last_gap);
        if last_gap >= opts.cauchy_tol {
            return Err(LabError::NonConvergentClustering(last_gap));
        }
        limits.push((sign as i8, *ends.last().expect("nonempty grid")));
    }
    let mut clusters: Vec<BranchCluster> = Vec::new();
    for (tag, (x, vel)) in std::iter::once((0i8, base)).chain(limits) {
        let found = clusters.iter_mut().find(|c| {
            let cx = crate::geometry::point(&c.terminal_position);
            (cx - x).norm() <= opts.cluster_tol
        });
        match found {
            Some(c) => c.members.push(tag),
            None => clusters.push(BranchCluster {
                terminal_position: x.iter().take(n).copied().collect(),
                terminal_velocity: vel.iter().take(n).copied().collect(),
                members: vec![tag],
            }),
        }
    }
    let mut seps = Vec::new();
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let a = crate::geometry::point(&clusters[i].terminal_position);
            let b = crate::geometry::point(&clusters[j].terminal_position);
            seps.push((a - b).norm());
        }
    }
    let count = clusters.len();
    Ok(BranchingReport {
        point: p.iter().take(n).copied().collect(),
        velocity: v.iter().take(n).copied().collect(),
        direction: w.iter().take(n).copied().collect(),
        eta_grid: eta_grid.to_vec(),
        span,
        clusters,
        branch_count: count,
        min_separation: seps.iter().copied().reduce(f64::min),
        max_separation: seps.iter().copied().reduce(f64::max),
        cauchy_gaps: vec![(gaps[0], gaps[1])],
        note: if count == 1 {
            "no branching found at probe resolution".into()
        } else {
            format!("at least {count} branches")
        },
    })
}

/// A geodesic integrated jointly with parallel-transported vectors, on both
/// sides of the start parameter.
#[derive(Debug, Clone)]
pub struct TransportedFrame {
    dim: usize,
    count: usize,
    t0: f64,
    forward: Option<DenseTrajectory>,
    backward: Option<DenseTrajectory>,
    start: Vec<f64>,
}

impl TransportedFrame {
    fn pick(&self, t: f64) -> Option<&DenseTrajectory> {
        if t >= self.t0 {
            self.forward.as_ref()
        } else {
            self.backward.as_ref()
        }
    }

    fn raw(&self, t: f64) -> Vec<f64> {
        self.pick(t).map(|d| d.eval(t)).unwrap_or_else(|| self.start.clone())
    }

    fn raw_derivative(&self, t: f64) -> Vec<f64> {
        self.pick(t)
            .map(|d| d.eval_derivative(t))
            .unwrap_or_else(|| vec![0.0; self.start.len()])
    }

    pub fn bounds(&self) -> (f64, f64) {
        let lo = self.backward.as_ref().map_or(self.t0, |d| d.bounds().0);
        let hi = self.forward.as_ref().map_or(self.t0, |d| d.bounds().1);
        (lo, hi)
    }

    pub fn position(&self, t: f64) -> Point {
        to_vec(self.dim, &self.raw(t))
    }

    pub fn velocity(&self, t: f64) -> Vector {
        to_vec(self.dim, &self.raw(t)[self.dim..])
    }

    /// The transported vectors at `t`.
    pub fn vectors(&self, t: f64) -> Vec<Vector> {
        let y = self.raw(t);
        (0..self.count)
            .map(|i| to_vec(self.dim, &y[(2 + i) * self.dim..]))
            .collect()
    }

    /// Parameter derivatives of the transported vectors.
    pub fn vector_derivatives(&self, t: f64) -> Vec<Vector> {
        let y = self.raw_derivative(t);
        (0..self.count)
            .map(|i| to_vec(self.dim, &y[(2 + i) * self.dim..]))
            .collect()
    }
}

/// Parallel transport of `w0` along the geodesic through `γ(t0)`. The curve
/// is re-integrated together with the vectors from `(γ(t0), γ̇(t0))` over
/// the covered interval of `gamma`.
pub fn parallel_transport(
    metric: &dyn MetricField,
    gamma: &GeodesicSolution,
    t0: f64,
    w0: &[Vector],
) -> Result<TransportedFrame> {
    let (a, b) = gamma.t_bounds();
    if !(t0 >= a && t0 <= b) {
        return Err(LabError::InvalidParameter(format!(
            "transport start {t0} outside [{a}, {b}]"
        )));
    }
    let n = metric.dim();
    let count = w0.len();
    let (x0, v0) = gamma.state(t0);
    let mut y0 = Vec::with_capacity((2 + count) * n);
    y0.extend(x0.iter().take(n));
    y0.extend(v0.iter().take(n));
    for w in w0 {
        y0.extend(w.iter().take(n));
    }
    let opts = gamma.traj.options;
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = to_vec(n, y);
        let gam = gamma_at(metric, &x)?;
        let vel = &y[n..2 * n];
        dy[..n].copy_from_slice(vel);
        for blk in 1..2 + count {
            let other = &y[blk * n..(blk + 1) * n];
            for k in 0..n {
                dy[blk * n + k] = -contract(&gam, n, vel, other, k);
            }
        }
        Ok(())
    };
    let forward = if b > t0 {
        Some(dopri5(rhs, t0, &y0, b, &opts, |_, _| true)?)
    } else {
        None
    };
    let backward = if a < t0 {
        Some(dopri5(rhs, t0, &y0, a, &opts, |_, _| true)?)
    } else {
        None
    };
    Ok(TransportedFrame {
        dim: n,
        count,
        t0,
        forward,
        backward,
        start: y0,
    })
}

/// Parallel orthonormal frame along a causal geodesic. All `n` legs are
/// transported; `perp_legs` exposes the `d` legs spanning the screen of
/// `γ̇` (`d = n − 1` timelike, `n − 2` null).
#[derive(Debug, Clone)]
pub struct FrameField {
    transported: TransportedFrame,
    causal: CausalType,
    signs: Vec<f64>,
    perp: usize,
}

impl FrameField {
    pub fn causal_type(&self) -> CausalType {
        self.causal
    }

    /// Number of screen legs `d`.
    pub fn d(&self) -> usize {
        self.perp
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.transported.bounds()
    }

    pub fn position(&self, t: f64) -> Point {
        self.transported.position(t)
    }

    pub fn velocity(&self, t: f64) -> Vector {
        self.transported.velocity(t)
    }

    /// All legs; the screen legs come first, then (null case) the spacelike
    /// and timelike legs `e_{n−1}, e_n` with `γ̇ = e_{n−1} + e_n`, or
    /// (timelike case) `e_n = γ̇/|γ̇|`.
    pub fn legs(&self, t: f64) -> Vec<Vector> {
        self.transported.vectors(t)
    }

    pub fn leg_derivatives(&self, t: f64) -> Vec<Vector> {
        self.transported.vector_derivatives(t)
    }

    pub fn perp_legs(&self, t: f64) -> Vec<Vector> {
        let mut l = self.legs(t);
        l.truncate(self.perp);
        l
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// Largest `|g(E_i,E_j) − ε_i δ_ij|` over `samples + 1` uniform
    /// parameters.
    pub fn orthonormality_defect(&self, metric: &dyn MetricField, samples: usize) -> f64 {
        let (a, b) = self.bounds();
        let mut worst: f64 = 0.0;
        for s in 0..=samples.max(1) {
            let t = a + (b - a) * s as f64 / samples.max(1) as f64;
            let g = metric.components(&self.position(t));
            let legs = self.legs(t);
            for i in 0..legs.len() {
                for j in 0..legs.len() {
                    let want = if i == j { self.signs[i] } else { 0.0 };
                    worst = worst.max((inner(&g, &legs[i], &legs[j]) - want).abs());
                }
            }
        }
        worst
    }

    /// Largest `|∇_γ̇ E_i|` (coordinate components) at `samples + 1` points.
    pub fn transport_residual(&self, metric: &dyn MetricField, samples: usize) -> Result<f64> {
        let (a, b) = self.bounds();
        let n = metric.dim();
        let mut worst: f64 = 0.0;
        for s in 0..=samples.max(1) {
            let t = a + (b - a) * s as f64 / samples.max(1) as f64;
            let gam = gamma_at(metric, &self.position(t))?;
            let vel = self.velocity(t);
            for (e, de) in self.legs(t).iter().zip(self.leg_derivatives(t)) {
                for k in 0..n {
                    let r = de[k] + contract(&gam, n, vel.as_slice(), e.as_slice(), k);
                    worst = worst.max(r.abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Orthonormal frame at `γ(t0)` seeded by `seed ⟂ γ̇(t0)`, transported along
/// the curve.
pub fn build_perp_frame(
    metric: &dyn MetricField,
    gamma: &GeodesicSolution,
    t0: f64,
    seed: &Vector,
) -> Result<FrameField> {
    let n = metric.dim();
    let (x, vel) = gamma.state(t0);
    let g = metric.components(&x);
    let time = metric.time_field(&x);
    let (causal, _) = classify(&g, &time, &vel, n, 1e-10);
    let seed_norm = seed.norm();
    if seed_norm < 1e-12 {
        return Err(LabError::Degenerate("seed vector vanishes".into()));
    }
    if inner(&g, seed, &vel).abs() > 1e-8 * seed_norm * vel.norm() {
        return Err(LabError::Precondition("seed is not orthogonal to the velocity".into()));
    }
    let (legs, signs, perp) = match causal {
        CausalType::Timelike => {
            let e_n = vel / (-inner(&g, &vel, &vel)).sqrt();
            let (basis, signs) = orthonormal_basis(&g, n, &[e_n, *seed])
                .ok_or_else(|| LabError::Degenerate("frame construction failed".into()))?;
            let mut legs: Vec<Vector> = basis[1..].to_vec();
            let mut sg: Vec<f64> = signs[1..].to_vec();
            legs.push(basis[0]);
            sg.push(signs[0]);
            (legs, sg, n - 1)
        }
        CausalType::Null => {
            let (tb, _) = orthonormal_basis(&g, n, &[time])
                .ok_or_else(|| LabError::Degenerate("no timelike unit vector".into()))?;
            let th = tb[0];
            let c = -inner(&g, &th, &vel);
            if !(c > 0.0) {
                return Err(LabError::Precondition("null velocity is not future directed".into()));
            }
            let e_n = th / c + vel * ((c * c - 1.0) / (2.0 * c));
            let e_s = vel - e_n;
            let mut p = *seed;
            for (e, s) in [(e_s, 1.0), (e_n, -1.0)] {
                p -= e * (inner(&g, &p, &e) * s);
            }
            if p.norm() < 1e-8 * seed_norm {
                return Err(LabError::Degenerate(
                    "seed lies in the span of the velocity and its null partner".into(),
                ));
            }
            let (basis, signs) = orthonormal_basis(&g, n, &[e_n, e_s, p])
                .ok_or_else(|| LabError::Degenerate("frame construction failed".into()))?;
            let mut legs: Vec<Vector> = basis[2..].to_vec();
            let mut sg: Vec<f64> = signs[2..].to_vec();
            legs.extend([basis[1], basis[0]]);
            sg.extend([signs[1], signs[0]]);
            (legs, sg, n - 2)
        }
        _ => {
            return Err(LabError::Precondition(
                "frames need a timelike or null geodesic".into(),
            ))
        }
    };
    let transported = parallel_transport(metric, gamma, t0, &legs)?;
    Ok(FrameField {
        transported,
        causal,
        signs,
        perp,
    })
}

type CurveFn = dyn Fn(f64) -> (Vector, Vector) + Send + Sync;

/// Extension of a field along a curve that is constant on the hyperplanes
/// `û·x = const`, `û = γ̇(t0)/|γ̇(t0)|`. Equivalently, in coordinates
/// rotated to send `û` to the first axis it depends on the first coordinate
/// only.
pub struct CylindricalExtension {
    gamma: GeodesicSolution,
    along: Box<CurveFn>,
    axis: Vector,
    window: (f64, f64),
    level: (f64, f64),
}

impl CylindricalExtension {
    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn axis(&self) -> &Vector {
        &self.axis
    }

    fn level_of(&self, t: f64) -> f64 {
        self.axis.dot(&self.gamma.position(t))
    }

    /// Curve parameter whose point has adapted coordinate `s`.
    fn parameter(&self, s: f64) -> f64 {
        let s = s.clamp(self.level.0, self.level.1);
        let (mut lo, mut hi) = self.window;
        let mut t = lo + (hi - lo) * (s - self.level.0) / (self.level.1 - self.level.0).max(1e-300);
        for _ in 0..60 {
            let f = self.level_of(t) - s;
            if f.abs() < 1e-15 * (1.0 + s.abs()) {
                break;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let slope = self.axis.dot(&self.gamma.velocity(t));
            let newton = t - f / slope;
            t = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        t
    }
}

impl VectorField for CylindricalExtension {
    fn value(&self, x: &Point) -> Vector {
        (self.along)(self.parameter(self.axis.dot(x))).0
    }

    fn derivative(&self, x: &Point) -> Option<Matrix4<f64>> {
        let t = self.parameter(self.axis.dot(x));
        let (_, dv) = (self.along)(t);
        let rate = 1.0 / self.axis.dot(&self.gamma.velocity(t));
        Some(dv * (self.axis.transpose() * rate))
    }

    fn regularity(&self) -> FieldRegularity {
        FieldRegularity::C1
    }
}

/// Builds the extension of `along(t) = (V(t), V'(t))` on the largest window
/// around `t0` (within the covered interval) where `û·γ̇ ≥ |γ̇(t0)|/2`.
pub fn extend_cylindrical(
    gamma: &GeodesicSolution,
    along: impl Fn(f64) -> (Vector, Vector) + Send + Sync + 'static,
    t0: f64,
) -> Result<CylindricalExtension> {
    let v0 = gamma.velocity(t0);
    let speed = v0.norm();
    if speed == 0.0 {
        return Err(LabError::Degenerate("velocity vanishes at t0".into()));
    }
    let axis = v0 / speed;
    let (a, b) = gamma.t_bounds();
    let ok = |t: f64| axis.dot(&gamma.velocity(t)) >= 0.5 * speed;
    let steps = 200;
    let mut hi = t0;
    for i in 1..=steps {
        let t = t0 + (b - t0) * i as f64 / steps as f64;
        if !ok(t) {
            break;
        }
        hi = t;
    }
    let mut lo = t0;
    for i in 1..=steps {
        let t = t0 - (t0 - a) * i as f64 / steps as f64;
        if !ok(t) {
            break;
        }
        lo = t;
    }
    if !(hi > lo) {
        return Err(LabError::Degenerate("no axis-adapted window around t0".into()));
    }
    let ext = CylindricalExtension {
        gamma: gamma.clone(),
        along: Box::new(along),
        axis,
        window: (lo, hi),
        level: (0.0, 0.0),
    };
    let level = (ext.level_of(lo), ext.level_of(hi));
    Ok(CylindricalExtension { level, ..ext })
}

/// Geodesic from `p` reaching `q` at parameter 1, by Newton iteration on the
/// initial velocity.
pub fn shoot_geodesic(
    metric: &dyn MetricField,
    p: &Point,
    q: &Point,
    guess: Option<Vector>,
    opts: Option<OdeOptions>,
) -> Result<GeodesicSolution> {
    let n = metric.dim();
    let mut v = guess.unwrap_or(q - p);
    let scale = (q - p).norm().max(1e-12);
    let endpoint = |v: &Vector| -> Result<Point> {
        let s = integrate_geodesic(metric, p, v, (0.0, 1.0), opts)?;
        s.require_complete()?;
        Ok(s.position(1.0))
    };
    for _ in 0..50 {
        let end = endpoint(&v)?;
        let res = end - q;
        if res.norm() <= 1e-11 * (1.0 + scale) {
            return integrate_geodesic(metric, p, &v, (0.0, 1.0), opts);
        }
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        let h = 1e-6 * (1.0 + v.norm());
        for j in 0..n {
            let mut vp = v;
            vp[j] += h;
            let mut vm = v;
            vm[j] -= h;
            let col = (endpoint(&vp)? - endpoint(&vm)?) / (2.0 * h);
            for i in 0..n {
                jac[(i, j)] = col[i];
            }
        }
        let rhs = nalgebra::DVector::from_iterator(n, res.iter().take(n).map(|r| -r));
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| LabError::SearchFailure("singular shooting Jacobian".into()))?;
        for i in 0..n {
            v[i] += step[i];
        }
    }
    Err(LabError::SearchFailure("geodesic shooting did not converge".into()))
}

/// Lorentzian length `∫ √(−g(γ̇,γ̇))` of a causal geodesic over its covered
/// interval (zero for non-causal pieces).
pub fn geodesic_length(metric: &dyn MetricField, gamma: &GeodesicSolution) -> f64 {
    let (a, b) = gamma.t_bounds();
    let rule = crate::quadrature::composite_rule(a, b, 16, 8, &[], 1.0);
    rule.integrate(|t| {
        let (x, v) = gamma.state(t);
        (-inner(&metric.components(&x), &v, &v)).max(0.0).sqrt()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianDistanceEstimate {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Longest causal grid path at the finest resolution.
    pub lower: f64,
    /// Richardson extrapolation of the grid values at two resolutions.
    pub extrapolated: f64,
    /// Length of the shooting geodesic from `p` to `q`.
    pub upper: f64,
    pub gap: f64,
    pub reachable: bool,
    pub resolution: usize,
}

/// Grid of `2·HALF_SLOPES + 1` slopes per node.
const HALF_SLOPES: i64 = 8;

/// Longest causal path on an `n × n` grid from `p` to `q`, edges joining
/// consecutive time levels with at most `HALF_SLOPES` spatial cells.
fn grid_longest(metric: &dyn MetricField, p: &Vector2<f64>, q: &Vector2<f64>, n: usize) -> Option<f64> {
    let dt = (q[0] - p[0]) / n as f64;
    let g0 = metric.components(&Point::new(p[0], p[1], 0.0, 0.0));
    let light = (-g0[(0, 0)] / g0[(1, 1)]).sqrt();
    let dx0 = dt * light / HALF_SLOPES as f64;
    let dxq = q[1] - p[1];
    let (dx, target) = if dxq.abs() < 1e-14 {
        (dx0, 0i64)
    } else {
        let m = (dxq.abs() / dx0).round().max(1.0);
        (dxq.abs() / m, (m as i64) * dxq.signum() as i64)
    };
    let pad = (n / 4).max(HALF_SLOPES as usize) as i64;
    let lo = target.min(0) - pad;
    let width = (target.abs() + 2 * pad + 1) as usize;
    let gl = crate::quadrature::gauss_legendre(3);
    let seg_len = |t0: f64, x0: f64, t1: f64, x1: f64| -> Option<f64> {
        let d = Vector2::new(t1 - t0, x1 - x0);
        let mut len = 0.0;
        for (s, w) in gl.0.iter().zip(&gl.1) {
            let u = 0.5 * (1.0 + s);
            let x = Point::new(t0 + u * d[0], x0 + u * d[1], 0.0, 0.0);
            if !metric.chart().contains(&x) {
                return None;
            }
            let g = metric.components(&x);
            let gm = Matrix2::new(g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]);
            let q = -(d.transpose() * gm * d)[0];
            if q < -1e-14 * d.norm_squared() {
                return None;
            }
            len += 0.5 * w * q.max(0.0).sqrt();
        }
        Some(len)
    };
    let mut best = vec![f64::NEG_INFINITY; width];
    let start = (0 - lo) as usize;
    if start >= width {
        return None;
    }
    best[start] = 0.0;
    for level in 0..n {
        let t0 = p[0] + dt * level as f64;
        let t1 = t0 + dt;
        let next: Vec<f64> = (0..width)
            .into_par_iter()
            .map(|j| {
                let x1 = p[1] + dx * (lo + j as i64) as f64;
                let mut b = f64::NEG_INFINITY;
                for s in -HALF_SLOPES..=HALF_SLOPES {
                    let i = j as i64 - s;
                    if i < 0 || i >= width as i64 || best[i as usize] == f64::NEG_INFINITY {
                        continue;
                    }
                    let x0 = p[1] + dx * (lo + i) as f64;
                    if let Some(l) = seg_len(t0, x0, t1, x1) {
                        b = b.max(best[i as usize] + l);
                    }
                }
                b
            })
            .collect();
        best = next;
    }
    let end = target - lo;
    if end < 0 || end >= width as i64 {
        return None;
    }
    let v = best[end as usize];
    v.is_finite().then_some(v)
}

/// Time separation `d(p, q)` in a 1+1 metric: causal grid lower bound at
/// `resolution` and `resolution/2` (Richardson-extrapolated), and the
/// geodesic shooting length as upper estimate.
pub fn lorentz_distance_1p1(
    metric: &dyn MetricField,
    p: &[f64; 2],
    q: &[f64; 2],
    resolution: usize,
) -> Result<LorentzianDistanceEstimate> {
    if metric.dim() != 2 {
        return Err(LabError::Precondition("distance grid needs a 1+1 metric".into()));
    }
    if resolution < 4 {
        return Err(LabError::InvalidParameter("resolution must be at least 4".into()));
    }
    let pp = Point::new(p[0], p[1], 0.0, 0.0);
    let qq = Point::new(q[0], q[1], 0.0, 0.0);
    for x in [&pp, &qq] {
        if !metric.chart().contains(x) {
            return Err(LabError::outside(x, 2));
        }
    }
    let unreachable = LorentzianDistanceEstimate {
        p: p.to_vec(),
        q: q.to_vec(),
        lower: 0.0,
        extrapolated: 0.0,
        upper: 0.0,
        gap: 0.0,
        reachable: false,
        resolution,
    };
    if !(q[0] > p[0]) {
        return Ok(unreachable);
    }
    let (pv, qv) = (Vector2::new(p[0], p[1]), Vector2::new(q[0], q[1]));
    let fine = grid_longest(metric, &pv, &qv, resolution);
    let coarse = grid_longest(metric, &pv, &qv, resolution / 2);
    let Some(fine) = fine else {
        return Ok(unreachable);
    };
    let extrapolated = match coarse {
        Some(c) => fine + (fine - c),
        None => fine,
    };
    let upper = match shoot_geodesic(metric, &pp, &qq, None, None) {
        Ok(sol) if sol.initial_norm() < 0.0 => geodesic_length(metric, &sol),
        _ => fine,
    };
    Ok(LorentzianDistanceEstimate {
        p: p.to_vec(),
        q: q.to_vec(),
        lower: fine,
        extrapolated,
        upper,
        gap: (upper - fine).abs(),
        reachable: true,
        resolution,
    })
}

/// Convenience: integrate in a family member chosen by kind.
pub fn integrate_in_member(
    fam: &MollifiedFamily,
    epsilon: f64,
    kind: MemberKind,
    p: &Point,
    v: &Vector,
    span: (f64, f64),
) -> Result<GeodesicSolution> {
    let m = fam
        .member(epsilon)
        .ok_or_else(|| LabError::InvalidParameter(format!("no member at epsilon {epsilon}")))?;
    integrate_geodesic(kind.pick(m), p, v, span, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_metric, point, MetricSpec, ScaleFactor};
    use crate::mollify::{build_family, Mollifier};
    use std::sync::Arc;

    fn metric(spec: MetricSpec) -> crate::geometry::BuiltinMetric {
        builtin_metric(&spec).unwrap()
    }

    #[test]
    fn minkowski_straight_line() {
        let m = metric(MetricSpec::Minkowski { dim: 4 });
        let v = Vector::new(1.0, 0.5, 0.0, 0.0);
        let s = integrate_geodesic(&m, &Point::zeros(), &v, (0.0, 2.0), None).unwrap();
        assert!(!s.truncated());
        assert!((s.position(1.3) - v * 1.3).norm() < 1e-13);
        assert_eq!(s.causal_type(), CausalType::Timelike);
    }

    #[test]
    fn flrw_comoving_stays_comoving() {
        let m = metric(MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Power { exponent: 0.5 },
        });
        let p = point(&[1.0, 0.3, -0.2, 0.1]);
        let s = integrate_geodesic(&m, &p, &Vector::new(1.0, 0.0, 0.0, 0.0), (0.0, 2.0), None).unwrap();
        let x = s.position(2.0);
        assert!((x - point(&[3.0, 0.3, -0.2, 0.1])).norm() < 1e-12);
    }

    #[test]
    fn branching_null_geodesic_matches_fine_fixed_step() {
        let m = metric(MetricSpec::BranchingStatic {
            alpha: 0.5,
            kappa: 1.0,
            dim: 3,
        });
        let p = point(&[0.0, 0.0, 0.25]);
        let f = 1.0 + 0.25f64.powf(1.5);
        let v = Vector::new(1.0, 1.0 / f.sqrt(), 0.0, 0.0);
        let s = integrate_geodesic(&m, &p, &v, (0.0, 1.0), None).unwrap();
        assert_eq!(s.causal_type(), CausalType::Null);
        // Classical RK4 at a fixed step 100× below the adaptive average.
        let steps = 100 * s.stats().accepted.max(10);
        let h = 1.0 / steps as f64;
        let acc = |y: &[f64; 6]| -> [f64; 6] {
            let x = point(&[y[0], y[1], y[2]]);
            let gam = gamma_at(&m, &x).unwrap();
            let v = &y[3..];
            let mut d = [y[3], y[4], y[5], 0.0, 0.0, 0.0];
            for k in 0..3 {
                d[3 + k] = -contract(&gam, 3, v, v, k);
            }
            d
        };
        let mut y = [0.0, 0.0, 0.25, v[0], v[1], 0.0];
        let add = |a: &[f64; 6], b: &[f64; 6], s: f64| {
            let mut o = *a;
            for i in 0..6 {
                o[i] += s * b[i];
            }
            o
        };
        for _ in 0..steps {
            let k1 = acc(&y);
            let k2 = acc(&add(&y, &k1, h / 2.0));
            let k3 = acc(&add(&y, &k2, h / 2.0));
            let k4 = acc(&add(&y, &k3, h));
            for i in 0..6 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let (x, vel) = s.state(1.0);
        for i in 0..3 {
            assert!((x[i] - y[i]).abs() < 1e-6);
            assert!((vel[i] - y[3 + i]).abs() < 1e-6);
        }
        assert!(s.norm_drift(&m, 100) < 1e-4);
    }

    #[test]
    fn smooth_norm_is_conserved() {
        let m = metric(MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 });
        let s = integrate_geodesic(
            &m,
            &point(&[0.0, 0.1, 0.0, 0.0]),
            &Vector::new(1.0, 0.3, 0.2, -0.1),
            (0.0, 1.0),
            None,
        )
        .unwrap();
        assert!(s.norm_drift(&m, 200) < 1e-6);
        assert!(s.equation_residual(&m).unwrap() < 1e-9);
    }

    #[test]
    fn leaving_the_chart_truncates() {
        let m = metric(MetricSpec::Minkowski { dim: 2 });
        let s = integrate_geodesic(&m, &Point::zeros(), &Vector::new(1.0, 0.0, 0.0, 0.0), (0.0, 10.0), None)
            .unwrap();
        assert!(s.truncated());
        assert!((s.t_bounds().1 - 4.0).abs() < 1e-3);
        assert!(matches!(s.require_complete(), Err(LabError::BoundaryExit { .. })));
    }

    #[test]
    fn minkowski_frames() {
        let m = metric(MetricSpec::Minkowski { dim: 4 });
        let s = integrate_geodesic(&m, &Point::zeros(), &Vector::new(1.0, 0.0, 0.0, 0.0), (0.0, 1.0), None)
            .unwrap();
        let f = build_perp_frame(&m, &s, 0.0, &Vector::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(f.d(), 3);
        let legs = f.perp_legs(0.7);
        for (i, l) in legs.iter().enumerate() {
            let mut e = Vector::zeros();
            e[i + 1] = 1.0;
            assert!((l - e).norm() < 1e-14);
        }
        let s = integrate_geodesic(&m, &Point::zeros(), &Vector::new(1.0, 1.0, 0.0, 0.0), (0.0, 1.0), None)
            .unwrap();
        let f = build_perp_frame(&m, &s, 0.0, &Vector::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(f.d(), 2);
        let legs = f.perp_legs(0.5);
        assert!((legs[0] - Vector::new(0.0, 0.0, 1.0, 0.0)).norm() < 1e-14);
        assert!((legs[1] - Vector::new(0.0, 0.0, 0.0, 1.0)).norm() < 1e-14);
        let all = f.legs(0.5);
        assert!((all[2] + all[3] - Vector::new(1.0, 1.0, 0.0, 0.0)).norm() < 1e-14);
        assert!(matches!(
            build_perp_frame(&m, &s, 0.0, &Vector::new(1.0, 1.0, 0.0, 0.0)),
            Err(LabError::Degenerate(_))
        ));
    }

    #[test]
    fn de_sitter_frame_stays_orthonormal() {
        let m = metric(MetricSpec::DeSitterToy { hubble: 1.0, dim: 4 });
        let s = integrate_geodesic(
            &m,
            &point(&[-0.5, 0.0, 0.0, 0.0]),
            &Vector::new(1.0, 0.4, 0.0, 0.0),
            (0.0, 1.0),
            None,
        )
        .unwrap();
        let f = build_perp_frame(&m, &s, 0.3, &Vector::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        assert!(f.orthonormality_defect(&m, 100) < 1e-8);
        assert!(f.transport_residual(&m, 50).unwrap() < 1e-7);
    }

    #[test]
    fn cylindrical_extension_properties() {
        let m = metric(MetricSpec::Minkowski { dim: 3 });
        let v = Vector::new(1.0, 0.3, 0.0, 0.0);
        let s = integrate_geodesic(&m, &Point::zeros(), &v, (0.0, 2.0), None).unwrap();
        let w = Vector::new(0.0, 0.0, 1.0, 0.0);
        let ext = extend_cylindrical(&s, move |_| (w, Vector::zeros()), 1.0).unwrap();
        for x in [point(&[0.3, 0.1, 0.5]), point(&[1.0, -0.2, 0.0])] {
            assert!((ext.value(&x) - w).norm() == 0.0);
        }
        let s2 = s.clone();
        let ext = extend_cylindrical(
            &s,
            move |t| (s2.position(t) * 0.5, s2.velocity(t) * 0.5),
            1.0,
        )
        .unwrap();
        for t in [0.5, 1.0, 1.5] {
            let x = s.position(t);
            assert!((ext.value(&x) - x * 0.5).norm() < 1e-10);
            let d = ext.derivative(&x).unwrap();
            let perp = Vector::new(-0.3, 1.0, 0.7, 0.0);
            assert!(ext.axis().dot(&perp).abs() < 1e-15 || (d * perp).norm() > 0.0);
            let transverse = Vector::new(0.0, 0.0, 1.0, 0.0);
            assert_eq!((d * transverse).norm(), 0.0);
        }
    }

    #[test]
    fn smooth_probe_finds_one_branch() {
        let m = metric(MetricSpec::DeSitterToy { hubble: 1.0, dim: 3 });
        let r = branch_probe(
            &m,
            &point(&[0.0, 0.0, 0.0]),
            &Vector::new(1.0, 0.2, 0.0, 0.0),
            None,
            &[1e-2, 1e-3, 1e-4, 1e-5],
            (0.0, 1.0),
            &ProbeOptions::default(),
        )
        .unwrap();
        assert_eq!(r.branch_count, 1);
    }

    #[test]
    fn minkowski_family_geodesics_converge_linearly() {
        let fam = build_family(
            Arc::new(metric(MetricSpec::Minkowski { dim: 3 })),
            Mollifier::default(),
            &[0.25, 0.125, 0.0625, 0.03125],
            0.1,
        )
        .unwrap();
        let p = Point::zeros();
        let v = Vector::new(1.0, 0.3, 0.1, 0.0);
        // Each member starts with the velocity rescaled to its own unit
        // normalisation, so the exact member geodesic is `p + t·λ_ε v`.
        let data = |eps: f64| {
            let m = fam.member(eps).unwrap();
            let g = m.narrow.components(&p);
            let lam = (inner(&fam.source.components(&p), &v, &v) / inner(&g, &v, &v)).sqrt();
            (p, v * lam)
        };
        let rows = geodesic_family_convergence(&fam, MemberKind::Narrow, &p, &v, &data, (0.0, 1.0), 50)
            .unwrap();
        for r in &rows {
            let m = fam.member(r.epsilon).unwrap();
            let (_, vk) = data(r.epsilon);
            let exact = (vk - v).amax();
            assert!((r.sup_c1 - exact).abs() < 1e-9);
            assert!(m.shift() > 0.0);
        }
        let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        let dev: Vec<f64> = rows.iter().map(|r| r.sup_c1).collect();
        let slope = crate::mollify::loglog_slope(&eps, &dev).unwrap();
        assert!(slope >= 1.0 - 1e-6, "slope {slope}");
        let again = geodesic_family_convergence(&fam, MemberKind::Narrow, &p, &v, &data, (0.0, 1.0), 50)
            .unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn minkowski_distance() {
        let m = metric(MetricSpec::Minkowski { dim: 2 });
        let d = lorentz_distance_1p1(&m, &[0.0, 0.0], &[2.0, 0.0], 400).unwrap();
        assert!((d.lower - 2.0).abs() < 1e-12);
        assert!((d.upper - 2.0).abs() < 1e-9);
        assert!(d.gap <= 1e-3);
        let d = lorentz_distance_1p1(&m, &[0.0, 0.0], &[1.0, 2.0], 100).unwrap();
        assert!(!d.reachable && d.lower == 0.0 && d.upper == 0.0);
        let d = lorentz_distance_1p1(&m, &[0.0, 0.0], &[2.0, 1.0], 200).unwrap();
        assert!((d.upper - 3f64.sqrt()).abs() < 1e-9, "{d:?}");
        assert!(d.lower <= d.upper + 1e-12 && d.gap < 1e-2, "{d:?}");
    }
}

