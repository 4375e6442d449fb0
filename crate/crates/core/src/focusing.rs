//! Jacobi tensors, the matrix Riccati and Raychaudhuri equations, explicit
//! comparison solutions, conjugate and focal point detection, focusing
//! constants, and the extrinsic geometry of spacelike submanifolds.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4};
use serde::{Deserialize, Serialize};

use crate::curvature::{curvature_at, tidal_matrix_at, christoffel_at};
use crate::error::{LabError, Result};
use crate::geodesics::{build_perp_frame, integrate_geodesic, FrameField, GeodesicSolution};
use crate::geometry::{inner, orthonormal_basis, MetricField, Point, SharedMetric, Vector};
use crate::ode::{dopri5, DenseTrajectory, OdeOptions};

type MatrixFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileSource {
    Analytic,
    Geodesic,
}

/// `t ↦ [R](t)`, a symmetric `d × d` matrix in a parallel frame.
#[derive(Clone)]
pub struct TidalProfile {
    d: usize,
    interval: (f64, f64),
    source: ProfileSource,
    sampler: Arc<MatrixFn>,
}

impl std::fmt::Debug for TidalProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TidalProfile")
            .field("d", &self.d)
            .field("interval", &self.interval)
            .field("source", &self.source)
            .finish()
    }
}

impl TidalProfile {
    pub fn new(
        d: usize,
        interval: (f64, f64),
        sampler: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        TidalProfile {
            d,
            interval,
            source: ProfileSource::Analytic,
            sampler: Arc::new(sampler),
        }
    }

    pub fn constant(m: DMatrix<f64>, interval: (f64, f64)) -> Self {
        let d = m.nrows();
        TidalProfile::new(d, interval, move |_| m.clone())
    }

    pub fn scalar(c: f64, d: usize, interval: (f64, f64)) -> Self {
        TidalProfile::constant(DMatrix::identity(d, d) * c, interval)
    }

    pub fn diagonal(entries: &[f64], interval: (f64, f64)) -> Self {
        TidalProfile::constant(DMatrix::from_diagonal(&DVector::from_row_slice(entries)), interval)
    }

    /// Tidal matrix of a smooth metric along the geodesic carried by `frame`.
    pub fn from_frame(metric: SharedMetric, frame: FrameField) -> Self {
        let d = frame.d();
        let interval = frame.bounds();
        TidalProfile {
            d,
            interval,
            source: ProfileSource::Geodesic,
            sampler: Arc::new(move |t| {
                let x = frame.position(t);
                let curv = curvature_at(metric.as_ref(), &x)
                    .unwrap_or_else(|e| panic!("tidal profile off the metric's domain: {e}"));
                tidal_matrix_at(&curv, &frame.velocity(t), &frame.perp_legs(t))
                    .unwrap_or_else(|e| panic!("tidal frame degenerated: {e}"))
            }),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn source(&self) -> ProfileSource {
        self.source
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        (self.sampler)(t)
    }

    /// Largest `|R − Rᵀ|` entry over `samples + 1` uniform parameters.
    pub fn asymmetry(&self, samples: usize) -> f64 {
        let (a, b) = self.interval;
        (0..=samples.max(1))
            .map(|i| {
                let m = self.at(a + (b - a) * i as f64 / samples.max(1) as f64);
                (&m - m.transpose()).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Largest entry jump between adjacent samples, divided by the spacing.
    pub fn lipschitz_estimate(&self, samples: usize) -> f64 {
        let (a, b) = self.interval;
        let h = (b - a) / samples.max(1) as f64;
        let mut prev = self.at(a);
        let mut worst: f64 = 0.0;
        for i in 1..=samples.max(1) {
            let m = self.at(a + h * i as f64);
            worst = worst.max((&m - &prev).amax() / h);
            prev = m;
        }
        worst
    }
}

fn mat_from(d: usize, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, &s[..d * d])
}

/// Solution `[A]` of `[Ä] + [R][A] = 0` with dense output.
#[derive(Debug, Clone)]
pub struct JacobiTrajectory {
    d: usize,
    profile: TidalProfile,
    traj: DenseTrajectory,
    a0: DMatrix<f64>,
}

/// Snapshot of the derived Riccati quantities.
#[derive(Debug, Clone)]
pub struct RiccatiState {
    pub a: DMatrix<f64>,
    pub adot: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub theta: f64,
    pub shear: DMatrix<f64>,
}

impl JacobiTrajectory {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn profile(&self) -> &TidalProfile {
        &self.profile
    }

    pub fn t_start(&self) -> f64 {
        self.traj.t_start()
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.traj.bounds()
    }

    pub fn step_times(&self) -> Vec<f64> {
        self.traj.step_times()
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        mat_from(self.d, &self.traj.eval(t))
    }

    pub fn adot(&self, t: f64) -> DMatrix<f64> {
        mat_from(self.d, &self.traj.eval(t)[self.d * self.d..])
    }

    /// `[B] = [Ȧ][A]⁻¹` and its trace / trace-free parts, where `[A]` is
    /// invertible.
    pub fn riccati(&self, t: f64) -> Option<RiccatiState> {
        let a = self.a(t);
        let adot = self.adot(t);
        let inv = a.clone().try_inverse()?;
        let b = &adot * inv;
        let theta = b.trace();
        let shear = &b - DMatrix::identity(self.d, self.d) * (theta / self.d as f64);
        Some(RiccatiState {
            a,
            adot,
            b,
            theta,
            shear,
        })
    }

    /// Largest `|Ȧᵀ A − Aᵀ Ȧ − W(t_start)|` entry over the step boundaries.
    pub fn lagrange_defect(&self) -> f64 {
        let w = |t: f64| {
            let a = self.a(t);
            let ad = self.adot(t);
            ad.transpose() * &a - a.transpose() * ad
        };
        let w0 = w(self.t_start());
        self.step_times()
            .into_iter()
            .map(|t| (w(t) - &w0).amax())
            .fold(0.0, f64::max)
    }

    /// Largest `|Ä + R A|` entry, `Ä` from the interpolant derivative at the
    /// step boundaries.
    pub fn jacobi_residual(&self) -> f64 {
        let dd = self.d * self.d;
        self.step_times()
            .into_iter()
            .map(|t| {
                let add = mat_from(self.d, &self.traj.eval_derivative(t)[dd..]);
                (add + self.profile.at(t) * self.a(t)).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Integrates the Jacobi equation from `(A0, Ȧ0)` at `t0` to `t1`. Without
/// explicit options the step is capped at `|t1 − t0|/4000` so that compactly
/// supported profiles are not stepped over.
pub fn integrate_jacobi(
    profile: &TidalProfile,
    t0: f64,
    a0: &DMatrix<f64>,
    adot0: &DMatrix<f64>,
    t1: f64,
    opts: Option<OdeOptions>,
) -> Result<JacobiTrajectory> {
    let d = profile.d();
    for m in [a0, adot0] {
        if m.nrows() != d || m.ncols() != d {
            return Err(LabError::InvalidParameter(format!(
                "Jacobi data must be {d}×{d} matrices"
            )));
        }
    }
    let opts = opts.unwrap_or_else(|| OdeOptions {
        h_max: (t1 - t0).abs() / 4000.0,
        ..OdeOptions::tol(1e-12, 1e-14)
    });
    let dd = d * d;
    let mut y0 = Vec::with_capacity(2 * dd);
    y0.extend(a0.iter());
    y0.extend(adot0.iter());
    let prof = profile.clone();
    let rhs = move |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let a = mat_from(d, y);
        dy[..dd].copy_from_slice(&y[dd..2 * dd]);
        let add = -(prof.at(t) * a);
        dy[dd..].copy_from_slice(add.as_slice());
        Ok(())
    };
    let traj = dopri5(rhs, t0, &y0, t1, &opts, |_, _| true)?;
    Ok(JacobiTrajectory {
        d,
        profile: profile.clone(),
        traj,
        a0: a0.clone(),
    })
}

fn smallest_singular(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().min()
}

/// First parameter in `window` after the start where `[A]` is singular.
///
/// The smallest singular value of `[A]` (divided by `|t − t_start|` when
/// `[A](t_start)` is itself singular) is scanned on the step grid; each local
/// minimum is refined by golden-section search to 1e−12 and accepted when it
/// drops below `1e−7·max(1, |A|)`. Parameters closer than ten first steps to
/// the start are excluded.
pub fn detect_conjugate(traj: &JacobiTrajectory, window: (f64, f64)) -> Option<f64> {
    let t0 = traj.t_start();
    let steps = traj.step_times();
    let first = steps.get(1).map_or(0.0, |t| (t - t0).abs());
    let singular_start = smallest_singular(&traj.a0) <= 1e-14 * traj.a0.amax().max(1.0);
    let score = |t: f64| {
        let s = smallest_singular(&traj.a(t));
        if singular_start {
            s / (t - t0).abs().max(1e-300)
        } else {
            s
        }
    };
    let (lo, hi) = traj.bounds();
    let start = window.0.max(lo).max(t0 + 10.0 * first);
    let end = window.1.min(hi);
    if !(end > start) {
        return None;
    }
    let mut grid = vec![start];
    for w in steps.windows(2) {
        for k in 1..=4 {
            let t = w[0] + (w[1] - w[0]) * k as f64 / 4.0;
            if t > start && t < end {
                grid.push(t);
            }
        }
    }
    grid.push(end);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let vals: Vec<f64> = grid.iter().map(|t| score(*t)).collect();
    let accept = |t: f64| smallest_singular(&traj.a(t)) <= 1e-7 * traj.a(t).amax().max(1.0);
    for i in 1..grid.len() {
        let left = vals[i - 1];
        let mid = vals[i];
        let right = vals.get(i + 1).copied().unwrap_or(f64::INFINITY);
        if mid <= left && mid <= right {
            let (a, b) = (grid[i - 1], grid.get(i + 1).copied().unwrap_or(grid[i]));
            let t = golden_min(&score, a, b, 1e-12);
            if accept(t) {
                return Some(t);
            }
        }
    }
    None
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Solution of `b' + b² + κ = 0` with `b(t1) = f`, scaled by `d`.
fn riccati_scalar(kappa: f64, f: f64, t1: f64, d: f64, t: f64) -> f64 {
    let s = t - t1;
    if kappa > 0.0 {
        let w = kappa.sqrt();
        d * w / (w * s + arccot(f / w)).tan()
    } else if kappa < 0.0 {
        let w = (-kappa).sqrt();
        let r = f / w;
        if r.abs() < 1.0 {
            d * w * (w * s + r.atanh()).tanh()
        } else if r == 1.0 || r == -1.0 {
            d * f
        } else {
            // coth branch
            d * w / (w * s + (1.0 / r).atanh()).tanh()
        }
    } else {
        d * f / (1.0 + f * s)
    }
}

/// `arccot` with values in `(0, π)`.
pub fn arccot(x: f64) -> f64 {
    PI / 2.0 - x.atan()
}

/// The explicit comparison solutions `H_{c,f}` and `H_{−C,f}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonProfile {
    pub c: f64,
    pub big_c: f64,
    pub f: f64,
    pub t1: f64,
    pub d: usize,
}

impl ComparisonProfile {
    /// `d√c cot(√c(t − t1) + arccot(f/√c))`.
    pub fn h_c(&self, t: f64) -> f64 {
        riccati_scalar(self.c, self.f, self.t1, self.d as f64, t)
    }

    /// `d√C tanh(√C(t − t1) + artanh(f/√C))` (the coth form when
    /// `|f| > √C`).
    pub fn h_minus_c(&self, t: f64) -> f64 {
        riccati_scalar(-self.big_c, self.f, self.t1, self.d as f64, t)
    }

    /// Parameter where the cot branch diverges to `−∞`.
    pub fn blowup_time(&self) -> f64 {
        let w = self.c.sqrt();
        self.t1 + (PI - arccot(self.f / w)) / w
    }

    /// `[B̃](t) = diag(H_{c,f}, H_{−C,f}, …)/d`.
    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        let d = self.d as f64;
        let mut m = DMatrix::identity(self.d, self.d) * (self.h_minus_c(t) / d);
        m[(0, 0)] = self.h_c(t) / d;
        m
    }

    /// `|b' + b² + c|` and `|b' + b² − C|` at `t`, with `b = H/d` and
    /// `b'` in closed form.
    pub fn residuals(&self, t: f64) -> (f64, f64) {
        let d = self.d as f64;
        let w = self.c.sqrt();
        let phase = w * (t - self.t1) + arccot(self.f / w);
        let b1 = self.h_c(t) / d;
        let db1 = -self.c / phase.sin().powi(2);
        let b2 = self.h_minus_c(t) / d;
        let wc = self.big_c.sqrt();
        let r = self.f / wc;
        let db2 = if r.abs() < 1.0 {
            let ph = wc * (t - self.t1) + r.atanh();
            self.big_c / ph.cosh().powi(2)
        } else if r.abs() == 1.0 {
            0.0
        } else {
            let ph = wc * (t - self.t1) + (1.0 / r).atanh();
            -self.big_c / ph.sinh().powi(2)
        };
        ((db1 + b1 * b1 + self.c).abs(), (db2 + b2 * b2 - self.big_c).abs())
    }
}

pub fn comparison_profile(c: f64, big_c: f64, f: f64, t1: f64, d: usize) -> Result<ComparisonProfile> {
    if !(c > 0.0 && big_c > 0.0) || d == 0 {
        return Err(LabError::InvalidParameter("comparison needs c > 0, C > 0, d ≥ 1".into()));
    }
    Ok(ComparisonProfile { c, big_c, f, t1, d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub window: (f64, f64),
    pub samples: usize,
    /// Smallest eigenvalue of `[B̃] − sym[B]` over the samples.
    pub min_gap: f64,
    pub holds: bool,
}

/// Checks `[B̃](t) − [B](t) ⪰ −tol` on `window` at `samples + 1` points.
pub fn riccati_comparison_check(
    traj: &JacobiTrajectory,
    profile: &ComparisonProfile,
    window: (f64, f64),
    samples: usize,
    tol: f64,
) -> Result<ComparisonReport> {
    let mut min_gap = f64::INFINITY;
    for i in 0..=samples.max(1) {
        let t = window.0 + (window.1 - window.0) * i as f64 / samples.max(1) as f64;
        let st = traj.riccati(t).filter(|s| smallest_singular(&s.a) > 1e-10 * s.a.amax().max(1.0));
        let Some(st) = st else {
            return Err(LabError::Precondition(format!(
                "conjugate point already reached near t = {t}"
            )));
        };
        let sym = (&st.b + st.b.transpose()) * 0.5;
        let gap = profile.matrix(t) - sym;
        min_gap = min_gap.min(gap.symmetric_eigenvalues().min());
    }
    Ok(ComparisonReport {
        window,
        samples,
        min_gap,
        holds: min_gap >= -tol,
    })
}

/// Largest normalised Raychaudhuri residual
/// `|θ̇ + θ²/d + tr σ² + tr R| / (1 + |θ̇| + θ²/d + tr σ² + |tr R|)` over
/// `samples + 1` points of `window` where `[A]` is well conditioned
/// (`σ_min(A) > 1e−4·|A|`). Returns the residual and the number of points
/// used.
pub fn raychaudhuri_residual(traj: &JacobiTrajectory, window: (f64, f64), samples: usize) -> (f64, usize) {
    let d = traj.d() as f64;
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for i in 0..=samples.max(1) {
        let t = window.0 + (window.1 - window.0) * i as f64 / samples.max(1) as f64;
        let Some(st) = traj.riccati(t) else { continue };
        if smallest_singular(&st.a) <= 1e-4 * st.a.amax() {
            continue;
        }
        // θ̇ = tr Ḃ with Ḃ = Ä A⁻¹ − B², Ä from the interpolant.
        let dd = traj.d * traj.d;
        let add = mat_from(traj.d, &traj.traj.eval_derivative(t)[dd..]);
        let inv = st.a.clone().try_inverse().expect("checked invertible");
        let theta_dot = (add * inv - &st.b * &st.b).trace();
        let tr_r = traj.profile.at(t).trace();
        let s2 = (&st.shear * &st.shear).trace();
        let r = theta_dot + st.theta * st.theta / d + s2 + tr_r;
        let scale = 1.0 + theta_dot.abs() + st.theta * st.theta / d + s2.abs() + tr_r.abs();
        worst = worst.max(r.abs() / scale);
        used += 1;
    }
    (worst, used)
}

/// Constants of the focusing lemma together with the certificate values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusingConstants {
    pub c: f64,
    pub r: f64,
    pub d: usize,
    pub delta: f64,
    pub big_t: f64,
    pub nu: f64,
    pub f: f64,
    /// `b(r)` on the cot branch started at `−r` with value `f`.
    pub b_at_r: f64,
    /// Certified blow-up parameter `r + τ`.
    pub blowup: f64,
    /// `T − blowup`.
    pub margin: f64,
}

/// `f(ν, δ, r) = √(2ν/r + δ) + ν/d`.
pub fn focusing_f(nu: f64, delta: f64, r: f64, d: usize) -> f64 {
    (2.0 * nu / r + delta).sqrt() + nu / d as f64
}

/// Certified blow-up parameter for `(c, r, δ, T)`: the cot branch from
/// `t1 = −r` with `b = f` is followed to `r`; from there `b' = δ − b²`
/// diverges after `τ = ln((|b_r| + √δ)/(|b_r| − √δ)) / (2√δ)` provided
/// `b_r < −√δ`. Returns `(f, b_r, r + τ)`; `None` if `b_r ≥ −√δ`.
pub fn certified_blowup(c: f64, r: f64, delta: f64, big_t: f64, d: usize) -> (f64, f64, Option<f64>) {
    let nu = 4.0 * d as f64 / big_t;
    let f = focusing_f(nu, delta, r, d);
    let w = c.sqrt();
    let b_r = w / (2.0 * r * w + arccot(f / w)).tan();
    let sd = delta.sqrt();
    if !(b_r < -sd) {
        return (f, b_r, None);
    }
    let tau = ((b_r.abs() + sd) / (b_r.abs() - sd)).ln() / (2.0 * sd);
    (f, b_r, Some(r + tau))
}

/// Searches `(δ, T)` with `r + τ(δ, T) ≤ T`: δ halves from `c` down to
/// 1e−8; for each δ the smallest admissible `T ∈ [2r, 10⁴ r]` is found by
/// bisection to 1e−4 relative.
pub fn select_focusing_constants(c: f64, r: f64, d: usize) -> Result<FocusingConstants> {
    if !(c > 0.0) || d == 0 {
        return Err(LabError::InvalidParameter("need c > 0 and d ≥ 1".into()));
    }
    if !(r > 0.0 && 4.0 * r * c.sqrt() < PI) {
        return Err(LabError::Precondition(format!(
            "r = {r} must satisfy 0 < r < π/(4√c) = {}",
            PI / (4.0 * c.sqrt())
        )));
    }
    let ok = |delta: f64, t: f64| matches!(certified_blowup(c, r, delta, t, d).2, Some(b) if b <= t);
    let (t_lo, t_hi) = (2.0 * r, 1e4 * r);
    let mut delta = c;
    while delta >= 1e-8 {
        if ok(delta, t_hi) {
            let (mut lo, mut hi) = (t_lo, t_hi);
            if ok(delta, lo) {
                hi = lo;
            }
            while (hi - lo) > 1e-4 * hi {
                let mid = 0.5 * (lo + hi);
                if ok(delta, mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (f, b_r, blow) = certified_blowup(c, r, delta, hi, d);
            let blowup = blow.expect("admissible T");
            return Ok(FocusingConstants {
                c,
                r,
                d,
                delta,
                big_t: hi,
                nu: 4.0 * d as f64 / hi,
                f,
                b_at_r: b_r,
                blowup,
                margin: hi - blowup,
            });
        }
        delta /= 2.0;
    }
    Err(LabError::SearchFailure(format!(
        "no (delta, T) certificate for c = {c}, r = {r}; r may be too close to π/(4√c)"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub verified: bool,
    /// `min tr[R] + δ` on `[−T, T]`.
    pub trace_margin: f64,
    /// Smallest eigenvalue of `[R] − diag(c, −C, …)` on `[−r, r]`.
    pub tidal_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateOutcome {
    pub found: bool,
    pub t_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusingReport {
    pub hypotheses: HypothesisCheck,
    pub conjugate_or_focal: ConjugateOutcome,
    pub constants: FocusingConstants,
    pub big_c: f64,
    pub raychaudhuri_residual: f64,
    /// A conjugate point was found at `t* ≤ T`.
    pub pass: bool,
}

fn hypothesis_margins(profile: &TidalProfile, k: &FocusingConstants, big_c: f64, samples: usize) -> (f64, f64) {
    let grid = |a: f64, b: f64| (0..=samples).map(move |i| a + (b - a) * i as f64 / samples as f64);
    let trace_margin = grid(-k.big_t, k.big_t)
        .map(|t| profile.at(t).trace() + k.delta)
        .fold(f64::INFINITY, f64::min);
    let tidal_margin = grid(-k.r, k.r)
        .map(|t| {
            let mut m = profile.at(t);
            let m = {
                let sym = (&m + m.transpose()) * 0.5;
                m = sym;
                for i in 0..m.nrows() {
                    m[(i, i)] -= if i == 0 { k.c } else { -big_c };
                }
                m
            };
            m.symmetric_eigenvalues().min()
        })
        .fold(f64::INFINITY, f64::min);
    (trace_margin, tidal_margin)
}

/// Verifies `tr[R] ≥ −δ` on `[−T, T]` and `[R] > diag(c, −C, …)` on
/// `[−r, r]` (2001 samples each), then integrates `[A](−T) = 0`,
/// `[Ȧ](−T) = Id` to `T` and looks for the first conjugate point.
pub fn focusing_experiment(
    profile: &TidalProfile,
    constants: &FocusingConstants,
    big_c: f64,
) -> Result<FocusingReport> {
    let d = profile.d();
    if d != constants.d {
        return Err(LabError::InvalidParameter(format!(
            "profile dimension {d} does not match constants ({})",
            constants.d
        )));
    }
    let (trace_margin, tidal_margin) = hypothesis_margins(profile, constants, big_c, 2000);
    if !(trace_margin >= 0.0) {
        return Err(LabError::Hypothesis {
            what: "tr[R] ≥ −δ on [−T, T]".into(),
            worst: trace_margin,
        });
    }
    if !(tidal_margin > 0.0) {
        return Err(LabError::Hypothesis {
            what: "[R] > diag(c, −C, …, −C) on [−r, r]".into(),
            worst: tidal_margin,
        });
    }
    let t = constants.big_t;
    let traj = integrate_jacobi(
        profile,
        -t,
        &DMatrix::zeros(d, d),
        &DMatrix::identity(d, d),
        t,
        None,
    )?;
    let t_star = detect_conjugate(&traj, (-t, t));
    let window = (-t, t_star.unwrap_or(t));
    let (resid, _) = raychaudhuri_residual(&traj, window, 2000);
    Ok(FocusingReport {
        hypotheses: HypothesisCheck {
            verified: true,
            trace_margin,
            tidal_margin,
        },
        conjugate_or_focal: ConjugateOutcome {
            found: t_star.is_some(),
            t_star,
        },
        constants: *constants,
        big_c,
        raychaudhuri_residual: resid,
        pass: matches!(t_star, Some(s) if s <= t),
    })
}

type EmbeddingFn = dyn Fn(&[f64]) -> (Point, Vec<Vector>, Vec<Vec<Vector>>) + Send + Sync;

/// A spacelike patch `u ↦ x(u)` of dimension `k = n − m`, with first and
/// second parameter derivatives.
#[derive(Clone)]
pub struct SubmanifoldPatch {
    ambient_dim: usize,
    k: usize,
    embedding: Arc<EmbeddingFn>,
    label: String,
}

impl std::fmt::Debug for SubmanifoldPatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubmanifoldPatch")
            .field("label", &self.label)
            .field("ambient_dim", &self.ambient_dim)
            .field("k", &self.k)
            .finish()
    }
}

/// Extrinsic data at one parameter.
#[derive(Debug, Clone)]
pub struct PatchPoint {
    pub x: Point,
    pub tangents: Vec<Vector>,
    pub induced: DMatrix<f64>,
    pub induced_inv: DMatrix<f64>,
    /// `second[a][b] = II(∂_a x, ∂_b x)`.
    pub second: Vec<Vec<Vector>>,
    pub mean_curvature: Vector,
    pub g: Matrix4<f64>,
}

impl SubmanifoldPatch {
    pub fn new(
        ambient_dim: usize,
        k: usize,
        label: &str,
        embedding: impl Fn(&[f64]) -> (Point, Vec<Vector>, Vec<Vec<Vector>>) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(k >= 1 && k + 1 < ambient_dim) {
            return Err(LabError::InvalidParameter(
                "patch dimension must satisfy 1 ≤ k ≤ n − 2".into(),
            ));
        }
        Ok(SubmanifoldPatch {
            ambient_dim,
            k,
            embedding: Arc::new(embedding),
            label: label.into(),
        })
    }

    /// Coordinate 2-sphere `{t = t0, |x − c| = R}` in a 4-dimensional chart
    /// `(t, x, y, z)`, parametrised by polar and azimuthal angle.
    pub fn coordinate_sphere(t0: f64, center: [f64; 3], radius: f64) -> Self {
        let emb = move |u: &[f64]| {
            let (th, ph) = (u[0], u[1]);
            let (st, ct, sp, cp) = (th.sin(), th.cos(), ph.sin(), ph.cos());
            let x = Point::new(
                t0,
                center[0] + radius * st * cp,
                center[1] + radius * st * sp,
                center[2] + radius * ct,
            );
            let d_th = Vector::new(0.0, radius * ct * cp, radius * ct * sp, -radius * st);
            let d_ph = Vector::new(0.0, -radius * st * sp, radius * st * cp, 0.0);
            let d_thth = Vector::new(0.0, -radius * st * cp, -radius * st * sp, -radius * ct);
            let d_thph = Vector::new(0.0, -radius * ct * sp, radius * ct * cp, 0.0);
            let d_phph = Vector::new(0.0, -radius * st * cp, -radius * st * sp, 0.0);
            (x, vec![d_th, d_ph], vec![vec![d_thth, d_thph], vec![d_thph, d_phph]])
        };
        SubmanifoldPatch {
            ambient_dim: 4,
            k: 2,
            embedding: Arc::new(emb),
            label: format!("sphere t={t0} R={radius}"),
        }
    }

    /// Coordinate plane `{t = t0, z = z0}` in `(t, x, y, z)`.
    pub fn coordinate_plane(t0: f64, z0: f64) -> Self {
        let emb = move |u: &[f64]| {
            let x = Point::new(t0, u[0], u[1], z0);
            let z = Vector::zeros();
            (
                x,
                vec![Vector::new(0.0, 1.0, 0.0, 0.0), Vector::new(0.0, 0.0, 1.0, 0.0)],
                vec![vec![z, z], vec![z, z]],
            )
        };
        SubmanifoldPatch {
            ambient_dim: 4,
            k: 2,
            embedding: Arc::new(emb),
            label: format!("plane t={t0} z={z0}"),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn codimension(&self) -> usize {
        self.ambient_dim - self.k
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Tangents, induced metric, second fundamental form and mean curvature.
    pub fn at(&self, metric: &dyn MetricField, u: &[f64]) -> Result<PatchPoint> {
        if metric.dim() != self.ambient_dim {
            return Err(LabError::InvalidParameter("patch and metric dimensions differ".into()));
        }
        let (x, tangents, second_raw) = (self.embedding)(u);
        let g = metric.components(&x);
        let k = self.k;
        let induced = DMatrix::from_fn(k, k, |a, b| inner(&g, &tangents[a], &tangents[b]));
        if induced.clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(LabError::Degenerate("induced metric is not positive definite".into()));
        }
        let induced_inv = induced
            .clone()
            .try_inverse()
            .ok_or_else(|| LabError::Degenerate("induced metric is singular".into()))?;
        let gam = christoffel_at(metric, &x)?;
        let n = self.ambient_dim;
        let normal_part = |w: Vector| {
            let mut out = w;
            for a in 0..k {
                for b in 0..k {
                    out -= tangents[a] * (induced_inv[(a, b)] * inner(&g, &w, &tangents[b]));
                }
            }
            out
        };
        let mut second = vec![vec![Vector::zeros(); k]; k];
        for a in 0..k {
            for b in 0..k {
                let mut cov = second_raw[a][b];
                for m in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            cov[m] += gam[m][i][j] * tangents[a][i] * tangents[b][j];
                        }
                    }
                }
                second[a][b] = normal_part(cov);
            }
        }
        let mut h = Vector::zeros();
        for a in 0..k {
            for b in 0..k {
                h += second[a][b] * induced_inv[(a, b)];
            }
        }
        h /= k as f64;
        Ok(PatchPoint {
            x,
            tangents,
            induced,
            induced_inv,
            second,
            mean_curvature: h,
            g,
        })
    }

    /// `II(v, w)` for tangent vectors given by parameter components.
    pub fn second_fundamental_form(
        &self,
        metric: &dyn MetricField,
        u: &[f64],
        v: &[f64],
        w: &[f64],
    ) -> Result<Vector> {
        let p = self.at(metric, u)?;
        let mut out = Vector::zeros();
        for a in 0..self.k {
            for b in 0..self.k {
                out += p.second[a][b] * (v[a] * w[b]);
            }
        }
        Ok(out)
    }

    pub fn mean_curvature(&self, metric: &dyn MetricField, u: &[f64]) -> Result<Vector> {
        Ok(self.at(metric, u)?.mean_curvature)
    }

    /// `k_S(v) = g(H_S, v)`.
    pub fn convergence(&self, metric: &dyn MetricField, u: &[f64], v: &Vector) -> Result<f64> {
        let p = self.at(metric, u)?;
        Ok(inner(&p.g, &p.mean_curvature, v))
    }

    /// Future null normals `n_t + s` with `n_t` the unit future timelike
    /// normal and `s` a unit spacelike normal: two for codimension 2,
    /// `samples` equally spaced or Fibonacci directions otherwise.
    pub fn future_null_normals(
        &self,
        metric: &dyn MetricField,
        u: &[f64],
        samples: usize,
    ) -> Result<Vec<Vector>> {
        let p = self.at(metric, u)?;
        let n = self.ambient_dim;
        let time = metric.time_field(&p.x);
        let (basis, signs) = orthonormal_basis(&p.g, n, &p.tangents)
            .ok_or_else(|| LabError::Degenerate("no normal frame".into()))?;
        let normals: Vec<(Vector, f64)> = basis[self.k..]
            .iter()
            .copied()
            .zip(signs[self.k..].iter().copied())
            .collect();
        let mut nt = normals
            .iter()
            .find(|(_, s)| *s < 0.0)
            .map(|(v, _)| *v)
            .ok_or_else(|| LabError::Degenerate("normal space has no timelike direction".into()))?;
        if inner(&p.g, &nt, &time) > 0.0 {
            nt = -nt;
        }
        let spatial: Vec<Vector> = normals.iter().filter(|(_, s)| *s > 0.0).map(|(v, _)| *v).collect();
        let dirs: Vec<Vec<f64>> = match spatial.len() {
            1 => vec![vec![1.0], vec![-1.0]],
            2 => (0..samples.max(2))
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / samples.max(2) as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect(),
            _ => crate::curvature::spatial_directions(4, samples.max(2))
                .into_iter()
                .map(|v| vec![v[1], v[2], v[3]])
                .collect(),
        };
        Ok(dirs
            .into_iter()
            .map(|c| {
                let mut v = nt;
                for (ci, s) in c.iter().zip(&spatial) {
                    v += s * *ci;
                }
                v
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalReport {
    pub convergence: f64,
    pub b: f64,
    pub hypothesis: String,
    pub hypothesis_worst: f64,
    pub focal: ConjugateOutcome,
    /// Focal point found at a parameter `≤ b`, so the normal geodesic is
    /// not maximising from S beyond it.
    pub not_maximising_by_b: bool,
    pub raychaudhuri_residual: f64,
}

/// Focal point search along the normal null geodesic from `x(u)` with
/// initial velocity `nu`, using the Riccati flow started at the null
/// Weingarten map of the patch in direction `nu`.
pub fn focal_experiment(
    metric: SharedMetric,
    patch: &SubmanifoldPatch,
    u: &[f64],
    nu: &Vector,
    b: f64,
    delta: f64,
) -> Result<FocalReport> {
    let m = metric.as_ref();
    let p = patch.at(m, u)?;
    let g = p.g;
    let scale = nu.norm();
    if inner(&g, nu, nu).abs() > 1e-10 * scale * scale {
        return Err(LabError::Precondition("nu is not null".into()));
    }
    for t in &p.tangents {
        if inner(&g, nu, t).abs() > 1e-10 * scale * t.norm() {
            return Err(LabError::Precondition("nu is not normal to the patch".into()));
        }
    }
    let c = inner(&g, &p.mean_curvature, nu);
    if !(c > 0.0) {
        return Err(LabError::Precondition(format!(
            "convergence k_S(nu) = {c} is not positive"
        )));
    }
    if !(b > 1.0 / c) {
        return Err(LabError::Precondition(format!("b = {b} must exceed 1/c = {}", 1.0 / c)));
    }
    let gamma = integrate_geodesic(m, &p.x, nu, (0.0, b), None)?;
    gamma.require_complete()?;
    let frame = build_perp_frame(m, &gamma, 0.0, &p.tangents[0])?;
    let legs = frame.perp_legs(0.0);
    let d = legs.len();
    // Tangential parts of the screen legs and the null Weingarten map.
    let k = patch.k();
    let tangential = |e: &Vector| {
        let mut out = Vector::zeros();
        for a in 0..k {
            for bb in 0..k {
                out += p.tangents[a] * (p.induced_inv[(a, bb)] * inner(&g, e, &p.tangents[bb]));
            }
        }
        out
    };
    let coeffs: Vec<Vec<f64>> = legs
        .iter()
        .map(|e| {
            (0..k)
                .map(|a| (0..k).map(|bb| p.induced_inv[(a, bb)] * inner(&g, e, &p.tangents[bb])).sum())
                .collect()
        })
        .collect();
    let tau: Vec<Vector> = legs.iter().map(tangential).collect();
    let a0 = DMatrix::from_fn(d, d, |j, i| inner(&g, &tau[i], &legs[j]));
    let weingarten = DMatrix::from_fn(d, d, |i, j| {
        let mut s = 0.0;
        for a in 0..k {
            for bb in 0..k {
                s += coeffs[i][a] * coeffs[j][bb] * inner(&g, &p.second[a][bb], nu);
            }
        }
        s
    });
    let adot0 = -&weingarten * &a0 + (DMatrix::identity(d, d) - &a0);
    let profile = TidalProfile::from_frame(metric.clone(), frame.clone());
    let traj = integrate_jacobi(&profile, 0.0, &a0, &adot0, b, None)?;
    let t_star = detect_conjugate(&traj, (0.0, b));
    // Hypothesis along the run.
    let samples = 200;
    let (what, worst) = if patch.codimension() == 2 {
        let worst = (0..=samples)
            .map(|i| {
                let t = b * i as f64 / samples as f64;
                curvature_at(m, &gamma.position(t)).map(|c| c.ric(&gamma.velocity(t), &gamma.velocity(t)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        ("Ric(γ̇,γ̇) ≥ −δ".to_string(), worst)
    } else {
        let worst = (0..=samples)
            .map(|i| {
                let t = b * i as f64 / samples as f64;
                profile.at(t).trace()
            })
            .fold(f64::INFINITY, f64::min);
        ("Σ g(R(E_i,γ̇)γ̇,E_i) ≥ −δ".to_string(), worst)
    };
    if worst < -delta {
        return Err(LabError::Hypothesis { what, worst });
    }
    let (resid, _) = raychaudhuri_residual(&traj, (0.0, t_star.unwrap_or(b)), 400);
    Ok(FocalReport {
        convergence: c,
        b,
        hypothesis: what,
        hypothesis_worst: worst,
        focal: ConjugateOutcome {
            found: t_star.is_some(),
            t_star,
        },
        not_maximising_by_b: matches!(t_star, Some(s) if s <= b),
        raychaudhuri_residual: resid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappedWitness {
    pub parameter: Vec<f64>,
    pub normal: Vec<f64>,
    pub convergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappedReport {
    pub samples: usize,
    pub min_convergence: f64,
    pub witness: TrappedWitness,
    /// `H_S` was past-pointing timelike at every sampled parameter.
    pub mean_curvature_past_timelike: bool,
    pub pass: bool,
}

/// Samples `k_S` over all future null normals at the given parameters.
pub fn trapped_certificate(
    metric: &dyn MetricField,
    patch: &SubmanifoldPatch,
    params: &[Vec<f64>],
    normals_per_point: usize,
) -> Result<TrappedReport> {
    let mut min = f64::INFINITY;
    let mut witness = TrappedWitness {
        parameter: vec![],
        normal: vec![],
        convergence: f64::INFINITY,
    };
    let mut past_timelike = true;
    for u in params {
        let p = patch.at(metric, u)?;
        let h = p.mean_curvature;
        let time = metric.time_field(&p.x);
        past_timelike &= inner(&p.g, &h, &h) < 0.0 && inner(&p.g, &h, &time) > 0.0;
        for nu in patch.future_null_normals(metric, u, normals_per_point)? {
            let k = inner(&p.g, &h, &nu);
            if k < min {
                min = k;
                witness = TrappedWitness {
                    parameter: u.clone(),
                    normal: nu.iter().take(metric.dim()).copied().collect(),
                    convergence: k,
                };
            }
        }
    }
    Ok(TrappedReport {
        samples: params.len(),
        min_convergence: min,
        witness,
        mean_curvature_past_timelike: past_timelike,
        pass: min > 0.0,
    })
}

/// Jacobi data along a geodesic of a smooth metric: integrates from
/// `[A](t0) = 0`, `[Ȧ](t0) = Id` in the parallel screen frame.
pub fn jacobi_along_geodesic(
    metric: SharedMetric,
    gamma: &GeodesicSolution,
    seed: &Vector,
) -> Result<JacobiTrajectory> {
    let (a, b) = gamma.t_bounds();
    let frame = build_perp_frame(metric.as_ref(), gamma, a, seed)?;
    let d = frame.d();
    let profile = TidalProfile::from_frame(metric, frame);
    integrate_jacobi(&profile, a, &DMatrix::zeros(d, d), &DMatrix::identity(d, d), b, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_metric, MetricSpec, ScaleFactor};

    fn minkowski4() -> SharedMetric {
        Arc::new(builtin_metric(&MetricSpec::Minkowski { dim: 4 }).unwrap())
    }

    #[test]
    fn jacobi_closed_forms() {
        let id = DMatrix::<f64>::identity(3, 3);
        let z = DMatrix::<f64>::zeros(3, 3);
        let flat = TidalProfile::scalar(0.0, 3, (0.0, 5.0));
        let tr = integrate_jacobi(&flat, 0.0, &z, &id, 5.0, None).unwrap();
        assert!((tr.a(2.5) - &id * 2.5).amax() < 1e-12);
        let osc = TidalProfile::scalar(1.0, 3, (0.0, 5.0));
        let tr = integrate_jacobi(&osc, 0.0, &z, &id, 5.0, None).unwrap();
        for t in [0.3, 1.7, 4.1] {
            assert!((tr.a(t) - &id * t.sin()).amax() < 1e-9);
        }
        assert!(tr.jacobi_residual() < 1e-9);
        let mixed = TidalProfile::diagonal(&[1.0, -1.0], (0.0, 2.0));
        let tr = integrate_jacobi(
            &mixed,
            0.0,
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            2.0,
            None,
        )
        .unwrap();
        let a = tr.a(1.5);
        assert!((a[(0, 0)] - 1.5f64.sin()).abs() < 1e-9);
        assert!((a[(1, 1)] - 1.5f64.sinh()).abs() < 1e-9);
    }

    #[test]
    fn conjugate_detection() {
        let id = DMatrix::<f64>::identity(3, 3);
        let z = DMatrix::<f64>::zeros(3, 3);
        let tr = integrate_jacobi(&TidalProfile::scalar(1.0, 3, (0.0, 5.0)), 0.0, &z, &id, 5.0, None).unwrap();
        assert!((detect_conjugate(&tr, (0.0, 5.0)).unwrap() - PI).abs() < 1e-6);
        let tr = integrate_jacobi(&TidalProfile::scalar(0.0, 3, (0.0, 1e3)), 0.0, &z, &id, 1e3, None).unwrap();
        assert!(detect_conjugate(&tr, (0.0, 1e3)).is_none());
        let tr = integrate_jacobi(
            &TidalProfile::diagonal(&[4.0, 0.25], (0.0, 5.0)),
            0.0,
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            5.0,
            None,
        )
        .unwrap();
        assert!((detect_conjugate(&tr, (0.0, 5.0)).unwrap() - PI / 2.0).abs() < 1e-6);
        // Even multiplicity (det ∝ sin² t) is still found.
        let tr = integrate_jacobi(
            &TidalProfile::scalar(1.0, 2, (0.0, 5.0)),
            0.0,
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            5.0,
            None,
        )
        .unwrap();
        assert!((detect_conjugate(&tr, (0.0, 5.0)).unwrap() - PI).abs() < 1e-6);
    }

    #[test]
    fn comparison_examples() {
        let p = comparison_profile(1.0, 1.0, 0.0, 0.0, 3).unwrap();
        for t in [0.1, 0.7, 1.3] {
            assert!((p.h_c(t) + 3.0 * t.tan()).abs() < 1e-12);
            assert!((p.h_minus_c(t) - 3.0 * t.tanh()).abs() < 1e-12);
            let (r1, r2) = p.residuals(t);
            assert!(r1 < 1e-12 && r2 < 1e-12);
        }
        assert!((p.blowup_time() - PI / 2.0).abs() < 1e-15);
        assert!(p.h_minus_c(1e3).abs() <= 3.0);
        let q = comparison_profile(2.0, 0.5, 3.0, -0.2, 2).unwrap();
        for t in [-0.1, 0.5, 2.0] {
            let (_, r2) = q.residuals(t);
            assert!(r2 < 1e-9 * (1.0 + q.h_minus_c(t).powi(2)));
        }
    }

    #[test]
    fn raychaudhuri_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let z = DMatrix::<f64>::zeros(3, 3);
        let tr = integrate_jacobi(&TidalProfile::scalar(0.0, 3, (0.0, 3.0)), 0.0, &z, &id, 3.0, None).unwrap();
        let st = tr.riccati(1.5).unwrap();
        assert!((st.theta - 2.0).abs() < 1e-10);
        assert!(raychaudhuri_residual(&tr, (0.1, 3.0), 200).0 < 1e-9);
        let tr = integrate_jacobi(&TidalProfile::scalar(1.0, 3, (0.0, 3.0)), 0.0, &z, &id, 3.0, None).unwrap();
        assert!(raychaudhuri_residual(&tr, (0.1, 3.0), 200).0 < 1e-6);
    }

    #[test]
    fn lagrange_identity_holds() {
        let prof = TidalProfile::new(2, (0.0, 4.0), |t| {
            DMatrix::from_row_slice(2, 2, &[t.sin(), 0.3 * t.cos(), 0.3 * t.cos(), -0.5])
        });
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let ad0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -0.1, 0.3]);
        let tr = integrate_jacobi(&prof, 0.0, &a0, &ad0, 4.0, None).unwrap();
        assert!(tr.lagrange_defect() < 1e-8);
    }

    #[test]
    fn focusing_constants_examples() {
        let k = select_focusing_constants(1.0, 0.7, 3).unwrap();
        assert!(k.blowup <= k.big_t && k.margin >= 0.0);
        assert!(k.delta > 0.0 && k.big_t >= 1.4);
        assert!((k.nu - 12.0 / k.big_t).abs() < 1e-12);
        assert!(matches!(
            select_focusing_constants(1.0, PI / 4.0, 3),
            Err(LabError::Precondition(_))
        ));
        let mut last_f = f64::INFINITY;
        let mut last_blow = f64::INFINITY;
        for m in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let t = k.big_t * m;
            let (f, _, blow) = certified_blowup(1.0, 0.7, k.delta, t, 3);
            assert!(f < last_f);
            let blow = blow.unwrap();
            assert!(blow <= last_blow);
            last_f = f;
            last_blow = blow;
        }
    }

    #[test]
    fn zero_profile_makes_no_claim() {
        let k = select_focusing_constants(0.9, 0.5, 3).unwrap();
        let r = focusing_experiment(&TidalProfile::scalar(0.0, 3, (-k.big_t, k.big_t)), &k, 1.0);
        assert!(matches!(r, Err(LabError::Hypothesis { .. })));
        let rep = focusing_experiment(&TidalProfile::scalar(1.0, 3, (-k.big_t, k.big_t)), &k, 1.0).unwrap();
        assert!(rep.pass);
        let t = rep.conjugate_or_focal.t_star.unwrap();
        assert!((t - (-k.big_t + PI)).abs() < 1e-6);
    }

    #[test]
    fn sphere_extrinsic_geometry() {
        let m = minkowski4();
        let rho = 1.5;
        let s = SubmanifoldPatch::coordinate_sphere(0.0, [0.0, 0.0, 0.0], rho);
        let u = [0.9, 0.4];
        let p = s.at(m.as_ref(), &u).unwrap();
        let radial = (p.x - Point::zeros()) / rho;
        assert!((p.mean_curvature + radial / rho).norm() < 1e-12);
        let ingoing = Vector::new(1.0, 0.0, 0.0, 0.0) - radial;
        let outgoing = Vector::new(1.0, 0.0, 0.0, 0.0) + radial;
        assert!((s.convergence(m.as_ref(), &u, &ingoing).unwrap() - 1.0 / rho).abs() < 1e-12);
        assert!((s.convergence(m.as_ref(), &u, &outgoing).unwrap() + 1.0 / rho).abs() < 1e-12);
        let plane = SubmanifoldPatch::coordinate_plane(0.0, 0.0);
        let pp = plane.at(m.as_ref(), &[0.3, 0.1]).unwrap();
        assert_eq!(pp.mean_curvature.norm(), 0.0);
    }

    #[test]
    fn sphere_focal_points() {
        let m = minkowski4();
        for rho in [1.0, 2.0] {
            let s = SubmanifoldPatch::coordinate_sphere(0.0, [0.0, 0.0, 0.0], rho);
            let u = [1.1, 0.3];
            let x = s.at(m.as_ref(), &u).unwrap().x;
            let radial = x / rho;
            let nu = Vector::new(1.0, 0.0, 0.0, 0.0) - radial;
            let rep = focal_experiment(m.clone(), &s, &u, &nu, 1.25 * rho, 0.0).unwrap();
            assert!((rep.convergence - 1.0 / rho).abs() < 1e-12);
            assert!((rep.focal.t_star.unwrap() - rho).abs() < 1e-3 * rho, "{rep:?}");
            assert!(rep.not_maximising_by_b);
        }
        let plane = SubmanifoldPatch::coordinate_plane(0.0, 0.0);
        let r = focal_experiment(m, &plane, &[0.0, 0.0], &Vector::new(1.0, 0.0, 0.0, 1.0), 2.0, 0.0);
        assert!(matches!(r, Err(LabError::Precondition(_))));
    }

    #[test]
    fn trapped_certificates() {
        let m = minkowski4();
        let s = SubmanifoldPatch::coordinate_sphere(0.0, [0.0, 0.0, 0.0], 1.0);
        let params: Vec<Vec<f64>> = (1..5).flat_map(|i| (0..4).map(move |j| vec![0.6 * i as f64, 1.5 * j as f64])).collect();
        let rep = trapped_certificate(m.as_ref(), &s, &params, 8).unwrap();
        assert!(!rep.pass);
        assert!((rep.min_convergence + 1.0).abs() < 1e-12);
        let contracting = builtin_metric(&MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Exponential { rate: -1.0 },
        })
        .unwrap();
        let rep = trapped_certificate(&contracting, &s, &params, 8).unwrap();
        assert!(!rep.pass);
        let big = SubmanifoldPatch::coordinate_sphere(0.0, [0.0, 0.0, 0.0], 2.0);
        let rep = trapped_certificate(&contracting, &big, &params, 8).unwrap();
        assert!(rep.pass && rep.mean_curvature_past_timelike);
        assert!((rep.min_convergence - 0.5).abs() < 1e-12);
        let plane = SubmanifoldPatch::coordinate_plane(0.0, 0.0);
        let rep = trapped_certificate(m.as_ref(), &plane, &[vec![0.0, 0.0]], 8).unwrap();
        assert!(!rep.pass && rep.min_convergence == 0.0);
    }
}
