//! Charts, metric fields, tangent vectors and causal classification.

mod builtin;

pub use builtin::{builtin_metric, describe, BuiltinMetric, MetricSpec, ScaleFactor, METRIC_NAMES};

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{LabError, Result};

pub const MAX_DIM: usize = 4;

pub type Point = Vector4<f64>;
pub type Vector = Vector4<f64>;
/// `dg[k]` holds the matrix `∂_k g_ij`.
pub type MetricGradient = [Matrix4<f64>; MAX_DIM];
/// `ddg[a][b]` holds the matrix `∂_a ∂_b g_ij`.
pub type MetricHessian = [[Matrix4<f64>; MAX_DIM]; MAX_DIM];

pub fn zero_gradient() -> MetricGradient {
    [Matrix4::zeros(); MAX_DIM]
}

pub fn zero_hessian() -> MetricHessian {
    [[Matrix4::zeros(); MAX_DIM]; MAX_DIM]
}

/// Builds a padded point from the first `n` coordinates.
pub fn point(coords: &[f64]) -> Point {
    assert!(coords.len() <= MAX_DIM, "at most {MAX_DIM} coordinates");
    let mut p = Point::zeros();
    for (i, c) in coords.iter().enumerate() {
        p[i] = *c;
    }
    p
}

/// Euclidean length restricted to the first `dim` components.
pub fn euclid_norm_dim(v: &Vector, dim: usize) -> f64 {
    v.iter().take(dim).map(|c| c * c).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularity {
    Smooth,
    C1Alpha(f64),
    C1,
}

impl Regularity {
    pub fn is_smooth(&self) -> bool {
        matches!(self, Regularity::Smooth)
    }
}

/// Axis-aligned coordinate box carrying the Euclidean background metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartBox {
    dim: usize,
    lower: Point,
    upper: Point,
}

impl ChartBox {
    pub fn new(lower: &[f64], upper: &[f64]) -> Result<Self> {
        let dim = lower.len();
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(LabError::InvalidParameter(format!(
                "chart dimension {dim} outside 2..=4"
            )));
        }
        if upper.len() != dim {
            return Err(LabError::InvalidParameter(
                "chart corners have different lengths".into(),
            ));
        }
        if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
            return Err(LabError::InvalidParameter(
                "chart lower corner must be below upper corner".into(),
            ));
        }
        Ok(ChartBox {
            dim,
            lower: point(lower),
            upper: point(upper),
        })
    }

    /// Cube `[-half, half]^dim`.
    pub fn cube(dim: usize, half: f64) -> Result<Self> {
        ChartBox::new(&vec![-half; dim], &vec![half; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &Point {
        &self.lower
    }

    pub fn upper(&self) -> &Point {
        &self.upper
    }

    pub fn center(&self) -> Point {
        (self.lower + self.upper) * 0.5
    }

    pub fn contains(&self, x: &Point) -> bool {
        (0..self.dim).all(|i| x[i] >= self.lower[i] && x[i] <= self.upper[i])
    }

    /// Distance to the boundary in the sup norm; negative outside.
    pub fn boundary_distance(&self, x: &Point) -> f64 {
        (0..self.dim)
            .map(|i| (x[i] - self.lower[i]).min(self.upper[i] - x[i]))
            .fold(f64::INFINITY, f64::min)
    }

    /// The box shrunk by `margin` on every side.
    pub fn shrink(&self, margin: f64) -> Result<ChartBox> {
        let lo: Vec<f64> = (0..self.dim).map(|i| self.lower[i] + margin).collect();
        let hi: Vec<f64> = (0..self.dim).map(|i| self.upper[i] - margin).collect();
        ChartBox::new(&lo, &hi)
    }

    pub fn contains_box(&self, other: &ChartBox) -> bool {
        other.dim == self.dim && self.contains(&other.lower) && self.contains(&other.upper)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        let mut p = Point::zeros();
        for i in 0..self.dim {
            p[i] = rng.gen_range(self.lower[i]..=self.upper[i]);
        }
        p
    }

    /// Uniform tensor grid with `per_axis` points per axis (corners included).
    pub fn grid(&self, per_axis: usize) -> Vec<Point> {
        let per_axis = per_axis.max(1);
        let total = per_axis.pow(self.dim as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = Point::zeros();
            for i in 0..self.dim {
                let k = rem % per_axis;
                rem /= per_axis;
                p[i] = if per_axis == 1 {
                    0.5 * (self.lower[i] + self.upper[i])
                } else {
                    self.lower[i] + (self.upper[i] - self.lower[i]) * k as f64 / (per_axis - 1) as f64
                };
            }
            out.push(p);
        }
        out
    }
}

/// Metric components and derivatives at one point.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub g: Matrix4<f64>,
    pub dg: MetricGradient,
    pub ddg: Option<MetricHessian>,
}

/// A Lorentzian metric on a chart box with analytically supplied derivatives.
///
/// Components are stored padded to 4×4: slots at or beyond `dim()` must hold
/// the identity with vanishing derivatives.
pub trait MetricField: Send + Sync {
    fn dim(&self) -> usize;
    fn chart(&self) -> &ChartBox;
    fn regularity(&self) -> Regularity;
    fn label(&self) -> String;

    fn components(&self, x: &Point) -> Matrix4<f64>;
    fn gradient(&self, x: &Point) -> MetricGradient;

    /// Second derivatives, when the metric has them.
    fn hessian(&self, _x: &Point) -> Option<MetricHessian> {
        None
    }

    /// All available derivatives in one evaluation.
    fn jet(&self, x: &Point) -> MetricJet {
        MetricJet {
            g: self.components(x),
            dg: self.gradient(x),
            ddg: self.hessian(x),
        }
    }

    /// First-order jet only; mollified metrics override this to skip the
    /// second-derivative pass.
    fn first_jet(&self, x: &Point) -> (Matrix4<f64>, MetricGradient) {
        (self.components(x), self.gradient(x))
    }

    /// Future-directed timelike field fixing the time orientation.
    fn time_field(&self, _x: &Point) -> Vector {
        Vector::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Coordinate hyperplanes `(axis, value)` where the metric loses
    /// smoothness. Quadratures place panel boundaries there.
    fn breakpoints(&self) -> Vec<(usize, f64)> {
        Vec::new()
    }

    /// Coordinates the components depend on. Convolution integrates the
    /// kernel out over the others.
    fn active_axes(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }
}

pub type SharedMetric = Arc<dyn MetricField>;

pub fn inner(g: &Matrix4<f64>, u: &Vector, v: &Vector) -> f64 {
    (u.transpose() * g * v)[0]
}

pub fn inverse_metric(g: &Matrix4<f64>, x: &Point, dim: usize) -> Result<Matrix4<f64>> {
    g.try_inverse().ok_or_else(|| LabError::SingularMetric {
        point: x.iter().take(dim).copied().collect(),
    })
}

/// Checks symmetry and signature (-,+,...,+) of the leading `dim` block.
pub fn check_signature(g: &Matrix4<f64>, dim: usize) -> bool {
    if (g - g.transpose()).amax() > 1e-12 * (1.0 + g.amax()) {
        return false;
    }
    let block = g.view((0, 0), (dim, dim)).into_owned();
    let eig = SymmetricEigen::new(block);
    let negative = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    let degenerate = eig.eigenvalues.iter().any(|l| l.abs() < 1e-14);
    negative == 1 && !degenerate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub base: Point,
    pub components: Vector,
}

impl TangentVector {
    pub fn new(base: &[f64], components: &[f64]) -> Self {
        TangentVector {
            base: point(base),
            components: point(components),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausalType {
    Timelike,
    Null,
    Spacelike,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeOrientation {
    Future,
    Past,
    None,
}

/// Relative null tolerance: `|g(v,v)| ≤ τ ‖v‖²` counts as null.
pub const NULL_TOLERANCE: f64 = 1e-12;

pub fn causal_character(g: &dyn MetricField, v: &TangentVector) -> Result<(CausalType, TimeOrientation)> {
    causal_character_tol(g, v, NULL_TOLERANCE)
}

pub fn causal_character_tol(
    g: &dyn MetricField,
    v: &TangentVector,
    tol: f64,
) -> Result<(CausalType, TimeOrientation)> {
    if !g.chart().contains(&v.base) {
        return Err(LabError::outside(&v.base, g.dim()));
    }
    let gm = g.components(&v.base);
    Ok(classify(&gm, &g.time_field(&v.base), &v.components, g.dim(), tol))
}

/// Classification against already evaluated components.
pub fn classify(
    gm: &Matrix4<f64>,
    time: &Vector,
    v: &Vector,
    dim: usize,
    tol: f64,
) -> (CausalType, TimeOrientation) {
    let e2 = euclid_norm_dim(v, dim).powi(2);
    if e2 == 0.0 {
        return (CausalType::Zero, TimeOrientation::None);
    }
    let q = inner(gm, v, v);
    let kind = if q.abs() <= tol * e2 {
        CausalType::Null
    } else if q < 0.0 {
        CausalType::Timelike
    } else {
        CausalType::Spacelike
    };
    let orientation = match kind {
        CausalType::Timelike | CausalType::Null => {
            if inner(gm, v, time) < 0.0 {
                TimeOrientation::Future
            } else {
                TimeOrientation::Past
            }
        }
        _ => TimeOrientation::None,
    };
    (kind, orientation)
}

/// g-orthonormal basis of the leading `dim` block: `seeds` are processed in
/// order by Gram–Schmidt (near-dependent seeds skipped) and the coordinate
/// axes fill in the rest. Returns the vectors and their signs `g(E,E)`.
pub fn orthonormal_basis(
    g: &Matrix4<f64>,
    dim: usize,
    seeds: &[Vector],
) -> Option<(Vec<Vector>, Vec<f64>)> {
    let mut basis: Vec<Vector> = Vec::with_capacity(dim);
    let mut signs: Vec<f64> = Vec::with_capacity(dim);
    let axes = (0..dim).map(|a| {
        let mut e = Vector::zeros();
        e[a] = 1.0;
        e
    });
    for cand in seeds.iter().copied().chain(axes) {
        if basis.len() == dim {
            break;
        }
        let mut v = cand;
        for _ in 0..2 {
            for (b, s) in basis.iter().zip(&signs) {
                v -= b * (inner(g, &v, b) * s);
            }
        }
        let q = inner(g, &v, &v);
        if q.abs() < 1e-10 * cand.norm_squared().max(1e-300) {
            continue;
        }
        basis.push(v / q.abs().sqrt());
        signs.push(q.signum());
    }
    (basis.len() == dim).then_some((basis, signs))
}

pub fn lorentzian_norm(g: &dyn MetricField, v: &TangentVector) -> Result<f64> {
    if !g.chart().contains(&v.base) {
        return Err(LabError::outside(&v.base, g.dim()));
    }
    Ok(inner(&g.components(&v.base), &v.components, &v.components))
}

pub fn euclid_norm(v: &TangentVector) -> f64 {
    v.components.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRegularity {
    C0,
    C1,
    Smooth,
}

/// A vector field on (part of) the chart; `derivative` returns `D` with
/// `D[(i, j)] = ∂_j V^i`.
pub trait VectorField: Send + Sync {
    fn value(&self, x: &Point) -> Vector;
    fn derivative(&self, _x: &Point) -> Option<Matrix4<f64>> {
        None
    }
    fn regularity(&self) -> FieldRegularity;
}

#[derive(Debug, Clone)]
pub struct ConstantField(pub Vector);

impl VectorField for ConstantField {
    fn value(&self, _x: &Point) -> Vector {
        self.0
    }
    fn derivative(&self, _x: &Point) -> Option<Matrix4<f64>> {
        Some(Matrix4::zeros())
    }
    fn regularity(&self) -> FieldRegularity {
        FieldRegularity::Smooth
    }
}

type FieldFn = dyn Fn(&Point) -> Vector + Send + Sync;
type FieldDerivFn = dyn Fn(&Point) -> Matrix4<f64> + Send + Sync;

/// Closure-backed vector field.
pub struct FnField {
    value: Box<FieldFn>,
    derivative: Option<Box<FieldDerivFn>>,
    regularity: FieldRegularity,
}

impl FnField {
    pub fn new(
        value: impl Fn(&Point) -> Vector + Send + Sync + 'static,
        derivative: Option<Box<FieldDerivFn>>,
        regularity: FieldRegularity,
    ) -> Self {
        FnField {
            value: Box::new(value),
            derivative,
            regularity,
        }
    }

    pub fn with_derivative(
        value: impl Fn(&Point) -> Vector + Send + Sync + 'static,
        derivative: impl Fn(&Point) -> Matrix4<f64> + Send + Sync + 'static,
        regularity: FieldRegularity,
    ) -> Self {
        FnField::new(value, Some(Box::new(derivative)), regularity)
    }
}

impl VectorField for FnField {
    fn value(&self, x: &Point) -> Vector {
        (self.value)(x)
    }
    fn derivative(&self, x: &Point) -> Option<Matrix4<f64>> {
        self.derivative.as_ref().map(|d| d(x))
    }
    fn regularity(&self) -> FieldRegularity {
        self.regularity
    }
}

/// Central-difference check of a metric's supplied gradient. Returns the
/// largest relative deviation over all components.
pub fn gradient_fd_error(g: &dyn MetricField, x: &Point, step: f64) -> f64 {
    let dg = g.gradient(x);
    let mut worst: f64 = 0.0;
    for k in 0..g.dim() {
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += step;
        xm[k] -= step;
        let fd = (g.components(&xp) - g.components(&xm)) / (2.0 * step);
        let scale = 1.0 + dg[k].amax();
        worst = worst.max((fd - dg[k]).amax() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minkowski4() -> BuiltinMetric {
        builtin_metric(&MetricSpec::Minkowski { dim: 4 }).unwrap()
    }

    #[test]
    fn causal_character_examples() {
        let g = minkowski4();
        let c = |v: &[f64]| causal_character(&g, &TangentVector::new(&[0.0; 4], v)).unwrap();
        assert_eq!(c(&[1.0, 0.0, 0.0, 0.0]), (CausalType::Timelike, TimeOrientation::Future));
        assert_eq!(c(&[1.0, 1.0, 0.0, 0.0]), (CausalType::Null, TimeOrientation::Future));
        assert_eq!(c(&[0.0, 1.0, 0.0, 0.0]), (CausalType::Spacelike, TimeOrientation::None));
        assert_eq!(c(&[0.0; 4]), (CausalType::Zero, TimeOrientation::None));
        assert_eq!(c(&[-2.0, 0.5, 0.0, 0.0]), (CausalType::Timelike, TimeOrientation::Past));
    }

    #[test]
    fn outside_chart_is_an_error() {
        let g = minkowski4();
        let v = TangentVector::new(&[100.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(causal_character(&g, &v), Err(LabError::OutsideChart { .. })));
        assert!(lorentzian_norm(&g, &v).is_err());
    }

    #[test]
    fn norms() {
        let g = minkowski4();
        let n = |v: &[f64]| lorentzian_norm(&g, &TangentVector::new(&[0.0; 4], v)).unwrap();
        assert_eq!(n(&[1.0, 1.0, 0.0, 0.0]), 0.0);
        assert_eq!(n(&[2.0, 0.0, 0.0, 0.0]), -4.0);
        let flrw = builtin_metric(&MetricSpec::FlrwToy {
            dim: 4,
            profile: ScaleFactor::Power { exponent: 2.0 },
        })
        .unwrap();
        let v = TangentVector::new(&[2.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]);
        assert!((lorentzian_norm(&flrw, &v).unwrap() - 16.0).abs() < 1e-12);
        assert!((euclid_norm(&TangentVector::new(&[0.0; 4], &[3.0, 4.0, 0.0, 0.0])) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn chart_box_validation() {
        assert!(ChartBox::new(&[0.0, 0.0], &[1.0, 1.0]).is_ok());
        assert!(ChartBox::new(&[0.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(ChartBox::new(&[0.0], &[1.0]).is_err());
        let b = ChartBox::cube(3, 1.0).unwrap();
        assert_eq!(b.grid(3).len(), 27);
        assert!((b.boundary_distance(&point(&[0.5, 0.0, 0.0])) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn causal_character_scale_invariance(
            t in -2.0f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0, s in 0.01f64..50.0
        ) {
            let g = minkowski4();
            let v = TangentVector::new(&[0.0; 4], &[t, x, y, 0.0]);
            let mut scaled = v.clone();
            scaled.components *= s;
            let mut flipped = v.clone();
            flipped.components *= -1.0;
            let a = causal_character(&g, &v).unwrap();
            let b = causal_character(&g, &scaled).unwrap();
            let c = causal_character(&g, &flipped).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.0, c.0);
            let flip = |o| match o {
                TimeOrientation::Future => TimeOrientation::Past,
                TimeOrientation::Past => TimeOrientation::Future,
                TimeOrientation::None => TimeOrientation::None,
            };
            prop_assert_eq!(c.1, flip(a.1));
        }
    }
}
