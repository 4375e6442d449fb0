//! Dormand–Prince 5(4) with the fourth-order continuous extension.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-9,
            atol: 1e-11,
            h0: None,
            h_max: f64::INFINITY,
            max_steps: 2_000_000,
        }
    }
}

impl OdeOptions {
    pub fn tol(rtol: f64, atol: f64) -> Self {
        OdeOptions {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    /// The monitor asked to stop after an accepted step.
    Stopped,
    /// The right-hand side kept failing as the step shrank (typically a
    /// chart boundary).
    RhsFailure,
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Segment {
    fn theta(&self, t: f64) -> f64 {
        ((t - self.t0) / self.h).clamp(0.0, 1.0)
    }

    fn value(&self, t: f64, out: &mut [f64]) {
        let s = self.theta(t);
        let s1 = 1.0 - s;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.r[0][i]
                + s * (self.r[1][i] + s1 * (self.r[2][i] + s * (self.r[3][i] + s1 * self.r[4][i])));
        }
    }

    fn derivative(&self, t: f64, out: &mut [f64]) {
        let s = self.theta(t);
        let c2 = 1.0 - 2.0 * s;
        let c3 = s * (2.0 - 3.0 * s);
        let c4 = 2.0 * s * (1.0 - s) * (1.0 - 2.0 * s);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.r[1][i] + c2 * self.r[2][i] + c3 * self.r[3][i] + c4 * self.r[4][i]) / self.h;
        }
    }
}

/// Solution with a piecewise quartic interpolant over the accepted steps.
#[derive(Debug, Clone)]
pub struct DenseTrajectory {
    dim: usize,
    t_start: f64,
    t_end: f64,
    y_start: Vec<f64>,
    y_end: Vec<f64>,
    segments: Vec<Segment>,
    pub stats: OdeStats,
    pub termination: Termination,
    pub options: OdeOptions,
}

impl DenseTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    /// Last parameter actually reached.
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn y_end(&self) -> &[f64] {
        &self.y_end
    }

    pub fn direction(&self) -> f64 {
        if self.t_end >= self.t_start {
            1.0
        } else {
            -1.0
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = self.bounds();
        t >= lo && t <= hi
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.t_start.min(self.t_end), self.t_start.max(self.t_end))
    }

    /// Accepted step boundaries, in integration order.
    pub fn step_times(&self) -> Vec<f64> {
        let mut out = vec![self.t_start];
        out.extend(self.segments.iter().map(|s| s.t0 + s.h));
        out
    }

    fn locate(&self, t: f64) -> Option<&Segment> {
        if self.segments.is_empty() {
            return None;
        }
        let dir = self.direction();
        let key = dir * t;
        let idx = self
            .segments
            .partition_point(|s| dir * (s.t0 + s.h) < key)
            .min(self.segments.len() - 1);
        Some(&self.segments[idx])
    }

    /// Interpolated state; `t` is clamped to the covered interval.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        match self.locate(t) {
            Some(seg) => seg.value(t, &mut out),
            None => out.copy_from_slice(&self.y_start),
        }
        out
    }

    /// Derivative of the interpolant.
    pub fn eval_derivative(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if let Some(seg) = self.locate(t) {
            seg.derivative(t, &mut out);
        }
        out
    }
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], o: &OdeOptions) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = o.atol + o.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `f` writes the derivative into its third argument and may fail; a failing
/// stage shrinks the step, and persistent failure ends the run with
/// [`Termination::RhsFailure`]. `monitor` is called after every accepted
/// step and stops the run by returning `false`.
pub fn dopri5<F, M>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
    mut monitor: M,
) -> Result<DenseTrajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    M: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut traj = DenseTrajectory {
        dim: n,
        t_start: t0,
        t_end: t0,
        y_start: y0.to_vec(),
        y_end: y0.to_vec(),
        segments: Vec::new(),
        stats: OdeStats::default(),
        termination: Termination::Completed,
        options: *opts,
    };
    if span == 0.0 {
        return Ok(traj);
    }
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut y = y0.to_vec();
    let mut t = t0;

    f(t, &y, &mut k[0])?;
    traj.stats.evaluations += 1;

    let h_max = opts.h_max.min(span);
    let mut h = match opts.h0 {
        Some(h) => h.abs().min(h_max),
        None => initial_step(&mut f, t, &y, &k[0], dir, h_max, opts, &mut traj.stats),
    };
    let mut last_rejected = false;
    let mut rhs_failures = 0usize;

    loop {
        if traj.stats.accepted + traj.stats.rejected >= opts.max_steps {
            return Err(LabError::TooManySteps(opts.max_steps));
        }
        let remaining = (t1 - t) * dir;
        if remaining <= 1e-14 * span.max(t.abs()) {
            break;
        }
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        let h_min = 16.0 * f64::EPSILON * t.abs().max(span).max(1.0);
        if h < h_min {
            if rhs_failures > 0 {
                traj.termination = Termination::RhsFailure;
                break;
            }
            return Err(LabError::StepSizeUnderflow {
                t,
                state: y.clone(),
            });
        }
        let hs = h * dir;

        let stages = (|| -> Result<()> {
            let (k0, rest) = k.split_first_mut().unwrap();
            let [k1, k2, k3, k4, k5, k6] = rest else { unreachable!() };
            for i in 0..n {
                ytmp[i] = y[i] + hs * A21 * k0[i];
            }
            f(t + C2 * hs, &ytmp, k1)?;
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A31 * k0[i] + A32 * k1[i]);
            }
            f(t + C3 * hs, &ytmp, k2)?;
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A41 * k0[i] + A42 * k1[i] + A43 * k2[i]);
            }
            f(t + C4 * hs, &ytmp, k3)?;
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A51 * k0[i] + A52 * k1[i] + A53 * k2[i] + A54 * k3[i]);
            }
            f(t + C5 * hs, &ytmp, k4)?;
            for i in 0..n {
                ytmp[i] = y[i]
                    + hs * (A61 * k0[i] + A62 * k1[i] + A63 * k2[i] + A64 * k3[i] + A65 * k4[i]);
            }
            f(t + hs, &ytmp, k5)?;
            for i in 0..n {
                ynew[i] = y[i]
                    + hs * (A71 * k0[i] + A73 * k2[i] + A74 * k3[i] + A75 * k4[i] + A76 * k5[i]);
            }
            f(t + hs, &ynew, k6)?;
            Ok(())
        })();
        traj.stats.evaluations += 6;
        if stages.is_err() {
            rhs_failures += 1;
            traj.stats.rejected += 1;
            h *= 0.25;
            last_rejected = true;
            continue;
        }

        for i in 0..n {
            err[i] = hs
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
        }
        let e = error_norm(&err, &y, &ynew, opts);
        if !e.is_finite() {
            traj.stats.rejected += 1;
            h *= 0.2;
            last_rejected = true;
            continue;
        }
        if e <= 1.0 {
            rhs_failures = 0;
            let mut r: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = hs * k[0][i] - ydiff;
                r[0][i] = y[i];
                r[1][i] = ydiff;
                r[2][i] = bspl;
                r[3][i] = ydiff - hs * k[6][i] - bspl;
                r[4][i] = hs
                    * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                        + D7 * k[6][i]);
            }
            traj.segments.push(Segment { t0: t, h: hs, r });
            traj.stats.accepted += 1;
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            let (first, rest) = k.split_first_mut().unwrap();
            std::mem::swap(first, &mut rest[5]);
            traj.t_end = t;
            traj.y_end.copy_from_slice(&y);
            if !monitor(t, &y) {
                traj.termination = Termination::Stopped;
                break;
            }
            if last {
                break;
            }
            let mut fac = 0.9 * e.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(h_max);
            last_rejected = false;
        } else {
            traj.stats.rejected += 1;
            h *= (0.9 * e.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    f: &mut F,
    t: f64,
    y: &[f64],
    f0: &[f64],
    dir: f64,
    h_max: f64,
    o: &OdeOptions,
    stats: &mut OdeStats,
) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len() as f64;
    let sc: Vec<f64> = y.iter().map(|v| o.atol + o.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(h_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + dir * h * b).collect();
    let mut f1 = vec![0.0; y.len()];
    if f(t + dir * h, &y1, &mut f1).is_err() {
        return (h * 0.01).max(1e-12);
    }
    stats.evaluations += 1;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h;
    let m = d1.max(d2);
    let h1 = if m <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / m).powf(0.2)
    };
    (100.0 * h).min(h1).min(h_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_with_dense_output() {
        let traj = dopri5(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            &[0.0, 1.0],
            10.0,
            &OdeOptions::tol(1e-11, 1e-13),
            |_, _| true,
        )
        .unwrap();
        assert_eq!(traj.termination, Termination::Completed);
        for k in 0..=200 {
            let t = 0.05 * k as f64;
            let y = traj.eval(t);
            let dy = traj.eval_derivative(t);
            assert!((y[0] - t.sin()).abs() < 1e-8, "t={t}");
            assert!((y[1] - t.cos()).abs() < 1e-8);
            assert!((dy[0] - t.cos()).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_integration() {
        let traj = dopri5(
            |_, y, dy| {
                dy[0] = y[0];
                Ok(())
            },
            1.0,
            &[1.0],
            -1.0,
            &OdeOptions::default(),
            |_, _| true,
        )
        .unwrap();
        assert!((traj.eval(-1.0)[0] - (-2.0f64).exp()).abs() < 1e-9);
        assert!((traj.eval(0.0)[0] - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(traj.t_end(), -1.0);
    }

    #[test]
    fn rhs_failure_truncates() {
        let traj = dopri5(
            |_, y, dy| {
                if y[0] > 1.0 {
                    return Err(LabError::Precondition("outside".into()));
                }
                dy[0] = 1.0;
                Ok(())
            },
            0.0,
            &[0.0],
            5.0,
            &OdeOptions::default(),
            |_, _| true,
        )
        .unwrap();
        assert_eq!(traj.termination, Termination::RhsFailure);
        assert!((traj.t_end() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn monitor_stops() {
        let traj = dopri5(
            |_, _, dy| {
                dy[0] = 1.0;
                Ok(())
            },
            0.0,
            &[0.0],
            5.0,
            &OdeOptions::default().with_h_max(0.1),
            |_, y| y[0] < 2.0,
        )
        .unwrap();
        assert_eq!(traj.termination, Termination::Stopped);
        assert!(traj.t_end() >= 2.0 && traj.t_end() < 2.2);
    }
}
