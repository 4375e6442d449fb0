//! Experiment runners. Each returns a verdict, a JSON result and CSV tables.

use std::sync::Arc;

use anyhow::{Context, Result};
use c1lab::curvature::{
    check_genericity, check_null_ec, check_timelike_ec, GenericityOptions, MemberKind, ScanLattice,
};
use c1lab::focusing::{
    detect_conjugate, focal_experiment, integrate_jacobi, jacobi_along_geodesic,
    raychaudhuri_residual, trapped_certificate, SubmanifoldPatch, TidalProfile,
};
use c1lab::geodesics::{
    branch_probe, default_tolerances, geodesic_family_convergence, integrate_geodesic,
    lorentz_distance_1p1, ProbeOptions,
};
use c1lab::geometry::{
    builtin_metric, point, BuiltinMetric, FieldRegularity, FnField, Point, SharedMetric, Vector,
    VectorField, NULL_TOLERANCE,
};
use c1lab::mollify::{
    build_family, calibrate, convergence_diagnostics, verify_nesting, MollifiedFamily, Mollifier,
    NESTING_TOLERANCE,
};
use nalgebra::{DMatrix, Matrix4};
use serde_json::{json, Value};

use crate::scenario::{
    Experiment, FieldSpec, MemberSpec, NormalChoice, PatchSpec, ProfileSpec, Scenario,
};

pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }
}

pub struct Outcome {
    pub pass: bool,
    pub result: Value,
    pub tolerances: Value,
    pub tables: Vec<Table>,
}

fn vec4(c: &[f64]) -> Vector {
    point(c)
}

fn source_metric(s: &Scenario) -> Result<BuiltinMetric> {
    Ok(match &s.chart {
        Some(c) => BuiltinMetric::on_chart(&s.metric, c.to_box()?)?,
        None => builtin_metric(&s.metric)?,
    })
}

fn family(s: &Scenario, source: SharedMetric) -> Result<MollifiedFamily> {
    let kernel = Mollifier::new(s.mollifier.shape, s.mollifier.nodes)?;
    let grid = s.epsilon_grid();
    Ok(match s.mollifier.amplitude {
        Some(a) => build_family(source, kernel, &grid, a)?,
        None => calibrate(source, kernel, &grid, s.mollifier.calibration_samples, s.seed)?,
    })
}

fn pick_member(fam: &MollifiedFamily, m: &MemberSpec) -> Result<SharedMetric> {
    let member = fam
        .member(m.epsilon)
        .with_context(|| format!("epsilon {} is not in the grid", m.epsilon))?;
    let chosen = match m.kind {
        MemberKind::Plain => member.plain.clone() as SharedMetric,
        MemberKind::Narrow => member.narrow.clone() as SharedMetric,
        MemberKind::Wide => member.wide.clone() as SharedMetric,
    };
    Ok(chosen)
}

fn field(spec: &FieldSpec) -> Box<dyn VectorField> {
    match spec.clone() {
        FieldSpec::Constant { components } => Box::new(c1lab::geometry::ConstantField(vec4(&components))),
        FieldSpec::Exponential {
            components,
            rate,
            axis,
        } => {
            let base = vec4(&components);
            Box::new(FnField::with_derivative(
                move |x: &Point| base * (rate * x[axis]).exp(),
                move |x: &Point| {
                    let mut d = Matrix4::zeros();
                    let s = rate * (rate * x[axis]).exp();
                    for i in 0..4 {
                        d[(i, axis)] = base[i] * s;
                    }
                    d
                },
                FieldRegularity::Smooth,
            ))
        }
    }
}

fn patch(spec: &PatchSpec) -> SubmanifoldPatch {
    match *spec {
        PatchSpec::Sphere { t0, center, radius } => SubmanifoldPatch::coordinate_sphere(t0, center, radius),
        PatchSpec::Plane { t0, z0 } => SubmanifoldPatch::coordinate_plane(t0, z0),
    }
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn run(s: &Scenario) -> Result<Outcome> {
    let source: SharedMetric = Arc::new(source_metric(s)?);
    let fam = if s.experiment.needs_family() {
        Some(family(s, source.clone())?)
    } else {
        None
    };
    let family_info = fam.as_ref().map(|f| {
        json!({
            "amplitude": f.amplitude,
            "kernel_shape": f.kernel.shape(),
            "kernel_nodes": f.kernel.nodes(),
            "epsilon_grid": f.epsilons(),
        })
    });
    let mut out = match &s.experiment {
        Experiment::MollifyDiagnostics {
            region,
            per_axis,
            nesting_samples,
        } => {
            let fam = fam.as_ref().expect("family");
            let k = match region {
                Some(r) => r.to_box()?,
                None => fam.margin_box.clone(),
            };
            let diag = convergence_diagnostics(fam, &k, *per_axis)?;
            let nest = verify_nesting(fam, *nesting_samples, s.seed);
            let mut t = Table::new(
                "diagnostics",
                &["epsilon", "sup_g_err", "sup_dg_err", "cone_shift", "narrow_fraction", "wide_fraction"],
            );
            for (r, n) in diag.rows.iter().zip(&nest.rows) {
                t.rows.push(vec![
                    r.epsilon,
                    r.sup_g_err,
                    r.sup_dg_err,
                    r.cone_shift,
                    n.narrow_fraction,
                    n.wide_fraction,
                ]);
            }
            Outcome {
                pass: nest.pass,
                result: json!({ "diagnostics": diag, "nesting": nest }),
                tolerances: json!({ "nesting_tolerance": NESTING_TOLERANCE }),
                tables: vec![t],
            }
        }
        Experiment::EnergyTimelike {
            region,
            kappa,
            c_bound,
            delta,
            points_per_axis,
        } => {
            let lattice = ScanLattice {
                points_per_axis: *points_per_axis,
                ..ScanLattice::default()
            };
            let rep = check_timelike_ec(fam.as_ref().expect("family"), &region.to_box()?, *kappa, *c_bound, *delta, &lattice)?;
            condition_outcome(rep, json!({ "delta": delta, "lattice": lattice }))
        }
        Experiment::EnergyNull {
            region,
            c1,
            c2,
            delta,
            points_per_axis,
        } => {
            let lattice = ScanLattice {
                points_per_axis: *points_per_axis,
                ..ScanLattice::default()
            };
            let rep = check_null_ec(fam.as_ref().expect("family"), &region.to_box()?, *c1, *c2, *delta, &lattice)?;
            condition_outcome(rep, json!({ "delta": delta, "lattice": lattice }))
        }
        Experiment::Genericity {
            point: p,
            velocity,
            span,
            x_field,
            v_field,
            c,
            delta_perturb,
            perturbations,
        } => {
            let gamma = integrate_geodesic(source.as_ref(), &vec4(p), &vec4(velocity), *span, None)?;
            gamma.require_complete()?;
            let opts = GenericityOptions {
                c: *c,
                delta_perturb: *delta_perturb,
                perturbations: *perturbations,
                seed: s.seed,
                ..GenericityOptions::default()
            };
            let rep = check_genericity(
                fam.as_ref().expect("family"),
                &gamma,
                field(x_field).as_ref(),
                field(v_field).as_ref(),
                &opts,
            )?;
            let (rtol, atol) = gamma.tolerances();
            condition_outcome(rep, json!({ "genericity": opts, "geodesic_rtol": rtol, "geodesic_atol": atol }))
        }
        Experiment::GeodesicConverge {
            point: p,
            velocity,
            span,
            samples,
            member,
        } => {
            let fam = fam.as_ref().expect("family");
            let (pp, vv) = (vec4(p), vec4(velocity));
            let rows = geodesic_family_convergence(fam, *member, &pp, &vv, &|_| (pp, vv), *span, *samples)?;
            let mut t = Table::new("convergence", &["epsilon", "sup_c0", "sup_c1", "escaped"]);
            for r in &rows {
                t.rows.push(vec![r.epsilon, r.sup_c0, r.sup_c1, r.escaped as u8 as f64]);
            }
            let monotone = rows.windows(2).all(|w| w[1].sup_c1 <= 1.1 * w[0].sup_c1);
            let escaped = rows.iter().any(|r| r.escaped);
            let ode = default_tolerances(source.as_ref());
            Outcome {
                pass: monotone && !escaped,
                result: json!({ "rows": rows, "monotone_with_10pct_slack": monotone }),
                tolerances: json!({ "limit_ode": ode, "monotonicity_slack": 0.1 }),
                tables: vec![t],
            }
        }
        Experiment::BranchProbe {
            point: p,
            velocity,
            direction,
            eta_grid,
            span,
        } => {
            let opts = ProbeOptions::default();
            let rep = branch_probe(
                source.as_ref(),
                &vec4(p),
                &vec4(velocity),
                direction.as_ref().map(|d| vec4(d)),
                eta_grid,
                *span,
                &opts,
            )?;
            let mut t = Table::new("clusters", &["cluster", "members", "terminal_0", "terminal_1", "terminal_2", "terminal_3"]);
            for (i, c) in rep.clusters.iter().enumerate() {
                let mut row = vec![i as f64, c.members.len() as f64];
                row.extend(c.terminal_position.iter().copied());
                row.resize(6, 0.0);
                t.rows.push(row);
            }
            Outcome {
                pass: true,
                result: serde_json::to_value(&rep)?,
                tolerances: json!({ "probe": opts }),
                tables: vec![t],
            }
        }
        Experiment::Conjugate {
            profile,
            t_start,
            t_end,
            expect_conjugate,
        } => {
            let traj = match profile {
                ProfileSpec::Constant { matrix } => {
                    let d = matrix.len();
                    let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                    let prof = TidalProfile::constant(m, (*t_start, *t_end));
                    integrate_jacobi(&prof, *t_start, &DMatrix::zeros(d, d), &DMatrix::identity(d, d), *t_end, None)?
                }
                ProfileSpec::Diagonal { entries } => {
                    let d = entries.len();
                    let prof = TidalProfile::diagonal(entries, (*t_start, *t_end));
                    integrate_jacobi(&prof, *t_start, &DMatrix::zeros(d, d), &DMatrix::identity(d, d), *t_end, None)?
                }
                ProfileSpec::Geodesic {
                    point: p,
                    velocity,
                    t_end: te,
                    frame_seed,
                    member,
                } => {
                    let metric = match member {
                        Some(m) => pick_member(fam.as_ref().expect("family"), m)?,
                        None => source.clone(),
                    };
                    let gamma = integrate_geodesic(metric.as_ref(), &vec4(p), &vec4(velocity), (*t_start, *te), None)?;
                    gamma.require_complete()?;
                    jacobi_along_geodesic(metric, &gamma, &vec4(frame_seed))?
                }
            };
            let (lo, hi) = traj.bounds();
            let t_star = detect_conjugate(&traj, (lo, hi));
            let (resid, used) = raychaudhuri_residual(&traj, (lo, t_star.unwrap_or(hi)), 1000);
            let mut t = Table::new("jacobi", &["t", "sigma_min_a", "det_a", "theta"]);
            for i in 0..=200 {
                let tt = lo + (hi - lo) * i as f64 / 200.0;
                let a = traj.a(tt);
                let theta = traj.riccati(tt).map_or(f64::NAN, |r| r.theta);
                t.rows.push(vec![tt, a.clone().singular_values().min(), a.determinant(), theta]);
            }
            let found = t_star.is_some();
            Outcome {
                pass: expect_conjugate.map_or(true, |e| e == found),
                result: json!({
                    "found": found,
                    "t_star": t_star,
                    "d": traj.d(),
                    "raychaudhuri_residual": resid,
                    "raychaudhuri_points": used,
                    "lagrange_defect": traj.lagrange_defect(),
                    "jacobi_residual": traj.jacobi_residual(),
                }),
                tolerances: json!({ "jacobi_rtol": 1e-12, "jacobi_atol": 1e-14, "singular_threshold": 1e-7 }),
                tables: vec![t],
            }
        }
        Experiment::Focal {
            patch: ps,
            parameter,
            normal,
            scale,
            b,
            delta,
        } => {
            let sub = patch(ps);
            let m = source.as_ref();
            let normals = sub.future_null_normals(m, parameter, 16)?;
            let conv = |v: &Vector| sub.convergence(m, parameter, v);
            let mut scored = normals
                .into_iter()
                .map(|v| Ok((conv(&v)?, v)))
                .collect::<c1lab::Result<Vec<_>>>()?;
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            let nu = match normal {
                NormalChoice::Ingoing => scored.last(),
                NormalChoice::Outgoing => scored.first(),
            }
            .map(|x| x.1)
            .context("no null normals")?
                * *scale;
            let rep = focal_experiment(source.clone(), &sub, parameter, &nu, *b, *delta)?;
            Outcome {
                pass: rep.not_maximising_by_b,
                result: json!({ "patch": sub.label(), "normal": nu.as_slice(), "report": rep }),
                tolerances: json!({ "jacobi_rtol": 1e-12, "jacobi_atol": 1e-14, "null_tolerance": 1e-10 }),
                tables: vec![],
            }
        }
        Experiment::TrappedCert {
            patch: ps,
            params_per_axis,
            normals_per_point,
        } => {
            let sub = patch(ps);
            let k = *params_per_axis;
            let params: Vec<Vec<f64>> = match ps {
                PatchSpec::Sphere { .. } => (0..k)
                    .flat_map(|i| {
                        (0..k).map(move |j| {
                            let th = std::f64::consts::PI * (i as f64 + 0.5) / k as f64;
                            let ph = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                            vec![th, ph]
                        })
                    })
                    .collect(),
                PatchSpec::Plane { .. } => (0..k)
                    .flat_map(|i| (0..k).map(move |j| vec![i as f64 / k as f64 - 0.5, j as f64 / k as f64 - 0.5]))
                    .collect(),
            };
            let rep = trapped_certificate(source.as_ref(), &sub, &params, *normals_per_point)?;
            let mut t = Table::new("convergence", &["u0", "u1", "min_k"]);
            for u in &params {
                let min_k = sub
                    .future_null_normals(source.as_ref(), u, *normals_per_point)?
                    .iter()
                    .map(|v| sub.convergence(source.as_ref(), u, v))
                    .collect::<c1lab::Result<Vec<_>>>()?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                t.rows.push(vec![u[0], u[1], min_k]);
            }
            Outcome {
                pass: rep.pass,
                result: json!({ "patch": sub.label(), "report": rep }),
                tolerances: json!({ "null_tolerance": NULL_TOLERANCE }),
                tables: vec![t],
            }
        }
        Experiment::Distance1p1 { p, q, resolution } => {
            let est = lorentz_distance_1p1(source.as_ref(), p, q, *resolution)?;
            Outcome {
                pass: true,
                result: json!({
                    "estimate": est,
                    "distance": est.extrapolated,
                    "gap": finite_or_null(est.gap),
                }),
                tolerances: json!({ "resolution": resolution }),
                tables: vec![],
            }
        }
    };
    if let Some(info) = family_info {
        if let Value::Object(map) = &mut out.tolerances {
            map.insert("family".into(), info);
        }
    }
    Ok(out)
}

fn condition_outcome(rep: c1lab::curvature::ConditionReport, tolerances: Value) -> Outcome {
    let mut t = Table::new("condition", &["epsilon", "min_value", "threshold", "pass"]);
    for (i, eps) in rep.epsilon_grid.iter().enumerate() {
        t.rows.push(vec![*eps, rep.min_value[i], rep.threshold, rep.pass_per_epsilon[i] as u8 as f64]);
    }
    Outcome {
        pass: rep.pass,
        result: serde_json::to_value(&rep).expect("report serialises"),
        tolerances,
        tables: vec![t],
    }
}
