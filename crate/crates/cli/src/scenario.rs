//! Scenario files: a versioned JSON schema with validation.

use anyhow::{bail, ensure, Context, Result};
use c1lab::curvature::MemberKind;
use c1lab::geometry::{ChartBox, MetricSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXPERIMENT_KINDS: [&str; 10] = [
    "mollify-diagnostics",
    "energy-timelike",
    "energy-null",
    "genericity",
    "geodesic-converge",
    "branch-probe",
    "conjugate",
    "focal",
    "trapped-cert",
    "distance-1p1",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub metric: MetricSpec,
    /// Overrides the metric's default chart.
    #[serde(default)]
    pub chart: Option<BoxSpec>,
    #[serde(default)]
    pub mollifier: MollifierSpec,
    #[serde(default)]
    pub epsilon_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpec {
    pub fn to_box(&self) -> Result<ChartBox> {
        Ok(ChartBox::new(&self.lower, &self.upper)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierSpec {
    #[serde(default = "one")]
    pub shape: f64,
    #[serde(default = "sixteen")]
    pub nodes: usize,
    /// Cone shift constant; calibrated by sampling when absent.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default = "calibration_samples")]
    pub calibration_samples: usize,
}

fn one() -> f64 {
    1.0
}
fn sixteen() -> usize {
    16
}
fn calibration_samples() -> usize {
    1000
}

impl Default for MollifierSpec {
    fn default() -> Self {
        MollifierSpec {
            shape: 1.0,
            nodes: 16,
            amplitude: None,
            calibration_samples: calibration_samples(),
        }
    }
}

/// Picks a family member; `epsilon = None` means the generating metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub kind: MemberKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { components: Vec<f64> },
    /// `components · exp(rate · x[axis])`.
    Exponential { components: Vec<f64>, rate: f64, axis: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant { matrix: Vec<Vec<f64>> },
    Diagonal { entries: Vec<f64> },
    /// Tidal matrix along a geodesic of the scenario metric (or a member).
    Geodesic {
        point: Vec<f64>,
        velocity: Vec<f64>,
        t_end: f64,
        frame_seed: Vec<f64>,
        #[serde(default)]
        member: Option<MemberSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PatchSpec {
    Sphere { t0: f64, center: [f64; 3], radius: f64 },
    Plane { t0: f64, z0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalChoice {
    /// The future null normal with the largest convergence.
    Ingoing,
    Outgoing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    MollifyDiagnostics {
        #[serde(default)]
        region: Option<BoxSpec>,
        #[serde(default = "five")]
        per_axis: usize,
        #[serde(default = "thousand")]
        nesting_samples: usize,
    },
    EnergyTimelike {
        region: BoxSpec,
        kappa: f64,
        c_bound: f64,
        delta: f64,
        #[serde(default)]
        points_per_axis: Option<usize>,
    },
    EnergyNull {
        region: BoxSpec,
        c1: f64,
        c2: f64,
        delta: f64,
        #[serde(default)]
        points_per_axis: Option<usize>,
    },
    Genericity {
        point: Vec<f64>,
        velocity: Vec<f64>,
        span: (f64, f64),
        x_field: FieldSpec,
        v_field: FieldSpec,
        c: f64,
        #[serde(default = "delta_perturb")]
        delta_perturb: f64,
        #[serde(default = "thirty_two")]
        perturbations: usize,
    },
    GeodesicConverge {
        point: Vec<f64>,
        velocity: Vec<f64>,
        span: (f64, f64),
        #[serde(default = "two_hundred")]
        samples: usize,
        #[serde(default)]
        member: MemberKind,
    },
    BranchProbe {
        point: Vec<f64>,
        velocity: Vec<f64>,
        #[serde(default)]
        direction: Option<Vec<f64>>,
        eta_grid: Vec<f64>,
        span: (f64, f64),
    },
    Conjugate {
        profile: ProfileSpec,
        #[serde(default)]
        t_start: f64,
        t_end: f64,
        /// When set, a mismatch is reported as a condition failure.
        #[serde(default)]
        expect_conjugate: Option<bool>,
    },
    Focal {
        patch: PatchSpec,
        parameter: Vec<f64>,
        normal: NormalChoice,
        #[serde(default = "one")]
        scale: f64,
        b: f64,
        #[serde(default)]
        delta: f64,
    },
    TrappedCert {
        patch: PatchSpec,
        #[serde(default = "six")]
        params_per_axis: usize,
        #[serde(default = "eight")]
        normals_per_point: usize,
    },
    #[serde(rename = "distance-1p1")]
    Distance1p1 {
        p: [f64; 2],
        q: [f64; 2],
        #[serde(default = "four_hundred")]
        resolution: usize,
    },
}

fn five() -> usize {
    5
}
fn six() -> usize {
    6
}
fn eight() -> usize {
    8
}
fn thousand() -> usize {
    1000
}
fn two_hundred() -> usize {
    200
}
fn four_hundred() -> usize {
    400
}
fn thirty_two() -> usize {
    32
}
fn delta_perturb() -> f64 {
    0.01
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::MollifyDiagnostics { .. } => "mollify-diagnostics",
            Experiment::EnergyTimelike { .. } => "energy-timelike",
            Experiment::EnergyNull { .. } => "energy-null",
            Experiment::Genericity { .. } => "genericity",
            Experiment::GeodesicConverge { .. } => "geodesic-converge",
            Experiment::BranchProbe { .. } => "branch-probe",
            Experiment::Conjugate { .. } => "conjugate",
            Experiment::Focal { .. } => "focal",
            Experiment::TrappedCert { .. } => "trapped-cert",
            Experiment::Distance1p1 { .. } => "distance-1p1",
        }
    }

    pub fn needs_family(&self) -> bool {
        matches!(
            self,
            Experiment::MollifyDiagnostics { .. }
                | Experiment::EnergyTimelike { .. }
                | Experiment::EnergyNull { .. }
                | Experiment::Genericity { .. }
                | Experiment::GeodesicConverge { .. }
        ) || matches!(
            self,
            Experiment::Conjugate {
                profile: ProfileSpec::Geodesic { member: Some(_), .. },
                ..
            }
        )
    }
}

impl Scenario {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(kind) = value.pointer("/experiment/kind").and_then(|k| k.as_str()) {
            ensure!(EXPERIMENT_KINDS.contains(&kind), "unknown experiment kind '{kind}'");
        }
        if let Some(name) = value.pointer("/metric/name").and_then(|k| k.as_str()) {
            ensure!(
                c1lab::geometry::METRIC_NAMES.contains(&name),
                "unknown metric '{name}'"
            );
        }
        let s: Scenario = serde_json::from_value(value).with_context(|| format!("invalid scenario {}", path.display()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn epsilon_grid(&self) -> Vec<f64> {
        self.epsilon_grid
            .clone()
            .unwrap_or_else(c1lab::mollify::default_epsilon_grid)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let n = self.metric.dim();
        ensure!((2..=4).contains(&n), "metric dimension {n} must lie in 2..=4");
        if let Some(c) = &self.chart {
            ensure!(c.lower.len() == n && c.upper.len() == n, "chart corners must have {n} entries");
            c.to_box()?;
        }
        let grid = self.epsilon_grid();
        ensure!(!grid.is_empty(), "epsilon grid is empty");
        ensure!(
            grid.iter().all(|e| *e > 0.0 && e.is_finite()),
            "epsilon values must be positive"
        );
        ensure!(
            grid.windows(2).all(|w| w[1] < w[0]),
            "epsilon grid must be strictly decreasing"
        );
        ensure!(self.mollifier.shape > 0.0, "mollifier shape must be positive");
        ensure!(self.mollifier.nodes >= 2, "mollifier needs at least two nodes");
        if let Some(a) = self.mollifier.amplitude {
            ensure!(a >= 0.0 && a.is_finite(), "amplitude must be nonnegative");
        }
        let dims = |v: &[f64], what: &str| -> Result<()> {
            ensure!(v.len() == n, "{what} must have {n} components, got {}", v.len());
            ensure!(v.iter().all(|x| x.is_finite()), "{what} must be finite");
            Ok(())
        };
        let span_ok = |s: (f64, f64)| -> Result<()> {
            ensure!(s.1 > s.0, "span must be increasing");
            Ok(())
        };
        let field_ok = |f: &FieldSpec, what: &str| -> Result<()> {
            match f {
                FieldSpec::Constant { components } => dims(components, what),
                FieldSpec::Exponential { components, axis, .. } => {
                    ensure!(*axis < n, "{what}: axis out of range");
                    dims(components, what)
                }
            }
        };
        match &self.experiment {
            Experiment::MollifyDiagnostics {
                region,
                per_axis,
                nesting_samples,
            } => {
                if let Some(r) = region {
                    dims(&r.lower, "region.lower")?;
                    dims(&r.upper, "region.upper")?;
                }
                ensure!(*per_axis >= 2, "per_axis must be at least 2");
                ensure!(*nesting_samples >= 1, "nesting_samples must be positive");
            }
            Experiment::EnergyTimelike {
                region,
                kappa,
                c_bound,
                delta,
                ..
            } => {
                dims(&region.lower, "region.lower")?;
                dims(&region.upper, "region.upper")?;
                ensure!(*kappa < 0.0, "kappa must be negative");
                ensure!(*c_bound > 0.0, "c_bound must be positive");
                ensure!(*delta > 0.0, "delta must be positive");
            }
            Experiment::EnergyNull {
                region, c1, c2, delta, ..
            } => {
                dims(&region.lower, "region.lower")?;
                dims(&region.upper, "region.upper")?;
                ensure!(0.0 < *c1 && c1 < c2, "need 0 < c1 < c2");
                ensure!(*delta > 0.0, "delta must be positive");
            }
            Experiment::Genericity {
                point,
                velocity,
                span,
                x_field,
                v_field,
                c,
                delta_perturb,
                perturbations,
            } => {
                dims(point, "point")?;
                dims(velocity, "velocity")?;
                span_ok(*span)?;
                field_ok(x_field, "x_field")?;
                field_ok(v_field, "v_field")?;
                ensure!(*c > 0.0, "c must be positive");
                ensure!(*delta_perturb > 0.0, "delta_perturb must be positive");
                ensure!(*perturbations >= 1, "perturbations must be positive");
            }
            Experiment::GeodesicConverge {
                point,
                velocity,
                span,
                samples,
                ..
            } => {
                dims(point, "point")?;
                dims(velocity, "velocity")?;
                span_ok(*span)?;
                ensure!(*samples >= 1, "samples must be positive");
            }
            Experiment::BranchProbe {
                point,
                velocity,
                direction,
                eta_grid,
                span,
            } => {
                dims(point, "point")?;
                dims(velocity, "velocity")?;
                if let Some(d) = direction {
                    dims(d, "direction")?;
                }
                ensure!(!eta_grid.is_empty(), "eta_grid is empty");
                ensure!(eta_grid.iter().all(|e| *e > 0.0), "eta values must be positive");
                span_ok(*span)?;
            }
            Experiment::Conjugate {
                profile,
                t_start,
                t_end,
                ..
            } => {
                ensure!(t_end > t_start, "t_end must exceed t_start");
                match profile {
                    ProfileSpec::Constant { matrix } => {
                        let d = matrix.len();
                        ensure!(d >= 1, "matrix is empty");
                        ensure!(matrix.iter().all(|r| r.len() == d), "matrix must be square");
                        for i in 0..d {
                            for j in 0..d {
                                ensure!(
                                    (matrix[i][j] - matrix[j][i]).abs() <= 1e-12 * (1.0 + matrix[i][j].abs()),
                                    "tidal matrix must be symmetric"
                                );
                            }
                        }
                    }
                    ProfileSpec::Diagonal { entries } => ensure!(!entries.is_empty(), "entries are empty"),
                    ProfileSpec::Geodesic {
                        point,
                        velocity,
                        frame_seed,
                        ..
                    } => {
                        dims(point, "point")?;
                        dims(velocity, "velocity")?;
                        dims(frame_seed, "frame_seed")?;
                    }
                }
            }
            Experiment::Focal {
                patch, scale, b, delta, parameter, ..
            } => {
                ensure!(n == 4, "submanifold patches need a 4-dimensional metric");
                ensure!(parameter.len() == 2, "parameter must have 2 entries");
                patch_ok(patch)?;
                ensure!(*scale > 0.0, "scale must be positive");
                ensure!(*b > 0.0, "b must be positive");
                ensure!(*delta >= 0.0, "delta must be nonnegative");
            }
            Experiment::TrappedCert {
                patch,
                params_per_axis,
                normals_per_point,
            } => {
                ensure!(n == 4, "submanifold patches need a 4-dimensional metric");
                patch_ok(patch)?;
                ensure!(*params_per_axis >= 1, "params_per_axis must be positive");
                ensure!(*normals_per_point >= 2, "normals_per_point must be at least 2");
            }
            Experiment::Distance1p1 { resolution, .. } => {
                ensure!(n == 2, "distance-1p1 needs a 2-dimensional metric");
                ensure!(*resolution >= 4, "resolution must be at least 4");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (after command-line overrides).
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn patch_ok(p: &PatchSpec) -> Result<()> {
    if let PatchSpec::Sphere { radius, .. } = p {
        if !(*radius > 0.0) {
            bail!("sphere radius must be positive");
        }
    }
    Ok(())
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad epsilon value '{s}'"))
        })
        .collect()
}
