//! Run configuration, pipeline orchestration, artifact emission and the
//! verification suite.

use crate::chart_atlas::{build_atlas_with, MixedRule, verify_assumption_a, verify_chart_asymptotics, AssumptionAReport, BranchSystem, ChartAsymptotics, IntervalChart, Loc};
use crate::error::{Error, Result, Stage, StageError};
use crate::map_model::{AnalyticMap, CoveringGraph, MapModel, MapSpec, MarkovPartition, PolarityReport, PostcriticalOrbit};
use crate::susceptibility::{
    decompose_y, direct_terms, pole_basis, pole_table, solve_w, Context, Decomposition, DirectSeries, Meromorphic, Observable, PoleBasis, PoleEntry, PoleSpan,
};
use crate::transfer_operator::{assemble_operators, check_structure, BasisConfig, Eigenvalue, OperatorDiscretization, StructureReport};
use nalgebra::DVector;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// A named observable or explicit ascending polynomial coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservableSpec {
    Named(String),
    Coeffs { coeffs: Vec<f64> },
}

impl ObservableSpec {
    pub fn resolve(&self) -> Result<Observable> {
        match self {
            ObservableSpec::Coeffs { coeffs } => {
                if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Config("observable coefficients must be finite and non-empty".into()));
                }
                Ok(Observable::new(coeffs.clone()))
            }
            ObservableSpec::Named(n) => match n.as_str() {
                "one" => Ok(Observable::new(vec![1.0])),
                "x" => Ok(Observable::new(vec![0.0, 1.0])),
                "x^2" | "square" => Ok(Observable::new(vec![0.0, 0.0, 1.0])),
                "x(1-x)" | "bump" => Ok(Observable::new(vec![0.0, 1.0, -1.0])),
                other => Err(Error::Config(format!("unknown observable {other:?}; use one, x, x^2, x(1-x) or {{\"coeffs\": [...]}}"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            ObservableSpec::Named(n) => n.clone(),
            ObservableSpec::Coeffs { coeffs } => format!("{coeffs:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observables {
    #[serde(default = "default_x")]
    pub x: Vec<ObservableSpec>,
    #[serde(default = "default_a")]
    pub a: ObservableSpec,
}

fn default_x() -> Vec<ObservableSpec> {
    vec![ObservableSpec::Named("x(1-x)".into()), ObservableSpec::Named("one".into())]
}
fn default_a() -> ObservableSpec {
    ObservableSpec::Named("x^2".into())
}

impl Default for Observables {
    fn default() -> Self {
        Observables { x: default_x(), a: default_a() }
    }
}

/// λ points at which Ψ is tabulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// n equally spaced points on |λ| = radius, starting at λ = radius.
    Circle { n: usize, radius: f64 },
    /// Polar grid: the origin plus `rings` circles of `per_ring` points up to `radius`.
    Disk { radius: f64, rings: usize, per_ring: usize },
    /// Explicit [re, im] pairs.
    Points { points: Vec<[f64; 2]> },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Circle { n: 64, radius: 1.0 }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<C64> {
        match self {
            GridSpec::Circle { n, radius } => (0..*n).map(|i| C64::from_polar(*radius, 2.0 * PI * i as f64 / *n as f64)).collect(),
            GridSpec::Disk { radius, rings, per_ring } => {
                let mut v = vec![C64::new(0.0, 0.0)];
                for r in 1..=*rings {
                    let rad = radius * r as f64 / *rings as f64;
                    // stagger alternate rings
                    let shift = if r % 2 == 0 { 0.5 } else { 0.0 };
                    for j in 0..*per_ring {
                        v.push(C64::from_polar(rad, 2.0 * PI * (j as f64 + shift) / *per_ring as f64));
                    }
                }
                v
            }
            GridSpec::Points { points } => points.iter().map(|p| C64::new(p[0], p[1])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Eigenvalues and σ₀ between degrees D and D + 8.
    pub degree_convergence: f64,
    pub markov: f64,
    pub mass_left_eigen: f64,
    pub mass_drift: f64,
    pub positivity: f64,
    pub unit_disk: f64,
    pub h1: f64,
    pub eigen_relation: f64,
    pub w_end: f64,
    pub lambda_match: f64,
    pub y0_residue: f64,
    pub h0: f64,
    pub residue_at_one: f64,
    pub two_path: f64,
    pub dichotomy_delta: f64,
    pub linearity: f64,
    pub b_prime_linear: f64,
    pub join_constant: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            degree_convergence: 1e-8,
            markov: 1e-9,
            mass_left_eigen: 1e-10,
            mass_drift: 1e-11,
            positivity: 1e-10,
            unit_disk: 1e-8,
            h1: 1e-7,
            eigen_relation: 1e-7,
            w_end: 1e-8,
            lambda_match: 1e-8,
            y0_residue: 1e-8,
            h0: 1e-6,
            residue_at_one: 1e-9,
            two_path: 1e-7,
            dichotomy_delta: 1e-3,
            linearity: 1e-10,
            b_prime_linear: 1e-6,
            join_constant: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionAConfig {
    /// Initial stadium half-width ε; shrunk by 1.6 up to seven times.
    pub epsilon: f64,
    pub boundary_points: usize,
}

impl Default for AssumptionAConfig {
    fn default() -> Self {
        AssumptionAConfig { epsilon: 0.1, boundary_points: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub map: MapSpec,
    /// How mixed (one polar end) charts fix their free parameter.
    #[serde(default)]
    pub mixed_chart: MixedRule,
    #[serde(default = "d_degree")]
    pub degree: usize,
    /// Bernstein ellipse parameter; automatic when absent.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Eigenvalues reported.
    #[serde(default = "d_n_keep")]
    pub n_keep: usize,
    /// Leading eigenvalues that must pass the degree-convergence check.
    #[serde(default = "d_n_certified")]
    pub n_certified: usize,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_orbit_tol")]
    pub orbit_tol: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub observables: Observables,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "d_density_points")]
    pub density_points: usize,
    #[serde(default = "d_series_terms")]
    pub series_terms: usize,
    #[serde(default = "d_series_quad")]
    pub series_quad: usize,
    /// Radius of the disk on which the direct series is compared.
    #[serde(default = "d_overlap")]
    pub overlap_radius: f64,
    #[serde(default)]
    pub assumption_a: AssumptionAConfig,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_degree() -> usize {
    32
}
fn d_n_keep() -> usize {
    8
}
fn d_n_certified() -> usize {
    4
}
fn d_max_iter() -> usize {
    64
}
fn d_orbit_tol() -> f64 {
    1e-10
}
fn d_density_points() -> usize {
    101
}
fn d_series_terms() -> usize {
    14
}
fn d_series_quad() -> usize {
    40
}
fn d_overlap() -> f64 {
    0.4
}
fn d_seed() -> u64 {
    20240601
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.schema_version {
            if v != SCHEMA_VERSION {
                return Err(Error::Config(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")));
            }
        }
        if self.degree < 8 {
            return Err(Error::Config(format!("degree {} < 8", self.degree)));
        }
        if let Some(r) = self.rho {
            if !(r > 1.0) {
                return Err(Error::Config("rho must exceed 1".into()));
            }
        }
        let t = &self.tolerances;
        let all = [
            t.degree_convergence,
            t.markov,
            t.mass_left_eigen,
            t.mass_drift,
            t.positivity,
            t.unit_disk,
            t.h1,
            t.eigen_relation,
            t.w_end,
            t.lambda_match,
            t.y0_residue,
            t.h0,
            t.residue_at_one,
            t.two_path,
            t.dichotomy_delta,
            t.linearity,
            t.b_prime_linear,
            t.join_constant,
            self.orbit_tol,
            self.overlap_radius,
            self.assumption_a.epsilon,
        ];
        if all.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("tolerances, radii and ε must be positive".into()));
        }
        if self.observables.x.is_empty() {
            return Err(Error::Config("at least one X observable is required".into()));
        }
        for o in self.observables.x.iter().chain(std::iter::once(&self.observables.a)) {
            o.resolve()?;
        }
        if self.n_keep == 0 || self.n_certified > self.n_keep || self.density_points < 2 || self.series_terms < 4 || self.series_quad < 4 {
            return Err(Error::Config("n_keep ≥ n_certified, density_points ≥ 2, series_terms ≥ 4, series_quad ≥ 4 required".into()));
        }
        if self.assumption_a.boundary_points < 16 {
            return Err(Error::Config("assumption_a.boundary_points must be at least 16".into()));
        }
        Ok(())
    }
}

/// One pass/fail verification with its measured value and tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub stage: Stage,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn check(name: impl Into<String>, stage: Stage, measured: f64, tolerance: f64, passed: bool) -> Check {
    Check { name: name.into(), stage, passed, measured, tolerance, note: None }
}

/// `measured <= tolerance`, NaN failing.
fn le(name: impl Into<String>, stage: Stage, measured: f64, tolerance: f64) -> Check {
    check(name, stage, measured, tolerance, measured <= tolerance)
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub schema_version: u32,
    pub map: MapSpec,
    pub critical_point: f64,
    pub orbit: PostcriticalOrbit,
    pub partition: MarkovPartition,
    pub graph: CoveringGraph,
    pub polarity: PolarityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AtlasEntry {
    pub interval: usize,
    pub chart: IntervalChart,
    pub asymptotics: ChartAsymptotics,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AtlasReport {
    pub schema_version: u32,
    pub charts: Vec<AtlasEntry>,
    pub assumption_a: AssumptionAReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub schema_version: u32,
    pub degree: usize,
    pub rho: f64,
    pub ellipse_image_rho: f64,
    pub imag_residual: f64,
    pub eigenvalues: Vec<Eigenvalue>,
    pub eigen_convergence_tolerance: f64,
    /// max |σ₀(D) - σ₀(D+8)| at the density grid.
    pub density_change: f64,
    pub structure: StructureReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiPoint {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub psi_re: f64,
    pub psi_im: f64,
    pub flag: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiTable {
    pub x: String,
    pub a: String,
    pub points: Vec<PsiPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoleSet {
    pub x: String,
    pub a: String,
    pub poles: Vec<PoleEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoleReport {
    pub schema_version: u32,
    pub p: usize,
    pub q: usize,
    pub big_lambda: f64,
    pub lambda_tilde: Vec<f64>,
    pub stretch_weight: Vec<f64>,
    pub sets: Vec<PoleSet>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationSummary {
    pub schema_version: u32,
    pub passed: bool,
    pub n_checks: usize,
    pub n_failed: usize,
    pub checks: Vec<Check>,
}

impl VerificationSummary {
    fn new(checks: Vec<Check>) -> Self {
        let n_failed = checks.iter().filter(|c| !c.passed).count();
        VerificationSummary { schema_version: SCHEMA_VERSION, passed: n_failed == 0, n_checks: checks.len(), n_failed, checks }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub partition: PartitionReport,
    pub atlas: Option<AtlasReport>,
    pub spectrum: Option<SpectrumReport>,
    /// (x, ρ(x)) on an interior grid of I.
    pub density: Option<Vec<(f64, f64)>>,
    pub psi: Option<Vec<PsiTable>>,
    pub poles: Option<PoleReport>,
    pub verification: VerificationSummary,
}

/// How far the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Partition,
    Atlas,
    Spectrum,
    Density,
    Psi,
    Poles,
    Verify,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

/// The 9-point overlap grid: origin, 4 points at radius r/2, 4 staggered at r.
pub fn overlap_grid(r: f64) -> Vec<C64> {
    GridSpec::Disk { radius: r, rings: 2, per_ring: 4 }.points()
}

/// Relative discrepancy of the two evaluations, scaled by the absolute series.
fn two_path_error(mero: C64, direct: C64, series: &DirectSeries, lambda: C64) -> f64 {
    let abs_series: f64 = series.terms.iter().enumerate().map(|(n, t)| t.abs() * lambda.norm().powi(n as i32)).sum();
    (mero - direct).norm() / abs_series.max(direct.norm()).max(1e-300)
}

/// Runs the pipeline up to `target`, collecting verification checks along the way.
pub fn run_pipeline(cfg: &RunConfig, target: Target) -> std::result::Result<ReportBundle, StageError> {
    run_collecting(cfg, target, &mut Vec::new())
}

/// As [`run_pipeline`], but checks recorded before a stage error stay in `checks`.
pub fn run_collecting(cfg: &RunConfig, target: Target, checks: &mut Vec<Check>) -> std::result::Result<ReportBundle, StageError> {
    let tol = &cfg.tolerances;

    // map model
    let map = AnalyticMap::from_spec(&cfg.map).map_err(at(Stage::MapModel))?;
    let model = MapModel::build(map, cfg.max_iter, cfg.orbit_tol).map_err(at(Stage::MapModel))?;
    checks.push(le("markov_residual", Stage::MapModel, model.partition.markov_residual, tol.markov));
    let agree = model.polarity.sampled == model.polarity.propagated;
    checks.push(check("polarity_sampling_matches_propagation", Stage::MapModel, if agree { 0.0 } else { 1.0 }, 0.0, agree));
    let partition = PartitionReport {
        schema_version: SCHEMA_VERSION,
        map: cfg.map.clone(),
        critical_point: model.critical_point(),
        orbit: model.orbit.clone(),
        partition: model.partition.clone(),
        graph: model.graph.clone(),
        polarity: model.polarity.clone(),
    };
    let mut bundle = ReportBundle {
        partition,
        atlas: None,
        spectrum: None,
        density: None,
        psi: None,
        poles: None,
        verification: VerificationSummary::new(Vec::new()),
    };
    if target == Target::Partition {
        bundle.verification = VerificationSummary::new(checks.clone());
        return Ok(bundle);
    }

    // chart atlas
    let charts = build_atlas_with(&model, cfg.mixed_chart).map_err(at(Stage::ChartAtlas))?;
    let mut entries = Vec::new();
    for (k, ch) in charts.iter().enumerate() {
        let asym = verify_chart_asymptotics(ch);
        let passes = asym.passes();
        let worst = [&asym.left, &asym.right]
            .iter()
            .map(|e| if e.polar { (e.coefficient - 0.5).abs() } else { (e.coefficient - 1.0).abs() })
            .fold(0.0, f64::max);
        checks.push(check(format!("chart_asymptotics[{k}]"), Stage::ChartAtlas, worst, 1e-6, passes));
        entries.push(AtlasEntry { interval: k, chart: ch.clone(), asymptotics: asym, passes });
    }
    let sys = BranchSystem::new(&model, charts).map_err(at(Stage::ChartAtlas))?;
    let aa = verify_assumption_a(&sys, cfg.assumption_a.epsilon, cfg.assumption_a.boundary_points).map_err(at(Stage::ChartAtlas))?;
    checks.push(check("assumption_a_margin", Stage::ChartAtlas, aa.margin, 0.0, aa.margin > 0.0));
    bundle.atlas = Some(AtlasReport { schema_version: SCHEMA_VERSION, charts: entries, assumption_a: aa });
    if target == Target::Atlas {
        bundle.verification = VerificationSummary::new(checks.clone());
        return Ok(bundle);
    }

    // transfer operator
    let top = Stage::TransferOperator;
    let op = assemble_operators(&sys, BasisConfig { degree: cfg.degree, rho: cfg.rho }).map_err(at(top))?;
    let fine = assemble_operators(&sys, BasisConfig { degree: cfg.degree + 8, rho: Some(op.basis.rho) }).map_err(at(top))?;
    let ev = op.eigenvalues().map_err(at(top))?;
    let ev_fine = fine.eigenvalues().map_err(at(top))?;
    let sigma = op.invariant_density().map_err(at(top))?;
    let sigma_fine = fine.invariant_density().map_err(at(top))?;
    let mut eigenvalues = Vec::new();
    let mut worst_delta: f64 = 0.0;
    for (i, z) in ev.iter().take(cfg.n_keep).enumerate() {
        let delta = ev_fine.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min);
        if i < cfg.n_certified {
            worst_delta = worst_delta.max(delta);
        }
        eigenvalues.push(Eigenvalue {
            re: z.re,
            im: z.im,
            modulus: z.norm(),
            delta: Some(delta),
            converged: Some(delta < tol.degree_convergence),
        });
    }
    checks.push(le("eigenvalue_degree_convergence", top, worst_delta, tol.degree_convergence));
    let outside = ev.iter().map(|z| z.norm() - 1.0).fold(f64::NEG_INFINITY, f64::max);
    checks.push(le("spectrum_in_unit_disk", top, outside, tol.unit_disk));
    let second = ev.get(1).map(|z| z.norm()).unwrap_or(0.0);
    checks.push(check("spectral_gap", top, second, 1.0 - tol.dichotomy_delta, second < 1.0 - tol.dichotomy_delta));
    let grid = density_grid(&sys, cfg.density_points);
    let density_at = |op: &OperatorDiscretization, s: &DVector<f64>, k: usize, p: Loc| op.basis.eval(s, k, p) / sys.charts[k].omega_prime(p);
    let mut density = Vec::new();
    let mut dchange: f64 = 0.0;
    for &(x, k, p) in &grid {
        let r = density_at(&op, &sigma, k, p);
        dchange = dchange.max((op.basis.eval(&sigma, k, p) - fine.basis.eval(&sigma_fine, k, p)).abs());
        density.push((x, r));
    }
    checks.push(le("density_degree_convergence", top, dchange, tol.degree_convergence));
    let polar: Vec<(bool, bool)> = sys.charts.iter().map(|c| (c.left_polar, c.right_polar)).collect();
    let st = check_structure(&op, &sigma, &polar, 20, cfg.seed);
    checks.push(le("mass_left_eigenvector", top, st.mass_left_eigen_residual, tol.mass_left_eigen));
    checks.push(le("mass_drift", top, st.max_mass_drift, tol.mass_drift));
    checks.push(check("positivity", top, st.min_positive_image, -tol.positivity, st.min_positive_image >= -tol.positivity));
    checks.push(le("h1_invariance", top, st.h1_residual, tol.h1));
    let min_sigma = op.basis.node_values(&sigma).iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    checks.push(check("density_positive", top, min_sigma, 0.0, min_sigma > 0.0));
    bundle.spectrum = Some(SpectrumReport {
        schema_version: SCHEMA_VERSION,
        degree: cfg.degree,
        rho: op.basis.rho,
        ellipse_image_rho: op.ellipse_image_rho,
        imag_residual: op.imag_residual,
        eigenvalues,
        eigen_convergence_tolerance: tol.degree_convergence,
        density_change: dchange,
        structure: st,
    });
    bundle.density = Some(density);
    if target <= Target::Density {
        bundle.verification = VerificationSummary::new(checks.clone());
        return Ok(bundle);
    }

    // susceptibility
    let sus = Stage::Susceptibility;
    let ctx = Context::new(&model, &sys, &op, &sigma);
    let pb = pole_basis(&model, &sys.lengths).map_err(at(sus))?;
    checks.push(check("big_lambda_exceeds_one", sus, pb.big_lambda, 1.0, pb.big_lambda > 1.0));
    let span = solve_w(&ctx, &pb).map_err(at(sus))?;
    checks.push(le("w_end_value", sus, span.w_end.abs(), tol.w_end));
    checks.push(le("eigen_relation", sus, span.eigen_relation, tol.eigen_relation));
    checks.push(le("pole_span_fit", sus, span.m_fit_residual, tol.eigen_relation));
    let omega = pb.omega_ell();
    let mut ev_err: f64 = 0.0;
    for w in &omega {
        let best = span.m_eigenvalues.iter().map(|z| (z - w).norm()).fold(f64::INFINITY, f64::min);
        ev_err = ev_err.max(best);
    }
    checks.push(le("omega_from_pole_span", sus, ev_err, tol.lambda_match));
    b_prime_checks(&ctx, &pb, cfg, checks).map_err(at(sus))?;

    let a_obs = cfg.observables.a.resolve().map_err(at(Stage::Report))?;
    let a_label = cfg.observables.a.label();
    let lambda_grid = cfg.grid.points();
    let unit = GridSpec::Circle { n: 64, radius: 1.0 }.points();
    let overlap = overlap_grid(cfg.overlap_radius);
    let mut psi_tables = Vec::new();
    let mut pole_sets = Vec::new();
    let mut decs: Vec<Decomposition> = Vec::new();
    let mut all_poles: Vec<C64> = Vec::new();
    for spec in &cfg.observables.x {
        let x = spec.resolve().map_err(at(Stage::Report))?;
        let label = spec.label();
        let dec = decompose_y(&ctx, &pb, &span, &x).map_err(at(sus))?;
        checks.push(le(format!("join_constant_terms[{label}]"), sus, dec.y.join_mismatch, tol.join_constant));
        checks.push(le(format!("y0_residue[{label}]"), sus, dec.y0_residue, tol.y0_residue));
        checks.push(le(format!("y0_h0[{label}]"), sus, dec.y0_h0_defect, tol.h0));
        checks.push(le(format!("y_tilde_h0[{label}]"), sus, dec.y_tilde_h0_defect, tol.h0));
        let mut mero = Meromorphic::new(&ctx, &pb, &span, &dec, &a_obs).map_err(at(sus))?;
        mero.residue_tol = tol.residue_at_one;
        let r1 = mero.int_ytp.iter().fold(mero.int_y0p.abs(), |a, v| a.max(v.abs()));
        checks.push(le(format!("residue_at_one[{label}]"), sus, r1, tol.residue_at_one));
        all_poles.extend_from_slice(mero.poles());

        let mut points = Vec::new();
        for &l in &lambda_grid {
            let v = mero.eval(l).map_err(at(sus))?;
            let flag = if !(v.re.is_finite() && v.im.is_finite()) {
                "non_finite"
            } else if v.near_pole {
                "near_pole"
            } else {
                "ok"
            };
            points.push(PsiPoint { lambda_re: l.re, lambda_im: l.im, psi_re: v.re, psi_im: v.im, flag: flag.into() });
        }
        psi_tables.push(PsiTable { x: label.clone(), a: a_label.clone(), points });

        if target >= Target::Poles {
            let poles = pole_table(&mero, &pb, cfg.n_keep.saturating_sub(1)).map_err(at(sus))?;
            let scale = poles.iter().map(|p| p.residue_re.hypot(p.residue_im)).fold(0.0, f64::max).max(1e-300);
            for (i, p) in poles.iter().enumerate() {
                let r = p.residue_re.hypot(p.residue_im);
                if r > 1e-6 * scale && r > 1e-10 {
                    let ok = p.winding == -1;
                    let mut c = check(format!("pole_sweep[{label}][{i}]"), sus, p.winding as f64, -1.0, ok);
                    c.note = Some(format!("{} pole at {:.6}{:+.6}i", p.family, p.re, p.im));
                    checks.push(c);
                }
            }
            pole_sets.push(PoleSet { x: label.clone(), a: a_label.clone(), poles });
        }

        if target == Target::Verify {
            let series = direct_terms(&ctx, &x, &a_obs, cfg.series_terms, cfg.series_quad, pb.p()).map_err(at(sus))?;
            let mut worst: f64 = 0.0;
            for &l in &overlap {
                let d = series.sum(l).map_err(at(sus))?;
                let m = mero.eval_c(l).map_err(at(sus))?;
                worst = worst.max(two_path_error(m, d, &series, l));
            }
            checks.push(le(format!("two_path_overlap[{label}]"), sus, worst, tol.two_path));
            let mut finite = true;
            let mut worst_u: f64 = 0.0;
            let mut continued = true;
            for &l in &unit {
                let m = mero.eval_c(l).map_err(at(sus))?;
                finite &= m.re.is_finite() && m.im.is_finite();
                match series.continued_sum(l) {
                    Some(d) => worst_u = worst_u.max((m - d).norm() / m.norm().max(d.norm()).max(1e-300)),
                    None => continued = false,
                }
            }
            checks.push(check(format!("unit_circle_finite[{label}]"), sus, if finite { 0.0 } else { 1.0 }, 0.0, finite));
            let mut c = le(format!("two_path_unit_circle[{label}]"), sus, worst_u, tol.two_path);
            if !continued {
                c.note = Some("direct series has no consistent geometric tail; compared where available".into());
            }
            checks.push(c);
        }
        decs.push(dec);
    }
    bundle.psi = Some(psi_tables);

    // pole dichotomy over every discrete pole
    let delta = tol.dichotomy_delta;
    let polar_set: Vec<C64> = omega.iter().map(|w| 1.0 / w).collect();
    let polar_max = polar_set.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let op_min = all_poles
        .iter()
        .filter(|z| !polar_set.iter().any(|w| (*w - **z).norm() < 1e-12))
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min);
    checks.push(check("pole_dichotomy_polar", sus, polar_max, 1.0 - delta, polar_max < 1.0 - delta));
    checks.push(check("pole_dichotomy_operator", sus, op_min, 1.0 + delta, op_min > 1.0 + delta));

    if target >= Target::Poles {
        bundle.poles = Some(PoleReport {
            schema_version: SCHEMA_VERSION,
            p: pb.p(),
            q: pb.q,
            big_lambda: pb.big_lambda,
            lambda_tilde: pb.lambda_tilde.clone(),
            stretch_weight: pb.stretch_weight.clone(),
            sets: pole_sets,
        });
    }
    if target == Target::Verify {
        linearity_checks(&ctx, &pb, &span, cfg, &a_obs, checks).map_err(at(sus))?;
    }
    bundle.verification = VerificationSummary::new(checks.clone());
    Ok(bundle)
}

/// Interior grid of I with the chart location of each point.
pub fn density_grid(sys: &BranchSystem, n: usize) -> Vec<(f64, usize, Loc)> {
    let a = sys.charts[0].u;
    let b = sys.charts[sys.charts.len() - 1].v;
    (0..n)
        .map(|i| {
            let x = a + (b - a) * (i as f64 + 0.5) / n as f64;
            let k = sys.charts.iter().position(|c| x <= c.v).unwrap_or(sys.charts.len() - 1);
            (x, k, sys.charts[k].varpi(x))
        })
        .collect()
}

/// B' = A'(ω)ω' must vanish linearly at polar ends: B'(ξ)/ξ → A'(q).
fn b_prime_checks(ctx: &Context, pb: &PoleBasis, cfg: &RunConfig, checks: &mut Vec<Check>) -> Result<()> {
    let a = cfg.observables.a.resolve()?;
    let mut worst: f64 = 0.0;
    for pe in &pb.ends {
        let l = pb.lengths[pe.interval];
        let xi = 1e-4;
        let p = if pe.right { Loc::from_right(xi, l) } else { Loc::from_left(xi, l) };
        let bp = ctx.b_and_bprime(&a, pe.interval, p).1;
        let expect = a.deriv(pe.x);
        worst = worst.max((bp.abs() / xi - expect.abs()).abs() / (1.0 + expect.abs()));
    }
    checks.push(le("b_prime_vanishes_linearly", Stage::Susceptibility, worst, cfg.tolerances.b_prime_linear));
    Ok(())
}

/// Ψ is linear in X and in A.
fn linearity_checks(ctx: &Context, pb: &PoleBasis, span: &PoleSpan, cfg: &RunConfig, a: &Observable, checks: &mut Vec<Check>) -> Result<()> {
    let lam = [C64::new(0.3, 0.2), C64::new(-0.6, 0.8)];
    let x1 = cfg.observables.x[0].resolve()?;
    let x2 = Observable::new(vec![0.25, -0.5, 0.75]);
    let combo = |u: &Observable, v: &Observable, s: f64, t: f64| {
        let n = u.coeffs.len().max(v.coeffs.len());
        Observable::new((0..n).map(|i| s * u.coeffs.get(i).unwrap_or(&0.0) + t * v.coeffs.get(i).unwrap_or(&0.0)).collect())
    };
    let (s, t) = (0.7, -1.3);
    let eval = |x: &Observable, a: &Observable| -> Result<Vec<C64>> {
        let dec = decompose_y(ctx, pb, span, x)?;
        let m = Meromorphic::new(ctx, pb, span, &dec, a)?;
        lam.iter().map(|l| m.eval_c(*l)).collect()
    };
    let p1 = eval(&x1, a)?;
    let p2 = eval(&x2, a)?;
    let pc = eval(&combo(&x1, &x2, s, t), a)?;
    let mut worst: f64 = 0.0;
    for i in 0..lam.len() {
        let lin = s * p1[i] + t * p2[i];
        worst = worst.max((pc[i] - lin).norm() / (s.abs() * p1[i].norm() + t.abs() * p2[i].norm()).max(1e-300));
    }
    checks.push(le("linearity_in_x", Stage::Susceptibility, worst, cfg.tolerances.linearity));
    let a2 = Observable::new(vec![0.0, 1.0]);
    let q1 = p1;
    let q2 = eval(&x1, &a2)?;
    let qc = eval(&x1, &combo(a, &a2, s, t))?;
    let mut worst: f64 = 0.0;
    for i in 0..lam.len() {
        let lin = s * q1[i] + t * q2[i];
        worst = worst.max((qc[i] - lin).norm() / (s.abs() * q1[i].norm() + t.abs() * q2[i].norm()).max(1e-300));
    }
    checks.push(le("linearity_in_a", Stage::Susceptibility, worst, cfg.tolerances.linearity));
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(dir.join(name), s)?;
    Ok(())
}

fn schema_wrap<T: Serialize>(key: &str, v: &T) -> Result<serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), SCHEMA_VERSION.into());
    m.insert(key.into(), serde_json::to_value(v)?);
    Ok(serde_json::Value::Object(m))
}

/// Writes every artifact present in the bundle; returns the file names written.
pub fn write_artifacts(bundle: &ReportBundle, dir: &Path, target: Target) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write_json(dir, "partition.json", &bundle.partition)?;
    written.push("partition.json".to_string());
    if let Some(a) = &bundle.atlas {
        write_json(dir, "atlas.json", a)?;
        written.push("atlas.json".into());
    }
    if let Some(s) = &bundle.spectrum {
        write_json(dir, "spectrum.json", s)?;
        written.push("spectrum.json".into());
    }
    if let Some(d) = &bundle.density {
        let mut w = csv::Writer::from_path(dir.join("density.csv"))?;
        w.write_record(["x", "rho"])?;
        for (x, r) in d {
            w.write_record([format!("{x:.17e}"), format!("{r:.17e}")])?;
        }
        w.flush()?;
        written.push("density.csv".into());
    }
    if let Some(tables) = &bundle.psi {
        for (i, t) in tables.iter().enumerate() {
            let name = format!("psi_{i}.csv");
            let mut w = csv::Writer::from_path(dir.join(&name))?;
            w.write_record(["re_lambda", "im_lambda", "re_psi", "im_psi", "flag"])?;
            for p in &t.points {
                w.write_record([
                    format!("{:.17e}", p.lambda_re),
                    format!("{:.17e}", p.lambda_im),
                    format!("{:.17e}", p.psi_re),
                    format!("{:.17e}", p.psi_im),
                    p.flag.clone(),
                ])?;
            }
            w.flush()?;
            written.push(name);
        }
        let index: Vec<(String, String, String)> =
            tables.iter().enumerate().map(|(i, t)| (format!("psi_{i}.csv"), t.x.clone(), t.a.clone())).collect();
        write_json(dir, "psi_index.json", &schema_wrap("files", &index)?)?;
        written.push("psi_index.json".into());
    }
    if let Some(p) = &bundle.poles {
        write_json(dir, "poles.json", p)?;
        written.push("poles.json".into());
    }
    if target == Target::Verify {
        write_json(dir, "verify.json", &bundle.verification)?;
        written.push("verify.json".into());
    }
    Ok(written)
}

/// Full suite: exit status 0 iff every check passes, 1 on a failed check or a
/// domain rejection, 2 on configuration errors, 3 on numerical failures.
pub fn verify(cfg: &RunConfig) -> (i32, serde_json::Value) {
    let mut checks = Vec::new();
    match run_collecting(cfg, Target::Verify, &mut checks) {
        Ok(b) => {
            let code = if b.verification.passed { 0 } else { 1 };
            if let Some(dir) = &cfg.output_dir {
                if let Err(e) = write_artifacts(&b, dir, Target::Verify) {
                    return (e.exit_code(), error_json(None, &e));
                }
            }
            (code, serde_json::to_value(&b.verification).unwrap_or_default())
        }
        Err(e) => {
            let mut v = error_json(Some(e.stage), &e.source);
            let partial = VerificationSummary::new(checks);
            v["n_checks"] = partial.n_checks.into();
            v["n_failed"] = partial.n_failed.into();
            v["checks"] = serde_json::to_value(&partial.checks).unwrap_or_default();
            (e.source.exit_code(), v)
        }
    }
}

pub fn error_json(stage: Option<Stage>, e: &Error) -> serde_json::Value {
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "passed": false,
        "error": e.kind(),
        "stage": stage,
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"map": {"family": "logistic", "lambda": 4.0}}"#).unwrap();
        assert_eq!(cfg.degree, 32);
        assert_eq!(cfg.grid, GridSpec::Circle { n: 64, radius: 1.0 });
        assert_eq!(cfg.observables, Observables::default());
        assert_eq!(cfg.tolerances.two_path, 1e-7);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "{}",
            "[1, 2]",
            r#"{"map": {"family": "logistic", "lambda": 4.0}, "degree": 4}"#,
            r#"{"map": {"family": "logistic", "lambda": 4.0}, "tolerances": {"h1": -1.0}}"#,
            r#"{"map": {"family": "logistic", "lambda": 4.0}, "grid": {"kind": "spiral"}}"#,
        ] {
            let e = RunConfig::from_json(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }

    #[test]
    fn observables_resolve_by_name_or_coefficients() {
        let named: ObservableSpec = serde_json::from_str(r#""x(1-x)""#).unwrap();
        assert!((named.resolve().unwrap().eval(0.25) - 0.1875).abs() < 1e-16);
        let coeffs: ObservableSpec = serde_json::from_str(r#"{"coeffs": [1.0, 0.0, 2.0]}"#).unwrap();
        assert_eq!(coeffs.resolve().unwrap().eval(2.0), 9.0);
        assert!(ObservableSpec::Named("sin".into()).resolve().is_err());
        assert!(ObservableSpec::Coeffs { coeffs: vec![] }.resolve().is_err());
    }

    #[test]
    fn overlap_grid_has_nine_points_in_the_disk() {
        let g = overlap_grid(0.4);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], C64::new(0.0, 0.0));
        assert!(g[1..5].iter().all(|z| (z.norm() - 0.2).abs() < 1e-15));
        assert!(g[5..].iter().all(|z| (z.norm() - 0.4).abs() < 1e-15));
        // the outer ring is staggered against the inner one
        assert!((g[5].arg() - g[1].arg()).abs() > 0.1);
    }
}
