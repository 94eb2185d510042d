//! Problem documents and the batch pipelines behind the `hjcouple` binary.
//!
//! Exit-code contract: 0 when every check passes, 1 when a check or
//! diagnostic fails, 2 for malformed documents or arguments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::convolve::check_convolution_laws;
use crate::couplings::{
    check_controlled_growth, check_coupling_identity, check_coupling_max_principle, check_pi_lipschitz, CoupledMeasure, CouplingSpec,
    JumpRule,
};
use crate::doubling::{run_trace, DoublingProblem, SearchConfig, TraceConfig};
use crate::error::{Error, Result};
use crate::expr::{indexed_names, Expr};
use crate::funcspace::{fd_gradient_fn, fd_hessian_fn, CloudDescriptor, PiecewiseLinear1d, Point, SampleCloud, ScalarField};
use crate::operators::{
    check_isaacs, check_measure_family, check_semi_monotone, lyapunov_bound, lyapunov_bound_nested, CostFunctional, CutProfile,
    DiffusionOp, DiscreteMeasure, DriftConvexOp, IsaacsNode, JumpOp, OperatorSpec,
};
use crate::penalty::{certify_family, Containment, PenaltyFamily, DEFAULT_RADII};
use crate::report::CheckReport;
use crate::resolvent::{discretize, solve_bellman_isaacs, verify_contraction, verify_strict_estimate, FiniteProblem, Legendre};

/// Version tag accepted in the `version` field.
pub const DOCUMENT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// document model

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    /// Seed for pair generators and bump draws.
    #[serde(default)]
    pub seed: u64,
    pub operator: OperatorDoc,
    #[serde(default)]
    pub coupling: Option<CouplingDoc>,
    #[serde(default)]
    pub penalty: PenaltyDoc,
    #[serde(default)]
    pub containment: ContainmentDoc,
    #[serde(default)]
    pub checks: Vec<CheckDoc>,
    #[serde(default)]
    pub resolvent: Option<ResolventDoc>,
    #[serde(default)]
    pub doubling: Option<DoublingDoc>,
}

/// Operator tree. Expressions use `x1..xq`; Hamiltonians use `p1..pq`.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorDoc {
    Zero,
    Drift {
        drift: Vec<String>,
        #[serde(default)]
        hamiltonian: Option<String>,
    },
    Diffusion {
        /// Rows of `Σ(x)`, a `q × m` matrix.
        sigma: Vec<Vec<String>>,
    },
    Jump {
        atoms: Vec<AtomDoc>,
        #[serde(default)]
        cut_inner: Option<f64>,
    },
    Sum {
        terms: Vec<OperatorDoc>,
    },
    Isaacs {
        theta1: Vec<f64>,
        theta2: Vec<f64>,
        components: Vec<Vec<OperatorDoc>>,
        /// Cost expressions per `(θ₁, θ₂)`, in `x1..xq`; `inf` marks an absent control.
        #[serde(default)]
        cost: Option<Vec<Vec<String>>>,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomDoc {
    pub z: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupledAtomDoc {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingDoc {
    Synchronous,
    Product,
    /// State-independent explicit coupled measure for every jump leaf.
    Table { atoms: Vec<CoupledAtomDoc> },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "collection", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyDoc {
    Quadratic {
        #[serde(default = "default_r")]
        r: f64,
    },
    Plateau {
        r: f64,
        r_prime: f64,
        r_dprime: f64,
    },
}

fn default_r() -> f64 {
    DEFAULT_RADII.0
}

impl Default for PenaltyDoc {
    fn default() -> Self {
        PenaltyDoc::Quadratic { r: default_r() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContainmentDoc {
    /// `V(x) = log(1 + ½|x|²)`.
    Log,
    Expr { v: String, kappa_v: f64 },
}

impl Default for ContainmentDoc {
    fn default() -> Self {
        ContainmentDoc::Log
    }
}

/// Scalar data: closed form, 1-D table, grid values, or a resolvent product.
#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldDoc {
    Constant(f64),
    Expr(String),
    Table { nodes: Vec<f64>, values: Vec<f64> },
    /// One value per resolvent state.
    Values(Vec<f64>),
    /// Resolvent solution for the named `resolvent.h` entry.
    Solve(String),
    /// The named `resolvent.h` entry itself.
    Data(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckDoc {
    SemiMonotone {
        pairs: CloudDescriptor,
        alphas: Vec<f64>,
    },
    Isaacs {
        f: String,
        cloud: CloudDescriptor,
        #[serde(default = "default_isaacs_tol")]
        tolerance: f64,
    },
    CouplingIdentity {
        f1: String,
        f2: String,
        pairs: CloudDescriptor,
    },
    ControlledGrowth {
        quads: CloudDescriptor,
        alphas: Vec<f64>,
    },
    PiLipschitz {
        pairs: CloudDescriptor,
        #[serde(default)]
        bound: Option<f64>,
    },
    MaxPrinciple {
        points: CloudDescriptor,
        bumps: usize,
    },
    Lyapunov {
        cloud: CloudDescriptor,
        #[serde(default = "default_nested")]
        nested_points: usize,
        #[serde(default)]
        bound: Option<f64>,
    },
    Penalty {
        centers: CloudDescriptor,
        probes: CloudDescriptor,
    },
    Containment {
        cloud: CloudDescriptor,
    },
    MeasureFamily {
        cloud: CloudDescriptor,
        mass_limit: f64,
        #[serde(default = "default_continuity")]
        continuity_tol: f64,
    },
    ConvolutionLaws {
        u: String,
        v: String,
        alphas: Vec<f64>,
        domain: CloudDescriptor,
        probe: CloudDescriptor,
    },
}

fn default_isaacs_tol() -> f64 {
    1e-12
}

fn default_nested() -> usize {
    201
}

fn default_continuity() -> f64 {
    1e-6
}

impl CheckDoc {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckDoc::SemiMonotone { .. } => "semi_monotone",
            CheckDoc::Isaacs { .. } => "isaacs",
            CheckDoc::CouplingIdentity { .. } => "coupling_identity",
            CheckDoc::ControlledGrowth { .. } => "controlled_growth",
            CheckDoc::PiLipschitz { .. } => "pi_lipschitz",
            CheckDoc::MaxPrinciple { .. } => "max_principle",
            CheckDoc::Lyapunov { .. } => "lyapunov",
            CheckDoc::Penalty { .. } => "penalty",
            CheckDoc::Containment { .. } => "containment",
            CheckDoc::MeasureFamily { .. } => "measure_family",
            CheckDoc::ConvolutionLaws { .. } => "convolution_laws",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitDoc {
    /// Row-major generator matrices per `(θ₁, θ₂)`.
    pub generators: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub cost: Option<Vec<Vec<Vec<f64>>>>,
    /// State coordinates; defaults to `0, 1, …` on a line.
    #[serde(default)]
    pub states: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegendreDoc {
    pub theta: CloudDescriptor,
    pub p: CloudDescriptor,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionDoc {
    pub pairs: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrictDoc {
    pub eps: Vec<f64>,
    /// `K` = states with `|x| <= k_radius`.
    pub k_radius: f64,
    /// `h₁ - h₂` is supported on states with `|x| <= perturb_radius`.
    pub perturb_radius: f64,
    pub pairs: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventDoc {
    #[serde(default)]
    pub grid: Option<GridDoc>,
    #[serde(default)]
    pub explicit: Option<ExplicitDoc>,
    pub lambda: f64,
    #[serde(default)]
    pub legendre: Option<LegendreDoc>,
    #[serde(default)]
    pub h: BTreeMap<String, FieldDoc>,
    #[serde(default)]
    pub contraction: Option<ContractionDoc>,
    #[serde(default)]
    pub strict: Option<StrictDoc>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoublingDoc {
    pub eps: f64,
    pub phi: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub u: FieldDoc,
    pub v: FieldDoc,
    pub h1: FieldDoc,
    pub h2: FieldDoc,
    pub k: CloudDescriptor,
    pub domain: CloudDescriptor,
    #[serde(default)]
    pub schedule: Option<Vec<f64>>,
    #[serde(default = "default_final_d2")]
    pub final_alpha_d2: f64,
    #[serde(default)]
    pub final_alpha_chain: Option<f64>,
    #[serde(default = "yes")]
    pub test_functions: bool,
    #[serde(default = "default_budget")]
    pub search_budget: usize,
}

fn default_final_d2() -> f64 {
    1e-2
}

fn yes() -> bool {
    true
}

fn default_budget() -> usize {
    SearchConfig::default().budget
}

/// Command-line overrides applied on top of a document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub schedule: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
    pub tolerance_scale: Option<f64>,
}

/// A parsed document with its input hash.
#[derive(Clone, Debug)]
pub struct LoadedDocument {
    pub doc: ProblemDocument,
    pub sha256: String,
    pub path: PathBuf,
}

/// Every `"kind": "ball"` cloud must carry an explicit seed.
fn require_seeds(v: &Value, path: &str) -> Result<()> {
    match v {
        Value::Object(m) => {
            if m.get("kind").and_then(Value::as_str) == Some("ball") && !m.contains_key("seed") {
                return Err(Error::invalid(format!("{path}: stochastic cloud needs a `seed`")));
            }
            for (k, c) in m {
                require_seeds(c, &format!("{path}.{k}"))?;
            }
        }
        Value::Array(a) => {
            for (i, c) in a.iter().enumerate() {
                require_seeds(c, &format!("{path}[{i}]"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn parse_document(bytes: &[u8]) -> Result<ProblemDocument> {
    let raw: Value = serde_json::from_slice(bytes).map_err(|e| Error::invalid(format!("document is not JSON: {e}")))?;
    require_seeds(&raw, "$")?;
    let doc: ProblemDocument = serde_json::from_value(raw).map_err(|e| Error::invalid(format!("schema: {e}")))?;
    if doc.version != DOCUMENT_VERSION {
        return Err(Error::invalid(format!("version: unsupported document version {}", doc.version)));
    }
    if doc.dim == 0 {
        return Err(Error::invalid("dim: must be >= 1"));
    }
    Ok(doc)
}

pub fn load_document(path: &Path) -> Result<LoadedDocument> {
    let bytes = std::fs::read(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let doc = parse_document(&bytes)?;
    Ok(LoadedDocument { doc, sha256: hex::encode(Sha256::digest(&bytes)), path: path.to_path_buf() })
}

// ---------------------------------------------------------------------------
// builders

fn parse_expr(src: &str, vars: &[String], path: &str) -> Result<Expr> {
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    Expr::parse(src, &names).map_err(|e| Error::invalid(format!("{path}: {e}")))
}

/// Closed-form field with finite-difference derivatives.
pub fn expr_field(src: &str, q: usize, label: &str, path: &str) -> Result<ScalarField> {
    let e = Arc::new(parse_expr(src, &indexed_names("x", q), path)?);
    let (e1, e2, e3) = (Arc::clone(&e), Arc::clone(&e), e);
    Ok(ScalarField::new(q, label, move |x: &[f64]| e1.eval(x))
        .with_gradient(move |x: &[f64]| fd_gradient_fn(|y: &[f64]| e2.eval(y), x, 1e-6))
        .with_hessian(move |x: &[f64]| fd_hessian_fn(|y: &[f64]| e3.eval(y), x, 1e-4)))
}

fn check_vec_dim(v: &[f64], q: usize, path: &str) -> Result<()> {
    if v.len() != q {
        return Err(Error::invalid(format!("{path}: length {} does not match dim {q}", v.len())));
    }
    Ok(())
}

pub fn build_operator(d: &OperatorDoc, q: usize, path: &str) -> Result<OperatorSpec> {
    let xs = indexed_names("x", q);
    Ok(match d {
        OperatorDoc::Zero => OperatorSpec::Zero { dim: q },
        OperatorDoc::Drift { drift, hamiltonian } => {
            if drift.len() != q {
                return Err(Error::invalid(format!("{path}.drift: {} components for dim {q}", drift.len())));
            }
            let es: Vec<Expr> = drift.iter().enumerate().map(|(i, s)| parse_expr(s, &xs, &format!("{path}.drift[{i}]"))).collect::<Result<_>>()?;
            let mut op = DriftConvexOp::new(q, move |x: &[f64]| DVector::from_iterator(es.len(), es.iter().map(|e| e.eval(x))));
            if let Some(h) = hamiltonian {
                let e = parse_expr(h, &indexed_names("p", q), &format!("{path}.hamiltonian"))?;
                op = op.with_hamiltonian(move |p: &[f64]| e.eval(p));
            }
            OperatorSpec::Drift(op)
        }
        OperatorDoc::Diffusion { sigma } => {
            if sigma.len() != q || sigma.iter().any(|r| r.len() != sigma[0].len()) || sigma[0].is_empty() {
                return Err(Error::invalid(format!("{path}.sigma: must be a non-empty {q} × m matrix")));
            }
            let m = sigma[0].len();
            let es: Vec<Expr> = sigma
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, s)| (i, j, s)))
                .map(|(i, j, s)| parse_expr(s, &xs, &format!("{path}.sigma[{i}][{j}]")))
                .collect::<Result<_>>()?;
            OperatorSpec::Diffusion(DiffusionOp::new(q, move |x: &[f64]| DMatrix::from_row_iterator(q, m, es.iter().map(|e| e.eval(x)))))
        }
        OperatorDoc::Jump { atoms, cut_inner } => {
            for (i, a) in atoms.iter().enumerate() {
                check_vec_dim(&a.z, q, &format!("{path}.atoms[{i}].z"))?;
            }
            let mu = DiscreteMeasure::new(atoms.iter().map(|a| (a.z.clone(), a.weight)).collect()).map_err(|e| Error::invalid(format!("{path}.atoms: {e}")))?;
            let mut j = JumpOp::constant(q, mu);
            if let Some(inner) = cut_inner {
                if !(0.0..1.0).contains(inner) {
                    return Err(Error::invalid(format!("{path}.cut_inner: must lie in [0, 1)")));
                }
                j = j.with_cut(CutProfile::Smoothstep { inner: *inner });
            }
            OperatorSpec::Jump(j)
        }
        OperatorDoc::Sum { terms } => {
            let ts = terms.iter().enumerate().map(|(i, t)| build_operator(t, q, &format!("{path}.terms[{i}]"))).collect::<Result<Vec<_>>>()?;
            OperatorSpec::sum(ts).map_err(|e| Error::invalid(format!("{path}: {e}")))?
        }
        OperatorDoc::Isaacs { theta1, theta2, components, cost } => {
            if components.len() != theta1.len() || components.iter().any(|r| r.len() != theta2.len()) {
                return Err(Error::invalid(format!("{path}.components: shape must be |theta1| × |theta2|")));
            }
            let comps = components
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, c)| build_operator(c, q, &format!("{path}.components[{i}][{j}]"))).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let cost = match cost {
                None => CostFunctional::zero(),
                Some(tab) => {
                    if tab.len() != theta1.len() || tab.iter().any(|r| r.len() != theta2.len()) {
                        return Err(Error::invalid(format!("{path}.cost: shape must be |theta1| × |theta2|")));
                    }
                    let es: Vec<Vec<Expr>> = tab
                        .iter()
                        .enumerate()
                        .map(|(i, r)| r.iter().enumerate().map(|(j, s)| parse_expr(s, &xs, &format!("{path}.cost[{i}][{j}]"))).collect::<Result<Vec<_>>>())
                        .collect::<Result<_>>()?;
                    CostFunctional::new(move |x: &[f64], i: usize, j: usize| es[i][j].eval(x))
                }
            };
            let node = IsaacsNode::new(theta1.clone(), theta2.clone(), comps, cost).map_err(|e| Error::invalid(format!("{path}: {e}")))?;
            OperatorSpec::Isaacs(Box::new(node))
        }
    })
}

pub fn build_coupling(d: &CouplingDoc, op: &OperatorSpec, path: &str) -> Result<CouplingSpec> {
    let q = op.dim();
    let rule = match d {
        CouplingDoc::Synchronous => JumpRule::Synchronous,
        CouplingDoc::Product => JumpRule::Product,
        CouplingDoc::Table { atoms } => {
            for (i, a) in atoms.iter().enumerate() {
                check_vec_dim(&a.z1, q, &format!("{path}.atoms[{i}].z1"))?;
                check_vec_dim(&a.z2, q, &format!("{path}.atoms[{i}].z2"))?;
            }
            let m = CoupledMeasure::new(atoms.iter().map(|a| (a.z1.clone(), a.z2.clone(), a.weight)).collect())
                .map_err(|e| Error::invalid(format!("{path}.atoms: {e}")))?;
            JumpRule::table(m)
        }
    };
    CouplingSpec::mirror(op, &rule).map_err(|e| Error::invalid(format!("{path}: {e}")))
}

pub fn build_penalty(d: &PenaltyDoc, q: usize) -> Result<PenaltyFamily> {
    match d {
        PenaltyDoc::Quadratic { r } => PenaltyFamily::quadratic(q, *r),
        PenaltyDoc::Plateau { r, r_prime, r_dprime } => PenaltyFamily::plateau(q, *r, *r_prime, *r_dprime),
    }
    .map_err(|e| Error::invalid(format!("penalty: {e}")))
}

pub fn build_containment(d: &ContainmentDoc, q: usize) -> Result<Containment> {
    match d {
        ContainmentDoc::Log => Ok(Containment::default_log(q)),
        ContainmentDoc::Expr { v, kappa_v } => {
            Containment::new(expr_field(v, q, "V", "containment.v")?, *kappa_v).map_err(|e| Error::invalid(format!("containment: {e}")))
        }
    }
}

fn cloud(d: &CloudDescriptor, dim: usize, path: &str) -> Result<SampleCloud> {
    let c = SampleCloud::from_descriptor(d).map_err(|e| Error::invalid(format!("{path}: {e}")))?;
    if c.dim() != dim {
        return Err(Error::invalid(format!("{path}: cloud has dimension {}, expected {dim}", c.dim())));
    }
    Ok(c)
}

/// Everything a document describes, built and validated.
pub struct Built {
    pub q: usize,
    pub op: OperatorSpec,
    pub coupling: Option<CouplingSpec>,
    pub family: PenaltyFamily,
    pub containment: Containment,
}

pub fn build(doc: &ProblemDocument) -> Result<Built> {
    let q = doc.dim;
    let op = build_operator(&doc.operator, q, "operator")?;
    let coupling = doc.coupling.as_ref().map(|c| build_coupling(c, &op, "coupling")).transpose()?;
    Ok(Built {
        q,
        op,
        coupling,
        family: build_penalty(&doc.penalty, q)?,
        containment: build_containment(&doc.containment, q)?,
    })
}

// ---------------------------------------------------------------------------
// reports

/// Machine-readable outcome of one command.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub command: String,
    pub document: String,
    pub input_sha256: String,
    pub seed: u64,
    pub tolerance_scale: f64,
    pub checks: Vec<CheckReport>,
    pub extra: BTreeMap<String, Value>,
    pub outputs: Vec<String>,
    pub runtime_ms: f64,
}

pub fn threads() -> usize {
    rayon::current_num_threads()
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "tool": "hjcouple",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "document": self.document,
            "input_sha256": self.input_sha256,
            "environment": {
                "os": std::env::consts::OS,
                "arch": std::env::consts::ARCH,
                "threads": threads(),
            },
            "seed": self.seed,
            "tolerance_scale": self.tolerance_scale,
            "passed": self.passed(),
            "first_failure": self.checks.iter().find(|c| !c.passed).map(|c| c.name.clone()),
            "checks": self.checks,
            "extra": self.extra,
            "outputs": self.outputs,
            "runtime_ms": self.runtime_ms,
        })
    }
}

/// Re-judge a report against `scale × tolerance`; explicit failures stay failures.
pub fn rescale(mut r: CheckReport, scale: f64) -> CheckReport {
    if scale == 1.0 {
        return r;
    }
    let failures = r.details.get("failures").is_some_and(|v| v.as_array().is_some_and(|a| !a.is_empty()));
    r.tolerance *= scale;
    r.passed = !failures && (r.samples == 0 || r.max_violation <= r.tolerance);
    r
}

/// Drop every `runtime_ms` key, for run-to-run comparisons.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("runtime_ms");
            for c in m.values_mut() {
                strip_timing(c);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Result of a pipeline: the report plus the exit code it implies.
pub struct Outcome {
    pub report: RunReport,
    pub code: i32,
}

fn timed(f: impl FnOnce() -> Result<CheckReport>, name: &str) -> Result<CheckReport> {
    let t = Instant::now();
    let r = match f() {
        Ok(r) => r,
        Err(e) if e.is_input_error() => return Err(e),
        Err(e) => {
            let mut r = CheckReport::new(name, 0.0);
            r.fail(e.to_string());
            r
        }
    };
    let mut r = r;
    r.runtime_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}

// ---------------------------------------------------------------------------
// check

fn run_check(c: &CheckDoc, b: &Built, seed: u64, path: &str) -> Result<CheckReport> {
    let q = b.q;
    let need_coupling = || b.coupling.as_ref().ok_or_else(|| Error::invalid(format!("{path}: check needs a `coupling` section")));
    let pre = |e: Error| if e.is_input_error() { Error::invalid(format!("{path}: {e}")) } else { e };
    let name = c.kind();
    match c {
        CheckDoc::SemiMonotone { pairs, alphas } => check_semi_monotone(&b.op, &cloud(pairs, 2 * q, &format!("{path}.pairs"))?, alphas).map_err(pre),
        CheckDoc::Isaacs { f, cloud: cl, tolerance } => {
            let f = expr_field(f, q, "f", &format!("{path}.f"))?;
            check_isaacs(&b.op, &f, &cloud(cl, q, &format!("{path}.cloud"))?, *tolerance).map_err(pre)
        }
        CheckDoc::CouplingIdentity { f1, f2, pairs } => {
            let c = need_coupling()?;
            let (a, bb) = (expr_field(f1, q, "f1", &format!("{path}.f1"))?, expr_field(f2, q, "f2", &format!("{path}.f2"))?);
            check_coupling_identity(c, &b.op, &a, &bb, &cloud(pairs, 2 * q, &format!("{path}.pairs"))?).map_err(pre)
        }
        CheckDoc::ControlledGrowth { quads, alphas } => {
            check_controlled_growth(need_coupling()?, &cloud(quads, 4 * q, &format!("{path}.quads"))?, alphas).map_err(pre)
        }
        CheckDoc::PiLipschitz { pairs, bound } => {
            let c = need_coupling()?;
            let pairs = cloud(pairs, 2 * q, &format!("{path}.pairs"))?;
            let mut rep = CheckReport::new(name, 0.0).with_cloud(pairs.descriptor());
            let leaves = c.jump_leaves();
            if leaves.is_empty() {
                rep.detail("note", json!("no jump leaves"));
            }
            let mut lip = Vec::new();
            for (i, j) in leaves.iter().enumerate() {
                let l = check_pi_lipschitz(j, &pairs).map_err(pre)?;
                lip.push(l);
                let lim = bound.unwrap_or(f64::INFINITY);
                rep.observe(&[i as f64], l, lim, || format!("jump leaf {i}: estimated π-Lipschitz constant"));
                if !l.is_finite() {
                    rep.fail(format!("jump leaf {i}: π-Lipschitz constant is not finite"));
                }
            }
            rep.detail("constants", json!(lip));
            Ok(rep)
        }
        CheckDoc::MaxPrinciple { points, bumps } => {
            check_coupling_max_principle(need_coupling()?, &cloud(points, 2 * q, &format!("{path}.points"))?, *bumps, seed).map_err(pre)
        }
        CheckDoc::Lyapunov { cloud: cl, nested_points, bound } => {
            let cl = cloud(cl, q, &format!("{path}.cloud"))?;
            let v = &b.containment.v;
            let on_cloud = lyapunov_bound(&b.op, v, &cl).map_err(pre)?;
            let nested = lyapunov_bound_nested(&b.op, v, *nested_points).map_err(pre)?;
            let c_v = on_cloud.max(nested.value);
            let mut rep = CheckReport::new(name, 0.0).with_cloud(cl.descriptor());
            rep.observe(&[], c_v, bound.unwrap_or(f64::MAX), || "c_V = sup (A + B)V - I".into());
            if !c_v.is_finite() {
                rep.fail("c_V is not finite");
            }
            rep.detail("c_v", json!(c_v));
            rep.detail("c_v_cloud", json!(on_cloud));
            rep.detail("c_v_nested", json!(nested.value));
            rep.detail("plateau", json!(nested.plateau));
            Ok(rep)
        }
        CheckDoc::Penalty { centers, probes } => {
            let cert = certify_family(&b.family, &cloud(centers, q, &format!("{path}.centers"))?, &cloud(probes, q, &format!("{path}.probes"))?, seed).map_err(pre)?;
            let mut rep = cert.report;
            rep.detail("kappa_xi", json!(cert.kappa_xi));
            rep.detail("kappa_xi_certified", json!(cert.kappa_xi_certified));
            Ok(rep)
        }
        CheckDoc::Containment { cloud: cl } => b.containment.certify(&cloud(cl, q, &format!("{path}.cloud"))?).map_err(pre),
        CheckDoc::MeasureFamily { cloud: cl, mass_limit, continuity_tol } => {
            check_measure_family(&b.op, &cloud(cl, q, &format!("{path}.cloud"))?, *mass_limit, *continuity_tol).map_err(pre)
        }
        CheckDoc::ConvolutionLaws { u, v, alphas, domain, probe } => {
            let u = expr_field(u, q, "u", &format!("{path}.u"))?;
            let v = expr_field(v, q, "v", &format!("{path}.v"))?;
            check_convolution_laws(&u, &v, alphas, &cloud(domain, q, &format!("{path}.domain"))?, &cloud(probe, q, &format!("{path}.probe"))?).map_err(pre)
        }
    }
}

pub fn cmd_check(ld: &LoadedDocument, ov: &Overrides) -> Result<Outcome> {
    let t = Instant::now();
    let doc = &ld.doc;
    let b = build(doc)?;
    let seed = ov.seed.unwrap_or(doc.seed);
    let scale = ov.tolerance_scale.unwrap_or(1.0);
    let mut checks = vec![];
    for (i, c) in doc.checks.iter().enumerate() {
        let path = format!("checks[{i}]");
        let mut r = timed(|| run_check(c, &b, seed.wrapping_add(i as u64), &path), c.kind())?;
        r.name = format!("{}#{i}", c.kind());
        checks.push(rescale(r, scale));
    }
    finish("check", ld, seed, scale, checks, BTreeMap::new(), vec![], t)
}

fn finish(command: &str, ld: &LoadedDocument, seed: u64, scale: f64, checks: Vec<CheckReport>, extra: BTreeMap<String, Value>, outputs: Vec<String>, t: Instant) -> Result<Outcome> {
    let report = RunReport {
        command: command.into(),
        document: if ld.doc.name.is_empty() { ld.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default() } else { ld.doc.name.clone() },
        input_sha256: ld.sha256.clone(),
        seed,
        tolerance_scale: scale,
        checks,
        extra,
        outputs,
        runtime_ms: t.elapsed().as_secs_f64() * 1e3,
    };
    let code = if report.passed() { 0 } else { 1 };
    Ok(Outcome { report, code })
}

// ---------------------------------------------------------------------------
// solve

/// The finite problem and named data vectors of a resolvent section.
pub struct ResolventSetup {
    pub problem: FiniteProblem,
    pub data: BTreeMap<String, DVector<f64>>,
}

fn field_on_states(f: &FieldDoc, states: &[Point], q: usize, path: &str) -> Result<DVector<f64>> {
    let n = states.len();
    let v = match f {
        FieldDoc::Constant(c) => DVector::from_element(n, *c),
        FieldDoc::Expr(s) => {
            let e = parse_expr(s, &indexed_names("x", q), path)?;
            DVector::from_iterator(n, states.iter().map(|p| e.eval(p.as_slice())))
        }
        FieldDoc::Values(v) => {
            if v.len() != n {
                return Err(Error::invalid(format!("{path}: table has {} values, the state space has {n}", v.len())));
            }
            DVector::from_vec(v.clone())
        }
        FieldDoc::Table { nodes, values } => {
            if q != 1 {
                return Err(Error::invalid(format!("{path}: tables are 1-D only")));
            }
            let pl = PiecewiseLinear1d::new(nodes.clone(), values.clone()).map_err(|e| Error::invalid(format!("{path}: {e}")))?;
            DVector::from_iterator(n, states.iter().map(|p| pl.eval(p.as_slice()[0])))
        }
        FieldDoc::Solve(_) | FieldDoc::Data(_) => return Err(Error::invalid(format!("{path}: resolvent data cannot refer to other entries"))),
    };
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("{path}: non-finite value")));
    }
    Ok(v)
}

pub fn setup_resolvent(r: &ResolventDoc, b: &Built) -> Result<ResolventSetup> {
    let q = b.q;
    if !(r.lambda > 0.0) || !r.lambda.is_finite() {
        return Err(Error::invalid(format!("resolvent.lambda: must be finite and > 0, got {}", r.lambda)));
    }
    let problem = match (&r.grid, &r.explicit) {
        (Some(g), None) => {
            let grid = SampleCloud::from_descriptor(&CloudDescriptor::Grid { lo: g.lo.clone(), hi: g.hi.clone(), n: g.n.clone() })
                .map_err(|e| Error::invalid(format!("resolvent.grid: {e}")))?;
            let leg = match &r.legendre {
                Some(l) => Some(Legendre { theta: cloud(&l.theta, q, "resolvent.legendre.theta")?, p: cloud(&l.p, q, "resolvent.legendre.p")? }),
                None => None,
            };
            let n = grid.len();
            discretize(&b.op, &grid, r.lambda, DVector::zeros(n), leg.as_ref()).map_err(|e| Error::invalid(format!("resolvent: {e}")))?
        }
        (None, Some(x)) => {
            let gens: Vec<Vec<DMatrix<f64>>> = x
                .generators
                .iter()
                .enumerate()
                .map(|(a, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(bb, m)| {
                            let n = m.len();
                            if m.iter().any(|r| r.len() != n) {
                                return Err(Error::invalid(format!("resolvent.explicit.generators[{a}][{bb}]: not square")));
                            }
                            Ok(DMatrix::from_row_iterator(n, n, m.iter().flatten().copied()))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let n = gens.first().and_then(|r| r.first()).map_or(0, |m| m.nrows());
            let states: Vec<Point> = match &x.states {
                Some(s) => s.iter().map(|p| Point::new(p.clone())).collect::<Result<_>>().map_err(|e| Error::invalid(format!("resolvent.explicit.states: {e}")))?,
                None => (0..n).map(|i| Point::new(vec![i as f64])).collect::<Result<_>>()?,
            };
            let cost = match &x.cost {
                Some(c) => c.iter().map(|r| r.iter().map(|v| DVector::from_vec(v.clone())).collect()).collect(),
                None => gens.iter().map(|r| r.iter().map(|_| DVector::zeros(n)).collect()).collect(),
            };
            FiniteProblem::new(states, gens, cost, r.lambda, DVector::zeros(n)).map_err(|e| Error::invalid(format!("resolvent.explicit: {e}")))?
        }
        _ => return Err(Error::invalid("resolvent: exactly one of `grid` and `explicit` is required")),
    };
    let mut data = BTreeMap::new();
    for (k, f) in &r.h {
        data.insert(k.clone(), field_on_states(f, &problem.states, problem.states[0].dim(), &format!("resolvent.h.{k}"))?);
    }
    Ok(ResolventSetup { problem, data })
}

fn random_pairs(n: usize, count: usize, amplitude: f64, seed: u64, support: impl Fn(usize) -> bool) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, amplitude).expect("amplitude is finite and positive");
    (0..count)
        .map(|_| {
            let h1 = DVector::from_fn(n, |_, _| g.sample(&mut rng));
            let d = DVector::from_fn(n, |i, _| {
                let s = g.sample(&mut rng);
                if support(i) {
                    s
                } else {
                    0.0
                }
            });
            let h2 = &h1 - d;
            (h1, h2)
        })
        .collect()
}

fn write_solution_csv(path: &Path, states: &[Point], cols: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let q = states.first().map_or(0, |p| p.dim());
    let mut header: Vec<String> = indexed_names("x", q);
    header.extend(cols.iter().map(|c| c.0.clone()));
    w.write_record(&header)?;
    for (i, s) in states.iter().enumerate() {
        let mut rec: Vec<String> = s.as_slice().iter().map(|c| format!("{c:.17e}")).collect();
        rec.extend(cols.iter().map(|c| format!("{:.17e}", c.1[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::invalid(format!("cannot create output directory {}: {e}", p.display())))
}

pub fn cmd_solve(ld: &LoadedDocument, ov: &Overrides, out_dir: &Path) -> Result<Outcome> {
    let t = Instant::now();
    let doc = &ld.doc;
    let b = build(doc)?;
    let r = doc.resolvent.as_ref().ok_or_else(|| Error::invalid("resolvent: section required for `solve`"))?;
    let seed = ov.seed.unwrap_or(doc.seed);
    let scale = ov.tolerance_scale.unwrap_or(1.0);
    let st = setup_resolvent(r, &b)?;
    let p = &st.problem;
    let mut checks = vec![];
    let mut cols = vec![];
    let mut extra = BTreeMap::new();
    let mut sols = BTreeMap::new();
    for (k, h) in &st.data {
        let name = format!("residual:{k}");
        let mut out = None;
        let rep = timed(
            || {
                let s = solve_bellman_isaacs(&p.with_h(h.clone())?)?;
                let tol = 1e-9 * (1.0 + h.amax());
                let mut rep = CheckReport::new(name.as_str(), tol);
                rep.observe(&[], s.residual, 0.0, || format!("‖f - λHf - h‖∞ for `{k}` ({})", s.method));
                rep.detail("iterations", json!(s.iterations));
                rep.detail("method", json!(s.method));
                rep.detail("isaacs_gap", json!(s.isaacs_gap));
                rep.detail("order_gap", json!(s.order_gap));
                out = Some(s);
                Ok(rep)
            },
            &name,
        )?;
        checks.push(rescale(rep, scale));
        if let Some(s) = out {
            cols.push((format!("h_{k}"), h.as_slice().to_vec()));
            cols.push((format!("f_{k}"), s.f.clone()));
            sols.insert(k.clone(), json!({"sup": s.f.iter().copied().fold(f64::NEG_INFINITY, f64::max), "inf": s.f.iter().copied().fold(f64::INFINITY, f64::min)}));
        }
    }
    extra.insert("solutions".into(), json!(sols));
    extra.insert("states".into(), json!(p.n()));
    extra.insert("discretization".into(), json!(p.notes));
    if let Some(c) = &r.contraction {
        if !(c.amplitude > 0.0) {
            return Err(Error::invalid("resolvent.contraction.amplitude: must be > 0"));
        }
        let pairs = random_pairs(p.n(), c.pairs, c.amplitude, seed, |_| true);
        let rep = timed(|| verify_contraction(p, &pairs), "contraction")?;
        checks.push(rescale(rep, scale));
    }
    if let Some(s) = &r.strict {
        if !(s.amplitude > 0.0) {
            return Err(Error::invalid("resolvent.strict.amplitude: must be > 0"));
        }
        let v = &b.containment.v;
        let vfun = DVector::from_iterator(p.n(), p.states.iter().map(|x| v.value(x.as_slice()).unwrap_or(f64::INFINITY)));
        let radius = |i: usize| p.states[i].norm();
        let k: Vec<usize> = (0..p.n()).filter(|&i| radius(i) <= s.k_radius).collect();
        if k.is_empty() {
            return Err(Error::invalid("resolvent.strict.k_radius: K contains no state"));
        }
        let pairs = random_pairs(p.n(), s.pairs, s.amplitude, seed.wrapping_add(1), |i| radius(i) <= s.perturb_radius);
        for e in &s.eps {
            if !(*e > 0.0 && *e < 1.0) {
                return Err(Error::invalid(format!("resolvent.strict.eps: {e} must lie in (0, 1)")));
            }
            let mut rep = timed(|| verify_strict_estimate(p, &vfun, &k, *e, &pairs), "strict_estimate")?;
            rep.name = format!("strict_estimate:eps={e}");
            checks.push(rescale(rep, scale));
        }
    }
    ensure_dir(out_dir)?;
    let csv_path = out_dir.join("solution.csv");
    write_solution_csv(&csv_path, &p.states, &cols)?;
    finish("solve", ld, seed, scale, checks, extra, vec!["solution.csv".into()], t)
}

// ---------------------------------------------------------------------------
// trace

fn doubling_field(f: &FieldDoc, b: &Built, res: &mut Option<ResolventSetup>, doc: &ProblemDocument, label: &str, path: &str) -> Result<ScalarField> {
    let q = b.q;
    match f {
        FieldDoc::Constant(c) => Ok(ScalarField::constant(q, *c).with_label(label)),
        FieldDoc::Expr(s) => expr_field(s, q, label, path),
        FieldDoc::Table { nodes, values } => {
            if q != 1 {
                return Err(Error::invalid(format!("{path}: tables are 1-D only")));
            }
            let pl = PiecewiseLinear1d::new(nodes.clone(), values.clone()).map_err(|e| Error::invalid(format!("{path}: {e}")))?;
            Ok(ScalarField::piecewise_linear(label, pl))
        }
        FieldDoc::Values(_) => Err(Error::invalid(format!("{path}: raw values need `table` nodes in the doubling section"))),
        FieldDoc::Solve(name) | FieldDoc::Data(name) => {
            if q != 1 {
                return Err(Error::invalid(format!("{path}: resolvent-backed fields are 1-D only")));
            }
            if res.is_none() {
                let r = doc.resolvent.as_ref().ok_or_else(|| Error::invalid(format!("{path}: refers to `{name}` but there is no resolvent section")))?;
                *res = Some(setup_resolvent(r, b)?);
            }
            let st = res.as_ref().expect("set above");
            let h = st.data.get(name).ok_or_else(|| Error::invalid(format!("{path}: no resolvent.h entry `{name}`")))?;
            let vals = match f {
                FieldDoc::Solve(_) => solve_bellman_isaacs(&st.problem.with_h(h.clone())?)?.f,
                _ => h.as_slice().to_vec(),
            };
            let nodes: Vec<f64> = st.problem.states.iter().map(|p| p.as_slice()[0]).collect();
            let pl = PiecewiseLinear1d::new(nodes, vals).map_err(|e| Error::invalid(format!("{path}: {e}")))?;
            Ok(ScalarField::piecewise_linear(label, pl))
        }
    }
}

pub fn doubling_problem(doc: &ProblemDocument, b: &Built) -> Result<DoublingProblem> {
    let d = doc.doubling.as_ref().ok_or_else(|| Error::invalid("doubling: section required for `trace`"))?;
    let mut res = None;
    let u = doubling_field(&d.u, b, &mut res, doc, "u", "doubling.u")?;
    let v = doubling_field(&d.v, b, &mut res, doc, "v", "doubling.v")?;
    let h1 = doubling_field(&d.h1, b, &mut res, doc, "h1", "doubling.h1")?;
    let h2 = doubling_field(&d.h2, b, &mut res, doc, "h2", "doubling.h2")?;
    let lambda = d
        .lambda
        .or(doc.resolvent.as_ref().map(|r| r.lambda))
        .ok_or_else(|| Error::invalid("doubling.lambda: required without a resolvent section"))?;
    DoublingProblem::new(
        u,
        v,
        b.containment.clone(),
        b.family.clone(),
        d.eps,
        d.phi,
        b.op.clone(),
        b.coupling.clone(),
        lambda,
        h1,
        h2,
        cloud(&d.k, b.q, "doubling.k")?,
        cloud(&d.domain, b.q, "doubling.domain")?,
    )
    .map_err(|e| if e.is_input_error() { Error::invalid(format!("doubling: {e}")) } else { e })
}

pub fn trace_config(d: &DoublingDoc, ov: &Overrides) -> TraceConfig {
    TraceConfig {
        schedule: ov.schedule.clone().or_else(|| d.schedule.clone()).unwrap_or_else(TraceConfig::default_schedule),
        search: SearchConfig { budget: d.search_budget, ..SearchConfig::default() },
        final_alpha_d2: d.final_alpha_d2,
        final_alpha_chain: d.final_alpha_chain,
        test_functions: d.test_functions,
        ..TraceConfig::default()
    }
}

pub fn cmd_trace(ld: &LoadedDocument, ov: &Overrides, out_dir: &Path) -> Result<Outcome> {
    let t = Instant::now();
    let doc = &ld.doc;
    let b = build(doc)?;
    let seed = ov.seed.unwrap_or(doc.seed);
    let scale = ov.tolerance_scale.unwrap_or(1.0);
    let prob = doubling_problem(doc, &b)?;
    let cfg = trace_config(doc.doubling.as_ref().expect("checked by doubling_problem"), ov);
    let mut extra = BTreeMap::new();
    extra.insert("schedule".into(), json!(cfg.schedule));
    let (checks, outputs) = match run_trace(&prob, &cfg) {
        Ok(trace) => {
            ensure_dir(out_dir)?;
            trace.write_csv_file(&out_dir.join("trace.csv"))?;
            let summary = trace.summary();
            std::fs::write(out_dir.join("trace-summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            extra.insert("summary".into(), summary);
            let checks: Vec<CheckReport> = trace.invariants.into_iter().map(|r| rescale(r, scale)).collect();
            (checks, vec!["trace.csv".to_string(), "trace-summary.json".to_string()])
        }
        Err(e) if e.is_input_error() => return Err(e),
        Err(e) => {
            let mut r = CheckReport::new("trace", 0.0);
            r.fail(e.to_string());
            (vec![r], vec![])
        }
    };
    finish("trace", ld, seed, scale, checks, extra, outputs, t)
}

// ---------------------------------------------------------------------------
// merge

/// Concatenate the checks of several saved reports.
pub fn merge_reports(paths: &[PathBuf]) -> Result<(Value, i32)> {
    if paths.is_empty() {
        return Err(Error::invalid("report --merge needs at least one report"));
    }
    let mut inputs = vec![];
    let mut checks = vec![];
    let mut passed = true;
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::invalid(format!("cannot read {}: {e}", p.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: not a report: {e}", p.display())))?;
        let ok = v.get("passed").and_then(Value::as_bool).ok_or_else(|| Error::invalid(format!("{}: missing `passed`", p.display())))?;
        let cs = v.get("checks").and_then(Value::as_array).ok_or_else(|| Error::invalid(format!("{}: missing `checks`", p.display())))?;
        passed &= ok;
        let cmd = v.get("command").cloned().unwrap_or(Value::Null);
        for c in cs {
            let mut c = c.clone();
            if let Some(m) = c.as_object_mut() {
                m.insert("source".into(), json!(p.file_name().map(|s| s.to_string_lossy().into_owned())));
            }
            checks.push(c);
        }
        inputs.push(json!({
            "file": p.file_name().map(|s| s.to_string_lossy().into_owned()),
            "command": cmd,
            "document": v.get("document").cloned().unwrap_or(Value::Null),
            "input_sha256": v.get("input_sha256").cloned().unwrap_or(Value::Null),
            "passed": ok,
        }));
    }
    let out = json!({
        "tool": "hjcouple",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "merge",
        "passed": passed,
        "inputs": inputs,
        "checks": checks,
    });
    Ok((out, if passed { 0 } else { 1 }))
}

/// Parse a comma-separated α-schedule.
pub fn parse_schedule(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::invalid(format!("--schedule: `{t}`: {e}"))))
        .collect()
}

/// Write `report` as pretty JSON to `dir/<command>-report.json`.
pub fn write_report(dir: &Path, command: &str, v: &Value) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let p = dir.join(format!("{command}-report.json"));
    std::fs::write(&p, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(s: &str) -> Result<ProblemDocument> {
        parse_document(s.as_bytes())
    }

    #[test]
    fn minimal_document_parses() {
        let d = doc(r#"{"version": 1, "dim": 1, "operator": {"kind": "zero"}}"#).unwrap();
        assert!(d.checks.is_empty());
        assert!(build(&d).is_ok());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = doc(r#"{"version": 1, "dim": 1, "operator": {"kind": "zero"}, "extra": 3}"#).unwrap_err();
        assert!(e.to_string().contains("extra"), "{e}");
    }

    #[test]
    fn unseeded_ball_is_rejected() {
        let e = doc(r#"{"version": 1, "dim": 1, "operator": {"kind": "zero"},
            "checks": [{"kind": "containment", "cloud": {"kind": "ball", "center": [0], "radius": 1, "count": 3}}]}"#)
        .unwrap_err();
        assert!(e.to_string().contains("$.checks[0].cloud"), "{e}");
    }

    #[test]
    fn expression_errors_carry_the_field_path() {
        let d = doc(r#"{"version": 1, "dim": 1, "operator": {"kind": "sum", "terms": [{"kind": "zero"}, {"kind": "drift", "drift": ["-x1 +"]}]}}"#).unwrap();
        let e = build(&d).err().unwrap();
        assert!(e.to_string().contains("operator.terms[1].drift[0]"), "{e}");
    }

    #[test]
    fn rescale_relaxes_only_observed_violations() {
        let mut r = CheckReport::new("t", 1e-9);
        r.observe(&[0.0], 1.5e-9, 0.0, || String::new());
        assert!(!r.passed);
        assert!(rescale(r.clone(), 2.0).passed);
        r.fail("structural");
        assert!(!rescale(r, 10.0).passed);
    }

    #[test]
    fn schedules_parse() {
        assert_eq!(parse_schedule("2, 4,8").unwrap(), vec![2.0, 4.0, 8.0]);
        assert!(parse_schedule("2,x").is_err());
    }
}
