//! Drift, diffusion and jump operators, Isaacs nodes, and the structural
//! checks on them (semi-monotonicity, Isaacs gap, Lyapunov bound, measure
//! regularity).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::funcspace::{distance_sq, dot, norm, Point, SampleCloud, ScalarField};
use crate::report::{certify_modulus, CheckReport, ModulusSample, Witness};

pub type DriftFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type HamiltonianFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SigmaFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(&[f64]) -> DiscreteMeasure + Send + Sync>;
pub type CostFn = Arc<dyn Fn(&[f64], usize, usize) -> f64 + Send + Sync>;

/// First-order part `B f(x) = <b(x), ∇f(x)> + H(∇f(x))` with `H` convex.
#[derive(Clone)]
pub struct DriftConvexOp {
    dim: usize,
    drift: DriftFn,
    hamiltonian: Option<HamiltonianFn>,
    pub one_sided_lipschitz: Option<f64>,
    pub growth: Option<f64>,
}

impl DriftConvexOp {
    pub fn new(dim: usize, drift: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self {
            dim,
            drift: Arc::new(drift),
            hamiltonian: None,
            one_sided_lipschitz: None,
            growth: None,
        }
    }

    pub fn with_hamiltonian(mut self, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.hamiltonian = Some(Arc::new(h));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift_at(&self, x: &[f64]) -> Result<DVector<f64>> {
        let b = (self.drift)(x);
        check_dim(self.dim, b.len())?;
        if b.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("drift at {x:?}")));
        }
        Ok(b)
    }

    pub fn has_hamiltonian(&self) -> bool {
        self.hamiltonian.is_some()
    }

    pub fn hamiltonian_at(&self, p: &[f64]) -> Result<f64> {
        let v = self.hamiltonian.as_ref().map_or(0.0, |h| h(p));
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("hamiltonian at p = {p:?}")));
        }
        Ok(v)
    }

    /// Driver `<b(x), p> + H(p)`.
    pub fn driver(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(dot(self.drift_at(x)?.as_slice(), p) + self.hamiltonian_at(p)?)
    }
}

/// Second-order part `½ Tr(Σ Σᵀ(x) D²f(x))`.
#[derive(Clone)]
pub struct DiffusionOp {
    dim: usize,
    sigma: SigmaFn,
    pub lipschitz: Option<f64>,
    pub growth: Option<f64>,
}

impl DiffusionOp {
    pub fn new(dim: usize, sigma: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self {
            dim,
            sigma: Arc::new(sigma),
            lipschitz: None,
            growth: None,
        }
    }

    /// Constant volatility matrix.
    pub fn constant(sigma: DMatrix<f64>) -> Self {
        let q = sigma.nrows();
        Self::new(q, move |_| sigma.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let s = (self.sigma)(x);
        check_dim(self.dim, s.nrows())?;
        if s.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("volatility at {x:?}")));
        }
        Ok(s)
    }
}

/// Cut profile `χ(z) = l(|z|)` separating small and large jumps.
#[derive(Clone)]
pub enum CutProfile {
    /// Equal to 1 on `[0, inner]`, 0 on `[1, ∞)`, cubic smoothstep between.
    Smoothstep { inner: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Default for CutProfile {
    fn default() -> Self {
        CutProfile::Smoothstep { inner: 0.5 }
    }
}

impl fmt::Debug for CutProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CutProfile::Smoothstep { inner } => write!(f, "Smoothstep({inner})"),
            CutProfile::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl CutProfile {
    pub fn profile(&self, r: f64) -> f64 {
        match self {
            CutProfile::Smoothstep { inner } => {
                if r <= *inner {
                    1.0
                } else if r >= 1.0 {
                    0.0
                } else {
                    let t = (r - inner) / (1.0 - inner);
                    1.0 - t * t * (3.0 - 2.0 * t)
                }
            }
            CutProfile::Custom(l) => l(r),
        }
    }

    pub fn chi(&self, z: &[f64]) -> f64 {
        self.profile(norm(z))
    }

    /// Jump weight `W(z) = χ(z)|z|² + (1 - χ(z)) log(1 + |z|²)`.
    pub fn weight(&self, z: &[f64]) -> f64 {
        let r2 = dot(z, z);
        let c = self.chi(z);
        c * r2 + (1.0 - c) * r2.ln_1p()
    }
}

/// Finite nonnegative measure on `R^q \ {0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(Point, f64)>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let mut out = Vec::with_capacity(atoms.len());
        for (z, w) in atoms {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("atom weight {w} must be finite and >= 0")));
            }
            let p = Point::new(z)?;
            if p.iter().all(|c| *c == 0.0) {
                return Err(Error::invalid("jump measures must not charge the origin"));
            }
            if w > 0.0 {
                out.push((p, w));
            }
        }
        Ok(Self { atoms: out })
    }

    pub fn empty() -> Self {
        Self { atoms: vec![] }
    }

    pub fn atoms(&self) -> &[(Point, f64)] {
        &self.atoms
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(z, w)| w * g(z)).sum()
    }
}

/// Jump part `Σ w [f(x+z) - f(x) - χ(z)<z, ∇f(x)>]` over the atoms of `μ_x`.
#[derive(Clone)]
pub struct JumpOp {
    dim: usize,
    kernel: KernelFn,
    pub cut: CutProfile,
}

impl JumpOp {
    pub fn new(dim: usize, kernel: impl Fn(&[f64]) -> DiscreteMeasure + Send + Sync + 'static) -> Self {
        Self {
            dim,
            kernel: Arc::new(kernel),
            cut: CutProfile::default(),
        }
    }

    /// State-independent measure.
    pub fn constant(dim: usize, mu: DiscreteMeasure) -> Self {
        Self::new(dim, move |_| mu.clone())
    }

    pub fn with_cut(mut self, cut: CutProfile) -> Self {
        self.cut = cut;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn measure(&self, x: &[f64]) -> Result<DiscreteMeasure> {
        let m = (self.kernel)(x);
        for (z, _) in m.atoms() {
            check_dim(self.dim, z.dim())?;
        }
        Ok(m)
    }
}

/// Cost `I(x, θ₁, θ₂)` of an Isaacs node; `+∞` marks an absent control.
#[derive(Clone)]
pub struct CostFunctional {
    cost: CostFn,
    pub modulus: Option<f64>,
}

impl CostFunctional {
    pub fn new(cost: impl Fn(&[f64], usize, usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            cost: Arc::new(cost),
            modulus: None,
        }
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _| 0.0)
    }

    pub fn at(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        let c = (self.cost)(x, i, j);
        if c.is_nan() || c == f64::NEG_INFINITY {
            return Err(Error::NonFinite(format!("cost at {x:?}, controls ({i}, {j})")));
        }
        Ok(c)
    }
}

/// `sup_{θ₁} inf_{θ₂} { A_θ f + B_θ f - I(·, θ) }` over finite control sets.
#[derive(Clone)]
pub struct IsaacsNode {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    components: Vec<Vec<OperatorSpec>>,
    pub cost: CostFunctional,
}

impl IsaacsNode {
    pub fn new(theta1: Vec<f64>, theta2: Vec<f64>, components: Vec<Vec<OperatorSpec>>, cost: CostFunctional) -> Result<Self> {
        if theta1.is_empty() || theta2.is_empty() {
            return Err(Error::invalid("control sets must be non-empty"));
        }
        if components.len() != theta1.len() || components.iter().any(|r| r.len() != theta2.len()) {
            return Err(Error::invalid("Isaacs components must form a |Θ₁| × |Θ₂| table"));
        }
        let dim = components[0][0].dim();
        for c in components.iter().flatten() {
            check_dim(dim, c.dim())?;
            if c.has_isaacs() {
                return Err(Error::invalid("Isaacs nodes cannot be nested"));
            }
        }
        Ok(Self {
            theta1,
            theta2,
            components,
            cost,
        })
    }

    pub fn component(&self, i: usize, j: usize) -> &OperatorSpec {
        &self.components[i][j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.theta1.len(), self.theta2.len())
    }
}

/// Operator tree.
#[derive(Clone)]
pub enum OperatorSpec {
    Zero { dim: usize },
    Drift(DriftConvexOp),
    Diffusion(DiffusionOp),
    Jump(JumpOp),
    Sum(Vec<OperatorSpec>),
    Isaacs(Box<IsaacsNode>),
}

impl OperatorSpec {
    pub fn sum(terms: Vec<OperatorSpec>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| Error::invalid("empty operator sum"))?;
        let dim = first.dim();
        for t in &terms {
            check_dim(dim, t.dim())?;
            if matches!(t, OperatorSpec::Isaacs(_)) {
                return Err(Error::invalid("Isaacs nodes are only allowed at the root"));
            }
        }
        Ok(OperatorSpec::Sum(terms))
    }

    pub fn dim(&self) -> usize {
        match self {
            OperatorSpec::Zero { dim } => *dim,
            OperatorSpec::Drift(d) => d.dim(),
            OperatorSpec::Diffusion(d) => d.dim(),
            OperatorSpec::Jump(j) => j.dim(),
            OperatorSpec::Sum(t) => t[0].dim(),
            OperatorSpec::Isaacs(n) => n.components[0][0].dim(),
        }
    }

    fn has_isaacs(&self) -> bool {
        match self {
            OperatorSpec::Isaacs(_) => true,
            OperatorSpec::Sum(t) => t.iter().any(|t| t.has_isaacs()),
            _ => false,
        }
    }

    /// Control components `(i, j, A_ij + B_ij)`; a single `(0, 0, self)` without an Isaacs root.
    pub fn components(&self) -> Vec<(usize, usize, &OperatorSpec)> {
        match self {
            OperatorSpec::Isaacs(n) => {
                let (n1, n2) = n.shape();
                (0..n1).flat_map(|i| (0..n2).map(move |j| (i, j))).map(|(i, j)| (i, j, n.component(i, j))).collect()
            }
            _ => vec![(0, 0, self)],
        }
    }

    /// Cost of component `(i, j)` at `x` (zero without an Isaacs root).
    pub fn cost_at(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        match self {
            OperatorSpec::Isaacs(n) => n.cost.at(x, i, j),
            _ => Ok(0.0),
        }
    }

    /// Leaves of a component that carry no Isaacs node.
    pub fn leaves(&self) -> Vec<&OperatorSpec> {
        match self {
            OperatorSpec::Sum(t) => t.iter().flat_map(|t| t.leaves()).collect(),
            OperatorSpec::Zero { .. } => vec![],
            other => vec![other],
        }
    }

    /// True if evaluating needs a Hessian.
    pub fn needs_hessian(&self) -> bool {
        self.all_leaves().iter().any(|l| matches!(l, OperatorSpec::Diffusion(_)))
    }

    fn all_leaves(&self) -> Vec<&OperatorSpec> {
        self.components().into_iter().flat_map(|(_, _, c)| c.leaves()).collect()
    }
}

impl fmt::Debug for DriftConvexOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftConvexOp").field("dim", &self.dim).field("hamiltonian", &self.hamiltonian.is_some()).finish()
    }
}

impl fmt::Debug for DiffusionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionOp").field("dim", &self.dim).finish()
    }
}

impl fmt::Debug for JumpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpOp").field("dim", &self.dim).field("cut", &self.cut).finish()
    }
}

impl fmt::Debug for IsaacsNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IsaacsNode").field("shape", &self.shape()).finish()
    }
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorSpec::Zero { dim } => write!(f, "Zero({dim})"),
            OperatorSpec::Drift(d) => d.fmt(f),
            OperatorSpec::Diffusion(d) => d.fmt(f),
            OperatorSpec::Jump(j) => j.fmt(f),
            OperatorSpec::Sum(ts) => f.debug_list().entries(ts).finish(),
            OperatorSpec::Isaacs(n) => n.fmt(f),
        }
    }
}

/// Evaluate `H f(x)` for the operator tree.
pub fn eval(op: &OperatorSpec, f: &ScalarField, x: &[f64]) -> Result<f64> {
    check_dim(op.dim(), x.len())?;
    check_dim(op.dim(), f.dim())?;
    match op {
        OperatorSpec::Isaacs(n) => {
            let m = payoff_matrix(n, f, x)?;
            sup_inf(&m).ok_or_else(|| Error::precondition(format!("every control has infinite cost at {x:?}")))
        }
        _ => eval_component(op, f, x),
    }
}

fn eval_component(op: &OperatorSpec, f: &ScalarField, x: &[f64]) -> Result<f64> {
    Ok(linear_part(op, f, x)? + first_order_part(op, f, x)?)
}

/// Diffusion and jump leaves of a component evaluated on `f`.
pub fn linear_part(op: &OperatorSpec, f: &ScalarField, x: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for leaf in op.leaves() {
        total += match leaf {
            OperatorSpec::Diffusion(d) => eval_diffusion(d, f, x)?,
            OperatorSpec::Jump(j) => eval_jump(j, f, x)?,
            OperatorSpec::Drift(_) | OperatorSpec::Zero { .. } => 0.0,
            OperatorSpec::Sum(_) | OperatorSpec::Isaacs(_) => {
                return Err(Error::invalid("linear part requested on an Isaacs node"))
            }
        };
    }
    Ok(total)
}

fn first_order_part(op: &OperatorSpec, f: &ScalarField, x: &[f64]) -> Result<f64> {
    let drifts: Vec<&DriftConvexOp> = op
        .leaves()
        .into_iter()
        .filter_map(|l| if let OperatorSpec::Drift(d) = l { Some(d) } else { None })
        .collect();
    if drifts.is_empty() {
        return Ok(0.0);
    }
    let g = f.gradient(x)?;
    drifts.iter().try_fold(0.0, |acc, d| Ok(acc + d.driver(x, g.as_slice())?))
}

/// Sum of drift drivers `Σ <b(x), p> + H(p)` of a component.
pub fn driver(op: &OperatorSpec, x: &[f64], p: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for leaf in op.leaves() {
        if let OperatorSpec::Drift(d) = leaf {
            total += d.driver(x, p)?;
        }
    }
    Ok(total)
}

fn eval_diffusion(d: &DiffusionOp, f: &ScalarField, x: &[f64]) -> Result<f64> {
    let s = d.sigma_at(x)?;
    let h = f.hessian(x)?;
    let a = &s * s.transpose();
    Ok(0.5 * a.component_mul(&h).sum())
}

fn eval_jump(j: &JumpOp, f: &ScalarField, x: &[f64]) -> Result<f64> {
    let mu = j.measure(x)?;
    let fx = f.value(x)?;
    let needs_grad = mu.atoms().iter().any(|(z, _)| j.cut.chi(z) > 0.0);
    let grad = if needs_grad { Some(f.gradient(x)?) } else { None };
    let mut total = 0.0;
    let mut y = x.to_vec();
    for (z, w) in mu.atoms() {
        for i in 0..x.len() {
            y[i] = x[i] + z[i];
        }
        let mut inc = f.value(&y)? - fx;
        let c = j.cut.chi(z);
        if c > 0.0 {
            inc -= c * dot(z, grad.as_ref().unwrap().as_slice());
        }
        total += w * inc;
    }
    Ok(total)
}

/// Payoff table `A_ij f(x) + B_ij f(x) - I(x, i, j)`; `None` where the cost is `+∞`.
pub fn payoff_matrix(n: &IsaacsNode, f: &ScalarField, x: &[f64]) -> Result<Vec<Vec<Option<f64>>>> {
    let (n1, n2) = n.shape();
    let mut m = vec![vec![None; n2]; n1];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let c = n.cost.at(x, i, j)?;
            if c.is_finite() {
                *cell = Some(eval_component(n.component(i, j), f, x)? - c);
            }
        }
    }
    Ok(m)
}

/// `max_i min_j`, skipping absent entries and entirely absent rows; `None` if every entry is absent.
pub fn sup_inf(m: &[Vec<Option<f64>>]) -> Option<f64> {
    let mut best = f64::NEG_INFINITY;
    for row in m {
        let r = row.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        if r < f64::INFINITY {
            best = best.max(r);
        }
    }
    (best > f64::NEG_INFINITY).then_some(best)
}

/// `min_j max_i`, skipping absent entries and entirely absent columns.
pub fn inf_sup(m: &[Vec<Option<f64>>]) -> Option<f64> {
    let n2 = m.first().map_or(0, |r| r.len());
    let mut best = f64::INFINITY;
    for j in 0..n2 {
        let c = m.iter().filter_map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        if c > f64::NEG_INFINITY {
            best = best.min(c);
        }
    }
    (best < f64::INFINITY).then_some(best)
}

/// Semi-monotonicity of the drivers on pairs `(x, x')` from a cloud in `R^{2q}`.
///
/// Samples `B(x, α(x-x')) - B(x', α(x-x'))` against `α d² + d` and certifies
/// a modulus with [`certify_modulus`]. Isaacs roots are checked per component,
/// and their costs must admit a modulus in `d(x, x')`.
pub fn check_semi_monotone(op: &OperatorSpec, pairs: &SampleCloud, alphas: &[f64]) -> Result<CheckReport> {
    let q = op.dim();
    check_dim(2 * q, pairs.dim())?;
    if alphas.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
        return Err(Error::invalid("semi-monotonicity needs finite α > 1"));
    }
    let mut rep = CheckReport::new("semi_monotone", 0.0).with_cloud(pairs.descriptor());
    let mut samples = vec![];
    let mut cost_samples = vec![];
    for pt in pairs.points() {
        let (x, xp) = pt.split_at(q);
        let d2 = distance_sq(x, xp);
        if d2 == 0.0 {
            continue;
        }
        let d = d2.sqrt();
        for (i, j, comp) in op.components() {
            for &a in alphas {
                let p: Vec<f64> = x.iter().zip(xp).map(|(u, v)| a * (u - v)).collect();
                let lhs = driver(comp, x, &p)? - driver(comp, xp, &p)?;
                samples.push(ModulusSample {
                    abscissa: a * d2 + d,
                    lhs,
                    distance: d,
                    scale: a * d2,
                    point: pt.to_vec(),
                    alpha: a,
                });
            }
            let (c, cp) = (op.cost_at(x, i, j)?, op.cost_at(xp, i, j)?);
            if c.is_finite() && cp.is_finite() {
                cost_samples.push(ModulusSample {
                    abscissa: d,
                    lhs: (c - cp).abs(),
                    distance: d,
                    scale: 0.0,
                    point: pt.to_vec(),
                    alpha: 0.0,
                });
            }
        }
    }
    rep.samples = samples.len();
    let fit = certify_modulus(&samples);
    if let Some(w) = steepest(&samples) {
        rep.max_violation = w.lhs - w.rhs;
        rep.witness = Some(w);
    }
    rep.detail("envelope", serde_json::to_value(&fit)?);
    if !fit.passed {
        rep.fail(format!(
            "no modulus: envelope at 0 = {:.3e}, coalescence exponent = {:.3}",
            fit.omega_at_zero, fit.coalescence_exponent
        ));
    }
    if matches!(op, OperatorSpec::Isaacs(_)) {
        let cfit = certify_modulus(&cost_samples);
        rep.detail("cost_envelope", serde_json::to_value(&cfit)?);
        if cfit.omega_at_zero > 1e-6 {
            rep.fail(format!("cost has no modulus: envelope at 0 = {:.3e}", cfit.omega_at_zero));
        }
    }
    Ok(rep)
}

fn steepest(samples: &[ModulusSample]) -> Option<Witness> {
    samples
        .iter()
        .filter(|s| s.abscissa > 0.0)
        .max_by(|a, b| (a.lhs / a.abscissa).total_cmp(&(b.lhs / b.abscissa)))
        .map(|s| Witness {
            point: s.point.clone(),
            lhs: s.lhs,
            rhs: s.abscissa,
            note: format!("alpha = {}", s.alpha),
        })
}

/// Isaacs gap `inf sup - sup inf` of `f` at each cloud point.
pub fn check_isaacs(op: &OperatorSpec, f: &ScalarField, cloud: &SampleCloud, tolerance: f64) -> Result<CheckReport> {
    check_dim(op.dim(), cloud.dim())?;
    let mut rep = CheckReport::new("isaacs", tolerance).with_cloud(cloud.descriptor());
    let OperatorSpec::Isaacs(n) = op else {
        for p in cloud.points() {
            rep.observe(p, 0.0, 0.0, || "no controls".into());
        }
        return Ok(rep);
    };
    for p in cloud.points() {
        let m = payoff_matrix(n, f, p)?;
        let si = sup_inf(&m).ok_or_else(|| Error::precondition(format!("all controls absent at {p:?}")))?;
        let is = inf_sup(&m).ok_or_else(|| Error::precondition(format!("all controls absent at {p:?}")))?;
        rep.observe(p, is - si, 0.0, || format!("sup-inf = {si}, inf-sup = {is}"));
    }
    Ok(rep)
}

/// `sup_x sup_θ { A_θ V + B_θ V - I(x, θ) }` over the cloud.
pub fn lyapunov_bound(op: &OperatorSpec, v: &ScalarField, cloud: &SampleCloud) -> Result<f64> {
    check_dim(op.dim(), cloud.dim())?;
    let vals: Vec<f64> = {
        use rayon::prelude::*;
        cloud
            .points()
            .par_iter()
            .map(|p| lyapunov_at(op, v, p))
            .collect::<Result<Vec<f64>>>()?
    };
    Ok(vals.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn lyapunov_at(op: &OperatorSpec, v: &ScalarField, x: &[f64]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for (i, j, comp) in op.components() {
        let c = op.cost_at(x, i, j)?;
        if c.is_finite() {
            best = best.max(eval_component(comp, v, x)? - c);
        }
    }
    Ok(best)
}

/// Lyapunov constant estimated on nested clouds of radius `2^k`, `k = 0..=10`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub plateau: bool,
    pub history: Vec<(f64, f64)>,
}

pub fn lyapunov_bound_nested(op: &OperatorSpec, v: &ScalarField, points: usize) -> Result<LyapunovEstimate> {
    let q = op.dim();
    let per_axis = (((points as f64).powf(1.0 / q as f64)) as usize).max(3) | 1;
    let mut running = f64::NEG_INFINITY;
    let mut history = vec![];
    for k in 0..=10 {
        let r = 2f64.powi(k);
        let cloud = SampleCloud::grid(&vec![-r; q], &vec![r; q], &vec![per_axis; q])?;
        running = running.max(lyapunov_bound(op, v, &cloud)?);
        history.push((r, running));
    }
    let n = history.len();
    let (a, b) = (history[n - 2].1, history[n - 1].1);
    let plateau = (b - a).abs() <= 1e-6 * b.abs().max(1e-300) || (a == b);
    Ok(LyapunovEstimate {
        value: running,
        plateau,
        history,
    })
}

/// Test battery `g ∈ C_W` used for continuity of `x ↦ ∫ g dμ_x`.
fn cw_battery(cut: &CutProfile, z: &[f64]) -> [f64; 3] {
    let w = cut.weight(z);
    let s: f64 = z.iter().sum();
    [w, w * s.cos(), w * (0.5 * s).sin()]
}

/// Finiteness, uniform boundedness and continuity of the jump measures on a cloud.
pub fn check_measure_family(op: &OperatorSpec, cloud: &SampleCloud, mass_limit: f64, continuity_tol: f64) -> Result<CheckReport> {
    check_dim(op.dim(), cloud.dim())?;
    let mut rep = CheckReport::new("measure_family", 0.0).with_cloud(cloud.descriptor());
    let jumps: Vec<&JumpOp> = op
        .components()
        .into_iter()
        .flat_map(|(_, _, c)| c.leaves())
        .filter_map(|l| if let OperatorSpec::Jump(j) = l { Some(j) } else { None })
        .collect();
    let pts = cloud.points();
    let mut worst_log = f64::NEG_INFINITY;
    for (k, j) in jumps.iter().enumerate() {
        let mut ints = Vec::with_capacity(pts.len());
        for p in pts {
            let mu = j.measure(p)?;
            let m = mu.integrate(|z| j.cut.weight(z));
            rep.observe(p, if m.is_finite() { m } else { f64::INFINITY }, mass_limit, || format!("∫W dμ_x, jump leaf {k}"));
            let b: Vec<f64> = (0..3).map(|i| mu.integrate(|z| cw_battery(&j.cut, z)[i])).collect();
            ints.push(b);
            let x2 = 1.0 + 0.5 * dot(p, p);
            let li = mu.integrate(|z| ((0.5 * dot(z, z) + dot(p, z)) / x2).ln_1p());
            worst_log = worst_log.max(li);
        }
        for a in 0..pts.len() {
            let Some(b) = nearest(pts, a) else { continue };
            for i in 0..3 {
                let (va, vb) = (ints[a][i], ints[b][i]);
                if !(va.is_finite() && vb.is_finite()) {
                    continue;
                }
                let jump = (va - vb).abs();
                if jump > continuity_tol * (1.0 + va.abs().max(vb.abs())) {
                    rep.fail(format!(
                        "∫g dμ_x jumps by {jump:.3e} between neighbours {:?} and {:?}",
                        pts[a].as_slice(),
                        pts[b].as_slice()
                    ));
                }
            }
        }
    }
    rep.detail("lyapunov_log_integral", json!(finite_or_null(worst_log)));
    rep.detail("jump_leaves", json!(jumps.len()));
    Ok(rep)
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn nearest(pts: &[Point], a: usize) -> Option<usize> {
    (0..pts.len())
        .filter(|&b| b != a)
        .min_by(|&b, &c| distance_sq(&pts[a], &pts[b]).total_cmp(&distance_sq(&pts[a], &pts[c])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drift(b: impl Fn(f64) -> f64 + Send + Sync + 'static) -> OperatorSpec {
        OperatorSpec::Drift(DriftConvexOp::new(1, move |x| DVector::from_element(1, b(x[0]))))
    }

    #[test]
    fn cut_profile_shape() {
        let c = CutProfile::default();
        assert_eq!(c.profile(0.0), 1.0);
        assert_eq!(c.profile(0.5), 1.0);
        assert_eq!(c.profile(1.0), 0.0);
        assert!((c.profile(0.75) - 0.5).abs() < 1e-15);
        assert!((c.weight(&[1.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn drift_eval_is_inner_product_plus_hamiltonian() {
        let op = OperatorSpec::Drift(
            DriftConvexOp::new(1, |x| DVector::from_element(1, -x[0])).with_hamiltonian(|p| 0.5 * p[0] * p[0]),
        );
        let f = ScalarField::quadratic(&[0.0], 1.0);
        assert_eq!(eval(&op, &f, &[2.0]).unwrap(), -4.0 + 2.0);
    }

    #[test]
    fn diffusion_eval_without_hessian_is_an_error() {
        let op = OperatorSpec::Diffusion(DiffusionOp::constant(DMatrix::identity(1, 1)));
        let f = ScalarField::new(1, "nohess", |x| x[0]);
        assert!(matches!(eval(&op, &f, &[0.0]), Err(Error::MissingDerivative { .. })));
    }

    #[test]
    fn jump_with_cut_zero_needs_no_gradient() {
        let mu = DiscreteMeasure::new(vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)]).unwrap();
        let op = OperatorSpec::Jump(JumpOp::constant(1, mu));
        let f = ScalarField::new(1, "sq", |x| x[0] * x[0]);
        assert_eq!(eval(&op, &f, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn measure_rejects_origin_and_negative_weights() {
        assert!(DiscreteMeasure::new(vec![(vec![0.0], 1.0)]).is_err());
        assert!(DiscreteMeasure::new(vec![(vec![1.0], -1.0)]).is_err());
    }

    #[test]
    fn semi_monotone_linear_and_square_root() {
        let pairs = SampleCloud::grid(&[-1.0, -1.0], &[1.0, 1.0], &[41, 41]).unwrap();
        let alphas = [2.0, 16.0, 256.0, 4096.0];
        assert!(check_semi_monotone(&drift(|x| x), &pairs, &alphas).unwrap().passed);
        assert!(check_semi_monotone(&drift(|x| -x), &pairs, &alphas).unwrap().passed);
        let sq = drift(|x: f64| x.signum() * x.abs().sqrt());
        assert!(!check_semi_monotone(&sq, &pairs, &alphas).unwrap().passed);
    }

    #[test]
    fn isaacs_matching_pennies_has_gap_one() {
        let z = OperatorSpec::Zero { dim: 1 };
        let comps = vec![vec![z.clone(), z.clone()], vec![z.clone(), z]];
        let cost = CostFunctional::new(|_, i, j| if i == j { -1.0 } else { 0.0 });
        let op = OperatorSpec::Isaacs(Box::new(IsaacsNode::new(vec![0.0, 1.0], vec![0.0, 1.0], comps, cost).unwrap()));
        let f = ScalarField::constant(1, 0.0);
        let cloud = SampleCloud::grid(&[0.0], &[1.0], &[3]).unwrap();
        let rep = check_isaacs(&op, &f, &cloud, 1e-12).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.max_violation, 1.0);
    }

    #[test]
    fn infinite_cost_controls_are_absent() {
        let m = vec![vec![Some(1.0), None], vec![Some(0.0), Some(3.0)]];
        assert_eq!(sup_inf(&m), Some(1.0));
        assert_eq!(inf_sup(&m), Some(1.0));
        assert_eq!(sup_inf(&[vec![None, None]]), None);
    }

    #[test]
    fn measure_family_flags_singular_weights() {
        let op = OperatorSpec::Jump(JumpOp::new(1, |x| {
            DiscreteMeasure::new(vec![(vec![1.0], 1.0 / x[0].abs())]).unwrap_or_else(|_| DiscreteMeasure::empty())
        }));
        let cloud = SampleCloud::grid(&[-1.0], &[1.0], &[21]).unwrap();
        assert!(!check_measure_family(&op, &cloud, 1e6, 0.5).unwrap().passed);
        let ok = OperatorSpec::Jump(JumpOp::constant(1, DiscreteMeasure::new(vec![(vec![1.0], 1.0)]).unwrap()));
        assert!(check_measure_family(&ok, &cloud, 1e6, 0.5).unwrap().passed);
    }
}
