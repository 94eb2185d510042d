//! Couplings `Â` of the linear part of an operator on `E × E`: synchronous
//! diffusion and coupled jump measures, with the controlled-growth checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::funcspace::{distance_sq, dot, norm, smooth_battery, Point, SampleCloud, ScalarField};
use crate::operators::{linear_part, CutProfile, DiffusionOp, DiscreteMeasure, JumpOp, OperatorSpec};
use crate::report::{certify_modulus, CheckReport, ModulusSample};

/// Extended coupling of two jump measures: atoms `((z1, z2), w)`, where a zero
/// component means that copy idles.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledMeasure {
    atoms: Vec<(Point, Point, f64)>,
}

impl CoupledMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, Vec<f64>, f64)>) -> Result<Self> {
        let mut out = Vec::with_capacity(atoms.len());
        for (z1, z2, w) in atoms {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("coupled atom weight {w} must be finite and >= 0")));
            }
            check_dim(z1.len(), z2.len())?;
            let (z1, z2) = (Point::new(z1)?, Point::new(z2)?);
            if w > 0.0 && is_zero(&z1) && is_zero(&z2) {
                return Err(Error::invalid("coupled atom at (0, 0) carries no jump"));
            }
            if w > 0.0 {
                out.push((z1, z2, w));
            }
        }
        Ok(Self { atoms: out })
    }

    pub fn atoms(&self) -> &[(Point, Point, f64)] {
        &self.atoms
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.2).sum()
    }

    pub fn integrate(&self, g: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(a, b, w)| w * g(a, b)).sum()
    }

    /// Pair the `i`-th atoms of `mu` and `nu` with weight `min(w, w')`; the
    /// surplus of either side is coupled to a zero jump on the other.
    pub fn synchronous(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Self {
        let (a, b) = (mu.atoms(), nu.atoms());
        let q = a.first().or(b.first()).map_or(0, |z| z.0.dim());
        let zero = Point::origin(q);
        let mut atoms = vec![];
        for i in 0..a.len().max(b.len()) {
            match (a.get(i), b.get(i)) {
                (Some((z1, w1)), Some((z2, w2))) => {
                    let m = w1.min(*w2);
                    atoms.push((z1.clone(), z2.clone(), m));
                    if w1 > w2 {
                        atoms.push((z1.clone(), zero.clone(), w1 - m));
                    } else if w2 > w1 {
                        atoms.push((zero.clone(), z2.clone(), w2 - m));
                    }
                }
                (Some((z1, w1)), None) => atoms.push((z1.clone(), zero.clone(), *w1)),
                (None, Some((z2, w2))) => atoms.push((zero.clone(), z2.clone(), *w2)),
                (None, None) => {}
            }
        }
        atoms.retain(|a| a.2 > 0.0);
        Self { atoms }
    }

    /// Independent coupling `μ ⊗ ν`. Its marginals are `ν(E) μ` and `μ(E) ν`.
    pub fn product(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Self {
        let mut atoms = vec![];
        for (z1, w1) in mu.atoms() {
            for (z2, w2) in nu.atoms() {
                atoms.push((z1.clone(), z2.clone(), w1 * w2));
            }
        }
        Self { atoms }
    }

    /// Largest marginal mismatch on the atom supports, away from the origin.
    pub fn marginal_error(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let side = |pick: fn(&(Point, Point, f64)) -> &Point, m: &DiscreteMeasure| {
            let mut acc: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
            for a in &self.atoms {
                let z = pick(a);
                if !is_zero(z) {
                    *acc.entry(key(z)).or_insert(0.0) += a.2;
                }
            }
            for (z, w) in m.atoms() {
                *acc.entry(key(z)).or_insert(0.0) -= w;
            }
            acc.values().fold(0.0f64, |e, v| e.max(v.abs()))
        };
        side(|a| &a.0, mu).max(side(|a| &a.1, nu))
    }
}

fn is_zero(z: &[f64]) -> bool {
    z.iter().all(|c| *c == 0.0)
}

fn key(z: &[f64]) -> Vec<u64> {
    z.iter().map(|c| (c + 0.0).to_bits()).collect()
}

pub type EtaFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type TableFn = Arc<dyn Fn(&[f64], &[f64]) -> CoupledMeasure + Send + Sync>;

/// How `π_{x,x'}` is produced from the base kernels.
#[derive(Clone)]
pub enum JumpRule {
    /// [`CoupledMeasure::synchronous`] of `μ_x` and `μ_{x'}`.
    Synchronous,
    /// `w δ_{(η(x), η(x'))}`; the base kernel should be `w δ_{η(x)}`.
    Map { eta: EtaFn, weight: f64 },
    /// Explicit per-pair measure.
    Table(TableFn),
    /// `μ_x ⊗ μ_{x'}`.
    Product,
}

impl fmt::Debug for JumpRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JumpRule::Synchronous => write!(f, "Synchronous"),
            JumpRule::Map { weight, .. } => write!(f, "Map(w = {weight})"),
            JumpRule::Table(_) => write!(f, "Table"),
            JumpRule::Product => write!(f, "Product"),
        }
    }
}

impl JumpRule {
    pub fn name(&self) -> &'static str {
        match self {
            JumpRule::Synchronous => "synchronous",
            JumpRule::Map { .. } => "map",
            JumpRule::Table(_) => "table",
            JumpRule::Product => "product",
        }
    }

    /// State-independent explicit table.
    pub fn table(m: CoupledMeasure) -> Self {
        JumpRule::Table(Arc::new(move |_, _| m.clone()))
    }
}

/// Coupled jump operator with product cut `χ̂(z1, z2) = χ(z1)χ(z2)`.
#[derive(Clone, Debug)]
pub struct JumpCoupling {
    pub base: JumpOp,
    pub rule: JumpRule,
}

impl JumpCoupling {
    pub fn new(base: JumpOp, rule: JumpRule) -> Self {
        Self { base, rule }
    }

    pub fn measure(&self, x: &[f64], xp: &[f64]) -> Result<CoupledMeasure> {
        let q = self.base.dim();
        check_dim(q, x.len())?;
        check_dim(q, xp.len())?;
        let m = match &self.rule {
            JumpRule::Synchronous => CoupledMeasure::synchronous(&self.base.measure(x)?, &self.base.measure(xp)?),
            JumpRule::Product => CoupledMeasure::product(&self.base.measure(x)?, &self.base.measure(xp)?),
            JumpRule::Map { eta, weight } => CoupledMeasure::new(vec![(eta(x), eta(xp), *weight)])?,
            JumpRule::Table(t) => t(x, xp),
        };
        for (a, b, _) in m.atoms() {
            check_dim(q, a.dim())?;
            check_dim(q, b.dim())?;
        }
        Ok(m)
    }

    pub fn cut_hat(&self, z1: &[f64], z2: &[f64]) -> f64 {
        self.base.cut.chi(z1) * self.base.cut.chi(z2)
    }
}

/// Synchronous coupling of a diffusion: both copies share the driving noise.
#[derive(Clone, Debug)]
pub struct SyncDiffusion {
    pub base: DiffusionOp,
}

impl SyncDiffusion {
    pub fn new(base: DiffusionOp) -> Self {
        Self { base }
    }

    /// Coupled volatility `Σ̂ = [Σ(x); Σ(x')]`.
    pub fn sigma_hat(&self, x: &[f64], xp: &[f64]) -> Result<DMatrix<f64>> {
        let (s1, s2) = (self.base.sigma_at(x)?, self.base.sigma_at(xp)?);
        if s1.shape() != s2.shape() {
            return Err(Error::invalid("volatility shape changes between points"));
        }
        let (q, m) = s1.shape();
        let mut s = DMatrix::zeros(2 * q, m);
        s.view_mut((0, 0), (q, m)).copy_from(&s1);
        s.view_mut((q, 0), (q, m)).copy_from(&s2);
        Ok(s)
    }

    /// `Σ̂²(x, x') = Σ̂ Σ̂ᵀ`, positive semi-definite by construction.
    pub fn block_matrix(&self, x: &[f64], xp: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.sigma_hat(x, xp)?;
        Ok(&s * s.transpose())
    }
}

/// Tree of couplings mirroring the linear leaves of an [`OperatorSpec`].
#[derive(Clone, Debug)]
pub enum CouplingSpec {
    Zero { dim: usize },
    Diffusion(SyncDiffusion),
    Jump(JumpCoupling),
    Sum(Vec<CouplingSpec>),
    /// One coupling per Isaacs component `(θ₁, θ₂)`.
    PerControl(Vec<Vec<CouplingSpec>>),
}

impl CouplingSpec {
    /// Couple every diffusion leaf synchronously and every jump leaf with `rule`.
    pub fn mirror(op: &OperatorSpec, rule: &JumpRule) -> Result<Self> {
        Ok(match op {
            OperatorSpec::Zero { dim } => CouplingSpec::Zero { dim: *dim },
            OperatorSpec::Drift(d) => CouplingSpec::Zero { dim: d.dim() },
            OperatorSpec::Diffusion(d) => CouplingSpec::Diffusion(SyncDiffusion::new(d.clone())),
            OperatorSpec::Jump(j) => CouplingSpec::Jump(JumpCoupling::new(j.clone(), rule.clone())),
            OperatorSpec::Sum(ts) => CouplingSpec::Sum(ts.iter().map(|t| Self::mirror(t, rule)).collect::<Result<_>>()?),
            OperatorSpec::Isaacs(n) => {
                let (n1, n2) = n.shape();
                let mut rows = Vec::with_capacity(n1);
                for i in 0..n1 {
                    rows.push((0..n2).map(|j| Self::mirror(n.component(i, j), rule)).collect::<Result<_>>()?);
                }
                CouplingSpec::PerControl(rows)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            CouplingSpec::Zero { dim } => *dim,
            CouplingSpec::Diffusion(d) => d.base.dim(),
            CouplingSpec::Jump(j) => j.base.dim(),
            CouplingSpec::Sum(ts) => ts.first().map_or(0, |t| t.dim()),
            CouplingSpec::PerControl(rows) => rows.first().and_then(|r| r.first()).map_or(0, |t| t.dim()),
        }
    }

    /// Component couplings with their control indices; `(0, 0)` for a plain tree.
    pub fn components(&self) -> Vec<(usize, usize, &CouplingSpec)> {
        match self {
            CouplingSpec::PerControl(rows) => rows
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, c)| (i, j, c)))
                .collect(),
            c => vec![(0, 0, c)],
        }
    }

    pub fn jump_leaves(&self) -> Vec<&JumpCoupling> {
        match self {
            CouplingSpec::Jump(j) => vec![j],
            CouplingSpec::Sum(ts) => ts.iter().flat_map(|t| t.jump_leaves()).collect(),
            CouplingSpec::PerControl(rows) => rows.iter().flatten().flat_map(|t| t.jump_leaves()).collect(),
            _ => vec![],
        }
    }

    fn diffusion_leaves(&self) -> Vec<&SyncDiffusion> {
        match self {
            CouplingSpec::Diffusion(d) => vec![d],
            CouplingSpec::Sum(ts) => ts.iter().flat_map(|t| t.diffusion_leaves()).collect(),
            CouplingSpec::PerControl(rows) => rows.iter().flatten().flat_map(|t| t.diffusion_leaves()).collect(),
            _ => vec![],
        }
    }
}

/// `Â g(x, x')` for a field `g` on `R^{2q}`.
pub fn eval_coupling(c: &CouplingSpec, g: &ScalarField, x: &[f64], xp: &[f64]) -> Result<f64> {
    let q = c.dim();
    check_dim(q, x.len())?;
    check_dim(q, xp.len())?;
    check_dim(2 * q, g.dim())?;
    let w: Vec<f64> = x.iter().chain(xp).copied().collect();
    eval_at(c, g, &w)
}

fn eval_at(c: &CouplingSpec, g: &ScalarField, w: &[f64]) -> Result<f64> {
    let q = w.len() / 2;
    match c {
        CouplingSpec::Zero { .. } => Ok(0.0),
        CouplingSpec::Diffusion(d) => {
            let a = d.block_matrix(&w[..q], &w[q..])?;
            Ok(0.5 * a.component_mul(&g.hessian(w)?).sum())
        }
        CouplingSpec::Jump(j) => {
            let pi = j.measure(&w[..q], &w[q..])?;
            let gw = g.value(w)?;
            let grad = if pi.atoms().iter().any(|(a, b, _)| j.cut_hat(a, b) > 0.0) {
                Some(g.gradient(w)?)
            } else {
                None
            };
            let mut shifted = w.to_vec();
            let mut total = 0.0;
            for (z1, z2, m) in pi.atoms() {
                for i in 0..q {
                    shifted[i] = w[i] + z1[i];
                    shifted[q + i] = w[q + i] + z2[i];
                }
                let mut inc = g.value(&shifted)? - gw;
                let ch = j.cut_hat(z1, z2);
                if ch > 0.0 {
                    let gr = grad.as_ref().unwrap();
                    inc -= ch * (dot(z1, &gr.as_slice()[..q]) + dot(z2, &gr.as_slice()[q..]));
                }
                total += m * inc;
            }
            Ok(total)
        }
        CouplingSpec::Sum(ts) => ts.iter().try_fold(0.0, |acc, t| Ok(acc + eval_at(t, g, w)?)),
        CouplingSpec::PerControl(_) => Err(Error::invalid("select an Isaacs component before evaluating its coupling")),
    }
}

fn base_components(base: &OperatorSpec) -> Vec<(usize, usize, &OperatorSpec)> {
    base.components()
}

fn paired<'a>(c: &'a CouplingSpec, base: &'a OperatorSpec) -> Result<Vec<(usize, usize, &'a CouplingSpec, &'a OperatorSpec)>> {
    let cs = c.components();
    let bs = base_components(base);
    if cs.len() != bs.len() {
        return Err(Error::invalid(format!("coupling has {} components, operator has {}", cs.len(), bs.len())));
    }
    check_dim(base.dim(), c.dim())?;
    Ok(cs.into_iter().zip(bs).map(|((i, j, c), (_, _, b))| (i, j, c, b)).collect())
}

/// Coupling identity `Â(f1 ⊕ f2)(x, x') = A f1(x) + A f2(x')` on a cloud in `R^{2q}`.
///
/// Also checks that every coupled jump measure reproduces both marginals
/// (tolerance `1e-12` relative to mass) and that `Σ̂²` is positive semi-definite.
pub fn check_coupling_identity(
    c: &CouplingSpec,
    base: &OperatorSpec,
    f1: &ScalarField,
    f2: &ScalarField,
    pairs: &SampleCloud,
) -> Result<CheckReport> {
    let q = base.dim();
    check_dim(2 * q, pairs.dim())?;
    let comps = paired(c, base)?;
    let g = ScalarField::direct_sum(f1, f2);
    let mut rep = CheckReport::new("coupling_identity", 0.0).with_cloud(pairs.descriptor());
    let rows: Vec<Result<Vec<(f64, f64, String)>>> = pairs
        .points()
        .par_iter()
        .map(|pt| {
            let (x, xp) = pt.split_at(q);
            let mut out = vec![];
            for (i, j, cc, bb) in &comps {
                let lhs = eval_coupling(cc, &g, x, xp)?;
                let (a1, a2) = (linear_part(bb, f1, x)?, linear_part(bb, f2, xp)?);
                let gap = (lhs - a1 - a2).abs();
                out.push((gap, 1e-8 * (1.0 + lhs.abs() + a1.abs() + a2.abs()), format!("component ({i},{j}): Â(f1⊕f2) = {lhs}, Af1 + Af2 = {}", a1 + a2)));
                for jc in cc.jump_leaves() {
                    let pi = jc.measure(x, xp)?;
                    let (mu, nu) = (jc.base.measure(x)?, jc.base.measure(xp)?);
                    let err = pi.marginal_error(&mu, &nu);
                    out.push((err, 1e-12 * (1.0 + mu.mass() + nu.mass()), format!("component ({i},{j}): marginal mismatch of π ({})", jc.rule.name())));
                }
                for d in cc.diffusion_leaves() {
                    let a = d.block_matrix(x, xp)?;
                    let lmin = SymmetricEigen::new((&a + a.transpose()) * 0.5).eigenvalues.min();
                    out.push((-lmin, 1e-8, format!("component ({i},{j}): Σ̂² minimum eigenvalue {lmin:.3e}")));
                }
            }
            Ok(out)
        })
        .collect();
    for (pt, row) in pairs.points().iter().zip(rows) {
        for (lhs, rhs, note) in row? {
            rep.observe(pt, lhs, rhs, || note);
        }
    }
    let rules: Vec<&str> = c.jump_leaves().iter().map(|j| j.rule.name()).collect();
    if rules.contains(&"synchronous") {
        rep.detail("surplus_rule", "unmatched mass coupled to a zero jump on the other copy");
    }
    rep.detail("jump_rules", json!(rules));
    Ok(rep)
}

/// `α/2 d²_{x-y, x'-y'}` on `R^{2q}` with analytic derivatives.
pub fn shifted_distance_field(alpha: f64, x: &[f64], xp: &[f64], y: &[f64], yp: &[f64]) -> ScalarField {
    let q = x.len();
    let c: Vec<f64> = (0..q).map(|i| (x[i] - y[i]) - (xp[i] - yp[i])).collect();
    let diff = {
        let c = c.clone();
        move |w: &[f64]| -> Vec<f64> { (0..q).map(|i| w[i] - w[q + i] - c[i]).collect() }
    };
    let (d1, d2) = (diff.clone(), diff);
    ScalarField::new(2 * q, "α/2 d²", move |w: &[f64]| {
        let r = d1(w);
        0.5 * alpha * dot(&r, &r)
    })
    .with_gradient(move |w: &[f64]| {
        let r = d2(w);
        DVector::from_iterator(2 * q, r.iter().map(|v| alpha * v).chain(r.iter().map(|v| -alpha * v)))
    })
    .with_hessian(move |_: &[f64]| DMatrix::from_fn(2 * q, 2 * q, |i, j| if i % q != j % q { 0.0 } else if (i < q) == (j < q) { alpha } else { -alpha }))
}

/// Controlled growth: `Â(α/2 d²_{x-y,x'-y'})(x, x')` against the combined
/// argument `α S² + S`, `S = d(x,y) + d(y,y') + d(y',x')`, on quadruples
/// `(x, x', y, y')` in `R^{4q}`.
pub fn check_controlled_growth(c: &CouplingSpec, quads: &SampleCloud, alphas: &[f64]) -> Result<CheckReport> {
    let q = c.dim();
    check_dim(4 * q, quads.dim())?;
    if alphas.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
        return Err(Error::invalid("controlled growth needs finite α > 1"));
    }
    let comps = c.components();
    let rows: Vec<Result<Vec<ModulusSample>>> = quads
        .points()
        .par_iter()
        .map(|pt| {
            let (x, rest) = pt.split_at(q);
            let (xp, rest) = rest.split_at(q);
            let (y, yp) = rest.split_at(q);
            let s = distance_sq(x, y).sqrt() + distance_sq(y, yp).sqrt() + distance_sq(yp, xp).sqrt();
            let mut out = vec![];
            for &a in alphas {
                let g = shifted_distance_field(a, x, xp, y, yp);
                for (_, _, cc) in &comps {
                    out.push(ModulusSample {
                        abscissa: a * s * s + s,
                        lhs: eval_coupling(cc, &g, x, xp)?,
                        distance: s,
                        scale: a * s * s,
                        point: pt.to_vec(),
                        alpha: a,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut samples = vec![];
    for r in rows {
        samples.extend(r?);
    }
    let mut rep = CheckReport::new("controlled_growth", 0.0).with_cloud(quads.descriptor());
    let mut worst_ratio = f64::NEG_INFINITY;
    for s in &samples {
        if s.abscissa > 0.0 {
            worst_ratio = worst_ratio.max(s.lhs / s.abscissa);
        }
        if s.abscissa == 0.0 {
            rep.observe(&s.point, s.lhs, 0.0, || format!("α = {}: coincident quadruple", s.alpha));
        }
    }
    rep.samples = samples.len();
    if let Some(w) = samples.iter().filter(|s| s.abscissa > 0.0).max_by(|a, b| (a.lhs / a.abscissa).total_cmp(&(b.lhs / b.abscissa))) {
        if rep.witness.is_none() || w.lhs / w.abscissa > rep.max_violation {
            rep.max_violation = w.lhs / w.abscissa;
            rep.witness = Some(crate::report::Witness {
                point: w.point.clone(),
                lhs: w.lhs,
                rhs: w.abscissa,
                note: format!("α = {}: largest Â(α/2 d²) per unit of α S² + S", w.alpha),
            });
        }
    }
    let fit = certify_modulus(&samples);
    rep.detail("envelope", serde_json::to_value(&fit)?);
    rep.detail("max_ratio", json!(if worst_ratio.is_finite() { worst_ratio } else { 0.0 }));
    if !fit.passed {
        rep.fail(format!(
            "no modulus: envelope at 0 = {:.3e}, coalescence exponent = {:.3}",
            fit.omega_at_zero, fit.coalescence_exponent
        ));
    }
    Ok(rep)
}

/// Smallest `L` with `∫ d²(z1, z2) dπ_{x,x'} <= L d²(x, x')` on the pairs;
/// `+∞` when the ratio blows up as pairs coalesce.
pub fn check_pi_lipschitz(c: &JumpCoupling, pairs: &SampleCloud) -> Result<f64> {
    let q = c.base.dim();
    check_dim(2 * q, pairs.dim())?;
    let mut ratios = vec![];
    for pt in pairs.points() {
        let (x, xp) = pt.split_at(q);
        let i = c.measure(x, xp)?.integrate(distance_sq);
        let d2 = distance_sq(x, xp);
        if d2 == 0.0 {
            if i > 1e-14 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        ratios.push((d2.sqrt(), i / d2));
    }
    if ratios.is_empty() {
        return Err(Error::precondition("π-Lipschitz check needs pairs with x ≠ x'"));
    }
    ratios.sort_by(|a, b| a.0.total_cmp(&b.0));
    let quarter = &ratios[..(ratios.len() / 4).max(2).min(ratios.len())];
    let pos: Vec<(f64, f64)> = quarter.iter().filter(|r| r.1 > 1e-300).map(|r| (r.0.ln(), r.1.ln())).collect();
    if pos.len() >= 2 {
        let n = pos.len() as f64;
        let mx = pos.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pos.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pos.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pos.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 && sxy / sxx < -1.0 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(ratios.iter().map(|r| r.1).fold(0.0, f64::max))
}

/// Maximum principle for `Â`: with `g1 = g2 - |· - w0|²`, which has `g1 - g2`
/// maximal at `w0`, require `Â g1(w0) <= Â g2(w0)`. The `g2` are drawn from
/// [`smooth_battery`].
pub fn check_coupling_max_principle(c: &CouplingSpec, points: &SampleCloud, bumps: usize, seed: u64) -> Result<CheckReport> {
    let q = c.dim();
    check_dim(2 * q, points.dim())?;
    let mut rep = CheckReport::new("coupling_max_principle", 1e-8).with_cloud(points.descriptor());
    let battery = smooth_battery(2 * q, bumps, seed);
    for w0 in points.points() {
        let center = w0.to_vec();
        let bump = ScalarField::quadratic(&center, 2.0);
        for g2 in &battery {
            let g1 = ScalarField::linear_combination(&[(1.0, g2.clone()), (-1.0, bump.clone())])?;
            for (i, j, cc) in c.components() {
                let (x, xp) = w0.split_at(q);
                let (l, r) = (eval_coupling(cc, &g1, x, xp)?, eval_coupling(cc, g2, x, xp)?);
                rep.observe(w0, l, r, || format!("component ({i},{j}) with {}", g2.label()));
            }
        }
    }
    Ok(rep)
}

fn random_direction(rng: &mut ChaCha8Rng, q: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|c| c / n).collect();
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// Sampling ranges for the increment batteries.
#[derive(Clone, Copy, Debug)]
pub struct IncrementSampling {
    pub samples: usize,
    pub seed: u64,
    /// Radius of the ball holding `x`, `z`, `y`, `y'`.
    pub radius: f64,
    /// Jump sizes are log-uniform in this range.
    pub jump_range: (f64, f64),
    pub tolerance: f64,
}

impl Default for IncrementSampling {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            radius: 5.0,
            jump_range: (1e-3, 10.0),
            tolerance: 1e-10,
        }
    }
}

fn point_in_ball(rng: &mut ChaCha8Rng, q: usize, r: f64) -> Vec<f64> {
    let d = random_direction(rng, q);
    let s = r * rng.gen::<f64>().powf(1.0 / q as f64);
    d.iter().map(|c| c * s).collect()
}

/// Increment bounds for `V ∘ s_z` with `V = log(1 + ½|·|²)`.
///
/// Items: lower bound `-log(1 + ½|x-z|²)`; the exact middle expression;
/// the bound `log(1 + |𝐳|²)`; and, for `|𝐳| <= 1`, the compensated increment
/// within `½|𝐳|²`. Per-item verdicts are in `details.items`.
pub fn lyapunov_increment_bounds(q: usize, s: IncrementSampling) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let v = |a: &[f64]| (0.5 * dot(a, a)).ln_1p();
    let mut items: Vec<CheckReport> = ["lower", "middle", "log_bound", "small_jump_taylor"]
        .iter()
        .map(|n| CheckReport::new(*n, s.tolerance))
        .collect();
    for _ in 0..s.samples {
        let x = point_in_ball(&mut rng, q, s.radius);
        let z = point_in_ball(&mut rng, q, s.radius);
        let r = log_uniform(&mut rng, s.jump_range.0, s.jump_range.1);
        let jz: Vec<f64> = random_direction(&mut rng, q).iter().map(|c| c * r).collect();
        let a: Vec<f64> = x.iter().zip(&z).map(|(p, t)| p - t).collect();
        let moved: Vec<f64> = a.iter().zip(&jz).map(|(p, t)| p + t).collect();
        let inc = v(&moved) - v(&a);
        let sa = 1.0 + 0.5 * dot(&a, &a);
        let mut pt = x.clone();
        pt.extend(&z);
        pt.extend(&jz);
        items[0].observe(&pt, -sa.ln(), inc, || "-log(1 + ½|x-z|²) <= increment".into());
        let middle = ((0.5 * r * r + dot(&a, &jz)) / sa).ln_1p();
        items[1].observe(&pt, inc, middle, || "increment <= log(1 + (½|𝐳|² + <x-z, 𝐳>)/(1 + ½|x-z|²))".into());
        items[2].observe(&pt, inc, (r * r).ln_1p(), || format!("increment <= log(1 + |𝐳|²) with |𝐳| = {r:.4}"));
        if r <= 1.0 {
            let comp = inc - dot(&jz, &a) / sa;
            items[3].observe(&pt, comp.abs(), 0.5 * r * r, || "|compensated increment| <= ½|𝐳|²".into());
        }
    }
    combine("lyapunov_increment_bounds", items)
}

/// Compensated increment of `½ d²_{x-y,x'-y'}` along coupled jumps `(z1, z2)`
/// against `(1 - ½χ̂) d²(z1, z2) + (1 - χ̂) ½ d²(y, y')`.
pub fn distance_increment_bounds(q: usize, cut: &CutProfile, s: IncrementSampling) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut rep = CheckReport::new("distance_increment_bounds", s.tolerance);
    for _ in 0..s.samples {
        let pts: Vec<Vec<f64>> = (0..4).map(|_| point_in_ball(&mut rng, q, s.radius)).collect();
        let (x, xp, y, yp) = (&pts[0], &pts[1], &pts[2], &pts[3]);
        let jumps: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let r = log_uniform(&mut rng, s.jump_range.0, s.jump_range.1);
                random_direction(&mut rng, q).iter().map(|c| c * r).collect()
            })
            .collect();
        let (z1, z2) = (&jumps[0], &jumps[1]);
        let ch = cut.chi(z1) * cut.chi(z2);
        // ½|a - a' - c|² with c = (x-y) - (x'-y'), so the value at (x, x') is ½|y - y'|²
        let c: Vec<f64> = (0..q).map(|i| (x[i] - y[i]) - (xp[i] - yp[i])).collect();
        let h = |a: &[f64], b: &[f64]| -> f64 { 0.5 * (0..q).map(|i| (a[i] - b[i] - c[i]).powi(2)).sum::<f64>() };
        let moved1: Vec<f64> = x.iter().zip(z1).map(|(a, b)| a + b).collect();
        let moved2: Vec<f64> = xp.iter().zip(z2).map(|(a, b)| a + b).collect();
        let w: Vec<f64> = y.iter().zip(yp).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
        let lhs = h(&moved1, &moved2) - h(x, xp) - ch * dot(&w, &dz);
        let rhs = (1.0 - 0.5 * ch) * dot(&dz, &dz) + (1.0 - ch) * 0.5 * dot(&w, &w);
        let pt: Vec<f64> = pts.concat().into_iter().chain(z1.iter().copied()).chain(z2.iter().copied()).collect();
        rep.observe(&pt, lhs, rhs, || format!("χ̂ = {ch:.4}"));
    }
    rep
}

fn combine(name: &str, items: Vec<CheckReport>) -> CheckReport {
    let mut summary = serde_json::Map::new();
    for r in &items {
        summary.insert(
            r.name.clone(),
            json!({"passed": r.passed, "samples": r.samples, "max_violation": r.max_violation, "witness": r.witness}),
        );
    }
    let mut out = items.into_iter().reduce(|a, b| a.merge(b)).unwrap_or_else(|| CheckReport::new(name, 0.0));
    out.name = name.into();
    out.detail("items", serde_json::Value::Object(summary));
    out
}

/// `±1` walk in 1-D with unit weights.
pub fn symmetric_walk() -> DiscreteMeasure {
    DiscreteMeasure::new(vec![(vec![-1.0], 1.0), (vec![1.0], 1.0)]).expect("static atoms")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn walk() -> JumpOp {
        JumpOp::constant(1, symmetric_walk())
    }

    fn half_d2() -> ScalarField {
        shifted_distance_field(1.0, &[0.0], &[0.0], &[0.0], &[0.0])
    }

    #[test]
    fn synchronous_walk_annihilates_distance() {
        let c = CouplingSpec::Jump(JumpCoupling::new(walk(), JumpRule::Synchronous));
        for (x, xp) in [(0.3, -1.2), (4.0, 4.0), (-2.0, 7.5)] {
            assert!(eval_coupling(&c, &half_d2(), &[x], &[xp]).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn product_walk_gives_four() {
        let c = CouplingSpec::Jump(JumpCoupling::new(walk(), JumpRule::Product));
        for (x, xp) in [(0.3, -1.2), (4.0, 4.0), (-2.0, 7.5)] {
            assert_relative_eq!(eval_coupling(&c, &half_d2(), &[x], &[xp]).unwrap(), 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sync_block_matrix_is_synchronously_degenerate() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let d = SyncDiffusion::new(DiffusionOp::constant(s.clone()));
        let a = d.block_matrix(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        let ss = &s * s.transpose();
        assert_eq!(a.view((0, 2), (2, 2)).into_owned(), ss);
        let v = DVector::from_vec(vec![1.0, -2.0, -1.0, 2.0]);
        assert!((&a * v).norm() < 1e-14);
    }

    #[test]
    fn surplus_goes_to_zero_jump() {
        let mu = DiscreteMeasure::new(vec![(vec![1.0], 2.0), (vec![-1.0], 1.0)]).unwrap();
        let nu = DiscreteMeasure::new(vec![(vec![1.0], 1.0)]).unwrap();
        let pi = CoupledMeasure::synchronous(&mu, &nu);
        assert_eq!(pi.marginal_error(&mu, &nu), 0.0);
        assert!(pi.atoms().iter().any(|(a, b, w)| a[0] == 1.0 && b[0] == 0.0 && *w == 1.0));
    }

    #[test]
    fn broken_marginal_is_reported() {
        let op = OperatorSpec::Jump(walk());
        let pi = CoupledMeasure::new(vec![(vec![1.0], vec![1.0], 1.1), (vec![-1.0], vec![-1.0], 1.0)]).unwrap();
        let c = CouplingSpec::mirror(&op, &JumpRule::table(pi)).unwrap();
        let f1 = ScalarField::new(1, "x", |x| x[0]).with_gradient(|_| DVector::from_element(1, 1.0));
        let f2 = ScalarField::constant(1, 0.0);
        let pairs = SampleCloud::grid(&[-1.0, -1.0], &[1.0, 1.0], &[3, 3]).unwrap();
        let rep = check_coupling_identity(&c, &op, &f1, &f2, &pairs).unwrap();
        assert!(!rep.passed);
        assert_relative_eq!(rep.max_violation, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn lyapunov_log_bound_fails_only_for_small_jumps() {
        let small = lyapunov_increment_bounds(1, IncrementSampling { samples: 2000, jump_range: (1e-3, 0.99), ..Default::default() });
        assert!(!small.details["items"]["log_bound"]["passed"].as_bool().unwrap());
        let large = lyapunov_increment_bounds(2, IncrementSampling { samples: 2000, jump_range: (1.0, 10.0), ..Default::default() });
        assert!(large.passed, "{:?}", large.witness);
        // a = 1, 𝐳 = 0.1: increment 0.0677 exceeds log(1.01)
        let inc = (0.5f64 * 1.21).ln_1p() - 0.5f64.ln_1p();
        assert!(inc > 0.067 && 0.01f64.ln_1p() < 0.01);
    }

    #[test]
    fn distance_increment_bound_holds() {
        let rep = distance_increment_bounds(2, &CutProfile::default(), IncrementSampling { samples: 3000, ..Default::default() });
        assert!(rep.passed, "{:?}", rep.witness);
    }
}
