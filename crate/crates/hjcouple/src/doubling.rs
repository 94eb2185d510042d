//! Doubling of variables: optimizers of `Λ_α`, the Jensen perturbation, the
//! test functions `f†`/`f‡`, the Hamiltonian gap and the strict comparison
//! constants.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::convolve::{ConvolutionField, ConvolutionKind};
use crate::couplings::{eval_coupling, shifted_distance_field, CouplingSpec};
use crate::error::{check_dim, Error, Result};
use crate::funcspace::{distance_sq, fd_gradient_fn, fd_hessian_fn, SampleCloud, ScalarField, Smoothness};
use crate::operators::{eval, lyapunov_bound, lyapunov_bound_nested, OperatorSpec};
use crate::penalty::{eval_xi, eval_xi0, log_lyapunov_radius, bundle_field, Containment, CutOff, PenaltyFamily, XiBundle};
use crate::report::CheckReport;

/// Inputs of the doubling construction for a sub-/supersolution pair.
#[derive(Clone, Debug)]
pub struct DoublingProblem {
    pub u: ScalarField,
    pub v: ScalarField,
    pub containment: Containment,
    pub family: PenaltyFamily,
    pub eps: f64,
    pub phi: f64,
    pub op: OperatorSpec,
    pub coupling: Option<CouplingSpec>,
    pub lambda: f64,
    pub h1: ScalarField,
    pub h2: ScalarField,
    /// The compact of interest.
    pub k: SampleCloud,
    /// Working cloud for convolutions, scans and the optimizer search box.
    pub domain: SampleCloud,
    norm_u: f64,
    norm_v: f64,
}

fn sup_norm(f: &ScalarField, cloud: &SampleCloud) -> Result<f64> {
    let (lo, hi) = f.bounds();
    let mut s: f64 = 0.0;
    for p in cloud.points() {
        let val = f.value(p)?;
        s = s.max(val.abs());
    }
    if let (Some(a), Some(b)) = (lo, hi) {
        s = s.max(a.abs()).max(b.abs());
    }
    Ok(s)
}

impl DoublingProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u: ScalarField,
        v: ScalarField,
        containment: Containment,
        family: PenaltyFamily,
        eps: f64,
        phi: f64,
        op: OperatorSpec,
        coupling: Option<CouplingSpec>,
        lambda: f64,
        h1: ScalarField,
        h2: ScalarField,
        k: SampleCloud,
        domain: SampleCloud,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("ε = {eps} must lie in (0, 1)")));
        }
        if !(phi > 0.0 && phi <= 1.0) {
            return Err(Error::invalid(format!("φ = {phi} must lie in (0, 1]")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda = {lambda} must be finite and > 0")));
        }
        let q = op.dim();
        for (name, d) in [("u", u.dim()), ("v", v.dim()), ("V", containment.v.dim()), ("h1", h1.dim()), ("h2", h2.dim()), ("K", k.dim()), ("domain", domain.dim()), ("penalty", family.dim())] {
            if d != q {
                return Err(Error::invalid(format!("{name} has dimension {d}, operator has {q}")));
            }
        }
        if k.is_empty() || domain.is_empty() {
            return Err(Error::invalid("K and the working cloud must be non-empty"));
        }
        let norm_u = sup_norm(&u, &domain)?;
        let norm_v = sup_norm(&v, &domain)?;
        Ok(Self { u, v, containment, family, eps, phi, op, coupling, lambda, h1, h2, k, domain, norm_u, norm_v })
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// `(‖u‖, ‖v‖)` over the working cloud and declared bounds.
    pub fn norms(&self) -> (f64, f64) {
        (self.norm_u, self.norm_v)
    }

    /// `(ε₁, ε₂) = (εφ/(1-ε), εφ/(1+ε))`.
    pub fn jensen_weights(&self) -> (f64, f64) {
        (self.eps * self.phi / (1.0 - self.eps), self.eps * self.phi / (1.0 + self.eps))
    }

    /// Semi-convexity constant of `Λ_α`.
    pub fn lambda_semi_convexity(&self, alpha: f64) -> f64 {
        let e2 = 1.0 - self.eps * self.eps;
        (2.0 / e2 + 0.5) * alpha + 2.0 * self.eps / e2 * (1.0 - self.phi) * self.containment.kappa_v
    }

    fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let q = self.dim();
        let mut lo = vec![f64::INFINITY; q];
        let mut hi = vec![f64::NEG_INFINITY; q];
        for p in self.domain.points() {
            for i in 0..q {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }
}

/// `Λ_α(y, y') = P^α[u](y)/(1-ε) - P_α[v](y')/(1+ε) - α/2 d²(y, y') - ε(1-φ)(V(y)/(1-ε) + V(y')/(1+ε))`.
pub struct LambdaField {
    pub alpha: f64,
    pub pu: Arc<ConvolutionField>,
    pub pv: Arc<ConvolutionField>,
    v: ScalarField,
    eps: f64,
    phi: f64,
    q: usize,
}

impl std::fmt::Debug for LambdaField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LambdaField").field("alpha", &self.alpha).field("q", &self.q).finish()
    }
}

impl LambdaField {
    pub fn value(&self, y: &[f64], yp: &[f64]) -> Result<f64> {
        check_dim(self.q, y.len())?;
        check_dim(self.q, yp.len())?;
        let e = self.eps;
        let w = e * (1.0 - self.phi);
        let a = self.pu.value(y)? / (1.0 - e) - self.pv.value(yp)? / (1.0 + e);
        Ok(a - 0.5 * self.alpha * distance_sq(y, yp) - w * (self.v.value_unchecked(y) / (1.0 - e) + self.v.value_unchecked(yp) / (1.0 + e)))
    }

    fn joint(&self, z: &[f64]) -> f64 {
        let (y, yp) = z.split_at(self.q);
        self.value(y, yp).unwrap_or(f64::NEG_INFINITY)
    }

    /// `Λ_α` as a field on `E × E`.
    pub fn to_field(self: &Arc<Self>) -> ScalarField {
        let me = Arc::clone(self);
        ScalarField::new(2 * self.q, format!("Lambda_{}", self.alpha), move |z: &[f64]| me.joint(z))
    }
}

/// Assemble `Λ_α` from the sup-/inf-convolutions on the working cloud.
pub fn assemble_lambda(prob: &DoublingProblem, alpha: f64) -> Result<Arc<LambdaField>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("α = {alpha} must be finite and > 0")));
    }
    let pu = Arc::new(ConvolutionField::new(ConvolutionKind::Sup, &prob.u, alpha, &prob.domain)?);
    let pv = Arc::new(ConvolutionField::new(ConvolutionKind::Inf, &prob.v, alpha, &prob.domain)?);
    Ok(Arc::new(LambdaField {
        alpha,
        pu,
        pv,
        v: prob.containment.v.clone(),
        eps: prob.eps,
        phi: prob.phi,
        q: prob.dim(),
    }))
}

// ---------------------------------------------------------------------------
// search

/// Grid indices of a tensor grid with `n[i]` points per axis, last axis fastest.
fn tensor_points(lo: &[f64], hi: &[f64], n: &[usize]) -> Vec<Vec<f64>> {
    let d = lo.len();
    let total: usize = n.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        out.push((0..d).map(|i| if n[i] == 1 { 0.5 * (lo[i] + hi[i]) } else { lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (n[i] - 1) as f64 }).collect());
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < n[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

/// Pattern search from `x` with axis moves and, on `E × E`, joint moves of matching coordinates.
fn compass(f: &(dyn Fn(&[f64]) -> f64 + Sync), x: Vec<f64>, scale: &[f64], tol: f64, paired: bool) -> (Vec<f64>, f64) {
    let d = x.len();
    let mut dirs: Vec<Vec<f64>> = vec![];
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            dirs.push(e);
        }
    }
    if paired && d % 2 == 0 {
        let q = d / 2;
        for i in 0..q {
            for (a, b) in [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
                let mut e = vec![0.0; d];
                e[i] = a;
                e[i + q] = b;
                dirs.push(e);
            }
        }
    }
    let mut x = x;
    let mut fx = f(&x);
    let smax = scale.iter().copied().fold(0.0, f64::max);
    let mut s = 1.0;
    let mut evals = 0;
    let mut cand = vec![0.0; d];
    while s * smax > tol && evals < 400_000 {
        let mut moved = false;
        for e in &dirs {
            for i in 0..d {
                cand[i] = x[i] + s * scale[i] * e[i];
            }
            let fc = f(&cand);
            evals += 1;
            if fc > fx {
                x.copy_from_slice(&cand);
                fx = fc;
                moved = true;
                break;
            }
        }
        if !moved {
            s *= 0.5;
        }
    }
    (x, fx)
}

/// Best few grid points, pairwise at least two grid steps apart. On a plateau
/// the point nearest `center` comes first.
fn top_candidates(points: &[Vec<f64>], vals: &[f64], step: &[f64], count: usize, center: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| vals[i].is_finite()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = vec![];
    if let Some(&top) = order.first() {
        let flat = 1e-12 * (1.0 + vals[top].abs());
        let near = order
            .iter()
            .take_while(|&&i| vals[i] >= vals[top] - flat)
            .min_by(|&&a, &&b| distance_sq(&points[a], center).total_cmp(&distance_sq(&points[b], center)).then(a.cmp(&b)));
        out.extend(near);
    }
    for i in order {
        let far = out.iter().all(|&j| points[i].iter().zip(&points[j]).zip(step).any(|((a, b), s)| (a - b).abs() > 2.0 * s));
        if far {
            out.push(i);
            if out.len() == count {
                break;
            }
        }
    }
    out
}

/// Global maximum of `Λ_α` with its location and whether it touches the search box.
#[derive(Clone, Debug, Serialize)]
pub struct LambdaMax {
    pub y: Vec<f64>,
    pub yp: Vec<f64>,
    pub value: f64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub enlargements: usize,
}

/// Search knobs shared by the optimizer search and the Jensen step.
#[derive(Clone, Debug, Serialize)]
pub struct SearchConfig {
    /// Grid evaluations of the coarse `Λ_α` scan.
    pub budget: usize,
    /// Box enlargements before giving up on a boundary optimizer.
    pub retries: usize,
    /// Pattern-search step at termination.
    pub tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 16_000, retries: 3, tol: 1e-12 }
    }
}

/// Coarse-then-zoom maximization of `Λ_α` over the working box.
///
/// The scan runs in centered coordinates `(m, δ)` with `y = m + δ/2`,
/// `y' = m - δ/2`; `|δ|` is bounded a priori by comparing with the best
/// diagonal value, so the ridge along the diagonal is resolved for large α.
pub fn maximize_lambda(prob: &DoublingProblem, lam: &Arc<LambdaField>, cfg: &SearchConfig) -> Result<LambdaMax> {
    let q = prob.dim();
    let (mut lo, mut hi) = prob.bounding_box();
    let e = prob.eps;
    let (nu, nv) = prob.norms();
    let upper = nu / (1.0 - e) + nv / (1.0 + e);
    let f = |z: &[f64]| lam.joint(z);
    for attempt in 0..=cfg.retries {
        let per = ((cfg.budget as f64).powf(1.0 / (2 * q) as f64)).max(3.0);
        let nm = vec![((per * 2.0) as usize).max(3); q];
        let nd = vec![((per / 2.0) as usize).max(3) | 1; q];
        let diag: Vec<Vec<f64>> = tensor_points(&lo, &hi, &vec![nm[0] * 2; q]);
        let best_diag = diag
            .par_iter()
            .map(|m| f(&[m.as_slice(), m.as_slice()].concat()))
            .reduce(|| f64::NEG_INFINITY, f64::max);
        let reach = (2.0 * (upper - best_diag).max(0.0) / lam.alpha).sqrt() * 1.01 + 1e-12;
        let mvals = tensor_points(&lo, &hi, &nm);
        let dvals = tensor_points(&vec![-reach; q], &vec![reach; q], &nd);
        let pts: Vec<Vec<f64>> = mvals
            .iter()
            .flat_map(|m| {
                dvals.iter().map(move |d| {
                    let y: Vec<f64> = (0..q).map(|i| m[i] + 0.5 * d[i]).collect();
                    let yp: Vec<f64> = (0..q).map(|i| m[i] - 0.5 * d[i]).collect();
                    [y, yp].concat()
                })
            })
            .collect();
        let vals: Vec<f64> = pts.par_iter().map(|z| f(z)).collect();
        let mstep: Vec<f64> = (0..q).map(|i| (hi[i] - lo[i]) / (nm[i] - 1).max(1) as f64).collect();
        let dstep: Vec<f64> = (0..q).map(|_| 2.0 * reach / (nd[0] - 1) as f64).collect();
        let step: Vec<f64> = (0..2 * q).map(|i| mstep[i % q].max(dstep[i % q])).collect();
        let scale: Vec<f64> = (0..2 * q).map(|i| mstep[i % q].min(dstep[i % q]).max(1e-9)).collect();
        let center: Vec<f64> = (0..2 * q).map(|i| 0.5 * (lo[i % q] + hi[i % q])).collect();
        let cands = top_candidates(&pts, &vals, &step, 8, &center);
        let refined: Vec<(Vec<f64>, f64)> = cands.par_iter().map(|&i| compass(&f, pts[i].clone(), &scale, cfg.tol, true)).collect();
        let best = refined.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let flat = 1e-12 * (1.0 + best.abs());
        let (z, val) = refined
            .into_iter()
            .filter(|c| c.1 >= best - flat)
            .min_by(|a, b| distance_sq(&a.0, &center).total_cmp(&distance_sq(&b.0, &center)))
            .unwrap_or((vec![], f64::NEG_INFINITY));
        if !val.is_finite() {
            return Err(Error::numerical("Λ_α is not finite anywhere on the search box"));
        }
        let touches = (0..2 * q).any(|i| {
            let c = z[i];
            let k = i % q;
            c - lo[k] < mstep[k] || hi[k] - c < mstep[k]
        });
        if !touches {
            return Ok(LambdaMax {
                y: z[..q].to_vec(),
                yp: z[q..].to_vec(),
                value: val,
                box_lo: lo,
                box_hi: hi,
                enlargements: attempt,
            });
        }
        for k in 0..q {
            let (c, r) = (0.5 * (lo[k] + hi[k]), 0.5 * (hi[k] - lo[k]));
            lo[k] = c - 1.5 * r;
            hi[k] = c + 1.5 * r;
        }
    }
    Err(Error::precondition(format!(
        "optimizer of Λ_{} stays on the search-box boundary after {} enlargements; the working cloud is too coarse",
        lam.alpha, cfg.retries
    )))
}

// ---------------------------------------------------------------------------
// Jensen perturbation

/// Parameters of the Jensen step.
#[derive(Clone, Debug, Serialize)]
pub struct JensenConfig {
    pub eta: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Declared semi-convexity constant of `φ`.
    pub kappa: f64,
    /// Semi-concavity constant of `ξ`.
    pub kappa_xi: f64,
    /// Slopes tried, `p = 0` first.
    pub candidates: usize,
    /// Relative two-scale Hessian change accepted as twice differentiable.
    pub hessian_tol: f64,
    /// Grid evaluations of each perturbed search.
    pub budget: usize,
    pub tol: f64,
}

impl JensenConfig {
    pub fn new(eta: f64, eps1: f64, eps2: f64, kappa: f64) -> Self {
        Self { eta, eps1, eps2, kappa, kappa_xi: 1.0, candidates: 128, hessian_tol: 1e-3, budget: 1681, tol: 1e-13 }
    }
}

/// Accepted Jensen perturbation.
#[derive(Clone, Debug, Serialize)]
pub struct JensenOutcome {
    /// Maximizer of the unperturbed functional actually used (may improve on the input).
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub sup_phi: f64,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    /// `φ_p(x₁, y₁)`.
    pub value: f64,
    /// `-ε₁(ξ + ζ)(x₁) - ε₂(ξ + ζ)(y₁)`.
    pub perturbation: f64,
    pub hessian_change: f64,
    pub candidates_tried: usize,
    pub log: Vec<String>,
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// `k`-th Halton point of `B_r(0)²` in `R^q × R^q` (radial cube-to-ball map).
fn halton_pair(k: usize, q: usize, r: f64) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = (0..2 * q).map(|i| 2.0 * radical_inverse(k, PRIMES[i % PRIMES.len()]) - 1.0).collect();
    let ball = |w: &[f64]| -> Vec<f64> {
        let linf = w.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let l2 = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        if l2 == 0.0 {
            return vec![0.0; w.len()];
        }
        w.iter().map(|c| r * c * linf / l2).collect()
    };
    (ball(&raw[..q]), ball(&raw[q..]))
}

fn penalty_at(fam: &PenaltyFamily, z0: &[f64], p: &[f64], x: &[f64]) -> f64 {
    let z = z0.to_vec();
    fam.xi(&z, x).map(|a| a.value).unwrap_or(f64::NAN) + fam.zeta(&z, p, x).map(|a| a.value).unwrap_or(f64::NAN)
}

fn hessian_change(f: &(dyn Fn(&[f64]) -> f64 + Sync), z: &[f64], h: f64) -> f64 {
    let a = fd_hessian_fn(f, z, h);
    let b = fd_hessian_fn(f, z, 0.5 * h);
    (&a - &b).amax() / (1.0 + a.amax())
}

/// Jensen perturbation of a semi-convex `φ` on `E × E` maximized at `opt`.
///
/// Slopes `p = (p₁, p₂)` are tried in order: zero, then a Halton sweep of
/// `B_{0.9η}(0)²`. For each, the global maximizer of
/// `φ_p = φ - ε₁(ξ_{x₀} + ζ_{x₀,p₁}) - ε₂(ξ_{y₀} + ζ_{y₀,p₂})` is searched in
/// the box where it must lie, and accepted when it falls in
/// `B_η(x₀) × B_η(y₀)` with a stable two-scale finite-difference Hessian.
pub fn jensen_perturb(phi: &ScalarField, opt: (&[f64], &[f64]), family: &PenaltyFamily, cfg: &JensenConfig) -> Result<JensenOutcome> {
    let q = family.dim();
    check_dim(2 * q, phi.dim())?;
    check_dim(q, opt.0.len())?;
    check_dim(q, opt.1.len())?;
    if !(cfg.eta > 0.0) || !cfg.eta.is_finite() {
        return Err(Error::invalid(format!("η = {} must be finite and > 0", cfg.eta)));
    }
    if !(cfg.eps1 > 0.0 && cfg.eps2 > 0.0) {
        return Err(Error::invalid("ε₁ and ε₂ must be > 0"));
    }
    if 1.0 - (cfg.eps1 + cfg.eps2) * cfg.kappa_xi <= 0.0 {
        return Err(Error::precondition(format!(
            "1 - (ε₁ + ε₂)κ_ξ = {:.3e} must be > 0",
            1.0 - (cfg.eps1 + cfg.eps2) * cfg.kappa_xi
        )));
    }
    let fphi = |z: &[f64]| phi.value_unchecked(z);
    let mut base: Vec<f64> = [opt.0, opt.1].concat();
    let mut log = vec![];
    let eta = cfg.eta;
    let r1 = eta * (1.0 + (1.0 + cfg.eps2 / cfg.eps1).sqrt()) * 1.02;
    let r2 = eta * (1.0 + (1.0 + cfg.eps1 / cfg.eps2).sqrt()) * 1.02;
    probe_semi_convexity(&fphi, &base, r1.max(r2), cfg.kappa)?;
    let hstep = (1e-4f64).min(eta * 1e-2);
    let mut tried = 0;
    for restart in 0..4 {
        let (b1, b2) = base.split_at(q);
        let (b1, b2) = (b1.to_vec(), b2.to_vec());
        let sup_phi = fphi(&base);
        let mut rebased = None;
        for k in 0..cfg.candidates.max(1) {
            let (p1, p2) = if k == 0 { (vec![0.0; q], vec![0.0; q]) } else { halton_pair(k, q, 0.9 * eta) };
            tried += 1;
            let fp = |z: &[f64]| {
                let (x, y) = z.split_at(q);
                fphi(z) - cfg.eps1 * penalty_at(family, &b1, &p1, x) - cfg.eps2 * penalty_at(family, &b2, &p2, y)
            };
            let lo: Vec<f64> = (0..2 * q).map(|i| base[i] - if i < q { r1 } else { r2 }).collect();
            let hi: Vec<f64> = (0..2 * q).map(|i| base[i] + if i < q { r1 } else { r2 }).collect();
            let per = ((cfg.budget as f64).powf(1.0 / (2 * q) as f64) as usize).max(3) | 1;
            let mut pts = tensor_points(&lo, &hi, &vec![per; 2 * q]);
            pts.push(base.clone());
            let vals: Vec<f64> = pts.par_iter().map(|z| fp(z)).collect();
            let step: Vec<f64> = (0..2 * q).map(|i| (hi[i] - lo[i]) / (per - 1) as f64).collect();
            let cands = top_candidates(&pts, &vals, &step, 4, &base);
            let refined: Vec<(Vec<f64>, f64)> = cands.iter().map(|&i| compass(&fp, pts[i].clone(), &step, cfg.tol, true)).collect();
            let (z1, val) = refined.into_iter().fold((base.clone(), fp(&base)), |acc, c| if c.1 > acc.1 { c } else { acc });
            let raw = fphi(&z1);
            if raw > sup_phi + 1e-14 * (1.0 + sup_phi.abs()) {
                rebased = Some(z1.clone());
                log.push(format!("restart {restart}: φ({z1:?}) = {raw} exceeds φ at the base by {:.3e}", raw - sup_phi));
                break;
            }
            let (x1, y1) = z1.split_at(q);
            let dx = distance_sq(x1, &b1).sqrt();
            let dy = distance_sq(y1, &b2).sqrt();
            if dx >= eta || dy >= eta {
                log.push(format!("p #{k}: maximizer displaced by ({dx:.3e}, {dy:.3e}) >= η"));
                continue;
            }
            let hc = hessian_change(&fp, &z1, hstep);
            if !(hc < cfg.hessian_tol) {
                log.push(format!("p #{k}: two-scale Hessian change {hc:.3e}"));
                continue;
            }
            return Ok(JensenOutcome {
                x0: b1.clone(),
                y0: b2.clone(),
                sup_phi,
                p1: p1.clone(),
                p2: p2.clone(),
                x1: x1.to_vec(),
                y1: y1.to_vec(),
                value: val,
                perturbation: val - raw,
                hessian_change: hc,
                candidates_tried: tried,
                log,
            });
        }
        match rebased {
            Some(z) => {
                let (ref_z, _) = compass(&fphi, z, &vec![eta; 2 * q], cfg.tol, true);
                base = ref_z;
            }
            None => break,
        }
    }
    Err(Error::numerical(format!("no admissible Jensen slope among {tried} candidates: {}", log.join("; "))))
}

fn probe_semi_convexity(f: &(dyn Fn(&[f64]) -> f64 + Sync), base: &[f64], r: f64, kappa: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e31_c0de);
    let d = base.len();
    for _ in 0..64 {
        let a: Vec<f64> = base.iter().map(|c| c + r * rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = base.iter().map(|c| c + r * rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..d).map(|i| 0.5 * (a[i] + b[i])).collect();
        let (fa, fb, fm) = (f(&a), f(&b), f(&m));
        let slack = 0.5 * (fa + fb) + kappa / 8.0 * distance_sq(&a, &b) - fm;
        if slack < -1e-10 * (1.0 + fm.abs()) {
            return Err(Error::precondition(format!("semi-convexity with κ = {kappa} fails at midpoint {m:?} by {:.3e}", -slack)));
        }
    }
    Ok(())
}

/// Sandwich bounds of an accepted Jensen output:
/// `sup φ <= φ_p(x₁, y₁) <= sup φ + (ε₁ + ε₂)η`, `|pᵢ| < η`, displacement `< η`.
pub fn check_jensen_sandwich(out: &JensenOutcome, cfg: &JensenConfig, mesh_term: f64) -> CheckReport {
    let tol = 1e-9 + mesh_term;
    let mut rep = CheckReport::new("jensen_sandwich", tol);
    let pt: Vec<f64> = [out.x1.as_slice(), out.y1.as_slice()].concat();
    let slack = (cfg.eps1 + cfg.eps2) * cfg.eta;
    rep.observe(&pt, out.sup_phi, out.value, || "sup φ <= φ_p(x₁, y₁)".into());
    rep.observe(&pt, out.value - out.sup_phi, slack, || "φ_p(x₁, y₁) - sup φ <= (ε₁ + ε₂)η".into());
    rep.observe(&pt, -out.perturbation, 0.0, || "perturbation >= 0".into());
    rep.observe(&pt, out.perturbation, slack, || "perturbation <= (ε₁ + ε₂)η".into());
    let n1 = out.p1.iter().map(|c| c * c).sum::<f64>().sqrt();
    let n2 = out.p2.iter().map(|c| c * c).sum::<f64>().sqrt();
    rep.observe(&pt, n1.max(n2) - cfg.eta, -f64::MIN_POSITIVE - tol, || "|pᵢ| < η".into());
    let dx = distance_sq(&out.x1, &out.x0).sqrt();
    let dy = distance_sq(&out.y1, &out.y0).sqrt();
    rep.observe(&pt, dx.max(dy) - cfg.eta, -f64::MIN_POSITIVE - tol, || "displacement < η".into());
    rep.detail("hessian_change", json!(out.hessian_change));
    rep.detail("candidates_tried", json!(out.candidates_tried));
    rep
}

// ---------------------------------------------------------------------------
// strict bound and gap constants

/// Constants of the strict comparison estimate.
#[derive(Clone, Debug, Serialize)]
pub struct StrictBound {
    /// `K̂ = {V <= level}` with `level = (‖u‖ + ‖v‖)/ε + sup_K V`.
    pub level: f64,
    /// Closed-form radius of `K̂` when `V` is the default logarithmic containment.
    pub khat_radius: Option<f64>,
    pub c_eps: f64,
    pub c_v: f64,
    pub c_v_plateau: bool,
    pub components: BTreeMap<String, f64>,
}

/// `sup |f|` on the working cloud.
fn cloud_sup(f: &ScalarField, cloud: &SampleCloud) -> Result<f64> {
    sup_norm(f, cloud)
}

/// `K̂` and `C_ε` of the strict comparison estimate.
pub fn strict_bound(prob: &DoublingProblem) -> Result<StrictBound> {
    let v = &prob.containment.v;
    let nested = lyapunov_bound_nested(&prob.op, v, 201)?;
    let c_v = nested.value.max(lyapunov_bound(&prob.op, v, &prob.domain)?);
    if !c_v.is_finite() {
        return Err(Error::precondition("Lyapunov bound c_V is +∞"));
    }
    let e = prob.eps;
    let (nu, nv) = prob.norms();
    let mut sup_kv = f64::NEG_INFINITY;
    let mut inf_thm = f64::INFINITY;
    let mut inf_fix = f64::INFINITY;
    for p in prob.k.points() {
        sup_kv = sup_kv.max(v.value(p)?);
        let (a, b) = (prob.u.value(p)?, prob.v.value(p)?);
        inf_thm = inf_thm.min(a / (1.0 - e) - b / (1.0 + e));
        inf_fix = inf_fix.min(a / (1.0 - e) + b / (1.0 + e));
    }
    let level = (nu + nv) / e + sup_kv;
    let khat_radius = {
        let q = prob.dim();
        let r = log_lyapunov_radius(level);
        let mut e1 = vec![0.0; q];
        e1[0] = r;
        let at = v.value(&e1).unwrap_or(f64::NAN);
        let mut e2 = vec![0.0; q];
        e2[q - 1] = -0.5 * r;
        let half = v.value(&e2).unwrap_or(f64::NAN);
        let expect = (0.5 * 0.25 * r * r).ln_1p();
        ((at - level).abs() <= 1e-9 * (1.0 + level) && (half - expect).abs() <= 1e-9 * (1.0 + expect)).then_some(r)
    };
    let n1 = cloud_sup(&prob.h1, &prob.domain)?;
    let n2 = cloud_sup(&prob.h2, &prob.domain)?;
    let e2 = 1.0 - e * e;
    let c_eps = 2.0 / e2 * (sup_kv + prob.lambda * c_v) + (n1 + n2) / (1.0 - e) - inf_thm;
    let mut components = BTreeMap::new();
    components.insert("sup_K_V".into(), sup_kv);
    components.insert("lambda_c_V".into(), prob.lambda * c_v);
    components.insert("norm_u".into(), nu);
    components.insert("norm_v".into(), nv);
    components.insert("norm_h1".into(), n1);
    components.insert("norm_h2".into(), n2);
    components.insert("inf_K_u_minus_v".into(), inf_thm);
    components.insert("inf_K_u_plus_v".into(), inf_fix);
    Ok(StrictBound { level, khat_radius, c_eps, c_v, c_v_plateau: nested.plateau, components })
}

/// `C⁰_ε = 2c_V/(1-ε²)` and `C_{ε,φ} = 2φ/(1-ε²) sup_{K̂} max_θ (A + B)Ξ_{z,0,z}(z)`.
#[derive(Clone, Debug, Serialize)]
pub struct GapBound {
    pub c0: f64,
    pub c_phi: f64,
    pub xi_sup: f64,
    /// `ε(C⁰_ε + C_{ε,φ})`.
    pub bound: f64,
}

pub fn gap_bound(prob: &DoublingProblem, sb: &StrictBound) -> Result<GapBound> {
    let e2 = 1.0 - prob.eps * prob.eps;
    let q = prob.dim();
    let mut pts: Vec<Vec<f64>> = prob
        .domain
        .points()
        .iter()
        .filter(|p| prob.containment.v.value_unchecked(p) <= sb.level)
        .map(|p| p.to_vec())
        .collect();
    pts.extend(prob.k.points().iter().map(|p| p.to_vec()));
    let vals: Vec<Result<f64>> = pts
        .par_iter()
        .map(|z| {
            let b = XiBundle::new(z.clone().try_into()?, vec![0.0; q].try_into()?, z.clone().try_into()?)?;
            let xi = bundle_field(&prob.family, &b, true);
            let mut best = f64::NEG_INFINITY;
            for (_, _, comp) in prob.op.components() {
                best = best.max(eval(comp, &xi, z)?);
            }
            Ok(best)
        })
        .collect();
    let mut xi_sup = f64::NEG_INFINITY;
    for v in vals {
        xi_sup = xi_sup.max(v?);
    }
    let c0 = 2.0 / e2 * sb.c_v;
    let c_phi = 2.0 / e2 * prob.phi * xi_sup;
    Ok(GapBound { c0, c_phi, xi_sup, bound: prob.eps * (c0 + c_phi) })
}

// ---------------------------------------------------------------------------
// trace

/// One row of the doubling trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub alpha: f64,
    pub y0: Vec<f64>,
    pub y0p: Vec<f64>,
    pub p: Vec<f64>,
    pub pp: Vec<f64>,
    pub y: Vec<f64>,
    pub yp: Vec<f64>,
    pub x: Vec<f64>,
    pub xp: Vec<f64>,
    pub sup_lambda: f64,
    /// `Λ̂_α(y_α, y'_α)`.
    pub lambda_hat: f64,
    /// `α d²(y_α0, y'_α0)`.
    pub alpha_d2: f64,
    /// `α (d(x_α, y_α) + d(y_α, y'_α) + d(y'_α, x'_α))²`.
    pub alpha_chain: f64,
    /// `-(ε/(1-ε))φ Ξ⁰₁(y_α) - (ε/(1+ε))φ Ξ⁰₂(y'_α)`.
    pub xi0_sandwich: f64,
    /// `φ 2ε/((1-ε²)α)`.
    pub xi0_upper: f64,
    pub displacement: f64,
    pub jensen_tried: usize,
    pub hessian_change: f64,
    pub convolution_ambiguous: bool,
    /// `sup_K (u - v)` and the right side of the localized estimate.
    pub estimate_lhs: f64,
    pub estimate_rhs: f64,
    pub gap: Option<f64>,
    pub coupled_distance: Option<f64>,
}

/// Run configuration of the trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceConfig {
    pub schedule: Vec<f64>,
    pub search: SearchConfig,
    /// Required final `α d²(y_α0, y'_α0)`.
    pub final_alpha_d2: f64,
    /// Optional required final `α(d + d + d)²`.
    pub final_alpha_chain: Option<f64>,
    pub test_functions: bool,
    pub jensen_candidates: usize,
}

impl TraceConfig {
    pub fn default_schedule() -> Vec<f64> {
        (1..=12).map(|k| 2f64.powi(k)).collect()
    }
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            schedule: Self::default_schedule(),
            search: SearchConfig::default(),
            final_alpha_d2: 1e-2,
            final_alpha_chain: None,
            test_functions: true,
            jensen_candidates: 128,
        }
    }
}

/// Append-only record of a doubling run.
#[derive(Clone, Debug, Serialize)]
pub struct DoublingTrace {
    pub rows: Vec<TraceRow>,
    pub invariants: Vec<CheckReport>,
    pub strict_bound: StrictBound,
    pub gap_bound: GapBound,
    pub flags: BTreeMap<String, Value>,
}

impl DoublingTrace {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|r| r.passed)
    }

    pub fn first_violation(&self) -> Option<&CheckReport> {
        self.invariants.iter().find(|r| !r.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&CheckReport> {
        self.invariants.iter().find(|r| r.name == name)
    }

    /// Frozen CSV columns, one row per α.
    pub const CSV_COLUMNS: [&'static str; 22] = [
        "alpha", "y0", "y0p", "p", "pp", "y", "yp", "x", "xp", "sup_lambda", "lambda_hat", "alpha_d2", "alpha_chain", "xi0_sandwich",
        "xi0_upper", "displacement", "jensen_tried", "hessian_change", "estimate_lhs", "estimate_rhs", "gap", "coupled_distance",
    ];

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(&mut w);
        out.write_record(Self::CSV_COLUMNS)?;
        let vec = |v: &[f64]| v.iter().map(|c| format!("{c:.17e}")).collect::<Vec<_>>().join(";");
        let num = |c: f64| format!("{c:.17e}");
        let opt = |c: Option<f64>| c.map_or(String::new(), num);
        for r in &self.rows {
            out.write_record([
                num(r.alpha),
                vec(&r.y0),
                vec(&r.y0p),
                vec(&r.p),
                vec(&r.pp),
                vec(&r.y),
                vec(&r.yp),
                vec(&r.x),
                vec(&r.xp),
                num(r.sup_lambda),
                num(r.lambda_hat),
                num(r.alpha_d2),
                num(r.alpha_chain),
                num(r.xi0_sandwich),
                num(r.xi0_upper),
                num(r.displacement),
                r.jensen_tried.to_string(),
                num(r.hessian_change),
                num(r.estimate_lhs),
                num(r.estimate_rhs),
                opt(r.gap),
                opt(r.coupled_distance),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Final diagnostics, constants and verdicts.
    pub fn summary(&self) -> Value {
        let last = self.rows.last();
        json!({
            "passed": self.passed(),
            "first_violation": self.first_violation().map(|r| r.name.clone()),
            "rows": self.rows.len(),
            "final": last.map(|r| json!({
                "alpha": r.alpha,
                "alpha_d2": r.alpha_d2,
                "alpha_chain": r.alpha_chain,
                "sup_lambda": r.sup_lambda,
                "gap": r.gap,
                "xi0_sandwich": r.xi0_sandwich,
            })),
            "strict_bound": self.strict_bound,
            "gap_bound": self.gap_bound,
            "invariants": self.invariants.iter().map(|r| json!({
                "name": r.name,
                "passed": r.passed,
                "max_violation": r.max_violation,
                "witness": r.witness,
            })).collect::<Vec<_>>(),
            "flags": self.flags,
        })
    }
}

/// Test functions `f† = f̂† ∘ s_{x_α - y_α}` and `f‡ = f̂‡ ∘ s_{x'_α - y'_α}`.
#[derive(Clone, Debug)]
pub struct TestFunctions {
    pub fhat_dagger: ScalarField,
    pub fhat_ddagger: ScalarField,
    pub f_dagger: ScalarField,
    pub f_ddagger: ScalarField,
    pub m1: f64,
    pub m2: f64,
    /// Squeeze and optimality checks.
    pub report: CheckReport,
    /// Gradient identities at `x_α` and `x'_α`.
    pub gradients: CheckReport,
}

/// Smooth-squeeze surrogate `𝔣 = ½(Π + Π⁰)` for one side.
///
/// `sigma = +1` builds the sub side from `P^α[u]`, `-1` the super side from `P_α[v]`.
#[derive(Clone)]
struct Side {
    conv: Arc<ConvolutionField>,
    v: ScalarField,
    fam: PenaltyFamily,
    bundle: XiBundle,
    eps: f64,
    phi: f64,
    sigma: f64,
}

impl Side {
    fn c(&self) -> f64 {
        1.0 / (1.0 - self.sigma * self.eps)
    }

    /// `ε(1-φ)V + εφ(Ξ⁰ + t ξ_{z1})` with gradient.
    fn penalty(&self, y: &[f64], t: f64) -> (f64, DVector<f64>) {
        let nanv = || DVector::from_element(y.len(), f64::NAN);
        let e = self.eps;
        let vv = self.v.value_unchecked(y);
        let dv = self.v.gradient(y).unwrap_or_else(|_| nanv());
        let x0 = eval_xi0(&self.fam, &self.bundle, y);
        let x1 = self.fam.xi(&self.bundle.z1, y);
        match (x0, x1) {
            (Ok(a), Ok(b)) => (
                e * (1.0 - self.phi) * vv + e * self.phi * (a.value + t * b.value),
                dv * (e * (1.0 - self.phi)) + (a.gradient + b.gradient * t) * (e * self.phi),
            ),
            _ => (f64::NAN, nanv()),
        }
    }

    /// `𝔣(y)` and its gradient.
    fn surrogate(&self, y: &[f64]) -> (f64, DVector<f64>) {
        let p = self.conv.value(y).unwrap_or(f64::NAN);
        let dp = self.conv.gradient(y).unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN));
        let (pen, dpen) = self.penalty(y, 0.5);
        (self.c() * (p - self.sigma * pen), (dp - dpen * self.sigma) * self.c())
    }

    /// `f̂ = (1 - σε) Ω(𝔣) + σ(ε(1-φ)V + εφΞ)` and its gradient.
    fn test_jet(&self, cut: CutOff, y: &[f64]) -> (f64, DVector<f64>) {
        let (s, ds) = self.surrogate(y);
        let (o, o1, _) = cut.eval(s);
        let (pen, dpen) = self.penalty(y, 1.0);
        let a = 1.0 - self.sigma * self.eps;
        (a * o + self.sigma * pen, ds * (a * o1) + dpen * self.sigma)
    }

    fn field(self, cut: CutOff, label: &str, step: f64) -> ScalarField {
        let q = self.v.dim();
        let (s1, s2) = (self.clone(), self.clone());
        let s3 = Arc::new(self);
        ScalarField::new(q, label, move |y: &[f64]| s1.test_jet(cut, y).0)
            .with_gradient(move |y: &[f64]| s2.test_jet(cut, y).1)
            .with_hessian(move |y: &[f64]| {
                let mut h = DMatrix::zeros(q, q);
                let mut t = y.to_vec();
                for i in 0..q {
                    t[i] = y[i] + step;
                    let gp = s3.test_jet(cut, &t).1;
                    t[i] = y[i] - step;
                    let gm = s3.test_jet(cut, &t).1;
                    t[i] = y[i];
                    for j in 0..q {
                        h[(j, i)] = (gp[j] - gm[j]) / (2.0 * step);
                    }
                }
                (&h + h.transpose()) * 0.5
            })
            .with_smoothness(Smoothness::C2)
    }
}

/// Build `f†`, `f‡` for one trace row and check the squeeze, optimality and
/// gradient identities `Df†(x_α) = α(x_α - y_α)`, `Df‡(x'_α) = α(y'_α - x'_α)`.
pub fn build_test_functions(prob: &DoublingProblem, lam: &Arc<LambdaField>, row: &TraceRow) -> Result<TestFunctions> {
    let alpha = lam.alpha;
    let mk = |conv: &Arc<ConvolutionField>, z0: &[f64], p: &[f64], z1: &[f64], sigma: f64| -> Result<Side> {
        Ok(Side {
            conv: Arc::clone(conv),
            v: prob.containment.v.clone(),
            fam: prob.family.clone(),
            bundle: XiBundle::new(z0.to_vec().try_into()?, p.to_vec().try_into()?, z1.to_vec().try_into()?)?,
            eps: prob.eps,
            phi: prob.phi,
            sigma,
        })
    };
    let s1 = mk(&lam.pu, &row.y0, &row.p, &row.y, 1.0)?;
    let s2 = mk(&lam.pv, &row.y0p, &row.pp, &row.yp, -1.0)?;
    let f1_at = s1.surrogate(&row.y).0;
    let f2_at = s2.surrogate(&row.yp).0;
    let mut sup_f1 = f1_at;
    let mut inf_f2 = f2_at;
    for p in prob.domain.points() {
        sup_f1 = sup_f1.max(s1.surrogate(p).0);
        inf_f2 = inf_f2.min(s2.surrogate(p).0);
    }
    let half_d2 = 0.5 * alpha * distance_sq(&row.y, &row.yp);
    let m1 = (f1_at - 1.0).min(f1_at - (f2_at - inf_f2) - half_d2);
    let m2 = (f2_at + 1.0).max(f2_at + (sup_f1 - f1_at) + half_d2);
    let step = (1e-5f64).min(1e-2 / alpha);
    let fhat_dagger = s1.clone().field(CutOff::lower(m1), "fhat_dagger", step);
    let fhat_ddagger = s2.clone().field(CutOff::upper(m2), "fhat_ddagger", step);
    let z1: Vec<f64> = row.x.iter().zip(&row.y).map(|(a, b)| a - b).collect();
    let z2: Vec<f64> = row.xp.iter().zip(&row.yp).map(|(a, b)| a - b).collect();
    let f_dagger = fhat_dagger.shifted(&z1)?.with_label("f_dagger");
    let f_ddagger = fhat_ddagger.shifted(&z2)?.with_label("f_ddagger");

    let tol = 1e-9 * (1.0 + prob.norms().0 + prob.norms().1) + alpha * 1e-18;
    let mut rep = CheckReport::new("test_functions", tol);
    // squeeze P^α[u] <= f̂†, P_α[v] >= f̂‡, equality at the optimizers
    for p in prob.domain.points() {
        let a = lam.pu.value(p)? - fhat_dagger.value_unchecked(p);
        rep.observe(p, a, 0.0, || "P^α[u] <= f̂†".into());
        let b = fhat_ddagger.value_unchecked(p) - lam.pv.value(p)?;
        rep.observe(p, b, 0.0, || "f̂‡ <= P_α[v]".into());
    }
    let eq1 = (lam.pu.value(&row.y)? - fhat_dagger.value_unchecked(&row.y)).abs();
    rep.observe(&row.y, eq1, 0.0, || "f̂†(y_α) = P^α[u](y_α)".into());
    let eq2 = (lam.pv.value(&row.yp)? - fhat_ddagger.value_unchecked(&row.yp)).abs();
    rep.observe(&row.yp, eq2, 0.0, || "f̂‡(y'_α) = P_α[v](y'_α)".into());
    // u - f† is maximal at x_α, v - f‡ minimal at x'_α
    let at1 = prob.u.value_unchecked(&row.x) - f_dagger.value_unchecked(&row.x);
    let at2 = prob.v.value_unchecked(&row.xp) - f_ddagger.value_unchecked(&row.xp);
    let mut gap1 = f64::NEG_INFINITY;
    let mut gap2 = f64::NEG_INFINITY;
    for p in prob.domain.points() {
        gap1 = gap1.max(prob.u.value_unchecked(p) - f_dagger.value_unchecked(p) - at1);
        gap2 = gap2.max(at2 - (prob.v.value_unchecked(p) - f_ddagger.value_unchecked(p)));
    }
    rep.observe(&row.x, gap1, 0.0, || "u - f† is maximal at x_α".into());
    rep.observe(&row.xp, gap2, 0.0, || "v - f‡ is minimal at x'_α".into());
    // gradients
    let gtol = 1e-4 * (1.0 + alpha);
    let h = (1e-6f64).min(1e-3 / alpha);
    let want1: Vec<f64> = row.x.iter().zip(&row.y).map(|(a, b)| alpha * (a - b)).collect();
    let want2: Vec<f64> = row.yp.iter().zip(&row.xp).map(|(a, b)| alpha * (a - b)).collect();
    let fd1 = fd_gradient_fn(|t: &[f64]| f_dagger.value_unchecked(t), &row.x, h);
    let fd2 = fd_gradient_fn(|t: &[f64]| f_ddagger.value_unchecked(t), &row.xp, h);
    let an1 = f_dagger.gradient(&row.x)?;
    let an2 = f_ddagger.gradient(&row.xp)?;
    let err = |a: &DVector<f64>, w: &[f64]| a.iter().zip(w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut grep = CheckReport::new("test_function_gradients", gtol);
    grep.observe(&row.x, err(&fd1, &want1), 0.0, || "finite-difference Df†(x_α) = α(x_α - y_α)".into());
    grep.observe(&row.xp, err(&fd2, &want2), 0.0, || "finite-difference Df‡(x'_α) = α(y'_α - x'_α)".into());
    grep.observe(&row.x, err(&an1, &want1), 0.0, || "analytic Df†(x_α) = α(x_α - y_α)".into());
    grep.observe(&row.xp, err(&an2, &want2), 0.0, || "analytic Df‡(x'_α) = α(y'_α - x'_α)".into());
    grep.detail("fd_gradient_dagger", json!(fd1.as_slice()));
    grep.detail("fd_gradient_ddagger", json!(fd2.as_slice()));
    rep.detail("surrogate", json!("f = (Pi + Pi0)/2"));
    rep.detail("m1", json!(m1));
    rep.detail("m2", json!(m2));
    Ok(TestFunctions { fhat_dagger, fhat_ddagger, f_dagger, f_ddagger, m1, m2, report: rep, gradients: grep })
}

/// `H f†(x_α)/(1-ε) - H f‡(x'_α)/(1+ε)`.
pub fn hamiltonian_gap(prob: &DoublingProblem, row: &TraceRow, tf: &TestFunctions) -> Result<f64> {
    let e = prob.eps;
    Ok(eval(&prob.op, &tf.f_dagger, &row.x)? / (1.0 - e) - eval(&prob.op, &tf.f_ddagger, &row.xp)? / (1.0 + e))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    distance_sq(a, b).sqrt()
}

/// Run the doubling construction along an increasing α-schedule.
///
/// Invariants are recorded as they are evaluated; `Err` is returned only
/// for searches that cannot complete.
pub fn run_trace(prob: &DoublingProblem, cfg: &TraceConfig) -> Result<DoublingTrace> {
    let sched = &cfg.schedule;
    if sched.is_empty() {
        return Err(Error::invalid("α-schedule is empty"));
    }
    if sched.iter().any(|a| !(*a > 1.0) || !a.is_finite()) || sched.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("α-schedule must be strictly increasing with every α > 1"));
    }
    let sb = strict_bound(prob)?;
    let gb = gap_bound(prob, &sb)?;
    let e = prob.eps;
    let e2 = 1.0 - e * e;
    let (eps1, eps2) = prob.jensen_weights();
    let precision = cfg.search.tol.max(1e-12);
    let kappa_xi = match prob.family.collection {
        crate::penalty::Collection::Quadratic => 1.0,
        _ => crate::penalty::certify_family(
            &prob.family,
            &SampleCloud::ball(&vec![0.0; prob.dim()], 2.0, 8, 3)?,
            &SampleCloud::ball(&vec![0.0; prob.dim()], 1.0, 16, 4)?,
            5,
        )?
        .kappa_xi_certified,
    };
    let mut sup_k_gap = f64::NEG_INFINITY;
    let mut inf_fix = f64::INFINITY;
    let mut sup_kv = f64::NEG_INFINITY;
    for p in prob.k.points() {
        let (a, b) = (prob.u.value(p)?, prob.v.value(p)?);
        sup_k_gap = sup_k_gap.max(a - b);
        inf_fix = inf_fix.min(a / (1.0 - e) + b / (1.0 + e));
        sup_kv = sup_kv.max(prob.containment.v.value(p)?);
    }
    let c_eps_phi = 2.0 / e2 * (1.0 - prob.phi) * sup_kv - inf_fix;

    let mut inv: BTreeMap<&'static str, CheckReport> = BTreeMap::new();
    let mesh_tol = 1e-9 + precision;
    for (name, tol) in [
        ("jensen_displacement", mesh_tol),
        ("xi0_sandwich", 1e-9),
        ("lambda_hat_sandwich", 1e-9),
        ("sup_lambda_nonincreasing", 1e-9),
        ("localized_estimate", 1e-9),
        ("jensen_sandwich", 1e-9),
    ] {
        inv.insert(name, CheckReport::new(name, tol));
    }
    let mut rows: Vec<TraceRow> = vec![];
    let mut tf_reports: BTreeMap<String, CheckReport> = BTreeMap::new();
    let mut gaps = vec![];
    for &alpha in sched {
        let lam = assemble_lambda(prob, alpha)?;
        let mx = maximize_lambda(prob, &lam, &cfg.search)?;
        let field = lam.to_field();
        let mut jc = JensenConfig::new(1.0 / alpha, eps1, eps2, prob.lambda_semi_convexity(alpha));
        jc.kappa_xi = kappa_xi;
        jc.candidates = cfg.jensen_candidates;
        let jo = jensen_perturb(&field, (&mx.y, &mx.yp), &prob.family, &jc)?;
        let sup_lambda = jo.sup_phi;
        let js = check_jensen_sandwich(&jo, &jc, alpha * precision * precision);
        let a_pt = [alpha];
        inv.get_mut("jensen_sandwich").unwrap().observe(&a_pt, js.max_violation, 0.0, || format!("α = {alpha}: worst Jensen sandwich item"));
        let (y, yp) = (jo.x1.clone(), jo.y1.clone());
        let ex = lam.pu.eval(&y)?;
        let exp = lam.pv.eval(&yp)?;
        let (x, xp) = (ex.argopt.to_vec(), exp.argopt.to_vec());
        let b1 = XiBundle::new(jo.x0.clone().try_into()?, jo.p1.clone().try_into()?, y.clone().try_into()?)?;
        let b2 = XiBundle::new(jo.y0.clone().try_into()?, jo.p2.clone().try_into()?, yp.clone().try_into()?)?;
        let xi01 = eval_xi0(&prob.family, &b1, &y)?.value;
        let xi02 = eval_xi0(&prob.family, &b2, &yp)?.value;
        debug_assert!(eval_xi(&prob.family, &b1, &y)?.value.is_finite());
        let sandwich = -eps1 * xi01 - eps2 * xi02;
        let upper = prob.phi * 2.0 * e / (e2 * alpha);
        let lambda_hat = lam.value(&y, &yp)? - eps1 * xi01 - eps2 * xi02;
        let displacement = dist(&y, &jo.x0).max(dist(&yp, &jo.y0));
        let chain = dist(&x, &y) + dist(&y, &yp) + dist(&yp, &x);
        let chain = {
            let _ = chain;
            dist(&x, &y) + dist(&y, &yp) + dist(&yp, &xp)
        };
        let est_rhs = prob.u.value_unchecked(&x) / (1.0 - e) - prob.v.value_unchecked(&xp) / (1.0 + e) + e * (c_eps_phi + prob.phi * 2.0 / (e2 * alpha));
        let mut row = TraceRow {
            alpha,
            y0: jo.x0.clone(),
            y0p: jo.y0.clone(),
            p: jo.p1.clone(),
            pp: jo.p2.clone(),
            y,
            yp,
            x,
            xp,
            sup_lambda,
            lambda_hat,
            alpha_d2: alpha * distance_sq(&jo.x0, &jo.y0),
            alpha_chain: alpha * chain * chain,
            xi0_sandwich: sandwich,
            xi0_upper: upper,
            displacement,
            jensen_tried: jo.candidates_tried,
            hessian_change: jo.hessian_change,
            convolution_ambiguous: ex.ambiguous || exp.ambiguous,
            estimate_lhs: sup_k_gap,
            estimate_rhs: est_rhs,
            gap: None,
            coupled_distance: None,
        };
        inv.get_mut("jensen_displacement").unwrap().observe(&a_pt, displacement, 1.0 / alpha, || format!("α = {alpha}: d(y_α, y_α0) <= 1/α"));
        let xs = inv.get_mut("xi0_sandwich").unwrap();
        xs.observe(&a_pt, -sandwich, 0.0, || format!("α = {alpha}: Ξ⁰ term >= 0"));
        xs.observe(&a_pt, sandwich, upper, || format!("α = {alpha}: Ξ⁰ term <= φ 2ε/((1-ε²)α)"));
        let ls = inv.get_mut("lambda_hat_sandwich").unwrap();
        ls.observe(&a_pt, sup_lambda, lambda_hat, || format!("α = {alpha}: sup Λ <= Λ̂(y_α, y'_α)"));
        ls.observe(&a_pt, lambda_hat, sup_lambda + upper, || format!("α = {alpha}: Λ̂(y_α, y'_α) <= sup Λ + φ 2ε/((1-ε²)α)"));
        if let Some(prev) = rows.last() {
            let prev_sup = prev.sup_lambda;
            inv.get_mut("sup_lambda_nonincreasing").unwrap().observe(&a_pt, sup_lambda, prev_sup, || format!("α = {alpha}: sup Λ_α <= previous row"));
        }
        inv.get_mut("localized_estimate").unwrap().observe(&a_pt, row.estimate_lhs, row.estimate_rhs, || format!("α = {alpha}: sup_K(u - v) <= u(x_α)/(1-ε) - v(x'_α)/(1+ε) + ε(c + o(1))"));
        if let Some(c) = &prob.coupling {
            let g = shifted_distance_field(alpha, &row.x, &row.xp, &row.y, &row.yp);
            row.coupled_distance = eval_coupling(c, &g, &row.x, &row.xp).ok();
        }
        if cfg.test_functions {
            let tf = build_test_functions(prob, &lam, &row)?;
            row.gap = Some(hamiltonian_gap(prob, &row, &tf)?);
            gaps.push(row.gap.unwrap());
            for r in [tf.report, tf.gradients] {
                let k = r.name.clone();
                let merged = match tf_reports.remove(&k) {
                    None => r,
                    Some(prev) => prev.merge(r),
                };
                tf_reports.insert(k, merged);
            }
        }
        rows.push(row);
    }
    let mut invariants: Vec<CheckReport> = inv.into_values().collect();
    invariants.extend(tf_reports.into_values());
    let last = rows.last().expect("schedule is non-empty");
    let mut conv = CheckReport::new("optimizer_convergence", 0.0);
    conv.observe(&[last.alpha], last.alpha_d2, cfg.final_alpha_d2, || "final α d²(y_α0, y'_α0) below threshold".into());
    if let Some(t) = cfg.final_alpha_chain {
        conv.observe(&[last.alpha], last.alpha_chain, t, || "final α(d(x,y) + d(y,y') + d(y',x'))² below threshold".into());
    }
    invariants.push(conv);
    let mut khat = CheckReport::new("limit_in_khat", 1e-9);
    for (lbl, z) in [("y_α", &last.y), ("y'_α", &last.yp)] {
        khat.observe(z, prob.containment.v.value(z)?, sb.level, || format!("V({lbl}) <= level of K̂"));
    }
    invariants.push(khat);
    if let Some(g) = last.gap {
        let mut gr = CheckReport::new("hamiltonian_gap", 1e-9);
        gr.observe(&[last.alpha], g, gb.bound, || "final Hamiltonian gap <= ε(C⁰ + C_φ)".into());
        gr.detail("running_min", json!(gaps.iter().copied().fold(f64::INFINITY, f64::min)));
        invariants.push(gr);
    }
    let mut flags = BTreeMap::new();
    if rows.len() < 2 {
        flags.insert("trend".into(), json!("no trend data"));
    } else {
        let d2: Vec<f64> = rows.iter().map(|r| r.alpha_d2).collect();
        let ch: Vec<f64> = rows.iter().map(|r| r.alpha_chain).collect();
        let mono = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        flags.insert("alpha_d2_monotone".into(), json!(mono(&d2)));
        flags.insert("alpha_chain_monotone".into(), json!(mono(&ch)));
        if !gaps.is_empty() {
            flags.insert("gap_monotone".into(), json!(mono(&gaps)));
        }
    }
    flags.insert("surrogate".into(), json!("smooth squeeze replaced by the midpoint (Pi + Pi0)/2"));
    flags.insert("gap_constants".into(), json!("C0 = 2 c_V/(1-eps^2), C_phi = 2 phi/(1-eps^2) sup over Khat of (A+B) Xi_{z,0,z}(z)"));
    flags.insert("ambiguous_rows".into(), json!(rows.iter().filter(|r| r.convolution_ambiguous).count()));
    Ok(DoublingTrace { rows, invariants, strict_bound: sb, gap_bound: gb, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcspace::PiecewiseLinear1d;
    use crate::operators::DriftConvexOp;

    fn zero_op() -> OperatorSpec {
        OperatorSpec::Drift(DriftConvexOp::new(1, |_x: &[f64]| DVector::zeros(1)))
    }

    fn problem(u: ScalarField, v: ScalarField, eps: f64, phi: f64) -> DoublingProblem {
        DoublingProblem::new(
            u,
            v,
            Containment::default_log(1),
            PenaltyFamily::quadratic(1, 3.0).unwrap(),
            eps,
            phi,
            zero_op(),
            None,
            1.0,
            ScalarField::constant(1, 0.0),
            ScalarField::constant(1, 0.0),
            SampleCloud::explicit(vec![vec![0.0]]).unwrap(),
            SampleCloud::grid(&[-4.0], &[4.0], &[81]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constants_pass_through_lambda() {
        let p = problem(ScalarField::constant(1, 1.0), ScalarField::constant(1, 0.0), 0.5, 1.0);
        let lam = assemble_lambda(&p, 4.0).unwrap();
        let mx = maximize_lambda(&p, &lam, &SearchConfig::default()).unwrap();
        assert!((mx.value - 2.0).abs() < 1e-12, "{}", mx.value);
        assert!(dist(&mx.y, &mx.yp) < 1e-9);
    }

    #[test]
    fn zero_functions_give_diagonal_optimum() {
        let p = problem(ScalarField::constant(1, 0.0), ScalarField::constant(1, 0.0), 0.5, 1.0);
        let lam = assemble_lambda(&p, 8.0).unwrap();
        assert_eq!(lam.value(&[0.3], &[0.3]).unwrap(), 0.0);
        assert!((lam.value(&[0.3], &[0.1]).unwrap() + 4.0 * 0.04).abs() < 1e-12);
    }

    #[test]
    fn jensen_accepts_zero_slope_on_concave_quadratic() {
        let phi = ScalarField::new(2, "phi", |z: &[f64]| -(z[0] - 0.2).powi(2) - 2.0 * (z[1] + 0.1).powi(2) - (z[0] - z[1]).powi(2));
        let (x0, y0) = {
            // maximizer of the quadratic: solve the 2×2 system
            let m = DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 6.0]);
            let b = DVector::from_vec(vec![0.4, -0.4]);
            let s = m.lu().solve(&b).unwrap();
            (s[0], s[1])
        };
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap();
        let cfg = JensenConfig::new(0.1, 0.05, 0.04, 8.0);
        let out = jensen_perturb(&phi, (&[x0], &[y0]), &fam, &cfg).unwrap();
        assert_eq!(out.candidates_tried, 1);
        assert!(out.p1 == vec![0.0] && out.p2 == vec![0.0]);
        assert!((out.x1[0] - x0).abs() < 1e-9 && (out.y1[0] - y0).abs() < 1e-9);
        assert!(check_jensen_sandwich(&out, &cfg, 0.0).passed);
    }

    #[test]
    fn jensen_ignores_kink_away_from_max() {
        let phi = ScalarField::new(2, "phi", |z: &[f64]| -(z[0] - z[1]).powi(2) - z[0] * z[0] - z[1] * z[1] + 0.3 * (z[0] - 0.5).max(0.0));
        // grid oracle
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let (x, y) = (-1.0 + i as f64 * 0.005, -1.0 + j as f64 * 0.005);
                let v = phi.value(&[x, y]).unwrap();
                if v > best.0 {
                    best = (v, x, y);
                }
            }
        }
        assert!(best.1.abs() < 1e-9 && best.2.abs() < 1e-9);
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap();
        let cfg = JensenConfig::new(0.05, 0.05, 0.05, 6.0);
        let out = jensen_perturb(&phi, (&[0.0], &[0.0]), &fam, &cfg).unwrap();
        assert_eq!(out.candidates_tried, 1);
        assert!(out.x1[0].abs() < 1e-9 && out.y1[0].abs() < 1e-9);
    }

    #[test]
    fn jensen_rejects_bad_weights() {
        let phi = ScalarField::new(2, "phi", |z: &[f64]| -z[0] * z[0] - z[1] * z[1]);
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap();
        let cfg = JensenConfig::new(0.1, 0.6, 0.6, 1.0);
        assert!(matches!(jensen_perturb(&phi, (&[0.0], &[0.0]), &fam, &cfg), Err(Error::Precondition(_))));
    }

    #[test]
    fn strict_bound_radius_matches_closed_form() {
        let u = ScalarField::piecewise_linear("u", PiecewiseLinear1d::new(vec![-1.0, 1.0], vec![1.0, -1.0]).unwrap());
        let v = ScalarField::piecewise_linear("v", PiecewiseLinear1d::new(vec![-1.0, 1.0], vec![-1.0, 1.0]).unwrap());
        let p = problem(u, v, 0.5, 1.0);
        let sb = strict_bound(&p).unwrap();
        assert!((sb.level - 4.0).abs() < 1e-12);
        assert!((sb.khat_radius.unwrap() - 10.354).abs() < 1e-3);
    }

    #[test]
    fn symmetric_trace_has_zero_distances() {
        let p = problem(ScalarField::constant(1, 0.3), ScalarField::constant(1, 0.3), 0.1, 0.5);
        let cfg = TraceConfig { schedule: vec![2.0, 4.0, 8.0], ..Default::default() };
        let t = run_trace(&p, &cfg).unwrap();
        assert!(t.passed(), "{:?}", t.first_violation());
        for r in &t.rows {
            assert!(r.alpha_d2 < 1e-18 && r.alpha_chain < 1e-12, "{r:?}");
            assert_eq!(r.gap, Some(0.0));
        }
    }
}
