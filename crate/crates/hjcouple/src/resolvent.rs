//! Exact resolvent solves `f - λ H f = h` on finite state spaces, and the
//! contraction and strict comparison checks built on them.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::funcspace::{dot, CloudDescriptor, Point, SampleCloud};
use crate::operators::{DriftConvexOp, OperatorSpec};
use crate::report::CheckReport;

const RESIDUAL_TOL: f64 = 1e-9;
const MAX_POLICY_ROUNDS: usize = 500;
const CYCLE_GUARD: usize = 100;

/// Discrete Isaacs problem: `f_i - λ max_a min_b { (L_ab f)_i - I_ab,i } = h_i`.
///
/// A cost of `+∞` marks the control pair as absent at that state.
#[derive(Clone, Debug)]
pub struct FiniteProblem {
    pub states: Vec<Point>,
    generators: Arc<Vec<Vec<DMatrix<f64>>>>,
    cost: Arc<Vec<Vec<DVector<f64>>>>,
    pub lambda: f64,
    pub h: DVector<f64>,
    /// Discretization notes (mesh, truncation, Legendre grid).
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl FiniteProblem {
    pub fn new(
        states: Vec<Point>,
        generators: Vec<Vec<DMatrix<f64>>>,
        cost: Vec<Vec<DVector<f64>>>,
        lambda: f64,
        h: DVector<f64>,
    ) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(Error::invalid("finite problem has no states"));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda = {lambda} must be finite and > 0")));
        }
        if h.len() != n {
            return Err(Error::invalid(format!("resolvent.h has length {}, expected {n}", h.len())));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("resolvent.h".into()));
        }
        let n1 = generators.len();
        let n2 = generators.first().map_or(0, |r| r.len());
        if n1 == 0 || n2 == 0 || generators.iter().any(|r| r.len() != n2) {
            return Err(Error::invalid("generator table must be a non-empty rectangle"));
        }
        if cost.len() != n1 || cost.iter().any(|r| r.len() != n2) {
            return Err(Error::invalid("cost table shape differs from generator table"));
        }
        for (a, row) in generators.iter().enumerate() {
            for (b, l) in row.iter().enumerate() {
                if l.shape() != (n, n) {
                    return Err(Error::invalid(format!("generator ({a},{b}) is {:?}, expected {n}×{n}", l.shape())));
                }
                if cost[a][b].len() != n || cost[a][b].iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
                    return Err(Error::invalid(format!("cost ({a},{b}) must have {n} entries in (-∞, +∞]")));
                }
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        let v = l[(i, j)];
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!("generator ({a},{b}) entry ({i},{j})")));
                        }
                        if i != j && v < 0.0 {
                            return Err(Error::invalid(format!("generator ({a},{b}) has negative rate {v} at ({i},{j})")));
                        }
                        s += v;
                    }
                    if s > 1e-12 * (1.0 + l[(i, i)].abs()) {
                        return Err(Error::invalid(format!("generator ({a},{b}) row {i} sums to {s} > 0")));
                    }
                }
            }
        }
        if (0..n).any(|i| cost.iter().flatten().all(|c| c[i] == f64::INFINITY)) {
            return Err(Error::invalid("some state has no control with finite cost"));
        }
        Ok(Self {
            states,
            generators: Arc::new(generators),
            cost: Arc::new(cost),
            lambda,
            h,
            notes: BTreeMap::new(),
        })
    }

    /// A single uncontrolled generator with zero cost.
    pub fn single(states: Vec<Point>, l: DMatrix<f64>, lambda: f64, h: DVector<f64>) -> Result<Self> {
        let n = states.len();
        Self::new(states, vec![vec![l]], vec![vec![DVector::zeros(n)]], lambda, h)
    }

    /// Same generators and costs with new data `h`.
    pub fn with_h(&self, h: DVector<f64>) -> Result<Self> {
        if h.len() != self.n() {
            return Err(Error::invalid(format!("h has length {}, expected {}", h.len(), self.n())));
        }
        let mut p = self.clone();
        p.h = h;
        Ok(p)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda = {lambda} must be finite and > 0")));
        }
        let mut p = self.clone();
        p.lambda = lambda;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.generators.len(), self.generators[0].len())
    }

    pub fn generator(&self, a: usize, b: usize) -> &DMatrix<f64> {
        &self.generators[a][b]
    }

    pub fn cost(&self, a: usize, b: usize) -> &DVector<f64> {
        &self.cost[a][b]
    }

    pub fn cost_is_zero(&self) -> bool {
        self.cost.iter().flatten().all(|c| c.iter().all(|v| *v == 0.0 || *v == f64::INFINITY))
    }

    /// Rows whose total rate is negative (mass leaks through truncation).
    pub fn leaking_rows(&self) -> Vec<usize> {
        let n = self.n();
        (0..n)
            .filter(|&i| self.generators.iter().flatten().any(|l| l.row(i).sum() < -1e-12))
            .collect()
    }

    fn entry(&self, a: usize, b: usize, i: usize, f: &DVector<f64>) -> Option<f64> {
        let c = self.cost[a][b][i];
        c.is_finite().then(|| self.generators[a][b].row(i).dot(&f.transpose()) - c)
    }

    fn payoff(&self, i: usize, f: &DVector<f64>) -> Vec<Vec<Option<f64>>> {
        let (n1, n2) = self.shape();
        (0..n1).map(|a| (0..n2).map(|b| self.entry(a, b, i, f)).collect()).collect()
    }

    /// `(H f)_i` in sup-inf order.
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n(), (0..self.n()).map(|i| crate::operators::sup_inf(&self.payoff(i, f)).unwrap_or(f64::NAN)))
    }

    /// `(H f)_i` in inf-sup order.
    pub fn apply_inf_sup(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n(), (0..self.n()).map(|i| crate::operators::inf_sup(&self.payoff(i, f)).unwrap_or(f64::NAN)))
    }

    /// `max_i |inf-sup - sup-inf|` of the discrete payoff at `f`.
    pub fn isaacs_gap(&self, f: &DVector<f64>) -> f64 {
        let (si, is) = (self.apply(f), self.apply_inf_sup(f));
        si.iter().zip(is.iter()).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max)
    }

    /// `‖f - λ H f - h‖_∞` (sup-inf order).
    pub fn residual(&self, f: &DVector<f64>) -> f64 {
        (f - self.apply(f) * self.lambda - &self.h).amax()
    }

    fn residual_with(&self, f: &DVector<f64>, sup_inf: bool) -> f64 {
        let hf = if sup_inf { self.apply(f) } else { self.apply_inf_sup(f) };
        (f - hf * self.lambda - &self.h).amax()
    }

    /// Solve `(I - λ L_π) f = h - λ I_π` for a fixed choice per state.
    fn solve_policy(&self, pol: &[(usize, usize)]) -> Result<DVector<f64>> {
        let n = self.n();
        let mut m = DMatrix::identity(n, n);
        let mut rhs = self.h.clone();
        for (i, &(a, b)) in pol.iter().enumerate() {
            let l = &self.generators[a][b];
            for j in 0..n {
                m[(i, j)] -= self.lambda * l[(i, j)];
            }
            rhs[i] -= self.lambda * self.cost[a][b][i];
        }
        m.lu().solve(&rhs).ok_or_else(|| Error::numerical("singular resolvent system"))
    }

    /// Largest exit rate, used by value iteration.
    fn max_rate(&self) -> f64 {
        let n = self.n();
        self.generators.iter().flatten().flat_map(|l| (0..n).map(move |i| -l[(i, i)])).fold(0.0, f64::max)
    }
}

/// Solution of a resolvent problem.
#[derive(Clone, Debug, Serialize)]
pub struct ResolventSolution {
    pub f: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub policy: Option<Vec<(usize, usize)>>,
    /// `max |f_{sup-inf} - f_{inf-sup}|` when both control sets are nontrivial.
    pub order_gap: Option<f64>,
    /// Isaacs gap of the discrete payoff at the solution.
    pub isaacs_gap: f64,
    pub method: &'static str,
}

impl ResolventSolution {
    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.f)
    }
}

fn finish(p: &FiniteProblem, f: DVector<f64>, iterations: usize, policy: Option<Vec<(usize, usize)>>, method: &'static str, sup_inf: bool) -> Result<ResolventSolution> {
    let residual = p.residual_with(&f, sup_inf);
    if !(residual <= RESIDUAL_TOL * (1.0 + p.h.amax())) {
        return Err(Error::numerical(format!("{method}: residual {residual:.3e} exceeds tolerance")));
    }
    Ok(ResolventSolution {
        isaacs_gap: p.isaacs_gap(&f),
        f: f.iter().copied().collect(),
        residual,
        iterations,
        policy,
        order_gap: None,
        method,
    })
}

/// Direct solve of `(I - λL) f = h - λ I` for an uncontrolled problem.
pub fn solve_linear(p: &FiniteProblem) -> Result<ResolventSolution> {
    if p.shape() != (1, 1) {
        return Err(Error::invalid("solve_linear needs a single control"));
    }
    let pol = vec![(0, 0); p.n()];
    let f = p.solve_policy(&pol)?;
    finish(p, f, 1, None, "linear", true)
}

/// Howard policy iteration over `options(i)` at each state, maximizing or minimizing.
///
/// Values are monotone across rounds; a violation beyond `1e-9` is an error.
fn howard(
    p: &FiniteProblem,
    options: &dyn Fn(usize) -> Vec<(usize, usize)>,
    maximize: bool,
    mut pol: Vec<(usize, usize)>,
) -> Result<(DVector<f64>, Vec<(usize, usize)>, usize)> {
    let sgn = if maximize { 1.0 } else { -1.0 };
    let mut prev: Option<DVector<f64>> = None;
    for round in 1..=MAX_POLICY_ROUNDS {
        let f = p.solve_policy(&pol)?;
        if let Some(pf) = &prev {
            let worst = (pf - &f).iter().map(|d| sgn * d).fold(f64::NEG_INFINITY, f64::max);
            if worst > 1e-9 * (1.0 + f.amax()) {
                return Err(Error::numerical(format!("policy iteration lost monotonicity by {worst:.3e}")));
            }
        }
        let mut changed = false;
        for i in 0..p.n() {
            let (ca, cb) = pol[i];
            let cur = p.entry(ca, cb, i, &f).map_or(f64::NEG_INFINITY, |v| sgn * v);
            let mut best = (cur, pol[i]);
            for (a, b) in options(i) {
                if let Some(v) = p.entry(a, b, i, &f) {
                    if sgn * v > best.0 + 1e-12 * (1.0 + v.abs()) {
                        best = (sgn * v, (a, b));
                    }
                }
            }
            if best.1 != pol[i] {
                pol[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            return Ok((f, pol, round));
        }
        prev = Some(f);
    }
    Err(Error::numerical("policy iteration did not converge"))
}

fn first_finite(p: &FiniteProblem, i: usize, fixed_a: Option<usize>, fixed_b: Option<usize>) -> Option<(usize, usize)> {
    let (n1, n2) = p.shape();
    for a in 0..n1 {
        for b in 0..n2 {
            if fixed_a.is_some_and(|x| x != a) || fixed_b.is_some_and(|x| x != b) {
                continue;
            }
            if p.cost[a][b][i].is_finite() {
                return Some((a, b));
            }
        }
    }
    None
}

/// Solve the Bellman or Isaacs resolvent.
///
/// Bellman forms use Howard policy iteration. Isaacs forms alternate best
/// responses (outer player improves against the inner player's optimal
/// reply); after 100 rounds without settling they fall back to value
/// iteration, or fail if the discrete Isaacs gap is nonzero. When both
/// control sets are nontrivial the inf-sup order is solved too and the
/// difference is recorded.
pub fn solve_bellman_isaacs(p: &FiniteProblem) -> Result<ResolventSolution> {
    let (n1, n2) = p.shape();
    let n = p.n();
    if (n1, n2) == (1, 1) {
        return solve_linear(p);
    }
    if n2 == 1 {
        let init = (0..n).map(|i| first_finite(p, i, None, Some(0)).unwrap_or((0, 0))).collect();
        let opts = |_: usize| (0..n1).map(|a| (a, 0)).collect::<Vec<_>>();
        let (f, pol, it) = howard(p, &opts, true, init)?;
        return finish(p, f, it, Some(pol), "howard_max", true);
    }
    if n1 == 1 {
        let init = (0..n).map(|i| first_finite(p, i, Some(0), None).unwrap_or((0, 0))).collect();
        let opts = |_: usize| (0..n2).map(|b| (0, b)).collect::<Vec<_>>();
        let (f, pol, it) = howard(p, &opts, false, init)?;
        return finish(p, f, it, Some(pol), "howard_min", true);
    }
    let mut si = game(p, true)?;
    let is = game(p, false)?;
    si.order_gap = Some(si.f.iter().zip(&is.f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    Ok(si)
}

/// Alternating best response; `sup_inf` selects which player moves outside.
fn game(p: &FiniteProblem, sup_inf: bool) -> Result<ResolventSolution> {
    let (n1, n2) = p.shape();
    let n = p.n();
    // outer choice per state: an index into the outer player's controls
    let outer_n = if sup_inf { n1 } else { n2 };
    let mut outer: Vec<usize> = (0..n)
        .map(|i| {
            (0..outer_n)
                .find(|&o| if sup_inf { first_finite(p, i, Some(o), None).is_some() } else { first_finite(p, i, None, Some(o)).is_some() })
                .unwrap_or(0)
        })
        .collect();
    let mut total = 0;
    let mut last = None;
    for _ in 0..CYCLE_GUARD {
        let o2 = outer.clone();
        let opts = move |i: usize| -> Vec<(usize, usize)> {
            if sup_inf {
                (0..n2).map(|b| (o2[i], b)).collect()
            } else {
                (0..n1).map(|a| (a, o2[i])).collect()
            }
        };
        let init: Vec<(usize, usize)> = (0..n)
            .map(|i| {
                let pick = if sup_inf { first_finite(p, i, Some(outer[i]), None) } else { first_finite(p, i, None, Some(outer[i])) };
                pick.unwrap_or((0, 0))
            })
            .collect();
        let (f, pol, it) = howard(p, &opts, !sup_inf, init)?;
        total += it;
        let mut changed = false;
        for i in 0..n {
            let m = p.payoff(i, &f);
            let score = |o: usize| -> Option<f64> {
                let vals: Vec<f64> = if sup_inf { m[o].iter().flatten().copied().collect() } else { m.iter().filter_map(|r| r[o]).collect() };
                if vals.is_empty() {
                    None
                } else if sup_inf {
                    Some(vals.iter().copied().fold(f64::INFINITY, f64::min))
                } else {
                    Some(-vals.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                }
            };
            let cur = score(outer[i]).unwrap_or(f64::NEG_INFINITY);
            let mut best = (cur, outer[i]);
            for o in 0..outer_n {
                if let Some(s) = score(o) {
                    if s > best.0 + 1e-12 * (1.0 + s.abs()) {
                        best = (s, o);
                    }
                }
            }
            if best.1 != outer[i] {
                outer[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            let method = if sup_inf { "best_response_sup_inf" } else { "best_response_inf_sup" };
            return finish(p, f, total, Some(pol), method, sup_inf);
        }
        last = Some(f);
    }
    let f0 = last.unwrap_or_else(|| DVector::zeros(n));
    let gap = p.isaacs_gap(&f0);
    if gap > 1e-9 {
        return Err(Error::precondition(format!(
            "best responses cycle for {CYCLE_GUARD} rounds and the discrete Isaacs gap is {gap:.3e}: sup and inf cannot be interchanged"
        )));
    }
    value_iteration(p, f0, sup_inf, total)
}

/// Uniformized value iteration `f ← (h + λ(H f + c f)) / (1 + λ c)`.
fn value_iteration(p: &FiniteProblem, mut f: DVector<f64>, sup_inf: bool, prior: usize) -> Result<ResolventSolution> {
    let c = p.max_rate();
    let lam = p.lambda;
    for k in 1..=2_000_000 {
        let hf = if sup_inf { p.apply(&f) } else { p.apply_inf_sup(&f) };
        let next = (&p.h + (hf + &f * c) * lam) / (1.0 + lam * c);
        let step = (&next - &f).amax();
        f = next;
        if step <= 1e-12 * (1.0 + f.amax()) {
            return finish(p, f, prior + k, None, "value_iteration", sup_inf);
        }
    }
    Err(Error::numerical("value iteration did not converge"))
}

fn solve_any(p: &FiniteProblem) -> Result<ResolventSolution> {
    solve_bellman_isaacs(p)
}

/// `max(R h1 - R h2) <= max(h1 - h2)` for every pair, plus monotonicity
/// `R min(h1, h2) <= R h1, R h2`. With zero cost also `R h >= 0` for
/// `h >= 0` and `‖R h‖ <= ‖h‖`.
pub fn verify_contraction(p: &FiniteProblem, pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<CheckReport> {
    let zero_cost = p.cost_is_zero();
    let rows: Vec<Result<Vec<(f64, f64, String)>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (h1, h2))| {
            let s1 = solve_any(&p.with_h(h1.clone())?)?;
            let s2 = solve_any(&p.with_h(h2.clone())?)?;
            let hm = h1.zip_map(h2, f64::min);
            let sm = solve_any(&p.with_h(hm.clone())?)?;
            let (f1, f2, fm) = (s1.vector(), s2.vector(), sm.vector());
            let lhs = (&f1 - &f2).max();
            let rhs = (h1 - h2).max();
            let mut out = vec![(lhs, rhs, format!("pair {k}: max(Rh1 - Rh2) <= max(h1 - h2)"))];
            out.push(((&fm - &f1).max().max((&fm - &f2).max()), 0.0, format!("pair {k}: R min(h1, h2) <= R h1, R h2")));
            if zero_cost {
                for (h, f) in [(h1, &f1), (h2, &f2)] {
                    out.push((f.amax(), h.amax(), format!("pair {k}: ‖Rh‖ <= ‖h‖")));
                    if h.min() >= 0.0 {
                        out.push((-f.min(), 0.0, format!("pair {k}: h >= 0 ⇒ Rh >= 0")));
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut rep = CheckReport::new("contraction", 1e-9);
    let mut passed_pairs = 0;
    for (k, row) in rows.into_iter().enumerate() {
        let mut ok = true;
        for (lhs, rhs, note) in row? {
            ok &= lhs - rhs <= 1e-9;
            rep.observe(&[k as f64], lhs, rhs, || note);
        }
        passed_pairs += usize::from(ok);
    }
    rep.detail("pairs", json!(pairs.len()));
    rep.detail("pairs_passed", json!(passed_pairs));
    rep.detail("leaking_rows", json!(p.leaking_rows().len()));
    Ok(rep)
}

/// Constants of the strict estimate for one pair of solutions.
#[derive(Clone, Debug, Serialize)]
pub struct StrictEstimate {
    pub c_v: f64,
    pub level: f64,
    pub khat: Vec<usize>,
    pub c_eps: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// `sup_i sup_{a,b} (L_ab V)_i - I_ab,i` over finite entries.
pub fn discrete_lyapunov_bound(p: &FiniteProblem, v: &DVector<f64>) -> Result<f64> {
    if v.len() != p.n() {
        return Err(Error::invalid("containment vector length differs from the state count"));
    }
    let (n1, n2) = p.shape();
    let mut best = f64::NEG_INFINITY;
    for i in 0..p.n() {
        for a in 0..n1 {
            for b in 0..n2 {
                if let Some(x) = p.entry(a, b, i, v) {
                    best = best.max(x);
                }
            }
        }
    }
    Ok(best)
}

/// Strict estimate for the solutions `u = R h1`, `v = R h2`.
pub fn strict_estimate(
    p: &FiniteProblem,
    vfun: &DVector<f64>,
    k: &[usize],
    eps: f64,
    u: &DVector<f64>,
    v: &DVector<f64>,
    h1: &DVector<f64>,
    h2: &DVector<f64>,
) -> Result<StrictEstimate> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("ε = {eps} must lie in (0, 1)")));
    }
    if k.is_empty() || k.iter().any(|&i| i >= p.n()) {
        return Err(Error::invalid("compact K must be a non-empty set of state indices"));
    }
    if vfun.min() < 0.0 {
        return Err(Error::invalid("containment vector must be >= 0"));
    }
    let c_v = discrete_lyapunov_bound(p, vfun)?;
    if !c_v.is_finite() {
        return Err(Error::precondition("Lyapunov bound c_V is not finite"));
    }
    let sup_k_v = k.iter().map(|&i| vfun[i]).fold(f64::NEG_INFINITY, f64::max);
    let level = (u.amax() + v.amax()) / eps + sup_k_v;
    let khat: Vec<usize> = (0..p.n()).filter(|&i| vfun[i] <= level).collect();
    let inf_k = k.iter().map(|&i| u[i] / (1.0 - eps) - v[i] / (1.0 + eps)).fold(f64::INFINITY, f64::min);
    let c_eps = 2.0 / (1.0 - eps * eps) * (sup_k_v + p.lambda * c_v) + (h1.amax() + h2.amax()) / (1.0 - eps) - inf_k;
    let lhs = k.iter().map(|&i| u[i] - v[i]).fold(f64::NEG_INFINITY, f64::max);
    let rhs = eps * c_eps + khat.iter().map(|&i| h1[i] - h2[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(StrictEstimate { c_v, level, khat, c_eps, lhs, rhs })
}

/// `max_K(R h1 - R h2) <= ε C_ε + max_{K̂}(h1 - h2)` for every pair.
pub fn verify_strict_estimate(
    p: &FiniteProblem,
    vfun: &DVector<f64>,
    k: &[usize],
    eps: f64,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<CheckReport> {
    let mut rep = CheckReport::new("strict_estimate", 1e-9);
    let mut rows = vec![];
    for (idx, (h1, h2)) in pairs.iter().enumerate() {
        let u = solve_any(&p.with_h(h1.clone())?)?.vector();
        let v = solve_any(&p.with_h(h2.clone())?)?.vector();
        let e = strict_estimate(p, vfun, k, eps, &u, &v, h1, h2)?;
        rep.observe(&[idx as f64], e.lhs, e.rhs, || format!("pair {idx}: |K̂| = {}, C_ε = {:.6}", e.khat.len(), e.c_eps));
        let inf_plus = k.iter().map(|&i| u[i] / (1.0 - eps) + v[i] / (1.0 + eps)).fold(f64::INFINITY, f64::min);
        let inf_minus = k.iter().map(|&i| u[i] / (1.0 - eps) - v[i] / (1.0 + eps)).fold(f64::INFINITY, f64::min);
        let c_eps_plus = e.c_eps + inf_minus - inf_plus;
        rows.push(json!({"c_v": e.c_v, "level": e.level, "khat_size": e.khat.len(), "c_eps": e.c_eps, "c_eps_plus_form": c_eps_plus, "lhs": e.lhs, "rhs": e.rhs}));
    }
    rep.detail("eps", json!(eps));
    rep.detail("pairs", json!(rows));
    Ok(rep)
}

/// Legendre controls for a convex Hamiltonian: `H(p) = sup_θ <θ, p> - H*(θ)`,
/// with `H*` computed on a `p`-grid.
#[derive(Clone, Debug)]
pub struct Legendre {
    pub theta: SampleCloud,
    pub p: SampleCloud,
}

impl Legendre {
    fn conjugate(&self, d: &DriftConvexOp, theta: &[f64]) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for p in self.p.points() {
            best = best.max(dot(theta, p) - d.hamiltonian_at(p)?);
        }
        Ok(best)
    }
}

struct GridIndex {
    lo: Vec<f64>,
    step: Vec<f64>,
    n: Vec<usize>,
}

impl GridIndex {
    fn flat(&self, idx: &[i64]) -> Option<usize> {
        let mut k = 0usize;
        for i in 0..self.n.len() {
            if idx[i] < 0 || idx[i] >= self.n[i] as i64 {
                return None;
            }
            k = k * self.n[i] + idx[i] as usize;
        }
        Some(k)
    }

    fn multi(&self, x: &[f64]) -> Vec<i64> {
        (0..self.n.len())
            .map(|i| (((x[i] - self.lo[i]) / self.step[i]).round() as i64).clamp(0, self.n[i] as i64 - 1))
            .collect()
    }
}

/// Monotone discretization of an operator tree on a grid.
///
/// Drift (including jump compensators) is upwinded, diffusion uses the
/// diagonally dominant seven-point stencil, and jumps land on the nearest
/// grid state, clamped at the boundary. Stencil arms leaving the grid are
/// dropped, so rows stay conservative. Convex Hamiltonians are replaced by
/// Legendre controls `θ` with drift `θ` and cost `H*(θ)`; these join the
/// maximizing control set, which needs a single minimizing control.
pub fn discretize(op: &OperatorSpec, grid: &SampleCloud, lambda: f64, h: DVector<f64>, legendre: Option<&Legendre>) -> Result<FiniteProblem> {
    let CloudDescriptor::Grid { lo, hi, n } = grid.descriptor() else {
        return Err(Error::invalid("discretize needs a grid cloud"));
    };
    let q = lo.len();
    if q != op.dim() {
        return Err(Error::Dimension { expected: op.dim(), got: q });
    }
    if n.iter().any(|&k| k < 2) {
        return Err(Error::invalid("discretization grid needs at least two points per axis"));
    }
    let gi = GridIndex {
        lo: lo.clone(),
        step: (0..q).map(|i| (hi[i] - lo[i]) / (n[i] - 1) as f64).collect(),
        n: n.clone(),
    };
    let comps = op.components();
    let (n1, n2) = match op {
        OperatorSpec::Isaacs(node) => node.shape(),
        _ => (1, 1),
    };
    let uses_h = comps.iter().any(|(_, _, c)| hamiltonian_leaf(c).is_some());
    let thetas: Vec<Vec<f64>> = match (uses_h, legendre) {
        (false, _) => vec![vec![]],
        (true, None) => return Err(Error::invalid("operator has a convex Hamiltonian; supply Legendre controls to discretize it")),
        (true, Some(_)) if n2 > 1 => return Err(Error::invalid("Legendre controls need a single minimizing control")),
        (true, Some(l)) => l.theta.points().iter().map(|p| p.to_vec()).collect(),
    };
    if uses_h && thetas.iter().any(|t| t.len() != q) {
        return Err(Error::Dimension { expected: q, got: thetas[0].len() });
    }
    let nt = thetas.len();
    let ns = grid.len();
    let mut gens = vec![vec![DMatrix::zeros(0, 0); n2]; n1 * nt];
    let mut costs = vec![vec![DVector::zeros(0); n2]; n1 * nt];
    for (a, b, comp) in comps {
        let hl = hamiltonian_leaf(comp);
        for (t, theta) in thetas.iter().enumerate() {
            let mut l = DMatrix::zeros(ns, ns);
            let mut c = DVector::zeros(ns);
            let hstar = match (hl, legendre) {
                (Some(d), Some(lg)) => lg.conjugate(d, theta)?,
                _ => 0.0,
            };
            for (i, x) in grid.points().iter().enumerate() {
                assemble_row(comp, x, &gi, if hl.is_some() { Some(theta) } else { None }, i, &mut l)?;
                c[i] = op.cost_at(x, a, b)? + hstar;
            }
            gens[a * nt + t][b] = l;
            costs[a * nt + t][b] = c;
        }
    }
    let mut p = FiniteProblem::new(grid.points().to_vec(), gens, costs, lambda, h)?;
    p.notes.insert("mesh".into(), json!(gi.step));
    p.notes.insert("lo".into(), json!(lo));
    p.notes.insert("hi".into(), json!(hi));
    if uses_h {
        p.notes.insert("legendre_controls".into(), json!(nt));
    }
    Ok(p)
}

fn hamiltonian_leaf(comp: &OperatorSpec) -> Option<&DriftConvexOp> {
    comp.leaves().into_iter().find_map(|l| match l {
        OperatorSpec::Drift(d) if d.has_hamiltonian() => Some(d),
        _ => None,
    })
}

fn assemble_row(comp: &OperatorSpec, x: &[f64], gi: &GridIndex, theta: Option<&[f64]>, i: usize, l: &mut DMatrix<f64>) -> Result<()> {
    let q = x.len();
    let mut b = DVector::zeros(q);
    let mut a = DMatrix::zeros(q, q);
    let mut jumps: Vec<(Vec<i64>, f64)> = vec![];
    for leaf in comp.leaves() {
        match leaf {
            OperatorSpec::Drift(d) => {
                b += d.drift_at(x)?;
            }
            OperatorSpec::Diffusion(d) => {
                let s = d.sigma_at(x)?;
                a += &s * s.transpose();
            }
            OperatorSpec::Jump(j) => {
                for (z, w) in j.measure(x)?.atoms() {
                    let ch = j.cut.chi(z);
                    for k in 0..q {
                        b[k] -= w * ch * z[k];
                    }
                    let target: Vec<f64> = x.iter().zip(z.iter()).map(|(s, t)| s + t).collect();
                    jumps.push((gi.multi(&target), *w));
                }
            }
            _ => {}
        }
    }
    if let Some(t) = theta {
        for k in 0..q {
            b[k] += t[k];
        }
    }
    let here = gi.multi(x);
    let mut arms: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    let mut add = |off: Vec<i64>, w: f64| *arms.entry(off).or_insert(0.0) += w;
    for k in 0..q {
        let mut e = vec![0i64; q];
        e[k] = if b[k] > 0.0 { 1 } else { -1 };
        add(e, b[k].abs() / gi.step[k]);
        let mut diag = 0.5 * a[(k, k)] / (gi.step[k] * gi.step[k]);
        for m in 0..q {
            if m != k {
                diag -= 0.5 * a[(k, m)].abs() / (gi.step[k] * gi.step[m]);
            }
        }
        if diag < -1e-12 {
            return Err(Error::precondition(format!("diffusion at {x:?} is not diagonally dominant on this grid")));
        }
        for s in [1i64, -1] {
            let mut e = vec![0i64; q];
            e[k] = s;
            add(e, diag.max(0.0));
        }
        for m in (k + 1)..q {
            let akm = a[(k, m)];
            if akm == 0.0 {
                continue;
            }
            let w = 0.5 * akm.abs() / (gi.step[k] * gi.step[m]);
            let sm = if akm > 0.0 { 1 } else { -1 };
            for s in [1i64, -1] {
                let mut e = vec![0i64; q];
                e[k] = s;
                e[m] = s * sm;
                add(e, w);
            }
        }
    }
    let mut total = 0.0;
    for (off, w) in arms {
        if w == 0.0 {
            continue;
        }
        let idx: Vec<i64> = here.iter().zip(&off).map(|(h, o)| h + o).collect();
        if let Some(j) = gi.flat(&idx) {
            l[(i, j)] += w;
            total += w;
        }
    }
    for (idx, w) in jumps {
        if let Some(j) = gi.flat(&idx) {
            if j != i {
                l[(i, j)] += w;
                total += w;
            }
        }
    }
    l[(i, i)] -= total;
    Ok(())
}

/// Nearest-neighbour `±1` walk at `rate` on an `n`-cycle.
pub fn cycle_walk(n: usize, rate: f64) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        l[(i, (i + 1) % n)] += rate;
        l[(i, (i + n - 1) % n)] += rate;
        l[(i, i)] -= 2.0 * rate;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn states(n: usize) -> Vec<Point> {
        (0..n).map(|i| Point::new(vec![i as f64]).unwrap()).collect()
    }

    #[test]
    fn two_state_chain() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let p = FiniteProblem::single(states(2), l, 1.0, DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let s = solve_linear(&p).unwrap();
        assert_relative_eq!(s.f[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.f[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn constants_are_harmonic_on_cycles() {
        let p = FiniteProblem::single(states(50), cycle_walk(50, 1.0), 2.0, DVector::from_element(50, 3.5)).unwrap();
        let s = solve_linear(&p).unwrap();
        assert!(s.f.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn absent_control_reduces_to_linear() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let z = DMatrix::zeros(2, 2);
        let h = DVector::from_vec(vec![0.0, 1.0]);
        let p = FiniteProblem::new(
            states(2),
            vec![vec![l.clone()], vec![z]],
            vec![vec![DVector::zeros(2)], vec![DVector::from_element(2, f64::INFINITY)]],
            1.0,
            h.clone(),
        )
        .unwrap();
        let a = solve_bellman_isaacs(&p).unwrap();
        let b = solve_linear(&FiniteProblem::single(states(2), l, 1.0, h).unwrap()).unwrap();
        assert_eq!(a.f, b.f);
    }

    #[test]
    fn bellman_dominates_fixed_policies() {
        let left = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        let right = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0]);
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let zero = DVector::zeros(3);
        let p = FiniteProblem::new(states(3), vec![vec![left.clone()], vec![right.clone()]], vec![vec![zero.clone()], vec![zero]], 1.0, h.clone()).unwrap();
        let s = solve_bellman_isaacs(&p).unwrap();
        for l in [left, right] {
            let f = solve_linear(&FiniteProblem::single(states(3), l, 1.0, h.clone()).unwrap()).unwrap();
            assert!(s.f.iter().zip(&f.f).all(|(a, b)| a >= &(b - 1e-12)));
        }
    }

    #[test]
    fn rejects_bad_generators() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, -1.0]);
        assert!(FiniteProblem::single(states(2), l, 1.0, DVector::zeros(2)).is_err());
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        assert!(FiniteProblem::single(states(2), l.clone(), 0.0, DVector::zeros(2)).is_err());
        assert!(FiniteProblem::single(states(2), l, 1.0, DVector::zeros(3)).is_err());
    }

    #[test]
    fn discretized_walk_is_monotone() {
        use crate::operators::{DiffusionOp, DiscreteMeasure, JumpOp};
        let grid = SampleCloud::grid(&[-2.0, -2.0], &[2.0, 2.0], &[9, 9]).unwrap();
        let drift = OperatorSpec::Drift(DriftConvexOp::new(2, |x: &[f64]| DVector::from_vec(vec![-x[0], -x[1]])));
        let diff = OperatorSpec::Diffusion(DiffusionOp::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.5])));
        let jump = OperatorSpec::Jump(JumpOp::constant(2, DiscreteMeasure::new(vec![(vec![1.0, 0.0], 1.0), (vec![0.0, -0.5], 2.0)]).unwrap()));
        let op = OperatorSpec::sum(vec![drift, diff, jump]).unwrap();
        let p = discretize(&op, &grid, 1.0, DVector::zeros(81), None).unwrap();
        assert!(p.leaking_rows().is_empty());
        let h = DVector::from_fn(81, |i, _| (i as f64 * 0.7).sin());
        let s = solve_bellman_isaacs(&p.with_h(h.clone()).unwrap()).unwrap();
        assert!(s.vector().amax() <= h.amax() + 1e-12);
    }
}
