//! Sup- and inf-convolutions over a sampled domain, with optimizer tracking.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::funcspace::{distance_sq, PiecewiseLinear1d, Point, SampleCloud, ScalarField, Smoothness};
use crate::report::CheckReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum ConvolutionKind {
    /// `P^α[u](y) = sup_x u(x) - α/2 d²(x, y)`.
    Sup,
    /// `P_α[v](y) = inf_x v(x) + α/2 d²(x, y)`.
    Inf,
}

/// Value and optimizer at one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEval {
    pub value: f64,
    pub argopt: Point,
    /// Another optimizer within `1e-9` of the value lies more than two mesh widths away.
    pub ambiguous: bool,
}

/// `P^α[u]` or `P_α[v]`, evaluated lazily and memoized.
///
/// The inf-convolution is computed as `-P^α[-v]`. Evaluation picks the best
/// domain point (or `y` itself), breaking ties toward the lexicographically
/// smallest candidate, then polishes along coordinate axes when the base is
/// `C²`. Piecewise-linear 1-D bases are maximized exactly segment by segment.
pub struct ConvolutionField {
    pub kind: ConvolutionKind,
    pub alpha: f64,
    pub base: ScalarField,
    pub domain: SampleCloud,
    /// Base values on the domain, negated for the inf kind.
    vals: Vec<f64>,
    pl: Option<PiecewiseLinear1d>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    mesh: f64,
    polish: bool,
    memo: Mutex<HashMap<Vec<u64>, ConvEval>>,
}

impl std::fmt::Debug for ConvolutionField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvolutionField")
            .field("kind", &self.kind)
            .field("alpha", &self.alpha)
            .field("base", &self.base)
            .field("domain_size", &self.domain.len())
            .finish()
    }
}

pub fn sup_convolve(u: &ScalarField, alpha: f64, domain: &SampleCloud) -> Result<ConvolutionField> {
    ConvolutionField::new(ConvolutionKind::Sup, u, alpha, domain)
}

pub fn inf_convolve(v: &ScalarField, alpha: f64, domain: &SampleCloud) -> Result<ConvolutionField> {
    ConvolutionField::new(ConvolutionKind::Inf, v, alpha, domain)
}

impl ConvolutionField {
    pub fn new(kind: ConvolutionKind, base: &ScalarField, alpha: f64, domain: &SampleCloud) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::invalid("convolution domain is empty"));
        }
        check_dim(base.dim(), domain.dim())?;
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("convolution parameter α = {alpha} must be finite and > 0")));
        }
        let sign = if kind == ConvolutionKind::Sup { 1.0 } else { -1.0 };
        let vals = domain.points().iter().map(|p| base.value(p).map(|v| sign * v)).collect::<Result<Vec<_>>>()?;
        let q = domain.dim();
        let mut lo = vec![f64::INFINITY; q];
        let mut hi = vec![f64::NEG_INFINITY; q];
        for p in domain.points() {
            for i in 0..q {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let mesh = domain.mesh().unwrap_or_else(|| nearest_spacing(domain));
        let pl = base.piecewise_data().map(|d| if sign > 0.0 { d.clone() } else { d.negated() });
        Ok(Self {
            kind,
            alpha,
            base: base.clone(),
            domain: domain.clone(),
            vals,
            pl,
            lo,
            hi,
            mesh,
            polish: base.smoothness() >= Smoothness::C2,
            memo: Mutex::new(HashMap::new()),
        })
    }

    /// Disable the axis polish, leaving the pure discrete maximum.
    pub fn without_polish(mut self) -> Self {
        self.polish = false;
        self
    }

    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    fn sign(&self) -> f64 {
        if self.kind == ConvolutionKind::Sup {
            1.0
        } else {
            -1.0
        }
    }

    /// Value and optimizer at `y`.
    pub fn eval(&self, y: &[f64]) -> Result<ConvEval> {
        check_dim(self.domain.dim(), y.len())?;
        let key: Vec<u64> = y.iter().map(|c| (c + 0.0).to_bits()).collect();
        if let Some(e) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(e.clone());
        }
        let (val, x, ambiguous) = match &self.pl {
            Some(d) => self.eval_piecewise(d, y[0]),
            None => self.eval_discrete(y)?,
        };
        let e = ConvEval {
            value: self.sign() * val,
            argopt: Point::unchecked(x),
            ambiguous,
        };
        self.memo.lock().expect("memo lock").insert(key, e.clone());
        Ok(e)
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        Ok(self.eval(y)?.value)
    }

    /// `α(x* - y)` for the sup kind, `α(y - x*)` for the inf kind.
    pub fn gradient(&self, y: &[f64]) -> Result<DVector<f64>> {
        let e = self.eval(y)?;
        let s = self.sign() * self.alpha;
        Ok(DVector::from_iterator(y.len(), e.argopt.iter().zip(y).map(|(x, t)| s * (x - t))))
    }

    /// Central differences of [`gradient`](Self::gradient).
    pub fn hessian(&self, y: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let q = y.len();
        let mut m = DMatrix::zeros(q, q);
        let mut t = y.to_vec();
        for j in 0..q {
            t[j] = y[j] + h;
            let gp = self.gradient(&t)?;
            t[j] = y[j] - h;
            let gm = self.gradient(&t)?;
            t[j] = y[j];
            for i in 0..q {
                m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        Ok((&m + m.transpose()) * 0.5)
    }

    fn objective(&self, x: &[f64], y: &[f64]) -> f64 {
        self.sign() * self.base.value_unchecked(x) - 0.5 * self.alpha * distance_sq(x, y)
    }

    fn eval_discrete(&self, y: &[f64]) -> Result<(f64, Vec<f64>, bool)> {
        let mut best = self.sign() * self.base.value(y)?;
        let mut arg: &[f64] = y;
        let half = 0.5 * self.alpha;
        for (p, v) in self.domain.points().iter().zip(&self.vals) {
            let s = v - half * distance_sq(p, y);
            if s > best || (s == best && lex_less(p, arg)) {
                best = s;
                arg = p;
            }
        }
        let mut ambiguous = false;
        let far = 4.0 * self.mesh * self.mesh;
        for (p, v) in self.domain.points().iter().zip(&self.vals) {
            let s = v - half * distance_sq(p, y);
            if best - s <= 1e-9 && distance_sq(p, arg) > far {
                ambiguous = true;
                break;
            }
        }
        let mut x = arg.to_vec();
        if self.polish {
            best = self.polish_axes(&mut x, y, best);
        }
        Ok((best, x, ambiguous))
    }

    fn polish_axes(&self, x: &mut [f64], y: &[f64], mut best: f64) -> f64 {
        let mut h = if self.mesh > 0.0 { self.mesh } else { 1e-3 };
        for _ in 0..40 {
            let mut moved = false;
            for i in 0..x.len() {
                let c = x[i];
                let (a, b) = ((c - h).max(self.lo[i]), (c + h).min(self.hi[i]));
                if !(b > a) {
                    continue;
                }
                x[i] = a;
                let fa = self.objective(x, y);
                x[i] = b;
                let fb = self.objective(x, y);
                x[i] = c;
                let (ha, hb) = (c - a, b - c);
                let denom = ha * hb * (ha + hb);
                let curv = (hb * (fa - best) + ha * (fb - best)) / denom;
                let mut cand = c;
                if curv < 0.0 && denom > 0.0 {
                    let slope = (ha * ha * (fb - best) - hb * hb * (fa - best)) / denom;
                    cand = (c - slope / (2.0 * curv)).clamp(a, b);
                }
                for t in [cand, a, b] {
                    x[i] = t;
                    let ft = self.objective(x, y);
                    if ft > best {
                        best = ft;
                        moved = true;
                    } else {
                        x[i] = c;
                    }
                    if x[i] != c {
                        break;
                    }
                }
            }
            if !moved {
                h *= 0.25;
                if h < 1e-10 {
                    break;
                }
            }
        }
        best
    }

    fn eval_piecewise(&self, d: &PiecewiseLinear1d, y: f64) -> (f64, Vec<f64>, bool) {
        let (lo, hi) = (self.lo[0], self.hi[0]);
        let (nodes, vals) = (d.nodes(), d.values());
        let n = nodes.len();
        let mut pieces: Vec<(f64, f64, f64)> = Vec::with_capacity(n + 1);
        pieces.push((f64::NEG_INFINITY, nodes[0], 0.0));
        for k in 0..n - 1 {
            pieces.push((nodes[k], nodes[k + 1], (vals[k + 1] - vals[k]) / (nodes[k + 1] - nodes[k])));
        }
        pieces.push((nodes[n - 1], f64::INFINITY, 0.0));
        let obj = |x: f64| d.eval(x) - 0.5 * self.alpha * (x - y) * (x - y);
        let mut best = obj(y);
        let mut arg = y;
        for (a, b, s) in pieces {
            let (a, b) = (a.max(lo), b.min(hi));
            if a > b {
                continue;
            }
            let x = (y + s / self.alpha).clamp(a, b);
            let v = obj(x);
            if v > best || (v == best && x < arg) {
                best = v;
                arg = x;
            }
        }
        (best, vec![arg], false)
    }

    /// The convolution as a field with its gradient.
    pub fn to_field(self: &Arc<Self>) -> ScalarField {
        let (a, b, c) = (Arc::clone(self), Arc::clone(self), Arc::clone(self));
        let h = (self.mesh * 0.5).max(1e-5);
        let label = match self.kind {
            ConvolutionKind::Sup => format!("P^{}[{}]", self.alpha, self.base.label()),
            ConvolutionKind::Inf => format!("P_{}[{}]", self.alpha, self.base.label()),
        };
        ScalarField::new(self.domain.dim(), label, move |y: &[f64]| a.value(y).unwrap_or(f64::NAN))
            .with_gradient(move |y: &[f64]| b.gradient(y).unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN)))
            .with_hessian(move |y: &[f64]| c.hessian(y, h).unwrap_or_else(|_| DMatrix::from_element(y.len(), y.len(), f64::NAN)))
            .with_smoothness(Smoothness::C0)
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn nearest_spacing(c: &SampleCloud) -> f64 {
    let pts = c.points();
    let n = pts.len().min(256);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for (j, q) in pts.iter().enumerate() {
            if j != i {
                best = best.min(distance_sq(&pts[i], q));
            }
        }
        if best.is_finite() {
            worst = worst.max(best.sqrt());
        }
    }
    worst
}

/// Properties of the convolutions on probe points, for each `α` (sorted increasing):
/// (a) norm bounds; (b) `α/2 d²(x*, y) <= u(x*) - u(y)` at optimizers;
/// (c) `P^α[u]` nonincreasing and `P_α[v]` nondecreasing in `α`;
/// (d) semi-convexity of `P^α[u]` and semi-concavity of `P_α[v]` with constant `α`
/// (midpoint test on probe pairs); (e) the derivative law `DP^α[u](y) = α(x* - y)`
/// where the finite-difference derivative is stable.
pub fn check_convolution_laws(
    u: &ScalarField,
    v: &ScalarField,
    alphas: &[f64],
    domain: &SampleCloud,
    probe: &SampleCloud,
) -> Result<CheckReport> {
    if alphas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("α values must be strictly increasing"));
    }
    check_dim(domain.dim(), probe.dim())?;
    let mut items: Vec<CheckReport> = ["a_norm", "b_optimizer_gap", "c_monotone", "d_semiconvex", "e_derivative"]
        .iter()
        .map(|n| CheckReport::new(*n, 0.0))
        .collect();
    let norm_of = |f: &ScalarField| -> Result<f64> {
        let mut m = 0.0f64;
        for p in domain.points().iter().chain(probe.points()) {
            m = m.max(f.value(p)?.abs());
        }
        Ok(m)
    };
    let (nu, nv) = (norm_of(u)?, norm_of(v)?);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut ambiguous = 0usize;
    let mut mesh = 0.0;
    for &a in alphas {
        let pu = sup_convolve(u, a, domain)?;
        let pv = inf_convolve(v, a, domain)?;
        mesh = pu.mesh();
        let tol = 1e-9 + a * mesh * mesh;
        let dtol = 1e-4f64.max(10.0 * mesh) * (1.0 + a);
        let mut cur = (vec![], vec![]);
        for y in probe.points() {
            let (eu, ev) = (pu.eval(y)?, pv.eval(y)?);
            ambiguous += usize::from(eu.ambiguous) + usize::from(ev.ambiguous);
            items[0].observe(y, eu.value.abs() - nu, 1e-12, || format!("α = {a}: |P^α[u]| <= ‖u‖"));
            items[0].observe(y, ev.value.abs() - nv, 1e-12, || format!("α = {a}: |P_α[v]| <= ‖v‖"));
            let gu = u.value(&eu.argopt)? - u.value(y)?;
            items[1].observe(y, 0.5 * a * distance_sq(&eu.argopt, y) - gu, 1e-12, || format!("α = {a}: α/2 d²(x*, y) <= u(x*) - u(y)"));
            let gv = v.value(y)? - v.value(&ev.argopt)?;
            items[1].observe(y, 0.5 * a * distance_sq(&ev.argopt, y) - gv, 1e-12, || format!("α = {a}: α/2 d²(x*, y) <= v(y) - v(x*)"));
            cur.0.push(eu.value);
            cur.1.push(ev.value);
            let h = 1e-6;
            for (pc, law) in [(&pu, "P^α[u]"), (&pv, "P_α[v]")] {
                let g = pc.gradient(y)?;
                let mut t = y.to_vec();
                let mut stable = true;
                let mut fd = vec![0.0; y.len()];
                for i in 0..y.len() {
                    let mut d = [0.0; 2];
                    for (k, hh) in [h, 0.5 * h].iter().enumerate() {
                        t[i] = y[i] + hh;
                        let fp = pc.value(&t)?;
                        t[i] = y[i] - hh;
                        let fm = pc.value(&t)?;
                        t[i] = y[i];
                        d[k] = (fp - fm) / (2.0 * hh);
                    }
                    stable &= (d[0] - d[1]).abs() <= 1e-3 * (1.0 + d[0].abs());
                    fd[i] = d[1];
                }
                if stable {
                    let err = fd.iter().zip(g.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    items[4].observe(y, err, dtol, || format!("α = {a}: D{law} vs α(x* - y)"));
                }
            }
        }
        let pts = probe.points();
        for i in 0..pts.len() {
            let j = (i * 7 + 3) % pts.len();
            let (pa, pb) = (&pts[i], &pts[j]);
            let m: Vec<f64> = pa.iter().zip(pb.iter()).map(|(s, t)| 0.5 * (s + t)).collect();
            let q = a / 8.0 * distance_sq(pa, pb);
            let lhs = pu.value(&m)? - 0.5 * pu.value(pa)? - 0.5 * pu.value(pb)?;
            items[3].observe(&m, lhs, q + tol, || format!("α = {a}: midpoint semi-convexity of P^α[u]"));
            let lhs = 0.5 * pv.value(pa)? + 0.5 * pv.value(pb)? - pv.value(&m)?;
            items[3].observe(&m, lhs, q + tol, || format!("α = {a}: midpoint semi-concavity of P_α[v]"));
        }
        if let Some((ou, ov)) = &prev {
            for (k, y) in probe.points().iter().enumerate() {
                items[2].observe(y, cur.0[k] - ou[k], 1e-9, || format!("α = {a}: P^α[u] nonincreasing in α"));
                items[2].observe(y, ov[k] - cur.1[k], 1e-9, || format!("α = {a}: P_α[v] nondecreasing in α"));
            }
        }
        prev = Some(cur);
    }
    let mut summary = serde_json::Map::new();
    for r in &items {
        summary.insert(r.name.clone(), json!({"passed": r.passed, "samples": r.samples, "witness": r.witness}));
    }
    let mut rep = items.into_iter().reduce(|a, b| a.merge(b)).expect("five items");
    rep.name = "convolution_laws".into();
    rep.cloud = Some(probe.descriptor().clone());
    rep.detail("items", serde_json::Value::Object(summary));
    rep.detail("mesh", json!(mesh));
    rep.detail("ambiguous_optimizers", json!(ambiguous));
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn neg_half_square() -> ScalarField {
        ScalarField::quadratic(&[0.0], -1.0)
    }

    #[test]
    fn closed_form_family() {
        let dom = SampleCloud::grid(&[-3.0], &[3.0], &[601]).unwrap();
        for a in [1.0, 2.0, 4.0, 8.0] {
            let p = sup_convolve(&neg_half_square(), a, &dom).unwrap();
            for y in [-1.7, -0.33, 0.0, 0.5, 1.234] {
                let e = p.eval(&[y]).unwrap();
                assert_relative_eq!(e.value, -a / (2.0 * (a + 1.0)) * y * y, epsilon = 1e-9);
                assert_relative_eq!(e.argopt[0], a * y / (a + 1.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn constants_and_duality() {
        let dom = SampleCloud::grid(&[-2.0, -2.0], &[2.0, 2.0], &[21, 21]).unwrap();
        let c = ScalarField::constant(2, 3.0);
        let p = sup_convolve(&c, 5.0, &dom).unwrap();
        let e = p.eval(&[0.13, -0.4]).unwrap();
        assert_eq!(e.value, 3.0);
        assert_eq!(e.argopt.as_slice(), &[0.13, -0.4]);
        let v = ScalarField::quadratic(&[0.0, 0.0], 1.0);
        let neg = ScalarField::quadratic(&[0.0, 0.0], -1.0);
        let inf = inf_convolve(&v, 2.0, &dom).unwrap();
        let sup = sup_convolve(&neg, 2.0, &dom).unwrap();
        for y in [[0.3, 0.1], [-1.0, 1.5]] {
            assert_eq!(inf.value(&y).unwrap(), -sup.value(&y).unwrap());
        }
    }

    #[test]
    fn piecewise_linear_path_is_exact() {
        let d = PiecewiseLinear1d::new(vec![-1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        let u = ScalarField::piecewise_linear("hat", d);
        let dom = SampleCloud::grid(&[-3.0], &[3.0], &[7]).unwrap();
        let p = sup_convolve(&u, 4.0, &dom).unwrap();
        // maximize 1 - |x| - 2(x - 0.5)² over x: x = 0.25
        let e = p.eval(&[0.5]).unwrap();
        assert_relative_eq!(e.argopt[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(e.value, 1.0 - 0.25 - 2.0 * 0.0625, epsilon = 1e-15);
    }

    #[test]
    fn laws_pass_on_closed_form_family() {
        let dom = SampleCloud::grid(&[-3.0], &[3.0], &[1201]).unwrap();
        let probe = SampleCloud::grid(&[-1.0], &[1.0], &[41]).unwrap();
        let v = ScalarField::quadratic(&[0.0], 1.0);
        let rep = check_convolution_laws(&neg_half_square(), &v, &[1.0, 2.0, 4.0], &dom, &probe).unwrap();
        assert!(rep.passed, "{:?}", rep.witness);
    }
}
