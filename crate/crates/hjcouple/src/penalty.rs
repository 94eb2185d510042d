//! Containment function, penalization families `ξ`/`ζ`, the combined
//! penalty `Ξ`, and the monotone cut-offs `Ω±`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::funcspace::{distance_sq, dot, fd_gradient_fn, fd_hessian_fn, norm, Point, SampleCloud, ScalarField, Smoothness};
use crate::report::CheckReport;

/// Value with gradient and Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl Jet {
    fn zero(q: usize) -> Self {
        Self {
            value: 0.0,
            gradient: DVector::zeros(q),
            hessian: DMatrix::zeros(q, q),
        }
    }

    fn add(mut self, o: &Jet) -> Self {
        self.value += o.value;
        self.gradient += &o.gradient;
        self.hessian += &o.hessian;
        self
    }
}

/// `V(x) = log(1 + ½|x|²)`.
pub fn log_lyapunov(q: usize) -> ScalarField {
    ScalarField::new(q, "V", |x: &[f64]| (0.5 * dot(x, x)).ln_1p())
        .with_gradient(|x: &[f64]| {
            let s = 1.0 + 0.5 * dot(x, x);
            DVector::from_iterator(x.len(), x.iter().map(|c| c / s))
        })
        .with_hessian(|x: &[f64]| {
            let q = x.len();
            let s = 1.0 + 0.5 * dot(x, x);
            DMatrix::from_fn(q, q, |i, j| (if i == j { s } else { 0.0 } - x[i] * x[j]) / (s * s))
        })
        .with_smoothness(Smoothness::CInf)
        .with_bounds(Some(0.0), None)
}

/// Level `c` with `{V <= c}` the ball of radius `sqrt(2(e^c - 1))` for [`log_lyapunov`].
pub fn log_lyapunov_radius(level: f64) -> f64 {
    (2.0 * level.exp_m1()).sqrt()
}

/// Containment function with its semi-concavity constant.
#[derive(Clone, Debug)]
pub struct Containment {
    pub v: ScalarField,
    pub kappa_v: f64,
}

impl Containment {
    pub fn new(v: ScalarField, kappa_v: f64) -> Result<Self> {
        if !v.has_gradient() || !v.has_hessian() {
            return Err(Error::invalid("containment function needs analytic gradient and Hessian"));
        }
        if !(kappa_v >= 0.0) {
            return Err(Error::invalid("semi-concavity constant must be >= 0"));
        }
        Ok(Self { v, kappa_v })
    }

    /// The default `log(1 + ½|x|²)`, semi-concave with constant 1.
    pub fn default_log(q: usize) -> Self {
        Self {
            v: log_lyapunov(q),
            kappa_v: 1.0,
        }
    }

    /// Nonnegativity, zero infimum, growth along rays and semi-concavity on a cloud.
    pub fn certify(&self, cloud: &SampleCloud) -> Result<CheckReport> {
        let q = self.v.dim();
        check_dim(q, cloud.dim())?;
        let mut rep = CheckReport::new("containment", 1e-10).with_cloud(cloud.descriptor());
        let mut inf = f64::INFINITY;
        for p in cloud.points() {
            let v = self.v.value(p)?;
            inf = inf.min(v);
            rep.observe(p, -v, 0.0, || "V >= 0".into());
            let h = self.v.hessian(p)?;
            let lmax = max_eigen(&h);
            rep.observe(p, lmax, self.kappa_v, || "largest Hessian eigenvalue <= κ_V".into());
        }
        let at0 = self.v.value(&vec![0.0; q])?;
        if at0.min(inf) > 1e-12 {
            rep.fail(format!("inf V = {:.3e} is not 0 on the cloud", at0.min(inf)));
        }
        for k in 0..q {
            let mut prev = f64::NEG_INFINITY;
            for j in 0..12 {
                let mut e = vec![0.0; q];
                e[k] = 2f64.powi(j);
                let v = self.v.value(&e)?;
                if !(v > prev) {
                    rep.fail(format!("V does not grow along axis {k} at radius {}", e[k]));
                }
                prev = v;
            }
        }
        self.midpoint_test(&mut rep, cloud)?;
        rep.detail("kappa_v", json!(self.kappa_v));
        Ok(rep)
    }

    fn midpoint_test(&self, rep: &mut CheckReport, cloud: &SampleCloud) -> Result<()> {
        let pts = cloud.points();
        for (i, a) in pts.iter().enumerate() {
            let b = &pts[(i * 7 + 3) % pts.len()];
            let m: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
            let lhs = 0.5 * self.v.value(a)? + 0.5 * self.v.value(b)? - self.v.value(&m)?;
            rep.observe(&m, lhs, self.kappa_v / 8.0 * distance_sq(a, b), || "midpoint semi-concavity".into());
        }
        Ok(())
    }
}

fn max_eigen(h: &DMatrix<f64>) -> f64 {
    let sym = (h + h.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Which penalty collection to use.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Collection {
    /// `ξ_z = ½d²(·, z)` and `ζ_{z,p} = <p, · - z>`.
    Quadratic,
    /// `ξ̄ = (1-ℓ̄(d))(R''+1)² + ℓ̄(d)½d²` and `ζ̄ = ℓ̄(d)<p, · - z>`.
    Plateau { r_prime: f64, r_dprime: f64 },
}

pub type CustomXi = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// A penalization family `(ξ_z, ζ_{z,p})` with linearity radius `R`.
#[derive(Clone)]
pub struct PenaltyFamily {
    dim: usize,
    pub collection: Collection,
    pub r: f64,
    custom_xi: Option<CustomXi>,
}

impl fmt::Debug for PenaltyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PenaltyFamily")
            .field("dim", &self.dim)
            .field("collection", &self.collection)
            .field("r", &self.r)
            .field("custom_xi", &self.custom_xi.is_some())
            .finish()
    }
}

/// Default radii `R < R' < R''`. `R` must exceed 2 so that `½d² - d > 0` off `B_R`.
pub const DEFAULT_RADII: (f64, f64, f64) = (3.0, 4.0, 5.0);

impl PenaltyFamily {
    pub fn quadratic(dim: usize, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid("penalty radius R must be finite and > 0"));
        }
        Ok(Self {
            dim,
            collection: Collection::Quadratic,
            r,
            custom_xi: None,
        })
    }

    pub fn plateau(dim: usize, r: f64, r_prime: f64, r_dprime: f64) -> Result<Self> {
        if !(0.0 < r && r < r_prime && r_prime < r_dprime) || !r_dprime.is_finite() {
            return Err(Error::invalid(format!("penalty radii need 0 < R < R' < R'', got {r}, {r_prime}, {r_dprime}")));
        }
        Ok(Self {
            dim,
            collection: Collection::Plateau { r_prime, r_dprime },
            r,
            custom_xi: None,
        })
    }

    /// Replace `ξ` by an arbitrary value-only function `(z, y) ↦ ξ_z(y)`; derivatives by finite differences.
    pub fn with_custom_xi(mut self, xi: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.custom_xi = Some(Arc::new(xi));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn ell(&self, d: f64) -> (f64, f64, f64) {
        match self.collection {
            Collection::Quadratic => (1.0, 0.0, 0.0),
            Collection::Plateau { r_prime, r_dprime } => {
                if d <= r_prime {
                    (1.0, 0.0, 0.0)
                } else if d >= r_dprime {
                    (0.0, 0.0, 0.0)
                } else {
                    let w = r_dprime - r_prime;
                    let t = (d - r_prime) / w;
                    let s = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
                    let s1 = 30.0 * t * t * (t - 1.0) * (t - 1.0);
                    let s2 = 60.0 * t * (2.0 * t - 1.0) * (t - 1.0);
                    (1.0 - s, -s1 / w, -s2 / (w * w))
                }
            }
        }
    }

    /// `ξ_z(y)` with derivatives in `y`.
    pub fn xi(&self, z: &[f64], y: &[f64]) -> Result<Jet> {
        check_dim(self.dim, z.len())?;
        check_dim(self.dim, y.len())?;
        let q = self.dim;
        if let Some(c) = &self.custom_xi {
            let f = |t: &[f64]| c(z, t);
            return Ok(Jet {
                value: f(y),
                gradient: fd_gradient_fn(f, y, 1e-5),
                hessian: fd_hessian_fn(f, y, 1e-4),
            });
        }
        let w: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        let d = norm(&w);
        let quad = |q: usize| Jet {
            value: 0.5 * d * d,
            gradient: DVector::from_column_slice(&w),
            hessian: DMatrix::identity(q, q),
        };
        match self.collection {
            Collection::Quadratic => Ok(quad(q)),
            Collection::Plateau { r_prime, r_dprime } => {
                let c = (r_dprime + 1.0).powi(2);
                if d <= r_prime {
                    Ok(quad(q))
                } else if d >= r_dprime {
                    Ok(Jet {
                        value: c,
                        ..Jet::zero(q)
                    })
                } else {
                    let (l, l1, l2) = self.ell(d);
                    let h = 0.5 * d * d - c;
                    let phi = c + l * h;
                    let phi1 = l1 * h + l * d;
                    let phi2 = l2 * h + 2.0 * l1 * d + l;
                    Ok(radial(&w, d, phi, phi1, phi2))
                }
            }
        }
    }

    /// `ζ_{z,p}(y)` with derivatives in `y`.
    pub fn zeta(&self, z: &[f64], p: &[f64], y: &[f64]) -> Result<Jet> {
        check_dim(self.dim, z.len())?;
        check_dim(self.dim, p.len())?;
        check_dim(self.dim, y.len())?;
        let q = self.dim;
        let w: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        let d = norm(&w);
        let (l, l1, l2) = self.ell(d);
        let pw = dot(p, &w);
        let pv = DVector::from_column_slice(p);
        if l1 == 0.0 && l2 == 0.0 {
            return Ok(Jet {
                value: l * pw,
                gradient: pv * l,
                hessian: DMatrix::zeros(q, q),
            });
        }
        let u = DVector::from_column_slice(&w) / d;
        let uu = &u * u.transpose();
        let proj = DMatrix::identity(q, q) - &uu;
        Ok(Jet {
            value: l * pw,
            gradient: &u * (l1 * pw) + &pv * l,
            hessian: (uu * l2 + proj * (l1 / d)) * pw + (&u * pv.transpose() + &pv * u.transpose()) * l1,
        })
    }

    /// `sup_{|p| <= 1} -ζ_{z,p}(y)`.
    fn zeta_dual_norm(&self, z: &[f64], y: &[f64]) -> f64 {
        let d = distance_sq(y, z).sqrt();
        self.ell(d).0 * d
    }

    pub fn xi_field(&self, z: &[f64]) -> ScalarField {
        let (fam, z1, fam2, z2, fam3, z3) = (self.clone(), z.to_vec(), self.clone(), z.to_vec(), self.clone(), z.to_vec());
        ScalarField::new(self.dim, "xi", move |y: &[f64]| fam.xi(&z1, y).map_or(f64::NAN, |j| j.value))
            .with_gradient(move |y: &[f64]| fam2.xi(&z2, y).map_or_else(|_| DVector::from_element(y.len(), f64::NAN), |j| j.gradient))
            .with_hessian(move |y: &[f64]| fam3.xi(&z3, y).map_or_else(|_| DMatrix::from_element(y.len(), y.len(), f64::NAN), |j| j.hessian))
    }
}

fn radial(w: &[f64], d: f64, phi: f64, phi1: f64, phi2: f64) -> Jet {
    let q = w.len();
    let u = DVector::from_column_slice(w) / d;
    let uu = &u * u.transpose();
    let proj = DMatrix::identity(q, q) - &uu;
    Jet {
        value: phi,
        gradient: &u * phi1,
        hessian: uu * phi2 + proj * (phi1 / d),
    }
}

/// Centers and slope of `Ξ⁰ = ξ_{z0} + ζ_{z0,p}` and `Ξ = Ξ⁰ + ξ_{z1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct XiBundle {
    pub z0: Point,
    pub p: Point,
    pub z1: Point,
}

impl XiBundle {
    pub fn new(z0: Point, p: Point, z1: Point) -> Result<Self> {
        check_dim(z0.dim(), p.dim())?;
        check_dim(z0.dim(), z1.dim())?;
        Ok(Self { z0, p, z1 })
    }
}

/// `Ξ⁰(y) = ξ_{z0}(y) + ζ_{z0,p}(y)`.
pub fn eval_xi0(fam: &PenaltyFamily, b: &XiBundle, y: &[f64]) -> Result<Jet> {
    Ok(fam.xi(&b.z0, y)?.add(&fam.zeta(&b.z0, &b.p, y)?))
}

/// `Ξ(y) = Ξ⁰(y) + ξ_{z1}(y)`.
pub fn eval_xi(fam: &PenaltyFamily, b: &XiBundle, y: &[f64]) -> Result<Jet> {
    Ok(eval_xi0(fam, b, y)?.add(&fam.xi(&b.z1, y)?))
}

/// `Ξ` or `Ξ⁰` as a field.
pub fn bundle_field(fam: &PenaltyFamily, b: &XiBundle, with_z1: bool) -> ScalarField {
    let jet = {
        let (fam, b) = (fam.clone(), b.clone());
        Arc::new(move |y: &[f64]| if with_z1 { eval_xi(&fam, &b, y) } else { eval_xi0(&fam, &b, y) })
    };
    let (j1, j2, j3) = (jet.clone(), jet.clone(), jet);
    ScalarField::new(fam.dim(), if with_z1 { "Xi" } else { "Xi0" }, move |y: &[f64]| j1(y).map_or(f64::NAN, |j| j.value))
        .with_gradient(move |y: &[f64]| j2(y).map_or_else(|_| DVector::from_element(y.len(), f64::NAN), |j| j.gradient))
        .with_hessian(move |y: &[f64]| j3(y).map_or_else(|_| DMatrix::from_element(y.len(), y.len(), f64::NAN), |j| j.hessian))
}

/// Outcome of [`certify_family`].
#[derive(Clone, Debug)]
pub struct FamilyCertificate {
    pub passed: bool,
    /// Largest Hessian eigenvalue of `ξ` seen on the clouds.
    pub kappa_xi: f64,
    /// `kappa_xi` with a 5% safety margin; used by the midpoint test.
    pub kappa_xi_certified: f64,
    /// Combined report; `details.items` holds each item's verdict and worst witness.
    pub report: CheckReport,
}

/// Verify the penalization axioms on sampled centers, slopes and points.
///
/// Items: (a) `ζ` linear on `B_R(z)`; (b) a semi-concavity constant for `ξ`
/// from a Hessian scan plus a midpoint test on segments through `z`;
/// (c) `ξ_z(z) = 0` and `ξ_z > 0` elsewhere; (d) `ξ_z + ζ_{z,p} > 0` off
/// `B_R(z)` for `|p| <= 1`. Probe points are offsets from each center.
pub fn certify_family(fam: &PenaltyFamily, centers: &SampleCloud, probes: &SampleCloud, seed: u64) -> Result<FamilyCertificate> {
    let q = fam.dim();
    check_dim(q, centers.dim())?;
    check_dim(q, probes.dim())?;
    let mut lin = CheckReport::new("linearity", 1e-12);
    let mut semi = CheckReport::new("semi_concavity", 1e-10);
    let mut pos = CheckReport::new("positivity", 1e-14);
    let mut dom = CheckReport::new("domination", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lmax = 0.0f64;
    let mut unstable = None;
    for z in centers.points() {
        pos.observe(z, fam.xi(z, z)?.value.abs(), 0.0, || "ξ_z(z) = 0".into());
        pos.observe(z, fam.zeta(z, z, z)?.value.abs(), 0.0, || "ζ_{z,p}(z) = 0".into());
        for off in probes.points() {
            let y: Vec<f64> = off.iter().zip(z.iter()).map(|(a, b)| a + b).collect();
            let d = norm(off);
            let p: Vec<f64> = {
                let raw: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = norm(&raw).max(1.0);
                raw.iter().map(|c| c / n).collect()
            };
            let xi = fam.xi(z, &y)?;
            if d > 0.0 {
                // strict positivity: a zero value is a violation
                let v = if xi.value > 0.0 { -1.0 } else { 1.0 - xi.value };
                pos.observe(&y, v, 0.0, || format!("ξ_z(y) = {:.3e} for y ≠ z", xi.value));
            }
            if d < fam.r {
                let zeta = fam.zeta(z, &p, &y)?;
                lin.observe(&y, (zeta.value - dot(&p, off)).abs(), 0.0, || "ζ_{z,p}(y) = <p, y - z> on B_R(z)".into());
            } else {
                let margin = xi.value - fam.zeta_dual_norm(z, &y);
                let v = if margin > 0.0 { -margin } else { 1.0 - margin };
                dom.observe(&y, v, 0.0, || format!("inf_{{|p|<=1}} ξ_z + ζ_{{z,p}} = {margin:.3e} off B_R(z)"));
            }
            let l = max_eigen(&xi.hessian);
            if let Some(c) = &fam.custom_xi {
                let h2 = max_eigen(&fd_hessian_fn(|t| c(z, t), &y, 5e-5));
                if (h2 - l).abs() > 1e-3 * l.abs().max(1.0) && unstable.is_none() {
                    unstable = Some((y.clone(), l, h2));
                }
            }
            lmax = lmax.max(l);
        }
    }
    let kappa = 1.05 * lmax.max(0.0);
    for z in centers.points() {
        for off in probes.points() {
            let a: Vec<f64> = off.iter().zip(z.iter()).map(|(s, t)| t + s).collect();
            let b: Vec<f64> = off.iter().zip(z.iter()).map(|(s, t)| t - s).collect();
            let lhs = 0.5 * fam.xi(z, &a)?.value + 0.5 * fam.xi(z, &b)?.value - fam.xi(z, z)?.value;
            semi.observe(z, lhs, kappa / 8.0 * distance_sq(&a, &b), || "midpoint semi-concavity through z".into());
            let e: Vec<f64> = a.iter().zip(z.iter()).map(|(s, t)| 0.5 * (s + t)).collect();
            let m: Vec<f64> = a.iter().zip(&e).map(|(s, t)| 0.5 * (s + t)).collect();
            let lhs = 0.5 * fam.xi(z, &e)?.value + 0.5 * fam.xi(z, &a)?.value - fam.xi(z, &m)?.value;
            semi.observe(&m, lhs, kappa / 8.0 * distance_sq(&e, &a), || "midpoint semi-concavity".into());
        }
    }
    if let Some((y, l1, l2)) = unstable {
        semi.fail(format!("κ_ξ not certifiable: curvature at {y:?} moves from {l1:.3e} to {l2:.3e} under step refinement"));
    }
    let mut items = serde_json::Map::new();
    for (k, r) in [("a_linearity", &lin), ("b_semi_concavity", &semi), ("c_positivity", &pos), ("d_domination", &dom)] {
        items.insert(k.into(), json!({"passed": r.passed, "samples": r.samples, "witness": r.witness}));
    }
    let mut rep = lin.merge(semi).merge(pos).merge(dom);
    rep.name = "penalty_family".into();
    rep.cloud = Some(probes.descriptor().clone());
    rep.detail("items", serde_json::Value::Object(items));
    rep.detail("kappa_xi", json!(lmax.max(0.0)));
    rep.detail("kappa_xi_certified", json!(kappa));
    if let Collection::Plateau { r_prime, r_dprime } = fam.collection {
        let knots: Vec<(f64, f64)> = (0..=8).map(|k| {
            let d = r_prime + (r_dprime - r_prime) * k as f64 / 8.0;
            (d, fam.ell(d).0)
        }).collect();
        rep.detail("ellbar_knots", json!(knots));
    }
    Ok(FamilyCertificate {
        passed: rep.passed,
        kappa_xi: lmax.max(0.0),
        kappa_xi_certified: kappa,
        report: rep,
    })
}

/// Monotone `C²` cut-off `Ω⁺_M` (upper) or `Ω⁻_M` (lower).
///
/// `Ω⁺_M(r) = r` for `r <= M` and `M + 1` for `r >= M + 2`;
/// `Ω⁻_M(r) = -Ω⁺_{-M}(-r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutOff {
    pub level: f64,
    pub upper: bool,
}

impl CutOff {
    pub fn upper(level: f64) -> Self {
        Self { level, upper: true }
    }

    pub fn lower(level: f64) -> Self {
        Self { level, upper: false }
    }

    /// `(Ω(r), Ω'(r), Ω''(r))`.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        if self.upper {
            omega_plus(self.level, r)
        } else {
            let (v, d1, d2) = omega_plus(-self.level, -r);
            (-v, d1, -d2)
        }
    }
}

fn omega_plus(m: f64, r: f64) -> (f64, f64, f64) {
    let t = r - m;
    if t <= 0.0 {
        (r, 1.0, 0.0)
    } else if t >= 2.0 {
        (m + 1.0, 0.0, 0.0)
    } else {
        let s = 0.5 * t;
        let v = m + t - 2.0 * (s * s * s - 0.5 * s * s * s * s);
        (v, 1.0 - s * s * (3.0 - 2.0 * s), -3.0 * s * (1.0 - s))
    }
}

/// `Ω ∘ f` with derivatives by the chain rule.
pub fn apply_cutoff(f: &ScalarField, cut: CutOff) -> ScalarField {
    let (f1, f2, f3, g2, g3, h3) = (f.clone(), f.clone(), f.clone(), f.clone(), f.clone(), f.clone());
    let mut out = ScalarField::new(f.dim(), format!("Ω({})", f.label()), move |x: &[f64]| cut.eval(f1.value_unchecked(x)).0)
        .with_smoothness(f.smoothness().min(Smoothness::C2));
    if f.has_gradient() {
        out = out.with_gradient(move |x: &[f64]| {
            let d1 = cut.eval(f2.value_unchecked(x)).1;
            g2.gradient(x).unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN)) * d1
        });
    }
    if f.has_gradient() && f.has_hessian() {
        out = out.with_hessian(move |x: &[f64]| {
            let (_, d1, d2) = cut.eval(f3.value_unchecked(x));
            let g = g3.gradient(x).unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN));
            let h = h3.hessian(x).unwrap_or_else(|_| DMatrix::from_element(x.len(), x.len(), f64::NAN));
            &g * g.transpose() * d2 + h * d1
        });
    }
    out.with_smoothness(f.smoothness().min(Smoothness::C2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn jet_vs_fd(f: impl Fn(&[f64]) -> Jet, y: &[f64]) {
        let j = f(y);
        let g = fd_gradient_fn(|t| f(t).value, y, 1e-6);
        let h = fd_hessian_fn(|t| f(t).value, y, 1e-4);
        for i in 0..y.len() {
            assert_relative_eq!(j.gradient[i], g[i], epsilon = 1e-6, max_relative = 1e-6);
            for k in 0..y.len() {
                assert_relative_eq!(j.hessian[(i, k)], h[(i, k)], epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn plateau_derivatives_match_finite_differences() {
        let fam = PenaltyFamily::plateau(2, 3.0, 4.0, 5.0).unwrap();
        let z = [0.2, -0.1];
        for y in [[1.0, 2.0], [3.0, 2.5], [4.1, 1.0], [2.9, -3.2], [6.0, 0.0]] {
            jet_vs_fd(|t| fam.xi(&z, t).unwrap(), &y);
            jet_vs_fd(|t| fam.zeta(&z, &[0.3, -0.8], t).unwrap(), &y);
        }
    }

    #[test]
    fn plateau_value_beyond_outer_radius() {
        let fam = PenaltyFamily::plateau(1, 3.0, 4.0, 5.0).unwrap();
        let b = XiBundle::new(Point::origin(1), Point::origin(1), Point::new(vec![7.0]).unwrap()).unwrap();
        let j = eval_xi(&fam, &b, &[7.0]).unwrap();
        assert_eq!(j.value, 36.0);
    }

    #[test]
    fn quadratic_bundle_values() {
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap();
        let b = XiBundle::new(Point::origin(1), Point::new(vec![0.5]).unwrap(), Point::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(eval_xi0(&fam, &b, &[2.0]).unwrap().value, 2.0 + 1.0);
        assert_eq!(eval_xi(&fam, &b, &[2.0]).unwrap().value, 3.0 + 0.5);
    }

    #[test]
    fn cutoffs() {
        let up = CutOff::upper(0.0);
        assert_eq!(up.eval(-1.0).0, -1.0);
        assert_eq!(up.eval(2.0).0, 1.0);
        assert_eq!(up.eval(5.0).0, 1.0);
        let lo = CutOff::lower(0.0);
        assert_eq!(lo.eval(1.0).0, 1.0);
        assert_eq!(lo.eval(-3.0).0, -1.0);
        for r in [-0.5, 0.3, 1.1, 1.9] {
            let (v, d1, d2) = up.eval(r);
            let h = 1e-5;
            assert_relative_eq!(d1, (up.eval(r + h).0 - up.eval(r - h).0) / (2.0 * h), epsilon = 1e-8);
            assert_relative_eq!(d2, (up.eval(r + h).0 - 2.0 * v + up.eval(r - h).0) / (h * h), epsilon = 1e-4);
            assert!((0.0..=1.0).contains(&d1));
        }
    }

    #[test]
    fn default_containment_certifies() {
        let c = Containment::default_log(2);
        let cloud = SampleCloud::ball(&[0.0, 0.0], 20.0, 500, 1).unwrap();
        assert!(c.certify(&cloud).unwrap().passed);
        assert_relative_eq!(log_lyapunov_radius(4.0), 10.3536, epsilon = 1e-3);
    }

    #[test]
    fn distance_penalty_is_not_semiconcave() {
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap().with_custom_xi(|z, y| distance_sq(z, y).sqrt());
        let centers = SampleCloud::grid(&[0.0], &[0.0], &[1]).unwrap();
        let probes = SampleCloud::grid(&[-6.0], &[6.0], &[61]).unwrap();
        assert!(!certify_family(&fam, &centers, &probes, 0).unwrap().passed);
    }
}
