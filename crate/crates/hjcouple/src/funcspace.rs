//! Points, scalar fields with optional analytic derivatives, sample clouds
//! and finite-difference oracles on `R^q`.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A point of `R^q` with finite coordinates.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("points need at least one coordinate"));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinate {c}")));
        }
        Ok(Point(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(coords.to_vec())
    }

    pub fn origin(q: usize) -> Self {
        Point(vec![0.0; q.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub(crate) fn unchecked(coords: Vec<f64>) -> Self {
        Point(coords)
    }
}

impl Deref for Point {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Point::new(v)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Vec<f64> {
        p.0
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|x - y|^2`.
pub fn distance_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Shifted squared distance `|(x - u) - (x' - u')|^2`.
pub fn shifted_distance_sq(x: &[f64], xp: &[f64], u: &[f64], up: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let d = (x[i] - u[i]) - (xp[i] - up[i]);
            d * d
        })
        .sum()
}

/// Declared regularity of a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Smoothness {
    C0,
    C1,
    C2,
    CInf,
}

pub type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Continuous piecewise-linear data on sorted nodes, extended by constants.
#[derive(Clone, Debug)]
pub struct PiecewiseLinear1d {
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear1d {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != values.len() {
            return Err(Error::invalid("piecewise-linear data needs matching, non-empty nodes and values"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("piecewise-linear nodes must be strictly increasing"));
        }
        if nodes.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("piecewise-linear data".into()));
        }
        Ok(Self { nodes, values })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn negated(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return self.values[0];
        }
        if x >= self.nodes[n - 1] {
            return self.values[n - 1];
        }
        let k = self.nodes.partition_point(|&t| t <= x) - 1;
        let (a, b) = (self.nodes[k], self.nodes[k + 1]);
        let t = (x - a) / (b - a);
        self.values[k] * (1.0 - t) + self.values[k + 1] * t
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A real-valued function on `R^q` with optional analytic derivatives.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    label: String,
    value: ValueFn,
    gradient: Option<GradientFn>,
    hessian: Option<HessianFn>,
    smoothness: Smoothness,
    lower: Option<f64>,
    upper: Option<f64>,
    piecewise: Option<Arc<PiecewiseLinear1d>>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("smoothness", &self.smoothness)
            .field("gradient", &self.gradient.is_some())
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

impl ScalarField {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            smoothness: Smoothness::C0,
            lower: None,
            upper: None,
            piecewise: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self.smoothness = self.smoothness.max(Smoothness::C1);
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self.smoothness = self.smoothness.max(Smoothness::C2);
        self
    }

    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    pub fn with_bounds(mut self, lower: Option<f64>, upper: Option<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Piecewise-linear interpolant of 1-D nodal data, constant outside the nodes.
    pub fn piecewise_linear(label: impl Into<String>, data: PiecewiseLinear1d) -> Self {
        let data = Arc::new(data);
        let d = Arc::clone(&data);
        let sup = data.sup_abs();
        let mut f = Self::new(1, label, move |x: &[f64]| d.eval(x[0]));
        f.piecewise = Some(data);
        f.lower = Some(-sup);
        f.upper = Some(sup);
        f
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(dim, format!("const({c})"), move |_| c)
            .with_gradient(move |x: &[f64]| DVector::zeros(x.len()))
            .with_hessian(move |x: &[f64]| DMatrix::zeros(x.len(), x.len()))
            .with_smoothness(Smoothness::CInf)
            .with_bounds(Some(c), Some(c))
    }

    /// `scale/2 * |x - center|^2`.
    pub fn quadratic(center: &[f64], scale: f64) -> Self {
        let q = center.len();
        let (c1, c2) = (center.to_vec(), center.to_vec());
        Self::new(q, "quadratic", move |x: &[f64]| 0.5 * scale * distance_sq(x, &c1))
            .with_gradient(move |x: &[f64]| DVector::from_iterator(x.len(), x.iter().zip(&c2).map(|(a, b)| scale * (a - b))))
            .with_hessian(move |x: &[f64]| DMatrix::identity(x.len(), x.len()) * scale)
            .with_smoothness(Smoothness::CInf)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub fn bounds(&self) -> (Option<f64>, Option<f64>) {
        (self.lower, self.upper)
    }

    pub fn piecewise_data(&self) -> Option<&PiecewiseLinear1d> {
        self.piecewise.as_deref()
    }

    /// Value at `x`; checks the dimension, finiteness and declared bounds.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let v = (self.value)(x);
        if v.is_nan() {
            return Err(Error::NonFinite(format!("field `{}` at {:?}", self.label, x)));
        }
        let slack = 1e-9 * (1.0 + v.abs());
        let below = self.lower.is_some_and(|l| v < l - slack);
        let above = self.upper.is_some_and(|u| v > u + slack);
        if below || above {
            return Err(Error::BoundViolation {
                field: self.label.clone(),
                point: x.to_vec(),
                value: v,
            });
        }
        Ok(v)
    }

    /// Raw value without checks, for inner loops over validated points.
    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        let g = self.gradient.as_ref().ok_or_else(|| Error::MissingDerivative {
            what: "gradient",
            field: self.label.clone(),
        })?;
        let g = g(x);
        if g.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}` at {:?}", self.label, x)));
        }
        Ok(g)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        let h = self.hessian.as_ref().ok_or_else(|| Error::MissingDerivative {
            what: "hessian",
            field: self.label.clone(),
        })?;
        let h = h(x);
        if h.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("hessian of `{}` at {:?}", self.label, x)));
        }
        Ok(h)
    }

    /// `f ∘ s_z` where `s_z(x) = x - z`, derivatives carried through.
    pub fn shifted(&self, z: &[f64]) -> Result<ScalarField> {
        check_dim(self.dim, z.len())?;
        let z: Arc<[f64]> = z.into();
        let shift = move |x: &[f64], z: &[f64]| -> Vec<f64> { x.iter().zip(z).map(|(a, b)| a - b).collect() };
        let (f, zv) = (self.value.clone(), z.clone());
        let mut out = ScalarField::new(self.dim, format!("{}∘s", self.label), move |x: &[f64]| f(&shift(x, &zv)));
        out.smoothness = self.smoothness;
        out.lower = self.lower;
        out.upper = self.upper;
        if let Some(g) = self.gradient.clone() {
            let zg = z.clone();
            out.gradient = Some(Arc::new(move |x: &[f64]| g(&shift(x, &zg))));
        }
        if let Some(h) = self.hessian.clone() {
            let zh = z.clone();
            out.hessian = Some(Arc::new(move |x: &[f64]| h(&shift(x, &zh))));
        }
        Ok(out)
    }

    /// `(x, x') ↦ a f1(x) + b f2(x')` on the product space.
    pub fn tensor_combination(f1: &ScalarField, a: f64, f2: &ScalarField, b: f64) -> ScalarField {
        let q1 = f1.dim;
        let q2 = f2.dim;
        let (v1, v2) = (f1.value.clone(), f2.value.clone());
        let mut out = ScalarField::new(q1 + q2, format!("{}⊕{}", f1.label, f2.label), move |x: &[f64]| {
            a * v1(&x[..q1]) + b * v2(&x[q1..])
        });
        out.smoothness = f1.smoothness.min(f2.smoothness);
        if let (Some(g1), Some(g2)) = (f1.gradient.clone(), f2.gradient.clone()) {
            out.gradient = Some(Arc::new(move |x: &[f64]| {
                let (a1, a2) = (g1(&x[..q1]), g2(&x[q1..]));
                DVector::from_iterator(q1 + q2, a1.iter().map(|c| a * c).chain(a2.iter().map(|c| b * c)))
            }));
        }
        if let (Some(h1), Some(h2)) = (f1.hessian.clone(), f2.hessian.clone()) {
            out.hessian = Some(Arc::new(move |x: &[f64]| {
                let mut m = DMatrix::zeros(q1 + q2, q1 + q2);
                m.view_mut((0, 0), (q1, q1)).copy_from(&(h1(&x[..q1]) * a));
                m.view_mut((q1, q1), (q2, q2)).copy_from(&(h2(&x[q1..]) * b));
                m
            }));
        }
        out
    }

    /// `f1 ⊕ f2`.
    pub fn direct_sum(f1: &ScalarField, f2: &ScalarField) -> ScalarField {
        Self::tensor_combination(f1, 1.0, f2, 1.0)
    }

    /// Linear combination `Σ c_i f_i` on a common space.
    pub fn linear_combination(terms: &[(f64, ScalarField)]) -> Result<ScalarField> {
        let first = terms.first().ok_or_else(|| Error::invalid("empty linear combination"))?;
        let dim = first.1.dim;
        for (_, f) in terms {
            check_dim(dim, f.dim)?;
        }
        let vals: Vec<(f64, ValueFn)> = terms.iter().map(|(c, f)| (*c, f.value.clone())).collect();
        let mut out = ScalarField::new(dim, "combination", move |x: &[f64]| vals.iter().map(|(c, f)| c * f(x)).sum());
        out.smoothness = terms.iter().map(|(_, f)| f.smoothness).min().unwrap_or(Smoothness::C0);
        if terms.iter().all(|(_, f)| f.gradient.is_some()) {
            let gs: Vec<(f64, GradientFn)> = terms.iter().map(|(c, f)| (*c, f.gradient.clone().unwrap())).collect();
            out.gradient = Some(Arc::new(move |x: &[f64]| {
                gs.iter().fold(DVector::zeros(x.len()), |acc, (c, g)| acc + g(x) * *c)
            }));
        }
        if terms.iter().all(|(_, f)| f.hessian.is_some()) {
            let hs: Vec<(f64, HessianFn)> = terms.iter().map(|(c, f)| (*c, f.hessian.clone().unwrap())).collect();
            out.hessian = Some(Arc::new(move |x: &[f64]| {
                hs.iter().fold(DMatrix::zeros(x.len(), x.len()), |acc, (c, h)| acc + h(x) * *c)
            }));
        }
        Ok(out)
    }
}

/// Serializable description of a sample cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CloudDescriptor {
    /// Tensor grid with `n[i]` points on `[lo[i], hi[i]]`.
    Grid { lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize> },
    /// Seeded uniform samples in a ball.
    Ball {
        center: Vec<f64>,
        radius: f64,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Explicit { points: Vec<Vec<f64>> },
}

/// A finite set of points, generated deterministically from its descriptor.
#[derive(Clone, Debug)]
pub struct SampleCloud {
    dim: usize,
    points: Vec<Point>,
    descriptor: CloudDescriptor,
}

const MAX_CLOUD_POINTS: usize = 5_000_000;

impl SampleCloud {
    pub fn from_descriptor(d: &CloudDescriptor) -> Result<Self> {
        match d {
            CloudDescriptor::Grid { lo, hi, n } => Self::grid(lo, hi, n),
            CloudDescriptor::Ball {
                center,
                radius,
                count,
                seed,
            } => Self::ball(center, *radius, *count, *seed),
            CloudDescriptor::Explicit { points } => Self::explicit(points.clone()),
        }
    }

    pub fn grid(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Self> {
        let q = lo.len();
        if q == 0 || hi.len() != q || n.len() != q {
            return Err(Error::invalid("grid bounds and counts must have the same non-zero length"));
        }
        if lo.iter().chain(hi).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid bounds".into()));
        }
        for i in 0..q {
            if n[i] == 0 || (n[i] > 1 && !(hi[i] > lo[i])) || (n[i] == 1 && hi[i] < lo[i]) {
                return Err(Error::invalid(format!("grid axis {i}: need n >= 1 and hi > lo")));
            }
        }
        let total = n.iter().try_fold(1usize, |acc, &k| acc.checked_mul(k));
        let total = match total {
            Some(t) if t <= MAX_CLOUD_POINTS => t,
            _ => return Err(Error::invalid("grid has too many points")),
        };
        let axes: Vec<Vec<f64>> = (0..q).map(|i| grid_axis(lo[i], hi[i], n[i])).collect();
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; q];
        for _ in 0..total {
            points.push(Point::unchecked((0..q).map(|i| axes[i][idx[i]]).collect()));
            for i in (0..q).rev() {
                idx[i] += 1;
                if idx[i] < n[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        Ok(Self {
            dim: q,
            points,
            descriptor: CloudDescriptor::Grid {
                lo: lo.to_vec(),
                hi: hi.to_vec(),
                n: n.to_vec(),
            },
        })
    }

    pub fn ball(center: &[f64], radius: f64, count: usize, seed: u64) -> Result<Self> {
        let q = center.len();
        if q == 0 || !(radius >= 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ball cloud needs a finite center and radius >= 0"));
        }
        if count == 0 || count > MAX_CLOUD_POINTS {
            return Err(Error::invalid("ball cloud count must be in 1..=5000000"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..count)
            .map(|_| Point::unchecked(sample_in_ball(&mut rng, center, radius)))
            .collect();
        Ok(Self {
            dim: q,
            points,
            descriptor: CloudDescriptor::Ball {
                center: center.to_vec(),
                radius,
                count,
                seed,
            },
        })
    }

    pub fn explicit(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::invalid("explicit cloud is empty"))?;
        let q = first.len();
        let pts = points
            .iter()
            .map(|p| {
                check_dim(q, p.len())?;
                Point::from_slice(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: q,
            points: pts,
            descriptor: CloudDescriptor::Explicit { points },
        })
    }

    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        Self::explicit(points.into_iter().map(Point::into_vec).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn descriptor(&self) -> &CloudDescriptor {
        &self.descriptor
    }

    /// Largest grid spacing, for grid clouds.
    pub fn mesh(&self) -> Option<f64> {
        match &self.descriptor {
            CloudDescriptor::Grid { lo, hi, n } => Some(
                (0..lo.len())
                    .map(|i| if n[i] > 1 { (hi[i] - lo[i]) / (n[i] - 1) as f64 } else { 0.0 })
                    .fold(0.0, f64::max),
            ),
            _ => None,
        }
    }

    /// Split each point of a cloud in `R^{k q}` into `k` blocks of length `q`.
    pub fn blocks(&self, k: usize) -> Result<Vec<Vec<&[f64]>>> {
        if k == 0 || self.dim % k != 0 {
            return Err(Error::invalid(format!("cloud of dimension {} does not split into {k} blocks", self.dim)));
        }
        let q = self.dim / k;
        Ok(self.points.iter().map(|p| p.chunks(q).collect()).collect())
    }
}

fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|k| if k == n - 1 { hi } else { lo + k as f64 * h })
        .collect()
}

fn sample_in_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let q = center.len();
    loop {
        let dir: Vec<f64> = (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&dir);
        if n > 1e-300 {
            let r = radius * rng.gen::<f64>().powf(1.0 / q as f64);
            return dir.iter().zip(center).map(|(d, c)| c + r * d / n).collect();
        }
    }
}

/// Central-difference gradient of a closure.
pub fn fd_gradient_fn(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DVector<f64> {
    let mut y = x.to_vec();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        }),
    )
}

/// Central-difference Hessian of a closure.
pub fn fd_hessian_fn(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let q = x.len();
    let mut m = DMatrix::zeros(q, q);
    let mut y = x.to_vec();
    let f0 = f(x);
    for i in 0..q {
        y[i] = x[i] + h;
        let fp = f(&y);
        y[i] = x[i] - h;
        let fm = f(&y);
        y[i] = x[i];
        m[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let mut s = 0.0;
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                y[i] = x[i] + si * h;
                y[j] = x[j] + sj * h;
                s += si * sj * f(&y);
            }
            y[i] = x[i];
            y[j] = x[j];
            let v = s / (4.0 * h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn fd_gradient(f: &ScalarField, x: &[f64], h: f64) -> Result<DVector<f64>> {
    check_dim(f.dim, x.len())?;
    Ok(fd_gradient_fn(|y| f.value_unchecked(y), x, h))
}

pub fn fd_hessian(f: &ScalarField, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    check_dim(f.dim, x.len())?;
    Ok(fd_hessian_fn(|y| f.value_unchecked(y), x, h))
}

/// Seeded battery of smooth test fields with analytic derivatives.
///
/// Each member is `a sin(<k, x> + c) + b/2 |x - m|^2 + <l, x>`.
pub fn smooth_battery(q: usize, count: usize, seed: u64) -> Vec<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-0.5..0.5);
            let c: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let m: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
            smooth_member(i, a, b, c, k, m, l)
        })
        .collect()
}

fn smooth_member(i: usize, a: f64, b: f64, c: f64, k: Vec<f64>, m: Vec<f64>, l: Vec<f64>) -> ScalarField {
    let q = k.len();
    let (k1, m1, l1) = (k.clone(), m.clone(), l.clone());
    let (k2, m2, l2) = (k.clone(), m.clone(), l.clone());
    let k3 = k;
    ScalarField::new(q, format!("battery[{i}]"), move |x: &[f64]| {
        a * (dot(&k1, x) + c).sin() + 0.5 * b * distance_sq(x, &m1) + dot(&l1, x)
    })
    .with_gradient(move |x: &[f64]| {
        let s = a * (dot(&k2, x) + c).cos();
        DVector::from_iterator(q, (0..q).map(|j| s * k2[j] + b * (x[j] - m2[j]) + l2[j]))
    })
    .with_hessian(move |x: &[f64]| {
        let s = -a * (dot(&k3, x) + c).sin();
        DMatrix::from_fn(q, q, |r, col| s * k3[r] * k3[col] + if r == col { b } else { 0.0 })
    })
    .with_smoothness(Smoothness::CInf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn distances() {
        assert_eq!(distance_sq(&[0.0, 0.0], &[3.0, 4.0]), 25.0);
        assert_eq!(shifted_distance_sq(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(shifted_distance_sq(&[2.0], &[0.0], &[1.0], &[0.0]), 1.0);
    }

    #[test]
    fn point_rejects_non_finite() {
        assert!(Point::new(vec![1.0, f64::NAN]).is_err());
        assert!(Point::new(vec![]).is_err());
    }

    #[test]
    fn grid_has_inclusive_endpoints_and_mesh() {
        let c = SampleCloud::grid(&[-1.0], &[1.0], &[5]).unwrap();
        let xs: Vec<f64> = c.points().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(c.mesh(), Some(0.5));
    }

    #[test]
    fn ball_cloud_is_reproducible_and_inside() {
        let a = SampleCloud::ball(&[1.0, 2.0], 0.5, 200, 9).unwrap();
        let b = SampleCloud::ball(&[1.0, 2.0], 0.5, 200, 9).unwrap();
        assert_eq!(a.points(), b.points());
        assert!(a.points().iter().all(|p| distance_sq(p, &[1.0, 2.0]) <= 0.25 + 1e-15));
    }

    #[test]
    fn bounds_and_dimension_are_enforced() {
        let f = ScalarField::new(1, "f", |x| x[0]).with_bounds(Some(-1.0), Some(1.0));
        assert!(f.value(&[0.5]).is_ok());
        assert!(matches!(f.value(&[2.0]), Err(Error::BoundViolation { .. })));
        assert!(matches!(f.value(&[0.0, 0.0]), Err(Error::Dimension { .. })));
        assert!(matches!(f.gradient(&[0.0]), Err(Error::MissingDerivative { .. })));
    }

    #[test]
    fn shift_carries_derivatives() {
        let f = ScalarField::quadratic(&[0.0, 0.0], 2.0);
        let g = f.shifted(&[1.0, -1.0]).unwrap();
        assert_eq!(g.value(&[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(g.gradient(&[2.0, -1.0]).unwrap()[0], 2.0);
    }

    #[test]
    fn battery_derivatives_match_finite_differences() {
        for f in smooth_battery(2, 10, 3) {
            let x = [0.3, -0.7];
            let g = f.gradient(&x).unwrap();
            let gf = fd_gradient(&f, &x, 1e-5).unwrap();
            let h = f.hessian(&x).unwrap();
            let hf = fd_hessian(&f, &x, 1e-4).unwrap();
            for i in 0..2 {
                assert_relative_eq!(g[i], gf[i], epsilon = 1e-8);
                for j in 0..2 {
                    assert_relative_eq!(h[(i, j)], hf[(i, j)], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn piecewise_linear_interpolates_and_extends() {
        let d = PiecewiseLinear1d::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]).unwrap();
        assert_eq!(d.eval(0.5), 1.0);
        assert_eq!(d.eval(1.5), 1.5);
        assert_eq!(d.eval(-3.0), 0.0);
        assert_eq!(d.eval(7.0), 1.0);
    }

    #[test]
    fn direct_sum_blocks() {
        let f1 = ScalarField::quadratic(&[0.0], 1.0);
        let f2 = ScalarField::quadratic(&[1.0], 2.0);
        let s = ScalarField::direct_sum(&f1, &f2);
        assert_eq!(s.value(&[2.0, 0.0]).unwrap(), 2.0 + 1.0);
        let h = s.hessian(&[0.0, 0.0]).unwrap();
        assert_eq!((h[(0, 0)], h[(1, 1)], h[(0, 1)]), (1.0, 2.0, 0.0));
    }
}
