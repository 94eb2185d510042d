//! Check reports, witnesses and modulus-envelope certification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::funcspace::CloudDescriptor;

/// The worst sample seen by a check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub note: String,
}

/// Outcome of a sampled check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub samples: usize,
    /// Largest `lhs - rhs` over all samples (negative when every sample has slack).
    pub max_violation: f64,
    pub tolerance: f64,
    pub witness: Option<Witness>,
    pub cloud: Option<CloudDescriptor>,
    pub details: BTreeMap<String, Value>,
    pub runtime_ms: f64,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: true,
            samples: 0,
            max_violation: f64::NEG_INFINITY,
            tolerance,
            witness: None,
            cloud: None,
            details: BTreeMap::new(),
            runtime_ms: 0.0,
        }
    }

    pub fn with_cloud(mut self, c: &CloudDescriptor) -> Self {
        self.cloud = Some(c.clone());
        self
    }

    pub fn detail(&mut self, key: &str, v: impl Into<Value>) {
        self.details.insert(key.to_string(), v.into());
    }

    /// Record `lhs <= rhs + tolerance` at `point`.
    pub fn observe(&mut self, point: &[f64], lhs: f64, rhs: f64, note: impl FnOnce() -> String) {
        self.samples += 1;
        let viol = if lhs.is_nan() || rhs.is_nan() { f64::INFINITY } else { lhs - rhs };
        if self.witness.is_none() || viol > self.max_violation {
            self.max_violation = viol;
            self.witness = Some(Witness {
                point: point.to_vec(),
                lhs,
                rhs,
                note: note(),
            });
        }
        if !(viol <= self.tolerance) {
            self.passed = false;
        }
    }

    /// Mark as failed with a reason, keeping the sample statistics.
    pub fn fail(&mut self, reason: impl Into<String>) {
        self.passed = false;
        let r = reason.into();
        let entry = self.details.entry("failures".into()).or_insert_with(|| Value::Array(vec![]));
        if let Value::Array(a) = entry {
            a.push(Value::String(r));
        }
    }

    /// Associative merge of two reports of the same check.
    pub fn merge(mut self, other: CheckReport) -> CheckReport {
        self.passed &= other.passed;
        self.samples += other.samples;
        if self.witness.is_none() || other.max_violation > self.max_violation {
            if other.witness.is_some() {
                self.max_violation = other.max_violation;
                self.witness = other.witness;
            }
        }
        self.tolerance = self.tolerance.max(other.tolerance);
        for (k, v) in other.details {
            match (self.details.get_mut(&k), v) {
                (Some(Value::Array(a)), Value::Array(b)) => a.extend(b),
                (Some(_), _) => {}
                (None, v) => {
                    self.details.insert(k, v);
                }
            }
        }
        self.runtime_ms += other.runtime_ms;
        self
    }
}

/// One sample for modulus certification.
#[derive(Clone, Debug)]
pub struct ModulusSample {
    /// Abscissa `α r^2 + r`.
    pub abscissa: f64,
    pub lhs: f64,
    /// Pair distance `r`.
    pub distance: f64,
    /// `α r^2`, the scale for the coalescence ratio.
    pub scale: f64,
    pub point: Vec<f64>,
    pub alpha: f64,
}

/// Result of fitting a nondecreasing envelope `ω` with `lhs <= ω(abscissa)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulusFit {
    pub passed: bool,
    /// Extrapolated envelope value at the origin.
    pub omega_at_zero: f64,
    /// Growth exponent of `lhs / (α r^2)` as `r` shrinks; bounded moduli have ≈ 0.
    pub coalescence_exponent: f64,
    /// Envelope knots `(abscissa, ω)`, thinned to at most 64 entries.
    pub knots: Vec<(f64, f64)>,
}

const ZERO_TOL: f64 = 1e-6;
const EXPONENT_TOL: f64 = 0.25;

/// Certify that the samples admit a modulus of continuity.
///
/// The envelope is the smallest nondecreasing majorant (the isotonic upper
/// fit) of the positive parts. Pass requires the envelope to extrapolate to
/// at most `1e-6` at zero (a power-law fit on the smallest quarter of
/// abscissae) and the ratio `lhs / (α r^2)` not to grow as pairs coalesce,
/// which is what goes wrong when `α r^2` is held fixed and `r → 0`.
pub fn certify_modulus(samples: &[ModulusSample]) -> ModulusFit {
    let mut s: Vec<(f64, f64)> = samples
        .iter()
        .filter(|m| m.abscissa > 0.0)
        .map(|m| (m.abscissa, m.lhs.max(0.0)))
        .collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut env = Vec::with_capacity(s.len());
    let mut run = 0.0f64;
    for &(a, l) in &s {
        run = run.max(l);
        env.push((a, run));
    }

    let omega0 = extrapolate_to_zero(&env);
    let exponent = coalescence_exponent(samples);
    let stride = (env.len() / 64).max(1);
    let knots = env.iter().step_by(stride).copied().collect();
    ModulusFit {
        passed: omega0 <= ZERO_TOL && exponent <= EXPONENT_TOL,
        omega_at_zero: omega0,
        coalescence_exponent: exponent,
        knots,
    }
}

fn extrapolate_to_zero(env: &[(f64, f64)]) -> f64 {
    if env.is_empty() {
        return 0.0;
    }
    let quarter = &env[..(env.len() / 4).max(2).min(env.len())];
    let pos: Vec<(f64, f64)> = quarter
        .iter()
        .filter(|(_, w)| *w > 1e-300)
        .map(|(a, w)| (a.ln(), w.ln()))
        .collect();
    if pos.is_empty() {
        return 0.0;
    }
    if pos.len() < 2 {
        return quarter[0].1;
    }
    let n = pos.len() as f64;
    let mx = pos.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pos.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pos.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pos.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    if beta > 0.05 {
        0.0
    } else {
        quarter[0].1
    }
}

fn coalescence_exponent(samples: &[ModulusSample]) -> f64 {
    let d_min = samples
        .iter()
        .filter(|m| m.distance > 0.0 && m.scale > 0.0)
        .map(|m| m.distance)
        .fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return 0.0;
    }
    let mut shells: BTreeMap<i64, f64> = BTreeMap::new();
    for m in samples.iter().filter(|m| m.distance > 0.0 && m.scale > 0.0) {
        let k = ((m.distance / d_min).log2() + 1e-9).floor() as i64;
        let r = m.lhs.max(0.0) / m.scale;
        let e = shells.entry(k).or_insert(0.0);
        *e = e.max(r);
    }
    let first: Vec<(i64, f64)> = shells.into_iter().take(4).collect();
    if first.len() < 2 {
        return 0.0;
    }
    let (k0, r0) = first[0];
    let (k1, r1) = *first.last().unwrap();
    if r0 <= ZERO_TOL {
        return 0.0;
    }
    if r1 <= 1e-300 {
        return f64::INFINITY;
    }
    (r0 / r1).ln() / ((k1 - k0) as f64 * std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(f: impl Fn(f64, f64) -> f64) -> Vec<ModulusSample> {
        let mut out = vec![];
        for &alpha in &[2.0, 8.0, 64.0, 1024.0] {
            for k in 1..=40 {
                let r = 0.001 * k as f64;
                out.push(ModulusSample {
                    abscissa: alpha * r * r + r,
                    lhs: f(alpha, r),
                    distance: r,
                    scale: alpha * r * r,
                    point: vec![r],
                    alpha,
                });
            }
        }
        out
    }

    #[test]
    fn lipschitz_moduli_pass() {
        assert!(certify_modulus(&samples(|a, r| a * r * r)).passed);
        assert!(certify_modulus(&samples(|a, r| -a * r * r)).passed);
    }

    #[test]
    fn square_root_drift_fails() {
        let fit = certify_modulus(&samples(|a, r| a * r * r.sqrt()));
        assert!(!fit.passed);
        assert!(fit.coalescence_exponent > 0.4);
    }

    #[test]
    fn offset_fails_at_zero() {
        let fit = certify_modulus(&samples(|_, _| 0.1));
        assert!(!fit.passed);
        assert!(fit.omega_at_zero > 0.05);
    }

    #[test]
    fn merge_is_associative_on_verdict_and_worst() {
        let mk = |v: f64| {
            let mut r = CheckReport::new("c", 0.0);
            r.observe(&[v], v, 0.0, String::new);
            r
        };
        let a = mk(-1.0).merge(mk(2.0)).merge(mk(0.5));
        let b = mk(-1.0).merge(mk(2.0).merge(mk(0.5)));
        assert_eq!(a.passed, b.passed);
        assert_eq!(a.max_violation, b.max_violation);
        assert_eq!(a.witness, b.witness);
        assert_eq!(a.samples, 3);
    }
}
