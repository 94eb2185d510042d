//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Oracles are computed here, independently of the library code paths under test.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hjcouple::cli::{self, Overrides};
use hjcouple::convolve::{check_convolution_laws, sup_convolve};
use hjcouple::couplings::{
    distance_increment_bounds, eval_coupling, lyapunov_increment_bounds, shifted_distance_field, symmetric_walk, CouplingSpec,
    IncrementSampling, JumpCoupling, JumpRule, SyncDiffusion,
};
use hjcouple::doubling::{check_jensen_sandwich, jensen_perturb, run_trace, strict_bound, DoublingProblem, JensenConfig};
use hjcouple::funcspace::{PiecewiseLinear1d, Point, SampleCloud, ScalarField};
use hjcouple::operators::{check_isaacs, CostFunctional, CutProfile, DiffusionOp, DiscreteMeasure, IsaacsNode, JumpOp, OperatorSpec};
use hjcouple::penalty::{Containment, PenaltyFamily};
use hjcouple::resolvent::{cycle_walk, solve_bellman_isaacs, solve_linear, FiniteProblem};

type Outcome = Result<Verdict, String>;

struct Verdict {
    passed: bool,
    detail: String,
    /// Failure traced to an inequality that is false as stated; reported but not fatal.
    known_defect: bool,
}

impl Verdict {
    fn of(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into(), known_defect: false }
    }
}

fn documents() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("documents")
}

fn walk() -> JumpOp {
    JumpOp::constant(1, symmetric_walk())
}

fn synchronous_null() -> Outcome {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 0.8]);
    let mu = DiscreteMeasure::new(vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0), (vec![0.0, 1.0], 0.5), (vec![0.0, -1.0], 0.5)])
        .map_err(|e| e.to_string())?;
    let c = CouplingSpec::Sum(vec![
        CouplingSpec::Diffusion(SyncDiffusion::new(DiffusionOp::constant(sigma))),
        CouplingSpec::Jump(JumpCoupling::new(JumpOp::constant(2, mu), JumpRule::Synchronous)),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let xp: Vec<f64> = (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let alpha = rng.gen_range(0.1..100.0);
        let g = shifted_distance_field(alpha, &[0.0; 2], &[0.0; 2], &[0.0; 2], &[0.0; 2]);
        worst = worst.max(eval_coupling(&c, &g, &x, &xp).map_err(|e| e.to_string())?.abs());
    }
    Ok(Verdict::of(worst <= 1e-12, format!("max |Â(α/2 d²)| = {worst:.3e} over 1000 samples")))
}

fn product_positive() -> Outcome {
    let c = CouplingSpec::Jump(JumpCoupling::new(walk(), JumpRule::Product));
    let g = shifted_distance_field(1.0, &[0.0], &[0.0], &[0.0], &[0.0]);
    let atoms = symmetric_walk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (x, xp) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        // enumerate independent jump pairs; symmetric cut compensation sums to zero
        let mut oracle = 0.0;
        for (z1, w1) in atoms.atoms() {
            for (z2, w2) in atoms.atoms() {
                let d = x + z1[0] - xp - z2[0];
                oracle += w1 * w2 * (0.5 * d * d - 0.5 * (x - xp) * (x - xp));
            }
        }
        let got = eval_coupling(&c, &g, &[x], &[xp]).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs()).max((got - 4.0).abs());
    }
    Ok(Verdict::of(worst <= 1e-12, format!("max deviation from enumeration oracle and from 4: {worst:.3e}")))
}

fn increment_batteries() -> Outcome {
    let mut lines = vec![];
    let mut others_pass = true;
    let mut log_bound_pass = true;
    for q in 1..=3 {
        let rep = lyapunov_increment_bounds(q, IncrementSampling { seed: q as u64, ..Default::default() });
        let items = &rep.details["items"];
        for name in ["lower", "middle", "small_jump_taylor"] {
            others_pass &= items[name]["passed"].as_bool().unwrap_or(false);
        }
        let lb = items["log_bound"]["passed"].as_bool().unwrap_or(false);
        log_bound_pass &= lb;
        if !lb && q == 1 {
            if let Some(w) = items["log_bound"]["witness"].as_object() {
                lines.push(format!("log_bound witness {}: increment {} > {}", w["note"], w["lhs"], w["rhs"]));
            }
        }
        let dist = distance_increment_bounds(q, &CutProfile::default(), IncrementSampling { seed: 10 + q as u64, ..Default::default() });
        others_pass &= dist.passed;
        lines.push(format!("q = {q}: distance battery {} samples, max violation {:.3e}", dist.samples, dist.max_violation));
    }
    // independent check that the log bound is false: x - z = 1, jump 0.1
    let inc = (0.5f64 * 1.1 * 1.1).ln_1p() - 0.5f64.ln_1p();
    let bound = 0.01f64.ln_1p();
    lines.push(format!("oracle: V(1.1) - V(1) = {inc:.5} > log(1.01) = {bound:.5}"));
    let passed = others_pass && log_bound_pass;
    let known_defect = others_pass && !log_bound_pass && inc > bound;
    if known_defect {
        lines.push("the log(1 + |z|²) bound is false for small jumps; lower, middle, small-jump and distance bounds hold".into());
    }
    Ok(Verdict { passed, detail: lines.join("; "), known_defect })
}

fn convolution_battery() -> Outcome {
    let u = ScalarField::quadratic(&[0.0], -1.0);
    let v = ScalarField::quadratic(&[0.0], 1.0);
    let dom = SampleCloud::grid(&[-3.0], &[3.0], &[6001]).map_err(|e| e.to_string())?;
    let probe = SampleCloud::grid(&[-1.0], &[1.0], &[41]).map_err(|e| e.to_string())?;
    let alphas = [1.0, 2.0, 4.0, 8.0];
    let (mut value_err, mut deriv_err) = (0.0f64, 0.0f64);
    for &a in &alphas {
        let p = sup_convolve(&u, a, &dom).map_err(|e| e.to_string())?;
        for y in probe.points() {
            let y0 = y[0];
            let e = p.eval(y).map_err(|e| e.to_string())?;
            value_err = value_err.max((e.value - (-a / (2.0 * (a + 1.0)) * y0 * y0)).abs());
            let h = 1e-4;
            let fd = (p.value(&[y0 + h]).map_err(|e| e.to_string())? - p.value(&[y0 - h]).map_err(|e| e.to_string())?) / (2.0 * h);
            deriv_err = deriv_err.max((fd - a * (e.argopt[0] - y0)).abs());
        }
    }
    let laws = check_convolution_laws(&u, &v, &alphas, &dom, &probe).map_err(|e| e.to_string())?;
    let passed = value_err <= 1e-6 && deriv_err <= 1e-4 && laws.passed;
    Ok(Verdict::of(
        passed,
        format!("closed-form error {value_err:.2e}, derivative identity error {deriv_err:.2e}, laws (a)-(e) passed = {}", laws.passed),
    ))
}

/// Concave quadratic in `(x, y)` plus a bounded wiggle, with its semi-convexity constant.
fn random_functional(rng: &mut ChaCha8Rng) -> (ScalarField, f64, bool) {
    let (a, b, c) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..2.0));
    let (cx, cy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let (s, w, ph) = (rng.gen_range(0.0..0.05), rng.gen_range(1.0..4.0), rng.gen_range(0.0..6.3));
    let kink = rng.gen_bool(0.3);
    let kx = cx + rng.gen_range(-0.2..0.2);
    let hess = DMatrix::from_row_slice(2, 2, &[2.0 * (a + c), -2.0 * c, -2.0 * c, 2.0 * (b + c)]);
    let kappa = hess.symmetric_eigenvalues().max() + s * w * w + 1.0;
    let phi = ScalarField::new(2, "phi", move |z: &[f64]| {
        let (x, y) = (z[0], z[1]);
        let mut f = -a * (x - cx).powi(2) - b * (y - cy).powi(2) - c * (x - y).powi(2) + s * (w * x + ph).sin();
        if kink {
            f += 0.1 * (x - kx).abs();
        }
        f
    });
    (phi, kappa, kink)
}

/// Grid scan followed by coordinate refinement.
fn argmax(phi: &ScalarField) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=300 {
        for j in 0..=300 {
            let (x, y) = (-1.5 + i as f64 * 0.01, -1.5 + j as f64 * 0.01);
            let v = phi.value(&[x, y]).unwrap();
            if v > best.0 {
                best = (v, x, y);
            }
        }
    }
    let mut step = 0.01;
    while step > 1e-12 {
        let mut moved = false;
        for (dx, dy) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let v = phi.value(&[best.1 + dx, best.2 + dy]).unwrap();
            if v > best.0 {
                best = (v, best.1 + dx, best.2 + dy);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (best.1, best.2)
}

fn jensen_sandwich() -> Outcome {
    let fam = PenaltyFamily::quadratic(1, 3.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut accepted, mut ok, mut kinked) = (0, 0, 0);
    let mut notes = vec![];
    for k in 0..20 {
        let (phi, kappa, kink) = random_functional(&mut rng);
        kinked += usize::from(kink);
        let (x0, y0) = argmax(&phi);
        let cfg = JensenConfig::new(0.05, 0.05, 0.05, kappa);
        match jensen_perturb(&phi, (&[x0], &[y0]), &fam, &cfg) {
            Ok(out) => {
                accepted += 1;
                let rep = check_jensen_sandwich(&out, &cfg, 0.0);
                if rep.passed {
                    ok += 1;
                } else {
                    notes.push(format!("#{k}: {:?}", rep.witness.map(|w| w.note)));
                }
            }
            Err(e) => notes.push(format!("#{k}: {e}")),
        }
    }
    let passed = accepted == 20 && ok == 20;
    Ok(Verdict::of(passed, format!("{ok}/{accepted} accepted outputs satisfy the sandwich ({kinked} with kinks) {}", notes.join("; "))))
}

fn doubling_trace() -> Outcome {
    let ld = cli::load_document(&documents().join("drift-walk-1d.json")).map_err(|e| e.to_string())?;
    let b = cli::build(&ld.doc).map_err(|e| e.to_string())?;
    let prob = cli::doubling_problem(&ld.doc, &b).map_err(|e| e.to_string())?;
    let d = ld.doc.doubling.as_ref().ok_or("document has no doubling section")?;
    let cfg = cli::trace_config(d, &Overrides::default());
    let schedule: Vec<f64> = (1..=12).map(|k| 2f64.powi(k)).collect();
    if cfg.schedule != schedule || prob.eps != 0.1 || prob.phi != 0.01 {
        return Err("document does not carry the expected schedule, ε or φ".into());
    }
    let t = run_trace(&prob, &cfg).map_err(|e| e.to_string())?;
    let last = t.rows.last().ok_or("empty trace")?;
    let xi_ok = t.invariant("xi0_sandwich").is_some_and(|r| r.passed) && t.rows.iter().all(|r| r.xi0_sandwich >= -1e-9 && r.xi0_sandwich <= r.xi0_upper + 1e-9);
    let gap = last.gap.ok_or("final row has no Hamiltonian gap")?;
    let bound = prob.eps * (t.gap_bound.c0 + t.gap_bound.c_phi);
    let passed = last.alpha_d2 < 1e-2 && xi_ok && gap <= bound && (t.gap_bound.bound - bound).abs() <= 1e-12 && t.passed();
    Ok(Verdict::of(
        passed,
        format!(
            "final α d² = {:.3e}, Ξ⁰ sandwich at all rows = {xi_ok}, final gap {gap:.4} <= ε(C⁰ + C_φ) = {bound:.4}, all invariants = {}",
            last.alpha_d2,
            t.passed()
        ),
    ))
}

fn states(n: usize) -> Vec<Point> {
    (0..n).map(|i| Point::new(vec![i as f64]).unwrap()).collect()
}

fn exact_resolvent() -> Outcome {
    let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
    let p = FiniteProblem::single(states(2), l, 1.0, DVector::from_vec(vec![0.0, 1.0])).map_err(|e| e.to_string())?;
    let s = solve_linear(&p).map_err(|e| e.to_string())?;
    // (I - L) f = h  ⇒  f₁ = 2f₀, 3f₀ = 1
    let e2 = (s.f[0] - 1.0 / 3.0).abs().max((s.f[1] - 2.0 / 3.0).abs());
    let c = FiniteProblem::single(states(50), cycle_walk(50, 1.0), 2.0, DVector::from_element(50, 3.5)).map_err(|e| e.to_string())?;
    let sc = solve_bellman_isaacs(&c).map_err(|e| e.to_string())?;
    let e50 = sc.f.iter().map(|v| (v - 3.5).abs()).fold(0.0, f64::max);
    Ok(Verdict::of(e2 <= 1e-12 && e50 <= 1e-12, format!("two-state error {e2:.2e}, 50-cycle error {e50:.2e}")))
}

fn solve_walk50() -> Result<serde_json::Value, String> {
    let ld = cli::load_document(&documents().join("walk50.json")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = cli::cmd_solve(&ld, &Overrides::default(), dir.path()).map_err(|e| e.to_string())?;
    Ok(out.report.to_json())
}

fn check_named<'a>(v: &'a serde_json::Value, name: &str) -> Option<&'a serde_json::Value> {
    v["checks"].as_array()?.iter().find(|c| c["name"] == name)
}

fn contraction() -> Outcome {
    let v = solve_walk50()?;
    let states = v["extra"]["states"].as_u64().unwrap_or(0);
    let c = check_named(&v, "contraction").ok_or("no contraction check")?;
    let pairs = c["details"]["pairs_passed"].as_u64().unwrap_or(0);
    let passed = states == 50 && pairs == 100 && c["passed"] == true;
    Ok(Verdict::of(passed, format!("{pairs}/100 pairs on {states} states, max violation {}", c["max_violation"])))
}

fn strict_estimate() -> Outcome {
    let v = solve_walk50()?;
    let mut lines = vec![];
    let mut passed = true;
    for e in ["0.1", "0.5", "0.9"] {
        let c = check_named(&v, &format!("strict_estimate:eps={e}")).ok_or(format!("no strict estimate for ε = {e}"))?;
        passed &= c["passed"] == true;
        lines.push(format!("ε = {e}: passed = {}", c["passed"]));
    }
    // ‖u‖ = ‖v‖ = 1, ε = ½, K = {0}: level 4, and log(1 + r²/2) = 4
    let hat = |a: f64| PiecewiseLinear1d::new(vec![-1.0, 1.0], vec![a, -a]).unwrap();
    let prob = DoublingProblem::new(
        ScalarField::piecewise_linear("u", hat(1.0)),
        ScalarField::piecewise_linear("v", hat(-1.0)),
        Containment::default_log(1),
        PenaltyFamily::quadratic(1, 3.0).map_err(|e| e.to_string())?,
        0.5,
        1.0,
        OperatorSpec::Zero { dim: 1 },
        None,
        1.0,
        ScalarField::constant(1, 0.0),
        ScalarField::constant(1, 0.0),
        SampleCloud::explicit(vec![vec![0.0]]).map_err(|e| e.to_string())?,
        SampleCloud::grid(&[-4.0], &[4.0], &[81]).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let sb = strict_bound(&prob).map_err(|e| e.to_string())?;
    let oracle = (2.0 * (4.0f64.exp() - 1.0)).sqrt();
    let r = sb.khat_radius.ok_or("no closed-form K̂ radius")?;
    passed &= (r - oracle).abs() <= 1e-9 && (r - 10.354).abs() <= 1e-3;
    lines.push(format!("K̂ radius {r:.6} (oracle {oracle:.6})"));
    Ok(Verdict::of(passed, lines.join(", ")))
}

fn isaacs_consistency() -> Outcome {
    // separable: L_ab = A_a + B_b, cost c_a + d_b
    let a = [
        DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, -1.0]),
        DMatrix::from_row_slice(3, 3, &[-2.0, 0.0, 2.0, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0]),
    ];
    let b = [
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 3.0, -3.0]),
        DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 2.0, 0.0, -2.0]),
    ];
    let ca = [DVector::from_vec(vec![0.3, -0.2, 0.1]), DVector::from_vec(vec![0.0, 0.4, -0.5])];
    let cb = [DVector::from_vec(vec![-0.1, 0.2, 0.0]), DVector::from_vec(vec![0.5, -0.3, 0.2])];
    let gens = (0..2).map(|i| (0..2).map(|j| &a[i] + &b[j]).collect()).collect();
    let cost = (0..2).map(|i| (0..2).map(|j| &ca[i] + &cb[j]).collect()).collect();
    let p = FiniteProblem::new(states(3), gens, cost, 0.7, DVector::from_vec(vec![1.0, -1.0, 0.5])).map_err(|e| e.to_string())?;
    let s = solve_bellman_isaacs(&p).map_err(|e| e.to_string())?;
    let order = s.order_gap.ok_or("no order gap reported")?;

    let z = OperatorSpec::Zero { dim: 1 };
    let comps = vec![vec![z.clone(), z.clone()], vec![z.clone(), z]];
    let pennies = CostFunctional::new(|_, i, j| if i == j { -1.0 } else { 0.0 });
    let node = IsaacsNode::new(vec![0.0, 1.0], vec![0.0, 1.0], comps, pennies).map_err(|e| e.to_string())?;
    let op = OperatorSpec::Isaacs(Box::new(node));
    let cloud = SampleCloud::grid(&[-1.0], &[1.0], &[5]).map_err(|e| e.to_string())?;
    let rep = check_isaacs(&op, &ScalarField::constant(1, 0.0), &cloud, 1e-12).map_err(|e| e.to_string())?;
    let passed = order <= 1e-12 && s.isaacs_gap <= 1e-12 && !rep.passed && rep.max_violation == 1.0;
    Ok(Verdict::of(passed, format!("separable order gap {order:.2e}, non-saddle gap {}", rep.max_violation)))
}

fn report_bytes(v: serde_json::Value) -> Result<String, String> {
    let mut v = v;
    cli::strip_timing(&mut v);
    serde_json::to_string_pretty(&v).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let mut lines = vec![];
    let mut passed = true;
    for name in ["brownian.json", "broken-coupling.json"] {
        let ld = cli::load_document(&documents().join(name)).map_err(|e| e.to_string())?;
        let a = report_bytes(cli::cmd_check(&ld, &Overrides::default()).map_err(|e| e.to_string())?.report.to_json())?;
        let b = report_bytes(cli::cmd_check(&ld, &Overrides::default()).map_err(|e| e.to_string())?.report.to_json())?;
        passed &= a == b;
        lines.push(format!("check {name}: identical = {}", a == b));
    }
    for name in ["drift-walk-1d.json", "symmetric.json"] {
        let ld = cli::load_document(&documents().join(name)).map_err(|e| e.to_string())?;
        let mut runs = vec![];
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let r = report_bytes(cli::cmd_trace(&ld, &Overrides::default(), dir.path()).map_err(|e| e.to_string())?.report.to_json())?;
            let csv = std::fs::read(dir.path().join("trace.csv")).map_err(|e| e.to_string())?;
            runs.push((r, csv));
        }
        let same = runs[0] == runs[1];
        passed &= same;
        lines.push(format!("trace {name}: identical = {same}"));
    }
    Ok(Verdict::of(passed, lines.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, f64, fn() -> Outcome); 11] = [
        ("AC1", "synchronous coupling null estimate", 1.0, synchronous_null),
        ("AC2", "product coupling positive estimate", 1.0, product_positive),
        ("AC3", "Lyapunov and distance increment batteries", 5.0, increment_batteries),
        ("AC4", "convolution laws on -x²/2", 10.0, convolution_battery),
        ("AC5", "Jensen sandwich on random semi-convex functionals", 30.0, jensen_sandwich),
        ("AC6", "doubling trace on drift-walk-1d", 120.0, doubling_trace),
        ("AC7", "exact resolvent oracles", 1.0, exact_resolvent),
        ("AC8", "resolvent contraction on walk50", 5.0, contraction),
        ("AC9", "strict comparison estimate", 10.0, strict_estimate),
        ("AC10", "Isaacs consistency", 1.0, isaacs_consistency),
        ("AC11", "determinism of check and trace reports", 180.0, determinism),
    ];
    let mut fatal = 0;
    for (id, title, limit, f) in criteria {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (passed, detail, defect) = match out {
            Ok(v) => (v.passed && secs < limit, v.detail, v.known_defect),
            Err(e) => (false, format!("error: {e}"), false),
        };
        let verdict = if passed { "PASS" } else { "FAIL" };
        let tag = if !passed && defect { " [inequality false as stated]" } else { "" };
        println!("{verdict} {id} {title}{tag}: {detail} ({secs:.2} s, limit {limit} s)");
        if !passed && !(defect && secs < limit) {
            fatal += 1;
        }
    }
    if fatal > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
