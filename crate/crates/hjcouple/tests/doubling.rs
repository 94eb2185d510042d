use hjcouple::convolve::sup_convolve;
use hjcouple::doubling::{assemble_lambda, check_jensen_sandwich, jensen_perturb, maximize_lambda, run_trace, strict_bound, DoublingProblem, JensenConfig, SearchConfig, TraceConfig};
use hjcouple::funcspace::{PiecewiseLinear1d, SampleCloud, ScalarField, Smoothness};
use hjcouple::operators::OperatorSpec;
use hjcouple::penalty::{Containment, PenaltyFamily};
use proptest::prelude::*;

fn problem(u: ScalarField, v: ScalarField, eps: f64) -> DoublingProblem {
    DoublingProblem::new(
        u,
        v,
        Containment::default_log(1),
        PenaltyFamily::quadratic(1, 3.0).unwrap(),
        eps,
        0.5,
        OperatorSpec::Zero { dim: 1 },
        None,
        1.0,
        ScalarField::constant(1, 0.0),
        ScalarField::constant(1, 0.0),
        SampleCloud::explicit(vec![vec![0.0]]).unwrap(),
        SampleCloud::grid(&[-4.0], &[4.0], &[81]).unwrap(),
    )
    .unwrap()
}

fn bumps() -> (ScalarField, ScalarField) {
    // smoothness must be declared for the convolutions to refine off the grid
    let u = ScalarField::new(1, "u", |x: &[f64]| (-(x[0] - 0.5).powi(2)).exp()).with_smoothness(Smoothness::CInf);
    let v = ScalarField::new(1, "v", |x: &[f64]| 0.5 * (-(x[0] + 0.5).powi(2)).exp()).with_smoothness(Smoothness::CInf);
    (u, v)
}

#[test]
fn lambda_maximizer_beats_brute_force() {
    let (u, v) = bumps();
    let p = problem(u, v, 0.2);
    for alpha in [2.0, 16.0] {
        let lam = assemble_lambda(&p, alpha).unwrap();
        let mx = maximize_lambda(&p, &lam, &SearchConfig::default()).unwrap();
        let mut brute = f64::NEG_INFINITY;
        for i in 0..=160 {
            for j in 0..=160 {
                let (y, yp) = (-2.0 + i as f64 * 0.025, -2.0 + j as f64 * 0.025);
                brute = brute.max(lam.value(&[y], &[yp]).unwrap());
            }
        }
        assert!(mx.value >= brute - 1e-12, "α = {alpha}: {} < {brute}", mx.value);
        assert!((lam.value(&mx.y, &mx.yp).unwrap() - mx.value).abs() < 1e-12);
    }
}

#[test]
fn optimizers_coalesce_along_the_schedule() {
    let (u, v) = bumps();
    let p = problem(u, v, 0.2);
    let cfg = TraceConfig { schedule: vec![2.0, 8.0, 32.0, 128.0, 512.0], ..Default::default() };
    let t = run_trace(&p, &cfg).unwrap();
    assert!(t.passed(), "{:?}", t.first_violation());
    let d: Vec<f64> = t.rows.iter().map(|r| (r.y0[0] - r.y0p[0]).abs()).collect();
    assert!(d.last().unwrap() < &1e-2, "{d:?}");
    for w in t.rows.windows(2) {
        assert!(w[1].sup_lambda <= w[0].sup_lambda + 1e-12);
    }
}

fn concave_functional(a: f64, b: f64, c: f64, cx: f64, cy: f64) -> ScalarField {
    ScalarField::new(2, "phi", move |z: &[f64]| -a * (z[0] - cx).powi(2) - b * (z[1] - cy).powi(2) - c * (z[0] - z[1]).powi(2))
}

/// Maximizer of the concave quadratic from its normal equations.
fn quadratic_argmax(a: f64, b: f64, c: f64, cx: f64, cy: f64) -> (f64, f64) {
    let (m11, m12, m22) = (a + c, -c, b + c);
    let det = m11 * m22 - m12 * m12;
    ((a * cx * m22 - m12 * b * cy) / det, (m11 * b * cy - m12 * a * cx) / det)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn khat_radius_shrinks_with_eps(a in 0.0f64..2.0, b in 0.0f64..2.0, e1 in 0.05f64..0.5, de in 0.01f64..0.45) {
        let e2 = e1 + de;
        let r = |e: f64| strict_bound(&problem(ScalarField::constant(1, a), ScalarField::constant(1, b), e)).unwrap();
        let (s1, s2) = (r(e1), r(e2));
        let oracle = |e: f64| (2.0 * (((a + b) / e).exp() - 1.0)).sqrt();
        prop_assert!((s1.khat_radius.unwrap() - oracle(e1)).abs() <= 1e-9 * (1.0 + oracle(e1)));
        prop_assert!(s1.khat_radius.unwrap() >= s2.khat_radius.unwrap());
        prop_assert!(s1.level >= s2.level);
    }

    #[test]
    fn jensen_keeps_the_maximizer_of_smooth_concave_functionals(
        a in 0.5f64..2.0, b in 0.5f64..2.0, c in 0.0f64..2.0, cx in -0.5f64..0.5, cy in -0.5f64..0.5,
    ) {
        let phi = concave_functional(a, b, c, cx, cy);
        let (x0, y0) = quadratic_argmax(a, b, c, cx, cy);
        let fam = PenaltyFamily::quadratic(1, 3.0).unwrap();
        let kappa = 2.0 * (a + b + 2.0 * c) + 1.0;
        let cfg = JensenConfig::new(0.05, 0.05, 0.05, kappa);
        let out = jensen_perturb(&phi, (&[x0], &[y0]), &fam, &cfg).unwrap();
        prop_assert!(check_jensen_sandwich(&out, &cfg, 0.0).passed);
        prop_assert!((out.x1[0] - x0).abs() < 1e-6 && (out.y1[0] - y0).abs() < 1e-6);
    }

    #[test]
    fn sup_convolution_sits_between_u_and_its_sup(
        vals in proptest::collection::vec(-1.0f64..1.0, 5),
        alpha in 0.5f64..20.0,
        y in -2.0f64..2.0,
    ) {
        let nodes = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let u = ScalarField::piecewise_linear("u", PiecewiseLinear1d::new(nodes, vals).unwrap());
        let dom = SampleCloud::grid(&[-3.0], &[3.0], &[61]).unwrap();
        let p = sup_convolve(&u, alpha, &dom).unwrap();
        let e = p.eval(&[y]).unwrap();
        prop_assert!(e.value >= u.value(&[y]).unwrap() - 1e-12);
        prop_assert!(e.value <= top + 1e-12);
        let direct = u.value(&e.argopt).unwrap() - 0.5 * alpha * (e.argopt[0] - y).powi(2);
        prop_assert!((direct - e.value).abs() < 1e-12);
    }
}
