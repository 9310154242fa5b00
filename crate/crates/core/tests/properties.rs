use std::sync::Arc;

use proptest::prelude::*;

use mfgc_lab::calculus::value_measure_gradient;
use mfgc_lab::conditions::{check_ll_condition, generate_samples, theta1, QuadraticFormSample};
use mfgc_lab::measures::{
    first_marginal, flow_distance, mixture, moment, EmpiricalMeasure, JointEmpiricalMeasure, MeasureError,
};
use mfgc_lab::models::{Family, LlParams, MeanField1dParams, ModelSpec, Poly, SeparableParams, ShiftParams, Terminal};
use mfgc_lab::monotonicity::{mon_components, FnAccess, LambdaVec, TerminalAccess};
use mfgc_lab::propagation::simulate_variational;
use mfgc_lab::solver::{Grid, PicardConfig, Problem};

fn cloud(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn ll_model() -> ModelSpec {
    ModelSpec::from_family(
        Family::Ll(LlParams { c1: 0.5, c2: 0.05, c3: 0.1, b1_m2: Poly::new(&[0.0, 0.75]), ..Default::default() }),
        Terminal { k_xm: 0.5, ..Terminal::default() },
    )
    .unwrap()
}

fn closed_form_models() -> Vec<ModelSpec> {
    let t = Terminal::default();
    vec![
        ModelSpec::from_family(Family::Separable(SeparableParams { r: 2.0, kb1: 0.2, kf1: 0.4, ..Default::default() }), t.clone())
            .unwrap(),
        ModelSpec::from_family(
            Family::MeanField1d(MeanField1dParams { f0: [0.2, 0.1, 0.3, -0.5], kb1: 0.1, ..Default::default() }),
            t.clone(),
        )
        .unwrap(),
        ll_model(),
        ModelSpec::from_family(
            Family::Disp(ShiftParams { c: 0.5, b1_m2: Poly::new(&[0.0, 0.6]), f1: Poly::new(&[0.0, 0.0, 0.5]), ..Default::default() }),
            t,
        )
        .unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_distance_is_a_metric(a in cloud(6), b in cloud(6), c in cloud(6)) {
        let (a, b, c) = (
            EmpiricalMeasure::from_points(&a).unwrap(),
            EmpiricalMeasure::from_points(&b).unwrap(),
            EmpiricalMeasure::from_points(&c).unwrap(),
        );
        let d = |x: &EmpiricalMeasure, y: &EmpiricalMeasure| flow_distance(x, y).unwrap();
        prop_assert!(d(&a, &a) == 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn flow_distance_ignores_order(a in cloud(7), shift in -2.0f64..2.0) {
        let m = EmpiricalMeasure::from_points(&a).unwrap();
        let mut rev = a.clone();
        rev.reverse();
        let r = EmpiricalMeasure::from_points(&rev).unwrap();
        prop_assert!(flow_distance(&m, &r).unwrap() <= 1e-15);
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let d = flow_distance(&m, &EmpiricalMeasure::from_points(&moved).unwrap()).unwrap();
        prop_assert!((d - shift.abs()).abs() <= 1e-12);
    }

    #[test]
    fn moments_are_linear_under_mixing(a in cloud(5), b in cloud(4), w in 0.0f64..1.0, k in 1u32..3) {
        let (ma, mb) = (EmpiricalMeasure::from_points(&a).unwrap(), EmpiricalMeasure::from_points(&b).unwrap());
        let mix = mixture(&ma, &mb, w).unwrap();
        let lhs = moment(&mix, k, 0).unwrap();
        let rhs = (1.0 - w) * moment(&ma, k, 0).unwrap() + w * moment(&mb, k, 0).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn first_marginal_keeps_states(xs in cloud(6), ps in cloud(6)) {
        let rho = JointEmpiricalMeasure::from_pairs(&xs, &ps).unwrap();
        let m = first_marginal(&rho);
        prop_assert_eq!(m.points(), &xs[..]);
        prop_assert!((m.mean(0) - rho.state_mean(0)).abs() <= 1e-14);
        prop_assert!((rho.second_marginal().mean(0) - rho.second_mean(0)).abs() <= 1e-14);
    }

    #[test]
    fn theta_decreases_in_l3(l0 in 0.1f64..3.0, l2 in 0.1f64..3.0, l3 in 0.5f64..20.0, step in 0.01f64..5.0,
                             lo in 0.2f64..1.0, spread in 1.0f64..4.0, lu in 0.1f64..2.0) {
        let a = LambdaVec::new(l0, 0.0, l2, l3).unwrap();
        let b = LambdaVec::new(l0, 0.0, l2, l3 + step).unwrap();
        prop_assert!(theta1(&b, lo, lo * spread, lu) < theta1(&a, lo, lo * spread, lu));
    }

    #[test]
    fn mon_disp_increases_in_lambda(xs in cloud(6), eta in cloud(6), l1 in -2.0f64..2.0, dl in 0.0f64..2.0) {
        let mu = EmpiricalMeasure::from_points(&xs).unwrap();
        let access = TerminalAccess(Terminal { poly: Poly::new(&[0.0, 0.0, 0.5]), k_xm: 0.3, ..Terminal::default() });
        let c = mon_components(&access, 0.0, &mu, &eta, 1e-3).unwrap();
        prop_assert!(c.disp(l1 + dl) >= c.disp(l1) - 1e-12);
    }

    #[test]
    fn measure_gradient_is_linear(xs in cloud(5), e1 in cloud(5), e2 in cloud(5), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mu = EmpiricalMeasure::from_points(&xs).unwrap();
        let at = xs.clone();
        let solve = |m: &EmpiricalMeasure| -> Result<Vec<f64>, MeasureError> {
            let (m1, m2) = (m.mean(0), moment(m, 2, 0)?);
            Ok(at.iter().map(|x| x * m1 + 0.5 * m2 - 0.25 * m1 * m1).collect())
        };
        let g = |eta: &[f64]| value_measure_gradient(solve, &mu, eta, 1e-4).unwrap();
        let combo: Vec<f64> = e1.iter().zip(&e2).map(|(p, q)| a * p + b * q).collect();
        let (g1, g2, gc) = (g(&e1), g(&e2), g(&combo));
        for i in 0..xs.len() {
            prop_assert!((gc[i] - a * g1[i] - b * g2[i]).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_point_residual_is_small(seed in 0u64..10_000) {
        for m in closed_form_models() {
            for s in generate_samples(6, 3, seed) {
                let rho = s.rho().unwrap();
                let nu = m.fixed_point_phi(&rho).unwrap();
                prop_assert!(m.fixed_point_residual(&rho, &nu).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_matches_finite_differences(seed in 0u64..10_000, x in -1.5f64..1.5, p in -1.5f64..1.5) {
        for m in closed_form_models() {
            let s = &generate_samples(6, 1, seed)[0];
            let rho = s.rho().unwrap();
            let exact = m.hat_derivatives(x, p, &rho, 2).unwrap();
            let fd = m.hat_derivatives_fd(x, p, &rho, 2).unwrap();
            prop_assert!(exact.max_abs_diff(&fd) <= 1e-4, "{}: {:?} vs {:?}", m.label(), exact, fd);
        }
    }

    #[test]
    fn ll_check_is_relabeling_invariant(seed in 0u64..10_000, rot in 1usize..6) {
        let m = ll_model();
        let samples = generate_samples(6, 2, seed);
        let perm = |v: &Vec<f64>| -> Vec<f64> { (0..v.len()).map(|i| v[(i + rot) % v.len()]).collect() };
        let permuted: Vec<QuadraticFormSample> = samples
            .iter()
            .map(|s| QuadraticFormSample {
                xi: perm(&s.xi),
                eta: perm(&s.eta),
                gamma: perm(&s.gamma),
                zeta: perm(&s.zeta),
                phi: s.phi.clone(),
            })
            .collect();
        let a = check_ll_condition(&m, &samples);
        let b = check_ll_condition(&m, &permuted);
        prop_assert_eq!(a.verdict, b.verdict);
        prop_assert!((a.worst_margin - b.worst_margin).abs() <= 1e-6 * (1.0 + a.worst_margin.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn doubling_direction_doubles_variation(eta in cloud(6)) {
        let grid = Grid::with_cfl(-4.0, 4.0, 41, 0.0, 0.25, 0.0);
        let p = Problem::new(ll_model(), grid, PicardConfig::default(), 2).unwrap();
        let mu = EmpiricalMeasure::from_points(&[-0.8, -0.3, 0.0, 0.2, 0.6, 1.0]).unwrap();
        let flow = p.solve(&mu).unwrap();
        let two: Vec<f64> = eta.iter().map(|e| 2.0 * e).collect();
        let a = simulate_variational(&p, &flow, &eta, 4, 1e-3, 0.0).unwrap();
        let b = simulate_variational(&p, &flow, &two, 4, 1e-3, 0.0).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (x, y) in sa.dx.iter().zip(&sb.dx) {
                prop_assert!((2.0 * x - y).abs() <= 1e-8 * (1.0 + y.abs()));
            }
            prop_assert!((4.0 * sa.i() - sb.i()).abs() <= 1e-8 * (1.0 + sb.i().abs()));
        }
    }
}

#[test]
fn fn_access_recovers_quadratic_mon_ll() {
    // V = x E[x]: MON_LL of direction eta is (E[eta])^2.
    let access = FnAccess(Arc::new(|_, x, mu: &EmpiricalMeasure| x * mu.mean(0)));
    let mu = EmpiricalMeasure::from_points(&[-1.0, 0.0, 0.5, 2.0]).unwrap();
    let eta = [1.0, -0.5, 0.25, 0.75];
    let c = mon_components(&access, 0.0, &mu, &eta, 1e-3).unwrap();
    let m = eta.iter().sum::<f64>() / 4.0;
    assert!((c.ll() - m * m).abs() < 1e-6);
}
