use mfgc_lab::measures::EmpiricalMeasure;
use mfgc_lab::models::{Family, LlParams, ModelSpec, Poly, Terminal};
use mfgc_lab::propagation::{simulate_variational, PropagationConfig, PropagationTrace};
use mfgc_lab::solver::{Grid, PicardConfig, Problem};

fn cloud() -> EmpiricalMeasure {
    EmpiricalMeasure::from_points(&[-0.8, -0.5, -0.1, 0.0, 0.2, 0.4, 0.7, 1.0]).unwrap()
}

/// dX(t) = eta (1 + T - t) / (1 + T) for H = -p^2/2, G = x^2/2.
fn lq_oracle(t: f64, t_end: f64) -> f64 {
    (1.0 + t_end - t) / (1.0 + t_end)
}

#[test]
fn lq_matches_ode_oracle() {
    let grid = Grid::with_cfl(-5.0, 5.0, 101, 0.0, 1.0, 0.0);
    let p = Problem::new(ModelSpec::free(Terminal::quadratic(1.0)), grid, PicardConfig::default(), 5).unwrap();
    let mu = cloud();
    let flow = p.solve(&mu).unwrap();
    let eta: Vec<f64> = (0..mu.len()).map(|i| 1.0 - 0.2 * i as f64).collect();
    let cfg = PropagationConfig::default();
    let states = simulate_variational(&p, &flow, &eta, cfg.stride, cfg.fd_eps, 0.0).unwrap();
    let mut err = 0.0f64;
    for s in &states {
        for (d, e) in s.dx.iter().zip(&eta) {
            err = err.max((d - e * lq_oracle(s.t, 1.0)).abs());
        }
        assert!(s.upsilon.iter().all(|u| u.abs() < 1e-6));
    }
    let unit = grid.dt() * cfg.stride as f64 + grid.dx() * grid.dx() + cfg.fd_eps * cfg.fd_eps;
    println!("lq variational error {err:e}, ratio to step units {}", err / unit);
    assert!(err <= unit);
}

fn ll_problem(c2: f64) -> Problem {
    let model = ModelSpec::from_family(
        Family::Ll(LlParams { c1: 0.5, c2, c3: 0.1, b1_m2: Poly::new(&[0.0, 0.75]), ..Default::default() }),
        Terminal { k_xm: 0.5, ..Terminal::default() },
    )
    .unwrap();
    Problem::new(model, Grid::with_cfl(-4.0, 4.0, 81, 0.0, 0.5, 0.0), PicardConfig::default(), 2).unwrap()
}

#[test]
fn variation_matches_perturbed_flow() {
    let p = ll_problem(0.05);
    let mu = cloud();
    let flow = p.solve(&mu).unwrap();
    let eta: Vec<f64> = (0..mu.len()).map(|i| if i % 2 == 0 { 1.0 } else { 0.3 }).collect();
    let states = simulate_variational(&p, &flow, &eta, 1, 1e-3, 0.0).unwrap();
    let h = 1e-3;
    let fp = p.solve(&mu.displaced(&eta, h).unwrap()).unwrap();
    let fm = p.solve(&mu.displaced(&eta, -h).unwrap()).unwrap();
    let mut err = 0.0f64;
    let mut size = 0.0f64;
    for s in &states {
        for i in 0..mu.len() {
            let fd = (fp.states[s.level][i] - fm.states[s.level][i]) / (2.0 * h);
            err = err.max((fd - s.dx[i]).abs());
            size = size.max(fd.abs());
        }
    }
    println!("variational vs perturbed flow {err:e} (size {size})");
    assert!(err <= 1e-3 * size);
}

#[test]
fn doubling_direction_doubles_path() {
    let p = ll_problem(0.05);
    let mu = cloud();
    let flow = p.solve(&mu).unwrap();
    let eta: Vec<f64> = (0..mu.len()).map(|i| 0.5 - 0.1 * i as f64).collect();
    let two: Vec<f64> = eta.iter().map(|e| 2.0 * e).collect();
    let a = simulate_variational(&p, &flow, &eta, 8, 1e-3, 0.0).unwrap();
    let b = simulate_variational(&p, &flow, &two, 8, 1e-3, 0.0).unwrap();
    for (sa, sb) in a.iter().zip(&b) {
        for (x, y) in sa.dx.iter().zip(&sb.dx) {
            assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }
    let ta = PropagationTrace::from_states("a", &a, None);
    println!("I {:?}\nslope {:?}\nrhs {:?}", ta.i, ta.slope_i, ta.rhs.iter().map(|r| r.dti).collect::<Vec<_>>());
    println!("mismatch {}", ta.formula_mismatch_i());
}
