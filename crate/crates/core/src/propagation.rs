//! Variational particle system along a computed equilibrium, the time
//! derivative formulas of the monotonicity functionals, and end-to-end
//! propagation experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{
    check_anti_assumption, check_disp_condition, check_ll_condition, generate_samples, AntiParams, DerivativeTable,
};
use crate::measures::EmpiricalMeasure;
use crate::models::ModelError;
use crate::monotonicity::{
    direction_battery, evaluate_battery, mon_components, LambdaVec, MonoError, MonoKind, MonotonicityReport,
    TerminalAccess, TestDirection, ValueAccess,
};
use crate::report::{ConditionReport, Verdict};
use crate::solver::{EquilibriumFlow, Problem, SolverError};

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mono(#[from] MonoError),
    #[error("gate failed: {}", .0.iter().filter(|r| !r.passed()).map(|r| r.id.as_str()).collect::<Vec<_>>().join(", "))]
    Gate(Vec<ConditionReport>),
    #[error("stride must be positive")]
    Stride,
}

/// Per-particle variational quantities at one time level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalState {
    pub level: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub gamma: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub forcing: Vec<f64>,
    pub rhs: RhsRecord,
}

impl VariationalState {
    fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
        v.sum::<f64>() / n as f64
    }

    pub fn i(&self) -> f64 {
        Self::mean(self.upsilon.iter().zip(&self.dx).map(|(a, b)| a * b), self.dx.len())
    }

    pub fn i_bar(&self) -> f64 {
        Self::mean(self.gamma.iter().zip(&self.dx).map(|(a, b)| a * b), self.dx.len())
    }

    pub fn dx2(&self) -> f64 {
        Self::mean(self.dx.iter().map(|a| a * a), self.dx.len())
    }

    pub fn xi(&self, l: &LambdaVec) -> f64 {
        let n = self.dx.len();
        l.l0 * self.i_bar()
            + l.l1 * self.i()
            + Self::mean(
                (0..n).map(|i| {
                    self.gamma[i].powi(2) + l.l2 * self.upsilon[i].powi(2) - l.l3 * self.dx[i].powi(2)
                }),
                n,
            )
    }
}

/// Right-hand sides of the time derivatives of I, I_bar and E|dX|^2, the
/// displacement combination as the sum of the three (`cdi`) and as the
/// literal combined expression (`cdi_literal`), which differ only in the
/// sign of the H_xrho2 term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RhsRecord {
    pub dti: f64,
    pub dti_bar: f64,
    pub d_dx2: f64,
    pub cdi: f64,
    pub cdi_literal: f64,
    pub lambda: f64,
}

/// Empirical double-sum evaluation of the derivative formulas.
pub fn evaluate_rhs_formulas(
    table: &DerivativeTable,
    dx: &[f64],
    gamma: &[f64],
    upsilon: &[f64],
    lambda: f64,
) -> (RhsRecord, Vec<f64>) {
    let n = table.n;
    let nf = n as f64;
    let s: Vec<f64> = gamma.iter().zip(upsilon).map(|(g, u)| g + u).collect();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut lit = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = table.at(i, j);
            a[i] += (d.hp_rho1 * dx[j] + d.hp_rho2 * s[j]) / nf;
            b[i] += (d.hx_rho1 * dx[j] + d.hx_rho2 * s[j]) / nf;
            let dji = table.at(j, i);
            lit += (s[i] * d.hp_rho2 * s[j]
                + s[i] * (d.hp_rho1 + dji.hx_rho2 + 2.0 * lambda * dji.hp_rho2) * dx[j]
                - dx[i] * (d.hx_rho1 - 2.0 * lambda * d.hp_rho1) * dx[j])
                / (nf * nf);
        }
    }
    let mut r = RhsRecord { lambda, ..Default::default() };
    for i in 0..n {
        let d = &table.local[i];
        r.dti += upsilon[i] * d.hpp * upsilon[i] - dx[i] * b[i] - (gamma[i] - upsilon[i]) * a[i];
        r.dti_bar += d.hpp * gamma[i] * gamma[i] + 2.0 * d.hpp * gamma[i] * upsilon[i] + 2.0 * gamma[i] * a[i]
            - d.hxx * dx[i] * dx[i];
        r.d_dx2 += 2.0 * (d.hxp * dx[i] + d.hpp * s[i] + a[i]) * dx[i];
        lit += (s[i] * d.hpp * s[i] + 2.0 * lambda * s[i] * d.hpp * dx[i]
            - (d.hxx - 2.0 * lambda * d.hxp) * dx[i] * dx[i])
            / nf;
    }
    r.dti /= nf;
    r.dti_bar /= nf;
    r.d_dx2 /= nf;
    r.cdi = r.dti + r.dti_bar + lambda * r.d_dx2;
    r.cdi_literal = lit;
    (r, a)
}

/// Levels visited with the given stride, always ending at n_t.
pub fn stride_levels(n_t: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n_t).step_by(stride.max(1)).collect();
    v.push(n_t);
    v
}

fn components_at(
    problem: &Problem,
    flow: &EquilibriumFlow,
    k: usize,
    dx: &[f64],
    fd_eps: f64,
) -> Result<(Vec<f64>, Vec<f64>), PropagationError> {
    let n = dx.len();
    let scale = (dx.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let x = &flow.states[k];
    if scale == 0.0 {
        return Ok((vec![0.0; n], vec![0.0; n]));
    }
    let eta: Vec<f64> = dx.iter().map(|v| v / scale).collect();
    let mu = flow.mu(k);
    let t = flow.grid.t(k);
    let c = if k == flow.grid.n_t {
        mon_components(&TerminalAccess(problem.model.terminal.clone()), t, &mu, &eta, fd_eps)?
    } else {
        mon_components(problem, t, &mu, &eta, fd_eps)?
    };
    debug_assert_eq!(x.len(), n);
    let gamma = c.hess.iter().zip(dx).map(|(h, d)| h * d).collect();
    let upsilon = c.d.iter().map(|d| d * scale).collect();
    Ok((gamma, upsilon))
}

/// Euler steps of the variational system every `stride` solver steps along
/// the particle paths of `flow`, with dX(0) = eta. Gamma and Upsilon are
/// recomputed from re-solves of the value function at each visited level.
pub fn simulate_variational(
    problem: &Problem,
    flow: &EquilibriumFlow,
    eta: &[f64],
    stride: usize,
    fd_eps: f64,
    lambda: f64,
) -> Result<Vec<VariationalState>, PropagationError> {
    if stride == 0 {
        return Err(PropagationError::Stride);
    }
    if eta.len() != flow.n() {
        return Err(MonoError::Direction(eta.len(), flow.n()).into());
    }
    let levels = stride_levels(flow.grid.n_t, stride);
    let mut dx = eta.to_vec();
    let mut out = Vec::with_capacity(levels.len());
    for (m, &k) in levels.iter().enumerate() {
        let rho = flow.rho(k);
        let table = DerivativeTable::build(&problem.model, &rho)?;
        let (gamma, upsilon) = components_at(problem, flow, k, &dx, fd_eps)?;
        let (rhs, forcing) = evaluate_rhs_formulas(&table, &dx, &gamma, &upsilon, lambda);
        let next_dx = levels.get(m + 1).map(|&k2| {
            let tau = flow.grid.t(k2) - flow.grid.t(k);
            (0..dx.len())
                .map(|i| {
                    let d = &table.local[i];
                    dx[i] + tau * (d.hxp * dx[i] + d.hpp * (gamma[i] + upsilon[i]) + forcing[i])
                })
                .collect::<Vec<f64>>()
        });
        out.push(VariationalState {
            level: k,
            t: flow.grid.t(k),
            x: flow.states[k].clone(),
            dx: dx.clone(),
            gamma,
            upsilon,
            forcing,
            rhs,
        });
        if let Some(v) = next_dx {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SolverError::Blowup(k).into());
            }
            dx = v;
        }
    }
    Ok(out)
}

/// Time series of the functionals along one variational path, with central
/// finite-difference slopes (one-sided at the ends).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationTrace {
    pub direction: String,
    pub t: Vec<f64>,
    pub i: Vec<f64>,
    pub i_bar: Vec<f64>,
    pub dx2: Vec<f64>,
    pub xi: Vec<f64>,
    pub rhs: Vec<RhsRecord>,
    pub slope_i: Vec<f64>,
    pub slope_i_bar: Vec<f64>,
    pub slope_dx2: Vec<f64>,
    pub slope_xi: Vec<f64>,
}

fn slopes(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|k| match (k, n) {
            (_, 0 | 1) => 0.0,
            (0, _) => (v[1] - v[0]) / (t[1] - t[0]),
            (k, n) if k == n - 1 => (v[k] - v[k - 1]) / (t[k] - t[k - 1]),
            (k, _) => (v[k + 1] - v[k - 1]) / (t[k + 1] - t[k - 1]),
        })
        .collect()
}

impl PropagationTrace {
    pub fn from_states(direction: &str, states: &[VariationalState], lambda: Option<&LambdaVec>) -> Self {
        let t: Vec<f64> = states.iter().map(|s| s.t).collect();
        let i: Vec<f64> = states.iter().map(|s| s.i()).collect();
        let i_bar: Vec<f64> = states.iter().map(|s| s.i_bar()).collect();
        let dx2: Vec<f64> = states.iter().map(|s| s.dx2()).collect();
        let xi: Vec<f64> = states.iter().map(|s| lambda.map_or(f64::NAN, |l| s.xi(l))).collect();
        PropagationTrace {
            direction: direction.to_string(),
            slope_i: slopes(&t, &i),
            slope_i_bar: slopes(&t, &i_bar),
            slope_dx2: slopes(&t, &dx2),
            slope_xi: slopes(&t, &xi),
            rhs: states.iter().map(|s| s.rhs).collect(),
            t,
            i,
            i_bar,
            dx2,
            xi,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// I + I_bar + lambda E|dX|^2.
    pub fn disp(&self, lambda: f64) -> Vec<f64> {
        (0..self.len()).map(|k| self.i[k] + self.i_bar[k] + lambda * self.dx2[k]).collect()
    }

    /// Worst ratio |slope - rhs| / max(10% |rhs|, 1e-3) over interior
    /// points, for I against its formula; <= 1 means the equality holds.
    pub fn formula_mismatch_i(&self) -> f64 {
        let rhs: Vec<f64> = self.rhs.iter().map(|r| r.dti).collect();
        mismatch(&self.slope_i, &rhs)
    }

    /// As [`formula_mismatch_i`](Self::formula_mismatch_i) for the
    /// displacement combination.
    pub fn formula_mismatch_disp(&self, lambda: f64) -> f64 {
        let rhs: Vec<f64> = self.rhs.iter().map(|r| r.cdi).collect();
        let s = slopes(&self.t, &self.disp(lambda));
        mismatch(&s, &rhs)
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "direction", "t", "I", "I_bar", "E_dX2", "Xi", "slope_I", "slope_I_bar", "slope_E_dX2", "slope_Xi",
        "rhs_dtI", "rhs_dtI_bar", "rhs_d_dX2", "rhs_cdI", "rhs_cdI_literal",
    ];

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        write_traces_csv(std::slice::from_ref(self), w)
    }

    fn write_rows<W: std::io::Write>(&self, wr: &mut csv::Writer<W>) -> Result<(), csv::Error> {
        for k in 0..self.len() {
            let r = &self.rhs[k];
            let mut rec = vec![self.direction.clone()];
            rec.extend(
                [
                    self.t[k],
                    self.i[k],
                    self.i_bar[k],
                    self.dx2[k],
                    self.xi[k],
                    self.slope_i[k],
                    self.slope_i_bar[k],
                    self.slope_dx2[k],
                    self.slope_xi[k],
                    r.dti,
                    r.dti_bar,
                    r.d_dx2,
                    r.cdi,
                    r.cdi_literal,
                ]
                .iter()
                .map(|v| format!("{v:.12e}")),
            );
            wr.write_record(&rec)?;
        }
        Ok(())
    }
}

/// All traces in one table, one header.
pub fn write_traces_csv<W: std::io::Write>(traces: &[PropagationTrace], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(PropagationTrace::CSV_HEADER)?;
    for t in traces {
        t.write_rows(&mut wr)?;
    }
    wr.flush()?;
    Ok(())
}

fn mismatch(slope: &[f64], rhs: &[f64]) -> f64 {
    let n = slope.len();
    (1..n.saturating_sub(1)).fold(0.0f64, |m, k| {
        let allowed = (0.1 * rhs[k].abs()).max(1e-3);
        m.max((slope[k] - rhs[k]).abs() / allowed)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropagationKind {
    Ll,
    Disp { lambda: f64 },
    Anti { params: AntiParams },
}

impl PropagationKind {
    pub fn mono_kind(&self) -> MonoKind {
        match self {
            PropagationKind::Ll => MonoKind::Ll,
            PropagationKind::Disp { lambda } => MonoKind::Disp { lambda: *lambda },
            PropagationKind::Anti { params } => MonoKind::Anti { lambda: params.lambda },
        }
    }

    fn lambda(&self) -> f64 {
        match self {
            PropagationKind::Disp { lambda } => *lambda,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub directions: usize,
    pub direction_seed: u64,
    pub gate_samples: usize,
    pub gate_particles: usize,
    pub gate_seed: u64,
    pub slices: usize,
    pub stride: usize,
    pub fd_eps: f64,
    /// Constant C in tol = C (dt + dx^2 + 1/sqrt(N) + fd_eps^2).
    pub tol_constant: f64,
    /// Skip the condition gate (negative controls).
    pub ungated: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            directions: 12,
            direction_seed: 17,
            gate_samples: 40,
            gate_particles: 8,
            gate_seed: 23,
            slices: 5,
            stride: 4,
            fd_eps: 1e-3,
            tol_constant: 0.05,
            ungated: false,
        }
    }
}

impl PropagationConfig {
    pub fn tolerance(&self, problem: &Problem, n: usize) -> f64 {
        let g = problem.grid;
        self.tol_constant * (g.dt() + g.dx() * g.dx() + 1.0 / (n as f64).sqrt() + self.fd_eps * self.fd_eps)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeViolation {
    pub direction: String,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationOutcome {
    pub kind: PropagationKind,
    pub tolerance: f64,
    pub gate: Vec<ConditionReport>,
    pub terminal: MonotonicityReport,
    pub slices: MonotonicityReport,
    #[serde(skip)]
    pub traces: Vec<PropagationTrace>,
    pub slope_violations: Vec<SlopeViolation>,
    pub endpoint_violations: Vec<SlopeViolation>,
    pub formula_mismatch_i: f64,
    pub formula_mismatch_disp: f64,
    pub max_abs_uxx: f64,
    pub picard_iterations: usize,
    pub verdict: Verdict,
}

/// Time levels of `count` evenly spaced slices from 0 to n_t.
pub fn slice_levels(n_t: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..count).map(|s| (s * n_t + (count - 1) / 2) / (count - 1)).collect();
    v.dedup();
    v
}

fn gate_reports(problem: &Problem, kind: &PropagationKind, cfg: &PropagationConfig) -> Vec<ConditionReport> {
    let samples = generate_samples(cfg.gate_particles, cfg.gate_samples, cfg.gate_seed);
    match kind {
        PropagationKind::Ll => vec![check_ll_condition(&problem.model, &samples)],
        PropagationKind::Disp { lambda } => vec![check_disp_condition(&problem.model, *lambda, &samples)],
        PropagationKind::Anti { params } => vec![check_anti_assumption(&problem.model, params, &samples)],
    }
}

/// Gate, terminal check, solve, slice battery and variational traces for
/// every direction of the battery.
pub fn propagation_experiment(
    problem: &Problem,
    mu0: &EmpiricalMeasure,
    kind: PropagationKind,
    cfg: &PropagationConfig,
) -> Result<PropagationOutcome, PropagationError> {
    let gate = if cfg.ungated { Vec::new() } else { gate_reports(problem, &kind, cfg) };
    if gate.iter().any(|r| !r.passed()) {
        return Err(PropagationError::Gate(gate));
    }
    let n = mu0.len();
    let tol = cfg.tolerance(problem, n);
    let mono = kind.mono_kind();
    let lambda = kind.lambda();

    let terminal_access = TerminalAccess(problem.model.terminal.clone());
    let terminal_dirs = vec![direction_battery(mu0.points(), cfg.directions, cfg.direction_seed)];
    let terminal = evaluate_battery(
        &terminal_access,
        mono,
        &[(problem.grid.t_end, mu0.clone())],
        &terminal_dirs,
        cfg.fd_eps,
        tol,
    )?;
    if !cfg.ungated && terminal.verdict != Verdict::Pass {
        let rep = ConditionReport::new(
            "terminal_monotonicity",
            terminal.samples.len(),
            match mono {
                MonoKind::Anti { .. } => -terminal.maximum,
                _ => terminal.minimum,
            },
            tol,
        );
        return Err(PropagationError::Gate(vec![rep]));
    }

    let flow = problem.solve(mu0)?;
    let max_abs_uxx = flow.value.max_abs_uxx();
    if let (PropagationKind::Anti { params }, false) = (&kind, cfg.ungated) {
        if max_abs_uxx > params.lu_xx {
            let mut rep =
                ConditionReport::new("vxx_bound", 1, params.lu_xx - max_abs_uxx, 0.0).with_metric("max_abs_uxx", max_abs_uxx);
            rep.stage = Some("solved field".into());
            return Err(PropagationError::Gate(vec![rep]));
        }
    }

    let levels = slice_levels(problem.grid.n_t, cfg.slices);
    let slices: Vec<(f64, EmpiricalMeasure)> = levels.iter().map(|&k| (flow.grid.t(k), flow.mu(k))).collect();
    let dirs: Vec<Vec<TestDirection>> =
        slices.iter().map(|(_, mu)| direction_battery(mu.points(), cfg.directions, cfg.direction_seed)).collect();
    let slice_report = {
        let access = SplitAccess::new(problem);
        evaluate_battery(&access, mono, &slices, &dirs, cfg.fd_eps, tol)?
    };

    let battery = direction_battery(mu0.points(), cfg.directions, cfg.direction_seed);
    let lvec = match &kind {
        PropagationKind::Anti { params } => Some(params.lambda),
        _ => None,
    };
    let traces: Vec<PropagationTrace> = battery
        .par_iter()
        .map(|d| {
            let states = simulate_variational(problem, &flow, &d.eta, cfg.stride, cfg.fd_eps, lambda)?;
            Ok(PropagationTrace::from_states(&d.label, &states, lvec.as_ref()))
        })
        .collect::<Result<_, PropagationError>>()?;

    let mut slope_violations = Vec::new();
    let mut endpoint_violations = Vec::new();
    for tr in &traces {
        let last = tr.len() - 1;
        match &kind {
            PropagationKind::Ll => {
                for k in 0..tr.len() {
                    if tr.rhs[k].dti > tol {
                        slope_violations.push(SlopeViolation { direction: tr.direction.clone(), t: tr.t[k], value: tr.rhs[k].dti });
                    }
                }
                if tr.i[0] < -tol {
                    endpoint_violations.push(SlopeViolation { direction: tr.direction.clone(), t: tr.t[0], value: tr.i[0] });
                }
            }
            PropagationKind::Disp { lambda } => {
                let v = tr.disp(*lambda);
                for k in 0..tr.len() {
                    if tr.rhs[k].cdi > tol {
                        slope_violations.push(SlopeViolation { direction: tr.direction.clone(), t: tr.t[k], value: tr.rhs[k].cdi });
                    }
                }
                if v[0] < -tol {
                    endpoint_violations.push(SlopeViolation { direction: tr.direction.clone(), t: tr.t[0], value: v[0] });
                }
            }
            PropagationKind::Anti { .. } => {
                for k in 0..last {
                    let s = (tr.xi[k + 1] - tr.xi[k]) / (tr.t[k + 1] - tr.t[k]);
                    if s < -tol {
                        slope_violations.push(SlopeViolation { direction: tr.direction.clone(), t: tr.t[k], value: s });
                    }
                }
                if tr.xi[0] > tr.xi[last] + tol {
                    endpoint_violations.push(SlopeViolation {
                        direction: tr.direction.clone(),
                        t: tr.t[0],
                        value: tr.xi[0] - tr.xi[last],
                    });
                }
            }
        }
    }
    let formula_mismatch_i = traces.iter().fold(0.0f64, |m, t| m.max(t.formula_mismatch_i()));
    let formula_mismatch_disp = traces.iter().fold(0.0f64, |m, t| m.max(t.formula_mismatch_disp(lambda)));
    let ok = slice_report.verdict == Verdict::Pass && slope_violations.is_empty() && endpoint_violations.is_empty();
    Ok(PropagationOutcome {
        kind,
        tolerance: tol,
        gate,
        terminal,
        slices: slice_report,
        traces,
        slope_violations,
        endpoint_violations,
        formula_mismatch_i,
        formula_mismatch_disp,
        max_abs_uxx,
        picard_iterations: flow.picard_iterations,
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
    })
}

/// Solver access before T, terminal cost at T.
pub struct SplitAccess<'a> {
    problem: &'a Problem,
    terminal: TerminalAccess,
}

impl<'a> SplitAccess<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        SplitAccess { problem, terminal: TerminalAccess(problem.model.terminal.clone()) }
    }
}

impl ValueAccess for SplitAccess<'_> {
    fn eval(
        &self,
        t: f64,
        mu: &EmpiricalMeasure,
        xs: &[f64],
    ) -> Result<crate::monotonicity::ValueSample, MonoError> {
        if (t - self.problem.grid.t_end).abs() <= 1e-12 {
            self.terminal.eval(t, mu, xs)
        } else {
            self.problem.eval(t, mu, xs)
        }
    }
}
