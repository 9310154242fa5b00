//! Equilibrium solver: Picard iteration between an explicit backward HJB
//! scheme on a grid and a forward particle flow under common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{sorted_distance, EmpiricalMeasure, JointEmpiricalMeasure, MeasureError};
use crate::models::{ModelError, ModelSpec};

pub const CFL_FACTOR: f64 = 0.45;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("CFL violated: dt = {dt:e} > {limit:e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("Picard iteration did not converge in {iterations} sweeps (last residual {last:e})")]
    NonConvergence { iterations: usize, last: f64, history: Vec<f64> },
    #[error("particle {particle} left the grid at level {level} (x = {x})")]
    ParticleEscape { level: usize, particle: usize, x: f64 },
    #[error("common noise is not simulated (beta = {0})")]
    CommonNoise(f64),
    #[error("time {0} is not a grid level")]
    OffGrid(f64),
    #[error("non-finite value function at level {0}")]
    Blowup(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub t0: f64,
    pub t_end: f64,
    /// Number of time steps; there are `n_t + 1` levels.
    pub n_t: usize,
}

impl Grid {
    /// Smallest step count meeting the CFL bound (and at least 8).
    pub fn with_cfl(x_min: f64, x_max: f64, n_x: usize, t0: f64, t_end: f64, beta: f64) -> Self {
        let dx = (x_max - x_min) / (n_x - 1) as f64;
        let limit = CFL_FACTOR * dx * dx / (1.0 + beta * beta);
        let n_t = (((t_end - t0) / limit) * (1.0 + 1e-12)).ceil().max(8.0) as usize;
        Grid { x_min, x_max, n_x, t0, t_end, n_t }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        if self.n_t == 0 {
            0.0
        } else {
            (self.t_end - self.t0) / self.n_t as f64
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.x(i)).collect()
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Level index of time t, if t sits on the grid.
    pub fn level(&self, t: f64) -> Result<usize, SolverError> {
        if self.n_t == 0 {
            return if (t - self.t_end).abs() <= 1e-12 { Ok(0) } else { Err(SolverError::OffGrid(t)) };
        }
        let s = (t - self.t0) / self.dt();
        let k = s.round();
        if (s - k).abs() > 1e-6 || k < 0.0 || k > self.n_t as f64 {
            return Err(SolverError::OffGrid(t));
        }
        Ok(k as usize)
    }

    /// The same grid restricted to [t(k), T].
    pub fn tail(&self, k: usize) -> Grid {
        Grid { t0: self.t(k), n_t: self.n_t - k, ..*self }
    }

    /// Halved space and time steps.
    pub fn refined(&self) -> Grid {
        Grid { n_x: 2 * self.n_x - 1, n_t: 2 * self.n_t, ..*self }
    }

    pub fn validate(&self, beta: f64) -> Result<(), SolverError> {
        if !(self.x_min < self.x_max) || !(self.t0 < self.t_end) {
            return Err(SolverError::Grid("empty interval".into()));
        }
        if self.n_x < 16 || self.n_t < 8 {
            return Err(SolverError::Grid(format!("need n_x >= 16 and n_t >= 8, got {} and {}", self.n_x, self.n_t)));
        }
        self.check_cfl(beta)
    }

    fn check_cfl(&self, beta: f64) -> Result<(), SolverError> {
        let limit = CFL_FACTOR * self.dx() * self.dx() / (1.0 + beta * beta);
        if self.dt() > limit * (1.0 + 1e-9) {
            return Err(SolverError::Cfl { dt: self.dt(), limit });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardConfig {
    pub max_iter: usize,
    pub damping: f64,
    pub tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { max_iter: 300, damping: 0.5, tol: 1e-10 }
    }
}

/// u, u_x, u_xx on all levels of a grid, stored level-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub ux: Vec<f64>,
    pub uxx: Vec<f64>,
}

impl ValueField {
    fn slot(&self, k: usize) -> std::ops::Range<usize> {
        k * self.grid.n_x..(k + 1) * self.grid.n_x
    }

    pub fn levels(&self) -> usize {
        self.grid.n_t + 1
    }

    pub fn u_level(&self, k: usize) -> &[f64] {
        &self.u[self.slot(k)]
    }

    pub fn ux_level(&self, k: usize) -> &[f64] {
        &self.ux[self.slot(k)]
    }

    pub fn uxx_level(&self, k: usize) -> &[f64] {
        &self.uxx[self.slot(k)]
    }

    fn cell(&self, x: f64) -> (usize, f64) {
        let dx = self.grid.dx();
        let s = (x - self.grid.x_min) / dx;
        let j = (s.floor().max(0.0) as usize).min(self.grid.n_x - 2);
        (j, s - j as f64)
    }

    fn hermite(f: &[f64], df: &[f64], j: usize, s: f64, dx: f64) -> f64 {
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * f[j] + h10 * dx * df[j] + h01 * f[j + 1] + h11 * dx * df[j + 1]
    }

    /// u(t_k, x) by cubic Hermite interpolation.
    pub fn value(&self, k: usize, x: f64) -> f64 {
        let (j, s) = self.cell(x);
        Self::hermite(self.u_level(k), self.ux_level(k), j, s, self.grid.dx())
    }

    /// u_x(t_k, x) by cubic Hermite interpolation.
    pub fn grad(&self, k: usize, x: f64) -> f64 {
        let (j, s) = self.cell(x);
        Self::hermite(self.ux_level(k), self.uxx_level(k), j, s, self.grid.dx())
    }

    /// u_xx(t_k, x) by linear interpolation.
    pub fn hess(&self, k: usize, x: f64) -> f64 {
        let (j, s) = self.cell(x);
        let l = self.uxx_level(k);
        (1.0 - s) * l[j] + s * l[j + 1]
    }

    /// sup |u_xx| over the grid interior and all levels.
    pub fn max_abs_uxx(&self) -> f64 {
        self.uxx.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// inf u_xx over all levels.
    pub fn min_uxx(&self) -> f64 {
        self.uxx.iter().fold(f64::INFINITY, |m: f64, v| m.min(*v))
    }
}

/// Central differences with linearly extrapolated u_x and copied u_xx at the
/// two boundary nodes, so quadratics are differentiated exactly.
fn derivatives(u: &[f64], dx: f64, ux: &mut [f64], uxx: &mut [f64]) {
    let n = u.len();
    for i in 1..n - 1 {
        ux[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        uxx[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
    }
    ux[0] = 2.0 * ux[1] - ux[2];
    ux[n - 1] = 2.0 * ux[n - 2] - ux[n - 3];
    uxx[0] = uxx[1];
    uxx[n - 1] = uxx[n - 2];
}

/// Backward explicit Euler for u_t + u_xx/2 + H(x, u_x, nu_t) = 0 with
/// u(T) = G(., mu_T); `nus[k]` is the control law at level k.
pub fn backward_hjb(
    model: &ModelSpec,
    grid: &Grid,
    nus: &[JointEmpiricalMeasure],
    mu_t: &EmpiricalMeasure,
) -> Result<ValueField, SolverError> {
    let nx = grid.n_x;
    let levels = grid.n_t + 1;
    let dx = grid.dx();
    let dt = grid.dt();
    let xs = grid.xs();
    let mut u = vec![0.0; levels * nx];
    let mut ux = vec![0.0; levels * nx];
    let mut uxx = vec![0.0; levels * nx];
    let last = grid.n_t;
    for (i, x) in xs.iter().enumerate() {
        u[last * nx + i] = model.g(*x, mu_t);
    }
    {
        let (a, b) = (&mut ux[last * nx..], &mut uxx[last * nx..]);
        derivatives(&u[last * nx..], dx, a, b);
    }
    for k in (0..last).rev() {
        let fr = model.freeze(&nus[k + 1]);
        let (lo, hi) = u.split_at_mut((k + 1) * nx);
        let next = &hi[..nx];
        let cur = &mut lo[k * nx..];
        let nux = &ux[(k + 1) * nx..(k + 2) * nx];
        let nuxx = &uxx[(k + 1) * nx..(k + 2) * nx];
        for i in 0..nx {
            cur[i] = next[i] + dt * (0.5 * nuxx[i] + fr.h(xs[i], nux[i])?);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Blowup(k));
        }
        let (a, b) = (&mut ux[k * nx..(k + 1) * nx], &mut uxx[k * nx..(k + 1) * nx]);
        derivatives(&u[k * nx..(k + 1) * nx], dx, a, b);
    }
    Ok(ValueField { grid: *grid, u, ux, uxx })
}

/// Brownian increments for `n` particles over `n_t` steps; entry k*n + i is
/// the increment of particle i on step k.
pub fn brownian_increments(seed: u64, n: usize, n_t: usize, dt: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, dt.sqrt()).expect("finite dt");
    (0..n * n_t).map(|_| normal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumFlow {
    pub grid: Grid,
    /// Particle states per level.
    pub states: Vec<Vec<f64>>,
    /// u_x at the particles per level.
    pub momenta: Vec<Vec<f64>>,
    /// Controls of Phi(rho_t) per level.
    pub controls: Vec<Vec<f64>>,
    pub value: ValueField,
    pub picard_iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
}

impl EquilibriumFlow {
    pub fn mu(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, self.states[k].clone()).expect("finite particles")
    }

    pub fn rho(&self, k: usize) -> JointEmpiricalMeasure {
        JointEmpiricalMeasure::from_pairs(&self.states[k], &self.momenta[k]).expect("finite particles")
    }

    pub fn nu(&self, k: usize) -> JointEmpiricalMeasure {
        JointEmpiricalMeasure::from_pairs(&self.states[k], &self.controls[k]).expect("finite particles")
    }

    pub fn n(&self) -> usize {
        self.states[0].len()
    }

    /// CSV rows: t, particle, state, control, u_x.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "particle", "x", "alpha", "u_x"])?;
        for k in 0..self.states.len() {
            for i in 0..self.n() {
                wr.write_record([
                    crate::measures::fmt_f64(self.grid.t(k)),
                    i.to_string(),
                    crate::measures::fmt_f64(self.states[k][i]),
                    crate::measures::fmt_f64(self.controls[k][i]),
                    crate::measures::fmt_f64(self.momenta[k][i]),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// A model on a grid with Picard settings and a noise seed.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ModelSpec,
    pub grid: Grid,
    pub picard: PicardConfig,
    pub seed: u64,
}

impl Problem {
    pub fn new(model: ModelSpec, grid: Grid, picard: PicardConfig, seed: u64) -> Result<Self, SolverError> {
        if model.beta != 0.0 {
            return Err(SolverError::CommonNoise(model.beta));
        }
        grid.validate(model.beta)?;
        Ok(Problem { model, grid, picard, seed })
    }

    pub fn solve(&self, mu0: &EmpiricalMeasure) -> Result<EquilibriumFlow, SolverError> {
        self.solve_from(0, mu0)
    }

    /// Solve on [t(k), T] from mu, driving the particles with the tail of the
    /// full-horizon noise so that sub-solves share randomness with the
    /// full solve.
    pub fn solve_from(&self, k: usize, mu: &EmpiricalMeasure) -> Result<EquilibriumFlow, SolverError> {
        let grid = self.grid.tail(k);
        let n = mu.len();
        let noise = brownian_increments(self.seed, n, self.grid.n_t, self.grid.dt());
        solve_on(&self.model, &grid, &self.picard, mu, &noise[k * n..])
    }

    /// V(t, ., mu) as the first slice of the solve started at (t, mu).
    pub fn value_at(&self, t: f64, mu: &EmpiricalMeasure) -> Result<ValueField, SolverError> {
        let k = self.grid.level(t)?;
        let flow = self.solve_from(k, mu)?;
        Ok(flow.value)
    }

    /// Sup-norm gap between the equilibrium value and the best response to
    /// the frozen control laws of `flow`.
    pub fn best_response_gap(&self, flow: &EquilibriumFlow) -> Result<f64, SolverError> {
        let nus: Vec<_> = (0..flow.states.len()).map(|k| flow.nu(k)).collect();
        let br = backward_hjb(&self.model, &flow.grid, &nus, &flow.mu(flow.grid.n_t))?;
        Ok(br.u.iter().zip(&flow.value.u).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs())))
    }
}

/// Entry point mirroring [`Problem::solve`].
pub fn solve_mfgc(
    model: &ModelSpec,
    mu0: &EmpiricalMeasure,
    grid: Grid,
    picard: PicardConfig,
    seed: u64,
) -> Result<EquilibriumFlow, SolverError> {
    Problem::new(model.clone(), grid, picard, seed)?.solve(mu0)
}

fn solve_on(
    model: &ModelSpec,
    grid: &Grid,
    picard: &PicardConfig,
    mu0: &EmpiricalMeasure,
    noise: &[f64],
) -> Result<EquilibriumFlow, SolverError> {
    if mu0.dim() != 1 {
        return Err(SolverError::Grid("solver is one-dimensional".into()));
    }
    let n = mu0.len();
    let levels = grid.n_t + 1;
    let dt = grid.dt();
    let x0 = mu0.points().to_vec();
    for (i, x) in x0.iter().enumerate() {
        if *x < grid.x_min || *x > grid.x_max {
            return Err(SolverError::ParticleEscape { level: 0, particle: i, x: *x });
        }
    }

    let mut xs = vec![x0.clone(); levels];
    for k in 0..grid.n_t {
        for i in 0..n {
            xs[k + 1][i] = xs[k][i] + noise[k * n + i];
        }
    }
    let mut ps = vec![vec![0.0; n]; levels];
    let mut history = Vec::new();

    for it in 1..=picard.max_iter.max(1) {
        let nus: Vec<JointEmpiricalMeasure> = (0..levels)
            .map(|k| model.fixed_point_phi(&JointEmpiricalMeasure::from_pairs(&xs[k], &ps[k])?))
            .collect::<Result<_, _>>()?;
        let mu_t = EmpiricalMeasure::uniform(1, xs[grid.n_t].clone())?;
        let field = backward_hjb(model, grid, &nus, &mu_t)?;

        let mut nx = vec![x0.clone(); levels];
        let mut np = vec![vec![0.0; n]; levels];
        for k in 0..levels {
            for i in 0..n {
                np[k][i] = field.grad(k, nx[k][i]);
            }
            if k == grid.n_t {
                break;
            }
            let fr = model.freeze(&nus[k]);
            for i in 0..n {
                let x = nx[k][i];
                let y = x + dt * fr.h_p(x, np[k][i])? + noise[k * n + i];
                if !(y >= grid.x_min && y <= grid.x_max) {
                    return Err(SolverError::ParticleEscape { level: k + 1, particle: i, x: y });
                }
                nx[k + 1][i] = y;
            }
        }

        let residual = (0..levels).fold(0.0f64, |m, k| {
            m.max(sorted_distance(&nx[k], &xs[k])).max(sorted_distance(&np[k], &ps[k]))
        });
        history.push(residual);

        if residual <= picard.tol {
            let nus: Vec<JointEmpiricalMeasure> = (0..levels)
                .map(|k| model.fixed_point_phi(&JointEmpiricalMeasure::from_pairs(&nx[k], &np[k])?))
                .collect::<Result<_, _>>()?;
            let controls = nus.iter().map(|nu| nu.seconds().to_vec()).collect();
            let field = backward_hjb(model, grid, &nus, &EmpiricalMeasure::uniform(1, nx[grid.n_t].clone())?)?;
            return Ok(EquilibriumFlow {
                grid: *grid,
                states: nx,
                momenta: np,
                controls,
                value: field,
                picard_iterations: it,
                final_residual: residual,
                residual_history: history,
            });
        }

        let w = picard.damping;
        for k in 0..levels {
            for i in 0..n {
                xs[k][i] += w * (nx[k][i] - xs[k][i]);
                ps[k][i] += w * (np[k][i] - ps[k][i]);
            }
        }
    }
    let last = history.last().copied().unwrap_or(f64::INFINITY);
    Err(SolverError::NonConvergence { iterations: picard.max_iter, last, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Terminal;

    fn grid() -> Grid {
        Grid::with_cfl(-4.0, 4.0, 41, 0.0, 0.5, 0.0)
    }

    #[test]
    fn cfl_grid_is_valid() {
        let g = Grid::with_cfl(-6.0, 6.0, 201, 0.0, 1.0, 0.0);
        g.validate(0.0).unwrap();
        let bad = Grid { n_t: g.n_t - 1, ..g };
        assert!(matches!(bad.validate(0.0), Err(SolverError::Cfl { .. })));
    }

    #[test]
    fn derivatives_exact_on_quadratics() {
        let dx = 0.1;
        let u: Vec<f64> = (0..20).map(|i| {
            let x = -1.0 + i as f64 * dx;
            3.0 * x * x - x + 2.0
        }).collect();
        let mut ux = vec![0.0; 20];
        let mut uxx = vec![0.0; 20];
        derivatives(&u, dx, &mut ux, &mut uxx);
        for i in 0..20 {
            let x = -1.0 + i as f64 * dx;
            assert!((ux[i] - (6.0 * x - 1.0)).abs() < 1e-9);
            assert!((uxx[i] - 6.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_coupling_zero_terminal() {
        let mu0 = EmpiricalMeasure::from_points(&[-0.5, 0.0, 0.25, 0.5]).unwrap();
        let flow = solve_mfgc(&ModelSpec::free(Terminal::default()), &mu0, grid(), PicardConfig::default(), 1).unwrap();
        assert!(flow.value.u.iter().all(|v| *v == 0.0));
        assert!(flow.controls.iter().flatten().all(|a| *a == 0.0));
        let p = Problem::new(ModelSpec::free(Terminal::default()), grid(), PicardConfig::default(), 1).unwrap();
        assert_eq!(p.best_response_gap(&flow).unwrap(), 0.0);
    }

    #[test]
    fn terminal_slice_is_exact() {
        let model = ModelSpec::free(Terminal { k_xm: 0.7, ..Terminal::quadratic(1.0) });
        let mu0 = EmpiricalMeasure::from_points(&[-0.5, 0.0, 0.25, 0.5]).unwrap();
        let p = Problem::new(model.clone(), grid(), PicardConfig::default(), 5).unwrap();
        let flow = p.solve(&mu0).unwrap();
        let mu_t = flow.mu(flow.grid.n_t);
        for (i, x) in flow.grid.xs().iter().enumerate() {
            assert_eq!(flow.value.u_level(flow.grid.n_t)[i], model.g(*x, &mu_t));
        }
        let v = p.value_at(p.grid.t_end, &mu0).unwrap();
        for (i, x) in v.grid.xs().iter().enumerate() {
            assert_eq!(v.u_level(0)[i], model.g(*x, &mu0));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let model = ModelSpec::free(Terminal::quadratic(1.0));
        let mu0 = EmpiricalMeasure::from_points(&[-0.5, 0.0, 0.25, 0.5]).unwrap();
        let a = solve_mfgc(&model, &mu0, grid(), PicardConfig::default(), 9).unwrap();
        let b = solve_mfgc(&model, &mu0, grid(), PicardConfig::default(), 9).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.value, b.value);
    }
}
