//! Lasry-Lions, displacement and anti-monotonicity functionals of a value
//! function reached through a [`ValueAccess`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::value_measure_gradient;
use crate::measures::{EmpiricalMeasure, MeasureError};
use crate::models::Terminal;
use crate::report::Verdict;
use crate::solver::{Problem, SolverError};

#[derive(Debug, Error)]
pub enum MonoError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("lambda vector outside D4: {0}")]
    Lambda(String),
    #[error("direction has {0} entries for {1} particles")]
    Direction(usize, usize),
}

/// V, V_x and V_xx at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    pub d2v: Vec<f64>,
}

/// Access to V(t, ., mu) as a function of the measure.
pub trait ValueAccess: Sync {
    fn eval(&self, t: f64, mu: &EmpiricalMeasure, xs: &[f64]) -> Result<ValueSample, MonoError>;
}

impl ValueAccess for Problem {
    fn eval(&self, t: f64, mu: &EmpiricalMeasure, xs: &[f64]) -> Result<ValueSample, MonoError> {
        let f = self.value_at(t, mu)?;
        Ok(ValueSample {
            v: xs.iter().map(|x| f.value(0, *x)).collect(),
            dv: xs.iter().map(|x| f.grad(0, *x)).collect(),
            d2v: xs.iter().map(|x| f.hess(0, *x)).collect(),
        })
    }
}

/// The terminal cost taken as the value function at every time.
#[derive(Debug, Clone)]
pub struct TerminalAccess(pub Terminal);

impl ValueAccess for TerminalAccess {
    fn eval(&self, _t: f64, mu: &EmpiricalMeasure, xs: &[f64]) -> Result<ValueSample, MonoError> {
        let m = mu.mean(0);
        Ok(ValueSample {
            v: xs.iter().map(|x| self.0.eval_m(*x, m)).collect(),
            dv: xs.iter().map(|x| self.0.dx_m(*x, m)).collect(),
            d2v: xs.iter().map(|x| self.0.dxx(*x)).collect(),
        })
    }
}

/// A closure V(t, x, mu) differentiated in x by central differences.
#[derive(Clone)]
pub struct FnAccess(pub Arc<dyn Fn(f64, f64, &EmpiricalMeasure) -> f64 + Send + Sync>);

impl ValueAccess for FnAccess {
    fn eval(&self, t: f64, mu: &EmpiricalMeasure, xs: &[f64]) -> Result<ValueSample, MonoError> {
        let h = 1e-4;
        let f = &self.0;
        Ok(ValueSample {
            v: xs.iter().map(|x| f(t, *x, mu)).collect(),
            dv: xs.iter().map(|x| (f(t, x + h, mu) - f(t, x - h, mu)) / (2.0 * h)).collect(),
            d2v: xs.iter().map(|x| (f(t, x + h, mu) - 2.0 * f(t, *x, mu) + f(t, x - h, mu)) / (h * h)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaVec {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LambdaVec {
    pub fn new(l0: f64, l1: f64, l2: f64, l3: f64) -> Result<Self, MonoError> {
        let v = LambdaVec { l0, l1, l2, l3 };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), MonoError> {
        if self.l0 > 0.0 && self.l2 > 0.0 && self.l3 >= 0.0 && self.l1.is_finite() {
            Ok(())
        } else {
            Err(MonoError::Lambda(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDirection {
    pub label: String,
    pub eta: Vec<f64>,
}

/// Per-particle ingredients shared by the three functionals: eta_i, the
/// measure derivative D_i of V_x along eta, and V_xx(x_i).
#[derive(Debug, Clone, PartialEq)]
pub struct MonoComponents {
    pub eta: Vec<f64>,
    pub d: Vec<f64>,
    pub hess: Vec<f64>,
}

impl MonoComponents {
    fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
        v.sum::<f64>() / n as f64
    }

    pub fn ll(&self) -> f64 {
        Self::mean(self.eta.iter().zip(&self.d).map(|(e, d)| e * d), self.eta.len())
    }

    pub fn disp(&self, lambda: f64) -> f64 {
        self.ll()
            + Self::mean(self.eta.iter().zip(&self.hess).map(|(e, h)| (h + lambda) * e * e), self.eta.len())
    }

    pub fn anti(&self, l: &LambdaVec) -> f64 {
        Self::mean(
            self.eta.iter().zip(&self.d).zip(&self.hess).map(|((e, d), h)| {
                l.l0 * h * e * e + l.l1 * d * e + (h * e) * (h * e) + l.l2 * d * d - l.l3 * e * e
            }),
            self.eta.len(),
        )
    }
}

/// Three value evaluations: V_x at mu +- eps eta and V_xx at mu, all at the
/// particles of mu.
pub fn mon_components<A: ValueAccess + ?Sized>(
    access: &A,
    t: f64,
    mu: &EmpiricalMeasure,
    eta: &[f64],
    fd_eps: f64,
) -> Result<MonoComponents, MonoError> {
    if eta.len() != mu.len() {
        return Err(MonoError::Direction(eta.len(), mu.len()));
    }
    let xs = mu.points().to_vec();
    let (d, base) = rayon::join(
        || {
            value_measure_gradient(
                |m: &EmpiricalMeasure| -> Result<Vec<f64>, MonoError> { Ok(access.eval(t, m, &xs)?.dv) },
                mu,
                eta,
                fd_eps,
            )
        },
        || access.eval(t, mu, &xs),
    );
    Ok(MonoComponents { eta: eta.to_vec(), d: d?, hess: base?.d2v })
}

pub fn mon_ll<A: ValueAccess + ?Sized>(
    access: &A,
    t: f64,
    mu: &EmpiricalMeasure,
    eta: &[f64],
    fd_eps: f64,
) -> Result<f64, MonoError> {
    Ok(mon_components(access, t, mu, eta, fd_eps)?.ll())
}

pub fn mon_disp<A: ValueAccess + ?Sized>(
    access: &A,
    t: f64,
    mu: &EmpiricalMeasure,
    eta: &[f64],
    lambda: f64,
    fd_eps: f64,
) -> Result<f64, MonoError> {
    Ok(mon_components(access, t, mu, eta, fd_eps)?.disp(lambda))
}

pub fn mon_anti<A: ValueAccess + ?Sized>(
    access: &A,
    t: f64,
    mu: &EmpiricalMeasure,
    eta: &[f64],
    lambda: &LambdaVec,
    fd_eps: f64,
) -> Result<f64, MonoError> {
    lambda.validate()?;
    Ok(mon_components(access, t, mu, eta, fd_eps)?.anti(lambda))
}

/// (1/N) sum_i [V(x1_i, mu1) + V(x2_i, mu2) - V(x1_i, mu2) - V(x2_i, mu1)]
/// from two solves, each evaluated at both particle lists.
pub fn mon_ll_difference_form<A: ValueAccess + ?Sized>(
    access: &A,
    t: f64,
    x1: &[f64],
    x2: &[f64],
) -> Result<f64, MonoError> {
    if x1.len() != x2.len() {
        return Err(MonoError::Direction(x1.len(), x2.len()));
    }
    let n = x1.len();
    let mu1 = EmpiricalMeasure::uniform(1, x1.to_vec())?;
    let mu2 = EmpiricalMeasure::uniform(1, x2.to_vec())?;
    let pts: Vec<f64> = x1.iter().chain(x2).copied().collect();
    let (a, b) = rayon::join(|| access.eval(t, &mu1, &pts), || access.eval(t, &mu2, &pts));
    let (a, b) = (a?.v, b?.v);
    let s: f64 = (0..n).map(|i| a[i] + b[n + i] - b[i] - a[n + i]).sum();
    Ok(s / n as f64)
}

fn standardise(v: &mut [f64]) -> bool {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= m);
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= sd);
    true
}

/// Directions eta_i = psi(x_i): three seeded polynomial feedbacks of degree
/// 1 to 3, each with both signs, in a mean-directed form
/// sigma (1 + psi~/2) and a mean-free form sigma psi~ (psi~ standardised).
/// Beyond twelve, i.i.d. standard normal directions are appended.
pub fn direction_battery(xs: &[f64], count: usize, seed: u64) -> Vec<TestDirection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut out = Vec::new();
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    for deg in 1..=3usize {
        let mut c: Vec<f64> = (0..=deg).map(|_| StandardNormal.sample(&mut rng)).collect();
        c[deg] = c[deg].signum() * c[deg].abs().max(0.5);
        let mut psi: Vec<f64> = xs.iter().map(|x| c.iter().rev().fold(0.0, |a, k| a * x + k)).collect();
        if !standardise(&mut psi) {
            psi = noise(&mut rng);
            standardise(&mut psi);
        }
        for sign in [1.0, -1.0] {
            let s = if sign > 0.0 { "+" } else { "-" };
            out.push(TestDirection {
                label: format!("poly{deg}{s}_mean"),
                eta: psi.iter().map(|p| sign * (1.0 + 0.5 * p)).collect(),
            });
            out.push(TestDirection { label: format!("poly{deg}{s}_free"), eta: psi.iter().map(|p| sign * p).collect() });
        }
    }
    let mut k = 0;
    while out.len() < count {
        out.push(TestDirection { label: format!("noise{k}"), eta: noise(&mut rng) });
        k += 1;
    }
    out.truncate(count);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonoKind {
    Ll,
    Disp { lambda: f64 },
    Anti { lambda: LambdaVec },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonoSample {
    pub t: f64,
    pub direction: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub kind: MonoKind,
    pub tolerance: f64,
    pub samples: Vec<MonoSample>,
    pub minimum: f64,
    pub maximum: f64,
    pub verdict: Verdict,
}

impl MonotonicityReport {
    /// LL and displacement pass iff the minimum is >= -tol; anti passes iff
    /// the maximum is <= tol.
    pub fn from_samples(kind: MonoKind, samples: Vec<MonoSample>, tolerance: f64) -> Self {
        let minimum = samples.iter().fold(f64::INFINITY, |m, s| m.min(s.value));
        let maximum = samples.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s.value));
        let ok = match kind {
            MonoKind::Anti { .. } => maximum <= tolerance,
            _ => minimum >= -tolerance,
        };
        MonotonicityReport {
            kind,
            tolerance,
            samples,
            minimum,
            maximum,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        }
    }
}

/// Evaluates one functional over every (slice, direction) pair; slices are
/// (t, mu) and directions must match each mu in size.
pub fn evaluate_battery<A: ValueAccess + ?Sized>(
    access: &A,
    kind: MonoKind,
    slices: &[(f64, EmpiricalMeasure)],
    directions: &[Vec<TestDirection>],
    fd_eps: f64,
    tolerance: f64,
) -> Result<MonotonicityReport, MonoError> {
    let jobs: Vec<(usize, usize)> =
        (0..slices.len()).flat_map(|s| (0..directions[s].len()).map(move |d| (s, d))).collect();
    let samples = jobs
        .par_iter()
        .map(|&(s, d)| {
            let (t, mu) = &slices[s];
            let dir = &directions[s][d];
            let c = mon_components(access, *t, mu, &dir.eta, fd_eps)?;
            let value = match &kind {
                MonoKind::Ll => c.ll(),
                MonoKind::Disp { lambda } => c.disp(*lambda),
                MonoKind::Anti { lambda } => c.anti(lambda),
            };
            Ok(MonoSample { t: *t, direction: dir.label.clone(), value })
        })
        .collect::<Result<Vec<_>, MonoError>>()?;
    Ok(MonotonicityReport::from_samples(kind, samples, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Poly;

    fn g(a: f64, b: f64) -> TerminalAccess {
        TerminalAccess(Terminal { poly: Poly::new(&[0.0, 0.0, 0.5 * a]), k_xm: b, k_mm: 0.0 })
    }

    fn mu() -> EmpiricalMeasure {
        EmpiricalMeasure::from_points(&[-1.0, 0.0, 0.5, 2.0]).unwrap()
    }

    #[test]
    fn ll_of_linear_coupling() {
        let v = mon_ll(&g(0.5, 1.0), 1.0, &mu(), &[1.0; 4], 1e-3).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let v = mon_ll(&g(0.5, 1.0), 1.0, &mu(), &[1.0, -1.0, 2.0, -2.0], 1e-3).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn disp_examples() {
        let eta = [0.3, -1.0, 2.0, 0.1];
        let v = mon_disp(&g(-1.0, 0.0), 1.0, &mu(), &eta, 1.0, 1e-3).unwrap();
        assert!(v.abs() < 1e-12);
        let v = mon_disp(&g(1.0, -1.0), 1.0, &mu(), &[1.0; 4], 0.0, 1e-3).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn anti_example() {
        let eta = [0.3, -1.0, 2.0, 0.1];
        let l = LambdaVec::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let v = mon_anti(&g(-0.5, 0.0), 1.0, &mu(), &eta, &l, 1e-3).unwrap();
        let m2 = eta.iter().map(|e| e * e).sum::<f64>() / 4.0;
        assert!((v + 0.25 * m2).abs() < 1e-12);
        assert_eq!(mon_anti(&g(-0.5, 0.0), 1.0, &mu(), &[0.0; 4], &l, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn difference_form_examples() {
        let x1 = [-1.0, 0.0, 0.5, 2.0];
        let x2 = [0.0, 0.5, 0.5, 1.0];
        assert_eq!(mon_ll_difference_form(&g(0.7, 2.0), 1.0, &x1, &x1).unwrap(), 0.0);
        let b = 2.0;
        let v = mon_ll_difference_form(&TerminalAccess(Terminal { k_xm: b, ..Default::default() }), 1.0, &x1, &x2).unwrap();
        let dm = (x1.iter().sum::<f64>() - x2.iter().sum::<f64>()) / 4.0;
        assert!((v - b * dm * dm).abs() < 1e-12);
    }

    #[test]
    fn battery_shape() {
        let xs = [-1.0, -0.2, 0.3, 0.9, 1.4];
        let b = direction_battery(&xs, 12, 1);
        assert_eq!(b.len(), 12);
        assert!(b.iter().all(|d| d.eta.len() == 5 && d.eta.iter().all(|v| v.is_finite())));
        let free = b.iter().filter(|d| d.label.ends_with("free"));
        for d in free {
            assert!(d.eta.iter().sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(direction_battery(&xs, 15, 1).len(), 15);
        assert_eq!(direction_battery(&xs, 12, 1), b);
    }

    #[test]
    fn lambda_membership() {
        assert!(LambdaVec::new(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(LambdaVec::new(1.0, -3.0, 1.0, 0.0).is_ok());
        assert!(LambdaVec::new(1.0, 0.0, 1.0, -1.0).is_err());
    }
}
