//! Problem instances: drift b, running cost f, terminal cost G, the minimizer
//! phi, the fixed point Phi and the reduced Hamiltonian with its derivatives.
//!
//! All shipped families are one-dimensional and interact with the measure only
//! through the means m1 = E[xi] and m2 = E[alpha].

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{EmpiricalMeasure, JointEmpiricalMeasure, MeasureError};
use crate::report::{ConditionReport, Verdict};

pub const FD_STEP_XP: f64 = 1e-5;
pub const FD_STEP_SECOND: f64 = 1e-4;
pub const FD_STEP_PARTICLE: f64 = 1e-4;
pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite model output ({0})")]
    NonFinite(&'static str),
    #[error("minimizer search failed: {0}")]
    Minimizer(String),
    #[error("fixed point iteration stopped after {iterations} iterations with residual {residual:e}")]
    FixedPoint { iterations: usize, residual: f64 },
    #[error("contraction hypothesis violated: slope {0} of the mean map")]
    Contraction(f64),
    #[error("({0}, {1}) is not a support point of rho")]
    NotSupportPoint(f64, f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Polynomial c0 + c1 x + ... in one variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn zero() -> Self {
        Poly(Vec::new())
    }

    pub fn new(c: &[f64]) -> Self {
        Poly(c.to_vec())
    }

    pub fn degree(&self) -> usize {
        self.0.iter().rposition(|c| *c != 0.0).unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == 0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * x + (k * (k - 1)) as f64 * c)
    }

    fn coef(&self, k: usize) -> f64 {
        self.0.get(k).copied().unwrap_or(0.0)
    }

    /// sup over the line of |p'|; infinite unless the degree is at most one.
    pub fn sup_abs_d1(&self) -> f64 {
        if self.degree() <= 1 {
            self.coef(1).abs()
        } else {
            f64::INFINITY
        }
    }

    /// inf over the line of p''; only degrees up to four are handled exactly.
    pub fn inf_d2(&self) -> f64 {
        let (a2, a3, a4) = (self.coef(2), self.coef(3), self.coef(4));
        match self.degree() {
            0 | 1 => 0.0,
            2 => 2.0 * a2,
            3 => f64::NEG_INFINITY,
            4 if a4 > 0.0 => {
                let x = -6.0 * a3 / (24.0 * a4);
                2.0 * a2 + 6.0 * a3 * x + 12.0 * a4 * x * x
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Terminal cost G(x, mu) = P(x) + k_xm x E[xi] + k_mm E[xi]^2.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Terminal {
    pub poly: Poly,
    pub k_xm: f64,
    pub k_mm: f64,
}

impl Terminal {
    pub fn quadratic(a: f64) -> Self {
        Terminal { poly: Poly::new(&[0.0, 0.0, 0.5 * a]), ..Default::default() }
    }

    pub fn eval_m(&self, x: f64, m: f64) -> f64 {
        self.poly.eval(x) + self.k_xm * x * m + self.k_mm * m * m
    }

    pub fn dx_m(&self, x: f64, m: f64) -> f64 {
        self.poly.d1(x) + self.k_xm * m
    }

    pub fn dxx(&self, x: f64) -> f64 {
        self.poly.d2(x)
    }

    pub fn eval(&self, x: f64, mu: &EmpiricalMeasure) -> f64 {
        self.eval_m(x, mu.mean(0))
    }

    pub fn dx(&self, x: f64, mu: &EmpiricalMeasure) -> f64 {
        self.dx_m(x, mu.mean(0))
    }
}

/// b = a + B(x) + kb1 m1 + kb2 m2, f = r a^2/2 + F(x) + kf1 x m1 + kf2 x m2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparableParams {
    pub r: f64,
    pub b1: Poly,
    pub kb1: f64,
    pub kb2: f64,
    pub f1: Poly,
    pub kf1: f64,
    pub kf2: f64,
}

impl Default for SeparableParams {
    fn default() -> Self {
        SeparableParams {
            r: 1.0,
            b1: Poly::zero(),
            kb1: 0.0,
            kb2: 0.0,
            f1: Poly::zero(),
            kf1: 0.0,
            kf2: 0.0,
        }
    }
}

/// b = -b0 a + B(x) + kb1 m1 + kb2 m2,
/// f = a^2/2 - a f0(x, m1, m2) + F(x) + kf1 x m1 + kf2 x m2,
/// f0 = f0[0] + f0[1] x + f0[2] m1 + f0[3] m2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanField1dParams {
    pub b0: f64,
    pub f0: [f64; 4],
    pub b1: Poly,
    pub kb1: f64,
    pub kb2: f64,
    pub f1: Poly,
    pub kf1: f64,
    pub kf2: f64,
    pub eps: f64,
}

impl Default for MeanField1dParams {
    fn default() -> Self {
        MeanField1dParams {
            b0: 1.0,
            f0: [0.0; 4],
            b1: Poly::zero(),
            kb1: 0.0,
            kb2: 0.0,
            f1: Poly::zero(),
            kf1: 0.0,
            kf2: 0.0,
            eps: 0.05,
        }
    }
}

impl MeanField1dParams {
    fn f0(&self, x: f64, m1: f64, m: f64) -> f64 {
        self.f0[0] + self.f0[1] * x + self.f0[2] * m1 + self.f0[3] * m
    }
}

/// b = -a + b1(m1, m2) + b2(x), f = a^2/2 - c1 a m2 + c2 x m1 + c3 x m2 + f1(x),
/// with b1(m1, m2) = b1_m1(m1) + b1_m2(m2).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub b1_m1: Poly,
    pub b1_m2: Poly,
    pub b2: Poly,
    pub f1: Poly,
}

impl LlParams {
    pub fn c1_hat(&self) -> f64 {
        self.c1 / (1.0 - self.c1)
    }
    pub fn c1_bar(&self) -> f64 {
        1.0 / (1.0 - self.c1)
    }
    pub fn c3_hat(&self) -> f64 {
        self.c3 / (1.0 - self.c1)
    }
}

/// b = -a - l0 x + b1(m1, m2),
/// f = a^2/2 - c a m2 - gamma l0 x^2/2 + f1(x) + k1 x m1 + k2 x m2.
/// The displacement family is the case gamma = l0 = 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    pub c: f64,
    pub gamma: f64,
    pub l0: f64,
    pub b1_m1: Poly,
    pub b1_m2: Poly,
    pub f1: Poly,
    pub k1: f64,
    pub k2: f64,
}

impl ShiftParams {
    pub fn c_hat(&self) -> f64 {
        self.c / (1.0 - self.c)
    }
    pub fn c_bar(&self) -> f64 {
        1.0 / (1.0 - self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Separable(SeparableParams),
    #[serde(rename = "meanfield_1d")]
    MeanField1d(MeanField1dParams),
    Ll(LlParams),
    Disp(ShiftParams),
    Anti(ShiftParams),
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Separable(_) => "SEPARABLE",
            Family::MeanField1d(_) => "MEANFIELD_1D",
            Family::Ll(_) => "LL_EXAMPLE",
            Family::Disp(_) => "DISP_EXAMPLE",
            Family::Anti(_) => "ANTI_EXAMPLE",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let polys: Vec<&Poly> = match self {
            Family::Separable(p) => {
                if !(p.r > 0.0) {
                    return Err(ModelError::InvalidParameter(format!("r = {} must be > 0", p.r)));
                }
                vec![&p.b1, &p.f1]
            }
            Family::MeanField1d(p) => {
                if !(p.eps > 0.0) {
                    return Err(ModelError::InvalidParameter("eps must be > 0".into()));
                }
                if p.f0[3] > 1.0 - p.eps {
                    return Err(ModelError::InvalidParameter(format!(
                        "d f0/dm = {} exceeds 1 - eps = {}",
                        p.f0[3],
                        1.0 - p.eps
                    )));
                }
                vec![&p.b1, &p.f1]
            }
            Family::Ll(p) => {
                if !(p.c1 > 0.0 && p.c1 < 1.0) {
                    return Err(ModelError::InvalidParameter(format!("c1 = {} not in (0,1)", p.c1)));
                }
                vec![&p.b1_m1, &p.b1_m2, &p.b2, &p.f1]
            }
            Family::Disp(p) | Family::Anti(p) => {
                if !(p.c > 0.0 && p.c < 1.0) {
                    return Err(ModelError::InvalidParameter(format!("c = {} not in (0,1)", p.c)));
                }
                if let Family::Anti(_) = self {
                    if !(p.l0 > 0.0 && p.gamma > 0.0) {
                        return Err(ModelError::InvalidParameter("anti family needs l0, gamma > 0".into()));
                    }
                }
                vec![&p.b1_m1, &p.b1_m2, &p.f1]
            }
        };
        for p in polys {
            if p.0.len() > 5 && p.degree() > 4 {
                return Err(ModelError::InvalidParameter("polynomial degree above 4".into()));
            }
            if p.0.iter().any(|c| !c.is_finite()) {
                return Err(ModelError::InvalidParameter("non-finite coefficient".into()));
            }
        }
        Ok(())
    }

    fn b(&self, x: f64, a: f64, m1: f64, m2: f64) -> f64 {
        match self {
            Family::Separable(p) => a + p.b1.eval(x) + p.kb1 * m1 + p.kb2 * m2,
            Family::MeanField1d(p) => -p.b0 * a + p.b1.eval(x) + p.kb1 * m1 + p.kb2 * m2,
            Family::Ll(p) => -a + p.b1_m1.eval(m1) + p.b1_m2.eval(m2) + p.b2.eval(x),
            Family::Disp(p) | Family::Anti(p) => -a - p.l0 * x + p.b1_m1.eval(m1) + p.b1_m2.eval(m2),
        }
    }

    fn f(&self, x: f64, a: f64, m1: f64, m2: f64) -> f64 {
        match self {
            Family::Separable(p) => 0.5 * p.r * a * a + p.f1.eval(x) + p.kf1 * x * m1 + p.kf2 * x * m2,
            Family::MeanField1d(p) => {
                0.5 * a * a - a * p.f0(x, m1, m2) + p.f1.eval(x) + p.kf1 * x * m1 + p.kf2 * x * m2
            }
            Family::Ll(p) => {
                0.5 * a * a - p.c1 * a * m2 + p.c2 * x * m1 + p.c3 * x * m2 + p.f1.eval(x)
            }
            Family::Disp(p) | Family::Anti(p) => {
                0.5 * a * a - p.c * a * m2 - 0.5 * p.gamma * p.l0 * x * x
                    + p.f1.eval(x)
                    + p.k1 * x * m1
                    + p.k2 * x * m2
            }
        }
    }

    fn phi(&self, x: f64, p_: f64, m1: f64, m2: f64) -> f64 {
        match self {
            Family::Separable(p) => -p_ / p.r,
            Family::MeanField1d(p) => p.f0(x, m1, m2) + p_ * p.b0,
            Family::Ll(p) => p_ + p.c1 * m2,
            Family::Disp(p) | Family::Anti(p) => p_ + p.c * m2,
        }
    }

    fn h(&self, x: f64, p_: f64, m1: f64, m2: f64) -> f64 {
        match self {
            Family::Separable(p) => {
                -0.5 * p_ * p_ / p.r
                    + p_ * (p.b1.eval(x) + p.kb1 * m1 + p.kb2 * m2)
                    + p.f1.eval(x)
                    + p.kf1 * x * m1
                    + p.kf2 * x * m2
            }
            Family::MeanField1d(p) => {
                let phi = p.f0(x, m1, m2) + p_ * p.b0;
                -0.5 * phi * phi
                    + p_ * (p.b1.eval(x) + p.kb1 * m1 + p.kb2 * m2)
                    + p.f1.eval(x)
                    + p.kf1 * x * m1
                    + p.kf2 * x * m2
            }
            Family::Ll(p) => {
                let s = p.c1 * m2 + p_;
                -0.5 * s * s
                    + p_ * (p.b1_m1.eval(m1) + p.b1_m2.eval(m2) + p.b2.eval(x))
                    + p.c2 * x * m1
                    + p.c3 * x * m2
                    + p.f1.eval(x)
            }
            Family::Disp(p) | Family::Anti(p) => {
                let s = p.c * m2 + p_;
                -0.5 * s * s - p.l0 * x * p_
                    + p_ * (p.b1_m1.eval(m1) + p.b1_m2.eval(m2))
                    - 0.5 * p.gamma * p.l0 * x * x
                    + p.f1.eval(x)
                    + p.k1 * x * m1
                    + p.k2 * x * m2
            }
        }
    }

    fn h_p(&self, x: f64, p_: f64, m1: f64, m2: f64) -> f64 {
        let a = self.phi(x, p_, m1, m2);
        self.b(x, a, m1, m2)
    }

    /// Controls of Phi(rho) given states, momenta and weights.
    fn fixed_point(&self, rho: &JointEmpiricalMeasure) -> Result<Vec<f64>, ModelError> {
        let xs = rho.states();
        let etas = rho.seconds();
        let e = rho.second_mean(0);
        Ok(match self {
            Family::Separable(p) => etas.iter().map(|v| -v / p.r).collect(),
            Family::MeanField1d(p) => {
                let m1 = rho.state_mean(0);
                let w = rho.weights();
                let psi = |m: f64| -> f64 {
                    xs.iter().zip(w).map(|(x, wi)| wi * p.f0(*x, m1, m)).sum::<f64>() + p.b0 * e
                };
                let mut m = e;
                let mut converged = false;
                let mut res = f64::INFINITY;
                for _ in 0..FIXED_POINT_MAX_ITER {
                    let r = psi(m) - m;
                    res = r.abs();
                    if res <= FIXED_POINT_TOL {
                        converged = true;
                        break;
                    }
                    let h = 1e-6 * m.abs().max(1.0);
                    let slope = (psi(m + h) - psi(m - h)) / (2.0 * h);
                    if slope > 1.0 - p.eps {
                        return Err(ModelError::Contraction(slope));
                    }
                    m += r / (1.0 - slope);
                }
                if !converged {
                    return Err(ModelError::FixedPoint { iterations: FIXED_POINT_MAX_ITER, residual: res });
                }
                xs.iter().zip(etas).map(|(x, eta)| p.f0(*x, m1, m) + p.b0 * eta).collect()
            }
            Family::Ll(p) => {
                let shift = p.c1_hat() * e;
                etas.iter().map(|v| v + shift).collect()
            }
            Family::Disp(p) | Family::Anti(p) => {
                let shift = p.c_hat() * e;
                etas.iter().map(|v| v + shift).collect()
            }
        })
    }

    fn hat_closed(&self, x: f64, p_: f64, rho: &JointEmpiricalMeasure) -> Option<HatDerivatives> {
        let m1 = rho.state_mean(0);
        let e = rho.second_mean(0);
        match self {
            Family::MeanField1d(_) => None,
            Family::Separable(p) => {
                let m2 = -e / p.r;
                Some(HatDerivatives {
                    hp: -p_ / p.r + p.b1.eval(x) + p.kb1 * m1 + p.kb2 * m2,
                    hpp: -1.0 / p.r,
                    hxx: p_ * p.b1.d2(x) + p.f1.d2(x),
                    hxp: p.b1.d1(x),
                    hx_rho1: p.kf1,
                    hx_rho2: -p.kf2 / p.r,
                    hp_rho1: p.kb1,
                    hp_rho2: -p.kb2 / p.r,
                })
            }
            Family::Ll(p) => {
                let m2 = p.c1_bar() * e;
                Some(HatDerivatives {
                    hp: -(p.c1_hat() * e + p_) + p.b1_m1.eval(m1) + p.b1_m2.eval(m2) + p.b2.eval(x),
                    hpp: -1.0,
                    hxx: p_ * p.b2.d2(x) + p.f1.d2(x),
                    hxp: p.b2.d1(x),
                    hx_rho1: p.c2,
                    hx_rho2: p.c3_hat(),
                    hp_rho1: p.b1_m1.d1(m1),
                    hp_rho2: p.c1_bar() * p.b1_m2.d1(m2) - p.c1_hat(),
                })
            }
            Family::Disp(p) | Family::Anti(p) => {
                let m2 = p.c_bar() * e;
                Some(HatDerivatives {
                    hp: -(p.c_hat() * e + p_) - p.l0 * x + p.b1_m1.eval(m1) + p.b1_m2.eval(m2),
                    hpp: -1.0,
                    hxx: -p.gamma * p.l0 + p.f1.d2(x),
                    hxp: -p.l0,
                    hx_rho1: p.k1,
                    hx_rho2: p.c_bar() * p.k2,
                    hp_rho1: p.b1_m1.d1(m1),
                    hp_rho2: p.c_bar() * p.b1_m2.d1(m2) - p.c_hat(),
                })
            }
        }
    }
}

pub type ControlFn = Arc<dyn Fn(f64, f64, &JointEmpiricalMeasure) -> f64 + Send + Sync>;

/// User-supplied b, f and optionally phi; phi falls back to golden-section
/// search and Phi to iteration of the best-response map.
#[derive(Clone)]
pub struct CustomModel {
    pub label: String,
    pub b: ControlFn,
    pub f: ControlFn,
    pub phi: Option<ControlFn>,
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel")
            .field("label", &self.label)
            .field("phi", &self.phi.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    Family(Family),
    Custom(CustomModel),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HatDerivatives {
    pub hp: f64,
    pub hpp: f64,
    pub hxx: f64,
    pub hxp: f64,
    pub hx_rho1: f64,
    pub hx_rho2: f64,
    pub hp_rho1: f64,
    pub hp_rho2: f64,
}

impl HatDerivatives {
    pub fn max_abs_diff(&self, o: &HatDerivatives) -> f64 {
        [
            self.hp - o.hp,
            self.hpp - o.hpp,
            self.hxx - o.hxx,
            self.hxp - o.hxp,
            self.hx_rho1 - o.hx_rho1,
            self.hx_rho2 - o.hx_rho2,
            self.hp_rho1 - o.hp_rho1,
            self.hp_rho2 - o.hp_rho2,
        ]
        .iter()
        .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub terminal: Terminal,
    pub beta: f64,
    pub a_max: f64,
}

impl ModelSpec {
    pub fn from_family(family: Family, terminal: Terminal) -> Result<Self, ModelError> {
        family.validate()?;
        Ok(ModelSpec { kind: ModelKind::Family(family), terminal, beta: 0.0, a_max: 50.0 })
    }

    /// b = a, f = a^2/2: no mean-field interaction at all.
    pub fn free(terminal: Terminal) -> Self {
        ModelSpec {
            kind: ModelKind::Family(Family::Separable(SeparableParams::default())),
            terminal,
            beta: 0.0,
            a_max: 50.0,
        }
    }

    pub fn custom(model: CustomModel, terminal: Terminal) -> Self {
        ModelSpec { kind: ModelKind::Custom(model), terminal, beta: 0.0, a_max: 50.0 }
    }

    pub fn family(&self) -> Option<&Family> {
        match &self.kind {
            ModelKind::Family(f) => Some(f),
            ModelKind::Custom(_) => None,
        }
    }

    /// Tag of a family with analytic derivatives of the reduced Hamiltonian.
    pub fn closed_form_tag(&self) -> Option<&'static str> {
        match &self.kind {
            ModelKind::Family(Family::MeanField1d(_)) | ModelKind::Custom(_) => None,
            ModelKind::Family(f) => Some(f.tag()),
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ModelKind::Family(f) => f.tag().to_string(),
            ModelKind::Custom(c) => c.label.clone(),
        }
    }

    pub fn b(&self, x: f64, a: f64, nu: &JointEmpiricalMeasure) -> f64 {
        match &self.kind {
            ModelKind::Family(f) => f.b(x, a, nu.state_mean(0), nu.second_mean(0)),
            ModelKind::Custom(c) => (c.b)(x, a, nu),
        }
    }

    pub fn f(&self, x: f64, a: f64, nu: &JointEmpiricalMeasure) -> f64 {
        match &self.kind {
            ModelKind::Family(f) => f.f(x, a, nu.state_mean(0), nu.second_mean(0)),
            ModelKind::Custom(c) => (c.f)(x, a, nu),
        }
    }

    pub fn g(&self, x: f64, mu: &EmpiricalMeasure) -> f64 {
        self.terminal.eval(x, mu)
    }

    /// h(x, p, nu, a) = p b + f.
    pub fn h(&self, x: f64, p: f64, nu: &JointEmpiricalMeasure, a: f64) -> f64 {
        p * self.b(x, a, nu) + self.f(x, a, nu)
    }

    pub fn minimizer_phi(&self, x: f64, p: f64, nu: &JointEmpiricalMeasure) -> Result<f64, ModelError> {
        let a = match &self.kind {
            ModelKind::Family(f) => f.phi(x, p, nu.state_mean(0), nu.second_mean(0)),
            ModelKind::Custom(c) => match &c.phi {
                Some(phi) => phi(x, p, nu),
                None => golden_section(|a| self.h(x, p, nu, a), -self.a_max, self.a_max)?,
            },
        };
        if a.is_finite() {
            Ok(a)
        } else {
            Err(ModelError::NonFinite("phi"))
        }
    }

    pub fn hamiltonian(&self, x: f64, p: f64, nu: &JointEmpiricalMeasure) -> Result<f64, ModelError> {
        let v = match &self.kind {
            ModelKind::Family(f) => f.h(x, p, nu.state_mean(0), nu.second_mean(0)),
            ModelKind::Custom(_) => {
                let a = self.minimizer_phi(x, p, nu)?;
                self.h(x, p, nu, a)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite("H"))
        }
    }

    /// Evaluation context with the measure summarised once.
    pub fn freeze<'a>(&'a self, nu: &'a JointEmpiricalMeasure) -> Frozen<'a> {
        Frozen { spec: self, nu, m1: nu.state_mean(0), m2: nu.second_mean(0) }
    }

    /// Controls alpha_i = phi(xi_i, eta_i, nu): the map I^{xi,eta}.
    pub fn best_response(
        &self,
        rho: &JointEmpiricalMeasure,
        nu: &JointEmpiricalMeasure,
    ) -> Result<JointEmpiricalMeasure, ModelError> {
        let fr = self.freeze(nu);
        let a: Vec<f64> = rho
            .states()
            .iter()
            .zip(rho.seconds())
            .map(|(x, p)| fr.phi(*x, *p))
            .collect::<Result<_, _>>()?;
        Ok(rho.with_seconds(a)?)
    }

    pub fn fixed_point_phi(&self, rho: &JointEmpiricalMeasure) -> Result<JointEmpiricalMeasure, ModelError> {
        if rho.dim() != 1 {
            return Err(ModelError::InvalidParameter("models are one-dimensional".into()));
        }
        match &self.kind {
            ModelKind::Family(f) => Ok(rho.with_seconds(f.fixed_point(rho)?)?),
            ModelKind::Custom(_) => {
                let mut nu = rho.clone();
                let mut res = f64::INFINITY;
                for _ in 0..FIXED_POINT_MAX_ITER {
                    let next = self.best_response(rho, &nu)?;
                    res = next
                        .seconds()
                        .iter()
                        .zip(nu.seconds())
                        .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
                    nu = next;
                    if res <= FIXED_POINT_TOL {
                        return Ok(nu);
                    }
                }
                Err(ModelError::FixedPoint { iterations: FIXED_POINT_MAX_ITER, residual: res })
            }
        }
    }

    /// Sorted-quantile distance between the control marginals of
    /// I^{xi,eta}(nu) and nu.
    pub fn fixed_point_residual(
        &self,
        rho: &JointEmpiricalMeasure,
        nu: &JointEmpiricalMeasure,
    ) -> Result<f64, ModelError> {
        let next = self.best_response(rho, nu)?;
        Ok(crate::measures::sorted_distance(next.seconds(), nu.seconds()))
    }

    /// H(x, p, Phi(rho)).
    pub fn hat_h(&self, x: f64, p: f64, rho: &JointEmpiricalMeasure) -> Result<f64, ModelError> {
        let nu = self.fixed_point_phi(rho)?;
        self.hamiltonian(x, p, &nu)
    }

    /// Derivatives of the reduced Hamiltonian at (x, p, rho); the rho-entries
    /// are Lions derivatives at the support point of atom j.
    pub fn hat_derivatives(
        &self,
        x: f64,
        p: f64,
        rho: &JointEmpiricalMeasure,
        j: usize,
    ) -> Result<HatDerivatives, ModelError> {
        if let ModelKind::Family(f) = &self.kind {
            if let Some(d) = f.hat_closed(x, p, rho) {
                return Ok(d);
            }
        }
        self.hat_derivatives_fd(x, p, rho, j)
    }

    /// As [`Self::hat_derivatives`] with the atom located by its coordinates.
    pub fn hat_derivatives_at(
        &self,
        x: f64,
        p: f64,
        rho: &JointEmpiricalMeasure,
        xt: f64,
        pt: f64,
    ) -> Result<HatDerivatives, ModelError> {
        let j = rho
            .states()
            .iter()
            .zip(rho.seconds())
            .position(|(a, b)| *a == xt && *b == pt)
            .ok_or(ModelError::NotSupportPoint(xt, pt))?;
        self.hat_derivatives(x, p, rho, j)
    }

    /// Central finite differences; rho-derivatives perturb atom j and divide
    /// by its weight.
    pub fn hat_derivatives_fd(
        &self,
        x: f64,
        p: f64,
        rho: &JointEmpiricalMeasure,
        j: usize,
    ) -> Result<HatDerivatives, ModelError> {
        let nu = self.fixed_point_phi(rho)?;
        let hh = |x: f64, p: f64, nu: &JointEmpiricalMeasure| self.hamiltonian(x, p, nu);
        let h1 = FD_STEP_XP * p.abs().max(1.0);
        let hp = (hh(x, p + h1, &nu)? - hh(x, p - h1, &nu)?) / (2.0 * h1);
        let hs = FD_STEP_SECOND;
        let sp = hs * p.abs().max(1.0);
        let sx = hs * x.abs().max(1.0);
        let h0 = hh(x, p, &nu)?;
        let hpp = (hh(x, p + sp, &nu)? - 2.0 * h0 + hh(x, p - sp, &nu)?) / (sp * sp);
        let hxx = (hh(x + sx, p, &nu)? - 2.0 * h0 + hh(x - sx, p, &nu)?) / (sx * sx);
        let hxp = (hh(x + sx, p + sp, &nu)? - hh(x + sx, p - sp, &nu)? - hh(x - sx, p + sp, &nu)?
            + hh(x - sx, p - sp, &nu)?)
            / (4.0 * sx * sp);
        let dx = |nu: &JointEmpiricalMeasure| -> Result<f64, ModelError> {
            Ok((hh(x + sx, p, nu)? - hh(x - sx, p, nu)?) / (2.0 * sx))
        };
        let dp = |nu: &JointEmpiricalMeasure| -> Result<f64, ModelError> {
            Ok((hh(x, p + sp, nu)? - hh(x, p - sp, nu)?) / (2.0 * sp))
        };
        let k = FD_STEP_PARTICLE;
        let wj = rho.weights()[j];
        let mut out = [0.0; 4];
        for (slot, second) in [(0usize, false), (1, true)] {
            let plus = self.fixed_point_phi(&rho.bumped(j, 0, second, k))?;
            let minus = self.fixed_point_phi(&rho.bumped(j, 0, second, -k))?;
            out[slot] = (dx(&plus)? - dx(&minus)?) / (2.0 * k * wj);
            out[slot + 2] = (dp(&plus)? - dp(&minus)?) / (2.0 * k * wj);
        }
        Ok(HatDerivatives {
            hp,
            hpp,
            hxx,
            hxp,
            hx_rho1: out[0],
            hx_rho2: out[1],
            hp_rho1: out[2],
            hp_rho2: out[3],
        })
    }

    /// Checks b(x, phi, nu) = dH/dp and f(x, phi, nu) = H - p dH/dp on seeded
    /// random (x, p, nu), with dH/dp by central differences.
    pub fn verify_envelope_identities(&self, sample_count: usize, seed: u64) -> ConditionReport {
        const TOL: f64 = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut witness = None;
        let mut error = None;
        for s in 0..sample_count {
            let n = 8;
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let al: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = rng.random_range(-2.0..2.0);
            let p = rng.random_range(-2.0..2.0);
            let nu = match JointEmpiricalMeasure::from_pairs(&xs, &al) {
                Ok(v) => v,
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            };
            let r = (|| -> Result<f64, ModelError> {
                let a = self.minimizer_phi(x, p, &nu)?;
                let h = FD_STEP_XP;
                let hp = (self.hamiltonian(x, p + h, &nu)? - self.hamiltonian(x, p - h, &nu)?) / (2.0 * h);
                let r1 = (self.b(x, a, &nu) - hp).abs();
                let r2 = (self.f(x, a, &nu) - (self.hamiltonian(x, p, &nu)? - p * hp)).abs();
                Ok(r1.max(r2))
            })();
            match r {
                Ok(r) => {
                    if r > worst {
                        worst = r;
                        if r > TOL {
                            witness = Some(serde_json::json!({"sample": s, "x": x, "p": p, "residual": r}));
                        }
                    }
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let mut rep = ConditionReport::new("envelope_identities", sample_count, -worst, TOL);
        rep.metrics.insert("max_residual".into(), worst);
        if let Some(e) = error {
            rep.verdict = Verdict::Fail;
            rep.notes.push(e);
        } else if worst > TOL {
            rep.verdict = Verdict::Fail;
            rep.witness = witness;
        }
        rep
    }
}

/// Model evaluation against a fixed measure nu.
pub struct Frozen<'a> {
    spec: &'a ModelSpec,
    nu: &'a JointEmpiricalMeasure,
    m1: f64,
    m2: f64,
}

impl Frozen<'_> {
    pub fn h(&self, x: f64, p: f64) -> Result<f64, ModelError> {
        match &self.spec.kind {
            ModelKind::Family(f) => Ok(f.h(x, p, self.m1, self.m2)),
            ModelKind::Custom(_) => self.spec.hamiltonian(x, p, self.nu),
        }
    }

    /// dH/dp = b(x, phi(x, p, nu), nu).
    pub fn h_p(&self, x: f64, p: f64) -> Result<f64, ModelError> {
        match &self.spec.kind {
            ModelKind::Family(f) => Ok(f.h_p(x, p, self.m1, self.m2)),
            ModelKind::Custom(_) => {
                let h = FD_STEP_XP * p.abs().max(1.0);
                Ok((self.h(x, p + h)? - self.h(x, p - h)?) / (2.0 * h))
            }
        }
    }

    pub fn phi(&self, x: f64, p: f64) -> Result<f64, ModelError> {
        match &self.spec.kind {
            ModelKind::Family(f) => Ok(f.phi(x, p, self.m1, self.m2)),
            ModelKind::Custom(_) => self.spec.minimizer_phi(x, p, self.nu),
        }
    }
}

/// Minimizer of a unimodal function on [lo, hi]; fails if it sits on the
/// boundary of the bracket.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64, ModelError> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-11 * (1.0 + c.abs()) {
            break;
        }
        if !fc.is_finite() || !fd.is_finite() {
            return Err(ModelError::Minimizer("non-finite objective".into()));
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let m = 0.5 * (a + b);
    let edge = 1e-6 * (hi - lo);
    if m - lo < edge || hi - m < edge {
        return Err(ModelError::Minimizer(format!("minimizer at bracket edge {m}")));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ll_example() -> ModelSpec {
        ModelSpec::from_family(
            Family::Ll(LlParams { c1: 0.5, c2: 1.0, c3: 0.5, ..Default::default() }),
            Terminal::default(),
        )
        .unwrap()
    }

    fn zero_mean_nu() -> JointEmpiricalMeasure {
        JointEmpiricalMeasure::from_pairs(&[-1.0, 1.0], &[2.0, -2.0]).unwrap()
    }

    #[test]
    fn ll_hamiltonian_value() {
        let m = ll_example();
        let h = m.hamiltonian(1.0, 1.0, &zero_mean_nu()).unwrap();
        assert!((h + 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_minimizer() {
        let m = ModelSpec::free(Terminal::default());
        let nu = zero_mean_nu();
        for p in [-2.0, 0.0, 0.7] {
            assert_eq!(m.minimizer_phi(0.3, p, &nu).unwrap(), -p);
        }
    }

    #[test]
    fn meanfield_constant_f0() {
        let m = ModelSpec::from_family(
            Family::MeanField1d(MeanField1dParams { f0: [0.7, 0.0, 0.0, 0.0], ..Default::default() }),
            Terminal::default(),
        )
        .unwrap();
        let nu = zero_mean_nu();
        assert!((m.minimizer_phi(0.0, 1.25, &nu).unwrap() - 1.95).abs() < 1e-15);
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[0.2, 0.6]).unwrap();
        let fp = m.fixed_point_phi(&rho).unwrap();
        assert!((fp.second_mean(0) - (0.7 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn meanfield_contraction_example() {
        let m = ModelSpec::from_family(
            Family::MeanField1d(MeanField1dParams { f0: [0.0, 0.0, 1.0, -0.5], ..Default::default() }),
            Terminal::default(),
        )
        .unwrap();
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 2.0], &[0.0, 1.0]).unwrap();
        let fp = m.fixed_point_phi(&rho).unwrap();
        assert!((fp.second_mean(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ll_fixed_point_is_mean_shift() {
        let m = ll_example();
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let fp = m.fixed_point_phi(&rho).unwrap();
        assert_eq!(fp.seconds(), &[3.0, 4.0, 5.0]);
        assert!(m.fixed_point_residual(&rho, &fp).unwrap() < 1e-14);
    }

    #[test]
    fn ll_closed_form_derivatives() {
        let m = ModelSpec::from_family(
            Family::Ll(LlParams {
                c1: 0.5,
                c2: 0.05,
                c3: 0.1,
                b1_m2: Poly::new(&[0.0, 0.75]),
                ..Default::default()
            }),
            Terminal::default(),
        )
        .unwrap();
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[0.5, -0.1]).unwrap();
        let d = m.hat_derivatives(0.3, 0.2, &rho, 1).unwrap();
        assert_eq!(d.hpp, -1.0);
        assert_eq!(d.hx_rho1, 0.05);
        assert!((d.hx_rho2 - 0.2).abs() < 1e-15);
        assert!((d.hp_rho2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn anti_closed_form_derivatives() {
        let m = ModelSpec::from_family(
            Family::Anti(ShiftParams { c: 0.5, gamma: 1.0, l0: 6.0, ..Default::default() }),
            Terminal::default(),
        )
        .unwrap();
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[0.5, -0.1]).unwrap();
        let d = m.hat_derivatives(0.3, 0.2, &rho, 0).unwrap();
        assert_eq!(d.hxp, -6.0);
        assert_eq!(d.hxx, -6.0);
    }

    #[test]
    fn envelope_negative_control() {
        let wrong = CustomModel {
            label: "shifted phi".into(),
            b: Arc::new(|_, a, _| a),
            f: Arc::new(|_, a, _| 0.5 * a * a),
            phi: Some(Arc::new(|_, p, _| -p + 0.1)),
        };
        let m = ModelSpec::custom(wrong, Terminal::default());
        let rep = m.verify_envelope_identities(20, 3);
        assert_eq!(rep.verdict, Verdict::Fail);
        assert!(rep.witness.is_some());
        assert!(ModelSpec::free(Terminal::default()).verify_envelope_identities(20, 3).passed());
    }

    #[test]
    fn golden_section_finds_interior_minimum() {
        let a = golden_section(|a| (a - 1.3) * (a - 1.3), -10.0, 10.0).unwrap();
        assert!((a - 1.3).abs() < 1e-7);
        assert!(golden_section(|a| a, -1.0, 1.0).is_err());
    }

    #[test]
    fn poly_helpers() {
        let p = Poly::new(&[1.0, -2.0, 0.5, 0.0, 0.25]);
        assert_eq!(p.degree(), 4);
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 2.0 + 4.0);
        assert_eq!(p.d1(1.0), -2.0 + 1.0 + 1.0);
        assert_eq!(p.d2(1.0), 1.0 + 3.0);
        assert_eq!(p.inf_d2(), 1.0);
        assert_eq!(Poly::new(&[0.0, 3.0]).sup_abs_d1(), 3.0);
        assert!(Poly::new(&[0.0, 0.0, 1.0]).sup_abs_d1().is_infinite());
    }
}
