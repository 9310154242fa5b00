//! Derivatives of functionals of empirical measures: Lions derivatives by
//! particle perturbation, the chain rule for measure-valued maps and
//! directional measure derivatives of the value gradient.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::measures::{joint_mixture, EmpiricalMeasure, JointEmpiricalMeasure, MeasureError};
use crate::models::{Family, ModelError, ModelKind, ModelSpec, FD_STEP_PARTICLE};

#[derive(Debug, Error)]
pub enum CalculusError {
    #[error("non-finite functional value")]
    NonFinite,
    #[error("Lions derivative needs uniform weights")]
    NonUniform,
    #[error("map {0} has no closed-form linear functional derivative")]
    MissingDerivative(String),
    #[error("functional {0} has no linear functional derivative")]
    MissingFunctionalDerivative(String),
    #[error("measures differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type StateFn = Arc<dyn Fn(&EmpiricalMeasure) -> f64 + Send + Sync>;
type JointFn = Arc<dyn Fn(&JointEmpiricalMeasure) -> f64 + Send + Sync>;
type JointLfd = Arc<dyn Fn(&JointEmpiricalMeasure, f64, f64) -> f64 + Send + Sync>;
type MapFn = Arc<dyn Fn(&JointEmpiricalMeasure) -> Result<JointEmpiricalMeasure, ModelError> + Send + Sync>;
type MapLfd = Arc<dyn Fn(&JointEmpiricalMeasure, f64, f64, &dyn Fn(f64, f64) -> f64) -> f64 + Send + Sync>;

/// Functional of a state measure.
#[derive(Clone)]
pub struct MeasureFunctional {
    pub label: String,
    pub eval: StateFn,
}

impl MeasureFunctional {
    pub fn new(label: &str, f: impl Fn(&EmpiricalMeasure) -> f64 + Send + Sync + 'static) -> Self {
        MeasureFunctional { label: label.into(), eval: Arc::new(f) }
    }
}

/// Functional of a joint measure together with its linear functional
/// derivative dU/dnu(nu, x, a).
#[derive(Clone)]
pub struct JointFunctional {
    pub label: String,
    pub eval: JointFn,
    pub lfd: Option<JointLfd>,
}

impl JointFunctional {
    pub fn new(
        label: &str,
        f: impl Fn(&JointEmpiricalMeasure) -> f64 + Send + Sync + 'static,
        lfd: impl Fn(&JointEmpiricalMeasure, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        JointFunctional { label: label.into(), eval: Arc::new(f), lfd: Some(Arc::new(lfd)) }
    }

    /// U(nu) = E_nu[a].
    pub fn second_mean() -> Self {
        Self::new("E[a]", |nu| nu.second_mean(0), |_, _, a| a)
    }

    /// U(nu) = c.
    pub fn constant(c: f64) -> Self {
        Self::new("const", move |_| c, |_, _, _| 0.0)
    }

    /// U(nu) = k0 E[a]^2 + k1 E[x a] + k2 E[x] E[a] + k3 E[a^3].
    pub fn polynomial(k: [f64; 4]) -> Self {
        let eval = move |nu: &JointEmpiricalMeasure| {
            let (mut ea, mut exa, mut ex, mut ea3) = (0.0, 0.0, 0.0, 0.0);
            for ((x, a), w) in nu.states().iter().zip(nu.seconds()).zip(nu.weights()) {
                ea += w * a;
                exa += w * x * a;
                ex += w * x;
                ea3 += w * a * a * a;
            }
            k[0] * ea * ea + k[1] * exa + k[2] * ex * ea + k[3] * ea3
        };
        let lfd = move |nu: &JointEmpiricalMeasure, x: f64, a: f64| {
            let ea = nu.second_mean(0);
            let ex = nu.state_mean(0);
            2.0 * k[0] * ea * a + k[1] * x * a + k[2] * (x * ea + ex * a) + k[3] * a * a * a
        };
        Self::new("polynomial", eval, lfd)
    }
}

/// Measure-valued map rho -> Phi(rho) with an optional pairing
/// (rho, x, p, psi) -> <dPhi/drho(rho, x, p), psi>.
#[derive(Clone)]
pub struct MeasureMap {
    pub label: String,
    pub eval: MapFn,
    pub closed_form_lderiv: Option<MapLfd>,
}

impl fmt::Debug for MeasureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureMap")
            .field("label", &self.label)
            .field("closed_form_lderiv", &self.closed_form_lderiv.is_some())
            .finish()
    }
}

impl MeasureMap {
    pub fn identity() -> Self {
        MeasureMap {
            label: "identity".into(),
            eval: Arc::new(|rho| Ok(rho.clone())),
            closed_form_lderiv: Some(Arc::new(|_, x, p, psi| psi(x, p))),
        }
    }

    /// L(xi, eta) -> L(xi, eta + c E[eta]).
    pub fn mean_shift(c: f64) -> Self {
        MeasureMap {
            label: format!("mean_shift({c})"),
            eval: Arc::new(move |rho| {
                let e = rho.second_mean(0);
                Ok(rho.with_seconds(rho.seconds().iter().map(|v| v + c * e).collect())?)
            }),
            closed_form_lderiv: Some(Arc::new(move |rho, x, p, psi| {
                let e = rho.second_mean(0);
                let h = FD_STEP_PARTICLE;
                let dpsi: f64 = rho
                    .states()
                    .iter()
                    .zip(rho.seconds())
                    .zip(rho.weights())
                    .map(|((xi, eta), w)| {
                        let q = eta + c * e;
                        w * (psi(*xi, q + h) - psi(*xi, q - h)) / (2.0 * h)
                    })
                    .sum();
                psi(x, p + c * e) + c * p * dpsi
            })),
        }
    }

    /// The fixed point map of a model, with a closed-form derivative for the
    /// families whose Phi is a pointwise map or a mean shift.
    pub fn from_model(model: &ModelSpec) -> Self {
        let m = model.clone();
        let eval: MapFn = Arc::new(move |rho| m.fixed_point_phi(rho));
        let lderiv: Option<MapLfd> = match &model.kind {
            ModelKind::Family(Family::Separable(p)) => {
                let r = p.r;
                Some(Arc::new(move |_, x, p, psi| psi(x, -p / r)))
            }
            ModelKind::Family(Family::Ll(p)) => MeasureMap::mean_shift(p.c1_hat()).closed_form_lderiv,
            ModelKind::Family(Family::Disp(p)) | ModelKind::Family(Family::Anti(p)) => {
                MeasureMap::mean_shift(p.c_hat()).closed_form_lderiv
            }
            _ => None,
        };
        MeasureMap { label: format!("Phi[{}]", model.label()), eval, closed_form_lderiv: lderiv }
    }
}

/// N-scaled central difference of F in the position of particle i, one entry
/// per coordinate.
pub fn lions_derivative(f: &MeasureFunctional, mu: &EmpiricalMeasure, i: usize) -> Result<Vec<f64>, CalculusError> {
    if !mu.is_uniform() {
        return Err(CalculusError::NonUniform);
    }
    let w = mu.weights()[i];
    let x0 = mu.point(i).to_vec();
    let mut out = Vec::with_capacity(mu.dim());
    for k in 0..mu.dim() {
        let h = FD_STEP_PARTICLE * x0[k].abs().max(1.0);
        let mut xp = x0.clone();
        xp[k] += h;
        let mut xm = x0.clone();
        xm[k] -= h;
        let v = ((f.eval)(&mu.with_point(i, &xp)) - (f.eval)(&mu.with_point(i, &xm))) / (2.0 * h * w);
        if !v.is_finite() {
            return Err(CalculusError::NonFinite);
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainRuleRecord {
    pub fd_value: f64,
    pub chain_value: f64,
    pub abs_error: f64,
}

/// Compares d/de U(Phi((1-e) rho + e rho')) at e = 0 with the chain-rule
/// pairing against rho' - rho.
///
/// The mixture parameter cannot go negative, so the derivative is a one-sided
/// difference with two Richardson extrapolation levels.
pub fn chain_rule_check(
    u: &JointFunctional,
    phi: &MeasureMap,
    rho: &JointEmpiricalMeasure,
    rho2: &JointEmpiricalMeasure,
) -> Result<ChainRuleRecord, CalculusError> {
    if rho.len() != rho2.len() {
        return Err(CalculusError::SizeMismatch(rho.len(), rho2.len()));
    }
    let lderiv = phi
        .closed_form_lderiv
        .as_ref()
        .ok_or_else(|| CalculusError::MissingDerivative(phi.label.clone()))?;
    let lfd = u.lfd.as_ref().ok_or_else(|| CalculusError::MissingFunctionalDerivative(u.label.clone()))?;

    let g = |e: f64| -> Result<f64, CalculusError> {
        let m = if e == 0.0 { rho.clone() } else { joint_mixture(rho, rho2, e)? };
        let v = (u.eval)(&(phi.eval)(&m)?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CalculusError::NonFinite)
        }
    };
    let h = 0.05;
    let g0 = g(0.0)?;
    let d = |s: f64| -> Result<f64, CalculusError> { Ok((g(s)? - g0) / s) };
    let (d1, d2, d4) = (d(h)?, d(h / 2.0)?, d(h / 4.0)?);
    let r1 = 2.0 * d2 - d1;
    let r2 = 2.0 * d4 - d2;
    let fd_value = (4.0 * r2 - r1) / 3.0;

    let nu = (phi.eval)(rho)?;
    let psi = |y: f64, a: f64| lfd(&nu, y, a);
    let pair = |m: &JointEmpiricalMeasure| -> f64 {
        m.states()
            .iter()
            .zip(m.seconds())
            .zip(m.weights())
            .map(|((x, p), w)| w * lderiv(rho, *x, *p, &psi))
            .sum()
    };
    let chain_value = pair(rho2) - pair(rho);
    Ok(ChainRuleRecord { fd_value, chain_value, abs_error: (fd_value - chain_value).abs() })
}

/// Directional measure derivative of a gradient field:
/// (g(mu + eps eta) - g(mu - eps eta)) / (2 eps) entrywise, where `solve`
/// returns the field at fixed evaluation points. The two solves run
/// concurrently.
pub fn value_measure_gradient<E, F>(
    solve: F,
    mu: &EmpiricalMeasure,
    eta: &[f64],
    eps: f64,
) -> Result<Vec<f64>, E>
where
    E: From<MeasureError> + Send,
    F: Fn(&EmpiricalMeasure) -> Result<Vec<f64>, E> + Sync,
{
    let plus = mu.displaced(eta, eps)?;
    let minus = mu.displaced(eta, -eps)?;
    let (a, b) = rayon::join(|| solve(&plus), || solve(&minus));
    let (a, b) = (a?, b?);
    Ok(a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * eps)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> EmpiricalMeasure {
        EmpiricalMeasure::from_points(&[-1.0, 0.25, 0.5, 2.0]).unwrap()
    }

    #[test]
    fn lions_of_mean() {
        let f = MeasureFunctional::new("mean", |m| m.mean(0));
        for i in 0..4 {
            assert!((lions_derivative(&f, &cloud(), i).unwrap()[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lions_of_second_moment() {
        let f = MeasureFunctional::new("m2", |m| m.points().iter().map(|x| x * x).sum::<f64>() / m.len() as f64);
        let mu = cloud();
        for i in 0..4 {
            let x = mu.point(i)[0];
            assert!((lions_derivative(&f, &mu, i).unwrap()[0] - 2.0 * x).abs() < 1e-8);
        }
    }

    #[test]
    fn lions_of_squared_mean() {
        let f = MeasureFunctional::new("mean^2", |m| m.mean(0).powi(2));
        let mu = cloud();
        let e = mu.mean(0);
        for i in 0..4 {
            assert!((lions_derivative(&f, &mu, i).unwrap()[0] - 2.0 * e).abs() < 1e-8);
        }
    }

    #[test]
    fn chain_rule_mean_shift_example() {
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let rho2 = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        let r = chain_rule_check(&JointFunctional::second_mean(), &MeasureMap::mean_shift(0.5), &rho, &rho2).unwrap();
        assert!((r.fd_value - 1.5).abs() < 1e-10);
        assert!((r.chain_value - 1.5).abs() < 1e-10);
    }

    #[test]
    fn chain_rule_constant() {
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let rho2 = JointEmpiricalMeasure::from_pairs(&[3.0, 1.0], &[1.0, -2.0]).unwrap();
        for phi in [MeasureMap::identity(), MeasureMap::mean_shift(0.5)] {
            let r = chain_rule_check(&JointFunctional::constant(2.0), &phi, &rho, &rho2).unwrap();
            assert_eq!(r.chain_value, 0.0);
            assert!(r.fd_value.abs() < 1e-12);
        }
    }

    #[test]
    fn missing_derivative_is_an_error() {
        let phi = MeasureMap { closed_form_lderiv: None, ..MeasureMap::identity() };
        let rho = JointEmpiricalMeasure::from_pairs(&[0.0], &[0.0]).unwrap();
        assert!(matches!(
            chain_rule_check(&JointFunctional::second_mean(), &phi, &rho, &rho),
            Err(CalculusError::MissingDerivative(_))
        ));
    }

    #[test]
    fn gradient_of_linear_field() {
        let mu = cloud();
        let xs = [0.0, 1.0, 3.0];
        let eta = [0.3, -0.1, 0.5, 1.0];
        let solve = |m: &EmpiricalMeasure| -> Result<Vec<f64>, MeasureError> { Ok(xs.iter().map(|_| m.mean(0)).collect()) };
        let d = value_measure_gradient(solve, &mu, &eta, 1e-3).unwrap();
        let mean_eta = eta.iter().sum::<f64>() / 4.0;
        for v in d {
            assert!((v - mean_eta).abs() < 1e-12);
        }
        let solve = |m: &EmpiricalMeasure| -> Result<Vec<f64>, MeasureError> {
            Ok(xs.iter().map(|x| m.mean(0).powi(2) + 0.0 * x).collect())
        };
        let d = value_measure_gradient(solve, &mu, &eta, 1e-3).unwrap();
        assert!((d[0] - 2.0 * mu.mean(0) * mean_eta).abs() < 1e-9);
    }
}
