//! Empirical probability measures on R^d and R^d x R^d.
//!
//! Points are stored row-major in a flat buffer. Experiments only use d = 1
//! but nothing in the layout assumes it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("negative or non-finite weight at atom {0}")]
    BadWeight(usize),
    #[error("non-finite coordinate at atom {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("csv: {0}")]
    Csv(String),
}

fn check_weights(weights: &[f64]) -> Result<(), MeasureError> {
    if weights.is_empty() {
        return Err(MeasureError::Empty);
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(MeasureError::BadWeight(i));
        }
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(MeasureError::WeightSum(s));
    }
    Ok(())
}

fn check_points(points: &[f64], dim: usize) -> Result<(), MeasureError> {
    if let Some(k) = points.iter().position(|v| !v.is_finite()) {
        return Err(MeasureError::NonFinite(k / dim.max(1)));
    }
    Ok(())
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn is_uniform(weights: &[f64]) -> bool {
    let n = weights.len() as f64;
    weights.iter().all(|w| (w * n - 1.0).abs() <= 1e-9)
}

/// Weighted particle cloud on R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::Dimension("d must be positive".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(MeasureError::Dimension(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        check_weights(&weights)?;
        check_points(&points, dim)?;
        Ok(Self { dim, points, weights })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::Dimension("ragged point buffer".into()));
        }
        let n = points.len() / dim;
        Self::new(dim, points, uniform_weights(n))
    }

    /// Uniform cloud on the real line.
    pub fn from_points(points: &[f64]) -> Result<Self, MeasureError> {
        Self::uniform(1, points.to_vec())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat coordinate buffer, row-major.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        is_uniform(&self.weights)
    }

    /// Weighted mean of one coordinate.
    pub fn mean(&self, coord: usize) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.points[i * self.dim + coord])
            .sum()
    }

    /// Same weights, particle i moved to `x`.
    pub fn with_point(&self, i: usize, x: &[f64]) -> Self {
        let mut out = self.clone();
        out.points[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        out
    }

    /// Every particle displaced by `scale * dir[j]`.
    pub fn displaced(&self, dir: &[f64], scale: f64) -> Result<Self, MeasureError> {
        if dir.len() != self.points.len() {
            return Err(MeasureError::Dimension("direction does not match cloud".into()));
        }
        let points: Vec<f64> = self
            .points
            .iter()
            .zip(dir)
            .map(|(x, e)| x + scale * e)
            .collect();
        check_points(&points, self.dim)?;
        Ok(Self { dim: self.dim, points, weights: self.weights.clone() })
    }

    /// Attach a second component to every atom.
    pub fn pair(&self, seconds: Vec<f64>) -> Result<JointEmpiricalMeasure, MeasureError> {
        JointEmpiricalMeasure::new(self.dim, self.points.clone(), seconds, self.weights.clone())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MeasureError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x_{k}")).collect();
        header.push("weight".into());
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(self.weights[i]));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| MeasureError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MeasureError> {
        let (xs, seconds, weights, dim) = read_rows(r)?;
        if !seconds.is_empty() {
            return Err(MeasureError::Csv("unexpected a_* columns".into()));
        }
        Self::new(dim, xs, weights)
    }
}

/// Weighted cloud of (state, second) pairs on R^d x R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEmpiricalMeasure {
    dim: usize,
    states: Vec<f64>,
    seconds: Vec<f64>,
    weights: Vec<f64>,
}

impl JointEmpiricalMeasure {
    pub fn new(
        dim: usize,
        states: Vec<f64>,
        seconds: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::Dimension("d must be positive".into()));
        }
        let n = weights.len();
        if states.len() != dim * n || seconds.len() != dim * n {
            return Err(MeasureError::Dimension("state/second buffers do not match weights".into()));
        }
        check_weights(&weights)?;
        check_points(&states, dim)?;
        check_points(&seconds, dim)?;
        Ok(Self { dim, states, seconds, weights })
    }

    /// Uniform joint cloud on R x R.
    pub fn from_pairs(states: &[f64], seconds: &[f64]) -> Result<Self, MeasureError> {
        let n = states.len();
        Self::new(1, states.to_vec(), seconds.to_vec(), uniform_weights(n))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn seconds(&self) -> &[f64] {
        &self.seconds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        is_uniform(&self.weights)
    }

    pub fn state_mean(&self, coord: usize) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * self.states[i * self.dim + coord]).sum()
    }

    pub fn second_mean(&self, coord: usize) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * self.seconds[i * self.dim + coord]).sum()
    }

    /// Same atoms and weights with a new second component.
    pub fn with_seconds(&self, seconds: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(self.dim, self.states.clone(), seconds, self.weights.clone())
    }

    pub fn with_states(&self, states: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(self.dim, states, self.seconds.clone(), self.weights.clone())
    }

    /// Copy with one coordinate of atom i shifted: `second == false` moves
    /// the state component, otherwise the second component.
    pub fn bumped(&self, i: usize, coord: usize, second: bool, h: f64) -> Self {
        let mut out = self.clone();
        let k = i * self.dim + coord;
        if second {
            out.seconds[k] += h;
        } else {
            out.states[k] += h;
        }
        out
    }

    pub fn second_marginal(&self) -> EmpiricalMeasure {
        EmpiricalMeasure {
            dim: self.dim,
            points: self.seconds.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MeasureError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x_{k}")).collect();
        header.extend((0..self.dim).map(|k| format!("a_{k}")));
        header.push("weight".into());
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let s = &self.states[i * self.dim..(i + 1) * self.dim];
            let a = &self.seconds[i * self.dim..(i + 1) * self.dim];
            let mut row: Vec<String> = s.iter().chain(a).map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(self.weights[i]));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| MeasureError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MeasureError> {
        let (xs, seconds, weights, dim) = read_rows(r)?;
        if seconds.len() != xs.len() {
            return Err(MeasureError::Csv("missing a_* columns".into()));
        }
        Self::new(dim, xs, seconds, weights)
    }
}

/// pi_1 # nu.
pub fn first_marginal(joint: &JointEmpiricalMeasure) -> EmpiricalMeasure {
    EmpiricalMeasure {
        dim: joint.dim,
        points: joint.states.clone(),
        weights: joint.weights.clone(),
    }
}

/// Weighted power sum of one coordinate, k in {1, 2}.
pub fn moment(m: &EmpiricalMeasure, k: u32, coord: usize) -> Result<f64, MeasureError> {
    if !(1..=2).contains(&k) {
        return Err(MeasureError::Unsupported(format!("moment order {k}")));
    }
    if coord >= m.dim {
        return Err(MeasureError::Dimension(format!("coordinate {coord} of {}", m.dim)));
    }
    Ok((0..m.len())
        .map(|i| m.weights[i] * m.points[i * m.dim + coord].powi(k as i32))
        .sum())
}

/// W2 distance between two uniform clouds on the line via the sorted coupling.
pub fn flow_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if a.dim != 1 || b.dim != 1 {
        return Err(MeasureError::Unsupported("flow_distance needs d = 1".into()));
    }
    if a.len() != b.len() {
        return Err(MeasureError::Unsupported(format!(
            "clouds of different size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(MeasureError::Unsupported("non-uniform weights".into()));
    }
    Ok(sorted_distance(&a.points, &b.points))
}

/// Sorted-quantile W2 distance of two equal-length samples.
pub fn sorted_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let s: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
    (s / x.len() as f64).sqrt()
}

/// (1 - w) a + w b as concatenated supports.
pub fn mixture(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    w: f64,
) -> Result<EmpiricalMeasure, MeasureError> {
    if a.dim != b.dim {
        return Err(MeasureError::Dimension("mixing clouds of different dimension".into()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(MeasureError::Unsupported(format!("mixture weight {w}")));
    }
    let mut points = a.points.clone();
    points.extend_from_slice(&b.points);
    let mut weights: Vec<f64> = a.weights.iter().map(|v| v * (1.0 - w)).collect();
    weights.extend(b.weights.iter().map(|v| v * w));
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= s);
    EmpiricalMeasure::new(a.dim, points, weights)
}

/// Joint analogue of [`mixture`].
pub fn joint_mixture(
    a: &JointEmpiricalMeasure,
    b: &JointEmpiricalMeasure,
    w: f64,
) -> Result<JointEmpiricalMeasure, MeasureError> {
    if a.dim != b.dim {
        return Err(MeasureError::Dimension("mixing clouds of different dimension".into()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(MeasureError::Unsupported(format!("mixture weight {w}")));
    }
    let mut states = a.states.clone();
    states.extend_from_slice(&b.states);
    let mut seconds = a.seconds.clone();
    seconds.extend_from_slice(&b.seconds);
    let mut weights: Vec<f64> = a.weights.iter().map(|v| v * (1.0 - w)).collect();
    weights.extend(b.weights.iter().map(|v| v * w));
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= s);
    JointEmpiricalMeasure::new(a.dim, states, seconds, weights)
}

/// Stratified quantile resampling of a weighted cloud on the line back to
/// `n` uniform atoms: atom k sits at the quantile (k + 1/2) / n.
pub fn resample_stratified(m: &EmpiricalMeasure, n: usize) -> Result<EmpiricalMeasure, MeasureError> {
    if m.dim != 1 {
        return Err(MeasureError::Unsupported("resampling needs d = 1".into()));
    }
    if n == 0 {
        return Err(MeasureError::Empty);
    }
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.sort_by(|&i, &j| m.points[i].total_cmp(&m.points[j]));
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut it = idx.iter().peekable();
    let mut cur = idx[0];
    for k in 0..n {
        let q = (k as f64 + 0.5) / n as f64;
        while cum < q {
            match it.next() {
                Some(&i) => {
                    cur = i;
                    cum += m.weights[i];
                }
                None => break,
            }
        }
        out.push(m.points[cur]);
    }
    EmpiricalMeasure::uniform(1, out)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

fn csv_err(e: csv::Error) -> MeasureError {
    MeasureError::Csv(e.to_string())
}

type Rows = (Vec<f64>, Vec<f64>, Vec<f64>, usize);

fn read_rows<R: Read>(r: R) -> Result<Rows, MeasureError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let nx = header.iter().filter(|h| h.starts_with("x_")).count();
    let na = header.iter().filter(|h| h.starts_with("a_")).count();
    if nx == 0 || (na != 0 && na != nx) || header.iter().last() != Some("weight") {
        return Err(MeasureError::Csv(format!("bad header {header:?}")));
    }
    let (mut xs, mut seconds, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| MeasureError::Csv(e.to_string())))
            .collect::<Result<_, _>>()?;
        if vals.len() != nx + na + 1 {
            return Err(MeasureError::Csv("ragged row".into()));
        }
        xs.extend_from_slice(&vals[..nx]);
        seconds.extend_from_slice(&vals[nx..nx + na]);
        weights.push(vals[nx + na]);
    }
    Ok((xs, seconds, weights, nx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom_marginal() {
        let j = JointEmpiricalMeasure::from_pairs(&[1.0], &[2.0]).unwrap();
        assert_eq!(first_marginal(&j), EmpiricalMeasure::from_points(&[1.0]).unwrap());
    }

    #[test]
    fn two_atom_marginal() {
        let j = JointEmpiricalMeasure::from_pairs(&[0.0, 3.0], &[5.0, 7.0]).unwrap();
        let m = first_marginal(&j);
        assert_eq!(m.points(), &[0.0, 3.0]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn moments_of_two_atoms() {
        let m = EmpiricalMeasure::from_points(&[1.0, 3.0]).unwrap();
        assert_eq!(moment(&m, 1, 0).unwrap(), 2.0);
        assert_eq!(moment(&m, 2, 0).unwrap(), 5.0);
        let c = EmpiricalMeasure::from_points(&[-4.25]).unwrap();
        assert_eq!(moment(&c, 1, 0).unwrap(), -4.25);
        assert!(moment(&m, 3, 0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = EmpiricalMeasure::from_points(&[0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::from_points(&[1.0, 2.0]).unwrap();
        assert!((flow_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let z = EmpiricalMeasure::from_points(&[0.0; 5]).unwrap();
        let c = EmpiricalMeasure::from_points(&[-2.5; 5]).unwrap();
        assert!((flow_distance(&z, &c).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(flow_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn distance_rejects_bad_inputs() {
        let a = EmpiricalMeasure::from_points(&[0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::from_points(&[1.0, 2.0, 3.0]).unwrap();
        assert!(flow_distance(&a, &b).is_err());
        let w = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        assert!(flow_distance(&a, &w).is_err());
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::from_points(&[f64::NAN]).is_err());
    }

    #[test]
    fn resampling_preserves_uniform_cloud() {
        let m = EmpiricalMeasure::from_points(&[3.0, -1.0, 2.0, 0.5]).unwrap();
        let r = resample_stratified(&m, 4).unwrap();
        assert_eq!(r.points(), &[-1.0, 0.5, 2.0, 3.0]);
    }

    #[test]
    fn mixture_then_resample() {
        let a = EmpiricalMeasure::from_points(&[0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::from_points(&[1.0, 1.0]).unwrap();
        let m = mixture(&a, &b, 0.5).unwrap();
        assert_eq!(m.len(), 4);
        let r = resample_stratified(&m, 2).unwrap();
        assert_eq!(r.points(), &[0.0, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let j = JointEmpiricalMeasure::from_pairs(&[0.1, -0.3], &[2.0, 1e-7]).unwrap();
        let mut buf = Vec::new();
        j.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_0,a_0,weight"));
        assert_eq!(JointEmpiricalMeasure::read_csv(&buf[..]).unwrap(), j);
        let m = first_marginal(&j);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), m);
    }
}
