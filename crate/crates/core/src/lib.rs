//! Numerical laboratory for mean field games of controls: empirical measures,
//! model families, an equilibrium solver, monotonicity functionals, condition
//! checkers and propagation experiments.

pub mod calculus;
pub mod cli;
pub mod conditions;
pub mod config;
pub mod measures;
pub mod models;
pub mod monotonicity;
pub mod propagation;
pub mod report;
pub mod solver;

pub use measures::{EmpiricalMeasure, JointEmpiricalMeasure};
pub use models::{Family, ModelSpec, Terminal};
pub use report::{ConditionReport, Verdict};
