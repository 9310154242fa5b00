//! Experiment configuration files (TOML) and the objects built from them.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::AntiParams;
use crate::measures::EmpiricalMeasure;
use crate::models::{Family, ModelSpec, Terminal};
use crate::propagation::{PropagationConfig, PropagationKind};
use crate::solver::{Grid, PicardConfig, Problem};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default)]
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub t_end: f64,
    /// Time steps; the CFL-admissible minimum when absent.
    pub n_t: Option<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { x_min: -4.0, x_max: 4.0, n_x: 81, t_end: 0.5, n_t: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleSection {
    pub n: usize,
    pub mean: f64,
    pub spread: f64,
    pub seed: u64,
    /// Explicit initial positions; overrides n/mean/spread.
    pub points: Option<Vec<f64>>,
}

impl Default for ParticleSection {
    fn default() -> Self {
        ParticleSection { n: 16, mean: 0.0, spread: 0.5, seed: 1, points: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ll,
    Disp,
    Anti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub lambda: f64,
    #[serde(flatten)]
    pub propagation: PropagationConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { kind: ExperimentKind::Ll, lambda: 0.0, propagation: PropagationConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Envelope,
    FixedPoint,
    Ll,
    Matrix1,
    Disp,
    DispSufficient,
    Anti,
    Fmon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckSection {
    pub conditions: Vec<CheckName>,
    pub samples: usize,
    pub particles: usize,
    pub seed: u64,
    pub c0: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { conditions: vec![CheckName::Envelope], samples: 200, particles: 8, seed: 7, c0: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum ChainMap {
    /// The fixed point map of the configured model.
    Model,
    MeanShift { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSection {
    #[serde(flatten)]
    pub map: ChainMap,
    /// Coefficients of k0 E[a]^2 + k1 E[x a] + k2 E[x] E[a] + k3 E[a^3].
    pub functional: [f64; 4],
    pub pairs: usize,
    pub n: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            map: ChainMap::MeanShift { c: 0.5 },
            functional: [1.0, 0.5, -0.25, 0.1],
            pairs: 20,
            n: 16,
            seed: 11,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub terminal: Terminal,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub particles: ParticleSection,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub anti: Option<AntiParams>,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    /// Family constraints, lambda membership, particle count and CFL.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Invalid(s));
        self.model.family.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.beta != 0.0 {
            return bad("common noise (beta > 0) is not supported".into());
        }
        if let Some(a) = &self.anti {
            if a.lambda.validate().is_err() {
                return bad(format!("lambda vector {:?} not in D4", a.lambda));
            }
        }
        if self.experiment.kind == ExperimentKind::Anti && self.anti.is_none() {
            return bad("anti experiment needs an [anti] section".into());
        }
        if self.particles.points.as_ref().map_or(self.particles.n, |p| p.len()) == 0 {
            return bad("no particles".into());
        }
        if self.grid.n_x < 5 {
            return bad("n_x must be at least 5".into());
        }
        let p = &self.picard;
        if !(p.damping > 0.0 && p.damping <= 1.0) || p.max_iter == 0 {
            return bad("picard damping must lie in (0, 1] and max_iter be positive".into());
        }
        self.grid().validate(self.model.beta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        let g = &self.grid;
        let cfl = Grid::with_cfl(g.x_min, g.x_max, g.n_x, 0.0, g.t_end, self.model.beta);
        match g.n_t {
            Some(n_t) => Grid { n_t, ..cfl },
            None => cfl,
        }
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        let mut m = ModelSpec::from_family(self.model.family.clone(), self.terminal.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        m.beta = self.model.beta;
        Ok(m)
    }

    pub fn problem(&self) -> Result<Problem, ConfigError> {
        Problem::new(self.model()?, self.grid(), self.picard, self.seed).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Sorted initial particles.
    pub fn mu0(&self) -> Result<EmpiricalMeasure, ConfigError> {
        let p = &self.particles;
        let mut pts = match &p.points {
            Some(v) => v.clone(),
            None => {
                let d = Normal::new(p.mean, p.spread).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                (0..p.n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        pts.sort_by(f64::total_cmp);
        EmpiricalMeasure::from_points(&pts).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn propagation_kind(&self) -> Result<PropagationKind, ConfigError> {
        Ok(match self.experiment.kind {
            ExperimentKind::Ll => PropagationKind::Ll,
            ExperimentKind::Disp => PropagationKind::Disp { lambda: self.experiment.lambda },
            ExperimentKind::Anti => PropagationKind::Anti {
                params: self.anti.ok_or_else(|| ConfigError::Invalid("missing [anti] section".into()))?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LL: &str = r#"
seed = 2
[model]
family = "ll"
c1 = 0.5
c2 = 0.05
c3 = 0.1
b1_m2 = [0.0, 0.75]
[terminal]
k_xm = 0.5
[experiment]
kind = "ll"
stride = 8
"#;

    #[test]
    fn parses_ll() {
        let c = ExperimentConfig::from_toml(LL).unwrap();
        assert_eq!(c.seed, 2);
        assert!(matches!(c.model.family, Family::Ll(ref p) if p.c2 == 0.05));
        assert_eq!(c.experiment.propagation.stride, 8);
        assert_eq!(c.experiment.propagation.directions, 12);
        assert_eq!(c.mu0().unwrap().len(), 16);
        c.problem().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml(&LL.replace("c1 = 0.5", "c1 = 1.5")).is_err());
        assert!(ExperimentConfig::from_toml(&LL.replace("seed = 2", "seed = 2\nbogus = 1")).is_err());
        let short = format!("{LL}\n[grid]\nn_t = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&short), Err(ConfigError::Invalid(_))));
        let anti = LL.replace("kind = \"ll\"", "kind = \"anti\"");
        assert!(ExperimentConfig::from_toml(&anti).is_err());
    }
}
