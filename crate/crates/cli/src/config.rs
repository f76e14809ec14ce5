//! Experiment configuration: file formats, defaults, validation and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tanreg::register::{ScheduleConfig, ScheduleKind};
use tanreg::{ModelKind, ParamVector, TransformModel};

use crate::CliError;

/// Where the reference pattern comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSource {
    /// Seed of a random 20-atom reference.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Pattern JSON file; takes precedence over `seed`.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

/// Overrides of the two-class classification protocol; absent fields keep its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub repetitions: Option<usize>,
    pub queries_per_repetition: Option<usize>,
    pub shared_atoms: Option<usize>,
    pub specific_atoms: Option<usize>,
    pub mix_range: Option<[f64; 2]>,
    pub noise: Option<f64>,
    pub target_ranges: Option<Vec<[f64; 2]>>,
    pub domain: Option<Vec<[f64; 2]>>,
    pub oracle_references: bool,
    /// Bounded-class trials: banks, with `queries_per_class` queries per class.
    pub banks: Option<usize>,
    pub queries_per_class: Option<usize>,
    pub deltas: Option<Vec<f64>>,
    pub noises: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: TransformModel,
    pub pattern: PatternSource,
    /// Noise norms as fractions of the reference norm.
    pub nus: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Realizations per sweep point, trials per bound check.
    pub trials: usize,
    pub schedule: ScheduleConfig,
    /// Target parameters of `register`; drawn from the seed when absent.
    pub target: Option<ParamVector>,
    /// Initial estimate; the identity when absent.
    pub initial: Option<ParamVector>,
    /// Known optimal parameters, for oracle schedules and error columns.
    pub lambda_o: Option<ParamVector>,
    /// Find `lambda_o` by brute-force projection instead.
    pub brute_force_oracle: bool,
    pub k_grid: usize,
    pub projection_grid: usize,
    pub classify: ClassifySection,
    pub seed: u64,
    /// Output CSV; stdout when absent. Not part of the config hash.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: TransformModel::standard(ModelKind::Translation2D),
            pattern: PatternSource { seed: Some(0), file: None },
            nus: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            rhos: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0],
            trials: 20,
            schedule: ScheduleConfig {
                kind: ScheduleKind::Geometric,
                rho1: Some(4.0),
                alpha: Some(0.5),
                floor: 0.3,
                levels: 16,
                rhos: None,
            },
            target: None,
            initial: None,
            lambda_o: None,
            brute_force_oracle: false,
            k_grid: 9,
            projection_grid: 9,
            classify: ClassifySection::default(),
            seed: 0,
            out: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    /// Reads JSON or TOML, chosen by extension (`.toml`, anything else JSON).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = self.model.dim();
        if self.nus.is_empty() {
            return Err(field("nus", "must not be empty"));
        }
        if self.nus.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(field("nus", "noise levels must be finite and >= 0"));
        }
        if self.rhos.is_empty() {
            return Err(field("rhos", "must not be empty"));
        }
        if self.rhos.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(field("rhos", "filter sizes must be finite and >= 0"));
        }
        if self.trials == 0 {
            return Err(field("trials", "must be at least 1"));
        }
        if self.schedule.levels == 0 {
            return Err(field("schedule.levels", "must be at least 1"));
        }
        if self.k_grid < 2 {
            return Err(field("k_grid", "needs at least 2 points per axis"));
        }
        if self.projection_grid < 2 {
            return Err(field("projection_grid", "needs at least 2 points per axis"));
        }
        for (name, v) in [("target", &self.target), ("initial", &self.initial), ("lambda_o", &self.lambda_o)] {
            if let Some(v) = v {
                if v.len() != d {
                    return Err(field(name, format!("has {} entries, the model has {d} parameters", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(field(name, "entries must be finite"));
                }
            }
        }
        if self.pattern.seed.is_none() && self.pattern.file.is_none() {
            return Err(field("pattern", "needs `seed` or `file`"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
