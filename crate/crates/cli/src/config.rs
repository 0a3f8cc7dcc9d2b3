//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use dru_core::eval::{Architecture, MetaSource, MethodKind, SweepPlan};
use dru_core::losses::{Direction, LossSpec};
use dru_core::nn::TrainConfig;
use dru_core::sampling::{default_covariates, BiasSpec, PopulationSpec};
use dru_core::seed;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_POPULATION: u64 = 1;
pub const SEED_SAMPLE: u64 = 2;
pub const SEED_TRAIN: u64 = 3;
pub const SEED_INIT_H: u64 = 4;
pub const SEED_INIT_ALPHA: u64 = 5;
pub const SEED_ORACLE: u64 = 6;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base of every random stream.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for sweeps; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub population: PopulationSpec,
    #[serde(default)]
    pub bias: BiasSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

/// Sampling bias per target. Absent vectors default to `Γ = 2` with
/// directions alternating `+1, −1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<Direction>>,
    #[serde(default = "default_n_sample")]
    pub n_sample: usize,
}

impl Default for BiasSection {
    fn default() -> Self {
        Self {
            gamma: None,
            direction: None,
            n_sample: default_n_sample(),
        }
    }
}

fn default_n_sample() -> usize {
    2000
}

/// What `train` fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_target")]
    pub target: String,
    /// Covariates fed to the networks, one-hot encoded. Defaults to the
    /// first sweep subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "default_loss")]
    pub loss: LossSpec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            target: default_target(),
            covariates: None,
            loss: default_loss(),
            hidden: None,
        }
    }
}

fn default_target() -> String {
    "y1".into()
}
fn default_loss() -> LossSpec<f64> {
    LossSpec::Squared
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Defaults to two three-way subsets of the default covariates, or the
    /// first three covariates of a custom list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsets: Option<Vec<Vec<String>>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default)]
    pub meta_source: MetaSource,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            subsets: None,
            methods: default_methods(),
            meta_source: MetaSource::default(),
            histogram_bins: default_bins(),
        }
    }
}

fn default_replicates() -> usize {
    10
}
fn default_subsets(population: &PopulationSpec) -> Vec<Vec<String>> {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    if population.covariates == default_covariates() {
        vec![names(&["gender", "age", "area"]), names(&["gender", "education", "past_vote"])]
    } else {
        vec![population.covariates.iter().take(3).map(|c| c.name.clone()).collect()]
    }
}
fn default_methods() -> Vec<MethodKind> {
    MethodKind::ALL.to_vec()
}
fn default_bins() -> usize {
    20
}

/// Random instances for `oracle`, plus any explicit cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    #[serde(default = "default_gamma_max")]
    pub gamma_max: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<OracleCase>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            instances: default_instances(),
            max_points: default_max_points(),
            gamma_max: default_gamma_max(),
            cases: Vec::new(),
        }
    }
}

fn default_instances() -> usize {
    100
}
fn default_max_points() -> usize {
    20
}
fn default_gamma_max() -> f64 {
    5.0
}

/// Largest instance the oracle accepts.
pub const ORACLE_MAX_POINTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCase {
    pub losses: Vec<f64>,
    /// Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    /// Residual sign of each atom.
    pub signs: Vec<Direction>,
    pub gamma: f64,
    pub direction: Direction,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fills defaults that depend on other sections, drops settings that do
    /// not affect outputs, and checks everything.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.population.seed != 0 || self.train.seed != 0 {
            return usage("section seeds are derived; set the top-level `seed` instead".into());
        }
        let n = self.population.n_targets;
        if self.bias.gamma.is_none() {
            self.bias.gamma = Some(vec![2.0; n]);
        }
        if self.bias.direction.is_none() {
            self.bias.direction = Some(
                (0..n)
                    .map(|i| if i % 2 == 0 { Direction::Up } else { Direction::Down })
                    .collect(),
            );
        }
        if self.sweep.subsets.is_none() {
            self.sweep.subsets = Some(default_subsets(&self.population));
        }
        if self.model.covariates.is_none() {
            self.model.covariates = self.sweep.subsets.as_ref().and_then(|s| s.first().cloned());
        }
        if self.jobs == Some(0) {
            return usage("jobs must be positive".into());
        }
        self.jobs = None;
        self.out = None;
        self.bias_spec(0).validate(n).map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.model.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.sweep_plan().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let schema = self.population.schema();
        schema.target_index(&self.model.target).map_err(|e| CliError::Usage(e.to_string()))?;
        schema.subset(self.model_covariates()).map_err(|e| CliError::Usage(e.to_string()))?;
        if self.model.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return usage("model hidden widths must be positive".into());
        }
        let o = &self.oracle;
        if o.max_points == 0 || o.max_points > ORACLE_MAX_POINTS {
            return usage(format!("oracle.max_points must be in 1..={ORACLE_MAX_POINTS}"));
        }
        if !(o.gamma_max >= 1.0 && o.gamma_max.is_finite()) {
            return usage("oracle.gamma_max must be finite and >= 1".into());
        }
        for (i, c) in o.cases.iter().enumerate() {
            if c.losses.is_empty() || c.losses.len() > ORACLE_MAX_POINTS {
                return usage(format!("oracle case {i} must have 1..={ORACLE_MAX_POINTS} points"));
            }
            if c.signs.len() != c.losses.len() || c.probs.as_ref().is_some_and(|p| p.len() != c.losses.len()) {
                return usage(format!("oracle case {i}: losses, probs and signs differ in length"));
            }
        }
        if self.sweep.histogram_bins == 0 {
            return usage("sweep.histogram_bins must be positive".into());
        }
        Ok(self)
    }

    pub fn bias_spec(&self, seed_value: u64) -> BiasSpec {
        BiasSpec {
            gamma: self.bias.gamma.clone().unwrap_or_default(),
            direction: self.bias.direction.clone().unwrap_or_default(),
            n_sample: self.bias.n_sample,
            seed: seed_value,
        }
    }

    pub fn model_covariates(&self) -> &[String] {
        self.model.covariates.as_deref().unwrap_or_default()
    }

    pub fn derived_seed(&self, label: u64) -> u64 {
        seed::derive(self.seed, &[label])
    }

    pub fn sweep_plan(&self) -> SweepPlan {
        SweepPlan {
            population: self.population.clone(),
            bias: self.bias_spec(0),
            replicates: self.sweep.replicates,
            subsets: self.sweep.subsets.clone().unwrap_or_default(),
            methods: self.sweep.methods.clone(),
            train: self.train.clone(),
            architecture: self.architecture.clone(),
            meta_source: self.sweep.meta_source,
            seed: self.seed,
        }
    }
}
