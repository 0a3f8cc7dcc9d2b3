//! Synthetic populations and directional Γ-biased samples drawn from them.
//!
//! A population row carries categorical covariates and a one-hot vote over
//! the targets. [`biased_sample`] resamples a population so that, inside
//! every covariate cell, the density ratio between population and sample is
//! `Γ` on the `d` side of the outcome split and `Γ⁻¹` on the rest, with the
//! split placed so that a fraction `η(Γ)` of the cell's population mass gets
//! ratio `Γ`. Cell sizes are preserved in expectation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Direction, MetaInfo};
use crate::robustness::eta;
use crate::seed;

/// Sample rows a cell needs before it enters [`estimate_true_meta`].
pub const MIN_CELL_ROWS: usize = 30;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid population spec: {0}")]
    Config(String),
    #[error("invalid bias spec: {0}")]
    Bias(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("no cell has at least {min} sample rows")]
    NoEligibleCells { min: usize },
    #[error("target index {index} out of range for {targets} targets")]
    TargetIndex { index: usize, targets: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariate {
    pub name: String,
    pub levels: usize,
    /// Population share of each level; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<Vec<f64>>,
}

impl Covariate {
    pub fn new(name: &str, levels: usize) -> Self {
        Self {
            name: name.to_string(),
            levels,
            marginal: None,
        }
    }
}

/// Gender, age band, area, education, employment and past vote.
pub fn default_covariates() -> Vec<Covariate> {
    [
        ("gender", 2),
        ("age", 5),
        ("area", 4),
        ("education", 3),
        ("employment", 3),
        ("past_vote", 4),
    ]
    .into_iter()
    .map(|(n, l)| Covariate::new(n, l))
    .collect()
}

pub fn default_target_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("y{i}")).collect()
}

/// Covariate layout plus outcome column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<Covariate>,
    pub targets: Vec<String>,
}

impl Schema {
    pub fn n_cells(&self) -> u64 {
        self.covariates.iter().map(|c| c.levels as u64).product()
    }

    /// Mixed-radix cell index, first covariate most significant.
    pub fn cell_id(&self, levels: &[u8]) -> u64 {
        self.covariates
            .iter()
            .zip(levels)
            .fold(0u64, |acc, (c, &l)| acc * c.levels as u64 + l as u64)
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize, SamplingError> {
        self.covariates
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| SamplingError::Schema(format!("unknown covariate `{name}`")))
    }

    pub fn target_index(&self, name: &str) -> Result<usize, SamplingError> {
        self.targets
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| SamplingError::Schema(format!("unknown target `{name}`")))
    }

    /// Subset of covariates by name, in the order given.
    pub fn subset(&self, names: &[String]) -> Result<CovariateSubset, SamplingError> {
        if names.is_empty() {
            return Err(SamplingError::Schema("covariate subset is empty".into()));
        }
        let mut indices = Vec::with_capacity(names.len());
        for n in names {
            let i = self.covariate_index(n)?;
            if indices.contains(&i) {
                return Err(SamplingError::Schema(format!("covariate `{n}` listed twice")));
            }
            indices.push(i);
        }
        Ok(CovariateSubset {
            names: names.to_vec(),
            levels: indices.iter().map(|&i| self.covariates[i].levels).collect(),
            indices,
        })
    }
}

/// A chosen set of covariates: defines both coarse cells and model features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSubset {
    pub names: Vec<String>,
    indices: Vec<usize>,
    levels: Vec<usize>,
}

impl CovariateSubset {
    pub fn n_cells(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }

    /// Cell of a full covariate row within this subset's cross-tabulation.
    pub fn cell_of(&self, row: &[u8]) -> u64 {
        self.indices
            .iter()
            .zip(&self.levels)
            .fold(0u64, |acc, (&i, &l)| acc * l as u64 + row[i] as u64)
    }

    /// Subset levels of a cell, inverse of [`CovariateSubset::cell_of`].
    pub fn decode(&self, mut cell: u64) -> Vec<u8> {
        let mut out = vec![0u8; self.levels.len()];
        for (slot, &l) in out.iter_mut().zip(&self.levels).rev() {
            *slot = (cell % l as u64) as u8;
            cell /= l as u64;
        }
        out
    }

    /// Width of the one-hot encoding.
    pub fn width(&self) -> usize {
        self.levels.iter().sum()
    }

    pub fn encode_cell(&self, cell: u64) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        let mut offset = 0;
        for (&lvl, &n) in self.decode(cell).iter().zip(&self.levels) {
            x[offset + lvl as usize] = 1.0;
            offset += n;
        }
        x
    }

    pub fn encode_row(&self, row: &[u8]) -> Vec<f64> {
        self.encode_cell(self.cell_of(row))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub covariates: Vec<u8>,
    pub outcomes: Vec<u8>,
    pub cell_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub gamma: Vec<f64>,
    pub direction: Vec<Direction>,
    pub n_sample: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BiasSpec {
    pub fn uniform(n_targets: usize, gamma: f64, direction: Direction, n_sample: usize, seed: u64) -> Self {
        Self {
            gamma: vec![gamma; n_targets],
            direction: vec![direction; n_targets],
            n_sample,
            seed,
        }
    }

    pub fn validate(&self, n_targets: usize) -> Result<(), SamplingError> {
        let bad = |m: String| Err(SamplingError::Bias(m));
        if self.gamma.len() != n_targets || self.direction.len() != n_targets {
            return bad(format!(
                "need {n_targets} gamma and direction entries, got {} and {}",
                self.gamma.len(),
                self.direction.len()
            ));
        }
        for (t, (&g, &d)) in self.gamma.iter().zip(&self.direction).enumerate() {
            if !(g >= 1.0 && g.is_finite()) {
                return bad(format!("gamma for target {t} must be >= 1, got {g}"));
            }
            if g > 1.0 && d == Direction::None {
                return bad(format!("target {t} has gamma {g} but no direction"));
            }
        }
        if self.n_sample == 0 {
            return bad("n_sample must be positive".into());
        }
        Ok(())
    }
}

/// How a biased sample was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub bias: BiasSpec,
    pub target_index: usize,
    pub population_rows: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub rows: Vec<Row>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn target_mean(&self, target: usize) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        let hits: u64 = self.rows.iter().map(|r| r.outcomes[target] as u64).sum();
        hits as f64 / self.rows.len() as f64
    }

    /// Header: covariate names, target names, `cell_id`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SamplingError> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<&str> = self
            .schema
            .covariates
            .iter()
            .map(|c| c.name.as_str())
            .chain(self.schema.targets.iter().map(String::as_str))
            .chain(std::iter::once("cell_id"))
            .collect();
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for row in &self.rows {
            record.clear();
            record.extend(row.covariates.iter().map(u8::to_string));
            record.extend(row.outcomes.iter().map(u8::to_string));
            record.push(row.cell_id.to_string());
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads rows written by [`Dataset::write_csv`], checking them against
    /// `schema`. Extra columns are ignored.
    pub fn read_csv<R: Read>(r: R, schema: &Schema) -> Result<Self, SamplingError> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        let find = |name: &str, kind: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| {
                SamplingError::Schema(format!("missing {kind} column `{name}`"))
            })
        };
        let cov_cols = schema
            .covariates
            .iter()
            .map(|c| find(&c.name, "covariate"))
            .collect::<Result<Vec<_>, _>>()?;
        let target_cols = schema
            .targets
            .iter()
            .map(|t| find(t, "outcome"))
            .collect::<Result<Vec<_>, _>>()?;
        let cell_col = find("cell_id", "cell")?;

        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |col: usize| -> Result<u64, SamplingError> {
                rec.get(col)
                    .and_then(|v| v.trim().parse::<u64>().ok())
                    .ok_or_else(|| {
                        SamplingError::Schema(format!(
                            "row {}: column `{}` is not a non-negative integer",
                            line + 1,
                            &header[col]
                        ))
                    })
            };
            let mut covariates = Vec::with_capacity(cov_cols.len());
            for (c, &col) in schema.covariates.iter().zip(&cov_cols) {
                let v = field(col)?;
                if v >= c.levels as u64 {
                    return Err(SamplingError::Schema(format!(
                        "row {}: `{}` level {v} exceeds its {} levels",
                        line + 1,
                        c.name,
                        c.levels
                    )));
                }
                covariates.push(v as u8);
            }
            let mut outcomes = Vec::with_capacity(target_cols.len());
            for &col in &target_cols {
                let v = field(col)?;
                if v > 1 {
                    return Err(SamplingError::Schema(format!(
                        "row {}: outcome `{}` must be 0 or 1",
                        line + 1,
                        &header[col]
                    )));
                }
                outcomes.push(v as u8);
            }
            let cell_id = field(cell_col)?;
            if cell_id != schema.cell_id(&covariates) {
                return Err(SamplingError::Schema(format!(
                    "row {}: cell_id {cell_id} does not match its covariates",
                    line + 1
                )));
            }
            rows.push(Row {
                covariates,
                outcomes,
                cell_id,
            });
        }
        Ok(Self {
            schema: schema.clone(),
            rows,
            provenance: None,
        })
    }
}

fn default_n_population() -> usize {
    100_000
}
fn default_n_targets() -> usize {
    5
}
fn default_effect_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    #[serde(default = "default_covariates")]
    pub covariates: Vec<Covariate>,
    #[serde(default = "default_n_population")]
    pub n_population: usize,
    #[serde(default = "default_n_targets")]
    pub n_targets: usize,
    /// Outcome shares per cell (indexed by cell id), one entry per target.
    /// Synthesized from additive effects when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_means: Option<Vec<Vec<f64>>>,
    /// Spread of the synthesized per-level logit effects.
    #[serde(default = "default_effect_scale")]
    pub effect_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            covariates: default_covariates(),
            n_population: default_n_population(),
            n_targets: default_n_targets(),
            cell_means: None,
            effect_scale: default_effect_scale(),
            seed: 0,
        }
    }
}

impl PopulationSpec {
    pub fn schema(&self) -> Schema {
        Schema {
            covariates: self.covariates.clone(),
            targets: default_target_names(self.n_targets),
        }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: String| Err(SamplingError::Config(m));
        if self.covariates.is_empty() {
            return bad("at least one covariate is required".into());
        }
        for c in &self.covariates {
            if c.levels == 0 || c.levels > 255 {
                return bad(format!("covariate `{}` needs 1..=255 levels", c.name));
            }
            if let Some(m) = &c.marginal {
                let total: f64 = m.iter().sum();
                if m.len() != c.levels || m.iter().any(|&p| !(p >= 0.0)) || !(total > 0.0) {
                    return bad(format!("marginal of `{}` is not a valid distribution", c.name));
                }
            }
        }
        let mut names: Vec<&str> = self.covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("covariate names must be unique".into());
        }
        if self.n_targets == 0 || self.n_population == 0 {
            return bad("n_targets and n_population must be positive".into());
        }
        if !(self.effect_scale >= 0.0 && self.effect_scale.is_finite()) {
            return bad("effect_scale must be finite and non-negative".into());
        }
        if let Some(means) = &self.cell_means {
            if means.len() as u64 != self.schema().n_cells() {
                return bad(format!(
                    "cell_means has {} cells, schema has {}",
                    means.len(),
                    self.schema().n_cells()
                ));
            }
            for (cell, shares) in means.iter().enumerate() {
                if shares.len() != self.n_targets {
                    return bad(format!("cell {cell} has {} shares, expected {}", shares.len(), self.n_targets));
                }
                if shares.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                    return bad(format!("cell {cell} has a share outside [0, 1]"));
                }
                if shares.iter().sum::<f64>() > 1.0 + 1e-9 {
                    return bad(format!("cell {cell} shares sum above 1"));
                }
            }
        }
        Ok(())
    }

    /// Softmax over targets of a per-target base plus one uniform effect per
    /// covariate level.
    fn synthesize_cell_means(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let s = self.effect_scale;
        let base: Vec<f64> = (0..self.n_targets).map(|_| rng.gen_range(-0.5..=0.5)).collect();
        let effects: Vec<Vec<Vec<f64>>> = (0..self.n_targets)
            .map(|_| {
                self.covariates
                    .iter()
                    .map(|c| (0..c.levels).map(|_| s * rng.gen_range(-1.0..=1.0)).collect())
                    .collect()
            })
            .collect();
        let schema = self.schema();
        let subset = schema
            .subset(&self.covariates.iter().map(|c| c.name.clone()).collect::<Vec<_>>())
            .expect("full subset of own schema");
        (0..schema.n_cells())
            .map(|cell| {
                let lv = subset.decode(cell);
                let logits: Vec<f64> = (0..self.n_targets)
                    .map(|t| {
                        base[t]
                            + lv.iter()
                                .enumerate()
                                .map(|(k, &l)| effects[t][k][l as usize])
                                .sum::<f64>()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            })
            .collect()
    }
}

/// Draws `n_population` rows with independent covariates and a categorical
/// vote per row. Shares that sum below one leave the remainder unassigned.
pub fn generate_population(spec: &PopulationSpec) -> Result<Dataset, SamplingError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0x504f50]));
    let cell_means = match &spec.cell_means {
        Some(m) => m.clone(),
        None => spec.synthesize_cell_means(&mut rng),
    };
    let level_dists = spec
        .covariates
        .iter()
        .map(|c| match &c.marginal {
            Some(m) => WeightedIndex::new(m.clone()),
            None => WeightedIndex::new(vec![1.0; c.levels]),
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| SamplingError::Config(e.to_string()))?;
    let schema = spec.schema();

    let mut rows = Vec::with_capacity(spec.n_population);
    for _ in 0..spec.n_population {
        let covariates: Vec<u8> = level_dists.iter().map(|d| d.sample(&mut rng) as u8).collect();
        let cell_id = schema.cell_id(&covariates);
        let u: f64 = rng.gen();
        let mut outcomes = vec![0u8; spec.n_targets];
        let mut acc = 0.0;
        for (t, &share) in cell_means[cell_id as usize].iter().enumerate() {
            acc += share;
            if u < acc {
                outcomes[t] = 1;
                break;
            }
        }
        rows.push(Row {
            covariates,
            outcomes,
            cell_id,
        });
    }
    Ok(Dataset {
        schema,
        rows,
        provenance: None,
    })
}

/// Row indices grouped by cell, cells in ascending order.
fn rows_by_cell(data: &Dataset) -> BTreeMap<u64, Vec<usize>> {
    let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.rows.iter().enumerate() {
        cells.entry(r.cell_id).or_default().push(i);
    }
    cells
}

/// Selection weights `1/r` per population row for target `target`.
///
/// Within each cell the rows are ordered with the `d` side of the outcome
/// first (`y = 1` for `d = +1`), ties in random order. The first `η(Γ)` of
/// the cell's rows get `r = Γ`, the rest `r = Γ⁻¹`, and the row straddling
/// the boundary gets the mass-weighted mixture, so each cell's weights sum
/// to its row count.
pub fn selection_weights(
    population: &Dataset,
    gamma: f64,
    direction: Direction,
    target: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut weights = vec![1.0; population.len()];
    if gamma == 1.0 {
        return weights;
    }
    let eta = eta(gamma).expect("gamma validated");
    let favoured: u8 = if direction == Direction::Up { 1 } else { 0 };
    for rows in rows_by_cell(population).values() {
        let (mut first, mut second): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| population.rows[i].outcomes[target] == favoured);
        first.shuffle(rng);
        second.shuffle(rng);
        let boundary = eta * rows.len() as f64;
        let full = boundary.floor() as usize;
        let frac = boundary - full as f64;
        for (pos, &i) in first.iter().chain(&second).enumerate() {
            weights[i] = if pos < full {
                1.0 / gamma
            } else if pos == full {
                frac / gamma + (1.0 - frac) * gamma
            } else {
                gamma
            };
        }
    }
    weights
}

/// Importance-resamples `bias.n_sample` rows (with replacement) so that the
/// population-to-sample density ratio for `target_index` is bounded by
/// `bias.gamma[target_index]` and tilted in `bias.direction[target_index]`.
pub fn biased_sample(
    population: &Dataset,
    bias: &BiasSpec,
    target_index: usize,
) -> Result<Dataset, SamplingError> {
    let n_targets = population.schema.targets.len();
    if target_index >= n_targets {
        return Err(SamplingError::TargetIndex {
            index: target_index,
            targets: n_targets,
        });
    }
    bias.validate(n_targets)?;
    if population.is_empty() {
        return Err(SamplingError::Config("population is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(bias.seed, &[0x534d50, target_index as u64]));
    let gamma = bias.gamma[target_index];
    let weights = selection_weights(population, gamma, bias.direction[target_index], target_index, &mut rng);
    let picker = WeightedIndex::new(&weights).map_err(|e| SamplingError::Bias(e.to_string()))?;
    let rows: Vec<Row> = (0..bias.n_sample)
        .map(|_| population.rows[picker.sample(&mut rng)].clone())
        .collect();

    let mut warnings = Vec::new();
    let sampled: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.cell_id).collect();
    let empty = rows_by_cell(population)
        .keys()
        .filter(|c| !sampled.contains(c))
        .count();
    if empty > 0 {
        warnings.push(format!("{empty} populated cells have no sampled rows"));
    }
    Ok(Dataset {
        schema: population.schema.clone(),
        rows,
        provenance: Some(Provenance {
            bias: bias.clone(),
            target_index,
            population_rows: population.len(),
            warnings,
        }),
    })
}

/// Outcome frequencies of one cell in both datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct CellComparison {
    pub cell_id: u64,
    pub population_rows: usize,
    pub sample_rows: usize,
    /// Share of `y = 1` in the population cell.
    pub population_share: f64,
    /// Share of `y = 1` in the sample cell.
    pub sample_share: f64,
}

impl CellComparison {
    /// `dQ/dP` for outcome class `y`, `None` when the sample has no such rows.
    pub fn ratio(&self, y: u8) -> Option<f64> {
        let (q, p) = if y == 1 {
            (self.population_share, self.sample_share)
        } else {
            (1.0 - self.population_share, 1.0 - self.sample_share)
        };
        (p > 0.0).then(|| q / p)
    }
}

/// How rows are grouped into cells when comparing datasets.
#[derive(Debug, Clone, Copy)]
pub enum Cells<'a> {
    /// The full cross-tabulation of the schema.
    Full,
    /// The cross-tabulation of a covariate subset.
    Subset(&'a CovariateSubset),
    /// A single cell holding every row.
    Pooled,
}

impl Cells<'_> {
    fn cell_of(&self, row: &Row) -> u64 {
        match self {
            Cells::Full => row.cell_id,
            Cells::Subset(s) => s.cell_of(&row.covariates),
            Cells::Pooled => 0,
        }
    }
}

/// Per-cell outcome shares for every cell present in both datasets.
pub fn compare_cells(
    sample: &Dataset,
    population: &Dataset,
    target: usize,
    cells: Cells<'_>,
) -> Result<Vec<CellComparison>, SamplingError> {
    if sample.schema.covariates != population.schema.covariates {
        return Err(SamplingError::Schema("sample and population covariates differ".into()));
    }
    let n_targets = population.schema.targets.len();
    if target >= n_targets || target >= sample.schema.targets.len() {
        return Err(SamplingError::TargetIndex {
            index: target,
            targets: n_targets,
        });
    }
    let tally = |d: &Dataset| {
        let mut m: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for r in &d.rows {
            let e = m.entry(cells.cell_of(r)).or_default();
            e.0 += 1;
            e.1 += r.outcomes[target] as usize;
        }
        m
    };
    let pop = tally(population);
    let smp = tally(sample);
    Ok(pop
        .iter()
        .filter_map(|(&cell, &(pn, ph))| {
            smp.get(&cell).map(|&(sn, sh)| CellComparison {
                cell_id: cell,
                population_rows: pn,
                sample_rows: sn,
                population_share: ph as f64 / pn as f64,
                sample_share: sh as f64 / sn as f64,
            })
        })
        .collect())
}

/// Recovers `(Γ, d)` for a target from a sample and its population.
///
/// `d` is the sign of population mean minus sample mean. `Γ` is the largest
/// of `max(R, 1/R)` over the two outcome classes, where `R` is the
/// population-to-sample ratio of the class share after standardizing both
/// datasets to the population's cell sizes, using only cells with at least
/// [`MIN_CELL_ROWS`] sample rows. Because [`biased_sample`] keeps cell sizes
/// in expectation, [`Cells::Pooled`] is consistent too and the only usable
/// choice when samples are small.
pub fn estimate_true_meta(
    sample: &Dataset,
    population: &Dataset,
    target_index: usize,
    cells: Cells<'_>,
) -> Result<MetaInfo<f64>, SamplingError> {
    let cells: Vec<CellComparison> = compare_cells(sample, population, target_index, cells)?
        .into_iter()
        .filter(|c| c.sample_rows >= MIN_CELL_ROWS)
        .collect();
    if cells.is_empty() {
        return Err(SamplingError::NoEligibleCells { min: MIN_CELL_ROWS });
    }
    let mass: f64 = cells.iter().map(|c| c.population_rows as f64).sum();
    let standardized = |f: fn(&CellComparison) -> f64| {
        cells
            .iter()
            .map(|c| c.population_rows as f64 / mass * f(c))
            .sum::<f64>()
    };
    let q1 = standardized(|c| c.population_share);
    let p1 = standardized(|c| c.sample_share);
    let mut gamma: f64 = 1.0;
    for (q, p) in [(q1, p1), (1.0 - q1, 1.0 - p1)] {
        if q > 0.0 && p > 0.0 {
            let r = q / p;
            gamma = gamma.max(r).max(1.0 / r);
        }
    }
    let direction = Direction::of(population.target_mean(target_index) - sample.target_mean(target_index));
    Ok(MetaInfo { gamma, direction })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize, seed: u64) -> PopulationSpec {
        PopulationSpec {
            covariates: vec![Covariate::new("a", 2), Covariate::new("b", 3)],
            n_population: n,
            n_targets: 2,
            cell_means: None,
            effect_scale: 0.5,
            seed,
        }
    }

    #[test]
    fn population_means_concentrate() {
        let spec = PopulationSpec {
            covariates: vec![Covariate::new("a", 2), Covariate::new("b", 2)],
            n_population: 100_000,
            n_targets: 1,
            cell_means: Some(vec![vec![0.5]; 4]),
            effect_scale: 1.0,
            seed: 3,
        };
        let pop = generate_population(&spec).unwrap();
        assert_eq!(pop.len(), 100_000);
        let m = pop.target_mean(0);
        assert!((0.49..=0.51).contains(&m), "mean {m}");
    }

    #[test]
    fn degenerate_cell_means() {
        let spec = PopulationSpec {
            covariates: vec![Covariate::new("only", 1)],
            n_population: 500,
            n_targets: 1,
            cell_means: Some(vec![vec![1.0]]),
            effect_scale: 1.0,
            seed: 1,
        };
        let pop = generate_population(&spec).unwrap();
        assert!(pop.rows.iter().all(|r| r.outcomes == vec![1]));
    }

    #[test]
    fn population_is_deterministic_and_one_hot() {
        let a = generate_population(&small_spec(2000, 9)).unwrap();
        let b = generate_population(&small_spec(2000, 9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_population(&small_spec(2000, 10)).unwrap());
        assert!(a.rows.iter().all(|r| r.outcomes.iter().map(|&o| o as u32).sum::<u32>() == 1));
        assert!(a.rows.iter().all(|r| r.cell_id == a.schema.cell_id(&r.covariates)));
    }

    #[test]
    fn inconsistent_cell_means_rejected() {
        let mut spec = small_spec(10, 0);
        spec.cell_means = Some(vec![vec![0.5, 0.2]; 5]);
        assert!(matches!(generate_population(&spec), Err(SamplingError::Config(_))));
        spec.cell_means = Some(vec![vec![0.7, 0.4]; 6]);
        assert!(matches!(generate_population(&spec), Err(SamplingError::Config(_))));
        spec.cell_means = Some(vec![vec![0.5]; 6]);
        assert!(matches!(generate_population(&spec), Err(SamplingError::Config(_))));
    }

    #[test]
    fn default_schema_shape() {
        let schema = PopulationSpec::default().schema();
        assert_eq!(schema.n_cells(), 2 * 5 * 4 * 3 * 3 * 4);
        assert_eq!(schema.targets.len(), 5);
    }

    #[test]
    fn subset_encoding_round_trips() {
        let schema = PopulationSpec::default().schema();
        let sub = schema.subset(&["age".into(), "gender".into()]).unwrap();
        assert_eq!(sub.n_cells(), 10);
        assert_eq!(sub.width(), 7);
        for cell in 0..sub.n_cells() {
            let lv = sub.decode(cell);
            let mut row = vec![0u8; 6];
            row[1] = lv[0];
            row[0] = lv[1];
            assert_eq!(sub.cell_of(&row), cell);
            let x = sub.encode_cell(cell);
            assert_eq!(x.iter().sum::<f64>(), 2.0);
            assert_eq!(x[lv[0] as usize], 1.0);
            assert_eq!(x[5 + lv[1] as usize], 1.0);
        }
        assert!(schema.subset(&[]).is_err());
        assert!(schema.subset(&["shoe_size".into()]).is_err());
        assert!(schema.subset(&["age".into(), "age".into()]).is_err());
    }

    #[test]
    fn selection_weights_preserve_cell_mass_and_bounds() {
        let pop = generate_population(&small_spec(3000, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = selection_weights(&pop, 2.0, Direction::Up, 0, &mut rng);
        for rows in rows_by_cell(&pop).values() {
            let total: f64 = rows.iter().map(|&i| w[i]).sum();
            assert!((total - rows.len() as f64).abs() < 1e-9);
        }
        assert!(w.iter().all(|&x| (0.5 - 1e-12..=2.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn unbiased_sampling_tracks_population() {
        let pop = generate_population(&small_spec(50_000, 2)).unwrap();
        let bias = BiasSpec::uniform(2, 1.0, Direction::None, 50_000, 8);
        let s = biased_sample(&pop, &bias, 0).unwrap();
        assert_eq!(s.len(), 50_000);
        assert!((s.target_mean(0) - pop.target_mean(0)).abs() < 0.01);
        let meta = estimate_true_meta(&s, &pop, 0, Cells::Full).unwrap();
        assert!(meta.gamma < 1.15, "gamma {}", meta.gamma);
    }

    #[test]
    fn direction_of_bias() {
        let pop = generate_population(&small_spec(20_000, 5)).unwrap();
        let pm = pop.target_mean(1);
        for (d, expect_below) in [(Direction::Up, true), (Direction::Down, false)] {
            let bias = BiasSpec::uniform(2, 2.0, d, 20_000, 3);
            let s = biased_sample(&pop, &bias, 1).unwrap();
            assert_eq!(s.target_mean(1) < pm, expect_below);
            let meta = estimate_true_meta(&s, &pop, 1, Cells::Full).unwrap();
            assert_eq!(meta.direction, d);
            assert!((1.6..=2.4).contains(&meta.gamma), "gamma {}", meta.gamma);
        }
    }

    #[test]
    fn sampler_errors() {
        let pop = generate_population(&small_spec(100, 5)).unwrap();
        let bias = BiasSpec::uniform(2, 2.0, Direction::Up, 10, 3);
        assert!(matches!(biased_sample(&pop, &bias, 2), Err(SamplingError::TargetIndex { .. })));
        let low = BiasSpec::uniform(2, 0.5, Direction::Up, 10, 3);
        assert!(matches!(biased_sample(&pop, &low, 0), Err(SamplingError::Bias(_))));
        let undirected = BiasSpec::uniform(2, 2.0, Direction::None, 10, 3);
        assert!(matches!(biased_sample(&pop, &undirected, 0), Err(SamplingError::Bias(_))));
        let short = BiasSpec {
            gamma: vec![2.0],
            ..bias.clone()
        };
        assert!(biased_sample(&pop, &short, 0).is_err());
    }

    #[test]
    fn tiny_samples_record_empty_cells_and_fail_meta_estimation() {
        let pop = generate_population(&small_spec(1000, 5)).unwrap();
        let bias = BiasSpec::uniform(2, 2.0, Direction::Up, 2, 3);
        let s = biased_sample(&pop, &bias, 0).unwrap();
        let prov = s.provenance.as_ref().unwrap();
        assert_eq!(prov.warnings.len(), 1);
        assert!(matches!(
            estimate_true_meta(&s, &pop, 0, Cells::Full),
            Err(SamplingError::NoEligibleCells { .. })
        ));
    }

    #[test]
    fn sign_of_direction_follows_means() {
        // population has more successes than the sample
        let schema = Schema {
            covariates: vec![Covariate::new("a", 1)],
            targets: vec!["y1".into()],
        };
        let mk = |ys: &[u8]| Dataset {
            schema: schema.clone(),
            rows: ys
                .iter()
                .map(|&y| Row {
                    covariates: vec![0],
                    outcomes: vec![y],
                    cell_id: 0,
                })
                .collect(),
            provenance: None,
        };
        let pop = mk(&[1; 60].iter().chain(&[0; 40]).copied().collect::<Vec<_>>());
        let smp = mk(&[1; 30].iter().chain(&[0; 70]).copied().collect::<Vec<_>>());
        let meta = estimate_true_meta(&smp, &pop, 0, Cells::Full).unwrap();
        assert_eq!(meta.direction, Direction::Up);
        assert!((meta.gamma - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_and_subset_cells() {
        let pop = generate_population(&small_spec(30_000, 6)).unwrap();
        let bias = BiasSpec::uniform(2, 2.0, Direction::Down, 3000, 2);
        let s = biased_sample(&pop, &bias, 0).unwrap();
        let pooled = compare_cells(&s, &pop, 0, Cells::Pooled).unwrap();
        assert_eq!(pooled.len(), 1);
        assert_eq!(pooled[0].population_rows, pop.len());
        let sub = pop.schema.subset(&["b".into()]).unwrap();
        let coarse = compare_cells(&s, &pop, 0, Cells::Subset(&sub)).unwrap();
        assert_eq!(coarse.len(), 3);
        assert_eq!(coarse.iter().map(|c| c.sample_rows).sum::<usize>(), 3000);
        let meta = estimate_true_meta(&s, &pop, 0, Cells::Pooled).unwrap();
        assert_eq!(meta.direction, Direction::Down);
        assert!(meta.gamma > 1.3, "gamma {}", meta.gamma);
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let pop = generate_population(&small_spec(50, 5)).unwrap();
        let mut buf = Vec::new();
        pop.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,b,y1,y2,cell_id\n"));
        let back = Dataset::read_csv(&buf[..], &pop.schema).unwrap();
        assert_eq!(back.rows, pop.rows);

        let dropped = text.replacen("a,b,y1,y2,cell_id", "a,b,y1,cell_id", 1);
        let err = Dataset::read_csv(dropped.as_bytes(), &pop.schema).unwrap_err();
        assert!(err.to_string().contains("`y2`"), "{err}");

        let bad_cell = "a,b,y1,y2,cell_id\n1,2,0,1,0\n";
        assert!(Dataset::read_csv(bad_cell.as_bytes(), &pop.schema).is_err());
        let bad_level = "a,b,y1,y2,cell_id\n1,3,0,1,6\n";
        assert!(Dataset::read_csv(bad_level.as_bytes(), &pop.schema).is_err());
    }
}
