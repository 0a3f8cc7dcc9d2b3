//! Bias-removal experiment: replicates × covariate subsets × methods, scored
//! with the b-score and summarized per method.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Direction, LossError, LossSpec, MetaInfo};
use crate::nn::{train, Activation, Mlp, NnError, Samples, TrainConfig};
use crate::poststrat::{build_cell_table, poststratify_with, CellTable, PoststratError};
use crate::robustness::eta;
use crate::sampling::{
    biased_sample, estimate_true_meta, generate_population, BiasSpec, Cells, CovariateSubset, Dataset, PopulationSpec,
    SamplingError,
};
use crate::seed;

/// Targets whose unweighted error is at most this much carry no weight in
/// deciding whether a b-score is defined.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("b-score undefined: no target has unweighted error above {DENOMINATOR_FLOOR}")]
    UndefinedScore,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid sweep plan: {0}")]
    Plan(String),
    #[error("no records to summarize")]
    Empty,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Poststrat(#[from] PoststratError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fraction of the unweighted estimate's absolute error removed, aggregated
/// as a ratio of sums over targets. 1 at exact recovery, 0 when `y_hat`
/// equals the unweighted means, negative when the estimate is worse.
pub fn b_score(y_true: &[f64], y_hat: &[f64], y_unweighted: &[f64]) -> Result<f64, EvalError> {
    if y_true.len() != y_hat.len() || y_true.len() != y_unweighted.len() {
        return Err(EvalError::Length(format!(
            "{} true, {} estimated, {} unweighted values",
            y_true.len(),
            y_hat.len(),
            y_unweighted.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut defined = false;
    for ((&t, &h), &u) in y_true.iter().zip(y_hat).zip(y_unweighted) {
        let du = (t - u).abs();
        defined |= du > DENOMINATOR_FLOOR;
        num += du - (t - h).abs();
        den += du;
    }
    if !defined {
        return Err(EvalError::UndefinedScore);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    DruInformed,
    NnPlain,
    RegressionPoststrat,
    Pinball,
    DruWrongGamma,
    DruWrongD,
    DruWrongBoth,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::DruInformed,
        MethodKind::NnPlain,
        MethodKind::RegressionPoststrat,
        MethodKind::Pinball,
        MethodKind::DruWrongGamma,
        MethodKind::DruWrongD,
        MethodKind::DruWrongBoth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodKind::DruInformed => "dru_informed",
            MethodKind::NnPlain => "nn_plain",
            MethodKind::RegressionPoststrat => "regression_poststrat",
            MethodKind::Pinball => "pinball",
            MethodKind::DruWrongGamma => "dru_wrong_gamma",
            MethodKind::DruWrongD => "dru_wrong_d",
            MethodKind::DruWrongBoth => "dru_wrong_both",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Direction of the residual gate that pulls estimates toward a population
/// mean lying on side `population` of the sample mean.
///
/// The dRU hinge and the pinball asymmetry both penalize residuals
/// `z − y` of sign `d`, which drags predictions away from that side, so the
/// gate is the opposite of the population side.
pub fn loss_direction(population: Direction) -> Direction {
    population.flipped()
}

/// Loss parameters a method uses for every target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Loss-side `(Γ, d)` per target; unbiased for methods that ignore it.
    pub meta: Vec<MetaInfo<f64>>,
    /// Pinball level per target; 0.5 for methods that ignore it.
    pub pinball_p: Vec<f64>,
}

impl MethodSpec {
    /// Builds the method from population-side meta-information
    /// (`d = +1` when the population mean exceeds the sample mean).
    pub fn derive(kind: MethodKind, informed: &[MetaInfo<f64>]) -> Result<Self, EvalError> {
        let n = informed.len();
        let mut gammas: Vec<f64> = informed.iter().map(|m| m.gamma).collect();
        let mut dirs: Vec<Direction> = informed.iter().map(|m| loss_direction(m.direction)).collect();
        match kind {
            MethodKind::DruWrongGamma => gammas.reverse(),
            MethodKind::DruWrongD => dirs.iter_mut().for_each(|d| *d = d.flipped()),
            MethodKind::DruWrongBoth => {
                gammas.reverse();
                dirs.iter_mut().for_each(|d| *d = d.flipped());
            }
            _ => {}
        }
        let meta = gammas
            .iter()
            .zip(&dirs)
            .map(|(&g, &d)| {
                let g = if d == Direction::None { 1.0 } else { g };
                MetaInfo::new(g, d)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pinball_p = meta
            .iter()
            .map(|m| {
                let e = eta(m.gamma).expect("validated gamma");
                match m.direction {
                    Direction::Up => e,
                    Direction::Down => 1.0 - e,
                    Direction::None => 0.5,
                }
            })
            .collect();
        Ok(match kind {
            MethodKind::NnPlain | MethodKind::RegressionPoststrat => Self {
                kind,
                meta: vec![MetaInfo::unbiased(); n],
                pinball_p: vec![0.5; n],
            },
            MethodKind::Pinball => Self {
                kind,
                meta,
                pinball_p,
            },
            _ => Self {
                kind,
                meta,
                pinball_p: vec![0.5; n],
            },
        })
    }

    pub fn loss(&self, target: usize) -> Result<LossSpec<f64>, EvalError> {
        Ok(match self.kind {
            MethodKind::NnPlain | MethodKind::RegressionPoststrat => LossSpec::Squared,
            MethodKind::Pinball => LossSpec::pinball(self.pinball_p[target])?,
            _ => LossSpec::dru(self.meta[target])?,
        })
    }
}

fn default_hidden() -> Vec<usize> {
    vec![4, 4]
}
fn default_pinball_hidden() -> Vec<usize> {
    vec![8, 8]
}

/// Hidden widths of the trained networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Predictor and threshold networks of every dRU variant and the plain network.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_pinball_hidden")]
    pub pinball_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            pinball_hidden: default_pinball_hidden(),
        }
    }
}

/// Where the informed `(Γ, d)` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSource {
    /// Estimated from a second biased sample of the same population, standing
    /// in for the previous election.
    #[default]
    PreviousSample,
    /// The generating bias itself.
    True,
}

/// A full experiment. Replicate `r` draws its population with a seed derived
/// from `seed` and `r`; every sample, initialization and shuffle below it is
/// derived the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub population: PopulationSpec,
    pub bias: BiasSpec,
    pub replicates: usize,
    pub subsets: Vec<Vec<String>>,
    pub methods: Vec<MethodKind>,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub meta_source: MetaSource,
    pub seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Plan(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be positive");
        }
        if self.subsets.is_empty() || self.methods.is_empty() {
            return bad("subsets and methods must be non-empty");
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods listed twice");
        }
        if self.architecture.hidden.contains(&0) || self.architecture.pinball_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        let schema = self.population.schema();
        for s in &self.subsets {
            schema.subset(s)?;
        }
        self.bias.validate(self.population.n_targets)?;
        self.train.validate()?;
        Ok(())
    }

    fn population_spec(&self, replicate: usize) -> PopulationSpec {
        PopulationSpec {
            seed: seed::derive(self.seed, &[SEED_POPULATION, replicate as u64]),
            ..self.population.clone()
        }
    }

    fn bias_spec(&self, replicate: usize, label: u64) -> BiasSpec {
        BiasSpec {
            seed: seed::derive(self.seed, &[label, replicate as u64]),
            ..self.bias.clone()
        }
    }
}

const SEED_POPULATION: u64 = 1;
const SEED_SAMPLE: u64 = 2;
const SEED_PREVIOUS: u64 = 3;
const SEED_TRAIN: u64 = 4;
const SEED_INIT_H: u64 = 5;
const SEED_INIT_ALPHA: u64 = 6;

/// One target of one (replicate, subset, method) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub replicate: usize,
    pub subset: String,
    pub method: MethodKind,
    pub target: String,
    pub gamma: f64,
    pub direction: Direction,
    pub pinball_p: f64,
    pub y_hat: Option<f64>,
    pub y_true: f64,
    pub y_unweighted: f64,
    /// `|ȳ_true − ȳ_unweighted| − |ȳ_true − ŷ|`.
    pub b_contribution: Option<f64>,
    /// Table cells absent from the training sample.
    pub unseen_cells: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub mean_b: f64,
    pub freq_b_positive: f64,
    pub runs: usize,
    pub failed_runs: usize,
}

/// Per-run score recomputed from records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScore {
    pub replicate: usize,
    pub subset: String,
    pub method: MethodKind,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub summary: Vec<MethodSummary>,
}

impl SweepResult {
    pub fn run_scores(&self) -> Vec<RunScore> {
        run_scores(&self.records)
    }

    pub fn total_runs(&self) -> usize {
        self.summary.iter().map(|s| s.runs + s.failed_runs).sum()
    }

    pub fn failed_runs(&self) -> usize {
        self.summary.iter().map(|s| s.failed_runs).sum()
    }

    pub fn method(&self, kind: MethodKind) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == kind)
    }

    pub fn write_records_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `method,mean_b,freq_b_positive`.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "mean_b", "freq_b_positive"])?;
        for s in &self.summary {
            out.write_record([s.method.label().to_string(), s.mean_b.to_string(), s.freq_b_positive.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `method,bin_lower,bin_upper,count`.
    pub fn write_histogram_csv<W: Write>(&self, w: W, bins: usize) -> Result<(), EvalError> {
        let hist = histogram(&self.run_scores(), bins);
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "bin_lower", "bin_upper", "count"])?;
        for (method, counts) in &hist.counts {
            for (i, c) in counts.iter().enumerate() {
                out.write_record([
                    method.label().to_string(),
                    hist.edges[i].to_string(),
                    hist.edges[i + 1].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores every (replicate, subset, method) group of records, in key order.
/// A group with any failed target, or no target with unweighted error above
/// [`DENOMINATOR_FLOOR`], has no score.
pub fn run_scores(records: &[SweepRecord]) -> Vec<RunScore> {
    let mut groups: BTreeMap<(usize, &str, MethodKind), Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.replicate, r.subset.as_str(), r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((replicate, subset, method), rs)| {
            let b = if rs.iter().all(|r| r.error.is_none() && r.y_hat.is_some()) {
                let t: Vec<f64> = rs.iter().map(|r| r.y_true).collect();
                let h: Vec<f64> = rs.iter().map(|r| r.y_hat.unwrap_or(f64::NAN)).collect();
                let u: Vec<f64> = rs.iter().map(|r| r.y_unweighted).collect();
                b_score(&t, &h, &u).ok()
            } else {
                None
            };
            RunScore {
                replicate,
                subset: subset.to_string(),
                method,
                b,
            }
        })
        .collect()
}

/// Mean b and share of runs with b > 0 per method, over scored runs, in
/// order of first appearance.
pub fn summarize(records: &[SweepRecord]) -> Result<Vec<MethodSummary>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<MethodKind> = Vec::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }
    let scores = run_scores(records);
    Ok(order
        .into_iter()
        .map(|method| {
            let bs: Vec<f64> = scores.iter().filter(|s| s.method == method).filter_map(|s| s.b).collect();
            let total = scores.iter().filter(|s| s.method == method).count();
            let n = bs.len();
            let (mean_b, freq_b_positive) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (
                    bs.iter().sum::<f64>() / n as f64,
                    bs.iter().filter(|&&b| b > 0.0).count() as f64 / n as f64,
                )
            };
            MethodSummary {
                method,
                mean_b,
                freq_b_positive,
                runs: n,
                failed_runs: total - n,
            }
        })
        .collect())
}

/// Per-method counts over shared, equal-width bins spanning all scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<(MethodKind, Vec<usize>)>,
}

pub fn histogram(scores: &[RunScore], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let values: Vec<f64> = scores.iter().filter_map(|s| s.b).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts: Vec<(MethodKind, Vec<usize>)> = Vec::new();
    for s in scores {
        let slot = match counts.iter().position(|(m, _)| *m == s.method) {
            Some(i) => i,
            None => {
                counts.push((s.method, vec![0; bins]));
                counts.len() - 1
            }
        };
        if let Some(b) = s.b {
            let i = (((b - lo) / width) as usize).min(bins - 1);
            counts[slot].1[i] += 1;
        }
    }
    Histogram { edges, counts }
}

/// Runs the sweep on up to `jobs` threads (all cores when `None`). Results
/// do not depend on the thread count.
pub fn run_sweep(plan: &SweepPlan, jobs: Option<usize>) -> Result<SweepResult, EvalError> {
    plan.validate()?;
    let work = || -> Vec<Vec<SweepRecord>> {
        (0..plan.replicates)
            .into_par_iter()
            .map(|r| run_replicate(plan, r))
            .collect()
    };
    let nested = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EvalError::Plan(e.to_string()))?
            .install(work),
        None => work(),
    };
    let records: Vec<SweepRecord> = nested.into_iter().flatten().collect();
    let summary = summarize(&records)?;
    Ok(SweepResult { records, summary })
}

fn subset_label(names: &[String]) -> String {
    names.join("+")
}

struct TargetData {
    sample: Dataset,
    y_true: f64,
    y_unweighted: f64,
}

fn run_replicate(plan: &SweepPlan, replicate: usize) -> Vec<SweepRecord> {
    let n_targets = plan.population.n_targets;
    let names = plan.population.schema().targets;
    match prepare_replicate(plan, replicate) {
        Ok((population, data, informed)) => {
            let mut out = Vec::with_capacity(plan.subsets.len() * plan.methods.len() * n_targets);
            for (si, subset) in plan.subsets.iter().enumerate() {
                let cells = build_cell_table(&population, subset);
                for &kind in &plan.methods {
                    let method = MethodSpec::derive(kind, &informed);
                    for (t, name) in names.iter().enumerate() {
                        let mut rec = SweepRecord {
                            replicate,
                            subset: subset_label(subset),
                            method: kind,
                            target: name.clone(),
                            gamma: f64::NAN,
                            direction: Direction::None,
                            pinball_p: f64::NAN,
                            y_hat: None,
                            y_true: data[t].y_true,
                            y_unweighted: data[t].y_unweighted,
                            b_contribution: None,
                            unseen_cells: 0,
                            error: None,
                        };
                        let outcome = match (&method, &cells) {
                            (Ok(m), Ok((sub, table))) => {
                                rec.gamma = m.meta[t].gamma;
                                rec.direction = m.meta[t].direction;
                                rec.pinball_p = m.pinball_p[t];
                                fit_and_estimate(plan, [replicate, si, t], m, sub, table, &data[t].sample)
                                    .map_err(|e| e.to_string())
                            }
                            (Err(e), _) => Err(e.to_string()),
                            (_, Err(e)) => Err(e.to_string()),
                        };
                        match outcome {
                            Ok((y_hat, unseen)) => {
                                rec.y_hat = Some(y_hat);
                                rec.unseen_cells = unseen;
                                rec.b_contribution =
                                    Some((rec.y_true - rec.y_unweighted).abs() - (rec.y_true - y_hat).abs());
                            }
                            Err(e) => rec.error = Some(e),
                        }
                        out.push(rec);
                    }
                }
            }
            out
        }
        Err(e) => {
            let msg = e.to_string();
            let mut out = Vec::new();
            for subset in &plan.subsets {
                for &kind in &plan.methods {
                    for name in &names {
                        out.push(SweepRecord {
                            replicate,
                            subset: subset_label(subset),
                            method: kind,
                            target: name.clone(),
                            gamma: f64::NAN,
                            direction: Direction::None,
                            pinball_p: f64::NAN,
                            y_hat: None,
                            y_true: f64::NAN,
                            y_unweighted: f64::NAN,
                            b_contribution: None,
                            unseen_cells: 0,
                            error: Some(msg.clone()),
                        });
                    }
                }
            }
            out
        }
    }
}

type Prepared = (Dataset, Vec<TargetData>, Vec<MetaInfo<f64>>);

fn prepare_replicate(plan: &SweepPlan, replicate: usize) -> Result<Prepared, EvalError> {
    let population = generate_population(&plan.population_spec(replicate))?;
    let eval_bias = plan.bias_spec(replicate, SEED_SAMPLE);
    let prev_bias = plan.bias_spec(replicate, SEED_PREVIOUS);
    let mut data = Vec::with_capacity(plan.population.n_targets);
    let mut informed = Vec::with_capacity(plan.population.n_targets);
    for t in 0..plan.population.n_targets {
        let sample = biased_sample(&population, &eval_bias, t)?;
        let meta = match plan.meta_source {
            MetaSource::True => MetaInfo::new(plan.bias.gamma[t], plan.bias.direction[t])?,
            MetaSource::PreviousSample => {
                let previous = biased_sample(&population, &prev_bias, t)?;
                estimate_true_meta(&previous, &population, t, Cells::Pooled)?
            }
        };
        informed.push(meta);
        data.push(TargetData {
            y_true: population.target_mean(t),
            y_unweighted: sample.target_mean(t),
            sample,
        });
    }
    Ok((population, data, informed))
}

/// Trains the method's model for one target and post-stratifies it over the
/// subset's population table. Returns the estimate and the number of table
/// cells the training sample never visited.
fn fit_and_estimate(
    plan: &SweepPlan,
    key: [usize; 3],
    method: &MethodSpec,
    subset: &CovariateSubset,
    table: &CellTable<f64>,
    sample: &Dataset,
) -> Result<(f64, usize), EvalError> {
    let target = key[2];
    let width = subset.width();
    let mut inputs = Vec::with_capacity(sample.len() * width);
    let mut targets = Vec::with_capacity(sample.len());
    let mut seen = std::collections::BTreeSet::new();
    for row in &sample.rows {
        let cell = subset.cell_of(&row.covariates);
        seen.insert(cell);
        inputs.extend(subset.encode_cell(cell));
        targets.push(row.outcomes[target] as f64);
    }
    let samples = Samples::new(width, inputs, targets)?;

    let derive = |label: u64| seed::derive(plan.seed, &[label, key[0] as u64, key[1] as u64, key[2] as u64]);
    let loss = method.loss(target)?;
    let hidden: &[usize] = match method.kind {
        MethodKind::RegressionPoststrat => &[],
        MethodKind::Pinball => &plan.architecture.pinball_hidden,
        _ => &plan.architecture.hidden,
    };
    let h = Mlp::with_hidden(width, hidden, Activation::Identity, derive(SEED_INIT_H))?;
    let alpha = if loss.needs_alpha() {
        Some(Mlp::with_hidden(width, hidden, Activation::Relu, derive(SEED_INIT_ALPHA))?)
    } else {
        None
    };
    let cfg = TrainConfig {
        seed: derive(SEED_TRAIN),
        ..plan.train.clone()
    };
    let (model, _) = train(h, alpha, &samples, loss, &cfg)?;
    let unseen = table.cells().keys().filter(|c| !seen.contains(c)).count();
    let y_hat = poststratify_with(table, |cell| model.predict(&subset.encode_cell(cell)))?;
    Ok((y_hat, unseen))
}
