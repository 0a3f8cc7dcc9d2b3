use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dru_core::eval::run_sweep;
use dru_core::losses::{Direction, LossSpec, MetaInfo};
use dru_core::nn::{train, Activation, Mlp, NnError, Samples, TrainConfig};
use dru_core::robustness::{sup_oracle_lp, worst_case_dru, worst_case_ru, DiscreteDistribution, RobustnessError};
use dru_core::sampling::{biased_sample, generate_population, Dataset, PopulationSpec, SamplingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{
    OracleCase, RunConfig, SEED_INIT_ALPHA, SEED_INIT_H, SEED_ORACLE, SEED_POPULATION, SEED_SAMPLE, SEED_TRAIN,
};
use crate::error::CliError;
use crate::manifest::{hash_file, Command, InputFile, Manifest};

/// Oracle agreement reported as a failure above this gap.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
}

fn finish(w: BufWriter<File>, dir: &Path, name: &str) -> Result<(), CliError> {
    w.into_inner()
        .map(drop)
        .map_err(|e| CliError::io(&dir.join(name), e.into_error()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn sampling_error(path: &Path, e: SamplingError) -> CliError {
    match e {
        SamplingError::Io(io) => CliError::io(path, io),
        SamplingError::Schema(_) | SamplingError::Csv(_) => CliError::Usage(format!("{}: {e}", path.display())),
        other => CliError::Run(other.to_string()),
    }
}

fn write_dataset(dir: &Path, name: &str, data: &Dataset) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    data.write_csv(&mut w).map_err(|e| sampling_error(&dir.join(name), e))?;
    finish(w, dir, name)
}

#[derive(Serialize)]
struct ProvenanceFile<'a> {
    target: &'a str,
    target_index: usize,
    gamma_true: f64,
    direction_true: Direction,
    n_sample: usize,
    seed: u64,
    population_rows: usize,
    population_mean: f64,
    sample_mean: f64,
    warnings: &'a [String],
}

/// Population CSV plus, for every target, a sample biased on that target and
/// its provenance.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let spec = PopulationSpec {
        seed: cfg.derived_seed(SEED_POPULATION),
        ..cfg.population.clone()
    };
    let population = generate_population(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut outputs = vec!["population.csv".to_string()];
    write_dataset(out, "population.csv", &population)?;

    let bias = cfg.bias_spec(cfg.derived_seed(SEED_SAMPLE));
    for (t, name) in population.schema.targets.iter().enumerate() {
        let sample = biased_sample(&population, &bias, t).map_err(|e| CliError::Usage(e.to_string()))?;
        let csv_name = format!("sample_{name}.csv");
        write_dataset(out, &csv_name, &sample)?;
        let prov = sample.provenance.as_ref().expect("biased samples carry provenance");
        let json_name = format!("provenance_{name}.json");
        write_json(
            out,
            &json_name,
            &ProvenanceFile {
                target: name,
                target_index: t,
                gamma_true: bias.gamma[t],
                direction_true: bias.direction[t],
                n_sample: bias.n_sample,
                seed: bias.seed,
                population_rows: prov.population_rows,
                population_mean: population.target_mean(t),
                sample_mean: sample.target_mean(t),
                warnings: &prov.warnings,
            },
        )?;
        for w in &prov.warnings {
            eprintln!("warning: {name}: {w}");
        }
        outputs.push(csv_name);
        outputs.push(json_name);
    }
    println!(
        "wrote {} population rows and {} samples of {} rows to {}",
        population.len(),
        population.schema.targets.len(),
        bias.n_sample,
        out.display()
    );
    Ok(Manifest::new(Command::Generate, cfg, Vec::new(), outputs))
}

/// Fits `cfg.model` on a sample CSV.
pub fn train_model(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Manifest, CliError> {
    let schema = cfg.population.schema();
    let file = File::open(data).map_err(|e| CliError::io(data, e))?;
    let dataset = Dataset::read_csv(std::io::BufReader::new(file), &schema).map_err(|e| sampling_error(data, e))?;
    let target = schema.target_index(&cfg.model.target).map_err(|e| CliError::Usage(e.to_string()))?;
    let subset = schema.subset(cfg.model_covariates()).map_err(|e| CliError::Usage(e.to_string()))?;

    let width = subset.width();
    let mut inputs = Vec::with_capacity(dataset.len() * width);
    let mut targets = Vec::with_capacity(dataset.len());
    for row in &dataset.rows {
        inputs.extend(subset.encode_row(&row.covariates));
        targets.push(row.outcomes[target] as f64);
    }
    let samples = Samples::new(width, inputs, targets).map_err(nn_error)?;

    let loss = cfg.model.loss;
    let hidden = match (&cfg.model.hidden, loss) {
        (Some(h), _) => h.clone(),
        (None, LossSpec::Pinball { .. }) => cfg.architecture.pinball_hidden.clone(),
        (None, _) => cfg.architecture.hidden.clone(),
    };
    let h = Mlp::with_hidden(width, &hidden, Activation::Identity, cfg.derived_seed(SEED_INIT_H)).map_err(nn_error)?;
    let alpha = if loss.needs_alpha() {
        Some(Mlp::with_hidden(width, &hidden, Activation::Relu, cfg.derived_seed(SEED_INIT_ALPHA)).map_err(nn_error)?)
    } else {
        None
    };
    let train_cfg = TrainConfig {
        seed: cfg.derived_seed(SEED_TRAIN),
        ..cfg.train.clone()
    };
    let (model, report) = train(h, alpha, &samples, loss, &train_cfg).map_err(nn_error)?;

    let model_path = out.join("model.json");
    let mut text = model.to_json();
    text.push('\n');
    std::fs::write(&model_path, text).map_err(|e| CliError::io(&model_path, e))?;
    write_json(out, "train_report.json", &report)?;

    let mut w = create(out, "predictions.csv")?;
    let path = out.join("predictions.csv");
    writeln!(w, "cell_id,prediction").map_err(|e| CliError::io(&path, e))?;
    for cell in 0..subset.n_cells() {
        let y = model.predict(&subset.encode_cell(cell)).map_err(nn_error)?;
        writeln!(w, "{cell},{y}").map_err(|e| CliError::io(&path, e))?;
    }
    finish(w, out, "predictions.csv")?;

    println!(
        "trained on {} rows for {} epochs (best epoch {}, final validation loss {})",
        report.train_rows,
        report.epochs_run,
        report.best_epoch,
        report.val_loss_trace.last().map_or("n/a".to_string(), |v| v.to_string())
    );
    let input = InputFile {
        path: data.to_path_buf(),
        sha256: hash_file(data)?,
    };
    Ok(Manifest::new(
        Command::Train,
        cfg,
        vec![input],
        vec!["model.json".into(), "train_report.json".into(), "predictions.csv".into()],
    ))
}

fn nn_error(e: NnError) -> CliError {
    match e {
        NnError::Config(_) | NnError::LossMismatch(_) | NnError::InputShape { .. } | NnError::Loss(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Run(other.to_string()),
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DirectionalOutcome {
    Ok { greedy: f64, lp: f64, discrepancy: f64 },
    Infeasible { needed: f64, available: f64, deficit: f64 },
}

#[derive(Debug, Serialize)]
pub struct OracleInstance {
    pub index: usize,
    pub source: &'static str,
    pub points: usize,
    pub gamma: f64,
    pub direction: Direction,
    pub ru_greedy: f64,
    pub ru_lp: f64,
    pub ru_discrepancy: f64,
    pub dru: DirectionalOutcome,
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub infeasible: usize,
    pub max_discrepancy: f64,
    /// Feasible instances whose directional sup exceeds the undirected one.
    pub dru_above_ru: usize,
    pub tolerance: f64,
    pub results: Vec<OracleInstance>,
}

fn random_case(rng: &mut ChaCha8Rng, max_points: usize, gamma_max: f64) -> OracleCase {
    let n = rng.gen_range(1..=max_points);
    let losses = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
    let probs = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let signs = (0..n)
        .map(|_| if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down })
        .collect();
    OracleCase {
        losses,
        probs: Some(probs),
        signs,
        gamma: rng.gen_range(1.0..=gamma_max),
        direction: if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down },
    }
}

fn robustness_error(index: usize, e: RobustnessError) -> CliError {
    CliError::Usage(format!("oracle instance {index}: {e}"))
}

fn solve_case(index: usize, source: &'static str, case: &OracleCase) -> Result<OracleInstance, CliError> {
    let n = case.losses.len();
    let probs = match &case.probs {
        Some(p) => {
            let total: f64 = p.iter().sum();
            p.iter().map(|x| x / total).collect()
        }
        None => vec![1.0 / n as f64; n],
    };
    let dist = DiscreteDistribution::new(case.losses.iter().copied().zip(probs).collect())
        .map_err(|e| robustness_error(index, e))?;
    let ru_greedy = worst_case_ru(&dist, case.gamma).map_err(|e| robustness_error(index, e))?.sup_value;
    let ru_lp = sup_oracle_lp(&dist, case.gamma, None).map_err(|e| robustness_error(index, e))?;
    let meta = MetaInfo::new(case.gamma, case.direction).map_err(|e| CliError::Usage(e.to_string()))?;
    let dru = match worst_case_dru(&dist, &case.signs, &meta) {
        Ok(wc) => {
            let mask: Vec<bool> = case.signs.iter().map(|&s| s != Direction::None && s == case.direction).collect();
            let lp = sup_oracle_lp(&dist, case.gamma, Some(&mask)).map_err(|e| robustness_error(index, e))?;
            DirectionalOutcome::Ok {
                greedy: wc.sup_value,
                lp,
                discrepancy: (wc.sup_value - lp).abs(),
            }
        }
        Err(RobustnessError::Infeasible {
            needed,
            available,
            deficit,
        }) => DirectionalOutcome::Infeasible {
            needed,
            available,
            deficit,
        },
        Err(e) => return Err(robustness_error(index, e)),
    };
    Ok(OracleInstance {
        index,
        source,
        points: n,
        gamma: case.gamma,
        direction: case.direction,
        ru_greedy,
        ru_lp,
        ru_discrepancy: (ru_greedy - ru_lp).abs(),
        dru,
    })
}

/// Greedy worst cases against the LP sup on random and configured instances.
pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let o = &cfg.oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed(SEED_ORACLE));
    let mut results = Vec::with_capacity(o.instances + o.cases.len());
    for i in 0..o.instances {
        let case = random_case(&mut rng, o.max_points, o.gamma_max);
        results.push(solve_case(i, "random", &case)?);
    }
    for (k, case) in o.cases.iter().enumerate() {
        results.push(solve_case(o.instances + k, "config", case)?);
    }

    let mut max_discrepancy: f64 = 0.0;
    let mut infeasible = 0;
    let mut dru_above_ru = 0;
    for r in &results {
        max_discrepancy = max_discrepancy.max(r.ru_discrepancy);
        match r.dru {
            DirectionalOutcome::Ok { greedy, discrepancy, .. } => {
                max_discrepancy = max_discrepancy.max(discrepancy);
                if greedy > r.ru_greedy + ORACLE_TOLERANCE {
                    dru_above_ru += 1;
                }
            }
            DirectionalOutcome::Infeasible { .. } => infeasible += 1,
        }
    }
    for r in results.iter().filter(|r| r.source == "config") {
        match r.dru {
            DirectionalOutcome::Ok { greedy, lp, .. } => println!(
                "case {}: RU greedy {} LP {}; dRU greedy {greedy} LP {lp}",
                r.index, r.ru_greedy, r.ru_lp
            ),
            DirectionalOutcome::Infeasible { deficit, .. } => println!(
                "case {}: RU greedy {} LP {}; dRU infeasible (deficit {deficit})",
                r.index, r.ru_greedy, r.ru_lp
            ),
        }
    }
    let report = OracleReport {
        instances: results.len(),
        infeasible,
        max_discrepancy,
        dru_above_ru,
        tolerance: ORACLE_TOLERANCE,
        results,
    };
    println!(
        "{} instances, {} dRU-infeasible, max greedy/LP discrepancy {:e}, dRU above RU on {}",
        report.instances, report.infeasible, report.max_discrepancy, report.dru_above_ru
    );
    if report.max_discrepancy > ORACLE_TOLERANCE {
        eprintln!("warning: discrepancy exceeds {ORACLE_TOLERANCE:e}");
    }
    write_json(out, "oracle_report.json", &report)?;
    Ok(Manifest::new(Command::Oracle, cfg, Vec::new(), vec!["oracle_report.json".into()]))
}

/// Runs the sweep and writes records, summary and histogram CSVs. Fails with
/// a partial-sweep error, after writing everything, when more than a tenth
/// of the runs failed.
pub fn sweep(cfg: &RunConfig, jobs: Option<usize>, out: &Path) -> Result<Manifest, CliError> {
    let plan = cfg.sweep_plan();
    let result = run_sweep(&plan, jobs).map_err(|e| CliError::Run(e.to_string()))?;
    let csv_err = |name: &str| {
        let path: PathBuf = out.join(name);
        move |e: dru_core::eval::EvalError| CliError::Run(format!("{}: {e}", path.display()))
    };
    let mut w = create(out, "records.csv")?;
    result.write_records_csv(&mut w).map_err(csv_err("records.csv"))?;
    finish(w, out, "records.csv")?;
    let mut w = create(out, "summary.csv")?;
    result.write_summary_csv(&mut w).map_err(csv_err("summary.csv"))?;
    finish(w, out, "summary.csv")?;
    let mut w = create(out, "histogram.csv")?;
    result
        .write_histogram_csv(&mut w, cfg.sweep.histogram_bins)
        .map_err(csv_err("histogram.csv"))?;
    finish(w, out, "histogram.csv")?;

    println!("{:<22} {:>10} {:>16} {:>6}", "method", "mean_b", "freq_b_positive", "failed");
    for s in &result.summary {
        println!(
            "{:<22} {:>10.4} {:>16.4} {:>6}",
            s.method.label(),
            s.mean_b,
            s.freq_b_positive,
            s.failed_runs
        );
    }
    let manifest = Manifest::new(
        Command::Sweep,
        cfg,
        Vec::new(),
        vec!["records.csv".into(), "summary.csv".into(), "histogram.csv".into()],
    );
    let (failed, total) = (result.failed_runs(), result.total_runs());
    if failed * 10 > total {
        manifest.write(out)?;
        return Err(CliError::PartialSweep { failed, total });
    }
    Ok(manifest)
}
