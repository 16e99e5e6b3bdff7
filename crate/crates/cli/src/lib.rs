//! Command implementations behind the `tsqlora` binary. Each command
//! validates its config and data before creating any output file.

pub mod config;
pub mod output;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsqlora::trainer::{self, Metric, TrainReport};
use tsqlora::{Dataset, ModelSpec, TrainConfig};

use config::{Overrides, RunConfig};
use output::{MetricLine, MetricWriter, Phase, ScoreRow};

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    /// Errors from reading a data file; I/O failures count as data errors.
    pub fn data(e: tsqlora::Error) -> Self {
        match e {
            tsqlora::Error::Io(io) => CliError {
                code: Self::DATA,
                message: io.to_string(),
            },
            other => other.into(),
        }
    }

    fn output(path: &Path, e: impl fmt::Display) -> Self {
        CliError {
            code: Self::INTERNAL,
            message: format!("cannot write {}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tsqlora::Error> for CliError {
    fn from(e: tsqlora::Error) -> Self {
        use tsqlora::Error as E;
        let code = match &e {
            E::Config(_) | E::Capacity { .. } => Self::CONFIG,
            E::Input(_) | E::Parse { .. } | E::Schema(_) | E::EmptyDataset => Self::DATA,
            E::NonFinite(_) | E::Scoring { .. } => Self::NUMERIC,
            E::Io(_) | E::Contract(_) | E::Dimension { .. } => Self::INTERNAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    run_id: String,
    command: &'a str,
    config_path: &'a Path,
    out_dir: &'a Path,
    config: &'a RunConfig,
}

/// Everything a command needs, validated before any file is written.
struct Prepared {
    cfg: RunConfig,
    /// Whether the file fixed `data.seed` independently of the run seed.
    pinned_data_seed: bool,
    spec: ModelSpec,
    train: Dataset,
    eval: Dataset,
}

impl Prepared {
    fn new(common: &Common) -> Result<Self, CliError> {
        let raw = RunConfig::load(&common.config)?;
        let pinned_data_seed = raw.data.seed.is_some();
        let cfg = raw.resolve(&common.overrides)?;
        let (train, eval) = cfg.datasets()?;
        let spec = cfg.spec(train.dim(), train.classes().max(eval.classes()));
        spec.validate()?;
        cfg.train.validate(train.len())?;
        Ok(Prepared {
            cfg,
            pinned_data_seed,
            spec,
            train,
            eval,
        })
    }

    fn start_outputs(&self, common: &Common, command: &str) -> Result<(), CliError> {
        fs::create_dir_all(&common.out).map_err(|e| CliError::output(&common.out, e))?;
        let manifest = Manifest {
            run_id: self.cfg.run_id(),
            command,
            config_path: &common.config,
            out_dir: &common.out,
            config: &self.cfg,
        };
        let path = common.out.join(output::MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::output(&path, e))
    }
}

fn noisy_ids(ds: &Dataset) -> Vec<u64> {
    ds.ids()
        .iter()
        .zip(ds.noisy())
        .filter(|(_, &n)| n)
        .map(|(&id, _)| id)
        .collect()
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
    let path = dir.join(name);
    output::write_csv(&path, rows).map_err(|e| CliError::output(&path, e))
}

/// Writes `ranks.csv`, `quality.csv` and `quality_hist.csv` from a metric
/// stream and returns the mean final quality of (noisy, clean) samples.
fn render_from_metrics(dir: &Path, lines: &[MetricLine]) -> Result<(Option<f64>, Option<f64>), CliError> {
    let events: Vec<_> = lines
        .iter()
        .filter_map(|l| match l {
            MetricLine::Event(e) => Some(e.clone()),
            _ => None,
        })
        .collect();
    write_csv(dir, output::RANKS, &output::rank_rows(&events))?;
    // The latest snapshot wins: final scores when the run finished, warm-up
    // scores otherwise.
    let Some((scores, noisy)) = lines.iter().rev().find_map(|l| match l {
        MetricLine::Quality { scores, noisy_ids, .. } => Some((scores, noisy_ids)),
        _ => None,
    }) else {
        return Err(CliError::config("metric stream holds no quality snapshot"));
    };
    let noisy: HashSet<u64> = noisy.iter().copied().collect();
    write_csv(dir, output::QUALITY, scores)?;
    write_csv(dir, output::QUALITY_HIST, &output::histogram(scores, &noisy, output::HIST_BINS))?;
    Ok(output::mean_q_by_noise(scores, &noisy))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_id: String,
    pub report: TrainReport,
    pub mean_q_noisy: Option<f64>,
    pub mean_q_clean: Option<f64>,
}

/// `train`: one full run with the metric stream and all summaries.
pub fn cmd_train(common: &Common) -> Result<TrainOutcome, CliError> {
    let prep = Prepared::new(common)?;
    prep.start_outputs(common, "train")?;
    let metrics_path = common.out.join(output::METRICS);
    let mut writer = MetricWriter::create(&metrics_path).map_err(|e| CliError::output(&metrics_path, e))?;
    let noisy = noisy_ids(&prep.train);
    let mut lines = Vec::new();
    let mut write_failure = None;
    let result = trainer::run_with(&prep.spec, &prep.train, &prep.eval, &prep.cfg.train, |m| {
        let line = match m {
            Metric::Warmup { records, subset } => MetricLine::Quality {
                phase: Phase::Warmup,
                scores: ScoreRow::rows(records, subset),
                noisy_ids: noisy.clone(),
            },
            Metric::Step(s) => MetricLine::Step(s.clone()),
            Metric::Event(e) => MetricLine::Event(e.clone()),
            Metric::Final {
                accuracy,
                active_params,
                records,
                subset,
            } => {
                let snapshot = MetricLine::Quality {
                    phase: Phase::Final,
                    scores: ScoreRow::rows(records, subset),
                    noisy_ids: noisy.clone(),
                };
                writer.write(&snapshot).map_err(|e| {
                    write_failure = Some(e.to_string());
                    tsqlora::Error::Contract("metric stream write failed".into())
                })?;
                lines.push(snapshot);
                MetricLine::Final {
                    accuracy,
                    active_params,
                }
            }
        };
        writer.write(&line).map_err(|e| {
            write_failure = Some(e.to_string());
            tsqlora::Error::Contract("metric stream write failed".into())
        })?;
        lines.push(line);
        Ok(())
    });
    if let Some(e) = write_failure {
        return Err(CliError::output(&metrics_path, e));
    }
    let (report, state) = result?;
    let (mean_q_noisy, mean_q_clean) = render_from_metrics(&common.out, &lines)?;
    let run_id = prep.cfg.run_id();
    let summary = output::SummaryRow {
        run_id: run_id.clone(),
        accuracy: report.accuracy,
        wall_clock_secs: report.wall_clock_secs,
        trainable_params: state.trainable_params(),
        max_trainable_params: report.max_trainable_params,
        samples_consumed: report.samples_drawn,
        unique_samples: report.unique_samples,
        samples_scored: report.samples_scored,
        mean_q_noisy,
        mean_q_clean,
    };
    write_csv(&common.out, output::SUMMARY, &[summary])?;
    log::info!(
        "run {run_id}: accuracy {:.4}, ranks {:?}",
        report.accuracy,
        report.final_ranks
    );
    Ok(TrainOutcome {
        run_id,
        report,
        mean_q_noisy,
        mean_q_clean,
    })
}

/// `score`: the warm-up quality scores alone, as `quality.csv`.
pub fn cmd_score(common: &Common) -> Result<Vec<ScoreRow>, CliError> {
    let prep = Prepared::new(common)?;
    let (records, subset) = trainer::warmup_scores(&prep.spec, &prep.train, &prep.cfg.train)?;
    let rows = ScoreRow::rows(&records, &subset);
    prep.start_outputs(common, "score")?;
    write_csv(&common.out, output::QUALITY, &rows)?;
    Ok(rows)
}

/// `ablate`: paired full / sensitivity-off runs over `n_seeds` consecutive
/// seeds starting at the run seed.
pub fn cmd_ablate(common: &Common, n_seeds: usize) -> Result<trainer::AblationReport, CliError> {
    if n_seeds == 0 {
        return Err(CliError::config("--n-seeds must be at least 1"));
    }
    let prep = Prepared::new(common)?;
    let base = prep.cfg.train.seed;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| base.wrapping_add(k)).collect();
    let mut data = HashMap::new();
    for &s in &seeds {
        let cfg = prep.cfg.with_seed(s, prep.pinned_data_seed);
        let sets = cfg.datasets()?;
        cfg.train.validate(sets.0.len())?;
        data.insert(s, sets);
    }
    prep.start_outputs(common, "ablate")?;
    let report = trainer::ablate(&prep.spec, &prep.cfg.train, &seeds, |s| {
        Ok(data.remove(&s).expect("datasets prepared for every seed"))
    })?;
    let mut rows: Vec<output::AblationRow> = report
        .rows
        .iter()
        .map(|r| output::AblationRow {
            seed: r.seed.to_string(),
            acc_full: r.full.accuracy,
            acc_no_sensitivity: r.no_sensitivity.accuracy,
            delta: r.delta(),
        })
        .collect();
    rows.push(output::AblationRow {
        seed: "mean".into(),
        acc_full: report.mean_full(),
        acc_no_sensitivity: report.mean_no_sensitivity(),
        delta: report.mean_delta(),
    });
    write_csv(&common.out, output::ABLATION, &rows)?;
    Ok(report)
}

/// `compare`: the full method against fixed-rank uniform-sampling training.
/// The quality-driven budget scaling is switched off so both arms spend the
/// same total rank.
pub fn cmd_compare(common: &Common) -> Result<Vec<output::CompareRow>, CliError> {
    let prep = Prepared::new(common)?;
    prep.start_outputs(common, "compare")?;
    let mut full = prep.cfg.train.clone();
    full.allocator.kappa = 0.0;
    let arms: [(&str, TrainConfig); 2] = [("tsqlora", full.clone()), ("lora", full.baseline())];
    let mut rows = Vec::with_capacity(2);
    for (name, cfg) in arms {
        let (report, _) = trainer::run(&prep.spec, &prep.train, &prep.eval, &cfg)?;
        rows.push(output::CompareRow {
            arm: name.into(),
            accuracy: report.accuracy,
            samples_consumed: report.samples_drawn,
            unique_samples: report.unique_samples,
            samples_per_second: report.samples_drawn as f64 / report.wall_clock_secs.max(1e-9),
            max_trainable_params: report.max_trainable_params,
            wall_clock_secs: report.wall_clock_secs,
        });
    }
    if rows[0].max_trainable_params != rows[1].max_trainable_params {
        log::warn!(
            "parameter budgets differ ({} vs {}): adapted layers have unequal shapes",
            rows[0].max_trainable_params,
            rows[1].max_trainable_params
        );
    }
    write_csv(&common.out, output::COMPARE, &rows)?;
    Ok(rows)
}

/// `report`: re-renders the CSV views from `DIR/metrics.jsonl`.
pub fn cmd_report(out: &Path) -> Result<(Option<f64>, Option<f64>), CliError> {
    let lines = output::read_metrics(&out.join(output::METRICS)).map_err(|m| CliError {
        code: CliError::DATA,
        message: m,
    })?;
    render_from_metrics(out, &lines)
}
