//! Output file formats: the JSON-lines metric stream and the CSV summaries
//! derived from it.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsqlora::quality::{DataSubset, QualityRecord};
use tsqlora::trainer::{AdjustmentEvent, StepRecord};

pub const METRICS: &str = "metrics.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";
pub const RANKS: &str = "ranks.csv";
pub const QUALITY: &str = "quality.csv";
pub const QUALITY_HIST: &str = "quality_hist.csv";
pub const ABLATION: &str = "ablation.csv";
pub const COMPARE: &str = "compare.csv";

pub const HIST_BINS: usize = 30;

/// One scored sample as written to `quality.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: u64,
    pub grad_norm: f64,
    pub loss_reduction: f64,
    pub convergence_contrib: f64,
    pub q: f64,
    pub p: f64,
}

impl ScoreRow {
    pub fn rows(records: &[QualityRecord], subset: &DataSubset) -> Vec<ScoreRow> {
        records
            .iter()
            .zip(&subset.probs)
            .map(|(r, &p)| ScoreRow {
                sample_id: r.sample_id,
                grad_norm: r.grad_norm,
                loss_reduction: r.loss_reduction,
                convergence_contrib: r.convergence_contrib,
                q: r.q,
                p,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Final,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricLine {
    Quality {
        phase: Phase,
        scores: Vec<ScoreRow>,
        /// Ids of samples carrying injected label noise.
        noisy_ids: Vec<u64>,
    },
    Step(StepRecord),
    Event(AdjustmentEvent),
    Final { accuracy: f64, active_params: usize },
}

pub struct MetricWriter {
    out: BufWriter<File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(MetricWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Writes one line; flushed immediately so a crash leaves a valid prefix.
    pub fn write(&mut self, line: &MetricLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Reads a metric stream. A truncated final line (an interrupted run) is
/// skipped; malformed lines elsewhere are errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>, String> {
    let file = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(m) => out.push(m),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("ignoring truncated last line of {}: {e}", path.display());
            }
            Err(e) => return Err(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub noisy: usize,
    pub clean: usize,
}

/// Equal-width histogram of `q` over `[min, max]`; the top edge is closed.
pub fn histogram(scores: &[ScoreRow], noisy: &HashSet<u64>, bins: usize) -> Vec<HistBin> {
    let lo = scores.iter().map(|s| s.q).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.q).fold(f64::NEG_INFINITY, f64::max);
    let (lo, width) = if scores.is_empty() {
        (0.0, 0.0)
    } else {
        (lo, (hi - lo) / bins as f64)
    };
    let mut out: Vec<HistBin> = (0..bins)
        .map(|b| HistBin {
            bin: b,
            lower: lo + width * b as f64,
            upper: if b + 1 == bins { lo + width * bins as f64 } else { lo + width * (b + 1) as f64 },
            count: 0,
            noisy: 0,
            clean: 0,
        })
        .collect();
    for s in scores {
        let b = if width > 0.0 {
            (((s.q - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        out[b].count += 1;
        if noisy.contains(&s.sample_id) {
            out[b].noisy += 1;
        } else {
            out[b].clean += 1;
        }
    }
    out
}

/// Mean `q` of noisy and clean samples; `None` for an empty group.
pub fn mean_q_by_noise(scores: &[ScoreRow], noisy: &HashSet<u64>) -> (Option<f64>, Option<f64>) {
    let (mut sn, mut nn, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for s in scores {
        if noisy.contains(&s.sample_id) {
            sn += s.q;
            nn += 1;
        } else {
            sc += s.q;
            nc += 1;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (avg(sn, nn), avg(sc, nc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub step: usize,
    pub layer: usize,
    pub sensitivity: f64,
    pub smoothed: f64,
    pub raw: f64,
    pub fisher: f64,
    pub target: Option<f64>,
    pub rank: usize,
}

pub fn rank_rows(events: &[AdjustmentEvent]) -> Vec<RankRow> {
    events
        .iter()
        .flat_map(|e| {
            e.layers.iter().map(move |l| RankRow {
                step: e.step,
                layer: l.layer,
                sensitivity: l.sensitivity,
                smoothed: l.smoothed,
                raw: l.raw,
                fisher: l.fisher,
                target: l.target,
                rank: l.assigned,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub accuracy: f64,
    pub wall_clock_secs: f64,
    pub trainable_params: usize,
    pub max_trainable_params: usize,
    pub samples_consumed: usize,
    pub unique_samples: usize,
    pub samples_scored: usize,
    pub mean_q_noisy: Option<f64>,
    pub mean_q_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: String,
    pub acc_full: f64,
    pub acc_no_sensitivity: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub arm: String,
    pub accuracy: f64,
    pub samples_consumed: usize,
    pub unique_samples: usize,
    pub samples_per_second: f64,
    pub max_trainable_params: usize,
    pub wall_clock_secs: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| format!("{}: {e}", path.display()))
}
