//! The end-to-end training loop: warm-up scoring, quality-weighted
//! minibatches, per-step sensitivity tracking, and scheduled rank
//! re-allocation with optional score refresh.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{self, AllocatorConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mix, ModelSpec, ModelState};
use crate::quality::{self, DataSubset, GradientEma, QualityConfig, QualityRecord};
use crate::sensitivity::{self, Estimator, SensitivityStats};

const SAMPLING_STREAM: u64 = 0x5a;
const REFRESH_STREAM: u64 = 0x7f;
const MODEL_STREAM: u64 = 0x11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// When set, overrides `iterations` with `epochs · ⌈n / batch_size⌉`.
    pub epochs: Option<usize>,
    /// Adjustment steps; every `⌈I/10⌉` steps (before the last) when unset.
    pub schedule: Option<Vec<usize>>,
    pub batch_size: usize,
    pub lr: f64,
    /// Rescales the minibatch gradient to at most this global norm; `inf`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub quality_sampling: bool,
    pub sensitivity_aware: bool,
    pub estimator: Estimator,
    /// Fraction of the pool re-scored at each adjustment; 0 disables.
    pub refresh_fraction: f64,
    /// Worker threads for pool scoring.
    pub threads: usize,
    pub quality: QualityConfig,
    pub allocator: AllocatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1200,
            epochs: None,
            schedule: None,
            batch_size: 64,
            lr: 0.2,
            grad_clip: Some(1.0),
            seed: 0,
            quality_sampling: true,
            sensitivity_aware: true,
            estimator: Estimator::GradWeight,
            refresh_fraction: 0.0,
            threads: 1,
            quality: QualityConfig::default(),
            allocator: AllocatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The fixed-rank, uniformly sampled baseline with otherwise equal settings.
    pub fn baseline(&self) -> Self {
        TrainConfig {
            quality_sampling: false,
            sensitivity_aware: false,
            ..self.clone()
        }
    }

    pub fn iterations_for(&self, pool: usize) -> usize {
        match self.epochs {
            Some(e) => e * pool.div_ceil(self.batch_size.max(1)),
            None => self.iterations,
        }
    }

    pub fn schedule_for(&self, iterations: usize) -> Vec<usize> {
        match &self.schedule {
            Some(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s
            }
            None => default_schedule(iterations),
        }
    }

    pub fn validate(&self, pool: usize) -> Result<()> {
        let iterations = self.iterations_for(pool);
        if iterations == 0 {
            return Err(Error::Config("iterations must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.batch_size > pool {
            return Err(Error::Config(format!(
                "batch size {} exceeds training pool of {pool}",
                self.batch_size
            )));
        }
        if let Some(bad) = self
            .schedule_for(iterations)
            .into_iter()
            .find(|&t| t == 0 || t > iterations)
        {
            return Err(Error::Config(format!(
                "adjustment step {bad} outside 1..={iterations}"
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&self.refresh_fraction) {
            return Err(Error::Config("refresh_fraction must be in [0, 1]".into()));
        }
        self.quality.validate()?;
        self.allocator.validate()
    }
}

/// Every `⌈I/10⌉` steps, strictly before the final step.
pub fn default_schedule(iterations: usize) -> Vec<usize> {
    let period = iterations.div_ceil(10).max(1);
    (1..)
        .map(|k| k * period)
        .take_while(|&t| t < iterations)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub active_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEvent {
    pub layer: usize,
    /// Latest grad-weight score.
    pub raw: f64,
    /// Latest Fisher trace.
    pub fisher: f64,
    pub smoothed: f64,
    /// Normalized smoothed score in (0, 1).
    pub sensitivity: f64,
    /// Continuous target rank; absent when allocation is disabled.
    pub target: Option<f64>,
    pub old_rank: usize,
    pub assigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentEvent {
    pub step: usize,
    pub mean_quality: f64,
    pub phi: Option<f64>,
    pub layers: Vec<LayerEvent>,
    pub active_params: usize,
    pub refreshed: usize,
}

/// Observations emitted while a run progresses, in order.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    Warmup {
        records: &'a [QualityRecord],
        subset: &'a DataSubset,
    },
    Step(&'a StepRecord),
    Event(&'a AdjustmentEvent),
    Final {
        accuracy: f64,
        active_params: usize,
        records: &'a [QualityRecord],
        subset: &'a DataSubset,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub events: Vec<AdjustmentEvent>,
    pub warmup: Vec<QualityRecord>,
    pub warmup_probs: Vec<f64>,
    /// Scores after the last refresh (equal to `warmup` without refreshes).
    pub final_quality: Vec<QualityRecord>,
    pub accuracy: f64,
    pub wall_clock_secs: f64,
    pub samples_drawn: usize,
    /// Distinct training samples that appeared in at least one minibatch.
    pub unique_samples: usize,
    pub samples_scored: usize,
    pub max_trainable_params: usize,
    /// `(layer, rank)` at the end of training.
    pub final_ranks: Vec<(usize, usize)>,
    /// Smoothed per-layer sensitivity at the end of training.
    pub final_sensitivity: Vec<f64>,
}

impl TrainReport {
    pub fn trainable_param_trajectory(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.active_params).collect()
    }
}

/// Fraction of argmax-correct rows; ties go to the lowest class index.
pub fn accuracy_from_logits(logits: &crate::numerics::Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(state: &ModelState, eval: &Dataset) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = state.forward(eval.features())?;
    Ok(accuracy_from_logits(&logits, eval.labels()))
}

/// The model every run with this config starts from.
pub fn initial_state(spec: &ModelSpec, cfg: &TrainConfig) -> Result<ModelState> {
    let alloc = cfg.allocator.resolved();
    alloc.validate()?;
    ModelState::init(spec, alloc.r_init, alloc.capacity(), mix(cfg.seed, MODEL_STREAM))
}

/// Warm-up scores of `train` at the initial state, and the distribution they
/// induce; identical to what [`run_with`] reports.
pub fn warmup_scores(spec: &ModelSpec, train: &Dataset, cfg: &TrainConfig) -> Result<(Vec<QualityRecord>, DataSubset)> {
    let state = initial_state(spec, cfg)?;
    let records = quality::score_pool(&state, train, &cfg.quality, None, cfg.threads)?;
    let subset = quality::sampling_distribution(&records, cfg.quality.tau)?;
    Ok((records, subset))
}

/// [`run_with`] without an observer.
pub fn run(spec: &ModelSpec, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<(TrainReport, ModelState)> {
    run_with(spec, train, eval, cfg, |_| Ok(()))
}

/// Trains adapters on `train` and evaluates on `eval`, reporting progress to
/// `observe` as it happens.
pub fn run_with(
    spec: &ModelSpec,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(Metric<'_>) -> Result<()>,
) -> Result<(TrainReport, ModelState)> {
    spec.validate()?;
    cfg.validate(train.len())?;
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.dim() != spec.input_width() || eval.dim() != spec.input_width() {
        return Err(Error::Config(format!(
            "dataset width {} does not match model input width {}",
            train.dim(),
            spec.input_width()
        )));
    }
    if train.classes() > spec.classes() || eval.classes() > spec.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model outputs {}",
            train.classes().max(eval.classes()),
            spec.classes()
        )));
    }
    let started = Instant::now();
    let iterations = cfg.iterations_for(train.len());
    let schedule = cfg.schedule_for(iterations);
    let alloc = cfg.allocator.resolved();
    let mut state = initial_state(spec, cfg)?;
    let base_checksum = state.base_checksum();

    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SAMPLING_STREAM));
    let mut refresh_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, REFRESH_STREAM));
    let mut grad_ema = GradientEma::new(cfg.quality.ema_decay);
    let mut sens = SensitivityStats::new(state.adapted_layers(), alloc.sensitivity_beta, cfg.estimator)?;

    let warmup = quality::score_pool(&state, train, &cfg.quality, None, cfg.threads)?;
    let warm_subset = quality::sampling_distribution(&warmup, cfg.quality.tau)?;
    observe(Metric::Warmup {
        records: &warmup,
        subset: &warm_subset,
    })?;
    let mut records = warmup.clone();
    let mut subset = if cfg.quality_sampling {
        warm_subset.clone()
    } else {
        DataSubset::uniform(warm_subset.ids.clone())?
    };
    let mut samples_scored = train.len();
    let index = train.id_index();
    let mut seen = vec![false; train.len()];

    let mut steps = Vec::with_capacity(iterations);
    let mut events = Vec::with_capacity(schedule.len());
    let mut max_params = state.trainable_params();
    let mut next_event = schedule.iter().peekable();

    for step in 1..=iterations {
        let ids = quality::draw_minibatch(&subset, cfg.batch_size, &mut sample_rng)?;
        let rows: Vec<usize> = ids.iter().map(|id| index[id]).collect();
        for &r in &rows {
            seen[r] = true;
        }
        let batch = train.batch(&rows)?;
        let (loss, mut grads) = state.gradient(&batch, false)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let scores = sensitivity::probe_layers(&state, &batch)?;
        sens.observe(&scores)?;
        grad_ema.update(&grads.flatten());
        state.sgd_step(&grads, cfg.lr)?;

        let record = StepRecord {
            step,
            loss,
            active_params: state.trainable_params(),
        };
        observe(Metric::Step(&record))?;
        steps.push(record);

        if next_event.peek() == Some(&&step) {
            next_event.next();
            let event = adjust(
                step,
                &mut state,
                &mut sens,
                &mut records,
                &mut subset,
                &grad_ema,
                train,
                cfg,
                &alloc,
                &mut refresh_rng,
            )?;
            samples_scored += event.refreshed;
            max_params = max_params.max(event.active_params);
            observe(Metric::Event(&event))?;
            events.push(event);
        }
    }

    if state.base_checksum() != base_checksum {
        return Err(Error::Contract("frozen base weights changed during training".into()));
    }
    let accuracy = evaluate(&state, eval)?;
    observe(Metric::Final {
        accuracy,
        active_params: state.trainable_params(),
        records: &records,
        subset: &subset,
    })?;
    let report = TrainReport {
        steps,
        events,
        warmup,
        warmup_probs: warm_subset.probs,
        final_quality: records,
        accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        samples_drawn: iterations * cfg.batch_size,
        unique_samples: seen.iter().filter(|&&s| s).count(),
        samples_scored,
        max_trainable_params: max_params,
        final_ranks: state.ranks(),
        final_sensitivity: sens.smoothed.clone(),
    };
    Ok((report, state))
}

#[allow(clippy::too_many_arguments)]
fn adjust(
    step: usize,
    state: &mut ModelState,
    sens: &mut SensitivityStats,
    records: &mut Vec<QualityRecord>,
    subset: &mut DataSubset,
    grad_ema: &GradientEma,
    train: &Dataset,
    cfg: &TrainConfig,
    alloc: &AllocatorConfig,
    refresh_rng: &mut ChaCha8Rng,
) -> Result<AdjustmentEvent> {
    let normalized = sens.renormalize()?.to_vec();
    let mean_quality = quality::mean_normalized_quality(records, subset);
    let before = state.ranks();
    let (phi, targets) = if cfg.sensitivity_aware {
        let phi = allocator::phi(mean_quality, alloc)?;
        let plan = allocator::allocate(&sens.layers, &normalized, phi, alloc)?;
        for change in allocator::plan_to_changes(&plan, &before)? {
            let applied = state.set_rank(change.layer, change.new_rank)?;
            log::debug!(
                "step {step}: layer {} rank {} -> {} (dropped {:?}, revived {:?})",
                applied.layer,
                applied.old_rank,
                applied.new_rank,
                applied.dropped,
                applied.revived
            );
        }
        (Some(phi), Some(plan.targets))
    } else {
        (None, None)
    };
    let after = state.ranks();

    let mut refreshed = 0;
    if cfg.quality_sampling && cfg.refresh_fraction > 0.0 {
        let r = quality::refresh_scores(
            state,
            train,
            records,
            &cfg.quality,
            grad_ema.value(),
            cfg.refresh_fraction,
            refresh_rng,
            cfg.threads,
        )?;
        refreshed = r.rescored.len();
        *records = r.records;
        *subset = r.subset;
    }

    let layers = sens
        .layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| LayerEvent {
            layer,
            raw: sens.raw[k],
            fisher: sens.fisher[k],
            smoothed: sens.smoothed.get(k).copied().unwrap_or(0.0),
            sensitivity: normalized[k],
            target: targets.as_ref().map(|t| t[k]),
            old_rank: before[k].1,
            assigned: after[k].1,
        })
        .collect();
    Ok(AdjustmentEvent {
        step,
        mean_quality,
        phi,
        layers,
        active_params: state.trainable_params(),
        refreshed,
    })
}

/// Paired outcome of the sensitivity ablation for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub full: TrainReport,
    pub no_sensitivity: TrainReport,
}

impl AblationRow {
    pub fn delta(&self) -> f64 {
        self.full.accuracy - self.no_sensitivity.accuracy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_full(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.full.accuracy))
    }

    pub fn mean_no_sensitivity(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.no_sensitivity.accuracy))
    }

    pub fn mean_delta(&self) -> f64 {
        mean(self.rows.iter().map(AblationRow::delta))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs `cfg` and its sensitivity-off twin on identical data and seeds.
pub fn ablate(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut data: impl FnMut(u64) -> Result<(Dataset, Dataset)>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, eval) = data(seed)?;
        let full_cfg = TrainConfig { seed, ..cfg.clone() };
        let off_cfg = TrainConfig {
            sensitivity_aware: false,
            ..full_cfg.clone()
        };
        let (full, _) = run(spec, &train, &eval, &full_cfg)?;
        let (no_sensitivity, _) = run(spec, &train, &eval, &off_cfg)?;
        rows.push(AblationRow {
            seed,
            full,
            no_sensitivity,
        });
    }
    Ok(AblationReport { rows })
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side has no spread.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}
