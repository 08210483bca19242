//! End-to-end orchestration over in-memory data: validate, label, split,
//! encode, compress, weigh, batch, train, predict, baseline and evaluate.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{compress_stream, CompressionConfig, CompressionReport};
use crate::encoder::{EmptyColumn, EncodeError, EncoderSettings, EncoderState, SampleRow};
use crate::eval::{baseline_predict, macro_auc, AucTable, BaselineTable, EvalError, EvalReport, Prediction};
use crate::event_model::{split_dataset, validate_stream, DatasetSplit, Schema, Segment, SensorEvent, SplitError, SplitSpec, UserProfile, ValidatedStream, ValidationReport};
use crate::ground_truth::{label_all, LabelReport, LabelSpec, LabeledEvent, Labeling};
use crate::rnn::{cross_entropy, predict_stream, train, EpochMetrics, ModelConfig, ModelParams, RnnError, TrainConfig, Validation};
use crate::sequencer::{BatchPlan, SequencerConfig};
use crate::synth::SynthConfig;
use crate::weighting::{apply_weights, compute_weights, WeightError, WeightStrategy, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub dense_units: usize,
    pub lstm_layers: usize,
    pub lstm_units: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            dense_units: 16,
            lstm_layers: 2,
            lstm_units: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub model: u64,
    pub baseline: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 11,
            model: 13,
            baseline: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Sensor schema file; the built-in phone schema when unset.
    pub schema_path: Option<PathBuf>,
    pub labels: LabelSpec,
    pub encoder: EncoderSettings,
    pub compress: bool,
    pub compression: CompressionConfig,
    pub weights: WeightStrategy,
    pub sequencer: SequencerConfig,
    pub model: ModelSizes,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub unknown_fraction: f64,
    pub seeds: Seeds,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_path: None,
            labels: LabelSpec::default(),
            encoder: EncoderSettings::default(),
            compress: true,
            compression: CompressionConfig::default(),
            weights: WeightStrategy::InverseLogFrequency,
            sequencer: SequencerConfig {
                sequence_length: 32,
                batch_size: 4,
            },
            model: ModelSizes::default(),
            train: TrainConfig::default(),
            split: SplitSpec {
                train_days: 7,
                valid_days: 3,
                test_days: 4,
            },
            unknown_fraction: 22.0 / 279.0,
            seeds: Seeds::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.unknown_fraction) {
            return bad(format!("unknown_fraction {} outside [0, 1]", self.unknown_fraction));
        }
        if !(0.0..=1.0).contains(&self.encoder.cap_percentile) || self.encoder.cap_percentile == 0.0 {
            return bad(format!("cap_percentile {} outside (0, 1]", self.encoder.cap_percentile));
        }
        if self.encoder.delta_cap_minutes <= 0.0 {
            return bad("delta_cap_minutes must be positive".into());
        }
        if self.compression.threshold_minutes.is_some_and(|t| t <= 0.0) {
            return bad("compression threshold must be positive".into());
        }
        if self.sequencer.sequence_length == 0 || self.sequencer.batch_size == 0 {
            return bad("sequence_length and batch_size must be at least 1".into());
        }
        if self.model.dense_units == 0 || self.model.lstm_layers == 0 || self.model.lstm_units == 0 {
            return bad("model sizes must be at least 1".into());
        }
        if self.split.total_days() == 0 {
            return bad("split covers no days".into());
        }
        let adam = &self.train.adam;
        if !(adam.learning_rate.is_finite() && adam.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", adam.learning_rate));
        }
        if !((0.0..1.0).contains(&adam.beta1) && (0.0..1.0).contains(&adam.beta2)) || adam.epsilon <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and epsilon be positive".into());
        }
        if self.labels.window_minutes <= 0.0 {
            return bad("label window must be positive".into());
        }
        Ok(())
    }

    /// Compression settings tied to the encoder's delta cap.
    pub fn compression_config(&self) -> CompressionConfig {
        CompressionConfig {
            delta_cap_minutes: self.encoder.delta_cap_minutes,
            ..self.compression
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            dense_units: self.model.dense_units,
            lstm_layers: self.model.lstm_layers,
            lstm_units: self.model.lstm_units,
            seed: self.seeds.model,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One user's encoded rows, grouped by segment in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRows {
    pub user_id: Arc<str>,
    pub unknown: bool,
    /// Labeled rows earlier than this only warm up state.
    pub score_from_ms: i64,
    pub segments: Vec<(Segment, Vec<SampleRow>)>,
}

impl UserRows {
    pub fn rows(&self, segment: Segment) -> Option<&[SampleRow]> {
        self.segments.iter().find(|(s, _)| *s == segment).map(|(_, r)| r.as_slice())
    }

    pub fn row_count(&self) -> usize {
        self.segments.iter().map(|(_, r)| r.len()).sum()
    }

    /// Rows of every segment up to and including `segment`, and the index
    /// where `segment` starts.
    pub fn history(&self, segment: Segment) -> Option<(Vec<SampleRow>, usize)> {
        let pos = self.segments.iter().position(|(s, _)| *s == segment)?;
        let mut rows = Vec::new();
        for (_, r) in &self.segments[..pos] {
            rows.extend_from_slice(r);
        }
        let start = rows.len();
        rows.extend_from_slice(&self.segments[pos].1);
        Some((rows, start))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub users: Vec<UserRows>,
}

impl Dataset {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn row_count(&self) -> usize {
        self.users.iter().map(UserRows::row_count).sum()
    }

    pub fn labeled_count(&self) -> usize {
        self.users
            .iter()
            .flat_map(|u| u.segments.iter().flat_map(|(_, r)| r.iter()))
            .filter(|r| r.is_labeled())
            .count()
    }

    /// Training rows of every known user.
    pub fn training_rows(&self) -> Vec<(Arc<str>, Vec<SampleRow>)> {
        self.users
            .iter()
            .filter(|u| !u.unknown)
            .filter_map(|u| u.rows(Segment::Train).map(|r| (u.user_id.clone(), r.to_vec())))
            .filter(|(_, r)| !r.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: Schema,
    pub validation: ValidationReport,
    pub split: DatasetSplit,
    pub labeling: BTreeMap<String, Labeling>,
    pub label_report: LabelReport,
    pub encoder: EncoderState,
    pub empty_columns: Vec<EmptyColumn>,
    pub event_count: usize,
    pub dataset: Dataset,
}

pub fn load_schema(cfg: &PipelineConfig) -> Result<Schema, PipelineError> {
    match &cfg.schema_path {
        None => Ok(Schema::default_phone()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            Schema::from_toml_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
        }
    }
}

/// Groups encoded rows by the split's segments.
pub fn segment_rows(user: &str, rows: Vec<SampleRow>, split: &DatasetSplit) -> Option<UserRows> {
    let plan = split.users.get(user)?;
    let mut segments: Vec<(Segment, Vec<SampleRow>)> = Vec::new();
    for row in rows {
        let seg = split.segment_of(user, row.wall_time_ms)?;
        match segments.last_mut() {
            Some((s, v)) if *s == seg => v.push(row),
            _ => segments.push((seg, vec![row])),
        }
    }
    Some(UserRows {
        user_id: Arc::from(user),
        unknown: plan.unknown,
        score_from_ms: if plan.unknown { plan.valid_end_ms } else { plan.start_ms },
        segments,
    })
}

/// Split and labels derived from a validated stream.
#[derive(Debug, Clone)]
pub struct LabelStage {
    pub split: DatasetSplit,
    pub labeling: BTreeMap<String, Labeling>,
    pub report: LabelReport,
}

impl LabelStage {
    pub fn labels(&self) -> BTreeMap<String, Vec<LabeledEvent>> {
        self.labeling.iter().map(|(u, l)| (u.clone(), l.labels.clone())).collect()
    }
}

pub fn label_stage(stream: &ValidatedStream, cfg: &PipelineConfig) -> Result<LabelStage, PipelineError> {
    if stream.event_count() == 0 {
        return Err(PipelineError::Data("no valid events".into()));
    }
    let split = split_dataset(stream, cfg.split, cfg.unknown_fraction, cfg.seeds.split)?;
    if split.users.is_empty() {
        return Err(PipelineError::Data(format!(
            "no user spans the {} days of the split",
            cfg.split.total_days()
        )));
    }
    let labeling = label_all(&stream.users, &cfg.labels);
    let mut report = LabelReport::default();
    for l in labeling.values() {
        report.merge(&l.report);
    }
    Ok(LabelStage { split, labeling, report })
}

/// Fits the encoder on the training range of known users and encodes every
/// user in the split.
pub fn encode_dataset(
    users: &BTreeMap<String, Vec<SensorEvent>>,
    profiles: &[UserProfile],
    split: &DatasetSplit,
    labels: &BTreeMap<String, Vec<LabeledEvent>>,
    schema: &Schema,
    settings: &EncoderSettings,
) -> Result<(EncoderState, Vec<EmptyColumn>, Dataset), PipelineError> {
    let training = users
        .iter()
        .filter(|(u, _)| split.users.get(*u).is_some_and(|p| !p.unknown))
        .flat_map(|(u, evs)| {
            let end = split.users[u].train_end_ms;
            evs.iter().take_while(move |e| e.timestamp_ms < end)
        });
    let (encoder, empty_columns) = EncoderState::fit(training, profiles, schema, settings.clone())?;
    let by_user: BTreeMap<&str, &UserProfile> = profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
    let rows: Vec<UserRows> = split
        .users
        .keys()
        .map(|u| {
            let events = users
                .get(u)
                .ok_or_else(|| PipelineError::Data(format!("user {u} in split has no events")))?;
            let user_labels = labels.get(u).map_or(&[][..], Vec::as_slice);
            let rows = encoder.encode_stream(events, user_labels, by_user.get(u.as_str()).copied())?;
            Ok(segment_rows(u, rows, split).expect("user is in split"))
        })
        .collect::<Result<_, PipelineError>>()?;
    let dataset = Dataset {
        columns: encoder.column_names().iter().map(|s| s.to_string()).collect(),
        users: rows,
    };
    Ok((encoder, empty_columns, dataset))
}

/// Validation through encoding.
pub fn prepare(events: Vec<SensorEvent>, profiles: &[UserProfile], schema: Schema, cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    cfg.check()?;
    let stream = validate_stream(events, &schema);
    let labeled = label_stage(&stream, cfg)?;
    let (encoder, empty_columns, dataset) = encode_dataset(
        &stream.users,
        profiles,
        &labeled.split,
        &labeled.labels(),
        &schema,
        &cfg.encoder,
    )?;
    Ok(Prepared {
        schema,
        event_count: stream.event_count(),
        validation: stream.report,
        split: labeled.split,
        labeling: labeled.labeling,
        label_report: labeled.report,
        dataset,
        encoder,
        empty_columns,
    })
}

/// Compresses each (user, segment) run separately.
pub fn compress_dataset(ds: &Dataset, cfg: &CompressionConfig) -> (Dataset, CompressionReport) {
    let mut report = CompressionReport::default();
    let users = ds
        .users
        .iter()
        .map(|u| UserRows {
            segments: u
                .segments
                .iter()
                .map(|(s, rows)| {
                    let (out, r) = compress_stream(rows, cfg);
                    report.merge(&r);
                    (*s, out)
                })
                .collect(),
            ..u.clone()
        })
        .collect();
    (
        Dataset {
            columns: ds.columns.clone(),
            users,
        },
        report,
    )
}

/// Derives weights from known users' training rows and writes them onto
/// those rows.
pub fn weigh_dataset(ds: &mut Dataset, strategy: WeightStrategy) -> Result<WeightTable, PipelineError> {
    let table = compute_weights(
        ds.users
            .iter()
            .filter(|u| !u.unknown)
            .filter_map(|u| u.rows(Segment::Train)),
        strategy,
    );
    for u in ds.users.iter_mut().filter(|u| !u.unknown) {
        for (s, rows) in &mut u.segments {
            if *s == Segment::Train {
                apply_weights(rows, &table)?;
            }
        }
    }
    Ok(table)
}

/// A labeled, scored row with its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub user_id: String,
    pub segment: Segment,
    pub wall_time_ms: i64,
    pub category: String,
    pub label: u8,
    pub score: f64,
}

impl ScoredRow {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            user_id: self.user_id.clone(),
            category: self.category.clone(),
            score: self.score,
            label: self.label,
        }
    }
}

pub const SCORED_HEADER: &str = "user_id\tsegment\twall_time_ms\tcategory\tlabel\tscore";

pub fn scored_to_text(rows: &[ScoredRow]) -> String {
    let mut s = format!("{SCORED_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:?}\n",
            r.user_id,
            r.segment.as_str(),
            r.wall_time_ms,
            r.category,
            r.label,
            r.score
        ));
    }
    s
}

pub fn scored_from_text(text: &str) -> Result<Vec<ScoredRow>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split('\t').collect();
        let bad = || PipelineError::Data(format!("predictions line {}: `{line}`", i + 1));
        if p.len() != 6 {
            return Err(bad());
        }
        out.push(ScoredRow {
            user_id: p[0].to_string(),
            segment: Segment::parse(p[1]).ok_or_else(bad)?,
            wall_time_ms: p[2].parse().map_err(|_| bad())?,
            category: p[3].to_string(),
            label: p[4].parse().map_err(|_| bad())?,
            score: p[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub const EVAL_SEGMENTS: [Segment; 3] = [Segment::Valid, Segment::KnownTest, Segment::UnknownTest];

/// Model probabilities for the scored labeled rows of `segment`, after
/// replaying each user's earlier segments to warm up state.
pub fn predict_segment(ds: &Dataset, params: &ModelParams, segment: Segment) -> Vec<ScoredRow> {
    let per_user: Vec<Vec<ScoredRow>> = ds
        .users
        .par_iter()
        .map(|u| {
            let Some((rows, start)) = u.history(segment) else {
                return Vec::new();
            };
            let probs = predict_stream(params, &rows);
            rows.iter()
                .zip(probs)
                .skip(start)
                .filter(|(r, _)| r.wall_time_ms >= u.score_from_ms)
                .filter_map(|(r, p)| {
                    r.y.map(|y| ScoredRow {
                        user_id: u.user_id.to_string(),
                        segment,
                        wall_time_ms: r.wall_time_ms,
                        category: r.category.as_deref().unwrap_or("").to_string(),
                        label: y,
                        score: p,
                    })
                })
                .collect()
        })
        .collect();
    per_user.into_iter().flatten().collect()
}

pub fn predict_all(ds: &Dataset, params: &ModelParams) -> Vec<ScoredRow> {
    EVAL_SEGMENTS.iter().flat_map(|s| predict_segment(ds, params, *s)).collect()
}

/// Click rates from known users' training labels.
pub fn fit_baseline(ds: &Dataset) -> BaselineTable {
    let labels: Vec<(Arc<str>, Arc<str>, u8)> = ds
        .users
        .iter()
        .filter(|u| !u.unknown)
        .filter_map(|u| u.rows(Segment::Train))
        .flatten()
        .filter_map(|r| Some((r.user_id.clone(), r.category.clone().unwrap_or_else(|| Arc::from("")), r.y?)))
        .collect();
    BaselineTable::fit(labels.iter().map(|(u, c, y)| (&**u, &**c, *y)))
}

/// Hard 0/1 baseline draws for every scored labeled row of the evaluation
/// segments, in dataset order.
pub fn baseline_scores(ds: &Dataset, table: &BaselineTable, seed: u64) -> Vec<ScoredRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for segment in EVAL_SEGMENTS {
        for u in &ds.users {
            let Some(rows) = u.rows(segment) else { continue };
            for r in rows.iter().filter(|r| r.wall_time_ms >= u.score_from_ms) {
                let Some(y) = r.y else { continue };
                let category = r.category.as_deref().unwrap_or("");
                out.push(ScoredRow {
                    user_id: u.user_id.to_string(),
                    segment,
                    wall_time_ms: r.wall_time_ms,
                    category: category.to_string(),
                    label: y,
                    score: f64::from(baseline_predict(&u.user_id, category, table, &mut rng)),
                });
            }
        }
    }
    out
}

/// Macro-AUC report per evaluation segment (`None` when no group has both
/// classes).
pub fn evaluate(scored: &[ScoredRow]) -> [Option<EvalReport>; 3] {
    EVAL_SEGMENTS.map(|s| {
        let preds: Vec<Prediction> = scored.iter().filter(|r| r.segment == s).map(ScoredRow::prediction).collect();
        macro_auc(&preds).ok()
    })
}

pub fn macro_aucs(reports: &[Option<EvalReport>; 3]) -> [Option<f64>; 3] {
    [0, 1, 2].map(|i| reports[i].as_ref().map(|r| r.macro_auc))
}

fn validation_of(ds: &Dataset, params: &ModelParams) -> Option<Validation> {
    let scored = predict_segment(ds, params, Segment::Valid);
    if scored.is_empty() {
        return None;
    }
    let loss = scored.iter().map(|r| cross_entropy(r.score, r.label)).sum::<f64>() / scored.len() as f64;
    let preds: Vec<Prediction> = scored.iter().map(ScoredRow::prediction).collect();
    Some(Validation {
        loss,
        auc: macro_auc(&preds).ok().map(|r| r.macro_auc),
    })
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub params: ModelParams,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    pub padding_fraction: f64,
    pub batches: usize,
}

impl ModelRun {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.metrics.is_empty() {
            return 0.0;
        }
        self.metrics.iter().map(|m| m.wall_seconds).sum::<f64>() / self.metrics.len() as f64
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.train_loss)
    }
}

/// Per-epoch losses; wall times are left out so the file is reproducible.
pub const METRICS_HEADER: &str = "epoch\ttrain_loss\tvalid_loss\tvalid_auc";

pub fn metrics_to_text(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:?}"));
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        s.push_str(&format!(
            "{}\t{:?}\t{}\t{}\n",
            m.epoch,
            m.train_loss,
            opt(m.valid_loss),
            opt(m.valid_auc)
        ));
    }
    s
}

/// Trains on the (already weighted) training rows, selecting the epoch
/// with the best validation macro AUC.
pub fn train_model(ds: &Dataset, cfg: &PipelineConfig) -> Result<ModelRun, PipelineError> {
    let users = ds.training_rows();
    if users.is_empty() {
        return Err(PipelineError::Data("no training rows".into()));
    }
    let plan = BatchPlan::build(&users, cfg.sequencer, ds.width());
    let params = ModelParams::init(cfg.model_config(ds.width()))?;
    let outcome = train(&plan, params, &cfg.train, |p| validation_of(ds, p))?;
    Ok(ModelRun {
        params: outcome.best,
        best_epoch: outcome.best_epoch,
        metrics: outcome.metrics,
        padding_fraction: plan.padding_fraction(),
        batches: plan.batch_count(),
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub compressed: bool,
    pub strategy: WeightStrategy,
    pub compression: Option<CompressionReport>,
    pub run: ModelRun,
    pub model: [Option<EvalReport>; 3],
    pub baseline: [Option<EvalReport>; 3],
    pub model_scores: Vec<ScoredRow>,
    pub baseline_scores: Vec<ScoredRow>,
    pub rows: usize,
    pub labeled: usize,
}

impl Experiment {
    pub fn model_aucs(&self) -> [Option<f64>; 3] {
        macro_aucs(&self.model)
    }

    pub fn baseline_aucs(&self) -> [Option<f64>; 3] {
        macro_aucs(&self.baseline)
    }
}

/// Compression (optional), weighting, training, prediction and evaluation
/// of model and baseline on a prepared dataset.
pub fn run_experiment(encoded: &Dataset, cfg: &PipelineConfig, compressed: bool, strategy: WeightStrategy) -> Result<Experiment, PipelineError> {
    let (mut ds, compression) = if compressed {
        let (d, r) = compress_dataset(encoded, &cfg.compression_config());
        (d, Some(r))
    } else {
        (encoded.clone(), None)
    };
    weigh_dataset(&mut ds, strategy)?;
    let run = train_model(&ds, cfg)?;
    let model_scores = predict_all(&ds, &run.params);
    let table = fit_baseline(&ds);
    let baseline_scores = baseline_scores(&ds, &table, cfg.seeds.baseline);
    Ok(Experiment {
        compressed,
        strategy,
        compression,
        model: evaluate(&model_scores),
        baseline: evaluate(&baseline_scores),
        run,
        model_scores,
        baseline_scores,
        rows: ds.row_count(),
        labeled: ds.labeled_count(),
    })
}

/// AUC per weight strategy on compressed data.
pub fn compare_weights(encoded: &Dataset, cfg: &PipelineConfig) -> Result<(AucTable, Vec<Experiment>), PipelineError> {
    let mut table = AucTable::new("AUC per weight type, compressed data");
    let mut runs = Vec::new();
    for s in WeightStrategy::ALL {
        let e = run_experiment(encoded, cfg, true, s)?;
        table.push(s.display_name(), e.model_aucs());
        runs.push(e);
    }
    Ok((table, runs))
}

/// Baseline, uncompressed and compressed runs with the configured weights.
pub fn compare_compression(encoded: &Dataset, cfg: &PipelineConfig) -> Result<(AucTable, Experiment, Experiment), PipelineError> {
    let plain = run_experiment(encoded, cfg, false, cfg.weights)?;
    let packed = run_experiment(encoded, cfg, true, cfg.weights)?;
    let mut table = AucTable::new(format!("AUCs using {} weights", cfg.weights));
    table.push("Baseline", packed.baseline_aucs());
    table.push("Uncompressed", plain.model_aucs());
    table.push("Compressed", packed.model_aucs());
    Ok((table, plain, packed))
}
