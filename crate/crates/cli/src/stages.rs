//! One function per subcommand. Each reads its inputs from the work
//! directory, writes its artifacts there and leaves a manifest behind.

use std::collections::BTreeMap;
use std::path::Path;

use sensorseq::eval::AucTable;
use sensorseq::event_model::{read_and_validate, DatasetSplit, ValidatedStream};
use sensorseq::ground_truth::{LabeledEvent, AUDIT_HEADER};
use sensorseq::matrix;
use sensorseq::pipeline::{
    baseline_scores, compare_compression, compare_weights, compress_dataset, encode_dataset, evaluate, fit_baseline, label_stage,
    load_schema, macro_aucs, metrics_to_text, predict_all, scored_from_text, scored_to_text, train_model, weigh_dataset, Dataset,
    PipelineError, EVAL_SEGMENTS,
};
use sensorseq::rnn::{ModelParams, RnnError};
use sensorseq::sequencer::BatchPlan;
use sensorseq::synth::{generate, profiles_from_text, profiles_to_text};

use crate::artifacts::StageRun;
use crate::error::CliError;
use crate::Context;

pub const EVENTS: &str = "events.jsonl";
pub const PROFILES: &str = "profiles.jsonl";
pub const TRUTH: &str = "truth.tsv";
pub const VALID_EVENTS: &str = "valid.jsonl";
pub const VALIDATION: &str = "validation.json";
pub const SPLIT: &str = "split.json";
pub const LABELS: &str = "labels.json";
pub const AUDIT: &str = "audit.tsv";
pub const LABEL_REPORT: &str = "label_report.json";
pub const ENCODER: &str = "encoder.json";
pub const COMPRESSION: &str = "compression.txt";
pub const WEIGHTS: &str = "weights.tsv";
pub const BATCHES: &str = "batches.txt";
pub const MODEL: &str = "model.ckpt";
pub const DIVERGED: &str = "diverged.ckpt";
pub const METRICS: &str = "metrics.tsv";
pub const PREDICTIONS: &str = "predictions.tsv";
pub const BASELINE_TABLE: &str = "baseline_table.tsv";
pub const BASELINE_PREDICTIONS: &str = "baseline_predictions.tsv";
pub const REPORT: &str = "report.txt";
pub const GROUPS: &str = "groups.tsv";
pub const ROC: &str = "roc.tsv";
pub const EVAL_JSON: &str = "eval.json";
pub const WEIGHT_TABLE: &str = "table_weights.txt";
pub const COMPRESSION_TABLE: &str = "table_compression.txt";

fn matrix_name(ctx: &Context, stem: &str) -> String {
    format!("{stem}.{}", ctx.format.matrix().extension())
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, name: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Data(format!("{name}: {e}")))
}

fn write_matrix(run: &mut StageRun, stem: &str, ds: &Dataset) -> Result<(), CliError> {
    let name = matrix_name(run.ctx, stem);
    let hash = run.ctx.hash.clone();
    match run.ctx.format.matrix() {
        matrix::MatrixFormat::Text => run.write_bytes(&name, matrix::write_text(ds, &hash).as_bytes()),
        matrix::MatrixFormat::Binary => {
            let mut buf = Vec::new();
            matrix::write_binary(ds, &hash, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
            run.write_bytes(&name, &buf)
        }
    }
}

fn read_matrix(run: &mut StageRun, stem: &str) -> Result<Dataset, CliError> {
    let name = matrix_name(run.ctx, stem);
    let bytes = run.read_bytes(&name)?;
    let bad = |e: matrix::MatrixError| CliError::Data(format!("{name}: {e}"));
    let (ds, hash) = match run.ctx.format.matrix() {
        matrix::MatrixFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{name}: not UTF-8")))?;
            matrix::read_text(&text).map_err(bad)?
        }
        matrix::MatrixFormat::Binary => matrix::read_binary(&bytes[..]).map_err(bad)?,
    };
    run.ctx.check_hash(&hash, &run.path(&name));
    Ok(ds)
}

fn read_stream(run: &mut StageRun, path: &Path) -> Result<ValidatedStream, CliError> {
    let schema = load_schema(&run.ctx.cfg)?;
    let text = run.read_text_at(path)?;
    read_and_validate(text.as_bytes(), &schema).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "synth");
    let s = generate(&ctx.cfg.synth);
    run.write_text(EVENTS, &s.to_jsonl())?;
    run.write_text(PROFILES, &profiles_to_text(&s.profiles))?;
    run.write_text(TRUTH, &s.truth.to_text())?;
    run.detail("users", s.profiles.len());
    run.detail("events", s.events.len());
    run.finish()
}

pub fn validate(ctx: &Context, events: Option<&Path>) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "validate");
    let path = events.map_or_else(|| run.path(EVENTS), Path::to_path_buf);
    let stream = read_stream(&mut run, &path)?;
    let report = &stream.report;
    if report.accepted == 0 {
        let first = report.rejected.first().map_or("empty log".to_string(), |v| v.to_string());
        return Err(CliError::Data(format!("no valid events in {} ({first})", path.display())));
    }
    let mut body = String::new();
    for ev in stream.events() {
        body.push_str(&ev.to_json_line());
        body.push('\n');
    }
    run.write_text(VALID_EVENTS, &body)?;
    run.write_text(VALIDATION, &json(report))?;
    run.detail("total", report.total);
    run.detail("accepted", report.accepted);
    run.detail("rejected", report.rejected.len());
    run.detail("out_of_order", report.out_of_order);
    if !report.rejected.is_empty() {
        eprintln!("sensorseq: {} of {} records rejected, see {VALIDATION}", report.rejected.len(), report.total);
    }
    run.finish()
}

pub fn label(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "label");
    let path = run.path(VALID_EVENTS);
    let stream = read_stream(&mut run, &path)?;
    let stage = label_stage(&stream, &ctx.cfg)?;
    let mut audit = format!("{AUDIT_HEADER}\n");
    for l in stage.labeling.values() {
        for entry in &l.audit {
            audit.push_str(&entry.to_line());
            audit.push('\n');
        }
    }
    run.write_text(SPLIT, &json(&stage.split))?;
    run.write_text(LABELS, &json(&stage.labels()))?;
    run.write_text(AUDIT, &audit)?;
    run.write_text(LABEL_REPORT, &json(&stage.report))?;
    run.detail("users", stage.split.users.len());
    run.detail("unknown_users", stage.split.unknown_users());
    run.detail("dropped_users", stage.split.dropped.len());
    run.detail("labeled", stage.report.labeled);
    run.detail("positives", stage.report.positives);
    run.finish()
}

pub fn encode(ctx: &Context, profiles: Option<&Path>) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "encode");
    let schema = load_schema(&ctx.cfg)?;
    let path = run.path(VALID_EVENTS);
    let stream = read_stream(&mut run, &path)?;
    let profile_path = profiles.map_or_else(|| run.path(PROFILES), Path::to_path_buf);
    let profiles = if profiles.is_some() || profile_path.is_file() {
        let text = run.read_text_at(&profile_path)?;
        profiles_from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", profile_path.display())))?
    } else {
        Vec::new()
    };
    let split: DatasetSplit = parse_json(&run.read_text(SPLIT)?, SPLIT)?;
    let labels: BTreeMap<String, Vec<LabeledEvent>> = parse_json(&run.read_text(LABELS)?, LABELS)?;
    let (encoder, empty, ds) = encode_dataset(&stream.users, &profiles, &split, &labels, &schema, &ctx.cfg.encoder)?;
    run.write_text(ENCODER, &encoder.to_json())?;
    write_matrix(&mut run, "encoded", &ds)?;
    run.detail("rows", ds.row_count());
    run.detail("labeled", ds.labeled_count());
    run.detail("width", ds.width());
    run.detail("empty_columns", empty.iter().map(|c| c.0.as_str()).collect::<Vec<_>>());
    run.finish()
}

pub fn compress(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "compress");
    let ds = read_matrix(&mut run, "encoded")?;
    let (out, report) = compress_dataset(&ds, &ctx.cfg.compression_config());
    write_matrix(&mut run, "compressed", &out)?;
    run.write_text(COMPRESSION, &report.to_text())?;
    run.detail("rows_in", report.rows_in);
    run.detail("rows_out", report.rows_out);
    run.detail("ratio", report.ratio());
    run.finish()
}

pub fn weigh(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "weigh");
    let stem = if ctx.cfg.compress { "compressed" } else { "encoded" };
    let mut ds = read_matrix(&mut run, stem)?;
    let table = weigh_dataset(&mut ds, ctx.cfg.weights)?;
    write_matrix(&mut run, "weighted", &ds)?;
    run.write_text(WEIGHTS, &table.to_text())?;
    run.detail("strategy", ctx.cfg.weights.as_str());
    run.finish()
}

pub fn batch(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "batch");
    let ds = read_matrix(&mut run, "weighted")?;
    let plan = BatchPlan::build(&ds.training_rows(), ctx.cfg.sequencer, ds.width());
    run.write_text(BATCHES, &plan.manifest())?;
    run.detail("batches", plan.batch_count());
    run.detail("padding_fraction", plan.padding_fraction());
    run.finish()
}

fn read_model(run: &mut StageRun, ds: &Dataset) -> Result<ModelParams, CliError> {
    let text = run.read_text(MODEL)?;
    let params = ModelParams::from_checkpoint(&text).map_err(|e| CliError::Data(format!("{MODEL}: {e}")))?;
    if params.config.input_dim != ds.width() {
        return Err(CliError::Data(format!(
            "{MODEL} expects {} inputs, matrix has {} columns",
            params.config.input_dim,
            ds.width()
        )));
    }
    Ok(params)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "train");
    let ds = read_matrix(&mut run, "weighted")?;
    let model = match train_model(&ds, &ctx.cfg) {
        Ok(m) => m,
        Err(PipelineError::Rnn(RnnError::DivergenceDetected { epoch, batch, params })) => {
            run.write_text(DIVERGED, &params.to_checkpoint())?;
            run.detail("diverged_epoch", epoch);
            run.detail("diverged_batch", batch);
            run.finish()?;
            return Err(CliError::Divergence(format!(
                "non-finite loss at epoch {epoch}, batch {batch}; parameters saved to {DIVERGED}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    run.write_text(MODEL, &model.params.to_checkpoint())?;
    run.write_text(METRICS, &metrics_to_text(&model.metrics))?;
    run.detail("best_epoch", model.best_epoch);
    run.detail("final_loss", model.final_loss());
    run.detail("epoch_seconds", model.metrics.iter().map(|m| m.wall_seconds).collect::<Vec<_>>());
    run.detail("mean_epoch_seconds", model.mean_epoch_seconds());
    run.detail("batches", model.batches);
    run.detail("padding_fraction", model.padding_fraction);
    run.finish()
}

pub fn predict(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "predict");
    let ds = read_matrix(&mut run, "weighted")?;
    let params = read_model(&mut run, &ds)?;
    let scored = predict_all(&ds, &params);
    run.write_text(PREDICTIONS, &scored_to_text(&scored))?;
    run.detail("scored", scored.len());
    run.finish()
}

pub fn baseline(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "baseline");
    let ds = read_matrix(&mut run, "weighted")?;
    let table = fit_baseline(&ds);
    let scored = baseline_scores(&ds, &table, ctx.cfg.seeds.baseline);
    run.write_text(BASELINE_TABLE, &table.to_text())?;
    run.write_text(BASELINE_PREDICTIONS, &scored_to_text(&scored))?;
    run.detail("scored", scored.len());
    run.finish()
}

fn auc_json(aucs: [Option<f64>; 3]) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (seg, v) in EVAL_SEGMENTS.iter().zip(aucs) {
        m.insert(seg.as_str().to_string(), serde_json::json!(v));
    }
    serde_json::Value::Object(m)
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "eval");
    let model = scored_from_text(&run.read_text(PREDICTIONS)?)?;
    let base = scored_from_text(&run.read_text(BASELINE_PREDICTIONS)?)?;
    let model_reports = evaluate(&model);
    let base_reports = evaluate(&base);
    let (m, b) = (macro_aucs(&model_reports), macro_aucs(&base_reports));
    let mut table = AucTable::new(format!("Macro AUC, {} weights", ctx.cfg.weights));
    table.push("Baseline", b);
    table.push("Model", m);
    let mut groups = String::new();
    let mut roc = String::new();
    for (seg, report) in EVAL_SEGMENTS.iter().zip(&model_reports) {
        let Some(r) = report else { continue };
        groups.push_str(&format!("## {}\n{}", seg.as_str(), r.groups_text()));
        roc.push_str(&format!("## {}\n{}", seg.as_str(), r.roc_text()));
    }
    run.write_text(REPORT, &table.to_text())?;
    run.write_text(GROUPS, &groups)?;
    run.write_text(ROC, &roc)?;
    run.write_text(EVAL_JSON, &json(&serde_json::json!({ "model": auc_json(m), "baseline": auc_json(b) })))?;
    run.detail("model", auc_json(m));
    run.detail("baseline", auc_json(b));
    run.finish()?;
    print!("{}", table.to_text());
    Ok(())
}

/// Weight-strategy and compression comparisons from the encoded matrix.
pub fn tables(ctx: &Context) -> Result<(), CliError> {
    let mut run = StageRun::new(ctx, "tables");
    let ds = read_matrix(&mut run, "encoded")?;
    let (weights, _) = compare_weights(&ds, &ctx.cfg)?;
    let (compression, plain, packed) = compare_compression(&ds, &ctx.cfg)?;
    run.write_text(WEIGHT_TABLE, &weights.to_text())?;
    run.write_text(COMPRESSION_TABLE, &compression.to_text())?;
    run.detail("uncompressed_epoch_seconds", plain.run.mean_epoch_seconds());
    run.detail("compressed_epoch_seconds", packed.run.mean_epoch_seconds());
    run.finish()?;
    print!("{}\n{}", weights.to_text(), compression.to_text());
    Ok(())
}

pub fn pipeline(ctx: &Context, events: Option<&Path>, profiles: Option<&Path>, with_tables: bool) -> Result<(), CliError> {
    if events.is_none() {
        synth(ctx)?;
    }
    validate(ctx, events)?;
    label(ctx)?;
    encode(ctx, profiles)?;
    if ctx.cfg.compress {
        compress(ctx)?;
    }
    weigh(ctx)?;
    batch(ctx)?;
    train(ctx)?;
    predict(ctx)?;
    baseline(ctx)?;
    eval(ctx)?;
    if with_tables {
        tables(ctx)?;
    }
    Ok(())
}

