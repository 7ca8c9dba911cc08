use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSpec, ExperimentConfig, FeedbackSource, PoolSplit, RetrainMode, SteeringConfig, Strategy};
use super::feedback::{
    Feedback, FeedbackProvider, FeedbackRequest, FeedbackStore, PendingItem, Phase, ProgressEvent, ProgressSink, ReportDelta,
};
use crate::data::{Dataset, Mask, Sample, Split};
use crate::error::{Error, Result};
use crate::explain::{bla_attach, bla_explain, bla_finetune, gradcam, Method, SaliencyMap};
use crate::metrics::{evaluate, BiasReport, TableRow};
use crate::nn::Classifier;
use crate::sampling::{
    append_selection_log, high_confidence_sample, uncertainty_sample, PoolPrediction, Sampler, SelectionRecord,
};
use crate::steering::{caipi_counterexamples, hybrid_prepare, write_counterexamples, Counterexample, Rrr};
use crate::trainer::{
    append_trace_csv, argmax, predict_proba, save_checkpoint, train, CrossEntropy, Objective, TrainConfig, TrainItem,
    TrainTrace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub sample_id: String,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub id: String,
    pub source_id: String,
    pub transform: String,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected: Vec<SelectionRecord>,
    pub feedback: Vec<FeedbackRecord>,
    pub counterexamples: Vec<ProvenanceRow>,
    /// Training examples used for retraining (originals plus counterexamples).
    pub training_pool: usize,
    pub final_loss: Option<f64>,
    pub report: BiasReport,
    /// Why the iteration made no update, if it did not.
    pub skipped: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    /// The pool ran out before `iterations` were done.
    TerminatedEarly,
    /// Waiting for human feedback timed out; rerunning resumes.
    Paused,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub config: SteeringConfig,
    pub baseline: BiasReport,
    pub iterations: Vec<IterationRecord>,
    pub final_report: BiasReport,
    pub status: RunStatus,
    pub termination: Option<String>,
    pub baseline_seconds: f64,
}

impl ExperimentRecord {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.baseline_seconds = 0.0;
        r.iterations.iter_mut().for_each(|i| i.seconds = 0.0);
        r
    }

    pub fn table_row(&self) -> TableRow {
        let c = &self.config;
        let baseline = c.strategy == Strategy::Baseline;
        TableRow {
            strategy: c.strategy.as_str().into(),
            sampling: if baseline { "-".into() } else { c.sampler.as_str().into() },
            xai: c.eval_method().as_str().into(),
            k: c.table_k(),
            report: self.final_report.clone(),
        }
    }
}

/// Everything that changes over the steering loop.
#[derive(Clone, Debug)]
pub struct XilState {
    pub model: Classifier,
    /// Ids still available for selection.
    pub pool: BTreeSet<String>,
    /// Selected samples that are not part of the training split.
    pub extra_training: BTreeSet<String>,
    pub counterexamples: Vec<Counterexample>,
    /// Feedback masks consulted by the input-gradient penalty.
    pub masks: BTreeMap<String, Mask>,
    pub iteration: usize,
}

impl XilState {
    pub fn new(model: Classifier, data: &Dataset, pool: PoolSplit) -> Self {
        let split = match pool {
            PoolSplit::Train => Split::Train,
            PoolSplit::Val => Split::Val,
        };
        Self {
            model,
            pool: data.split(split).iter().map(|s| s.id.clone()).collect(),
            extra_training: BTreeSet::new(),
            counterexamples: Vec::new(),
            masks: BTreeMap::new(),
            iteration: 0,
        }
    }
}

/// Side channels of a run: persistence, feedback and progress reporting.
pub struct RunEnv<'a> {
    pub run_dir: Option<PathBuf>,
    pub data_spec: Option<DataSpec>,
    pub feedback: &'a mut dyn FeedbackProvider,
    pub progress: &'a dyn ProgressSink,
}

pub enum Step {
    Done(IterationRecord),
    Exhausted(String),
}

fn event(run_id: &str, iteration: Option<usize>, phase: Phase) -> ProgressEvent {
    ProgressEvent { run_id: run_id.into(), iteration, phase, report: None, delta: None, message: None }
}

pub fn explain_with(model: &Classifier, method: Method, sample: &Sample, target: usize) -> Result<SaliencyMap> {
    match method {
        Method::Bla if model.has_attention() => bla_explain(model, &sample.image, target),
        _ => gradcam(model, &sample.image, target),
    }
}

fn test_split(data: &Dataset) -> Result<Vec<&Sample>> {
    let t = data.split(Split::Test);
    if t.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    Ok(t)
}

fn training_items<'d>(data: &'d Dataset, state: &'d XilState, with_masks: bool) -> Vec<TrainItem<'d>> {
    let mut items: Vec<TrainItem> = data.split(Split::Train).into_iter().map(TrainItem::plain).collect();
    items.extend(state.extra_training.iter().filter_map(|id| data.get(id)).map(TrainItem::plain));
    items.extend(state.counterexamples.iter().map(|c| TrainItem::plain(&c.sample)));
    if with_masks {
        for it in &mut items {
            it.mask = state.masks.get(it.id);
        }
    }
    items
}

fn bla_seed(cfg: &SteeringConfig, iteration: Option<usize>) -> u64 {
    cfg.seed.wrapping_add(500_000 + iteration.map_or(0, |i| i as u64 + 1))
}

/// Initial model trained with cross-entropy on the training split.
pub fn train_baseline(cfg: &SteeringConfig, data: &Dataset) -> Result<(Classifier, TrainTrace)> {
    cfg.validate()?;
    data.check_class_coverage()?;
    let size = data.samples().first().ok_or_else(|| Error::Validation("dataset is empty".into()))?.image.height();
    let model = Classifier::new(cfg.model.architecture(size), cfg.seed)?;
    let train_items: Vec<TrainItem> = data.split(Split::Train).into_iter().map(TrainItem::plain).collect();
    let val_items: Vec<TrainItem> = data.split(Split::Val).into_iter().map(TrainItem::plain).collect();
    let tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    train(model, &train_items, Some(&val_items), &CrossEntropy, &tc)
}

/// Attaches the BLA module if needed and finetunes it on the current
/// training set.
fn attach_bla(
    cfg: &SteeringConfig,
    data: &Dataset,
    model: Classifier,
    iteration: Option<usize>,
    state: &XilState,
) -> Result<Classifier> {
    let model = if model.has_attention() { model } else { bla_attach(model)? };
    let items = training_items(data, state, false);
    let tc = cfg.bla.train_config(&cfg.train, bla_seed(cfg, iteration));
    Ok(bla_finetune(model, &items, &tc)?.0)
}

fn pool_predictions(model: &Classifier, data: &Dataset, pool: &BTreeSet<String>) -> Result<Vec<PoolPrediction>> {
    pool.iter()
        .map(|id| {
            let s = data.get(id).ok_or_else(|| Error::State(format!("pool id {id} not in dataset")))?;
            let p = predict_proba(model, &[&s.image])?.remove(0);
            PoolPrediction::new(id.clone(), p, s.label)
        })
        .collect()
}

fn validate_feedback(request: &FeedbackRequest, fb: &[Feedback]) -> Result<()> {
    for it in &request.items {
        let f = fb
            .iter()
            .find(|f| f.sample_id == it.sample_id)
            .ok_or_else(|| Error::Feedback(format!("no feedback for {}", it.sample_id)))?;
        if f.mask.height() != it.image.height() || f.mask.width() != it.image.width() {
            return Err(Error::Validation(format!("{}: feedback mask shape mismatch", it.sample_id)));
        }
    }
    Ok(())
}

/// One pass of score → select → feedback → steer → (BLA) → evaluate.
pub fn xil_iterate(state: &mut XilState, cfg: &SteeringConfig, data: &Dataset, env: &mut RunEnv) -> Result<Step> {
    let start = Instant::now();
    let it = state.iteration;
    let run_id = cfg.run_id();
    let method = cfg.eval_method();
    let test = test_split(data)?;
    if cfg.strategy == Strategy::Baseline {
        let report = evaluate(&state.model, method, &test)?;
        state.iteration += 1;
        return Ok(Step::Done(IterationRecord {
            iteration: it,
            selected: vec![],
            feedback: vec![],
            counterexamples: vec![],
            training_pool: 0,
            final_loss: None,
            report,
            skipped: Some("baseline: evaluation only".into()),
            seconds: start.elapsed().as_secs_f64(),
        }));
    }
    let n = cfg.samples_per_iteration;
    if state.pool.len() < n {
        return Ok(Step::Exhausted(format!("pool has {} samples left, {n} needed", state.pool.len())));
    }
    env.progress.emit(event(&run_id, Some(it), Phase::Scoring));
    let preds = pool_predictions(&state.model, data, &state.pool)?;
    let ids = match cfg.sampler {
        Sampler::Uncertainty => uncertainty_sample(&preds, n)?,
        Sampler::HighConfidence => high_confidence_sample(&preds, n, cfg.confidence_threshold)?,
    };
    let by_id: BTreeMap<&str, &PoolPrediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let selected: Vec<SelectionRecord> =
        ids.iter().map(|id| SelectionRecord::from_prediction(it, cfg.sampler, by_id[id.as_str()])).collect();
    if let Some(dir) = &env.run_dir {
        append_selection_log(&dir.join("selection.csv"), &selected)?;
    }
    if ids.is_empty() {
        log::warn!("{run_id}: iteration {it} has no high-confidence candidates; skipping");
        let report = evaluate(&state.model, method, &test)?;
        state.iteration += 1;
        return Ok(Step::Done(IterationRecord {
            iteration: it,
            selected,
            feedback: vec![],
            counterexamples: vec![],
            training_pool: 0,
            final_loss: None,
            report,
            skipped: Some("no high-confidence candidates".into()),
            seconds: start.elapsed().as_secs_f64(),
        }));
    }

    let samples: Vec<&Sample> = ids.iter().map(|id| data.get(id).expect("pool ids come from the dataset")).collect();
    let mut items = Vec::with_capacity(samples.len());
    for s in &samples {
        let p = by_id[s.id.as_str()];
        let predicted = argmax(&p.probabilities);
        items.push(PendingItem {
            sample_id: s.id.clone(),
            image: s.image.clone(),
            saliency: explain_with(&state.model, method, s, predicted)?,
            predicted,
            confidence: p.top1(),
            stored_mask: s.relevance_mask.clone(),
        });
    }
    let request = FeedbackRequest { run_id: run_id.clone(), iteration: it, items };
    let store = env.run_dir.as_deref().map(FeedbackStore::new);
    let replayed = match &store {
        Some(st) => st.load(it, &ids)?,
        None => None,
    };
    let feedback = match replayed {
        Some(fb) => fb,
        None => {
            if cfg.feedback_source == FeedbackSource::Interactive {
                env.progress.emit(event(&run_id, Some(it), Phase::AwaitingFeedback));
            }
            let fb = env.feedback.collect(&request)?;
            validate_feedback(&request, &fb)?;
            if let Some(st) = &store {
                st.save(it, &fb)?;
            }
            fb
        }
    };
    let mask_of: BTreeMap<&str, &Mask> = feedback.iter().map(|f| (f.sample_id.as_str(), &f.mask)).collect();

    env.progress.emit(event(&run_id, Some(it), Phase::Training));
    for id in &ids {
        state.pool.remove(id);
        if data.split_of(id) != Some(Split::Train) {
            state.extra_training.insert(id.clone());
        }
    }
    let mut new_ces = Vec::new();
    match cfg.strategy {
        Strategy::Caipi => {
            for s in &samples {
                new_ces.extend(caipi_counterexamples(s, mask_of[s.id.as_str()], cfg.k, it, cfg.seed)?);
            }
        }
        Strategy::Rrr => {
            for s in &samples {
                state.masks.insert(s.id.clone(), mask_of[s.id.as_str()].clone());
            }
        }
        Strategy::Hybrid => {
            let sel: Vec<(&Sample, &Mask)> = samples.iter().map(|s| (*s, mask_of[s.id.as_str()])).collect();
            let hb = hybrid_prepare(&sel, cfg.k, it, cfg.seed)?;
            state.masks.extend(hb.masks);
            new_ces = hb.counterexamples;
        }
        Strategy::Baseline => unreachable!(),
    }
    if let Some(dir) = &env.run_dir {
        if !new_ces.is_empty() {
            write_counterexamples(dir, it, &new_ces)?;
        }
    }
    let provenance: Vec<ProvenanceRow> = new_ces
        .iter()
        .map(|c| ProvenanceRow {
            id: c.sample.id.clone(),
            source_id: c.source_id.clone(),
            transform: c.transform.as_str().into(),
            iteration: c.iteration,
        })
        .collect();
    state.counterexamples.extend(new_ces);

    let penalised = matches!(cfg.strategy, Strategy::Rrr | Strategy::Hybrid);
    let rrr = Rrr::new(cfg.rrr_weights);
    let objective: &dyn Objective = if penalised { &rrr } else { &CrossEntropy };
    let (model, trace, pool_size) = {
        let items = training_items(data, state, penalised);
        let (start_model, tc) = match cfg.retrain_mode {
            RetrainMode::Finetune => (
                state.model.clone(),
                TrainConfig { epochs: cfg.epochs_per_iteration, seed: cfg.seed.wrapping_add(1 + it as u64), ..cfg.train.clone() },
            ),
            RetrainMode::Scratch => {
                let size = state.model.arch().input_size;
                (Classifier::new(cfg.model.architecture(size), cfg.seed)?, TrainConfig { seed: cfg.seed, ..cfg.train.clone() })
            }
        };
        let (m, trace) = train(start_model, &items, None, objective, &tc)?;
        (m, trace, items.len())
    };
    state.model = model;
    if cfg.uses_bla() {
        let tuned = attach_bla(cfg, data, state.model.clone(), Some(it), state)?;
        state.model = tuned;
    }
    if let Some(dir) = &env.run_dir {
        append_trace_csv(&trace, &dir.join("trace.csv"))?;
        save_checkpoint(&state.model, &dir.join("checkpoints").join(format!("iter{it}.json")))?;
    }
    env.progress.emit(event(&run_id, Some(it), Phase::Evaluating));
    let report = evaluate(&state.model, method, &test)?;
    state.iteration += 1;
    Ok(Step::Done(IterationRecord {
        iteration: it,
        selected,
        feedback: feedback.iter().map(|f| FeedbackRecord { sample_id: f.sample_id.clone(), provenance: f.provenance.clone() }).collect(),
        counterexamples: provenance,
        training_pool: pool_size,
        final_loss: trace.epochs.last().map(|e| e.loss),
        report,
        skipped: None,
        seconds: start.elapsed().as_secs_f64(),
    }))
}

/// Clears generated artefacts of a previous attempt, keeping stored
/// feedback so that interactive runs can be resumed by replay.
fn prepare_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            if name == "feedback" || name == "feedback.csv" {
                continue;
            }
            let p = entry.path();
            let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            r.map_err(|e| Error::io(&p, e))?;
        }
    }
    for sub in ["checkpoints", "saliency"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn save_saliency(dir: &Path, tag: &str, model: &Classifier, method: Method, test: &[&Sample], n: usize) -> Result<()> {
    for s in test.iter().take(n) {
        let pred = argmax(&predict_proba(model, &[&s.image])?[0]);
        explain_with(model, method, s, pred)?.save(&dir.join("saliency").join(tag), &s.id)?;
    }
    Ok(())
}

fn persist(dir: &Path, record: &ExperimentRecord) -> Result<()> {
    write_json(&dir.join("record.json"), record)
}

/// Trains the baseline and runs the steering loop.
pub fn run_experiment(cfg: &SteeringConfig, data: &Dataset, env: &mut RunEnv) -> Result<ExperimentRecord> {
    let t = Instant::now();
    let (baseline, trace) = train_baseline(cfg, data).map_err(|e| {
        env.progress.emit(ProgressEvent { message: Some(e.to_string()), ..event(&cfg.run_id(), None, Phase::Failed) });
        e
    })?;
    if let Some(dir) = &env.run_dir {
        prepare_run_dir(dir)?;
        append_trace_csv(&trace, &dir.join("trace.csv"))?;
    }
    run_from_baseline(cfg, data, baseline, t.elapsed().as_secs_f64(), env)
}

/// Runs the steering loop from an already trained baseline model.
pub fn run_from_baseline(
    cfg: &SteeringConfig,
    data: &Dataset,
    baseline: Classifier,
    baseline_seconds: f64,
    env: &mut RunEnv,
) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let test = test_split(data)?;
    if let Some(dir) = &env.run_dir {
        if !dir.join("checkpoints").exists() {
            prepare_run_dir(dir)?;
        }
        match &env.data_spec {
            Some(spec) => write_json(&dir.join("config.json"), &ExperimentConfig { steering: cfg.clone(), data: spec.clone() })?,
            None => write_json(&dir.join("config.json"), cfg)?,
        }
        save_checkpoint(&baseline, &dir.join("checkpoints").join("baseline.json"))?;
        save_saliency(dir, "baseline", &baseline, Method::Gradcam, &test, cfg.saliency_samples)?;
    }
    let baseline_report = evaluate(&baseline, Method::Gradcam, &test)?;
    env.progress.emit(ProgressEvent {
        report: Some(baseline_report.clone()),
        ..event(&run_id, None, Phase::Baseline)
    });
    let mut record = ExperimentRecord {
        run_id: run_id.clone(),
        config: cfg.clone(),
        baseline: baseline_report.clone(),
        iterations: vec![],
        final_report: baseline_report.clone(),
        status: RunStatus::Running,
        termination: None,
        baseline_seconds,
    };
    let mut state = XilState::new(baseline, data, cfg.pool);
    let outcome = (|| -> Result<()> {
        if cfg.uses_bla() && cfg.iterations > 0 {
            let tuned = attach_bla(cfg, data, state.model.clone(), None, &state)?;
            state.model = tuned;
        }
        while state.iteration < cfg.iterations {
            match xil_iterate(&mut state, cfg, data, env)? {
                Step::Done(it) => {
                    env.progress.emit(ProgressEvent {
                        report: Some(it.report.clone()),
                        delta: Some(ReportDelta::between(&baseline_report, &it.report)),
                        ..event(&run_id, Some(it.iteration), Phase::IterationComplete)
                    });
                    record.final_report = it.report.clone();
                    record.iterations.push(it);
                    if let Some(dir) = &env.run_dir {
                        persist(dir, &record)?;
                    }
                }
                Step::Exhausted(reason) => {
                    log::warn!("{run_id}: stopping early: {reason}");
                    record.status = RunStatus::TerminatedEarly;
                    record.termination = Some(reason);
                    break;
                }
            }
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => {
            if record.status == RunStatus::Running {
                record.status = RunStatus::Completed;
            }
            if let Some(dir) = &env.run_dir {
                save_checkpoint(&state.model, &dir.join("checkpoints").join("final.json"))?;
                save_saliency(dir, "final", &state.model, cfg.eval_method(), &test, cfg.saliency_samples)?;
                persist(dir, &record)?;
                let names = data.class_names();
                crate::metrics::write_table(&dir.join("table.csv"), names, &[record.table_row()])?;
            }
            env.progress.emit(ProgressEvent {
                report: Some(record.final_report.clone()),
                delta: Some(ReportDelta::between(&record.baseline, &record.final_report)),
                ..event(&run_id, None, Phase::Completed)
            });
            Ok(record)
        }
        Err(e) => {
            record.status = if matches!(e, Error::Feedback(_)) { RunStatus::Paused } else { RunStatus::Failed };
            record.termination = Some(e.to_string());
            if let Some(dir) = &env.run_dir {
                persist(dir, &record)?;
            }
            let phase = if record.status == RunStatus::Paused { Phase::Paused } else { Phase::Failed };
            env.progress.emit(ProgressEvent { message: Some(e.to_string()), ..event(&run_id, None, phase) });
            Err(e)
        }
    }
}
