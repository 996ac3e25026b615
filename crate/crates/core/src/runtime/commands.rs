use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use super::config::{ProviderConfig, ProviderKind, RunConfig};
use super::runfile::{load_dataset, prepare_resume, read_run_file, RunWriter};
use super::RuntimeError;
use crate::evaluation::{aggregate, merge_reports, render_ablation_table, score_run, ReportFormat};
use crate::model::{
    method_label, validate_dataset, AblationConfig, FailureKind, Method, RunRecord, TaskInstance,
};
use crate::pipeline::Pipeline;
use crate::prompting::PromptSet;
use crate::provider::{load_script, ChatProvider, CompletionParams, HttpProvider};
use crate::retrieval::{index_corpus, load_corpus, CorpusIndex};
use crate::EvalReport;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} tasks: {} completed, {} with stage failures, {} already in run file",
            self.total, self.completed, self.failed, self.skipped
        )
    }
}

pub fn build_provider(config: &ProviderConfig) -> Result<Box<dyn ChatProvider>, RuntimeError> {
    match config.kind {
        ProviderKind::Mock => {
            let path = config
                .script_path
                .as_ref()
                .ok_or_else(|| RuntimeError::Config("provider.script_path is not set".into()))?;
            let provider = load_script(path)
                .map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
            Ok(Box::new(provider))
        }
        ProviderKind::Http => {
            let url = config
                .base_url
                .as_deref()
                .ok_or_else(|| RuntimeError::Config("provider.base_url is not set".into()))?;
            Ok(Box::new(HttpProvider::from_env(url)))
        }
    }
}

fn load_prompts(config: &RunConfig) -> Result<PromptSet, RuntimeError> {
    match &config.prompts.dir {
        Some(dir) => {
            PromptSet::with_overrides(dir).map_err(|e| RuntimeError::Config(e.to_string()))
        }
        None => Ok(PromptSet::default()),
    }
}

fn load_tasks(config: &RunConfig) -> Result<Vec<TaskInstance>, RuntimeError> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| RuntimeError::Config("no dataset given".into()))?;
    let tasks = load_dataset(path)?;
    let errors = validate_dataset(&tasks);
    if !errors.is_empty() {
        let list: Vec<String> = errors.iter().map(ToString::to_string).collect();
        return Err(RuntimeError::Validation(list.join("; ")));
    }
    Ok(tasks)
}

fn load_retriever(config: &RunConfig) -> Result<Option<CorpusIndex<f64>>, RuntimeError> {
    if config.method != Method::CotRag {
        return Ok(None);
    }
    let path = config
        .corpus
        .as_ref()
        .ok_or_else(|| RuntimeError::Config("method cot_rag requires a corpus path".into()))?;
    let docs =
        load_corpus(path).map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))?;
    index_corpus(docs)
        .map(Some)
        .map_err(|e| RuntimeError::Validation(format!("{}: {e}", path.display())))
}

struct Job<'a> {
    provider: &'a dyn ChatProvider,
    prompts: &'a PromptSet,
    params: CompletionParams,
    method: Method,
    ablation: AblationConfig,
    retriever: Option<&'a CorpusIndex<f64>>,
    k: usize,
    workers: usize,
}

impl Job<'_> {
    fn run_task(&self, task: &TaskInstance) -> RunRecord {
        let pipeline = Pipeline::new(self.provider, self.prompts, &self.params);
        let record = match (self.method, self.retriever) {
            (Method::Verifact, _) => pipeline.run_verifact(task, self.ablation),
            (Method::StandardCot, _) => pipeline.run_standard_cot(task),
            (Method::CotRag, Some(index)) => pipeline.run_cot_rag(task, index, self.k),
            (Method::CotRag, None) => unreachable!("retriever is loaded for cot_rag"),
        };
        match &record.failure {
            Some(f) => log::warn!("task {}: {} failed: {}", task.id, f.stage_tag, f.message),
            None => log::info!("task {}: done", task.id),
        }
        record
    }

    /// Runs every task not yet in `out`, appending records in dataset order.
    fn execute(&self, tasks: &[TaskInstance], out: &Path) -> Result<RunSummary, RuntimeError> {
        let done = prepare_resume(out)?;
        let pending: Vec<&TaskInstance> = tasks.iter().filter(|t| !done.contains(&t.id)).collect();
        let mut summary = RunSummary {
            total: tasks.len(),
            skipped: tasks.len() - pending.len(),
            ..RunSummary::default()
        };
        let Some((first, rest)) = pending.split_first() else {
            return Ok(summary);
        };
        let mut writer = RunWriter::append(out)?;
        let mut write = |record: &RunRecord, summary: &mut RunSummary| {
            if record.failure.is_some() {
                summary.failed += 1;
            } else {
                summary.completed += 1;
            }
            writer
                .write(record)
                .map_err(|e| RuntimeError::Io(format!("{}: {e}", out.display())))
        };

        // The first task runs alone so an unreachable provider stops the
        // command before anything is written.
        let record = self.run_task(first);
        if let Some(f) = &record.failure {
            let unreachable = matches!(
                f.kind,
                FailureKind::Transport | FailureKind::Timeout | FailureKind::Status
            );
            if unreachable && record.stages.len() == 1 {
                return Err(RuntimeError::Provider(f.message.clone()));
            }
        }
        write(&record, &mut summary)?;

        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(rest.len()) {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= rest.len() || tx.send((i, self.run_task(rest[i]))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut buffered = BTreeMap::new();
            let mut next_out = 0;
            for (i, record) in rx {
                buffered.insert(i, record);
                while let Some(record) = buffered.remove(&next_out) {
                    write(&record, &mut summary)?;
                    next_out += 1;
                }
            }
            Ok::<(), RuntimeError>(())
        })?;
        Ok(summary)
    }
}

fn output_path(config: &RunConfig) -> Result<&PathBuf, RuntimeError> {
    config
        .out
        .as_ref()
        .ok_or_else(|| RuntimeError::Config("no output path given".into()))
}

pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, RuntimeError> {
    config.validate()?;
    let out = output_path(config)?;
    let tasks = load_tasks(config)?;
    let retriever = load_retriever(config)?;
    let prompts = load_prompts(config)?;
    let provider = build_provider(&config.provider)?;
    Job {
        provider: provider.as_ref(),
        prompts: &prompts,
        params: config.provider.params(),
        method: config.method,
        ablation: config.ablation,
        retriever: retriever.as_ref(),
        k: config.k,
        workers: config.workers,
    }
    .execute(&tasks, out)
}

/// Scores `runs` against `tasks`. Runs without a final output are skipped
/// with a warning; runs for unknown tasks are an error.
pub fn evaluate_runs(
    runs: &[RunRecord],
    tasks: &[TaskInstance],
    threshold: f64,
) -> Result<EvalReport, RuntimeError> {
    let by_id: HashMap<&str, &TaskInstance> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut rows = Vec::new();
    for run in runs {
        let task = by_id.get(run.task_id.as_str()).ok_or_else(|| {
            RuntimeError::Validation(format!("task_id '{}' not found in dataset", run.task_id))
        })?;
        if run.final_output.is_none() {
            log::warn!(
                "task {} ({}): no final output, not scored",
                run.task_id,
                run.method_label()
            );
            continue;
        }
        rows.push(
            score_run::<f64>(run, task, threshold)
                .map_err(|e| RuntimeError::Validation(e.to_string()))?,
        );
    }
    Ok(aggregate(rows))
}

pub fn cmd_eval(run_file: &Path, config: &RunConfig) -> Result<EvalReport, RuntimeError> {
    if !(config.threshold > 0.0 && config.threshold <= 1.0) {
        return Err(RuntimeError::Config("threshold must be in (0, 1]".into()));
    }
    let runs = read_run_file(run_file)?;
    if runs.is_empty() {
        log::warn!("{}: run file is empty", run_file.display());
    }
    let tasks = load_tasks(config)?;
    evaluate_runs(&runs, &tasks, config.threshold)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), RuntimeError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| RuntimeError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))
}

pub fn load_report(path: &Path) -> Result<EvalReport, RuntimeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| RuntimeError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct AblateSummary {
    pub run_files: Vec<PathBuf>,
    pub runs: Vec<RunSummary>,
    pub report: EvalReport,
    pub table: String,
}

/// Runs the full pipeline and its three single-stage ablations (plus the
/// standard chain-of-thought baseline when `baseline` is set), writing one
/// run file per variant, `report.json` and `ablation.txt` into `out_dir`.
pub fn cmd_ablate(
    config: &RunConfig,
    out_dir: &Path,
    baseline: bool,
    format: ReportFormat,
) -> Result<AblateSummary, RuntimeError> {
    if config.method != Method::Verifact {
        return Err(RuntimeError::Config(
            "ablate requires method verifact".into(),
        ));
    }
    config.validate()?;
    let tasks = load_tasks(config)?;
    let prompts = load_prompts(config)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| RuntimeError::Io(format!("{}: {e}", out_dir.display())))?;

    let mut variants: Vec<(Method, AblationConfig, String)> = Vec::new();
    if baseline {
        variants.push((
            Method::StandardCot,
            AblationConfig::FULL,
            "standard-cot".into(),
        ));
    }
    for ablation in AblationConfig::table_variants() {
        variants.push((Method::Verifact, ablation, ablation.slug()));
    }

    let mut run_files = Vec::new();
    let mut summaries = Vec::new();
    let mut all_runs = Vec::new();
    for (method, ablation, slug) in variants {
        // a fresh provider per variant so occurrence-keyed scripts replay
        let provider = build_provider(&config.provider)?;
        let path = out_dir.join(format!("run-{slug}.jsonl"));
        let summary = Job {
            provider: provider.as_ref(),
            prompts: &prompts,
            params: config.provider.params(),
            method,
            ablation,
            retriever: None,
            k: config.k,
            workers: config.workers,
        }
        .execute(&tasks, &path)?;
        log::info!("{}: {summary}", method_label(method, &ablation));
        all_runs.extend(read_run_file(&path)?);
        run_files.push(path);
        summaries.push(summary);
    }

    let report = evaluate_runs(&all_runs, &tasks, config.threshold)?;
    write_report(&report, &out_dir.join("report.json"))?;
    let baseline_label = method_label(Method::StandardCot, &AblationConfig::FULL);
    let table = render_ablation_table(&report, baseline.then_some(baseline_label.as_str()), format);
    std::fs::write(out_dir.join("ablation.txt"), &table)
        .map_err(|e| RuntimeError::Io(format!("{}: {e}", out_dir.display())))?;
    Ok(AblateSummary {
        run_files,
        runs: summaries,
        report,
        table,
    })
}

/// Merges report files into one report.
pub fn cmd_report(paths: &[PathBuf]) -> Result<EvalReport, RuntimeError> {
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    merge_reports(reports).map_err(|e| RuntimeError::Validation(e.to_string()))
}
