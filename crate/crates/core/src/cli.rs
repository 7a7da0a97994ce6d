//! Command implementations behind the `parsearch` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 external-service
//! failure, 4 data error.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, QuestionRecord, Source, SplitRules};
use crate::evaluation::{
    self, aggregate, emit_report, score_all, AggregateReport, ReportFormat, RunManifest,
};
use crate::policy::{Policy, PolicyError, RemotePolicy, ScriptedPolicy};
use crate::retrieval::{
    self, check_topk, DelayedRetriever, Document, Index, LocalRetriever, RemoteRetriever,
    Retriever, RetrieverConfig,
};
use crate::rewards::{self, RewardConfig};
use crate::rollout::{read_traces, run_batch, write_traces, RolloutConfig, Trajectory};
use crate::tags::validate_transcript;

pub const CONFIG_ENV: &str = "PARSEARCH_CONFIG";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("external service failure: {0}")]
    External(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::External(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Everything a run needs. Loadable from TOML; flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub retriever_endpoint: Option<String>,
    pub policy_endpoint: Option<String>,
    pub script: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub parallelism: usize,
    pub fanout_limit: usize,
    /// Score records the split rules exclude as class O.
    pub excluded_as_other: bool,
    pub rollout: RolloutConfig,
    pub rewards: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            corpus: None,
            retriever_endpoint: None,
            policy_endpoint: None,
            script: None,
            out: None,
            parallelism: 4,
            fanout_limit: retrieval::DEFAULT_FANOUT_LIMIT,
            excluded_as_other: false,
            rollout: RolloutConfig::default(),
            rewards: RewardConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dataset.is_none() {
            return Err(config_err("--dataset is required"));
        }
        if self.out.is_none() {
            return Err(config_err("--out is required"));
        }
        match (&self.corpus, &self.retriever_endpoint) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "set exactly one of --corpus and --retriever-endpoint, not both",
                ))
            }
            (None, None) => {
                return Err(config_err(
                    "one of --corpus or --retriever-endpoint is required",
                ))
            }
            _ => {}
        }
        match (&self.policy_endpoint, &self.script) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "set exactly one of --policy-endpoint and --script, not both",
                ))
            }
            (None, None) => {
                return Err(config_err(
                    "one of --policy-endpoint or --script is required",
                ))
            }
            _ => {}
        }
        if self.parallelism == 0 {
            return Err(config_err("parallelism must be at least 1"));
        }
        if self.fanout_limit == 0 {
            return Err(config_err("fanout_limit must be at least 1"));
        }
        self.rollout.validate().map_err(config_err)?;
        self.rewards.validate().map_err(config_err)?;
        Ok(())
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::new(self.rewards)
            .with_rollout(self.rollout)
            .with_setting("topk", self.rollout.topk)
            .with_setting("parallelism", self.parallelism)
            .with_setting("fanout_limit", self.fanout_limit)
            .with_setting("excluded_as_other", self.excluded_as_other)
            .with_setting("dataset", &self.dataset)
            .with_setting("corpus", &self.corpus)
            .with_setting("retriever_endpoint", &self.retriever_endpoint)
            .with_setting("policy_endpoint", &self.policy_endpoint)
            .with_setting("script", &self.script)
    }
}

/// One line of a script file: the generations to replay for a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub question_id: String,
    pub turns: Vec<String>,
}

pub fn load_scripts(path: &Path) -> Result<HashMap<String, Vec<String>>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut scripts = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(data_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScriptLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("script line {}: {e}", i + 1)))?;
        scripts.insert(parsed.question_id, parsed.turns);
    }
    Ok(scripts)
}

pub fn write_scripts(path: &Path, scripts: &[ScriptLine]) -> std::io::Result<()> {
    let body: String = scripts
        .iter()
        .map(|s| serde_json::to_string(s).expect("scripts serialize") + "\n")
        .collect();
    std::fs::write(path, body)
}

fn build_retriever(config: &RunConfig) -> Result<Box<dyn Retriever>, CliError> {
    let retriever_config = RetrieverConfig {
        topk: config.rollout.topk,
        passage_token_cap: config.rollout.passage_token_cap,
        fanout_limit: config.fanout_limit,
    };
    if let Some(endpoint) = &config.retriever_endpoint {
        return Ok(Box::new(
            RemoteRetriever::new(endpoint.clone())
                .with_passage_token_cap(retriever_config.passage_token_cap),
        ));
    }
    let path = config.corpus.as_ref().expect("validated");
    let docs = retrieval::load_corpus(path).map_err(data_err)?;
    let index = Index::build(docs).map_err(data_err)?;
    Ok(Box::new(LocalRetriever::new(index, retriever_config)))
}

enum PolicySource {
    Scripts(HashMap<String, Vec<String>>),
    Remote(RemotePolicy),
}

impl PolicySource {
    fn from_config(config: &RunConfig) -> Result<Self, CliError> {
        match (&config.script, &config.policy_endpoint) {
            (Some(path), _) => Ok(PolicySource::Scripts(load_scripts(path)?)),
            (None, Some(endpoint)) => Ok(PolicySource::Remote(RemotePolicy::new(endpoint.clone()))),
            (None, None) => Err(config_err("no policy configured")),
        }
    }

    fn make(&self, record: &QuestionRecord) -> Result<Box<dyn Policy>, PolicyError> {
        match self {
            PolicySource::Scripts(scripts) => scripts
                .get(&record.id)
                .map(|turns| Box::new(ScriptedPolicy::new(turns.clone())) as Box<dyn Policy>)
                .ok_or_else(|| PolicyError::MissingScript(record.id.clone())),
            PolicySource::Remote(remote) => Ok(Box::new(remote.clone())),
        }
    }
}

fn load_records(path: &Path, excluded_as_other: bool) -> Result<Vec<QuestionRecord>, CliError> {
    let mut records = datasets::load_questions(path)
        .map_err(data_err)?
        .into_strict()
        .map_err(data_err)?;
    if excluded_as_other {
        datasets::assign_excluded_as_other(&mut records);
    }
    Ok(records)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trajectories: Vec<Trajectory>,
    pub report: AggregateReport,
    pub trace_path: PathBuf,
    pub report_path: PathBuf,
}

impl RunOutcome {
    /// Error to exit with if any episode failed.
    pub fn failure(&self) -> Option<CliError> {
        let failed: Vec<&Trajectory> = self.trajectories.iter().filter(|t| t.is_failed()).collect();
        let first = failed
            .first()?
            .failure
            .as_ref()
            .expect("filtered on failure");
        let message = format!(
            "{} of {} episodes failed; first ({}): {}",
            failed.len(),
            self.trajectories.len(),
            failed[0].question_id,
            first.message
        );
        Some(if first.external {
            CliError::External(message)
        } else {
            CliError::Data(message)
        })
    }
}

/// Runs every question, writes `traces.jsonl`, `report.json` and
/// `report.csv` under the output directory.
pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let records = load_records(
        config.dataset.as_ref().expect("validated"),
        config.excluded_as_other,
    )?;
    if records.is_empty() {
        return Err(CliError::Data("dataset has no questions".into()));
    }
    let unclassified = records.iter().filter(|r| r.class.is_none()).count();
    if unclassified > 0 {
        return Err(CliError::Data(format!(
            "{unclassified} questions have no class under the split rules; \
             split the dataset first or pass --excluded-as-other"
        )));
    }
    let retriever = build_retriever(config)?;
    let policies = PolicySource::from_config(config)?;

    let out = config.out.as_ref().expect("validated");
    std::fs::create_dir_all(out).map_err(data_err)?;

    let factory = |record: &QuestionRecord| policies.make(record);
    let trajectories = run_batch(
        &records,
        &factory,
        retriever.as_ref(),
        &config.rollout,
        config.parallelism,
    );

    let trace_path = out.join("traces.jsonl");
    write_traces(&trace_path, &trajectories).map_err(data_err)?;
    let metrics = score_all(&trajectories, &records, &config.rewards).map_err(data_err)?;
    let manifest = config.manifest();
    std::fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifests serialize"),
    )
    .map_err(data_err)?;
    let report = aggregate(&metrics, manifest).map_err(data_err)?;
    let report_path = out.join("report.json");
    emit_report(&report, ReportFormat::Json, &report_path).map_err(data_err)?;
    emit_report(&report, ReportFormat::Csv, &out.join("report.csv")).map_err(data_err)?;

    Ok(RunOutcome {
        trajectories,
        report,
        trace_path,
        report_path,
    })
}

/// The manifest a run stored next to its traces, if there is one.
pub fn load_manifest_beside(traces: &Path) -> Result<Option<RunManifest>, CliError> {
    let path = traces
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(data_err)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Recomputes the report from stored traces, optionally writing it.
///
/// With a stored manifest the report carries the original run settings
/// and `rewards` replaces only the reward weights.
pub fn cmd_replay(
    traces: &Path,
    dataset: &Path,
    rewards: &RewardConfig,
    manifest: Option<RunManifest>,
    excluded_as_other: bool,
    out: Option<&Path>,
) -> Result<AggregateReport, CliError> {
    rewards.validate().map_err(config_err)?;
    let mut manifest = manifest.unwrap_or_else(|| RunManifest::new(*rewards));
    manifest.rewards = *rewards;
    let report = evaluation::replay_with_manifest(traces, dataset, manifest, excluded_as_other)
        .map_err(data_err)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(data_err)?;
        emit_report(&report, ReportFormat::Json, &out.join("report.json")).map_err(data_err)?;
        emit_report(&report, ReportFormat::Csv, &out.join("report.csv")).map_err(data_err)?;
    }
    Ok(report)
}

/// Per-episode reward breakdown with the format violations behind it.
#[derive(Debug, Clone, Serialize)]
pub struct AuditLine {
    pub question_id: String,
    pub class: Option<rewards::QuestionClass>,
    pub reward: Option<rewards::RewardBreakdown>,
    pub violations: Vec<crate::tags::Violation>,
}

pub fn cmd_audit(
    traces: &Path,
    dataset: &Path,
    rewards_cfg: &RewardConfig,
    excluded_as_other: bool,
) -> Result<Vec<AuditLine>, CliError> {
    rewards_cfg.validate().map_err(config_err)?;
    let trajectories = read_traces(traces).map_err(data_err)?;
    let records = load_records(dataset, excluded_as_other)?;
    let by_id: HashMap<&str, &QuestionRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    trajectories
        .iter()
        .map(|t| {
            let record = by_id.get(t.question_id.as_str()).ok_or_else(|| {
                CliError::Data(format!("no record for trace id {:?}", t.question_id))
            })?;
            Ok(AuditLine {
                question_id: t.question_id.clone(),
                class: record.class,
                reward: rewards::score_record(t, record, rewards_cfg),
                violations: validate_transcript(t).violations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitOutcome {
    pub rules: String,
    pub par: usize,
    pub seq: usize,
    pub excluded: usize,
    pub par_path: PathBuf,
    pub seq_path: PathBuf,
}

/// Writes `<stem>-par.jsonl` and `<stem>-seq.jsonl` under `out`.
pub fn cmd_split(dataset: &Path, rules_name: &str, out: &Path) -> Result<SplitOutcome, CliError> {
    let rules = SplitRules::named(rules_name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown rules {rules_name:?}; expected one of {}",
            SplitRules::NAMES.join(", ")
        ))
    })?;
    let records = load_records(dataset, false)?;
    let split = datasets::split_par_seq(&records, &rules);
    std::fs::create_dir_all(out).map_err(data_err)?;
    let stem = dataset
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("questions");
    let par_path = out.join(format!("{stem}-par.jsonl"));
    let seq_path = out.join(format!("{stem}-seq.jsonl"));
    datasets::write_questions(&par_path, &split.par).map_err(data_err)?;
    datasets::write_questions(&seq_path, &split.seq).map_err(data_err)?;
    Ok(SplitOutcome {
        rules: rules.name().to_string(),
        par: split.par.len(),
        seq: split.seq.len(),
        excluded: split.excluded,
        par_path,
        seq_path,
    })
}

/// Runs the run configuration once per `k`, each under `<out>/k<k>/`.
/// Every `k` is checked before anything runs.
pub fn cmd_sweep_topk(config: &RunConfig, ks: &[usize]) -> Result<Vec<RunOutcome>, CliError> {
    if ks.is_empty() {
        return Err(config_err("no k values given"));
    }
    for &k in ks {
        check_topk(k).map_err(config_err)?;
    }
    config.validate()?;
    let base_out = config.out.clone().expect("validated");
    ks.iter()
        .map(|&k| {
            let mut run = config.clone();
            run.rollout.topk = k;
            run.out = Some(base_out.join(format!("k{k}")));
            cmd_run(&run)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchConfig {
    pub modes: Vec<BenchMode>,
    pub latency_ms: u64,
    pub queries_per_question: usize,
    pub questions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![BenchMode::Parallel, BenchMode::Sequential],
            latency_ms: 100,
            queries_per_question: 2,
            questions: 1,
        }
    }
}

const PAINTERS: [(&str, u32); 10] = [
    ("Claude Monet", 1840),
    ("Camille Pissarro", 1830),
    ("Edgar Degas", 1834),
    ("Paul Cezanne", 1839),
    ("Pierre-Auguste Renoir", 1841),
    ("Mary Cassatt", 1844),
    ("Gustave Caillebotte", 1848),
    ("Edouard Manet", 1832),
    ("Vincent van Gogh", 1853),
    ("Georges Seurat", 1859),
];

/// A built-in comparison question over several painters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchScenario {
    pub record: QuestionRecord,
    pub entities: Vec<&'static str>,
    pub answer: &'static str,
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} or {}", init.join(", "), last),
    }
}

/// Comparison scenarios: "who is older" over `entities_per_question`
/// painters. The first scenario with two entities is Monet vs Pissarro.
pub fn bench_scenarios(count: usize, entities_per_question: usize) -> Vec<BenchScenario> {
    let per = entities_per_question.clamp(1, PAINTERS.len());
    (0..count)
        .map(|s| {
            let group: Vec<(&'static str, u32)> = (0..per)
                .map(|j| PAINTERS[(s * per + j) % PAINTERS.len()])
                .collect();
            let entities: Vec<&'static str> = group.iter().map(|(n, _)| *n).collect();
            let answer = group
                .iter()
                .min_by_key(|(_, year)| *year)
                .map(|(n, _)| *n)
                .expect("non-empty group");
            let record = QuestionRecord::new(
                format!("bench-{s:03}"),
                format!("Who is older, {}?", join_names(&entities)),
                vec![answer.to_string()],
                Source::Custom,
                None,
            );
            let mut record = record;
            record.class = Some(rewards::QuestionClass::Parallel);
            BenchScenario {
                record,
                entities,
                answer,
            }
        })
        .collect()
}

pub fn bench_corpus() -> Vec<Document> {
    PAINTERS
        .iter()
        .enumerate()
        .map(|(i, (name, year))| Document {
            id: format!("painter-{i:02}"),
            title: name.to_string(),
            text: format!("{name} was a painter born in {year}."),
        })
        .collect()
}

/// Generations a well-behaved agent would produce in each mode.
pub fn bench_script(scenario: &BenchScenario, mode: BenchMode) -> Vec<String> {
    let queries: Vec<String> = scenario
        .entities
        .iter()
        .map(|e| format!("{e} birth year"))
        .collect();
    let mut turns = match mode {
        BenchMode::Parallel => vec![format!(
            "<think>I need the birth years of {}.</think><search>{}</search>",
            join_names(&scenario.entities),
            queries.join(" ## ")
        )],
        BenchMode::Sequential => queries
            .iter()
            .zip(&scenario.entities)
            .map(|(q, e)| {
                format!("<think>I need the birth year of {e}.</think><search>{q}</search>")
            })
            .collect(),
    };
    turns.push(format!(
        "<think>{} has the earliest birth year.</think><answer>{}</answer>",
        scenario.answer, scenario.answer
    ));
    turns
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchModeReport {
    pub mode: BenchMode,
    pub questions: usize,
    pub policy_calls: usize,
    pub search_actions: usize,
    pub turns: usize,
    pub em_mean: f64,
    pub avg_policy_calls: f64,
    pub avg_turns: f64,
    /// Mean per-question time spent waiting on retrieval.
    pub avg_retrieval_ms: f64,
    pub avg_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub modes: Vec<BenchModeReport>,
    /// Parallel policy calls over sequential policy calls, when both ran.
    pub call_ratio: Option<f64>,
}

/// Scripted parallel-vs-sequential comparison under injected retrieval
/// latency. Episodes run one at a time so timings do not overlap.
pub fn cmd_bench(config: &BenchConfig) -> Result<BenchReport, CliError> {
    if config.queries_per_question == 0 || config.queries_per_question > PAINTERS.len() {
        return Err(config_err(format!(
            "queries_per_question must be in 1..={}",
            PAINTERS.len()
        )));
    }
    if config.questions == 0 {
        return Err(config_err("questions must be at least 1"));
    }
    let index = Index::build(bench_corpus()).map_err(data_err)?;
    let local = LocalRetriever::new(
        index,
        RetrieverConfig {
            fanout_limit: config
                .queries_per_question
                .max(retrieval::DEFAULT_FANOUT_LIMIT),
            ..Default::default()
        },
    );
    let retriever = DelayedRetriever::new(local, Duration::from_millis(config.latency_ms));
    let scenarios = bench_scenarios(config.questions, config.queries_per_question);
    let rollout = RolloutConfig {
        max_turns: config.queries_per_question + 1,
        max_subqueries: config.queries_per_question.max(1),
        ..Default::default()
    };

    let mut modes = Vec::new();
    for &mode in &config.modes {
        let scripts: HashMap<String, Vec<String>> = scenarios
            .iter()
            .map(|s| (s.record.id.clone(), bench_script(s, mode)))
            .collect();
        let scripts = Arc::new(scripts);
        let factory = |record: &QuestionRecord| -> Result<Box<dyn Policy>, PolicyError> {
            let turns = scripts
                .get(&record.id)
                .ok_or_else(|| PolicyError::MissingScript(record.id.clone()))?;
            Ok(Box::new(ScriptedPolicy::new(turns.clone())))
        };
        let records: Vec<QuestionRecord> = scenarios.iter().map(|s| s.record.clone()).collect();
        let started = Instant::now();
        let trajectories = run_batch(&records, &factory, &retriever, &rollout, 1);
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        if let Some(t) = trajectories.iter().find(|t| t.is_failed()) {
            return Err(CliError::Data(format!(
                "bench episode {} failed: {:?}",
                t.question_id, t.failure
            )));
        }
        let n = trajectories.len() as f64;
        let policy_calls: usize = trajectories.iter().map(Trajectory::policy_call_count).sum();
        let turns: usize = trajectories.iter().map(|t| t.turns.len()).sum();
        let retrieval_ms: f64 = trajectories
            .iter()
            .flat_map(|t| &t.turn_timings)
            .map(|t| t.retrieve_ms)
            .sum();
        let em: f64 = trajectories
            .iter()
            .zip(&records)
            .map(|(t, r)| {
                f64::from(rewards::exact_match(
                    &r.golden_answers,
                    t.final_answer.as_deref(),
                ))
            })
            .sum();
        modes.push(BenchModeReport {
            mode,
            questions: trajectories.len(),
            policy_calls,
            search_actions: trajectories
                .iter()
                .map(Trajectory::search_action_count)
                .sum(),
            turns,
            em_mean: em / n,
            avg_policy_calls: policy_calls as f64 / n,
            avg_turns: turns as f64 / n,
            avg_retrieval_ms: retrieval_ms / n,
            avg_wall_ms: elapsed_ms / n,
        });
    }

    let calls = |m: BenchMode| modes.iter().find(|r| r.mode == m).map(|r| r.policy_calls);
    let call_ratio = match (calls(BenchMode::Parallel), calls(BenchMode::Sequential)) {
        (Some(p), Some(s)) if s > 0 => Some(p as f64 / s as f64),
        _ => None,
    };
    Ok(BenchReport {
        config: config.clone(),
        modes,
        call_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexStats {
    pub documents: usize,
    pub vocabulary: usize,
    pub results: Option<Vec<retrieval::RetrievalResult>>,
}

pub fn cmd_index(corpus: &Path, query: Option<&str>, topk: usize) -> Result<IndexStats, CliError> {
    check_topk(topk).map_err(config_err)?;
    let docs = retrieval::load_corpus(corpus).map_err(data_err)?;
    let index = Index::build(docs).map_err(data_err)?;
    let results = query
        .map(|q| index.retrieve(q, topk, retrieval::DEFAULT_PASSAGE_TOKEN_CAP))
        .transpose()
        .map_err(data_err)?;
    Ok(IndexStats {
        documents: index.len(),
        vocabulary: index.vocabulary_size(),
        results,
    })
}

// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "parsearch",
    version,
    about = "Parallel search agent runtime and evaluation harness"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an index over a corpus and optionally run one query.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = retrieval::DEFAULT_TOPK)]
        topk: usize,
    },
    /// Run every question and write traces plus a report.
    Run(RunArgs),
    /// Recompute a report from stored traces.
    Replay {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        excluded_as_other: bool,
        #[command(flatten)]
        rewards: RewardArgs,
    },
    /// Print the per-episode reward breakdown of stored traces as JSONL.
    Audit {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        excluded_as_other: bool,
        #[command(flatten)]
        rewards: RewardArgs,
    },
    /// Write the parallelizable and sequential subsets of a question file.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "default")]
        rules: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare parallel and sequential search under injected latency.
    Bench {
        #[arg(long, value_enum)]
        mode: Option<BenchMode>,
        #[arg(long, default_value_t = 100)]
        latency_ms: u64,
        #[arg(long, default_value_t = 2)]
        queries_per_question: usize,
        #[arg(long, default_value_t = 1)]
        questions: usize,
    },
    /// Repeat a run for several top-k values.
    SweepTopk {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        ks: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RewardArgs {
    /// Decomposition reward weight [default: 0.15].
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Bonus multiplier for decomposed parallel questions [default: 2.0].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Search-count penalty weight [default: 0.35].
    #[arg(long)]
    pub lambda_s: Option<f64>,
    /// Format reward weight [default: 0.2].
    #[arg(long)]
    pub lambda_f: Option<f64>,
}

impl RewardArgs {
    pub fn apply(&self, base: RewardConfig) -> RewardConfig {
        RewardConfig {
            lambda_d: self.lambda_d.unwrap_or(base.lambda_d),
            alpha: self.alpha.unwrap_or(base.alpha),
            lambda_s: self.lambda_s.unwrap_or(base.lambda_s),
            lambda_f: self.lambda_f.unwrap_or(base.lambda_f),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Question file (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Local corpus (JSONL of id, title, text).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Base URL of a remote retriever.
    #[arg(long)]
    pub retriever_endpoint: Option<String>,
    /// Base URL of a remote generation server.
    #[arg(long)]
    pub policy_endpoint: Option<String>,
    /// Scripted generations per question (JSONL).
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Passages per sub-query [default: 3].
    #[arg(long)]
    pub topk: Option<usize>,
    /// Turn budget per episode [default: 4].
    #[arg(long)]
    pub max_turns: Option<usize>,
    /// Episodes in flight [default: 4].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub excluded_as_other: bool,
    #[command(flatten)]
    pub rewards: RewardArgs,
}

impl RunArgs {
    pub fn apply(&self, mut base: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    base.$field = Some(v.clone());
                }
            )*};
        }
        take!(
            dataset,
            corpus,
            retriever_endpoint,
            policy_endpoint,
            script,
            out
        );
        if let Some(k) = self.topk {
            base.rollout.topk = k;
        }
        if let Some(b) = self.max_turns {
            base.rollout.max_turns = b;
        }
        if let Some(p) = self.parallelism {
            base.parallelism = p;
        }
        base.excluded_as_other |= self.excluded_as_other;
        base.rewards = self.rewards.apply(base.rewards);
        base
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("command output serializes")
    );
}

/// Executes a parsed command line, printing its output.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Index {
            corpus,
            query,
            topk,
        } => print_json(&cmd_index(&corpus, query.as_deref(), topk)?),
        Command::Run(args) => {
            let config = args.apply(base_config(file)?);
            let outcome = cmd_run(&config)?;
            eprintln!(
                "wrote {} and {}",
                outcome.trace_path.display(),
                outcome.report_path.display()
            );
            if let Some(err) = outcome.failure() {
                return Err(err);
            }
        }
        Command::Replay {
            traces,
            dataset,
            out,
            excluded_as_other,
            rewards,
        } => {
            let manifest = load_manifest_beside(&traces)?;
            let base = match (file, &manifest) {
                (None, Some(m)) => m.rewards,
                _ => base_config(file)?.rewards,
            };
            let cfg = rewards.apply(base);
            let report = cmd_replay(
                &traces,
                &dataset,
                &cfg,
                manifest,
                excluded_as_other,
                out.as_deref(),
            )?;
            println!("{}", report.to_json());
        }
        Command::Audit {
            traces,
            dataset,
            excluded_as_other,
            rewards,
        } => {
            let cfg = rewards.apply(base_config(file)?.rewards);
            for line in cmd_audit(&traces, &dataset, &cfg, excluded_as_other)? {
                println!(
                    "{}",
                    serde_json::to_string(&line).expect("audit lines serialize")
                );
            }
        }
        Command::Split {
            dataset,
            rules,
            out,
        } => print_json(&cmd_split(&dataset, &rules, &out)?),
        Command::Bench {
            mode,
            latency_ms,
            queries_per_question,
            questions,
        } => {
            let config = BenchConfig {
                modes: mode.map_or_else(
                    || vec![BenchMode::Parallel, BenchMode::Sequential],
                    |m| vec![m],
                ),
                latency_ms,
                queries_per_question,
                questions,
            };
            print_json(&cmd_bench(&config)?);
        }
        Command::SweepTopk { ks, run } => {
            let config = run.apply(base_config(file)?);
            let outcomes = cmd_sweep_topk(&config, &ks)?;
            let summary: Vec<serde_json::Value> = ks
                .iter()
                .zip(&outcomes)
                .map(|(k, o)| {
                    serde_json::json!({
                        "k": k,
                        "report": o.report_path,
                        "em_mean": o.report.em_mean,
                        "avg_turns": o.report.avg_turns,
                    })
                })
                .collect();
            print_json(&summary);
            if let Some(err) = outcomes.iter().find_map(RunOutcome::failure) {
                return Err(err);
            }
        }
    }
    Ok(())
}
