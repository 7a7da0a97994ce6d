//! Per-episode scoring, run aggregation, trace replay and report files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, DatasetError, QuestionRecord};
use crate::rewards::{
    decomposition_flag, exact_match, score_record, RewardBreakdown, RewardConfig,
};
use crate::rollout::{read_traces, RolloutConfig, TraceError, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub question_id: String,
    pub em: u8,
    pub decomposed: bool,
    pub turns: usize,
    pub policy_calls: usize,
    pub wall_ms: f64,
    /// Whitespace tokens after the initial prompt, retrieved text included.
    pub response_tokens: usize,
    pub truncated: bool,
    pub failed: bool,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory {trajectory:?} scored against record {record:?}")]
    IdMismatch { trajectory: String, record: String },
    #[error("record {0:?} has no question class")]
    Unclassified(String),
    #[error("no record for trace id {id:?}")]
    MissingRecord { id: String },
    #[error("nothing to aggregate")]
    EmptyRun,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn score_episode(
    trajectory: &Trajectory,
    record: &QuestionRecord,
    rewards: &RewardConfig,
) -> Result<EpisodeMetrics, EvalError> {
    if trajectory.question_id != record.id {
        return Err(EvalError::IdMismatch {
            trajectory: trajectory.question_id.clone(),
            record: record.id.clone(),
        });
    }
    let reward = score_record(trajectory, record, rewards)
        .ok_or_else(|| EvalError::Unclassified(record.id.clone()))?;
    Ok(EpisodeMetrics {
        question_id: record.id.clone(),
        em: exact_match(&record.golden_answers, trajectory.final_answer.as_deref()),
        decomposed: decomposition_flag(trajectory),
        turns: trajectory.turns.len(),
        policy_calls: trajectory.policy_call_count(),
        wall_ms: trajectory.wall_ms(),
        response_tokens: trajectory.response().split_whitespace().count(),
        truncated: trajectory.truncated,
        failed: trajectory.is_failed(),
        reward,
    })
}

/// Configuration a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub rewards: RewardConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(rewards: RewardConfig) -> Self {
        Self {
            rewards,
            rollout: None,
            settings: BTreeMap::new(),
        }
    }

    pub fn with_rollout(mut self, rollout: RolloutConfig) -> Self {
        self.rollout = Some(rollout);
        self
    }

    pub fn with_setting(mut self, key: &str, value: impl Serialize) -> Self {
        self.settings.insert(
            key.to_string(),
            serde_json::to_value(value).expect("manifest settings serialize"),
        );
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub r_o: f64,
    pub r_d: f64,
    pub r_s: f64,
    pub r_f: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub em_mean: f64,
    /// Percentage of episodes with a decomposed search, two decimals.
    pub dr_percent: f64,
    pub avg_turns: f64,
    pub avg_wall_s: f64,
    pub avg_response_tokens: f64,
    /// Turn count -> fraction of episodes with at most that many turns.
    pub turns_cdf: BTreeMap<usize, f64>,
    pub truncated: usize,
    pub failed: usize,
    pub reward_means: RewardMeans,
    pub config_manifest: RunManifest,
    /// Per-episode metrics sorted by question id.
    pub episodes: Vec<EpisodeMetrics>,
}

impl AggregateReport {
    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.avg_wall_s = 0.0;
        for e in &mut out.episodes {
            e.wall_ms = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Folds episode metrics into a report. Input order does not matter.
pub fn aggregate(
    metrics: &[EpisodeMetrics],
    manifest: RunManifest,
) -> Result<AggregateReport, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let mut episodes = metrics.to_vec();
    episodes.sort_by_cached_key(|e| {
        (
            e.question_id.clone(),
            serde_json::to_string(e).expect("metrics serialize"),
        )
    });

    let n = episodes.len();
    let nf = n as f64;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / nf;

    let mut turn_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in &episodes {
        *turn_counts.entry(e.turns).or_insert(0) += 1;
    }
    let mut cumulative = 0;
    let turns_cdf = turn_counts
        .into_iter()
        .map(|(turns, count)| {
            cumulative += count;
            (turns, cumulative as f64 / nf)
        })
        .collect();

    let decomposed = episodes.iter().filter(|e| e.decomposed).count();
    Ok(AggregateReport {
        n,
        em_mean: mean(&|e| f64::from(e.em)),
        dr_percent: round2(100.0 * decomposed as f64 / nf),
        avg_turns: mean(&|e| e.turns as f64),
        avg_wall_s: mean(&|e| e.wall_ms / 1000.0),
        avg_response_tokens: mean(&|e| e.response_tokens as f64),
        turns_cdf,
        truncated: episodes.iter().filter(|e| e.truncated).count(),
        failed: episodes.iter().filter(|e| e.failed).count(),
        reward_means: RewardMeans {
            r_o: mean(&|e| e.reward.r_o),
            r_d: mean(&|e| e.reward.r_d),
            r_s: mean(&|e| e.reward.r_s),
            r_f: mean(&|e| e.reward.r_f),
            total: mean(&|e| e.reward.total),
        },
        config_manifest: manifest,
        episodes,
    })
}

/// Scores every trajectory against its record by id.
pub fn score_all(
    trajectories: &[Trajectory],
    records: &[QuestionRecord],
    rewards: &RewardConfig,
) -> Result<Vec<EpisodeMetrics>, EvalError> {
    let by_id: HashMap<&str, &QuestionRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    trajectories
        .iter()
        .map(|t| {
            let record =
                by_id
                    .get(t.question_id.as_str())
                    .ok_or_else(|| EvalError::MissingRecord {
                        id: t.question_id.clone(),
                    })?;
            score_episode(t, record, rewards)
        })
        .collect()
}

/// Recomputes a report from stored traces alone.
pub fn replay(
    trace_path: &Path,
    questions_path: &Path,
    rewards: &RewardConfig,
    excluded_as_other: bool,
) -> Result<AggregateReport, EvalError> {
    let trajectories = read_traces(trace_path)?;
    let mut records = datasets::load_questions(questions_path)?.into_strict()?;
    if excluded_as_other {
        datasets::assign_excluded_as_other(&mut records);
    }
    let metrics = score_all(&trajectories, &records, rewards)?;
    aggregate(&metrics, RunManifest::new(*rewards))
}

/// [`replay`] under a stored run manifest; rewards come from `manifest`.
pub fn replay_with_manifest(
    trace_path: &Path,
    questions_path: &Path,
    manifest: RunManifest,
    excluded_as_other: bool,
) -> Result<AggregateReport, EvalError> {
    let mut report = replay(
        trace_path,
        questions_path,
        &manifest.rewards,
        excluded_as_other,
    )?;
    report.config_manifest = manifest;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Metric rows followed by one `cdf` row per observed turn count.
pub fn report_csv(report: &AggregateReport) -> Result<String, EvalError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["section", "key", "value"])?;
    let rows: [(&str, String); 14] = [
        ("n", report.n.to_string()),
        ("em_mean", format!("{:.4}", report.em_mean)),
        ("dr_percent", format!("{:.2}", report.dr_percent)),
        ("avg_turns", format!("{:.4}", report.avg_turns)),
        ("avg_wall_s", format!("{:.4}", report.avg_wall_s)),
        (
            "avg_response_tokens",
            format!("{:.2}", report.avg_response_tokens),
        ),
        ("truncated", report.truncated.to_string()),
        ("failed", report.failed.to_string()),
        ("reward_r_o", format!("{:.4}", report.reward_means.r_o)),
        ("reward_r_d", format!("{:.4}", report.reward_means.r_d)),
        ("reward_r_s", format!("{:.4}", report.reward_means.r_s)),
        ("reward_r_f", format!("{:.4}", report.reward_means.r_f)),
        ("reward_total", format!("{:.4}", report.reward_means.total)),
        (
            "lambda_d/alpha/lambda_s/lambda_f",
            format!(
                "{}/{}/{}/{}",
                report.config_manifest.rewards.lambda_d,
                report.config_manifest.rewards.alpha,
                report.config_manifest.rewards.lambda_s,
                report.config_manifest.rewards.lambda_f
            ),
        ),
    ];
    for (key, value) in rows {
        writer.write_record(["metric", key, &value])?;
    }
    for (turns, frac) in &report.turns_cdf {
        writer.write_record(["cdf", &turns.to_string(), &format!("{frac:.6}")])?;
    }
    let bytes = writer.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(
    report: &AggregateReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), EvalError> {
    let body = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report_csv(report)?,
    };
    std::fs::write(path, body)?;
    Ok(())
}
