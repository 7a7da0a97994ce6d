//! The multi-turn think → act loop.
//!
//! Each turn asks the policy for one generation. A search action is split
//! into sub-queries that are retrieved concurrently and inserted as one
//! information block; an answer ends the episode; anything else gets a
//! rethink message. Every turn, valid or not, spends one unit of the turn
//! budget.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::QuestionRecord;
use crate::policy::{
    GenerationRequest, Policy, PolicyError, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::retrieval::{
    check_topk, ordered_fan_out, RetrievalError, Retriever, DEFAULT_PASSAGE_TOKEN_CAP, DEFAULT_TOPK,
};
use crate::tags::{
    parse_turn, render_information_block, AgentAction, AgentTurn, DEFAULT_MAX_SUBQUERIES,
};

/// Inserted after a generation with no usable action.
pub const RETHINK_MESSAGE: &str = "My action is not correct. Let me rethink.";

const PROMPT_TEMPLATE: &str = "Answer the given question. \
You must conduct reasoning inside <think> and </think> first every time you get new information. \
After reasoning, if you find you lack some knowledge, you can call a search engine by <search> query </search>, \
and it will return the top searched results between <information> and </information>. \
If the original query is complex or involves multiple parts, you are encouraged to decompose it into smaller sub-questions, separated by ##. \
For example: <search> sub-question 1 ## sub-question 2 </search>. \
You can search as many times as you want. \
If you find no further external knowledge needed, you can directly provide the answer inside <answer> and </answer> without detailed illustrations. \
For example, <answer> xxx </answer>. Question: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
}

/// Instruction template with `question` in the final slot, verbatim.
pub fn build_prompt(question: &str) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    Ok(format!("{PROMPT_TEMPLATE}{question}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub max_turns: usize,
    pub topk: usize,
    pub max_subqueries: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub passage_token_cap: usize,
    pub record_timing: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_turns: 4,
            topk: DEFAULT_TOPK,
            max_subqueries: DEFAULT_MAX_SUBQUERIES,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            passage_token_cap: DEFAULT_PASSAGE_TOKEN_CAP,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutConfigError {
    #[error("max_turns must be at least 1")]
    MaxTurns,
    #[error("topk must be in 1..=10, got {0}")]
    TopK(usize),
    #[error("max_subqueries must be at least 1")]
    MaxSubqueries,
    #[error("max_new_tokens must be at least 1")]
    MaxNewTokens,
    #[error("temperature must be finite and non-negative, got {0}")]
    Temperature(f64),
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutConfigError> {
        if self.max_turns == 0 {
            return Err(RolloutConfigError::MaxTurns);
        }
        check_topk(self.topk).map_err(|_| RolloutConfigError::TopK(self.topk))?;
        if self.max_subqueries == 0 {
            return Err(RolloutConfigError::MaxSubqueries);
        }
        if self.max_new_tokens == 0 {
            return Err(RolloutConfigError::MaxNewTokens);
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(RolloutConfigError::Temperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTiming {
    pub generate_ms: f64,
    pub retrieve_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Prompt,
    Policy,
    Retriever,
}

/// Why an episode stopped early. `external` marks failures of a remote
/// service as opposed to bad local data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub kind: FailureKind,
    pub external: bool,
    pub message: String,
}

impl EpisodeFailure {
    fn policy(err: &PolicyError) -> Self {
        Self {
            kind: FailureKind::Policy,
            external: err.is_external(),
            message: err.to_string(),
        }
    }

    fn retriever(err: &RetrievalError) -> Self {
        Self {
            kind: FailureKind::Retriever,
            external: err.is_external(),
            message: err.to_string(),
        }
    }
}

/// One complete episode. This is also the trace line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub prompt: String,
    pub turns: Vec<AgentTurn>,
    /// One rendered block per search turn, in order.
    pub info_blocks: Vec<String>,
    pub final_answer: Option<String>,
    /// Turn budget ran out before an answer.
    pub truncated: bool,
    #[serde(rename = "timings")]
    pub turn_timings: Vec<TurnTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<EpisodeFailure>,
}

impl Trajectory {
    fn empty(question_id: &str, prompt: String) -> Self {
        Self {
            question_id: question_id.to_string(),
            prompt,
            turns: Vec::new(),
            info_blocks: Vec::new(),
            final_answer: None,
            truncated: false,
            turn_timings: Vec::new(),
            failure: None,
        }
    }

    pub fn search_action_count(&self) -> usize {
        self.turns.iter().filter(|t| t.action.is_search()).count()
    }

    /// One generation per turn.
    pub fn policy_call_count(&self) -> usize {
        self.turns.len()
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Full context in execution order: prompt, then each generation
    /// followed by its information block or rethink message.
    pub fn transcript(&self) -> String {
        let mut out = Transcript::new(&self.prompt);
        let mut infos = self.info_blocks.iter();
        for turn in &self.turns {
            out.push(&turn.raw);
            match turn.action {
                AgentAction::Search { .. } => {
                    if let Some(block) = infos.next() {
                        out.push(block);
                    }
                }
                AgentAction::Invalid { .. } => out.push(RETHINK_MESSAGE),
                AgentAction::Answer { .. } => {}
            }
        }
        out.0
    }

    /// The transcript after the initial prompt.
    pub fn response(&self) -> String {
        let transcript = self.transcript();
        transcript[self.prompt.len()..].to_string()
    }

    /// Sum of generation and retrieval time over all turns.
    pub fn wall_ms(&self) -> f64 {
        self.turn_timings
            .iter()
            .map(|t| t.generate_ms + t.retrieve_ms)
            .sum()
    }
}

/// Appends pieces to the context, one newline between pieces.
struct Transcript(String);

impl Transcript {
    fn new(prompt: &str) -> Self {
        Self(prompt.to_string())
    }

    fn push(&mut self, piece: &str) {
        self.0.push('\n');
        self.0.push_str(piece);
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Runs one episode to an answer, budget exhaustion, or failure.
///
/// Failures are recorded in the returned trajectory rather than raised.
pub fn run_episode(
    record: &QuestionRecord,
    policy: &mut dyn Policy,
    retriever: &dyn Retriever,
    config: &RolloutConfig,
) -> Trajectory {
    let prompt = match build_prompt(&record.question) {
        Ok(p) => p,
        Err(e) => {
            let mut t = Trajectory::empty(&record.id, String::new());
            t.failure = Some(EpisodeFailure {
                kind: FailureKind::Prompt,
                external: false,
                message: e.to_string(),
            });
            return t;
        }
    };
    let mut trajectory = Trajectory::empty(&record.id, prompt.clone());
    let mut context = Transcript::new(&prompt);

    let mut budget_used = 0;
    while budget_used < config.max_turns {
        let request = GenerationRequest::rollout(
            context.0.clone(),
            config.max_new_tokens,
            config.temperature,
        );
        let started = Instant::now();
        let generation = match policy.generate(&request) {
            Ok(g) => g,
            Err(e) => {
                trajectory.failure = Some(EpisodeFailure::policy(&e));
                return trajectory;
            }
        };
        let mut timing = TurnTiming {
            generate_ms: elapsed_ms(started),
            retrieve_ms: 0.0,
        };

        let turn = parse_turn(&generation.text, config.max_subqueries);
        context.push(&turn.raw);
        match &turn.action {
            AgentAction::Search { subqueries } => {
                let started = Instant::now();
                let fetched = retriever
                    .retrieve_batch(subqueries, config.topk)
                    .and_then(|lists| {
                        subqueries
                            .iter()
                            .cloned()
                            .zip(lists)
                            .map(|(q, r)| r.map(|docs| (q, docs)))
                            .collect::<Result<Vec<_>, _>>()
                    });
                timing.retrieve_ms = elapsed_ms(started);
                match fetched {
                    Ok(results) => {
                        let block = render_information_block(&results, config.passage_token_cap);
                        context.push(&block);
                        trajectory.info_blocks.push(block);
                    }
                    Err(e) => {
                        trajectory.failure = Some(EpisodeFailure::retriever(&e));
                        trajectory.turns.push(turn);
                        trajectory.turn_timings.push(record_timing(timing, config));
                        return trajectory;
                    }
                }
            }
            AgentAction::Answer { text } => {
                trajectory.final_answer = Some(text.clone());
                trajectory.turns.push(turn);
                trajectory.turn_timings.push(record_timing(timing, config));
                return trajectory;
            }
            AgentAction::Invalid { .. } => context.push(RETHINK_MESSAGE),
        }
        trajectory.turns.push(turn);
        trajectory.turn_timings.push(record_timing(timing, config));
        budget_used += 1;
    }

    trajectory.truncated = true;
    trajectory
}

fn record_timing(timing: TurnTiming, config: &RolloutConfig) -> TurnTiming {
    if config.record_timing {
        timing
    } else {
        TurnTiming::default()
    }
}

pub type PolicyFactory<'a> =
    dyn Fn(&QuestionRecord) -> Result<Box<dyn Policy>, PolicyError> + Sync + 'a;

/// Runs episodes with at most `parallelism` in flight. Output order
/// matches `records`; a failed episode occupies its own slot.
pub fn run_batch(
    records: &[QuestionRecord],
    policy_factory: &PolicyFactory<'_>,
    retriever: &dyn Retriever,
    config: &RolloutConfig,
    parallelism: usize,
) -> Vec<Trajectory> {
    ordered_fan_out(records, parallelism.max(1), |record| {
        match policy_factory(record) {
            Ok(mut policy) => run_episode(record, policy.as_mut(), retriever, config),
            Err(e) => {
                let mut t = Trajectory::empty(
                    &record.id,
                    build_prompt(&record.question).unwrap_or_default(),
                );
                t.failure = Some(EpisodeFailure::policy(&e));
                t
            }
        }
    })
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

pub fn write_traces(path: &Path, trajectories: &[Trajectory]) -> Result<(), TraceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        let line = serde_json::to_string(t).expect("trajectories always serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<Trajectory>, TraceError> {
    let file = std::fs::File::open(path)?;
    let mut trajectories = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| TraceError::SchemaViolation {
                line: i + 1,
                message: e.to_string(),
            })?;
        trajectories.push(t);
    }
    Ok(trajectories)
}
