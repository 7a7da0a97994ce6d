//! Verifiable rewards for a finished trajectory.
//!
//! The total is the plain sum of four parts: answer correctness (exact
//! match), a decomposition term that depends on whether the question is
//! parallelizable, a search-count term, and a format term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::QuestionRecord;
use crate::rollout::Trajectory;
use crate::tags::{validate_transcript, AgentAction};

/// Parallelizability of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionClass {
    /// Decomposable into independent sub-queries.
    #[serde(rename = "P")]
    Parallel,
    /// Answerable with one retrieval.
    #[serde(rename = "S")]
    SingleHop,
    /// Multi-hop where each search depends on the previous one.
    #[serde(rename = "O")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_d: f64,
    pub alpha: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_d: 0.15,
            alpha: 2.0,
            lambda_s: 0.35,
            lambda_f: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardConfigError {
    #[error("lambda_d must be a finite non-negative number, got {0}")]
    LambdaD(f64),
    #[error("alpha must be greater than 1, got {0}")]
    Alpha(f64),
    #[error("lambda_s must be in [0, 1], got {0}")]
    LambdaS(f64),
    #[error("lambda_f must be a finite positive number, got {0}")]
    LambdaF(f64),
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.lambda_d.is_finite() && self.lambda_d >= 0.0) {
            return Err(RewardConfigError::LambdaD(self.lambda_d));
        }
        if !(self.alpha.is_finite() && self.alpha > 1.0) {
            return Err(RewardConfigError::Alpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return Err(RewardConfigError::LambdaS(self.lambda_s));
        }
        if !(self.lambda_f.is_finite() && self.lambda_f > 0.0) {
            return Err(RewardConfigError::LambdaF(self.lambda_f));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_o: f64,
    pub r_d: f64,
    pub r_s: f64,
    pub r_f: f64,
    pub total: f64,
    pub d_flag: bool,
    pub search_count: usize,
    pub format_valid: bool,
}

/// SQuAD-style answer normalization: lowercase, strip ASCII punctuation,
/// drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 if the normalized prediction equals any normalized gold answer.
pub fn exact_match<S: AsRef<str>>(golds: &[S], pred: Option<&str>) -> u8 {
    let Some(pred) = pred else { return 0 };
    let pred = normalize_answer(pred);
    u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == pred))
}

/// Whether any search action issued two or more sub-queries.
pub fn decomposition_flag(trajectory: &Trajectory) -> bool {
    trajectory
        .turns
        .iter()
        .any(|t| matches!(&t.action, AgentAction::Search { subqueries } if subqueries.len() >= 2))
}

pub fn decomposition_reward(class: QuestionClass, d_flag: bool, cfg: &RewardConfig) -> f64 {
    match (class, d_flag) {
        (QuestionClass::Parallel, true) => cfg.alpha * cfg.lambda_d,
        (QuestionClass::Parallel, false) => 0.0,
        (_, false) => cfg.lambda_d,
        (_, true) => 0.0,
    }
}

pub fn search_count_reward(class: QuestionClass, search_count: usize, cfg: &RewardConfig) -> f64 {
    let distance = match class {
        QuestionClass::Parallel | QuestionClass::SingleHop => search_count.abs_diff(1),
        QuestionClass::Other => search_count.min(2).abs_diff(2),
    };
    0.0 - cfg.lambda_s * distance as f64
}

pub fn format_reward(em: u8, format_valid: bool, cfg: &RewardConfig) -> f64 {
    match (em, format_valid) {
        (1, false) => -cfg.lambda_f,
        (0, true) => cfg.lambda_f,
        _ => 0.0,
    }
}

/// Composes all four reward parts for one trajectory.
pub fn total_reward(
    trajectory: &Trajectory,
    golds: &[String],
    class: QuestionClass,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let em = exact_match(golds, trajectory.final_answer.as_deref());
    let d_flag = decomposition_flag(trajectory);
    let search_count = trajectory.search_action_count();
    let format_valid = validate_transcript(trajectory).valid;

    let r_o = f64::from(em);
    let r_d = decomposition_reward(class, d_flag, cfg);
    let r_s = search_count_reward(class, search_count, cfg);
    let r_f = format_reward(em, format_valid, cfg);
    RewardBreakdown {
        r_o,
        r_d,
        r_s,
        r_f,
        total: r_o + r_d + r_s + r_f,
        d_flag,
        search_count,
        format_valid,
    }
}

/// [`total_reward`] using the record's gold answers and class.
///
/// Returns None for records without a class (excluded by the split rules).
pub fn score_record(
    trajectory: &Trajectory,
    record: &QuestionRecord,
    cfg: &RewardConfig,
) -> Option<RewardBreakdown> {
    let class = record.class?;
    Some(total_reward(trajectory, &record.golden_answers, class, cfg))
}
