//! Text-generation policies.
//!
//! Every policy honors the same contract: generation stops at the earliest
//! stop sequence (which is kept in the returned text) or at
//! `max_new_tokens` whitespace tokens.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STOP_SEARCH: &str = "</search>";
pub const STOP_ANSWER: &str = "</answer>";
pub const DEFAULT_MAX_NEW_TOKENS: usize = 500;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub stop_sequences: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl GenerationRequest {
    /// A request with the rollout stop sequences.
    pub fn rollout(prompt: impl Into<String>, max_new_tokens: usize, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            stop_sequences: vec![STOP_SEARCH.to_string(), STOP_ANSWER.to_string()],
            max_new_tokens,
            temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    StopSequence,
    Length,
    EndOfSequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("scripted policy exhausted after {0} turns")]
    Exhausted(usize),
    #[error("no script for question {0:?}")]
    MissingScript(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("remote policy returned status {status}")]
    RemoteError { status: u16 },
}

impl PolicyError {
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            PolicyError::Transport(_)
                | PolicyError::MalformedResponse(_)
                | PolicyError::RemoteError { .. }
        )
    }
}

pub trait Policy: Send {
    fn generate(&mut self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn generate(&mut self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError> {
        (**self).generate(request)
    }
}

/// Byte offset just past the `n`-th whitespace token, or None when `text`
/// has at most `n` tokens.
fn token_cap_offset(text: &str, n: usize) -> Option<usize> {
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            count += 1;
            if count > n {
                // Token n + 1 starts here; cut before its preceding space.
                return Some(text[..i].trim_end().len());
            }
        }
    }
    None
}

/// Applies the stop-sequence and length rules to a raw continuation.
///
/// The earliest stop match wins and is kept. If that match would lie past
/// the token cap, or no stop matches and the text is too long, the text is
/// cut at the cap instead.
pub fn apply_stop_rules(text: &str, stops: &[String], max_new_tokens: usize) -> GenerationResult {
    let earliest = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|at| (at, at + s.len())))
        .min();
    let cap = token_cap_offset(text, max_new_tokens);
    match (earliest, cap) {
        (Some((_, end)), Some(cap_at)) if end > cap_at => GenerationResult {
            text: text[..cap_at].to_string(),
            finish_reason: FinishReason::Length,
        },
        (Some((_, end)), _) => GenerationResult {
            text: text[..end].to_string(),
            finish_reason: FinishReason::StopSequence,
        },
        (None, Some(cap_at)) => GenerationResult {
            text: text[..cap_at].to_string(),
            finish_reason: FinishReason::Length,
        },
        (None, None) => GenerationResult {
            text: text.to_string(),
            finish_reason: FinishReason::EndOfSequence,
        },
    }
}

/// Replays a fixed list of generations, one per call.
///
/// The prompt and temperature are ignored; the stop and length rules still
/// apply so scripted output obeys the same contract as a model.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    turns: VecDeque<String>,
    served: usize,
}

impl ScriptedPolicy {
    pub fn new<I, S>(turns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            turns: turns.into_iter().map(Into::into).collect(),
            served: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.turns.len()
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&mut self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError> {
        if request.prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        let next = self
            .turns
            .pop_front()
            .ok_or(PolicyError::Exhausted(self.served))?;
        self.served += 1;
        Ok(apply_stop_rules(
            &next,
            &request.stop_sequences,
            request.max_new_tokens,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteGenerateRequest {
    pub prompt: String,
    pub stop: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteGenerateResponse {
    pub text: String,
    pub finish_reason: String,
}

/// Client for a remote generation server (`POST {endpoint}/generate`).
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn remote_generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResult, PolicyError> {
        if request.prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        let body = RemoteGenerateRequest {
            prompt: request.prompt.clone(),
            stop: request.stop_sequences.clone(),
            max_new_tokens: request.max_new_tokens,
            temperature: request.temperature,
        };
        let url = format!("{}/generate", self.endpoint);
        let mut response = match self.agent.post(&url).send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(status)) => {
                return Err(PolicyError::RemoteError { status })
            }
            Err(e) => return Err(PolicyError::Transport(e.to_string())),
        };
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::MalformedResponse(e.to_string()))?;
        let parsed: RemoteGenerateResponse = serde_json::from_value(value)
            .map_err(|e| PolicyError::MalformedResponse(e.to_string()))?;
        normalize_remote(parsed, request)
    }
}

/// The stop sequence whose opening tag is left unclosed at the end of
/// `text`, if any. `</x>` is paired with `<x>`.
fn dangling_stop<'a>(text: &str, stops: &'a [String]) -> Option<&'a str> {
    stops
        .iter()
        .filter_map(|stop| {
            let open = stop.strip_prefix("</").map(|rest| format!("<{rest}"))?;
            let at = text.rfind(&open)?;
            (!text[at..].contains(stop.as_str())).then_some((at, stop.as_str()))
        })
        .max_by_key(|(at, _)| *at)
        .map(|(_, stop)| stop)
}

fn normalize_remote(
    response: RemoteGenerateResponse,
    request: &GenerationRequest,
) -> Result<GenerationResult, PolicyError> {
    let mut text = response.text;
    match response.finish_reason.as_str() {
        "stop" => {
            let ends_with_stop = request
                .stop_sequences
                .iter()
                .any(|s| !s.is_empty() && text.ends_with(s.as_str()));
            if !ends_with_stop
                && !request
                    .stop_sequences
                    .iter()
                    .any(|s| text.contains(s.as_str()))
            {
                // Server stripped the matched stop sequence.
                match dangling_stop(&text, &request.stop_sequences) {
                    Some(stop) => text.push_str(stop),
                    None => {
                        return Ok(GenerationResult {
                            text,
                            finish_reason: FinishReason::EndOfSequence,
                        })
                    }
                }
            }
        }
        "length" | "eos" => {}
        other => {
            return Err(PolicyError::MalformedResponse(format!(
                "unknown finish_reason {other:?}"
            )))
        }
    }
    let mut result = apply_stop_rules(&text, &request.stop_sequences, request.max_new_tokens);
    if result.finish_reason == FinishReason::EndOfSequence && response.finish_reason == "length" {
        result.finish_reason = FinishReason::Length;
    }
    Ok(result)
}

impl Policy for RemotePolicy {
    fn generate(&mut self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError> {
        self.remote_generate(request)
    }
}
