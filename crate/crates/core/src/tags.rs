//! The agent transcript grammar.
//!
//! A policy generation is a sequence of `<think>`, `<search>`, `<answer>` and
//! `<information>` elements. Tags are exact, lowercase and carry no
//! attributes. Sub-queries inside one search element are separated by `##`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievalResult;
use crate::rollout::Trajectory;

/// Delimiter between sub-queries inside a single search element.
pub const SUBQUERY_DELIMITER: &str = "##";

/// Default upper bound on the number of sub-queries kept from one search.
pub const DEFAULT_MAX_SUBQUERIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    Think,
    Search,
    Information,
    Answer,
}

impl TagKind {
    pub const ALL: [TagKind; 4] = [
        TagKind::Think,
        TagKind::Search,
        TagKind::Information,
        TagKind::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TagKind::Think => "think",
            TagKind::Search => "search",
            TagKind::Information => "information",
            TagKind::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            TagKind::Think => "<think>",
            TagKind::Search => "<search>",
            TagKind::Information => "<information>",
            TagKind::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            TagKind::Think => "</think>",
            TagKind::Search => "</search>",
            TagKind::Information => "</information>",
            TagKind::Answer => "</answer>",
        }
    }

    /// Wraps `content` in this kind's tag pair.
    pub fn wrap(self, content: &str) -> String {
        format!("{}{}{}", self.open(), content, self.close())
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One closed tag pair found in a source string.
///
/// `span` covers the whole element including both tags; `content` is the
/// text strictly between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSegment {
    pub kind: TagKind,
    pub content: String,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("unclosed <{kind}> at byte {at}")]
    UnclosedTag { kind: TagKind, at: usize },
    #[error("<{inner}> at byte {at} opens inside <{outer}>")]
    NestedTag {
        outer: TagKind,
        inner: TagKind,
        at: usize,
    },
}

impl TagError {
    pub fn position(&self) -> usize {
        match self {
            TagError::UnclosedTag { at, .. } | TagError::NestedTag { at, .. } => *at,
        }
    }
}

/// Finds the earliest opening tag of any kind at or after `from`.
fn next_open(source: &str, from: usize) -> Option<(usize, TagKind)> {
    TagKind::ALL
        .iter()
        .filter_map(|&kind| source[from..].find(kind.open()).map(|i| (from + i, kind)))
        .min_by_key(|&(pos, _)| pos)
}

/// Scans `source` for closed, non-nested tag pairs in source order.
///
/// Any opening tag that appears inside another element's content is a
/// nesting error, whatever its kind.
pub fn tokenize_tags(source: &str) -> Result<Vec<TaggedSegment>, TagError> {
    let mut segments = Vec::new();
    let mut cursor = 0;
    while let Some((start, kind)) = next_open(source, cursor) {
        let content_start = start + kind.open().len();
        let Some(rel_close) = source[content_start..].find(kind.close()) else {
            return Err(TagError::UnclosedTag { kind, at: start });
        };
        let content_end = content_start + rel_close;
        if let Some((inner_at, inner)) = next_open(source, content_start) {
            if inner_at < content_end {
                return Err(TagError::NestedTag {
                    outer: kind,
                    inner,
                    at: inner_at,
                });
            }
        }
        let end = content_end + kind.close().len();
        segments.push(TaggedSegment {
            kind,
            content: source[content_start..content_end].to_string(),
            span: start..end,
        });
        cursor = end;
    }
    Ok(segments)
}

/// Byte ranges of `source` not covered by any segment.
pub fn untagged_spans(source: &str, segments: &[TaggedSegment]) -> Vec<Range<usize>> {
    let mut gaps = Vec::new();
    let mut cursor = 0;
    for seg in segments {
        if seg.span.start > cursor {
            gaps.push(cursor..seg.span.start);
        }
        cursor = seg.span.end;
    }
    if cursor < source.len() {
        gaps.push(cursor..source.len());
    }
    gaps
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("every sub-query is empty")]
    AllEmpty,
}

/// Splits the content of a search element into trimmed, non-empty
/// sub-queries, keeping at most `max_subqueries` of them.
pub fn split_subqueries(query: &str, max_subqueries: usize) -> Result<Vec<String>, SplitError> {
    let mut pieces: Vec<String> = query
        .split(SUBQUERY_DELIMITER)
        .map(str::trim)
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect();
    if pieces.is_empty() {
        return Err(SplitError::AllEmpty);
    }
    if pieces.len() > max_subqueries {
        tracing::warn!(
            kept = max_subqueries,
            dropped = pieces.len() - max_subqueries,
            "search action exceeds the sub-query cap"
        );
        pieces.truncate(max_subqueries);
    }
    Ok(pieces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    /// No closed search or answer element in the generation.
    NoAction,
    /// A search element whose sub-queries are all empty.
    EmptySearch,
}

impl InvalidReason {
    pub fn code(self) -> &'static str {
        match self {
            InvalidReason::NoAction => "no_action",
            InvalidReason::EmptySearch => "empty_search",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AgentAction {
    Search { subqueries: Vec<String> },
    Answer { text: String },
    Invalid { reason: InvalidReason },
}

impl AgentAction {
    pub fn is_search(&self) -> bool {
        matches!(self, AgentAction::Search { .. })
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, AgentAction::Invalid { .. })
    }
}

/// One policy generation and what it asked the environment to do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub raw: String,
    pub think: Option<String>,
    pub action: AgentAction,
}

/// First closed `kind` element starting at or after `from`, ignoring
/// nesting. Returns (element span, content range).
fn find_pair(source: &str, kind: TagKind, from: usize) -> Option<(Range<usize>, Range<usize>)> {
    let start = from + source[from..].find(kind.open())?;
    let content_start = start + kind.open().len();
    let content_end = content_start + source[content_start..].find(kind.close())?;
    Some((
        start..content_end + kind.close().len(),
        content_start..content_end,
    ))
}

/// Interprets one generation as a turn.
///
/// The action is the earliest closed search or answer element; anything
/// after it is ignored here (the format validator reports it). The think is
/// the first closed think element that starts before the action. Never fails:
/// malformed generations become `Invalid` actions.
pub fn parse_turn(generation: &str, max_subqueries: usize) -> AgentTurn {
    let search = find_pair(generation, TagKind::Search, 0);
    let answer = find_pair(generation, TagKind::Answer, 0);
    let first = match (search, answer) {
        (Some(s), Some(a)) => Some(if s.0.start < a.0.start {
            (TagKind::Search, s)
        } else {
            (TagKind::Answer, a)
        }),
        (Some(s), None) => Some((TagKind::Search, s)),
        (None, Some(a)) => Some((TagKind::Answer, a)),
        (None, None) => None,
    };

    let action_start = first
        .as_ref()
        .map_or(generation.len(), |(_, (span, _))| span.start);
    let think = find_pair(generation, TagKind::Think, 0)
        .filter(|(span, _)| span.start < action_start)
        .map(|(_, content)| generation[content].to_string());

    let action = match first {
        None => AgentAction::Invalid {
            reason: InvalidReason::NoAction,
        },
        Some((TagKind::Search, (_, content))) => {
            match split_subqueries(&generation[content], max_subqueries) {
                Ok(subqueries) => AgentAction::Search { subqueries },
                Err(SplitError::AllEmpty) => AgentAction::Invalid {
                    reason: InvalidReason::EmptySearch,
                },
            }
        }
        Some((_, (_, content))) => AgentAction::Answer {
            text: generation[content].trim().to_string(),
        },
    };

    AgentTurn {
        raw: generation.to_string(),
        think,
        action,
    }
}

/// Cuts `text` down to its first `cap` whitespace-delimited tokens.
/// Text within the cap is returned unchanged.
pub fn truncate_tokens(text: &str, cap: usize) -> String {
    let mut tokens = text.split_whitespace();
    let kept: Vec<&str> = tokens.by_ref().take(cap).collect();
    if tokens.next().is_none() {
        text.to_string()
    } else {
        kept.join(" ")
    }
}

/// Renders retrieval results as the information element inserted after a
/// search action. Output depends only on the input.
pub fn render_information_block(
    results: &[(String, Vec<RetrievalResult>)],
    passage_token_cap: usize,
) -> String {
    let mut body = Vec::new();
    for (i, (subquery, docs)) in results.iter().enumerate() {
        let mut entry = format!("Sub-query {}: {}", i + 1, subquery);
        if docs.is_empty() {
            entry.push_str("\nNo results found.");
        }
        for (rank, doc) in docs.iter().enumerate() {
            entry.push_str(&format!(
                "\n({}) [{}] {}",
                rank + 1,
                doc.title,
                truncate_tokens(&doc.passage, passage_token_cap)
            ));
        }
        body.push(entry);
    }
    TagKind::Information.wrap(&body.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    MissingThink,
    EmptyThink,
    MultipleThink,
    ThinkAfterAction,
    ExtraSegment,
    StrayText,
    InvalidAction,
    InformationInGeneration,
    NestedTag,
    UnclosedTag,
    InfoBlockMismatch,
    MissingAnswer,
    EmptyAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
    /// Turn index the violation belongs to, if any.
    pub turn: Option<usize>,
    /// Byte range within that turn's raw generation.
    pub span: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl FormatReport {
    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(
        &mut self,
        code: ViolationCode,
        turn: Option<usize>,
        span: Option<Range<usize>>,
        message: impl Into<String>,
    ) {
        self.0.push(Violation {
            code,
            message: message.into(),
            turn,
            span,
        });
    }
}

fn validate_turn(index: usize, turn: &AgentTurn, out: &mut Collector) {
    let t = Some(index);
    if let AgentAction::Invalid { reason } = turn.action {
        out.push(
            ViolationCode::InvalidAction,
            t,
            None,
            format!("invalid action: {}", reason.code()),
        );
    }

    let segments = match tokenize_tags(&turn.raw) {
        Ok(segments) => segments,
        Err(err) => {
            let code = match err {
                TagError::UnclosedTag { .. } => ViolationCode::UnclosedTag,
                TagError::NestedTag { .. } => ViolationCode::NestedTag,
            };
            let at = err.position();
            out.push(code, t, Some(at..at), err.to_string());
            return;
        }
    };

    for seg in segments.iter().filter(|s| s.kind == TagKind::Information) {
        out.push(
            ViolationCode::InformationInGeneration,
            t,
            Some(seg.span.clone()),
            "policy generated an information element",
        );
    }

    let Some(action_idx) = segments
        .iter()
        .position(|s| matches!(s.kind, TagKind::Search | TagKind::Answer))
    else {
        return;
    };
    let before = &segments[..action_idx];
    let thinks: Vec<&TaggedSegment> = before.iter().filter(|s| s.kind == TagKind::Think).collect();
    match thinks.as_slice() {
        [] => out.push(
            ViolationCode::MissingThink,
            t,
            None,
            "no think element before the action",
        ),
        [only] => {
            if only.content.trim().is_empty() {
                out.push(
                    ViolationCode::EmptyThink,
                    t,
                    Some(only.span.clone()),
                    "think element is empty",
                );
            }
        }
        [_, second, ..] => out.push(
            ViolationCode::MultipleThink,
            t,
            Some(second.span.clone()),
            "more than one think element before the action",
        ),
    }

    for seg in &segments[action_idx + 1..] {
        let code = if seg.kind == TagKind::Think {
            ViolationCode::ThinkAfterAction
        } else {
            ViolationCode::ExtraSegment
        };
        out.push(
            code,
            t,
            Some(seg.span.clone()),
            format!("<{}> after the action", seg.kind),
        );
    }

    // Prose is tolerated except when it comes before the reasoning.
    let first_think = thinks
        .first()
        .map_or(segments[action_idx].span.start, |s| s.span.start);
    for gap in untagged_spans(&turn.raw, &segments) {
        if gap.start < first_think && !turn.raw[gap.clone()].trim().is_empty() {
            out.push(
                ViolationCode::StrayText,
                t,
                Some(gap),
                "text before the think element",
            );
        }
    }
}

/// Checks a finished trajectory against the think → action → observation
/// format. Every deviation found is reported; `valid` is true only when
/// there are none.
pub fn validate_transcript(trajectory: &Trajectory) -> FormatReport {
    let mut out = Collector(Vec::new());
    for (i, turn) in trajectory.turns.iter().enumerate() {
        validate_turn(i, turn, &mut out);
    }

    let searches = trajectory.search_action_count();
    if trajectory.info_blocks.len() != searches {
        out.push(
            ViolationCode::InfoBlockMismatch,
            None,
            None,
            format!(
                "{} information blocks for {} search actions",
                trajectory.info_blocks.len(),
                searches
            ),
        );
    }

    match trajectory.turns.last().map(|t| &t.action) {
        Some(AgentAction::Answer { text }) => {
            if text.trim().is_empty() {
                out.push(
                    ViolationCode::EmptyAnswer,
                    Some(trajectory.turns.len() - 1),
                    None,
                    "final answer is empty",
                );
            }
        }
        _ => out.push(
            ViolationCode::MissingAnswer,
            None,
            None,
            "trajectory does not end with an answer",
        ),
    }

    FormatReport {
        valid: out.0.is_empty(),
        violations: out.0,
    }
}
