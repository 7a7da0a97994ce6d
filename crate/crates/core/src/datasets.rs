//! Benchmark question files and the parallel / sequential subset rules.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::QuestionClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "nq")]
    Nq,
    #[serde(rename = "triviaqa")]
    TriviaQa,
    #[serde(rename = "popqa")]
    PopQa,
    #[serde(rename = "hotpotqa")]
    HotpotQa,
    #[serde(rename = "2wiki")]
    TwoWiki,
    #[serde(rename = "musique")]
    Musique,
    #[serde(rename = "bamboogle")]
    Bamboogle,
    #[serde(rename = "multihoprag")]
    MultiHopRag,
    #[serde(rename = "custom")]
    Custom,
}

impl Source {
    pub const ALL: [Source; 9] = [
        Source::Nq,
        Source::TriviaQa,
        Source::PopQa,
        Source::HotpotQa,
        Source::TwoWiki,
        Source::Musique,
        Source::Bamboogle,
        Source::MultiHopRag,
        Source::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Nq => "nq",
            Source::TriviaQa => "triviaqa",
            Source::PopQa => "popqa",
            Source::HotpotQa => "hotpotqa",
            Source::TwoWiki => "2wiki",
            Source::Musique => "musique",
            Source::Bamboogle => "bamboogle",
            Source::MultiHopRag => "multihoprag",
            Source::Custom => "custom",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| format!("unknown source {s:?}"))
    }
}

/// Where a (source, category) pair lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitLabel {
    Par,
    Seq,
    SingleHop,
    Exclude,
}

impl SplitLabel {
    pub fn class(self) -> Option<QuestionClass> {
        match self {
            SplitLabel::Par => Some(QuestionClass::Parallel),
            SplitLabel::Seq => Some(QuestionClass::Other),
            SplitLabel::SingleHop => Some(QuestionClass::SingleHop),
            SplitLabel::Exclude => None,
        }
    }
}

/// Rule table from (source, category) to a split label. Pairs not in the
/// table are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRules {
    name: String,
    categorized: BTreeMap<(Source, String), SplitLabel>,
    /// Sources whose every question gets one label regardless of category.
    whole_source: BTreeMap<Source, SplitLabel>,
}

impl SplitRules {
    pub const NAMES: [&'static str; 4] = ["default", "hotpotqa", "2wiki", "multihoprag"];

    /// The full rule table over every supported benchmark.
    pub fn standard() -> Self {
        let categorized = [
            (Source::HotpotQa, "comparison", SplitLabel::Par),
            (Source::HotpotQa, "bridge", SplitLabel::Seq),
            (Source::TwoWiki, "comparison", SplitLabel::Par),
            (Source::TwoWiki, "inference", SplitLabel::Seq),
            (Source::TwoWiki, "compositional", SplitLabel::Seq),
            (Source::MultiHopRag, "comparison_query", SplitLabel::Par),
            (Source::MultiHopRag, "inference_query", SplitLabel::Seq),
        ]
        .into_iter()
        .map(|(src, cat, label)| ((src, cat.to_string()), label))
        .collect();
        let whole_source = [Source::Nq, Source::TriviaQa, Source::PopQa]
            .into_iter()
            .map(|src| (src, SplitLabel::SingleHop))
            .collect();
        Self {
            name: "default".into(),
            categorized,
            whole_source,
        }
    }

    /// Looks up a rule set by name: `default`, or one benchmark's rows only.
    pub fn named(name: &str) -> Option<Self> {
        let standard = Self::standard();
        if name == "default" {
            return Some(standard);
        }
        let source: Source = name.parse().ok()?;
        if !matches!(
            source,
            Source::HotpotQa | Source::TwoWiki | Source::MultiHopRag
        ) {
            return None;
        }
        Some(Self {
            name: name.to_string(),
            categorized: standard
                .categorized
                .into_iter()
                .filter(|((src, _), _)| *src == source)
                .collect(),
            whole_source: BTreeMap::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label(&self, source: Source, category: Option<&str>) -> SplitLabel {
        if let Some(label) = self.whole_source.get(&source) {
            return *label;
        }
        category
            .and_then(|c| self.categorized.get(&(source, c.to_string())))
            .copied()
            .unwrap_or(SplitLabel::Exclude)
    }
}

/// Class of a question under the standard rules, or None when excluded.
pub fn classify(source: Source, category: Option<&str>) -> Option<QuestionClass> {
    SplitRules::standard().label(source, category).class()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub source: Source,
    pub raw_category: Option<String>,
    /// None when the record is excluded by the rule table.
    pub class: Option<QuestionClass>,
}

impl QuestionRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        golden_answers: Vec<String>,
        source: Source,
        raw_category: Option<String>,
    ) -> Self {
        let class = classify(source, raw_category.as_deref());
        Self {
            id: id.into(),
            question: question.into(),
            golden_answers,
            source,
            raw_category,
            class,
        }
    }
}

/// On-disk line of a question file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionLine {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub source: String,
    #[serde(default)]
    pub category: Option<String>,
}

impl From<&QuestionRecord> for QuestionLine {
    fn from(r: &QuestionRecord) -> Self {
        Self {
            id: r.id.clone(),
            question: r.question.clone(),
            golden_answers: r.golden_answers.clone(),
            source: r.source.to_string(),
            category: r.raw_category.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema violation at line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

/// Records that loaded plus the lines that did not.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<QuestionRecord>,
    pub errors: Vec<LineError>,
}

impl LoadReport {
    /// The records, or the first bad line as an error.
    pub fn into_strict(self) -> Result<Vec<QuestionRecord>, DatasetError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(DatasetError::SchemaViolation {
                line: e.line,
                message: e.message,
            }),
            None => Ok(self.records),
        }
    }
}

fn parse_line(line: &str) -> Result<QuestionRecord, String> {
    let raw: QuestionLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if raw.question.trim().is_empty() {
        return Err("empty question".into());
    }
    if raw.golden_answers.is_empty() {
        return Err("golden_answers is empty".into());
    }
    let source: Source = raw.source.parse()?;
    Ok(QuestionRecord::new(
        raw.id,
        raw.question,
        raw.golden_answers,
        source,
        raw.category,
    ))
}

pub fn parse_questions(reader: impl BufRead) -> Result<LoadReport, DatasetError> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(record) => report.records.push(record),
            Err(message) => report.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    Ok(report)
}

/// Loads a JSONL question file. Bad lines are collected, not fatal.
pub fn load_questions(path: &Path) -> Result<LoadReport, DatasetError> {
    let file = std::fs::File::open(path)?;
    parse_questions(std::io::BufReader::new(file))
}

pub fn write_questions(path: &Path, records: &[QuestionRecord]) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        let line = serde_json::to_string(&QuestionLine::from(record))
            .expect("question lines always serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Gives every excluded record class O. For metrics-only runs over
/// benchmarks without split rules.
pub fn assign_excluded_as_other(records: &mut [QuestionRecord]) {
    for r in records.iter_mut().filter(|r| r.class.is_none()) {
        r.class = Some(QuestionClass::Other);
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Split {
    pub par: Vec<QuestionRecord>,
    pub seq: Vec<QuestionRecord>,
    pub excluded: usize,
}

/// Partitions records into the parallel and sequential subsets under
/// `rules`. Single-hop and excluded records are counted, not kept.
pub fn split_par_seq(records: &[QuestionRecord], rules: &SplitRules) -> Split {
    let mut split = Split::default();
    for record in records {
        match rules.label(record.source, record.raw_category.as_deref()) {
            SplitLabel::Par => split.par.push(record.clone()),
            SplitLabel::Seq => split.seq.push(record.clone()),
            SplitLabel::SingleHop | SplitLabel::Exclude => split.excluded += 1,
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use QuestionClass::*;

    #[test]
    fn classification_table() {
        assert_eq!(
            classify(Source::HotpotQa, Some("comparison")),
            Some(Parallel)
        );
        assert_eq!(classify(Source::HotpotQa, Some("bridge")), Some(Other));
        assert_eq!(
            classify(Source::TwoWiki, Some("comparison")),
            Some(Parallel)
        );
        assert_eq!(classify(Source::TwoWiki, Some("inference")), Some(Other));
        assert_eq!(
            classify(Source::TwoWiki, Some("compositional")),
            Some(Other)
        );
        assert_eq!(classify(Source::TwoWiki, Some("bridge_comparison")), None);
        assert_eq!(
            classify(Source::MultiHopRag, Some("comparison_query")),
            Some(Parallel)
        );
        assert_eq!(
            classify(Source::MultiHopRag, Some("inference_query")),
            Some(Other)
        );
        assert_eq!(classify(Source::MultiHopRag, Some("temporal_query")), None);
        assert_eq!(classify(Source::MultiHopRag, Some("null_query")), None);
        assert_eq!(classify(Source::Nq, None), Some(SingleHop));
        assert_eq!(
            classify(Source::TriviaQa, Some("anything")),
            Some(SingleHop)
        );
        assert_eq!(classify(Source::PopQa, None), Some(SingleHop));
        assert_eq!(classify(Source::Musique, None), None);
        assert_eq!(classify(Source::Bamboogle, None), None);
        assert_eq!(classify(Source::Custom, Some("comparison")), None);
        assert_eq!(classify(Source::HotpotQa, None), None);
    }

    fn rec(id: &str, source: Source, cat: Option<&str>) -> QuestionRecord {
        QuestionRecord::new(id, "q?", vec!["a".into()], source, cat.map(String::from))
    }

    #[test]
    fn split_filters_in_order() {
        let records = vec![
            rec("1", Source::HotpotQa, Some("comparison")),
            rec("2", Source::HotpotQa, Some("bridge")),
            rec("3", Source::Nq, None),
            rec("4", Source::TwoWiki, Some("comparison")),
        ];
        let split = split_par_seq(&records, &SplitRules::standard());
        let ids = |v: &[QuestionRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&split.par), vec!["1", "4"]);
        assert_eq!(ids(&split.seq), vec!["2"]);
        assert_eq!(split.excluded, 1);
    }

    #[test]
    fn all_single_hop_split_is_empty() {
        let records = vec![rec("1", Source::Nq, None), rec("2", Source::PopQa, None)];
        let split = split_par_seq(&records, &SplitRules::standard());
        assert!(split.par.is_empty() && split.seq.is_empty());
        assert_eq!(split.excluded, 2);
    }

    #[test]
    fn named_rules() {
        assert!(SplitRules::named("default").is_some());
        assert!(SplitRules::named("nope").is_none());
        assert!(SplitRules::named("nq").is_none());
        let hotpot = SplitRules::named("hotpotqa").unwrap();
        assert_eq!(
            hotpot.label(Source::HotpotQa, Some("bridge")),
            SplitLabel::Seq
        );
        assert_eq!(
            hotpot.label(Source::TwoWiki, Some("comparison")),
            SplitLabel::Exclude
        );
        assert_eq!(hotpot.label(Source::Nq, None), SplitLabel::Exclude);
    }

    #[test]
    fn loads_with_line_errors() {
        let text = r#"{"id":"a","question":"q1","golden_answers":["x"],"source":"hotpotqa","category":"comparison"}
{"id":"b","question":"q2","source":"nq","category":null}

{"id":"c","question":"q3","golden_answers":["y","z"],"source":"nq"}
{"id":"d","question":"q4","golden_answers":["y"],"source":"wikipedia"}
"#;
        let report = parse_questions(text.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[0].class, Some(Parallel));
        assert_eq!(report.records[1].class, Some(SingleHop));
        let lines: Vec<usize> = report.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 5]);
        assert!(report.errors[0].message.contains("golden_answers"));
        assert!(matches!(
            report.into_strict(),
            Err(DatasetError::SchemaViolation { line: 2, .. })
        ));
    }

    #[test]
    fn empty_file_is_valid() {
        let report = parse_questions("".as_bytes()).unwrap();
        assert!(report.records.is_empty() && report.errors.is_empty());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let records = vec![
            rec("1", Source::HotpotQa, Some("comparison")),
            rec("2", Source::Musique, None),
        ];
        write_questions(&path, &records).unwrap();
        let back = load_questions(&path).unwrap().into_strict().unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn excluded_as_other() {
        let mut records = vec![rec("1", Source::Musique, None), rec("2", Source::Nq, None)];
        assign_excluded_as_other(&mut records);
        assert_eq!(records[0].class, Some(Other));
        assert_eq!(records[1].class, Some(SingleHop));
    }
}
