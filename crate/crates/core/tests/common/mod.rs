#![allow(dead_code)]

use std::path::{Path, PathBuf};

use parsearch::cli::{write_scripts, ScriptLine};
use parsearch::datasets::{write_questions, QuestionRecord, Source};
use parsearch::policy::ScriptedPolicy;
use parsearch::retrieval::{Document, Index, LocalRetriever, RetrieverConfig};
use parsearch::rollout::{run_episode, RolloutConfig, Trajectory};

const PREFIXES: [&str; 9] = [
    "Ald", "Bren", "Cor", "Dun", "Eld", "Fal", "Gar", "Hal", "Ink",
];
const SUFFIXES: [&str; 5] = ["moor", "ford", "wick", "holm", "stead"];
pub const REGIONS: [&str; 5] = ["Vesland", "Ormia", "Kestrel", "Tarnvale", "Brightmarch"];

#[derive(Debug, Clone)]
pub struct Town {
    pub name: String,
    pub year: u32,
    pub region: &'static str,
}

/// 45 towns with distinct founding years.
pub fn towns() -> Vec<Town> {
    let mut out = Vec::new();
    for (i, p) in PREFIXES.iter().enumerate() {
        for (j, s) in SUFFIXES.iter().enumerate() {
            let k = i * SUFFIXES.len() + j;
            out.push(Town {
                name: format!("{p}{s}"),
                year: 1200 + ((k * 37) % 600) as u32,
                region: REGIONS[k % REGIONS.len()],
            });
        }
    }
    out
}

/// The town serving as each region's capital.
pub fn capital(region_idx: usize) -> Town {
    towns()[region_idx * 7].clone()
}

/// 45 town documents plus 5 region documents.
pub fn world_corpus() -> Vec<Document> {
    let mut docs: Vec<Document> = towns()
        .into_iter()
        .enumerate()
        .map(|(i, t)| Document {
            id: format!("town-{i:02}"),
            title: t.name.clone(),
            text: format!(
                "{} is a town in the province of {}. {} was founded in {}.",
                t.name, t.region, t.name, t.year
            ),
        })
        .collect();
    for (r, region) in REGIONS.iter().enumerate() {
        docs.push(Document {
            id: format!("region-{r}"),
            title: region.to_string(),
            text: format!(
                "{region} is a province. The capital of {region} is {}.",
                capital(r).name
            ),
        });
    }
    docs
}

pub fn think(t: &str) -> String {
    format!("<think>{t}</think>")
}

pub fn search(t: &str, q: &str) -> String {
    format!("{}<search>{q}</search>", think(t))
}

pub fn answer(t: &str, a: &str) -> String {
    format!("{}<answer>{a}</answer>", think(t))
}

/// A question, its gold record, and the generations the scripted policy
/// replays for it.
pub struct Scripted {
    pub record: QuestionRecord,
    pub turns: Vec<String>,
}

/// 20 questions: comparisons (P), bridge and compositional (O), single-hop
/// (S), with a mix of correct, wrong, badly formatted and truncated runs.
pub fn world_questions() -> Vec<Scripted> {
    let towns = towns();
    let mut out = Vec::new();

    for i in 0..8 {
        let a = &towns[i * 2];
        let b = &towns[i * 2 + 17];
        let older = if a.year < b.year { a } else { b };
        let record = QuestionRecord::new(
            format!("cmp-{i:02}"),
            format!("Which town was founded earlier, {} or {}?", a.name, b.name),
            vec![older.name.clone()],
            if i % 2 == 0 {
                Source::HotpotQa
            } else {
                Source::TwoWiki
            },
            Some("comparison".into()),
        );
        let reply = match i {
            6 => "Nowhere".to_string(),
            _ => older.name.clone(),
        };
        let turns = if i == 5 {
            vec![
                search("First town.", &format!("{} founded", a.name)),
                search("Second town.", &format!("{} founded", b.name)),
                answer("Compare the years.", &reply),
            ]
        } else {
            vec![
                search(
                    "Look up both towns at once.",
                    &format!("{} founded ## {} founded", a.name, b.name),
                ),
                answer("Compare the years.", &reply),
            ]
        };
        out.push(Scripted { record, turns });
    }

    for (r, region) in REGIONS.iter().enumerate() {
        let cap = capital(r);
        let (source, category) = if r % 2 == 0 {
            (Source::HotpotQa, "bridge")
        } else {
            (Source::TwoWiki, "compositional")
        };
        let record = QuestionRecord::new(
            format!("bridge-{r:02}"),
            format!("When was the capital of {region} founded?"),
            vec![cap.year.to_string()],
            source,
            Some(category.into()),
        );
        let turns = match r {
            3 => vec![format!("<answer>{}</answer>", cap.year)],
            _ => vec![
                search("Find the capital.", &format!("capital of {region}")),
                search("Find its founding year.", &format!("{} founded", cap.name)),
                answer("Done.", &cap.year.to_string()),
            ],
        };
        out.push(Scripted { record, turns });
    }

    for i in 0..5 {
        let t = &towns[30 + i];
        let source = [Source::Nq, Source::TriviaQa, Source::PopQa][i % 3];
        let record = QuestionRecord::new(
            format!("single-{i:02}"),
            format!("In what year was {} founded?", t.name),
            vec![t.year.to_string()],
            source,
            None,
        );
        let turns = match i {
            1 => vec![
                format!("I believe it was {}.", t.year),
                search("Check it.", &format!("{} founded", t.name)),
                answer("Found it.", &t.year.to_string()),
            ],
            // Searches until the budget runs out.
            4 => (0..6)
                .map(|k| search("Keep looking.", &format!("{} history {k}", t.name)))
                .collect(),
            _ => vec![
                search("Look it up.", &format!("{} founded", t.name)),
                answer("Found it.", &t.year.to_string()),
            ],
        };
        out.push(Scripted { record, turns });
    }

    let t = &towns[40];
    out.push(Scripted {
        record: QuestionRecord::new(
            "mhr-00",
            format!("Was {} founded before {}?", t.name, towns[41].name),
            vec![if t.year < towns[41].year { "yes" } else { "no" }.into()],
            Source::MultiHopRag,
            Some("comparison_query".into()),
        ),
        turns: vec![
            search(
                "Both towns.",
                &format!("{} founded ## {} founded", t.name, towns[41].name),
            ),
            answer(
                "Compare.",
                if t.year < towns[41].year { "yes" } else { "no" },
            ),
        ],
    });
    out.push(Scripted {
        record: QuestionRecord::new(
            "mhr-01",
            format!("Which province is {} in?", towns[42].name),
            vec![towns[42].region.to_string()],
            Source::MultiHopRag,
            Some("inference_query".into()),
        ),
        turns: vec![
            search("Look it up.", &format!("{} province", towns[42].name)),
            answer("", towns[42].region),
        ],
    });
    out
}

pub struct FixturePaths {
    pub dataset: PathBuf,
    pub corpus: PathBuf,
    pub scripts: PathBuf,
}

pub fn write_corpus(path: &Path, docs: &[Document]) {
    let body: String = docs
        .iter()
        .map(|d| serde_json::to_string(d).unwrap() + "\n")
        .collect();
    std::fs::write(path, body).unwrap();
}

/// Writes the question, corpus and script files into `dir`.
pub fn write_world(dir: &Path) -> FixturePaths {
    let scripted = world_questions();
    let paths = FixturePaths {
        dataset: dir.join("questions.jsonl"),
        corpus: dir.join("corpus.jsonl"),
        scripts: dir.join("scripts.jsonl"),
    };
    let records: Vec<QuestionRecord> = scripted.iter().map(|s| s.record.clone()).collect();
    write_questions(&paths.dataset, &records).unwrap();
    write_corpus(&paths.corpus, &world_corpus());
    let scripts: Vec<ScriptLine> = scripted
        .iter()
        .map(|s| ScriptLine {
            question_id: s.record.id.clone(),
            turns: s.turns.clone(),
        })
        .collect();
    write_scripts(&paths.scripts, &scripts).unwrap();
    paths
}

pub fn world_retriever() -> LocalRetriever {
    LocalRetriever::new(
        Index::build(world_corpus()).unwrap(),
        RetrieverConfig::default(),
    )
}

/// Runs one scripted episode against the world corpus.
pub fn episode(record: &QuestionRecord, turns: &[String], config: &RolloutConfig) -> Trajectory {
    let mut policy = ScriptedPolicy::new(turns.to_vec());
    run_episode(record, &mut policy, &world_retriever(), config)
}

pub fn record(id: &str, source: Source, category: Option<&str>, gold: &str) -> QuestionRecord {
    QuestionRecord::new(
        id,
        format!("Question {id}?"),
        vec![gold.to_string()],
        source,
        category.map(str::to_string),
    )
}
