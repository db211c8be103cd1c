//! Dialogue/query corpora in JSONL form, history concatenation and
//! multi-reference grouping.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token placed between turns of a concatenated history.
pub const SEPARATOR: &str = "<sep>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Bot => "bot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("dialogue turn text is empty".into());
        }
        if self.text.contains(SEPARATOR) {
            return Err(format!("dialogue turn contains reserved separator {SEPARATOR}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One (history, gold query) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub context_id: String,
    pub turns: Vec<DialogueTurn>,
    pub gold_query: String,
    pub id: Option<String>,
}

impl DialogueExample {
    /// Builds an example, validating turns and query and deriving the
    /// context id from the history.
    pub fn new(turns: Vec<DialogueTurn>, gold_query: impl Into<String>) -> Result<Self> {
        let gold_query = gold_query.into().trim().to_string();
        if turns.is_empty() {
            return Err(Error::Validation("dialogue has no turns".into()));
        }
        let turns: Vec<DialogueTurn> = turns
            .into_iter()
            .map(|t| DialogueTurn::new(t.speaker, t.text.trim()))
            .collect();
        for t in &turns {
            t.validate().map_err(Error::Validation)?;
        }
        if gold_query.is_empty() {
            return Err(Error::Validation("empty query".into()));
        }
        if gold_query.contains(SEPARATOR) {
            return Err(Error::Validation(format!("query contains {SEPARATOR}")));
        }
        let context_id = context_id(&concat_history(&turns));
        Ok(Self {
            context_id,
            turns,
            gold_query,
            id: None,
        })
    }

    pub fn history(&self) -> String {
        concat_history(&self.turns)
    }
}

/// Multi-reference evaluation unit: one dialogue context and every distinct
/// gold query annotated for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalGroup {
    pub context_id: String,
    pub turns: Vec<DialogueTurn>,
    pub references: Vec<String>,
}

impl EvalGroup {
    pub fn history(&self) -> String {
        concat_history(&self.turns)
    }
}

/// `speaker: text` per turn, joined by ` <sep> `.
pub fn concat_history(turns: &[DialogueTurn]) -> String {
    let parts: Vec<String> = turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker.tag(), t.text))
        .collect();
    parts.join(&format!(" {SEPARATOR} "))
}

/// Stable 64-bit key of a concatenated history, as 16 hex digits.
pub fn context_id(history: &str) -> String {
    let digest = Sha256::digest(history.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    dialogue: Vec<DialogueTurn>,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

/// Parses a JSONL corpus held in memory. `origin` labels error messages.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let mut ex = DialogueExample::new(record.dialogue, record.query).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{origin}:{line_no}: {m}")),
            other => other,
        })?;
        ex.id = record.id;
        out.push(ex);
    }
    Ok(out)
}

/// Loads a corpus file. The split only labels log output; every split uses
/// the same record format.
pub fn load_corpus(path: &Path, split: Split) -> Result<Vec<DialogueExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    let examples = parse_corpus(&text, &path.display().to_string())?;
    log::debug!("loaded {} {split} examples from {}", examples.len(), path.display());
    Ok(examples)
}

pub fn write_corpus(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let record = Record {
            dialogue: ex.turns.clone(),
            query: ex.gold_query.clone(),
            id: ex.id.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One group per distinct context, in order of first appearance, with
/// duplicate references removed.
pub fn group_for_eval(examples: &[DialogueExample]) -> Vec<EvalGroup> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<EvalGroup> = Vec::new();
    for ex in examples {
        match index.get(ex.context_id.as_str()) {
            Some(&g) => {
                let refs = &mut groups[g].references;
                if !refs.contains(&ex.gold_query) {
                    refs.push(ex.gold_query.clone());
                }
            }
            None => {
                index.insert(&ex.context_id, groups.len());
                groups.push(EvalGroup {
                    context_id: ex.context_id.clone(),
                    turns: ex.turns.clone(),
                    references: vec![ex.gold_query.clone()],
                });
            }
        }
    }
    groups
}

/// Line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub context_id: String,
    pub prediction: String,
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction file into a context_id -> prediction map. A repeated
/// context id is rejected.
pub fn load_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if out.insert(rec.context_id.clone(), rec.prediction).is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate prediction for context {}",
                path.display(),
                idx + 1,
                rec.context_id
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(s: Speaker, t: &str) -> DialogueTurn {
        DialogueTurn::new(s, t)
    }

    #[test]
    fn concat_single_turn() {
        assert_eq!(concat_history(&[turn(Speaker::User, "hello")]), "user: hello");
    }

    #[test]
    fn concat_two_turns() {
        let turns = [turn(Speaker::User, "hello"), turn(Speaker::Bot, "hi")];
        assert_eq!(concat_history(&turns), "user: hello <sep> bot: hi");
        assert_eq!(concat_history(&turns), concat_history(&turns));
    }

    #[test]
    fn shared_history_shares_context_id() {
        let text = r#"{"dialogue":[{"speaker":"user","text":"hi"}],"query":"a"}
{"dialogue":[{"speaker":"user","text":"hi"}],"query":"b"}
"#;
        let ex = parse_corpus(text, "mem").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].context_id, ex[1].context_id);
        assert_eq!(ex[0].context_id.len(), 16);
    }

    #[test]
    fn empty_query_rejected() {
        let text = r#"{"dialogue":[{"speaker":"user","text":"hi"}],"query":"  "}"#;
        let err = parse_corpus(text, "mem").unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("mem:1")), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"dialogue\":[{\"speaker\":\"user\",\"text\":\"hi\"}],\"query\":\"a\"}\n{not json\n";
        match parse_corpus(text, "mem").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_speaker_is_parse_error() {
        let text = r#"{"dialogue":[{"speaker":"narrator","text":"hi"}],"query":"a"}"#;
        assert!(matches!(parse_corpus(text, "mem"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn separator_in_turn_rejected() {
        let err = DialogueExample::new(vec![turn(Speaker::User, "a <sep> b")], "q").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    fn ex(history: &str, q: &str) -> DialogueExample {
        DialogueExample::new(vec![turn(Speaker::User, history)], q).unwrap()
    }

    #[test]
    fn grouping() {
        let g = group_for_eval(&[ex("h", "a"), ex("h", "b")]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].references, vec!["a", "b"]);

        let g = group_for_eval(&[ex("h1", "a"), ex("h2", "a")]);
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|g| g.references.len() == 1));

        let g = group_for_eval(&[ex("h", "a"), ex("h", "a")]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].references, vec!["a"]);
    }

    proptest! {
        #[test]
        fn grouping_preserves_pairs(
            pairs in proptest::collection::vec((0u8..4, 0u8..4), 0..30)
        ) {
            let examples: Vec<_> = pairs
                .iter()
                .map(|(h, q)| ex(&format!("history {h}"), &format!("query {q}")))
                .collect();
            let groups = group_for_eval(&examples);
            let mut from_groups: Vec<(String, String)> = groups
                .iter()
                .flat_map(|g| g.references.iter().map(move |r| (g.context_id.clone(), r.clone())))
                .collect();
            let mut expected: Vec<(String, String)> = examples
                .iter()
                .map(|e| (e.context_id.clone(), e.gold_query.clone()))
                .collect();
            expected.sort();
            expected.dedup();
            from_groups.sort();
            prop_assert_eq!(from_groups, expected);
        }

        #[test]
        fn concat_length_is_text_plus_template(
            texts in proptest::collection::vec("[a-z]{1,10}", 1..6)
        ) {
            let turns: Vec<_> = texts.iter().enumerate()
                .map(|(i, t)| turn(if i % 2 == 0 { Speaker::User } else { Speaker::Bot }, t))
                .collect();
            let overhead: usize = turns.iter().map(|t| t.speaker.tag().len() + 2).sum::<usize>()
                + (turns.len() - 1) * (SEPARATOR.len() + 2);
            let text_len: usize = texts.iter().map(String::len).sum();
            prop_assert_eq!(concat_history(&turns).len(), text_len + overhead);
        }
    }
}
