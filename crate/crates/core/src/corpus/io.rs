use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    detokenize, tokenize, Example, Limits, PreferencePair, RankedContext, ResponseKind, Span,
    TargetResponse, UnanswerabilityType,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetRecord {
    kind: ResponseKind,
    text: String,
    reason_span: Option<Span>,
    suggestion_span: Option<Span>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    query: String,
    paragraphs: Vec<Vec<String>>,
    sentence_labels: Vec<Vec<u8>>,
    y: u8,
    utype: UnanswerabilityType,
    target: TargetRecord,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        let paragraphs = ex
            .context
            .paragraphs
            .iter()
            .map(|p| p.sentences.iter().map(|s| detokenize(&s.tokens)).collect())
            .collect();
        let sentence_labels = ex
            .context
            .paragraphs
            .iter()
            .map(|p| p.sentences.iter().map(|s| u8::from(s.answerable)).collect())
            .collect();
        ExampleRecord {
            id: ex.id.clone(),
            query: detokenize(&ex.query),
            paragraphs,
            sentence_labels,
            y: u8::from(ex.y),
            utype: ex.utype,
            target: TargetRecord {
                kind: ex.target.kind,
                text: detokenize(&ex.target.tokens),
                reason_span: ex.target.reason_span,
                suggestion_span: ex.target.suggestion_span,
            },
        }
    }
}

fn bit(id: &str, v: u8) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::invariant(id, format!("label {v} is not 0 or 1"))),
    }
}

impl ExampleRecord {
    fn into_example(self) -> Result<Example> {
        let id = self.id;
        if self.paragraphs.len() != self.sentence_labels.len() {
            return Err(Error::invariant(&id, "paragraphs and sentence_labels differ in length"));
        }
        let mut paras = Vec::with_capacity(self.paragraphs.len());
        for (p, l) in self.paragraphs.iter().zip(&self.sentence_labels) {
            if p.len() != l.len() {
                return Err(Error::invariant(&id, "sentence count and label count differ"));
            }
            let sentences = p
                .iter()
                .zip(l)
                .map(|(s, &b)| Ok((tokenize(s), bit(&id, b)?)))
                .collect::<Result<Vec<_>>>()?;
            paras.push(sentences);
        }
        let context =
            RankedContext::from_labels(paras).map_err(|e| Error::invariant(&id, e.to_string()))?;
        let y = bit(&id, self.y)?;
        Ok(Example {
            query: tokenize(&self.query),
            context,
            y,
            utype: self.utype,
            target: TargetResponse {
                kind: self.target.kind,
                tokens: tokenize(&self.target.text),
                reason_span: self.target.reason_span,
                suggestion_span: self.target.suggestion_span,
            },
            id,
        })
    }
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    crate::manifest::write_atomic(path, body)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn dataset_to_jsonl(examples: &[Example]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, &ExampleRecord::from(ex))?;
        buf.write_all(b"\n").expect("writing to a vector");
    }
    Ok(buf)
}

pub fn save_dataset(examples: &[Example], path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_jsonl(examples)?)
}

/// Reads and validates a dataset file. Malformed lines report their line
/// number; invariant violations report the example id.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let limits = Limits::default();
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let rec: ExampleRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let ex = rec.into_example()?;
            ex.validate(&limits)?;
            Ok(ex)
        })
        .collect()
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let p: PreferencePair = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if p.response_a == p.response_b {
                return Err(Error::invariant(&p.example_id, "identical responses in pair"));
            }
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_dataset, Counts, GenerationSpec};

    fn spec() -> GenerationSpec {
        GenerationSpec {
            counts: Counts {
                train: 40,
                valid: 10,
                test: 10,
            },
            ..GenerationSpec::default()
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let d = generate_dataset(&spec()).unwrap();
        save_dataset(&d.train, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d.train);
    }

    #[test]
    fn record_fields_are_exact() {
        let d = generate_dataset(&spec()).unwrap();
        let line = String::from_utf8(dataset_to_jsonl(&d.train[..1]).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["id", "paragraphs", "query", "sentence_labels", "target", "utype", "y"]
        );
        let mut tk: Vec<_> = v["target"].as_object().unwrap().keys().cloned().collect();
        tk.sort();
        assert_eq!(tk, ["kind", "reason_span", "suggestion_span", "text"]);
    }

    #[test]
    fn refusal_label_with_answer_target_is_rejected_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let line = r#"{"id":"bad-1","query":"what is the color of bo ?","paragraphs":[["the size of bo is ka ."]],"sentence_labels":[[0]],"y":0,"utype":"MISSING","target":{"kind":"ANSWER","text":"ka","reason_span":null,"suggestion_span":null}}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::Invariant { id, .. }) => assert_eq!(id, "bad-1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_labels_and_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let line = r#"{"id":"bad-2","query":"what is the color of bo ?","paragraphs":[["the size of bo is ka ."]],"sentence_labels":[[1]],"y":0,"utype":"MISSING","target":{"kind":"REFUSAL","text":"no","reason_span":null,"suggestion_span":null}}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Invariant { id, .. }) if id == "bad-2"));

        let d = generate_dataset(&spec()).unwrap();
        let mut body = dataset_to_jsonl(&d.train[..2]).unwrap();
        body.extend_from_slice(b"{not json\n");
        fs::write(&path, body).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 3, .. })));
    }
}
