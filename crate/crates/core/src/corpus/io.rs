use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{CorpusSplits, FactExample, Split};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    vocab_size: usize,
}

#[derive(Serialize)]
struct Record<'a> {
    #[serde(flatten)]
    example: &'a FactExample,
    split: Split,
}

const FIELDS: [&str; 8] = [
    "id",
    "prompt_tokens",
    "prefix_tokens",
    "entity_tokens",
    "paraphrase_entities",
    "perturbed_entities",
    "prompt_type",
    "split",
];

pub fn corpus_jsonl(splits: &CorpusSplits) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format_version: CORPUS_FORMAT_VERSION,
        vocab_size: splits.vocab_size,
    })?;
    out.push('\n');
    for (split, example) in splits.iter() {
        out.push_str(&serde_json::to_string(&Record { example, split })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(splits: &CorpusSplits, path: &Path) -> Result<()> {
    write_atomic(path, corpus_jsonl(splits)?.as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<CorpusSplits> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::schema(0, "encoding", e.to_string()))?;
    parse_corpus(text)
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| Error::schema(line, name, "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::schema(line, name, e.to_string()))
}

/// Parse JSONL text; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<CorpusSplits> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::schema(1, "format_version", "empty corpus file"))?;
    let header: Map<String, Value> =
        serde_json::from_str(first).map_err(|e| Error::schema(1, "header", e.to_string()))?;
    let version: u32 = field(&header, "format_version", 1)?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(Error::schema(1, "format_version", format!("unsupported version {version}")));
    }
    let mut splits = CorpusSplits {
        vocab_size: field(&header, "vocab_size", 1)?,
        retain: vec![],
        forget: vec![],
        holdout_nonmember: vec![],
        holdout_real: vec![],
        holdout_world: vec![],
    };
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let obj: Map<String, Value> =
            serde_json::from_str(raw).map_err(|e| Error::schema(line, "record", e.to_string()))?;
        if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(Error::schema(line, extra.clone(), "unknown field"));
        }
        let example = FactExample {
            id: field(&obj, "id", line)?,
            prompt_tokens: field(&obj, "prompt_tokens", line)?,
            prefix_tokens: field(&obj, "prefix_tokens", line)?,
            entity_tokens: field(&obj, "entity_tokens", line)?,
            paraphrase_entities: field(&obj, "paraphrase_entities", line)?,
            perturbed_entities: field(&obj, "perturbed_entities", line)?,
            prompt_type: field(&obj, "prompt_type", line)?,
        };
        let split: Split = field(&obj, "split", line)?;
        example.check().map_err(|(f, m)| Error::schema(line, f, m))?;
        if !seen.insert(example.id.clone()) {
            return Err(Error::schema(line, "id", format!("duplicate id `{}`", example.id)));
        }
        splits.split_mut(split).push(example);
    }
    splits.validate()?;
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusCounts};

    fn text() -> String {
        let c = generate_synthetic_corpus(3, &CorpusCounts::default(), 256).unwrap();
        corpus_jsonl(&c).unwrap()
    }

    #[test]
    fn roundtrip() {
        let c = generate_synthetic_corpus(3, &CorpusCounts::default(), 256).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&c, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn missing_field_is_named() {
        let t = text();
        let mut lines: Vec<String> = t.lines().map(String::from).collect();
        let mut obj: Map<String, Value> = serde_json::from_str(&lines[3]).unwrap();
        obj.remove("perturbed_entities");
        lines[3] = serde_json::to_string(&obj).unwrap();
        match parse_corpus(&lines.join("\n")).unwrap_err() {
            Error::Schema { line, field, .. } => {
                assert_eq!(line, 4);
                assert_eq!(field, "perturbed_entities");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_id_across_splits() {
        let t = text();
        let mut lines: Vec<String> = t.lines().map(String::from).collect();
        let first: Map<String, Value> = serde_json::from_str(&lines[1]).unwrap();
        let mut last: Map<String, Value> = serde_json::from_str(lines.last().unwrap()).unwrap();
        last.insert("id".into(), first["id"].clone());
        *lines.last_mut().unwrap() = serde_json::to_string(&last).unwrap();
        match parse_corpus(&lines.join("\n")).unwrap_err() {
            Error::Schema { field, .. } => assert_eq!(field, "id"),
            e => panic!("unexpected {e}"),
        }
    }
}
