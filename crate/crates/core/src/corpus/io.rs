use std::path::Path;

use serde_json::{Map, Value};

use super::world::{Fact, Neighbor};
use super::{CorpusError, Result};

const KEYS: [&str; 8] =
    ["id", "subject", "relation", "object_true", "object_new", "prompt", "paraphrases", "neighborhood"];

/// Writes one JSON object per line, atomically.
pub fn save_facts(facts: &[Fact], path: &Path) -> Result<()> {
    let mut out = String::new();
    for f in facts {
        out.push_str(&serde_json::to_string(f).map_err(|e| CorpusError::Io(e.to_string()))?);
        out.push('\n');
    }
    crate::checkpoint::write_atomic(path, out.as_bytes()).map_err(|e| CorpusError::Io(e.to_string()))
}

pub fn load_facts(path: &Path) -> Result<Vec<Fact>> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    parse_facts(&text)
}

pub fn parse_facts(text: &str) -> Result<Vec<Fact>> {
    let mut facts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
        let obj = value
            .as_object()
            .ok_or_else(|| CorpusError::Parse { line: line_no, msg: "expected a JSON object".into() })?;
        let fact = fact_from_object(obj, line_no)?;
        fact.validate()?;
        facts.push(fact);
    }
    let all: Vec<Fact> = facts.clone();
    super::world::EditSequence::new(vec![super::world::EditBatch { batch_id: 0, facts: all }])?;
    Ok(facts)
}

fn field_err(line: usize, field: &str, msg: &str) -> CorpusError {
    CorpusError::Field { line, field: field.to_string(), msg: msg.to_string() }
}

fn string(obj: &Map<String, Value>, key: &str, line: usize) -> Result<String> {
    match obj.get(key) {
        None => Err(field_err(line, key, "missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(field_err(line, key, "expected a string")),
    }
}

fn fact_from_object(obj: &Map<String, Value>, line: usize) -> Result<Fact> {
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(field_err(line, k, "unknown field"));
    }
    let paraphrases = match obj.get("paraphrases") {
        None => return Err(field_err(line, "paraphrases", "missing")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| field_err(line, "paraphrases", "expected strings")))
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(field_err(line, "paraphrases", "expected a list")),
    };
    let neighborhood = match obj.get("neighborhood") {
        None => return Err(field_err(line, "neighborhood", "missing")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                let o = v.as_object().ok_or_else(|| field_err(line, "neighborhood", "expected objects"))?;
                if o.len() != 2 {
                    return Err(field_err(line, "neighborhood", "entries need exactly prompt and expected_object"));
                }
                Ok(Neighbor {
                    prompt: string(o, "prompt", line).map_err(|_| field_err(line, "neighborhood.prompt", "missing or not a string"))?,
                    expected_object: string(o, "expected_object", line)
                        .map_err(|_| field_err(line, "neighborhood.expected_object", "missing or not a string"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(field_err(line, "neighborhood", "expected a list")),
    };
    Ok(Fact {
        id: string(obj, "id", line)?,
        subject: string(obj, "subject", line)?,
        relation: string(obj, "relation", line)?,
        object_true: string(obj, "object_true", line)?,
        object_new: string(obj, "object_new", line)?,
        prompt: string(obj, "prompt", line)?,
        paraphrases,
        neighborhood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_world, WorldConfig};

    #[test]
    fn save_load_round_trip() {
        let w = synth_world(&WorldConfig { n_subjects: 10, n_relations: 3, n_objects: 3, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("facts.jsonl");
        save_facts(&w.facts, &p).unwrap();
        assert_eq!(load_facts(&p).unwrap(), w.facts);
        let bytes = std::fs::read(&p).unwrap();
        save_facts(&load_facts(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let w = synth_world(&WorldConfig { n_subjects: 4, n_relations: 2, n_objects: 2, ..Default::default() }).unwrap();
        let mut v: Vec<Value> = w.facts.iter().map(|f| serde_json::to_value(f).unwrap()).collect();
        v[1].as_object_mut().unwrap().remove("object_new");
        let text: String = v.iter().map(|x| format!("{x}\n")).collect();
        let err = parse_facts(&text).unwrap_err();
        assert!(matches!(&err, CorpusError::Field { line: 2, field, .. } if field == "object_new"), "{err}");
    }

    #[test]
    fn empty_and_malformed() {
        assert!(parse_facts("").unwrap().is_empty());
        assert!(matches!(parse_facts("{\n"), Err(CorpusError::Parse { line: 1, .. })));
    }
}
