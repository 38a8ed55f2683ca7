//! JSON-lines manifests: one utterance per line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, write_atomic, Error, Result};
use crate::features::Spectrogram;
use crate::objectives::Example;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feat: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
}

/// Parses a manifest, rejecting duplicate ids. Blank lines are ignored.
pub fn parse(text: &str, path: &Path) -> Result<Vec<Record>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", no + 1),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("duplicate id `{}`", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse(&text, path)
}

pub fn to_string(records: &[Record]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    write_atomic(path, to_string(records).as_bytes())
}

/// Reads every record's features and encodes the texts the vocabularies
/// cover. A record without features is an error.
pub fn load_examples(records: &[Record], st_vocab: Option<&Vocab>, asr_vocab: Option<&Vocab>) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let feat = r
                .feat
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("utterance `{}` has no features", r.id)))?;
            let x = Spectrogram::read(Path::new(feat))?;
            let encode = |text: &Option<String>, vocab: Option<&Vocab>| match (text, vocab) {
                (Some(t), Some(v)) => Some(v.encode(t)),
                _ => None,
            };
            Ok(Example {
                id: r.id.clone(),
                x,
                y: encode(&r.translation, st_vocab),
                z: encode(&r.transcript, asr_vocab),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_duplicates() {
        let recs = vec![Record {
            id: "a".into(),
            feat: Some("a.mamf".into()),
            audio: None,
            transcript: None,
            translation: Some("x y".into()),
        }];
        let text = to_string(&recs);
        assert_eq!(text, "{\"id\":\"a\",\"feat\":\"a.mamf\",\"translation\":\"x y\"}\n");
        assert_eq!(parse(&text, Path::new("m")).unwrap(), recs);
        let dup = format!("{text}\n{text}");
        assert!(matches!(parse(&dup, Path::new("m")), Err(Error::Format { .. })));
        assert!(parse("{", Path::new("m")).is_err());
        assert!(parse("", Path::new("m")).unwrap().is_empty());
    }
}
