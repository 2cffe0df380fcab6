//! On-disk evaluation dataset: `corpus.jsonl`, `cases.jsonl`,
//! `index_ids.txt` and an optional `texts.jsonl`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QueryCase;
use crate::corpus::{corpus_to_jsonl, detect_mode, ingest_str, ImageRecord};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub corpus: Vec<ImageRecord>,
    pub cases: Vec<QueryCase>,
    pub index_ids: Vec<String>,
    pub texts: Vec<TextItem>,
}

impl Dataset {
    pub fn records_by_id(&self) -> HashMap<&str, &ImageRecord> {
        crate::corpus::index_by_id(&self.corpus)
    }

    pub fn texts_by_id(&self) -> HashMap<&str, &str> {
        self.texts.iter().map(|t| (t.id.as_str(), t.text.as_str())).collect()
    }

    /// Keeps the first `n` cases.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            cases: self.cases.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_atomic(&dir.join("corpus.jsonl"), &corpus_to_jsonl(&self.corpus)?)?;
        io::write_jsonl(&dir.join("cases.jsonl"), &self.cases)?;
        let mut ids = self.index_ids.join("\n");
        ids.push('\n');
        io::write_atomic(&dir.join("index_ids.txt"), ids.as_bytes())?;
        if !self.texts.is_empty() {
            io::write_jsonl(&dir.join("texts.jsonl"), &self.texts)?;
        }
        Ok(())
    }

    /// Loads a dataset directory. Any malformed line is an error.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let corpus_path = dir.join("corpus.jsonl");
        let text = io::read_to_string(&corpus_path)?;
        let ingested = ingest_str(&text, detect_mode(&text));
        if let Some(e) = ingested.errors.first() {
            return Err(Error::Parse {
                path: corpus_path,
                line: e.line,
                message: e.message.clone(),
            });
        }
        let cases = io::read_jsonl(&dir.join("cases.jsonl"))?;
        let index_ids = io::read_to_string(&dir.join("index_ids.txt"))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let texts_path = dir.join("texts.jsonl");
        let texts = if texts_path.exists() { io::read_jsonl(&texts_path)? } else { Vec::new() };
        Ok(Dataset {
            corpus: ingested.records,
            cases,
            index_ids,
            texts,
        })
    }
}
