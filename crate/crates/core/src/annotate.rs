//! Metadata expansion: alt-text verdicts, ICA-style labels and captions
//! supplied by a pluggable [`Annotator`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, Visual};
use crate::error::{Error, Result};
use crate::io;
use crate::seed::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Discard,
}

/// Annotation capabilities. Implementations must be deterministic for a
/// fixed record and configuration.
pub trait Annotator {
    fn judge_alt_text(&self, record: &ImageRecord) -> Result<Verdict, String>;
    fn label(&self, record: &ImageRecord) -> Result<Vec<String>, String>;
    fn caption(&self, record: &ImageRecord) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRecord {
    /// The record with `ica_labels` and `caption` filled in.
    pub record: ImageRecord,
    pub verdict: Verdict,
    /// Set when annotation failed and the record was discarded because of it.
    pub note: Option<String>,
}

impl AnnotatedRecord {
    pub fn id(&self) -> &str {
        &self.record.image_id
    }

    pub fn kept(&self) -> bool {
        self.verdict == Verdict::Keep
    }
}

fn annotate_one<A: Annotator + ?Sized>(record: &ImageRecord, annotator: &A) -> AnnotatedRecord {
    let attempt = || -> Result<(Verdict, Vec<String>, String), String> {
        Ok((
            annotator.judge_alt_text(record)?,
            annotator.label(record)?,
            annotator.caption(record)?,
        ))
    };
    let mut rec = record.clone();
    match attempt() {
        Ok((verdict, labels, caption)) => {
            rec.ica_labels = labels;
            let empty_caption = caption.trim().is_empty();
            rec.caption = Some(caption);
            if verdict == Verdict::Keep && empty_caption {
                AnnotatedRecord {
                    record: rec,
                    verdict: Verdict::Discard,
                    note: Some("empty caption".into()),
                }
            } else {
                AnnotatedRecord {
                    record: rec,
                    verdict,
                    note: None,
                }
            }
        }
        Err(e) => {
            log::warn!("annotation failed for {}: {e}", record.image_id);
            AnnotatedRecord {
                record: rec,
                verdict: Verdict::Discard,
                note: Some(e),
            }
        }
    }
}

/// Annotates every record, preserving order. Failures become discards.
pub fn expand_metadata<A: Annotator + ?Sized>(
    records: &[ImageRecord],
    annotator: &A,
) -> Vec<AnnotatedRecord> {
    records.iter().map(|r| annotate_one(r, annotator)).collect()
}

/// Rule-based annotator over record statistics.
///
/// Alt-text is discarded when missing, blank, or containing a blocked term.
/// The single label is a hash bucket of the quantized visual payload, so
/// identical payloads always share a label.
#[derive(Debug, Clone)]
pub struct MockAnnotator {
    pub buckets: u64,
    pub blocked_terms: Vec<String>,
}

impl Default for MockAnnotator {
    fn default() -> Self {
        MockAnnotator {
            buckets: 16,
            blocked_terms: vec!["advertisement".into(), "sponsored".into()],
        }
    }
}

impl MockAnnotator {
    pub fn bucket(&self, record: &ImageRecord) -> u64 {
        let quantized: Vec<u8> = record
            .visual
            .as_slice()
            .iter()
            .flat_map(|x| ((x * 16.0).round() as i32).to_le_bytes())
            .collect();
        let tag = match record.visual {
            Visual::Pixels(_) => "px",
            Visual::Features(_) => "ft",
        };
        crate::seed::fnv1a(stable_hash(tag), &quantized) % self.buckets.max(1)
    }
}

impl Annotator for MockAnnotator {
    fn judge_alt_text(&self, record: &ImageRecord) -> Result<Verdict, String> {
        let Some(alt) = record.alt_text.as_deref() else {
            return Ok(Verdict::Discard);
        };
        let lower = alt.to_lowercase();
        if lower.trim().is_empty() || self.blocked_terms.iter().any(|t| lower.contains(t)) {
            Ok(Verdict::Discard)
        } else {
            Ok(Verdict::Keep)
        }
    }

    fn label(&self, record: &ImageRecord) -> Result<Vec<String>, String> {
        Ok(vec![format!("object-{}", self.bucket(record))])
    }

    fn caption(&self, record: &ImageRecord) -> Result<String, String> {
        Ok(format!(
            "object-{} on page {}",
            self.bucket(record),
            record.page_url
        ))
    }
}

/// One line of an annotation sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub image_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub ica_labels: Vec<String>,
    #[serde(default)]
    pub caption: String,
}

/// Replays precomputed annotations keyed by `image_id`.
#[derive(Debug, Clone, Default)]
pub struct FileAnnotator {
    entries: HashMap<String, SidecarEntry>,
}

impl FileAnnotator {
    pub fn from_entries(entries: Vec<SidecarEntry>) -> Result<Self> {
        let mut map = HashMap::with_capacity(entries.len());
        for e in entries {
            let id = e.image_id.clone();
            if map.insert(id.clone(), e).is_some() {
                return Err(Error::invalid(format!("duplicate sidecar entry `{id}`")));
            }
        }
        Ok(FileAnnotator { entries: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(io::read_jsonl(path)?)
    }

    fn entry(&self, record: &ImageRecord) -> Result<&SidecarEntry, String> {
        self.entries
            .get(&record.image_id)
            .ok_or_else(|| format!("no sidecar annotation for `{}`", record.image_id))
    }
}

impl Annotator for FileAnnotator {
    fn judge_alt_text(&self, record: &ImageRecord) -> Result<Verdict, String> {
        Ok(self.entry(record)?.verdict)
    }

    fn label(&self, record: &ImageRecord) -> Result<Vec<String>, String> {
        Ok(self.entry(record)?.ica_labels.clone())
    }

    fn caption(&self, record: &ImageRecord) -> Result<String, String> {
        Ok(self.entry(record)?.caption.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, alt: Option<&str>, feats: Vec<f32>) -> ImageRecord {
        let mut r = ImageRecord::synthetic(id, "http://a", feats);
        r.alt_text = alt.map(str::to_string);
        r
    }

    #[test]
    fn empty_alt_text_is_discarded() {
        let out = expand_metadata(&[rec("a", Some(""), vec![1.0])], &MockAnnotator::default());
        assert_eq!(out[0].verdict, Verdict::Discard);
    }

    #[test]
    fn identical_payloads_share_labels() {
        let m = MockAnnotator::default();
        let out = expand_metadata(
            &[rec("a", Some("x"), vec![0.3, 0.7]), rec("b", Some("y"), vec![0.3, 0.7])],
            &m,
        );
        assert_eq!(out[0].record.ica_labels, out[1].record.ica_labels);
    }

    #[test]
    fn kept_records_have_captions_and_order_is_preserved() {
        let recs: Vec<_> = (0..5)
            .map(|i| rec(&format!("r{i}"), Some("a photo"), vec![i as f32]))
            .collect();
        let out = expand_metadata(&recs, &MockAnnotator::default());
        for (o, r) in out.iter().zip(&recs) {
            assert_eq!(o.id(), r.image_id);
            assert!(o.kept());
            assert!(!o.record.caption.as_deref().unwrap().is_empty());
        }
    }

    #[test]
    fn blocked_term_discards() {
        let out = expand_metadata(
            &[rec("a", Some("Sponsored content"), vec![1.0])],
            &MockAnnotator::default(),
        );
        assert_eq!(out[0].verdict, Verdict::Discard);
    }

    #[test]
    fn file_annotator_failure_becomes_discard_with_note() {
        let fa = FileAnnotator::from_entries(vec![SidecarEntry {
            image_id: "a".into(),
            verdict: Verdict::Keep,
            ica_labels: vec!["Car".into()],
            caption: "a car".into(),
        }])
        .unwrap();
        let out = expand_metadata(&[rec("a", None, vec![0.0]), rec("b", None, vec![0.0])], &fa);
        assert!(out[0].kept());
        assert_eq!(out[0].record.ica_labels, ["Car"]);
        assert_eq!(out[1].verdict, Verdict::Discard);
        assert!(out[1].note.is_some());
    }

    #[test]
    fn keep_with_empty_caption_is_flagged() {
        let fa = FileAnnotator::from_entries(vec![SidecarEntry {
            image_id: "a".into(),
            verdict: Verdict::Keep,
            ica_labels: vec![],
            caption: " ".into(),
        }])
        .unwrap();
        let out = expand_metadata(&[rec("a", None, vec![0.0])], &fa);
        assert_eq!(out[0].verdict, Verdict::Discard);
    }

    #[test]
    fn annotation_is_reproducible() {
        let recs: Vec<_> = (0..8)
            .map(|i| rec(&format!("r{i}"), Some("alt"), vec![i as f32 * 0.1, 1.0]))
            .collect();
        let m = MockAnnotator::default();
        assert_eq!(expand_metadata(&recs, &m), expand_metadata(&recs, &m));
    }
}
