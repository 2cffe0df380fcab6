//! Web-document corpus: image records, line-delimited ingestion and
//! page-level grouping.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{self, LineError};

/// Pixel images are always stored with this many channels.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// Small dense images, `height x width x 3` floats in `[0, 1]`.
    Pixel,
    /// Low-dimensional feature-proxy vectors.
    #[default]
    Synthetic,
}

impl std::str::FromStr for CorpusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixel" => Ok(CorpusMode::Pixel),
            "synthetic" => Ok(CorpusMode::Synthetic),
            other => Err(format!("unknown corpus mode `{other}`")),
        }
    }
}

/// Visual payload of a record; exactly one kind per corpus.
#[derive(Debug, Clone, PartialEq)]
pub enum Visual {
    /// Row-major `(height, width, 3)`.
    Pixels(Vec<f32>),
    Features(Vec<f32>),
}

impl Visual {
    pub fn mode(&self) -> CorpusMode {
        match self {
            Visual::Pixels(_) => CorpusMode::Pixel,
            Visual::Features(_) => CorpusMode::Synthetic,
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        match self {
            Visual::Pixels(v) | Visual::Features(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub page_url: String,
    pub width: u32,
    pub height: u32,
    pub visual: Visual,
    pub alt_text: Option<String>,
    pub ica_labels: Vec<String>,
    pub caption: Option<String>,
}

impl ImageRecord {
    /// Feature-proxy record (synthetic mode). Width and height are nominal.
    pub fn synthetic(
        image_id: impl Into<String>,
        page_url: impl Into<String>,
        features: Vec<f32>,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            page_url: page_url.into(),
            width: 1,
            height: 1,
            visual: Visual::Features(features),
            alt_text: None,
            ica_labels: Vec::new(),
            caption: None,
        }
    }

    pub fn pixels(
        image_id: impl Into<String>,
        page_url: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<f32>,
    ) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize * CHANNELS);
        ImageRecord {
            image_id: image_id.into(),
            page_url: page_url.into(),
            width,
            height,
            visual: Visual::Pixels(pixels),
            alt_text: None,
            ica_labels: Vec::new(),
            caption: None,
        }
    }

    pub fn with_alt_text(mut self, alt: impl Into<String>) -> Self {
        self.alt_text = Some(alt.into());
        self
    }

    pub fn mode(&self) -> CorpusMode {
        self.visual.mode()
    }

    /// Serializes to the document line format.
    pub fn to_document(&self) -> DocumentLine {
        let (pixels_b64, features) = match &self.visual {
            Visual::Pixels(p) => {
                let bytes: Vec<u8> = p.iter().flat_map(|x| x.to_le_bytes()).collect();
                (Some(B64.encode(bytes)), None)
            }
            Visual::Features(f) => (None, Some(f.clone())),
        };
        DocumentLine {
            image_id: self.image_id.clone(),
            page_url: self.page_url.clone(),
            width: self.width,
            height: self.height,
            pixels_b64,
            features,
            alt_text: self.alt_text.clone(),
        }
    }
}

/// One line of a corpus document file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentLine {
    pub image_id: String,
    pub page_url: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_text: Option<String>,
}

impl DocumentLine {
    fn into_record(self, mode: CorpusMode) -> Result<ImageRecord, String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err(format!("invalid size {}x{}", self.width, self.height));
        }
        let visual = match (mode, self.pixels_b64, self.features) {
            (CorpusMode::Pixel, Some(b64), None) => {
                Visual::Pixels(decode_pixels(&b64, self.width, self.height)?)
            }
            (CorpusMode::Synthetic, None, Some(f)) => {
                if f.is_empty() {
                    return Err("empty features".into());
                }
                if f.iter().any(|x| !x.is_finite()) {
                    return Err("non-finite feature value".into());
                }
                Visual::Features(f)
            }
            (CorpusMode::Pixel, _, _) => {
                return Err("pixel corpus lines need `pixels_b64` and no `features`".into())
            }
            (CorpusMode::Synthetic, _, _) => {
                return Err("synthetic corpus lines need `features` and no `pixels_b64`".into())
            }
        };
        Ok(ImageRecord {
            image_id: self.image_id,
            page_url: self.page_url,
            width: self.width,
            height: self.height,
            visual,
            alt_text: self.alt_text,
            ica_labels: Vec::new(),
            caption: None,
        })
    }
}

fn decode_pixels(b64: &str, width: u32, height: u32) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(b64).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err("pixel payload is not a whole number of float32 values".into());
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let area = width as usize * height as usize;
    let pixels = if vals.len() == area * CHANNELS {
        vals
    } else if vals.len() == area {
        // grayscale: replicate across channels
        vals.iter().flat_map(|&g| [g; CHANNELS]).collect()
    } else {
        return Err(format!(
            "pixel count {} matches neither {}x{}x{} nor {}x{}",
            vals.len(),
            height,
            width,
            CHANNELS,
            height,
            width
        ));
    };
    if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err("pixel value outside [0, 1]".into());
    }
    Ok(pixels)
}

/// Records that parsed plus per-line failures.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub errors: Vec<LineError>,
}

/// Parses corpus text. Malformed lines and duplicate ids are reported and
/// skipped; the rest keep file order.
pub fn ingest_str(text: &str, mode: CorpusMode) -> Ingested {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DocumentLine>(line)
            .map_err(|e| e.to_string())
            .and_then(|d| d.into_record(mode));
        match parsed {
            Ok(rec) if !seen.insert(rec.image_id.clone()) => out.errors.push(LineError {
                line: i + 1,
                message: format!("duplicate image_id `{}`", rec.image_id),
            }),
            Ok(rec) => out.records.push(rec),
            Err(message) => out.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    out
}

/// Mode implied by the first parseable line; synthetic for empty input.
pub fn detect_mode(text: &str) -> CorpusMode {
    text.lines()
        .filter_map(|l| serde_json::from_str::<DocumentLine>(l).ok())
        .map(|d| if d.pixels_b64.is_some() { CorpusMode::Pixel } else { CorpusMode::Synthetic })
        .next()
        .unwrap_or_default()
}

pub fn ingest_corpus(path: &Path, mode: CorpusMode) -> Result<Ingested> {
    Ok(ingest_str(&io::read_to_string(path)?, mode))
}

pub fn corpus_to_jsonl(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let docs: Vec<DocumentLine> = records.iter().map(ImageRecord::to_document).collect();
    io::to_jsonl(&docs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageGroup {
    pub page_url: String,
    pub members: Vec<String>,
}

/// Partitions records by exact `page_url`. Groups and members appear in
/// first-seen order.
pub fn group_by_page(records: &[ImageRecord]) -> Vec<PageGroup> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<PageGroup> = Vec::new();
    for r in records {
        let gi = *index.entry(r.page_url.as_str()).or_insert_with(|| {
            groups.push(PageGroup {
                page_url: r.page_url.clone(),
                members: Vec::new(),
            });
            groups.len() - 1
        });
        let g = &mut groups[gi];
        if !g.members.contains(&r.image_id) {
            g.members.push(r.image_id.clone());
        }
    }
    groups
}

/// Lookup table from image id to record.
pub fn index_by_id(records: &[ImageRecord]) -> HashMap<&str, &ImageRecord> {
    records.iter().map(|r| (r.image_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(id: &str, url: &str, feats: &[f32]) -> String {
        serde_json::to_string(&ImageRecord::synthetic(id, url, feats.to_vec()).to_document())
            .unwrap()
    }

    #[test]
    fn three_valid_lines() {
        let text = [
            line("a", "u1", &[1.0]),
            line("b", "u1", &[2.0]),
            line("c", "u2", &[3.0]),
        ]
        .join("\n");
        let ing = ingest_str(&text, CorpusMode::Synthetic);
        assert_eq!(ing.records.len(), 3);
        assert!(ing.errors.is_empty());
        let ids: Vec<_> = ing.records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn malformed_line_is_isolated() {
        let text = format!(
            "{}\n{}\n{{\"image_id\": \"x\"",
            line("a", "u", &[1.0]),
            line("b", "u", &[1.0])
        );
        let ing = ingest_str(&text, CorpusMode::Synthetic);
        assert_eq!(ing.records.len(), 2);
        assert_eq!(ing.errors.len(), 1);
        assert_eq!(ing.errors[0].line, 3);
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        let ing = ingest_str("", CorpusMode::Pixel);
        assert!(ing.records.is_empty() && ing.errors.is_empty());
    }

    #[test]
    fn ingest_is_deterministic() {
        let text = [line("a", "u", &[0.5, 1.0]), line("b", "v", &[0.25])].join("\n");
        let a = ingest_str(&text, CorpusMode::Synthetic);
        let b = ingest_str(&text, CorpusMode::Synthetic);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn wrong_mode_payload_is_rejected() {
        let ing = ingest_str(&line("a", "u", &[1.0]), CorpusMode::Pixel);
        assert!(ing.records.is_empty());
        assert_eq!(ing.errors.len(), 1);
    }

    #[test]
    fn duplicate_id_is_an_error_line() {
        let text = [line("a", "u", &[1.0]), line("a", "v", &[1.0])].join("\n");
        let ing = ingest_str(&text, CorpusMode::Synthetic);
        assert_eq!(ing.records.len(), 1);
        assert_eq!(ing.errors[0].line, 2);
    }

    #[test]
    fn pixel_roundtrip_and_grayscale_replication() {
        let rgb = ImageRecord::pixels("p", "u", 2, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
        let text = serde_json::to_string(&rgb.to_document()).unwrap();
        let ing = ingest_str(&text, CorpusMode::Pixel);
        assert_eq!(ing.records[0], rgb);

        let gray: Vec<u8> = [0.25f32, 0.75].iter().flat_map(|x| x.to_le_bytes()).collect();
        let doc = DocumentLine {
            image_id: "g".into(),
            page_url: "u".into(),
            width: 2,
            height: 1,
            pixels_b64: Some(B64.encode(gray)),
            features: None,
            alt_text: None,
        };
        let ing = ingest_str(&serde_json::to_string(&doc).unwrap(), CorpusMode::Pixel);
        assert_eq!(
            ing.records[0].visual,
            Visual::Pixels(vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.75])
        );
    }

    #[test]
    fn grouping_examples() {
        let recs: Vec<_> = [("a1", "A"), ("b1", "B"), ("a2", "A"), ("b2", "B")]
            .iter()
            .map(|(id, u)| ImageRecord::synthetic(*id, *u, vec![0.0]))
            .collect();
        let g = group_by_page(&recs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].members, ["a1", "a2"]);
        assert_eq!(g[1].members, ["b1", "b2"]);

        let one = group_by_page(&recs[..1]);
        assert_eq!(one, vec![PageGroup { page_url: "A".into(), members: vec!["a1".into()] }]);
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition(urls in proptest::collection::vec(0u8..5, 1..40)) {
            let recs: Vec<_> = urls
                .iter()
                .enumerate()
                .map(|(i, u)| ImageRecord::synthetic(format!("r{i}"), format!("url{u}"), vec![0.0]))
                .collect();
            let groups = group_by_page(&recs);
            let total: usize = groups.iter().map(|g| g.members.len()).sum();
            prop_assert_eq!(total, recs.len());
            let mut seen = HashSet::new();
            for g in &groups {
                for m in &g.members {
                    prop_assert!(seen.insert(m.clone()));
                    let r = recs.iter().find(|r| &r.image_id == m).unwrap();
                    prop_assert_eq!(&r.page_url, &g.page_url);
                }
            }
        }
    }
}
