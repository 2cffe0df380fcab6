//! Instruction generation: turns mined pairs into (query, instruction,
//! target) triplets via a text-generation client.

mod client;

pub use client::{CommandClient, MockClient, ReplayClient, ReplayEntry, TextGenClient};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotatedRecord;
use crate::error::{Error, Result};
use crate::mining::CandidatePair;
use crate::seed;

const BUILTIN_ASSETS: &str = include_str!("../../assets/query_gen_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TemplateFree,
    TemplateBased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_id: String,
    pub instruction: String,
    pub target_id: String,
    pub provenance: Provenance,
}

/// Prompt text blocks and ablation sentence frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssets {
    pub instruction: String,
    pub demonstrations: String,
    pub attribute_instruction: String,
    /// Sentence frames with a single `{attr}` slot.
    pub frames: Vec<String>,
}

impl PromptAssets {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ASSETS).expect("bundled prompt assets are well formed")
    }

    /// Parses `@@ name` sections; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: HashMap<String, Vec<&str>> = HashMap::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            if line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix("@@") {
                let name = name.trim().to_string();
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            if let Some(c) = &current {
                sections.get_mut(c).expect("section exists").push(line);
            }
        }
        let take = |name: &str| -> Result<String> {
            let lines = sections
                .get(name)
                .ok_or_else(|| Error::config(format!("prompt assets lack section `{name}`")))?;
            let s = lines.join("\n").trim().to_string();
            if s.is_empty() {
                return Err(Error::config(format!("prompt assets section `{name}` is empty")));
            }
            Ok(s)
        };
        let frames: Vec<String> = take("template_frames")?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if let Some(bad) = frames.iter().find(|f| f.matches("{attr}").count() != 1) {
            return Err(Error::config(format!("template frame `{bad}` needs exactly one {{attr}} slot")));
        }
        Ok(PromptAssets {
            instruction: take("instruction")?,
            demonstrations: take("demonstrations")?,
            attribute_instruction: take("attribute_instruction")?,
            frames,
        })
    }
}

fn escape(s: &str, commas: bool) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '\\' | '[' | ']') || (commas && c == ',') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn image_line(role: &str, rec: Option<&AnnotatedRecord>, missing: &mut usize) -> String {
    let r = rec.map(|a| &a.record);
    let alt = r.and_then(|r| r.alt_text.as_deref());
    let caption = r.and_then(|r| r.caption.as_deref());
    let labels = r.map(|r| r.ica_labels.as_slice()).unwrap_or(&[]);
    *missing += usize::from(alt.is_none()) + usize::from(caption.is_none()) + usize::from(labels.is_empty());
    let labels: Vec<String> = labels.iter().map(|l| escape(l, true)).collect();
    format!(
        "{role} Image: ALT_TEXT [{}]. TEXT_LABEL [{}]. CAPTION [{}].",
        escape(alt.unwrap_or(""), false),
        labels.join(", "),
        escape(caption.unwrap_or(""), false)
    )
}

/// The pair-specific block: page line plus source and target metadata.
/// Returns the block and the number of missing metadata fields.
pub fn metadata_block(pair: &CandidatePair, records: &HashMap<&str, &AnnotatedRecord>) -> (String, usize) {
    let mut missing = 0;
    let src = image_line("Source", records.get(pair.query_id.as_str()).copied(), &mut missing);
    let tgt = image_line("Target", records.get(pair.target_id.as_str()).copied(), &mut missing);
    if missing > 0 {
        log::warn!(
            "pair {} -> {}: {missing} metadata field(s) missing, rendered empty",
            pair.query_id,
            pair.target_id
        );
    }
    (
        format!(
            "Both images are from the website [ {} ]\n{src}\n{tgt}",
            escape(&pair.page_url, false)
        ),
        missing,
    )
}

pub fn records_by_id(annotated: &[AnnotatedRecord]) -> HashMap<&str, &AnnotatedRecord> {
    annotated.iter().map(|a| (a.id(), a)).collect()
}

/// Full few-shot prompt for open-ended instruction generation.
pub fn build_prompt(
    pair: &CandidatePair,
    records: &HashMap<&str, &AnnotatedRecord>,
    assets: &PromptAssets,
) -> String {
    let (block, _) = metadata_block(pair, records);
    format!(
        "{}\n\n{}\n\n{}\nThink:",
        assets.instruction, assets.demonstrations, block
    )
}

/// Prompt asking for one salient target attribute (template ablation).
pub fn build_attribute_prompt(
    pair: &CandidatePair,
    records: &HashMap<&str, &AnnotatedRecord>,
    assets: &PromptAssets,
) -> String {
    let (block, _) = metadata_block(pair, records);
    format!("{}\n\n{}\nAttribute:", assets.attribute_instruction, block)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no `{0} [` marker in response")]
    MissingMarker(&'static str),
    #[error("unterminated bracket after `{0}`")]
    Unterminated(&'static str),
    #[error("empty value after `{0}`")]
    Empty(&'static str),
}

/// Extracts the bracketed text following the last `marker [` occurrence.
pub fn parse_bracketed(raw: &str, marker: &'static str) -> Result<String, ParseError> {
    let mut search_end = raw.len();
    let open = loop {
        let Some(pos) = raw[..search_end].rfind(marker) else {
            return Err(ParseError::MissingMarker(marker));
        };
        let rest = raw[pos + marker.len()..].trim_start();
        if rest.starts_with('[') {
            break raw.len() - rest.len() + 1;
        }
        search_end = pos;
    };
    let close = raw[open..]
        .find(']')
        .ok_or(ParseError::Unterminated(marker))?;
    let value = raw[open..open + close].trim();
    if value.is_empty() {
        return Err(ParseError::Empty(marker));
    }
    Ok(value.to_string())
}

pub fn parse_response(raw: &str) -> Result<String, ParseError> {
    parse_bracketed(raw, "Query:")
}

pub fn parse_attribute(raw: &str) -> Result<String, ParseError> {
    parse_bracketed(raw, "Attribute:")
}

pub fn fill_frame(frame: &str, attr: &str) -> String {
    frame.replace("{attr}", attr)
}

/// Per-pair client seed, independent of processing order.
pub fn pair_seed(seed: u64, pair: &CandidatePair) -> u64 {
    seed::derive(seed, &["instruct", &pair.query_id, &pair.target_id])
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub pairs: usize,
    pub triplets: usize,
    pub dropped_client: usize,
    pub dropped_parse: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub triplets: Vec<Triplet>,
    pub stats: GenerationStats,
}

fn generate_with<F>(pairs: &[CandidatePair], mut per_pair: F) -> GenerationOutput
where
    F: FnMut(&CandidatePair) -> Result<Result<Triplet, ParseError>, String>,
{
    let mut stats = GenerationStats {
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut triplets = Vec::new();
    for p in pairs {
        if p.query_id == p.target_id {
            stats.dropped_parse += 1;
            continue;
        }
        match per_pair(p) {
            Ok(Ok(t)) => triplets.push(t),
            Ok(Err(e)) => {
                log::debug!("pair {} -> {}: {e}", p.query_id, p.target_id);
                stats.dropped_parse += 1;
            }
            Err(e) => {
                log::warn!("pair {} -> {}: client failed: {e}", p.query_id, p.target_id);
                stats.dropped_client += 1;
            }
        }
    }
    if stats.dropped_parse + stats.dropped_client > 0 {
        log::info!(
            "instruction generation dropped {} pair(s) ({} client, {} parse)",
            stats.dropped_parse + stats.dropped_client,
            stats.dropped_client,
            stats.dropped_parse
        );
    }
    stats.triplets = triplets.len();
    GenerationOutput { triplets, stats }
}

/// Open-ended instructions from the few-shot prompt.
pub fn generate_template_free<C: TextGenClient + ?Sized>(
    pairs: &[CandidatePair],
    annotated: &[AnnotatedRecord],
    client: &C,
    assets: &PromptAssets,
    seed: u64,
) -> GenerationOutput {
    let records = records_by_id(annotated);
    generate_with(pairs, |p| {
        let raw = client.generate(&build_prompt(p, &records, assets), pair_seed(seed, p))?;
        Ok(parse_response(&raw).map(|instruction| Triplet {
            query_id: p.query_id.clone(),
            instruction,
            target_id: p.target_id.clone(),
            provenance: Provenance::TemplateFree,
        }))
    })
}

/// Fixed sentence frames filled with a client-chosen target attribute.
pub fn generate_template_based<C: TextGenClient + ?Sized>(
    pairs: &[CandidatePair],
    annotated: &[AnnotatedRecord],
    client: &C,
    assets: &PromptAssets,
    seed: u64,
) -> GenerationOutput {
    let records = records_by_id(annotated);
    generate_with(pairs, |p| {
        let s = pair_seed(seed, p);
        let raw = client.generate(&build_attribute_prompt(p, &records, assets), s)?;
        let mut rng = seed::rng(s, &["frame"]);
        let frame = &assets.frames[rng.random_range(0..assets.frames.len())];
        Ok(parse_attribute(&raw).map(|attr| Triplet {
            query_id: p.query_id.clone(),
            instruction: fill_frame(frame, &attr),
            target_id: p.target_id.clone(),
            provenance: Provenance::TemplateBased,
        }))
    })
}
