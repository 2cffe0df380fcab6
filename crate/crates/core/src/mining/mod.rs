//! Pair mining: cleaning and dedup of page groups, ordered pair scoring,
//! threshold filtering and capped per-group selection.

mod backend;

pub use backend::{
    pool_pixels, visual_descriptor, words, EmbeddingEntry, EmbeddingFileBackend, EmbeddingKind,
    HashingBackend, ScoringBackend, POOL_GRID,
};

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotatedRecord;
use crate::corpus::{CorpusMode, PageGroup};
use crate::error::{Error, Result};
use crate::scalar::dot;
use crate::seed;

/// How visual and textual relevance combine in the acceptance rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceRule {
    /// Either visual or textual relevance suffices.
    #[default]
    Or,
    /// Both are required.
    And,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Members of one group above this image cosine are duplicates.
    pub dup_image_sim: f64,
    /// Groups whose duplicate-identity Jaccard exceeds this overlap.
    pub group_overlap_ratio: f64,
    /// Minimum side length in pixels (pixel corpora only).
    pub min_resolution: u32,
    pub img_img_min: f64,
    pub txt_txt_min: f64,
    pub ica_self_min: f64,
    pub ica_query_max: f64,
    pub max_pairs_per_group: usize,
    pub relevance_rule: RelevanceRule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            dup_image_sim: 0.98,
            group_overlap_ratio: 0.80,
            min_resolution: 288,
            img_img_min: 0.82,
            txt_txt_min: 0.90,
            ica_self_min: 0.32,
            ica_query_max: 0.18,
            max_pairs_per_group: 3,
            relevance_rule: RelevanceRule::Or,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let sims = [
            ("dup_image_sim", self.dup_image_sim),
            ("img_img_min", self.img_img_min),
            ("txt_txt_min", self.txt_txt_min),
            ("ica_self_min", self.ica_self_min),
            ("ica_query_max", self.ica_query_max),
        ];
        for (name, v) in sims {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::config(format!("filter.{name} = {v} is outside [-1, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.group_overlap_ratio) {
            return Err(Error::config(format!(
                "filter.group_overlap_ratio = {} is outside [0, 1]",
                self.group_overlap_ratio
            )));
        }
        if self.max_pairs_per_group == 0 {
            return Err(Error::config("filter.max_pairs_per_group must be at least 1"));
        }
        if self.min_resolution == 0 {
            return Err(Error::config("filter.min_resolution must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub query_id: String,
    pub target_id: String,
    pub page_url: String,
    pub img_img_sim: f64,
    pub txt_txt_sim: f64,
    pub ica_self_sim: f64,
    pub ica_query_sim: f64,
}

impl CandidatePair {
    pub fn combined_relevance(&self) -> f64 {
        self.img_img_sim + self.txt_txt_sim
    }
}

/// Per-stage counts of a mining run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub records: usize,
    pub groups: usize,
    pub removed_discarded: usize,
    pub removed_low_resolution: usize,
    pub removed_duplicates: usize,
    pub groups_emptied: usize,
    pub groups_removed_overlap: usize,
    pub groups_singleton: usize,
    pub pairs_scored: usize,
    pub pairs_skipped: usize,
    pub pairs_rejected_thresholds: usize,
    pub pairs_rejected_cap: usize,
    pub pairs_retained: usize,
}

type Lookup<'a> = HashMap<&'a str, &'a AnnotatedRecord>;

fn lookup(annotated: &[AnnotatedRecord]) -> Lookup<'_> {
    annotated.iter().map(|a| (a.id(), a)).collect()
}

/// Memoized image embeddings.
struct ImageEmbeddings<'a, B: ScoringBackend + ?Sized> {
    backend: &'a B,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a, B: ScoringBackend + ?Sized> ImageEmbeddings<'a, B> {
    fn new(backend: &'a B) -> Self {
        ImageEmbeddings {
            backend,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, rec: &AnnotatedRecord) -> Result<&[f64]> {
        if !self.cache.contains_key(rec.id()) {
            let e = self
                .backend
                .image_embed(&rec.record)
                .map_err(Error::Invalid)?;
            self.cache.insert(rec.id().to_string(), e);
        }
        Ok(&self.cache[rec.id()])
    }
}

fn member<'a>(lk: &Lookup<'a>, id: &str) -> Result<&'a AnnotatedRecord> {
    lk.get(id)
        .copied()
        .ok_or_else(|| Error::invalid(format!("group member `{id}` was not annotated")))
}

/// Removes discarded, low-resolution and duplicate members, drops emptied
/// groups, then removes one group of every highly overlapping pair.
pub fn clean_groups<B: ScoringBackend + ?Sized>(
    groups: &[PageGroup],
    annotated: &[AnnotatedRecord],
    config: &FilterConfig,
    backend: &B,
    seed: u64,
    stats: &mut MiningStats,
) -> Result<Vec<PageGroup>> {
    let lk = lookup(annotated);
    let mut emb = ImageEmbeddings::new(backend);
    let mut cleaned = Vec::with_capacity(groups.len());

    for g in groups {
        let mut kept: Vec<String> = Vec::with_capacity(g.members.len());
        for id in &g.members {
            let rec = member(&lk, id)?;
            if !rec.kept() {
                stats.removed_discarded += 1;
                continue;
            }
            let r = &rec.record;
            if r.mode() == CorpusMode::Pixel
                && (r.width < config.min_resolution || r.height < config.min_resolution)
            {
                stats.removed_low_resolution += 1;
                continue;
            }
            let e = emb.get(rec)?.to_vec();
            let mut dup = false;
            for k in &kept {
                if dot(&e, emb.get(member(&lk, k)?)?) > config.dup_image_sim {
                    dup = true;
                    break;
                }
            }
            if dup {
                stats.removed_duplicates += 1;
            } else {
                kept.push(id.clone());
            }
        }
        if kept.is_empty() {
            stats.groups_emptied += 1;
        } else {
            cleaned.push(PageGroup {
                page_url: g.page_url.clone(),
                members: kept,
            });
        }
    }

    let mut alive = vec![true; cleaned.len()];
    for i in 0..cleaned.len() {
        for j in (i + 1)..cleaned.len() {
            if !(alive[i] && alive[j]) {
                continue;
            }
            let ov = overlap(&cleaned[i], &cleaned[j], &lk, &mut emb, config.dup_image_sim)?;
            if ov > config.group_overlap_ratio {
                let mut rng = seed::rng(seed, &["overlap", &cleaned[i].page_url, &cleaned[j].page_url]);
                let loser = if rng.random_bool(0.5) { i } else { j };
                alive[loser] = false;
                stats.groups_removed_overlap += 1;
            }
        }
    }
    Ok(cleaned
        .into_iter()
        .zip(alive)
        .filter_map(|(g, a)| a.then_some(g))
        .collect())
}

/// Jaccard overlap where two images are identical when their embedding
/// cosine exceeds `dup_sim`. The intersection is the smaller of the two
/// directional match counts so the measure is symmetric and at most 1.
fn overlap<B: ScoringBackend + ?Sized>(
    a: &PageGroup,
    b: &PageGroup,
    lk: &Lookup<'_>,
    emb: &mut ImageEmbeddings<'_, B>,
    dup_sim: f64,
) -> Result<f64> {
    let ea: Vec<Vec<f64>> = a
        .members
        .iter()
        .map(|id| Ok(emb.get(member(lk, id)?)?.to_vec()))
        .collect::<Result<_>>()?;
    let eb: Vec<Vec<f64>> = b
        .members
        .iter()
        .map(|id| Ok(emb.get(member(lk, id)?)?.to_vec()))
        .collect::<Result<_>>()?;
    let matched = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        xs.iter()
            .filter(|x| ys.iter().any(|y| dot(x, y) > dup_sim))
            .count()
    };
    let inter = matched(&ea, &eb).min(matched(&eb, &ea)) as f64;
    let union = (ea.len() + eb.len()) as f64 - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Scores every ordered pair of distinct members. Pairs whose endpoints
/// lack a caption, or whose target has no labels, are skipped and counted.
pub fn score_pairs<B: ScoringBackend + ?Sized>(
    group: &PageGroup,
    annotated: &[AnnotatedRecord],
    backend: &B,
    stats: &mut MiningStats,
) -> Result<Vec<CandidatePair>> {
    let lk = lookup(annotated);
    let recs: Vec<&AnnotatedRecord> = group
        .members
        .iter()
        .map(|id| member(&lk, id))
        .collect::<Result<_>>()?;
    let embed_text = |t: &str| backend.text_embed(t).map_err(Error::Invalid);
    let img: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| backend.image_embed(&r.record).map_err(Error::Invalid))
        .collect::<Result<_>>()?;
    let cap: Vec<Option<Vec<f64>>> = recs
        .iter()
        .map(|r| match r.record.caption.as_deref() {
            Some(c) if !c.trim().is_empty() => embed_text(c).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<Vec<f64>>> = recs
        .iter()
        .map(|r| r.record.ica_labels.iter().map(|l| embed_text(l)).collect())
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for q in 0..recs.len() {
        for t in 0..recs.len() {
            if q == t {
                continue;
            }
            let (Some(cq), Some(ct)) = (&cap[q], &cap[t]) else {
                log::warn!(
                    "skipping pair {} -> {}: missing caption",
                    recs[q].id(),
                    recs[t].id()
                );
                stats.pairs_skipped += 1;
                continue;
            };
            // label attaining the max self similarity (first on ties)
            let best = labels[t]
                .iter()
                .map(|l| dot(l, &img[t]))
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                    Some((_, bs)) if bs >= s => acc,
                    _ => Some((i, s)),
                });
            let Some((li, ica_self)) = best else {
                log::warn!("skipping pair {} -> {}: target has no labels", recs[q].id(), recs[t].id());
                stats.pairs_skipped += 1;
                continue;
            };
            out.push(CandidatePair {
                query_id: recs[q].id().to_string(),
                target_id: recs[t].id().to_string(),
                page_url: group.page_url.clone(),
                img_img_sim: dot(&img[q], &img[t]),
                txt_txt_sim: dot(cq, ct),
                ica_self_sim: ica_self,
                ica_query_sim: dot(&labels[t][li], &img[q]),
            });
            stats.pairs_scored += 1;
        }
    }
    Ok(out)
}

pub fn passes(pair: &CandidatePair, config: &FilterConfig) -> bool {
    let visual = pair.img_img_sim >= config.img_img_min;
    let textual = pair.txt_txt_sim >= config.txt_txt_min;
    let relevant = match config.relevance_rule {
        RelevanceRule::Or => visual || textual,
        RelevanceRule::And => visual && textual,
    };
    relevant && pair.ica_self_sim >= config.ica_self_min && pair.ica_query_sim <= config.ica_query_max
}

pub fn filter_pairs(pairs: &[CandidatePair], config: &FilterConfig) -> Vec<CandidatePair> {
    pairs.iter().filter(|p| passes(p, config)).cloned().collect()
}

/// Keeps at most `max_pairs_per_group` pairs per page, preferring higher
/// combined relevance (seeded shuffle breaks ties) and using each query image
/// at most once per page. Retained pairs keep their input order.
pub fn cap_per_group(pairs: &[CandidatePair], config: &FilterConfig, seed: u64) -> Vec<CandidatePair> {
    let mut by_page: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let s = *slot.entry(p.page_url.as_str()).or_insert_with(|| {
            by_page.push((p.page_url.as_str(), Vec::new()));
            by_page.len() - 1
        });
        by_page[s].1.push(i);
    }

    let mut keep = vec![false; pairs.len()];
    for (url, mut idx) in by_page {
        let mut rng = seed::rng(seed, &["cap", url]);
        idx.shuffle(&mut rng);
        idx.sort_by(|&a, &b| {
            pairs[b]
                .combined_relevance()
                .total_cmp(&pairs[a].combined_relevance())
        });
        let mut used_queries = HashSet::new();
        let mut taken = 0;
        for i in idx {
            if taken == config.max_pairs_per_group {
                break;
            }
            if used_queries.insert(pairs[i].query_id.as_str()) {
                keep[i] = true;
                taken += 1;
            }
        }
    }
    pairs
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect()
}

#[derive(Debug, Clone)]
pub struct MiningOutput {
    pub pairs: Vec<CandidatePair>,
    pub stats: MiningStats,
}

/// Full mining pass over annotated records.
pub fn mine<B: ScoringBackend + ?Sized>(
    annotated: &[AnnotatedRecord],
    backend: &B,
    config: &FilterConfig,
    seed: u64,
) -> Result<MiningOutput> {
    config.validate()?;
    let records: Vec<_> = annotated.iter().map(|a| a.record.clone()).collect();
    let groups = crate::corpus::group_by_page(&records);
    let mut stats = MiningStats {
        records: records.len(),
        groups: groups.len(),
        ..Default::default()
    };
    let cleaned = clean_groups(&groups, annotated, config, backend, seed, &mut stats)?;

    let mut scored = Vec::new();
    for g in &cleaned {
        if g.members.len() < 2 {
            stats.groups_singleton += 1;
            continue;
        }
        scored.extend(score_pairs(g, annotated, backend, &mut stats)?);
    }
    let filtered = filter_pairs(&scored, config);
    stats.pairs_rejected_thresholds = scored.len() - filtered.len();
    let pairs = cap_per_group(&filtered, config, seed);
    stats.pairs_rejected_cap = filtered.len() - pairs.len();
    stats.pairs_retained = pairs.len();
    Ok(MiningOutput { pairs, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::Verdict;
    use crate::corpus::ImageRecord;
    use proptest::prelude::*;

    /// Backend reading embeddings straight out of the feature proxy and a
    /// fixed text table.
    struct TableBackend {
        texts: HashMap<String, Vec<f64>>,
    }

    impl ScoringBackend for TableBackend {
        fn image_embed(&self, r: &ImageRecord) -> Result<Vec<f64>, String> {
            let mut v: Vec<f64> = r.visual.as_slice().iter().map(|&x| f64::from(x)).collect();
            crate::scalar::normalize_in_place(&mut v);
            Ok(v)
        }
        fn text_embed(&self, t: &str) -> Result<Vec<f64>, String> {
            self.texts.get(t).cloned().ok_or_else(|| t.to_string())
        }
    }

    fn ann(id: &str, url: &str, v: Vec<f32>) -> AnnotatedRecord {
        let mut r = ImageRecord::synthetic(id, url, v);
        r.caption = Some(format!("cap-{id}"));
        r.ica_labels = vec![format!("lab-{id}")];
        AnnotatedRecord {
            record: r,
            verdict: Verdict::Keep,
            note: None,
        }
    }

    fn unit_angle(theta: f64) -> Vec<f32> {
        vec![theta.cos() as f32, theta.sin() as f32]
    }

    fn pair(s: (f64, f64, f64, f64)) -> CandidatePair {
        CandidatePair {
            query_id: "q".into(),
            target_id: "t".into(),
            page_url: "u".into(),
            img_img_sim: s.0,
            txt_txt_sim: s.1,
            ica_self_sim: s.2,
            ica_query_sim: s.3,
        }
    }

    #[test]
    fn near_duplicate_is_removed() {
        // cos = 0.99
        let a = ann("a", "u", unit_angle(0.0));
        let b = ann("b", "u", unit_angle(0.99f64.acos()));
        let groups = crate::corpus::group_by_page(&[a.record.clone(), b.record.clone()]);
        let be = TableBackend { texts: HashMap::new() };
        let mut st = MiningStats::default();
        let out = clean_groups(&groups, &[a, b], &FilterConfig::default(), &be, 0, &mut st).unwrap();
        assert_eq!(out[0].members, ["a"]);
        assert_eq!(st.removed_duplicates, 1);
    }

    #[test]
    fn low_resolution_pixel_image_is_removed() {
        let mut small = ann("s", "u", vec![]);
        small.record = ImageRecord::pixels("s", "u", 100, 300, vec![0.5; 100 * 300 * 3]);
        small.record.caption = Some("c".into());
        let groups = crate::corpus::group_by_page(&[small.record.clone()]);
        let mut st = MiningStats::default();
        let out = clean_groups(
            &groups,
            &[small],
            &FilterConfig::default(),
            &HashingBackend::default(),
            0,
            &mut st,
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(st.removed_low_resolution, 1);
        assert_eq!(st.groups_emptied, 1);
    }

    #[test]
    fn identical_groups_keep_exactly_one() {
        let recs = vec![
            ann("a1", "A", unit_angle(0.0)),
            ann("a2", "A", unit_angle(1.0)),
            ann("b1", "B", unit_angle(0.0)),
            ann("b2", "B", unit_angle(1.0)),
        ];
        let groups = crate::corpus::group_by_page(&recs.iter().map(|a| a.record.clone()).collect::<Vec<_>>());
        let be = TableBackend { texts: HashMap::new() };
        for seed in 0..8 {
            let mut st = MiningStats::default();
            let out = clean_groups(&groups, &recs, &FilterConfig::default(), &be, seed, &mut st).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(st.groups_removed_overlap, 1);
        }
    }

    #[test]
    fn three_members_give_six_ordered_pairs() {
        let recs = vec![
            ann("a", "u", unit_angle(0.0)),
            ann("b", "u", unit_angle(0.5)),
            ann("c", "u", unit_angle(1.0)),
        ];
        let mut texts = HashMap::new();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            texts.insert(format!("cap-{id}"), vec![1.0, i as f64]);
            texts.insert(format!("lab-{id}"), vec![0.0, 1.0]);
        }
        let be = TableBackend { texts };
        let g = PageGroup {
            page_url: "u".into(),
            members: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut st = MiningStats::default();
        let pairs = score_pairs(&g, &recs, &be, &mut st).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.query_id != p.target_id));
    }

    #[test]
    fn identical_images_have_unit_similarity() {
        let recs = vec![ann("a", "u", unit_angle(0.3)), ann("b", "u", unit_angle(0.3))];
        let mut texts = HashMap::new();
        texts.insert("cap-a".to_string(), vec![1.0, 0.0]);
        texts.insert("cap-b".to_string(), vec![1.0, 0.0]);
        texts.insert("lab-a".to_string(), vec![0.0, 1.0]);
        texts.insert("lab-b".to_string(), vec![0.0, 1.0]);
        let g = PageGroup { page_url: "u".into(), members: vec!["a".into(), "b".into()] };
        let mut st = MiningStats::default();
        let pairs = score_pairs(&g, &recs, &TableBackend { texts }, &mut st).unwrap();
        assert!((pairs[0].img_img_sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_caption_skips_pair() {
        let mut recs = vec![ann("a", "u", unit_angle(0.0)), ann("b", "u", unit_angle(1.0))];
        recs[1].record.caption = None;
        let mut texts = HashMap::new();
        texts.insert("cap-a".to_string(), vec![1.0, 0.0]);
        texts.insert("lab-a".to_string(), vec![1.0, 0.0]);
        texts.insert("lab-b".to_string(), vec![1.0, 0.0]);
        let g = PageGroup { page_url: "u".into(), members: vec!["a".into(), "b".into()] };
        let mut st = MiningStats::default();
        let pairs = score_pairs(&g, &recs, &TableBackend { texts }, &mut st).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(st.pairs_skipped, 2);
    }

    #[test]
    fn ica_scores_use_the_best_target_label() {
        let mut recs = vec![ann("q", "u", vec![1.0, 0.0]), ann("t", "u", vec![0.0, 1.0])];
        recs[1].record.ica_labels = vec!["weak".into(), "strong".into()];
        let mut texts = HashMap::new();
        texts.insert("cap-q".to_string(), vec![1.0, 0.0]);
        texts.insert("cap-t".to_string(), vec![1.0, 0.0]);
        texts.insert("lab-q".to_string(), vec![1.0, 0.0]);
        texts.insert("weak".to_string(), vec![0.8, 0.6]);
        texts.insert("strong".to_string(), vec![0.6, 0.8]);
        let g = PageGroup { page_url: "u".into(), members: vec!["q".into(), "t".into()] };
        let mut st = MiningStats::default();
        let pairs = score_pairs(&g, &recs, &TableBackend { texts }, &mut st).unwrap();
        let qt = pairs.iter().find(|p| p.query_id == "q").unwrap();
        assert!((qt.ica_self_sim - 0.8).abs() < 1e-12);
        assert!((qt.ica_query_sim - 0.6).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let c = FilterConfig::default();
        assert!(passes(&pair((0.85, 0.95, 0.40, 0.10)), &c));
        assert!(!passes(&pair((0.50, 0.50, 0.40, 0.10)), &c));
        assert!(!passes(&pair((0.85, 0.95, 0.40, 0.30)), &c));
        assert!(passes(&pair((0.50, 0.95, 0.40, 0.10)), &c));
        let and = FilterConfig { relevance_rule: RelevanceRule::And, ..c };
        assert!(!passes(&pair((0.50, 0.95, 0.40, 0.10)), &and));
    }

    #[test]
    fn out_of_range_threshold_is_rejected() {
        let c = FilterConfig { img_img_min: 1.01, ..Default::default() };
        assert!(c.validate().is_err());
    }

    fn group_pairs(n_queries: usize, scores: &[f64]) -> Vec<CandidatePair> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CandidatePair {
                query_id: format!("q{}", i % n_queries),
                target_id: format!("t{i}"),
                page_url: "u".into(),
                img_img_sim: s,
                txt_txt_sim: s,
                ica_self_sim: 0.5,
                ica_query_sim: 0.0,
            })
            .collect()
    }

    #[test]
    fn cap_keeps_three_of_five() {
        let p = group_pairs(5, &[0.9, 0.8, 0.95, 0.85, 0.99]);
        let kept = cap_per_group(&p, &FilterConfig::default(), 1);
        let ids: Vec<_> = kept.iter().map(|p| p.target_id.as_str()).collect();
        assert_eq!(ids, ["t0", "t2", "t4"]);
    }

    #[test]
    fn cap_below_limit_keeps_all() {
        let p = group_pairs(2, &[0.9, 0.8]);
        assert_eq!(cap_per_group(&p, &FilterConfig::default(), 1).len(), 2);
    }

    #[test]
    fn cap_uses_each_query_once() {
        // all five pairs share one query image
        let p = group_pairs(1, &[0.9, 0.8, 0.95, 0.85, 0.99]);
        let kept = cap_per_group(&p, &FilterConfig::default(), 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].target_id, "t4");
    }

    #[test]
    fn cap_ties_are_seeded() {
        let p = group_pairs(8, &[0.9; 8]);
        let c = FilterConfig::default();
        let sel = |s| -> Vec<String> { cap_per_group(&p, &c, s).into_iter().map(|p| p.target_id).collect() };
        assert_eq!(sel(3), sel(3));
        let distinct: HashSet<Vec<String>> = (0..20).map(sel).collect();
        assert!(distinct.len() > 1);
    }

    fn arb_pair() -> impl Strategy<Value = CandidatePair> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(pair)
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(ps in proptest::collection::vec(arb_pair(), 0..50)) {
            let c = FilterConfig::default();
            let once = filter_pairs(&ps, &c);
            prop_assert_eq!(filter_pairs(&once, &c), once);
        }

        #[test]
        fn raising_visual_threshold_never_admits(ps in proptest::collection::vec(arb_pair(), 0..50), bump in 0.0f64..0.18) {
            let lo = FilterConfig::default();
            let hi = FilterConfig { img_img_min: lo.img_img_min + bump, ..lo.clone() };
            for p in &ps {
                prop_assert!(!passes(p, &hi) || passes(p, &lo));
            }
        }
    }
}
