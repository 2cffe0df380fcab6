//! Exact retrieval index, ranking metrics and task adapters.

mod dataset;
pub mod synth;

pub use dataset::{Dataset, TextItem};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::mining::visual_descriptor;
use crate::model::{EncodeInput, FusionModel};
use crate::scalar::{norm, Scalar};

/// Fixed instruction for sketch-based retrieval.
pub const SBIR_INSTRUCTION: &str = "find a natural image of it";
/// Instruction template for domain transfer; `{domain}` is replaced per case.
pub const DOMAIN_TEMPLATE: &str = "find this object in {domain}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCase {
    /// Query image id (or text id for text-to-image).
    pub query_id: String,
    #[serde(default)]
    pub instruction: String,
    pub gt_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
    /// Target domain keyword for domain transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// Exact cosine index over unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    item_ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    positions: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    dim: usize,
    item_ids: Vec<String>,
}

impl RetrievalIndex {
    /// Builds from precomputed vectors. Rows are normalized; duplicate ids
    /// and zero rows are errors.
    pub fn from_vectors(items: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let Some(dim) = items.first().map(|(_, v)| v.len()) else {
            return Err(Error::invalid("cannot build an empty index"));
        };
        let mut item_ids = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len() * dim);
        let mut positions = HashMap::with_capacity(items.len());
        for (id, mut v) in items {
            if v.len() != dim {
                return Err(Error::invalid(format!("item `{id}` has dimension {}, expected {dim}", v.len())));
            }
            let n = norm(&v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid(format!("item `{id}` has a zero or non-finite embedding")));
            }
            if (n - 1.0).abs() > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            if positions.insert(id.clone(), item_ids.len()).is_some() {
                return Err(Error::invalid(format!("duplicate index item `{id}`")));
            }
            item_ids.push(id);
            vectors.extend(v);
        }
        Ok(RetrievalIndex {
            item_ids,
            dim,
            vectors,
            positions,
        })
    }

    /// Embeds every record with the target encoder.
    pub fn build<S: Scalar>(records: &[&ImageRecord], model: &FusionModel<S>) -> Result<Self> {
        model.check_records(records.iter().copied())?;
        let visuals: Vec<Vec<f32>> = records.iter().map(|r| visual_descriptor(r)).collect();
        let refs: Vec<&[f32]> = visuals.iter().map(|v| v.as_slice()).collect();
        let embs = model.encode_targets(&refs);
        Self::from_vectors(
            records
                .iter()
                .zip(embs)
                .map(|(r, e)| (r.image_id.clone(), e.vector.iter().map(|x| x.as_f32()).collect()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Item ids by descending cosine, ties by ascending id. `subset`
    /// restricts the candidates.
    pub fn rank(&self, query: &[f32], subset: Option<&[String]>) -> Result<Vec<String>> {
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        let candidates: Vec<usize> = match subset {
            None => (0..self.len()).collect(),
            Some(ids) => {
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(ids.len());
                for id in ids {
                    let &p = self
                        .positions
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("subset item `{id}` is not in the index")))?;
                    if seen.insert(p) {
                        out.push(p);
                    }
                }
                out
            }
        };
        let q64: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|i| {
                let s: f64 = self.vector(i).iter().zip(&q64).map(|(&a, b)| a as f64 * b).sum();
                (s, i)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.item_ids[a.1].cmp(&self.item_ids[b.1]))
        });
        Ok(scored.into_iter().map(|(_, i)| self.item_ids[i].clone()).collect())
    }

    /// Writes `index.json` and `index.f32` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = IndexManifest {
            dim: self.dim,
            item_ids: self.item_ids.clone(),
        };
        crate::io::write_atomic(&dir.join("index.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::io::write_atomic(&dir.join("index.f32"), &bytes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: IndexManifest = serde_json::from_str(&crate::io::read_to_string(&dir.join("index.json"))?)?;
        let path = dir.join("index.f32");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * manifest.dim * manifest.item_ids.len() {
            return Err(Error::invalid(format!("{} has the wrong size for the manifest", path.display())));
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let items = manifest
            .item_ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, data[i * manifest.dim..(i + 1) * manifest.dim].to_vec()))
            .collect();
        Self::from_vectors(items)
    }
}

fn gt_set(case: &QueryCase) -> HashSet<&str> {
    case.gt_ids.iter().map(String::as_str).collect()
}

/// 1 when any ground truth is within the top `k`.
pub fn case_recall(ranking: &[String], case: &QueryCase, k: usize) -> f64 {
    let gt = gt_set(case);
    ranking.iter().take(k).any(|id| gt.contains(id.as_str())) as u8 as f64
}

/// Fraction of the top `k` that is relevant (missing positions count as
/// irrelevant).
pub fn case_precision(ranking: &[String], case: &QueryCase, k: usize) -> f64 {
    let gt = gt_set(case);
    ranking.iter().take(k).filter(|id| gt.contains(id.as_str())).count() as f64 / k as f64
}

/// Average precision at `k` normalized by `min(|gt|, k)`.
pub fn case_average_precision(ranking: &[String], case: &QueryCase, k: usize) -> f64 {
    let gt = gt_set(case);
    if gt.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if gt.contains(id.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / gt.len().min(k) as f64
}

fn mean_over(rankings: &[Vec<String>], cases: &[QueryCase], f: impl Fn(&[String], &QueryCase) -> f64) -> f64 {
    assert_eq!(rankings.len(), cases.len(), "one ranking per case");
    if cases.is_empty() {
        return 0.0;
    }
    rankings.iter().zip(cases).map(|(r, c)| f(r, c)).sum::<f64>() / cases.len() as f64
}

pub fn recall_at_k(rankings: &[Vec<String>], cases: &[QueryCase], k: usize) -> f64 {
    assert!(k >= 1);
    mean_over(rankings, cases, |r, c| case_recall(r, c, k))
}

pub fn precision_at_k(rankings: &[Vec<String>], cases: &[QueryCase], k: usize) -> f64 {
    assert!(k >= 1);
    mean_over(rankings, cases, |r, c| case_precision(r, c, k))
}

pub fn map_at_k(rankings: &[Vec<String>], cases: &[QueryCase], k: usize) -> f64 {
    assert!(k >= 1);
    mean_over(rankings, cases, |r, c| case_average_precision(r, c, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Cir,
    DomainTransfer,
    Sbir,
    TextToImage,
    ImageToText,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            format!("unknown task `{s}` (expected cir, domain_transfer, sbir, text_to_image or image_to_text)")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task: Task,
    /// Cutoffs for every metric.
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            task: Task::Cir,
            ks: vec![1, 5, 10, 50],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.ks must be a nonempty list of positive cutoffs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub queries: usize,
    pub index_size: usize,
    /// `R@k`, `R_s@k` (subset cases only), `mAP@k`, `P@k`.
    pub metrics: BTreeMap<String, f64>,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn from_rankings(
        task: Task,
        index_size: usize,
        full: &[Vec<String>],
        subset: &[(usize, Vec<String>)],
        cases: &[QueryCase],
        config: &EvalConfig,
    ) -> Self {
        let mut metrics = BTreeMap::new();
        for &k in &config.ks {
            metrics.insert(format!("R@{k}"), recall_at_k(full, cases, k));
            metrics.insert(format!("mAP@{k}"), map_at_k(full, cases, k));
            metrics.insert(format!("P@{k}"), precision_at_k(full, cases, k));
            if !subset.is_empty() {
                let sub_cases: Vec<QueryCase> = subset.iter().map(|(i, _)| cases[*i].clone()).collect();
                let sub_rank: Vec<Vec<String>> = subset.iter().map(|(_, r)| r.clone()).collect();
                metrics.insert(format!("R_s@{k}"), recall_at_k(&sub_rank, &sub_cases, k));
            }
        }
        MetricsReport {
            task,
            queries: cases.len(),
            index_size,
            metrics,
            config: config.clone(),
        }
    }
}

/// Instruction actually fed to the encoder for a case under `task`.
pub fn effective_instruction(task: Task, case: &QueryCase) -> Result<String> {
    match task {
        Task::Sbir => Ok(SBIR_INSTRUCTION.to_string()),
        Task::DomainTransfer => {
            let d = case
                .domain
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("domain_transfer case `{}` has no domain", case.query_id)))?;
            Ok(DOMAIN_TEMPLATE.replace("{domain}", d))
        }
        _ => Ok(case.instruction.clone()),
    }
}

/// Checks ids and subset containment before any ranking happens.
fn check_schema(task: Task, dataset: &Dataset) -> Result<()> {
    let images = dataset.records_by_id();
    let texts: HashSet<&str> = dataset.texts.iter().map(|t| t.id.as_str()).collect();
    let index: HashSet<&str> = dataset.index_ids.iter().map(String::as_str).collect();
    if index.is_empty() {
        return Err(Error::invalid("dataset has an empty index"));
    }
    if index.len() != dataset.index_ids.len() {
        return Err(Error::invalid("dataset index lists an id twice"));
    }
    let (query_is_text, index_is_text) = match task {
        Task::TextToImage => (true, false),
        Task::ImageToText => (false, true),
        _ => (false, false),
    };
    for id in &dataset.index_ids {
        let ok = if index_is_text { texts.contains(id.as_str()) } else { images.contains_key(id.as_str()) };
        if !ok {
            return Err(Error::invalid(format!("index item `{id}` is not defined for task {task:?}")));
        }
    }
    for c in &dataset.cases {
        let ok = if query_is_text { texts.contains(c.query_id.as_str()) } else { images.contains_key(c.query_id.as_str()) };
        if !ok {
            return Err(Error::invalid(format!("query `{}` is not defined for task {task:?}", c.query_id)));
        }
        if c.gt_ids.is_empty() {
            return Err(Error::invalid(format!("case `{}` has no ground truth", c.query_id)));
        }
        for g in &c.gt_ids {
            if !index.contains(g.as_str()) {
                return Err(Error::invalid(format!("ground truth `{g}` of `{}` is not in the index", c.query_id)));
            }
        }
        if let Some(sub) = &c.subset_ids {
            for s in sub {
                if !index.contains(s.as_str()) {
                    return Err(Error::invalid(format!("subset item `{s}` of `{}` is not in the index", c.query_id)));
                }
            }
            if c.gt_ids.iter().any(|g| !sub.contains(g)) {
                return Err(Error::invalid(format!("case `{}` has a ground truth outside its subset", c.query_id)));
            }
        }
        if task == Task::DomainTransfer && c.domain.is_none() {
            return Err(Error::invalid(format!("domain_transfer case `{}` has no domain", c.query_id)));
        }
    }
    Ok(())
}

/// Rankings for every case (full index) and for subset cases.
pub struct Rankings {
    pub full: Vec<Vec<String>>,
    pub subset: Vec<(usize, Vec<String>)>,
}

/// Query embeddings for every case under `task`.
fn query_vectors<S: Scalar>(task: Task, dataset: &Dataset, model: &FusionModel<S>) -> Result<Vec<Vec<f32>>> {
    let to32 = |v: Vec<S>| v.into_iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
    match task {
        Task::TextToImage => {
            let texts = dataset.texts_by_id();
            let qs: Vec<&str> = dataset.cases.iter().map(|c| texts[c.query_id.as_str()]).collect();
            Ok(model.backbone_texts(&qs).into_iter().map(to32).collect())
        }
        Task::ImageToText => {
            let images = dataset.records_by_id();
            let vs: Vec<Vec<f32>> = dataset.cases.iter().map(|c| visual_descriptor(images[c.query_id.as_str()])).collect();
            let refs: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
            Ok(model.backbone_images(&refs).into_iter().map(to32).collect())
        }
        _ => {
            let images = dataset.records_by_id();
            let vs: Vec<Vec<f32>> = dataset.cases.iter().map(|c| visual_descriptor(images[c.query_id.as_str()])).collect();
            let texts: Vec<String> = dataset
                .cases
                .iter()
                .map(|c| effective_instruction(task, c))
                .collect::<Result<_>>()?;
            let inputs: Vec<EncodeInput> = vs
                .iter()
                .zip(&texts)
                .map(|(v, t)| EncodeInput { visual: v, text: t })
                .collect();
            Ok(model.encode_batch(&inputs).into_iter().map(|e| to32(e.vector)).collect())
        }
    }
}

/// Index for `task`: fusion target embeddings, or backbone embeddings for
/// the cross-modal tasks.
pub fn task_index<S: Scalar>(task: Task, dataset: &Dataset, model: &FusionModel<S>) -> Result<RetrievalIndex> {
    let to32 = |v: Vec<S>| v.into_iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
    match task {
        Task::ImageToText => {
            let texts = dataset.texts_by_id();
            let ts: Vec<&str> = dataset.index_ids.iter().map(|id| texts[id.as_str()]).collect();
            let embs = model.backbone_texts(&ts);
            RetrievalIndex::from_vectors(dataset.index_ids.iter().cloned().zip(embs.into_iter().map(to32)).collect())
        }
        Task::TextToImage => {
            let images = dataset.records_by_id();
            let vs: Vec<Vec<f32>> = dataset.index_ids.iter().map(|id| visual_descriptor(images[id.as_str()])).collect();
            let refs: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
            let embs = model.backbone_images(&refs);
            RetrievalIndex::from_vectors(dataset.index_ids.iter().cloned().zip(embs.into_iter().map(to32)).collect())
        }
        _ => {
            let images = dataset.records_by_id();
            let recs: Vec<&ImageRecord> = dataset.index_ids.iter().map(|id| images[id.as_str()]).collect();
            RetrievalIndex::build(&recs, model)
        }
    }
}

/// Ranks every case of `dataset` under the task's instruction convention.
pub fn rank_dataset<S: Scalar>(task: Task, dataset: &Dataset, model: &FusionModel<S>) -> Result<(RetrievalIndex, Rankings)> {
    check_schema(task, dataset)?;
    if task != Task::TextToImage {
        let images = dataset.records_by_id();
        model.check_records(images.values().copied())?;
    }
    let index = task_index(task, dataset, model)?;
    let queries = query_vectors(task, dataset, model)?;
    let mut full = Vec::with_capacity(queries.len());
    let mut subset = Vec::new();
    for (i, (q, c)) in queries.iter().zip(&dataset.cases).enumerate() {
        full.push(index.rank(q, None)?);
        if let Some(s) = &c.subset_ids {
            subset.push((i, index.rank(q, Some(s))?));
        }
    }
    Ok((index, Rankings { full, subset }))
}

/// Runs one evaluation protocol end to end.
pub fn run_task<S: Scalar>(dataset: &Dataset, model: &FusionModel<S>, config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let (index, r) = rank_dataset(config.task, dataset, model)?;
    Ok(MetricsReport::from_rankings(config.task, index.len(), &r.full, &r.subset, &dataset.cases, config))
}

/// Fraction of cases whose query image is the top-1 result when every query
/// image is added to the index.
pub fn self_retrieval_rate<S: Scalar>(dataset: &Dataset, model: &FusionModel<S>) -> Result<f64> {
    let mut ids = dataset.index_ids.clone();
    let mut present: HashSet<String> = ids.iter().cloned().collect();
    for c in &dataset.cases {
        if present.insert(c.query_id.clone()) {
            ids.push(c.query_id.clone());
        }
    }
    let augmented = Dataset {
        index_ids: ids,
        ..dataset.clone()
    };
    let (_, r) = rank_dataset(Task::Cir, &augmented, model)?;
    let hits = r
        .full
        .iter()
        .zip(&dataset.cases)
        .filter(|(rank, c)| rank.first() == Some(&c.query_id))
        .count();
    Ok(hits as f64 / dataset.cases.len().max(1) as f64)
}

/// R@1 on an image-query dataset; the training validation score.
pub fn cir_recall_at_1<S: Scalar>(dataset: &Dataset, model: &FusionModel<S>) -> Result<f64> {
    let (_, r) = rank_dataset(Task::Cir, dataset, model)?;
    Ok(recall_at_k(&r.full, &dataset.cases, 1))
}

#[cfg(test)]
mod tests;
