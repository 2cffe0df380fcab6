//! Train/eval matrices for the ablations and the data-scaling curve.
//! Every run is keyed by (variant, seed, budget) and memoized in a
//! [`RunCache`], so experiments sharing a configuration train it once.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::commands::{self, model_config_for};
use super::config::{DataSource, InstructMode, RunConfig};
use super::plot::{self, PlotSpec};
use crate::annotate::{AnnotatedRecord, Verdict};
use crate::corpus::{CorpusMode, ImageRecord};
use crate::error::{Error, Result};
use crate::evalkit::{self, synth, Dataset, EvalConfig, Task};
use crate::instructgen::{MockClient, PromptAssets, Triplet};
use crate::io;
use crate::mining::CandidatePair;
use crate::model::FusionModel;
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    DataScaling,
    QueryNegAblation,
    ArchAblation,
    InstructionAblation,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::DataScaling => "data_scaling",
            ExperimentName::QueryNegAblation => "query_neg_ablation",
            ExperimentName::ArchAblation => "arch_ablation",
            ExperimentName::InstructionAblation => "instruction_ablation",
        }
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            format!(
                "unknown experiment `{s}` (expected data_scaling, query_neg_ablation, arch_ablation or instruction_ablation)"
            )
        })
    }
}

/// Training variant applied on top of `[train]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Main,
    NoQueryNegatives,
    Crossattn,
    Frozen,
    TemplateFree,
    TemplateBased,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::NoQueryNegatives => "no_query_negatives",
            Variant::Crossattn => "crossattn",
            Variant::Frozen => "frozen",
            Variant::TemplateFree => "template_free",
            Variant::TemplateBased => "template_based",
        }
    }

    fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.no_query_negatives = self == Variant::NoQueryNegatives;
        c.crossattn = self == Variant::Crossattn;
        c.frozen_backbone = self == Variant::Frozen;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunKey {
    pub variant: Variant,
    pub seed: u64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Rank-1 self-retrieval with query images inserted into the index.
    pub self_r1: f64,
    pub best_step: usize,
    pub steps: usize,
}

/// Training data and the splits used for selection and scoring.
pub struct RunData {
    pub corpus: Vec<ImageRecord>,
    pub mode: CorpusMode,
    pub triplets: Vec<Triplet>,
    /// Source pairs for instruction generation.
    pub pairs: Vec<(String, String)>,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

#[derive(Default)]
pub struct RunCache {
    runs: HashMap<RunKey, RunResult>,
    data: HashMap<u64, std::rc::Rc<RunData>>,
}

impl RunCache {
    pub fn get(&self, key: &RunKey) -> Option<&RunResult> {
        self.runs.get(key)
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Largest number of triplets any run of this configuration draws.
fn needed_triplets(cfg: &RunConfig) -> usize {
    cfg.experiment.budgets.iter().copied().max().unwrap_or(0).max(cfg.synth.triplets)
}

fn load_data(cfg: &RunConfig, seed: u64) -> Result<RunData> {
    match cfg.experiment.source {
        DataSource::Synthetic => {
            let sc = synth::SynthConfig {
                triplets: needed_triplets(cfg),
                ..cfg.synth.clone()
            };
            let b = synth::generate(&sc, seed)?;
            Ok(RunData {
                corpus: b.train_corpus,
                mode: CorpusMode::Synthetic,
                triplets: b.triplets,
                pairs: b.pairs,
                val: Some(b.val),
                test: b.test,
            })
        }
        DataSource::Files => {
            let p = &cfg.paths;
            let mut inputs = vec![
                ("corpus", p.corpus.as_path()),
                ("triplets", p.triplets.as_path()),
                ("eval_dataset", p.eval_dataset.as_path()),
            ];
            if !p.val_dataset.as_os_str().is_empty() {
                inputs.push(("val_dataset", p.val_dataset.as_path()));
            }
            commands::require_inputs(&inputs)?;
            let (corpus, mode) = commands::load_corpus(cfg)?;
            let triplets: Vec<Triplet> = io::read_jsonl(&p.triplets)?;
            let pairs = triplets.iter().map(|t| (t.query_id.clone(), t.target_id.clone())).collect();
            let val = if p.val_dataset.as_os_str().is_empty() {
                None
            } else {
                Some(Dataset::load(&p.val_dataset)?)
            };
            Ok(RunData {
                corpus,
                mode,
                triplets,
                pairs,
                val,
                test: Dataset::load(&p.eval_dataset)?,
            })
        }
    }
}

/// Records of the training corpus as kept annotations; the synthetic
/// renderer already fills labels and captions.
fn as_annotated(corpus: &[ImageRecord]) -> Vec<AnnotatedRecord> {
    corpus
        .iter()
        .map(|r| AnnotatedRecord {
            record: r.clone(),
            verdict: Verdict::Keep,
            note: None,
        })
        .collect()
}

fn generated_triplets(data: &RunData, budget: usize, mode: InstructMode, seed: u64) -> Vec<Triplet> {
    let by_id = crate::corpus::index_by_id(&data.corpus);
    let pairs: Vec<CandidatePair> = data.pairs[..budget]
        .iter()
        .map(|(q, t)| CandidatePair {
            query_id: q.clone(),
            target_id: t.clone(),
            page_url: by_id.get(q.as_str()).map(|r| r.page_url.clone()).unwrap_or_default(),
            img_img_sim: 0.0,
            txt_txt_sim: 0.0,
            ica_self_sim: 0.0,
            ica_query_sim: 0.0,
        })
        .collect();
    let annotated = as_annotated(&data.corpus);
    commands::generate(mode, &pairs, &annotated, &MockClient, &PromptAssets::builtin(), seed).triplets
}

/// Trains and scores one configuration.
pub fn run_one(cfg: &RunConfig, data: &RunData, key: RunKey) -> Result<RunResult> {
    if data.triplets.len() < key.budget {
        return Err(Error::invalid(format!(
            "budget {} needs {} triplets but only {} are available",
            key.budget,
            key.budget,
            data.triplets.len()
        )));
    }
    let triplets = match key.variant {
        Variant::TemplateFree => generated_triplets(data, key.budget, InstructMode::TemplateFree, key.seed),
        Variant::TemplateBased => generated_triplets(data, key.budget, InstructMode::TemplateBased, key.seed),
        _ => data.triplets[..key.budget].to_vec(),
    };
    let model = FusionModel::<f32>::new(model_config_for(cfg, data.mode, &data.corpus)?, key.seed)?;
    let tc = key.variant.train_config(&cfg.train);
    let out = train::train(&triplets, &data.corpus, model, &tc, key.seed, data.val.as_ref(), None)?;
    let eval = EvalConfig {
        task: Task::Cir,
        ks: vec![1, 5, 10],
    };
    let report = evalkit::run_task(&data.test, &out.model, &eval)?;
    let metric = |k: &str| report.get(k).unwrap_or(f64::NAN);
    Ok(RunResult {
        r1: metric("R@1"),
        r5: metric("R@5"),
        r10: metric("R@10"),
        self_r1: evalkit::self_retrieval_rate(&data.test, &out.model)?,
        best_step: out.best_step,
        steps: out.steps,
    })
}

/// Cached [`run_one`].
pub fn run_cached(cfg: &RunConfig, cache: &mut RunCache, key: RunKey) -> Result<RunResult> {
    if let Some(r) = cache.runs.get(&key) {
        return Ok(r.clone());
    }
    let data = match cache.data.get(&key.seed) {
        Some(d) => d.clone(),
        None => {
            let d = std::rc::Rc::new(load_data(cfg, key.seed)?);
            cache.data.insert(key.seed, d.clone());
            d
        }
    };
    log::info!("training {} seed {} budget {}", key.variant.as_str(), key.seed, key.budget);
    let r = run_one(cfg, &data, key)?;
    cache.runs.insert(key, r.clone());
    Ok(r)
}

/// Runs planned by an experiment, in output order.
pub fn plan(cfg: &RunConfig, name: ExperimentName, available: Option<usize>) -> Result<Vec<RunKey>> {
    let seeds = &cfg.experiment.seeds;
    let full = match cfg.experiment.source {
        DataSource::Synthetic => cfg.synth.triplets,
        DataSource::Files => available.unwrap_or(0),
    };
    let keys = |variants: &[Variant], budgets: &[usize]| -> Vec<RunKey> {
        let mut v = Vec::new();
        for &variant in variants {
            for &budget in budgets {
                for &seed in seeds {
                    v.push(RunKey { variant, seed, budget });
                }
            }
        }
        v
    };
    let out = match name {
        ExperimentName::DataScaling => keys(&[Variant::Main], &cfg.experiment.budgets),
        ExperimentName::QueryNegAblation => keys(&[Variant::Main, Variant::NoQueryNegatives], &[full]),
        ExperimentName::ArchAblation => keys(&[Variant::Main, Variant::Crossattn, Variant::Frozen], &[full]),
        ExperimentName::InstructionAblation => keys(&[Variant::TemplateFree, Variant::TemplateBased], &[full]),
    };
    if let Some(n) = available {
        if let Some(k) = out.iter().max_by_key(|k| k.budget).filter(|k| k.budget > n) {
            return Err(Error::invalid(format!(
                "{} needs {} triplets for its largest run but only {n} are available",
                name.as_str(),
                k.budget
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub budget: usize,
    #[serde(rename = "R@1")]
    pub r1: String,
    #[serde(rename = "R@5")]
    pub r5: String,
    #[serde(rename = "R@10")]
    pub r10: String,
    #[serde(rename = "self_R@1")]
    pub self_r1: String,
    pub best_step: usize,
    pub steps: usize,
}

pub struct ExperimentOutput {
    pub rows: Vec<(RunKey, RunResult)>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn csv_bytes(name: ExperimentName, rows: &[(RunKey, RunResult)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (k, r) in rows {
        w.serialize(ResultRow {
            experiment: name.as_str().into(),
            variant: k.variant.as_str().into(),
            seed: k.seed,
            budget: k.budget,
            r1: format!("{:.6}", r.r1),
            r5: format!("{:.6}", r.r5),
            r10: format!("{:.6}", r.r10),
            self_r1: format!("{:.6}", r.self_r1),
            best_step: r.best_step,
            steps: r.steps,
        })
        .map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

/// Runs `name`, writing `<out_dir>/<name>.csv` and its SVG plot(s).
pub fn run_experiment(cfg: &RunConfig, name: ExperimentName, cache: &mut RunCache) -> Result<ExperimentOutput> {
    let available = match cfg.experiment.source {
        DataSource::Synthetic => None,
        DataSource::Files => {
            commands::require_inputs(&[("triplets", cfg.paths.triplets.as_path())])?;
            Some(io::read_jsonl::<Triplet>(&cfg.paths.triplets)?.len())
        }
    };
    let keys = plan(cfg, name, available)?;
    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        rows.push((key, run_cached(cfg, cache, key)?));
    }

    let dir = &cfg.paths.out_dir;
    let csv_path = dir.join(format!("{}.csv", name.as_str()));
    let csv_data = csv_bytes(name, &rows)?;
    io::write_atomic(&csv_path, &csv_data)?;
    let csv_text = String::from_utf8(csv_data).expect("csv is utf-8");

    let mut charts = vec![("", "R@1")];
    if name == ExperimentName::QueryNegAblation {
        charts.push(("_self", "self_R@1"));
    }
    let mut plots = Vec::new();
    for (suffix, y) in charts {
        let spec = match name {
            ExperimentName::DataScaling => PlotSpec {
                title: "CIR R@1 vs. training triplets",
                x: "budget",
                y,
                group: "variant",
                log_x: true,
            },
            _ => PlotSpec {
                title: name.as_str(),
                x: "variant",
                y,
                group: "",
                log_x: false,
            },
        };
        let series = plot::aggregate(&csv_text, &spec)?;
        let path = dir.join(format!("{}{suffix}.svg", name.as_str()));
        io::write_atomic(&path, plot::render_svg(&series, &spec).as_bytes())?;
        plots.push(path);
    }
    Ok(ExperimentOutput {
        rows,
        csv: csv_path,
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = crate::model::ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            vocab: 64,
            ..Default::default()
        };
        c.synth.feature_dim = 32;
        c.synth.triplets = 40;
        c.synth.val_queries = 10;
        c.synth.test_queries = 10;
        c.train.batch_size = 8;
        c.train.max_steps = 3;
        c.train.eval_every = 3;
        c.experiment.budgets = vec![16, 40];
        c.experiment.seeds = vec![1];
        c
    }

    #[test]
    fn plans_have_the_expected_shape() {
        let c = tiny();
        let arch = plan(&c, ExperimentName::ArchAblation, None).unwrap();
        let v: Vec<_> = arch.iter().map(|k| k.variant).collect();
        assert_eq!(v, [Variant::Main, Variant::Crossattn, Variant::Frozen]);
        let q = plan(&c, ExperimentName::QueryNegAblation, None).unwrap();
        assert_eq!(q.len(), 2);
        assert!(q.iter().all(|k| k.seed == q[0].seed && k.budget == q[0].budget));
        let s = plan(&c, ExperimentName::DataScaling, None).unwrap();
        assert_eq!(s.iter().map(|k| k.budget).collect::<Vec<_>>(), [16, 40]);
    }

    #[test]
    fn insufficient_triplets_names_the_count() {
        let e = plan(&tiny(), ExperimentName::DataScaling, Some(20)).unwrap_err();
        assert!(e.to_string().contains("needs 40 triplets"), "{e}");
    }

    #[test]
    fn variants_toggle_only_their_flag() {
        let base = TrainConfig::default();
        assert_eq!(Variant::Main.train_config(&base), base);
        let f = Variant::Frozen.train_config(&base);
        assert!(f.frozen_backbone && !f.crossattn && !f.no_query_negatives);
    }

    #[test]
    fn experiments_share_cached_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.paths.out_dir = dir.path().to_path_buf();
        let mut cache = RunCache::default();
        let out = run_experiment(&c, ExperimentName::QueryNegAblation, &mut cache).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(cache.len(), 2);
        run_experiment(&c, ExperimentName::ArchAblation, &mut cache).unwrap();
        assert_eq!(cache.len(), 4);
        assert!(out.csv.exists() && out.plots.iter().all(|p| p.exists()));
        let text = std::fs::read_to_string(&out.csv).unwrap();
        assert!(text.starts_with("experiment,variant,seed,budget,R@1,R@5,R@10,self_R@1,best_step,steps\n"));
    }

    #[test]
    fn instruction_ablation_trains_on_generated_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.paths.out_dir = dir.path().to_path_buf();
        let out = run_experiment(&c, ExperimentName::InstructionAblation, &mut RunCache::default()).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|(_, r)| r.r1.is_finite()));
    }
}
