//! Pipeline commands. Each reads its inputs from the run configuration and
//! writes every output atomically.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{AnnotatorChoice, BackendChoice, ClientChoice, InstructMode, RunConfig};
use crate::annotate::{expand_metadata, AnnotatedRecord, Annotator, FileAnnotator, MockAnnotator};
use crate::corpus::{corpus_to_jsonl, ingest_str, CorpusMode, ImageRecord};
use crate::error::{Error, Result};
use crate::evalkit::synth;
use crate::evalkit::{self, Dataset, Task};
use crate::instructgen::{
    self, CommandClient, GenerationOutput, MockClient, PromptAssets, ReplayClient, TextGenClient, Triplet,
};
use crate::io;
use crate::mining::{
    self, CandidatePair, EmbeddingFileBackend, HashingBackend, MiningStats, ScoringBackend, POOL_GRID,
};
use crate::model::{load_checkpoint, FusionModel, ModelConfig};
use crate::train::{self, metrics_csv};

fn unset(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

/// Fails listing every required input that is unset or missing.
pub fn require_inputs(inputs: &[(&str, &Path)]) -> Result<()> {
    let missing: Vec<String> = inputs
        .iter()
        .filter(|(_, p)| unset(p) || !p.exists())
        .map(|(k, p)| {
            if unset(p) {
                format!("paths.{k} is not set")
            } else {
                format!("paths.{k} = {} does not exist", p.display())
            }
        })
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!("missing input(s): {}", missing.join("; "))))
    }
}

fn require_output(key: &str, p: &Path) -> Result<()> {
    if unset(p) {
        return Err(Error::config(format!("paths.{key} must be set")));
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Reads the corpus, logging and skipping malformed lines.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Vec<ImageRecord>, CorpusMode)> {
    let text = io::read_to_string(&cfg.paths.corpus)?;
    let mode = cfg.corpus_mode(&text);
    let ingested = ingest_str(&text, mode);
    for e in &ingested.errors {
        log::warn!("{}:{}: skipped: {}", cfg.paths.corpus.display(), e.line, e.message);
    }
    if ingested.records.is_empty() {
        return Err(Error::invalid(format!("{} holds no usable records", cfg.paths.corpus.display())));
    }
    Ok((ingested.records, mode))
}

fn uses_embedding_file(cfg: &RunConfig) -> bool {
    match cfg.scoring.backend {
        BackendChoice::File => true,
        BackendChoice::Hashing => false,
        BackendChoice::Auto => !unset(&cfg.paths.embeddings),
    }
}

fn annotator(cfg: &RunConfig) -> Result<Box<dyn Annotator>> {
    Ok(match cfg.annotate.annotator {
        AnnotatorChoice::File => Box::new(FileAnnotator::load(&cfg.paths.annotations)?),
        AnnotatorChoice::Mock => Box::new(MockAnnotator {
            buckets: cfg.annotate.buckets,
            blocked_terms: cfg.annotate.blocked_terms.clone(),
        }),
    })
}

fn annotation_inputs(cfg: &RunConfig) -> Vec<(&'static str, &Path)> {
    let mut v: Vec<(&str, &Path)> = vec![("corpus", &cfg.paths.corpus)];
    if cfg.annotate.annotator == AnnotatorChoice::File {
        v.push(("annotations", &cfg.paths.annotations));
    }
    v
}

/// Corpus annotated with the configured annotator.
pub fn annotated_corpus(cfg: &RunConfig) -> Result<(Vec<AnnotatedRecord>, CorpusMode)> {
    let (records, mode) = load_corpus(cfg)?;
    Ok((expand_metadata(&records, annotator(cfg)?.as_ref()), mode))
}

pub struct MineSummary {
    pub pairs: Vec<CandidatePair>,
    pub stats: MiningStats,
}

pub fn cmd_mine(cfg: &RunConfig) -> Result<MineSummary> {
    let mut inputs = annotation_inputs(cfg);
    let file_backend = uses_embedding_file(cfg);
    if file_backend {
        inputs.push(("embeddings", &cfg.paths.embeddings));
    }
    require_inputs(&inputs)?;
    require_output("pairs", &cfg.paths.pairs)?;
    require_output("mining_stats", &cfg.paths.mining_stats)?;

    let (annotated, _) = annotated_corpus(cfg)?;
    let backend: Box<dyn ScoringBackend> = if file_backend {
        Box::new(EmbeddingFileBackend::load(&cfg.paths.embeddings)?)
    } else {
        Box::new(HashingBackend {
            dim: cfg.scoring.dim,
            seed: cfg.seed,
        })
    };
    let out = mining::mine(&annotated, backend.as_ref(), &cfg.filter, cfg.seed)?;
    io::write_jsonl(&cfg.paths.pairs, &out.pairs)?;
    io::write_atomic(&cfg.paths.mining_stats, &json_bytes(&out.stats)?)?;
    Ok(MineSummary {
        pairs: out.pairs,
        stats: out.stats,
    })
}

fn prompt_assets(cfg: &RunConfig) -> Result<PromptAssets> {
    if unset(&cfg.paths.prompt_assets) {
        Ok(PromptAssets::builtin())
    } else {
        PromptAssets::parse(&io::read_to_string(&cfg.paths.prompt_assets)?)
    }
}

fn client(cfg: &RunConfig) -> Result<Box<dyn TextGenClient>> {
    Ok(match cfg.instruct.client {
        ClientChoice::Mock => Box::new(MockClient),
        ClientChoice::Replay => Box::new(ReplayClient::load(&cfg.paths.replay)?),
        ClientChoice::Command => Box::new(CommandClient::new(cfg.instruct.command.clone())?),
    })
}

/// Runs the configured generation mode.
pub fn generate(
    mode: InstructMode,
    pairs: &[CandidatePair],
    annotated: &[AnnotatedRecord],
    client: &dyn TextGenClient,
    assets: &PromptAssets,
    seed: u64,
) -> GenerationOutput {
    match mode {
        InstructMode::TemplateFree => instructgen::generate_template_free(pairs, annotated, client, assets, seed),
        InstructMode::TemplateBased => instructgen::generate_template_based(pairs, annotated, client, assets, seed),
    }
}

pub fn cmd_instruct(cfg: &RunConfig) -> Result<GenerationOutput> {
    let mut inputs = annotation_inputs(cfg);
    inputs.push(("pairs", &cfg.paths.pairs));
    if cfg.instruct.client == ClientChoice::Replay {
        inputs.push(("replay", &cfg.paths.replay));
    }
    if !unset(&cfg.paths.prompt_assets) {
        inputs.push(("prompt_assets", &cfg.paths.prompt_assets));
    }
    require_inputs(&inputs)?;
    require_output("triplets", &cfg.paths.triplets)?;

    let (annotated, _) = annotated_corpus(cfg)?;
    let pairs: Vec<CandidatePair> = io::read_jsonl(&cfg.paths.pairs)?;
    let out = generate(
        cfg.instruct.mode,
        &pairs,
        &annotated,
        client(cfg)?.as_ref(),
        &prompt_assets(cfg)?,
        cfg.seed,
    );
    io::write_jsonl(&cfg.paths.triplets, &out.triplets)?;
    if !unset(&cfg.paths.instruct_stats) {
        io::write_atomic(&cfg.paths.instruct_stats, &json_bytes(&out.stats)?)?;
    }
    Ok(out)
}

/// Model configuration adapted to the corpus: pixel corpora use the pooled
/// descriptor, feature corpora must match `model.visual_dim`.
pub fn model_config_for(cfg: &RunConfig, mode: CorpusMode, records: &[ImageRecord]) -> Result<ModelConfig> {
    let mut mc = cfg.model.clone();
    mc.input = mode;
    match mode {
        CorpusMode::Pixel => mc.visual_dim = POOL_GRID * POOL_GRID * crate::corpus::CHANNELS,
        CorpusMode::Synthetic => {
            if let Some(r) = records.iter().find(|r| r.visual.as_slice().len() != mc.visual_dim) {
                return Err(Error::config(format!(
                    "model.visual_dim = {} but record `{}` has {} features",
                    mc.visual_dim,
                    r.image_id,
                    r.visual.as_slice().len()
                )));
            }
        }
    }
    mc.validate()?;
    Ok(mc)
}

pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_val: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut inputs: Vec<(&str, &Path)> = vec![("corpus", &cfg.paths.corpus), ("triplets", &cfg.paths.triplets)];
    if !unset(&cfg.paths.val_dataset) {
        inputs.push(("val_dataset", &cfg.paths.val_dataset));
    }
    require_inputs(&inputs)?;
    require_output("checkpoint", &cfg.paths.checkpoint)?;

    let (records, mode) = load_corpus(cfg)?;
    let triplets: Vec<Triplet> = io::read_jsonl(&cfg.paths.triplets)?;
    let val = if unset(&cfg.paths.val_dataset) {
        None
    } else {
        Some(Dataset::load(&cfg.paths.val_dataset)?)
    };
    let model = FusionModel::<f32>::new(model_config_for(cfg, mode, &records)?, cfg.seed)?;
    let out = train::train(
        &triplets,
        &records,
        model,
        &cfg.train,
        cfg.seed,
        val.as_ref(),
        Some(&cfg.paths.checkpoint),
    )?;
    if !unset(&cfg.paths.metrics) {
        io::write_atomic(&cfg.paths.metrics, metrics_csv(&out.log).as_bytes())?;
    }
    Ok(TrainSummary {
        steps: out.steps,
        best_step: out.best_step,
        best_val: out.best_val,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<evalkit::MetricsReport> {
    require_inputs(&[
        ("checkpoint", &cfg.paths.checkpoint),
        ("eval_dataset", &cfg.paths.eval_dataset),
    ])?;
    require_output("report", &cfg.paths.report)?;
    let (model, _) = load_checkpoint::<f32>(&cfg.paths.checkpoint)?;
    let dataset = Dataset::load(&cfg.paths.eval_dataset)?;
    let report = evalkit::run_task(&dataset, &model, &cfg.eval)?;
    if !unset(&cfg.paths.index_snapshot) {
        let index = evalkit::task_index(cfg.eval.task, &dataset, &model)?;
        index.save(&cfg.paths.index_snapshot)?;
    }
    io::write_atomic(&cfg.paths.report, &json_bytes(&report)?)?;
    Ok(report)
}

/// Writes the planted-relation benchmark: training corpus and triplets,
/// the validation split and an evaluation dataset for `eval.task`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<synth::SynthBenchmark> {
    for (k, p) in [
        ("corpus", &cfg.paths.corpus),
        ("triplets", &cfg.paths.triplets),
        ("eval_dataset", &cfg.paths.eval_dataset),
    ] {
        require_output(k, p)?;
    }
    let bench = synth::generate(&cfg.synth, cfg.seed)?;
    io::write_atomic(&cfg.paths.corpus, &corpus_to_jsonl(&bench.train_corpus)?)?;
    io::write_jsonl(&cfg.paths.triplets, &bench.triplets)?;
    if !unset(&cfg.paths.val_dataset) {
        bench.val.save(&cfg.paths.val_dataset)?;
    }
    match cfg.eval.task {
        Task::Cir => bench.test.save(&cfg.paths.eval_dataset)?,
        task => synth::task_dataset(&cfg.synth, cfg.seed, task)?.save(&cfg.paths.eval_dataset)?,
    }
    Ok(bench)
}

pub fn cmd_demo(dir: &Path) -> Result<PathBuf> {
    crate::demo::write(dir)?;
    Ok(dir.join("demo.toml"))
}
