//! Optimization loop: batch sampling, the shared-parameter three-tower
//! forward, split learning rates, temperature clamping and validation-based
//! checkpoint selection.

mod gradcheck;
pub mod loss;

pub use gradcheck::{grad_check, grad_check_coords, CoordCheck, GradCheckReport, REL_FLOOR};
pub use loss::{contrastive_loss, contrastive_loss_with_grad, LossGrads, LossTerms};

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::evalkit::{cir_recall_at_1, Dataset};
use crate::instructgen::Triplet;
use crate::mining::visual_descriptor;
use crate::model::{save_checkpoint, EncodeInput, FusionKind, FusionModel, ParamGroup, Tape, Tensor};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Adds each query image (with empty text) to every denominator.
    pub use_query_negatives: bool,
    /// Lower clamp on the learned temperature.
    pub tau_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_query_negatives: true,
            tau_min: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Learning rate for the fusion layers, pooler and temperature.
    pub lr_new: f64,
    /// Learning rate for the vision and text backbones.
    pub lr_backbone: f64,
    pub optimizer: OptimizerKind,
    /// Validation interval in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub loss: LossConfig,
    pub no_query_negatives: bool,
    pub crossattn: bool,
    pub frozen_backbone: bool,
    /// Never put two triplets whose queries share a page in one batch.
    pub one_per_page: bool,
    /// Record elapsed milliseconds in the metrics log (0 otherwise). Off by
    /// default so reruns produce identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_steps: 1000,
            lr_new: 2e-5,
            lr_backbone: 2e-6,
            optimizer: OptimizerKind::Adam,
            eval_every: 100,
            patience: 5,
            loss: LossConfig::default(),
            no_query_negatives: false,
            crossattn: false,
            frozen_backbone: false,
            one_per_page: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn query_negatives(&self) -> bool {
        self.loss.use_query_negatives && !self.no_query_negatives
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !self.query_negatives() && self.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2 without query negatives"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every must be positive"));
        }
        for (name, v) in [("lr_new", self.lr_new), ("lr_backbone", self.lr_backbone)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("train.{name} must be a finite non-negative number")));
            }
        }
        if !(self.loss.tau_min > 0.0) || !self.loss.tau_min.is_finite() {
            return Err(Error::config("train.loss.tau_min must be positive"));
        }
        if self.lr_backbone > self.lr_new {
            log::warn!(
                "train.lr_backbone = {} exceeds train.lr_new = {}",
                self.lr_backbone,
                self.lr_new
            );
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub tau: f64,
    pub val_r1: Option<f64>,
    pub wall_ms: u64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,train_loss,tau,val_R@1,wall_ms\n");
    for r in rows {
        let val = r.val_r1.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.8},{:.8},{},{}", r.step, r.train_loss, r.tau, val, r.wall_ms);
    }
    s
}

/// Descriptors for one triplet.
#[derive(Debug, Clone)]
pub struct Example {
    pub query: Vec<f32>,
    pub instruction: String,
    pub target: Vec<f32>,
    pub page: String,
}

/// Resolves triplets against the corpus.
pub fn examples(triplets: &[Triplet], corpus: &[ImageRecord]) -> Result<Vec<Example>> {
    let by_id = crate::corpus::index_by_id(corpus);
    let mut cache: HashMap<&str, Vec<f32>> = HashMap::new();
    let mut get = |id: &str| -> Result<(Vec<f32>, String)> {
        let r = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("triplet references unknown image `{id}`")))?;
        let v = cache.entry(r.image_id.as_str()).or_insert_with(|| visual_descriptor(r)).clone();
        Ok((v, r.page_url.clone()))
    };
    triplets
        .iter()
        .map(|t| {
            let (query, page) = get(&t.query_id)?;
            let (target, _) = get(&t.target_id)?;
            Ok(Example {
                query,
                instruction: t.instruction.clone(),
                target,
                page,
            })
        })
        .collect()
}

/// Loss, diagnostics and parameter gradients for one batch. The three
/// towers share one set of parameter nodes.
pub fn batch_loss<S: Scalar>(
    model: &FusionModel<S>,
    batch: &[&Example],
    kind: FusionKind,
    query_negatives: bool,
) -> Result<(LossTerms<S>, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let q_in: Vec<EncodeInput> = batch
        .iter()
        .map(|e| EncodeInput {
            visual: &e.query,
            text: &e.instruction,
        })
        .collect();
    let t_in: Vec<EncodeInput> = batch.iter().map(|e| EncodeInput { visual: &e.target, text: "" }).collect();
    let q = model.forward(&mut tape, &p, &q_in, kind);
    let t = model.forward(&mut tape, &p, &t_in, kind);
    let qn = if query_negatives {
        let n_in: Vec<EncodeInput> = batch.iter().map(|e| EncodeInput { visual: &e.query, text: "" }).collect();
        Some(model.forward(&mut tape, &p, &n_in, kind))
    } else {
        None
    };
    let (root, terms) = tape.contrastive_loss(q, t, qn, model.tau_var(&p))?;
    if !terms.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", terms.loss)));
    }
    let grads = tape.backward(root, &model.params().shapes());
    Ok((terms, grads))
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Optimizer { kind, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update. A zero learning rate leaves that tensor untouched.
    pub fn step(&mut self, model: &mut FusionModel<S>, grads: &[Tensor<S>], lr_of: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let (b1, b2) = (S::from_f64_lossy(BETA1), S::from_f64_lossy(BETA2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let eps = S::from_f64_lossy(ADAM_EPS);
        for (i, g) in grads.iter().enumerate() {
            let lr = lr_of(model.params().get(i).group);
            if lr == 0.0 {
                continue;
            }
            let lr = S::from_f64_lossy(lr);
            let w = model.params_mut().value_mut(i);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gv) in w.data.iter_mut().zip(&g.data) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..g.data.len() {
                        let gv = g.data[k];
                        m.data[k] = b1 * m.data[k] + (S::one() - b1) * gv;
                        v.data[k] = b2 * v.data[k] + (S::one() - b2) * gv * gv;
                        let mh = m.data[k] / c1;
                        let vh = v.data[k] / c2;
                        w.data[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Epoch-shuffled batches without replacement.
struct Sampler<'a> {
    examples: &'a [Example],
    batch: usize,
    one_per_page: bool,
    seed: u64,
    epoch: u64,
    queue: VecDeque<usize>,
}

impl<'a> Sampler<'a> {
    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut seed::rng(self.seed, &["epoch", &self.epoch.to_string()]));
        self.epoch += 1;
        self.queue.extend(order);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        let mut used_pos = Vec::with_capacity(self.batch);
        let mut pages: HashSet<&str> = HashSet::new();
        let mut pos = 0;
        while out.len() < self.batch {
            if pos == self.queue.len() {
                self.refill();
            }
            let idx = self.queue[pos];
            pos += 1;
            // a repeat from the next epoch, or a page already in the batch,
            // waits for a later batch
            if out.contains(&idx) || (self.one_per_page && !pages.insert(self.examples[idx].page.as_str())) {
                continue;
            }
            used_pos.push(pos - 1);
            out.push(idx);
        }
        for p in used_pos.into_iter().rev() {
            self.queue.remove(p);
        }
        out
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput<S> {
    /// Parameters with the best validation score (final parameters when no
    /// validation set is given).
    pub model: FusionModel<S>,
    pub log: Vec<MetricRow>,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub steps: usize,
    pub denominator_terms: usize,
}

fn tau_f64<S: Scalar>(m: &FusionModel<S>) -> f64 {
    m.tau().as_f64()
}

/// Trains `model` on `triplets`. With a checkpoint path, the selected
/// model is written there; on a non-finite loss the last good parameters
/// are written instead and an error is returned.
pub fn train<S: Scalar>(
    triplets: &[Triplet],
    corpus: &[ImageRecord],
    mut model: FusionModel<S>,
    config: &TrainConfig,
    seed: u64,
    validation: Option<&Dataset>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutput<S>> {
    config.validate()?;
    if triplets.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} triplets cannot fill a batch of {}",
            triplets.len(),
            config.batch_size
        )));
    }
    let examples = examples(triplets, corpus)?;
    let used: Vec<&ImageRecord> = {
        let by_id = crate::corpus::index_by_id(corpus);
        triplets
            .iter()
            .flat_map(|t| [by_id[t.query_id.as_str()], by_id[t.target_id.as_str()]])
            .collect()
    };
    model.check_records(used)?;
    if config.one_per_page {
        let pages: HashSet<&str> = examples.iter().map(|e| e.page.as_str()).collect();
        if pages.len() < config.batch_size {
            return Err(Error::config(format!(
                "one_per_page needs at least {} distinct pages, found {}",
                config.batch_size,
                pages.len()
            )));
        }
    }
    if config.crossattn {
        model.set_fusion(FusionKind::CrossAttn);
    }
    let kind = model.config().fusion;
    let negatives = config.query_negatives();
    let tau_min = S::from_f64_lossy(config.loss.tau_min);
    if model.tau() < tau_min {
        model.set_tau(tau_min);
    }
    let lr_of = |g: ParamGroup| match g {
        ParamGroup::Backbone if config.frozen_backbone => 0.0,
        ParamGroup::Backbone => config.lr_backbone,
        ParamGroup::Fusion | ParamGroup::Temperature => config.lr_new,
    };

    let mut opt = Optimizer::new(config.optimizer, &model.params().shapes());
    let mut sampler = Sampler {
        examples: &examples,
        batch: config.batch_size,
        one_per_page: config.one_per_page,
        seed: seed::derive(seed, &["train-sampler"]),
        epoch: 0,
        queue: VecDeque::new(),
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.max_steps);
    let mut best: Option<(f64, usize, FusionModel<S>)> = None;
    let mut stale = 0usize;
    let mut denominator_terms = 0;
    let mut steps = 0;

    for step in 1..=config.max_steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (terms, grads) = match batch_loss(&model, &batch, kind, negatives) {
            Ok(r) => r,
            Err(e) => {
                if let Some(path) = checkpoint {
                    save_checkpoint(path, &model, serde_json::json!({ "step": step - 1, "aborted": true }))?;
                }
                return Err(Error::Numeric(format!("step {step}: {e}")));
            }
        };
        if grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            if let Some(path) = checkpoint {
                save_checkpoint(path, &model, serde_json::json!({ "step": step - 1, "aborted": true }))?;
            }
            return Err(Error::Numeric(format!("step {step}: non-finite gradient")));
        }
        denominator_terms = terms.denominator_terms;
        opt.step(&mut model, &grads, lr_of);
        if model.tau() < tau_min {
            model.set_tau(tau_min);
        }
        steps = step;

        let mut val_r1 = None;
        if let Some(val) = validation {
            if step % config.eval_every == 0 || step == config.max_steps {
                let r1 = cir_recall_at_1(val, &model)?;
                val_r1 = Some(r1);
                if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
                    best = Some((r1, step, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        log.push(MetricRow {
            step,
            train_loss: terms.loss.as_f64(),
            tau: tau_f64(&model),
            val_r1,
            wall_ms: if config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        });
        if config.patience > 0 && stale >= config.patience {
            log::info!("early stop at step {step}");
            break;
        }
    }

    let (best_val, best_step, model) = match best {
        Some((v, s, m)) => (Some(v), s, m),
        None => (None, steps, model),
    };
    if let Some(path) = checkpoint {
        save_checkpoint(
            path,
            &model,
            serde_json::json!({ "step": best_step, "val_R@1": best_val }),
        )?;
    }
    Ok(TrainOutput {
        model,
        log,
        best_step,
        best_val,
        steps,
        denominator_terms,
    })
}
