//! Shared-parameter fusion encoder: toy vision and text backbones, a
//! length-2 sequence through pre-norm self-attention blocks, and a
//! single-query multi-head attention pooler producing one embedding.

mod checkpoint;
mod params;
mod tape;
mod tensor;
mod tokenizer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointManifest};
pub use params::{Param, ParamGroup, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use tokenizer::{Tokenizer, EMPTY_TOKEN};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusMode, ImageRecord};
use crate::error::{Error, Result};
use crate::mining::{visual_descriptor, POOL_GRID};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Both slots attend to both slots in every layer.
    #[default]
    SelfAttn,
    /// Only the text slot is updated, attending to `[image, text]`.
    CrossAttn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width shared by backbones, fusion layers and output.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub input: CorpusMode,
    /// Length of the visual descriptor (feature dimension, or pooled grid
    /// size for pixel corpora).
    pub visual_dim: usize,
    /// Hidden width of the pixel-mode perceptron.
    pub pixel_hidden: usize,
    pub fusion: FusionKind,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            vocab: 4096,
            input: CorpusMode::Synthetic,
            visual_dim: 32,
            pixel_hidden: 128,
            fusion: FusionKind::SelfAttn,
            tau_init: 0.07,
        }
    }
}

impl ModelConfig {
    /// Width `dim` with the feed-forward and pixel hidden widths scaled along.
    pub fn with_dim(dim: usize) -> Self {
        ModelConfig {
            dim,
            ffn: 4 * dim,
            pixel_hidden: 2 * dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("visual_dim", self.visual_dim),
            ("pixel_hidden", self.pixel_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("model.vocab must be at least 2"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.dim = {} is not divisible by model.heads = {}",
                self.dim, self.heads
            )));
        }
        if self.input == CorpusMode::Pixel && self.visual_dim != POOL_GRID * POOL_GRID * 3 {
            return Err(Error::config(format!(
                "pixel models take a {}-value pooled descriptor, got model.visual_dim = {}",
                POOL_GRID * POOL_GRID * 3,
                self.visual_dim
            )));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::config("model.tau_init must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn expected_param_count(&self) -> usize {
        let (d, f, l) = (self.dim, self.ffn, self.layers);
        let vision = match self.input {
            CorpusMode::Synthetic => self.visual_dim * d + d,
            CorpusMode::Pixel => {
                let h = self.pixel_hidden;
                self.visual_dim * h + h + h * d + d
            }
        };
        let text = self.vocab * d + d * d + d;
        let markers = 2 * d;
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let final_ln = 2 * d;
        let pooler = 4 * d * d + 5 * d;
        vision + text + markers + l * per_layer + final_ln + pooler + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    vision: Vec<Linear>,
    token_table: usize,
    text: Linear,
    markers: usize,
    blocks: Vec<Block>,
    final_ln: Norm,
    pool_query: usize,
    pool_q: Linear,
    pool_k: Linear,
    pool_v: Linear,
    pool_o: Linear,
    tau: usize,
}

/// One encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding<S> {
    /// Unit-norm embedding used for matching.
    pub vector: Vec<S>,
    /// Pooler output before normalization.
    pub raw: Vec<S>,
}

impl<S: Scalar> FusedEmbedding<S> {
    pub fn normalized(&self) -> bool {
        (crate::scalar::norm(&self.vector) - S::one()).abs() <= S::from_f64_lossy(1e-5)
    }
}

/// Input to one encoder pass: a visual descriptor and an instruction.
#[derive(Debug, Clone, Copy)]
pub struct EncodeInput<'a> {
    pub visual: &'a [f32],
    pub text: &'a str,
}

/// Tape variables for every parameter of a model.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// The fusion encoder. Query and target embeddings come from this single
/// parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<S> {
    config: ModelConfig,
    tokenizer: Tokenizer,
    store: ParamStore<S>,
    layout: Layout,
    seed: u64,
}

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    seed: u64,
}

impl<S: Scalar> Init<'_, S> {
    fn normal(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, std: f64) -> usize {
        let mut rng = seed::rng(self.seed, &["init", name]);
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| S::from_f64_lossy(dist.sample(&mut rng))).collect();
        self.store.add(name, group, Tensor::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, v: f64) -> usize {
        let data = vec![S::from_f64_lossy(v); rows * cols];
        self.store.add(name, group, Tensor::from_vec(rows, cols, data))
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.weight"), group, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: self.constant(&format!("{name}.bias"), group, 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.constant(&format!("{name}.gain"), ParamGroup::Fusion, 1, dim, 1.0),
            bias: self.constant(&format!("{name}.bias"), ParamGroup::Fusion, 1, dim, 0.0),
        }
    }
}

fn build_layout<S: Scalar>(config: &ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Layout {
    let d = config.dim;
    let mut init = Init { store, seed };
    let bb = ParamGroup::Backbone;
    let fu = ParamGroup::Fusion;
    let vision = match config.input {
        CorpusMode::Synthetic => vec![init.linear("vision.proj", bb, config.visual_dim, d)],
        CorpusMode::Pixel => vec![
            init.linear("vision.mlp0", bb, config.visual_dim, config.pixel_hidden),
            init.linear("vision.mlp1", bb, config.pixel_hidden, d),
        ],
    };
    let token_table = init.normal("text.embedding", bb, config.vocab, d, 1.0);
    let text = init.linear("text.proj", bb, d, d);
    let markers = init.normal("fusion.slot_markers", fu, 2, d, 0.1);
    let blocks = (0..config.layers)
        .map(|l| {
            let p = format!("fusion.layer{l}");
            Block {
                ln1: init.norm(&format!("{p}.ln1"), d),
                q: init.linear(&format!("{p}.attn.q"), fu, d, d),
                k: init.linear(&format!("{p}.attn.k"), fu, d, d),
                v: init.linear(&format!("{p}.attn.v"), fu, d, d),
                o: init.linear(&format!("{p}.attn.o"), fu, d, d),
                ln2: init.norm(&format!("{p}.ln2"), d),
                up: init.linear(&format!("{p}.ffn.up"), fu, d, config.ffn),
                down: init.linear(&format!("{p}.ffn.down"), fu, config.ffn, d),
            }
        })
        .collect();
    let final_ln = init.norm("fusion.final_ln", d);
    let pool_query = init.normal("pooler.query", fu, 1, d, 1.0 / (d as f64).sqrt());
    let pool_q = init.linear("pooler.q", fu, d, d);
    let pool_k = init.linear("pooler.k", fu, d, d);
    let pool_v = init.linear("pooler.v", fu, d, d);
    let pool_o = init.linear("pooler.o", fu, d, d);
    let tau = init.constant("temperature", ParamGroup::Temperature, 1, 1, config.tau_init);
    Layout {
        vision,
        token_table,
        text,
        markers,
        blocks,
        final_ln,
        pool_query,
        pool_q,
        pool_k,
        pool_v,
        pool_o,
        tau,
    }
}

const ENCODE_CHUNK: usize = 256;

impl<S: Scalar> FusionModel<S> {
    /// Seeded random initialization. Fails on an inconsistent configuration
    /// or a parameter count that disagrees with the closed form.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, seed);
        let expected = config.expected_param_count();
        if store.count() != expected {
            return Err(Error::config(format!(
                "shape audit failed: {} parameters built, {expected} expected",
                store.count()
            )));
        }
        Ok(FusionModel {
            tokenizer: Tokenizer::new(config.vocab),
            config,
            store,
            layout,
            seed,
        })
    }

    /// Replaces the parameter store; names and shapes must match.
    pub fn with_params(mut self, store: ParamStore<S>) -> Result<Self> {
        if store.len() != self.store.len() {
            return Err(Error::config("parameter store does not match the model layout"));
        }
        for (a, b) in self.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.group != b.group {
                return Err(Error::config(format!("parameter `{}` does not match the model layout", b.name)));
            }
        }
        self.store = store;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_fusion(&mut self, fusion: FusionKind) {
        self.config.fusion = fusion;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn tau(&self) -> S {
        self.store.value(self.layout.tau).data[0]
    }

    pub fn set_tau(&mut self, tau: S) {
        self.store.value_mut(self.layout.tau).data[0] = tau;
    }

    /// Puts every parameter on the tape once so all towers share them.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.store
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p.value.clone()))
                .collect(),
        )
    }

    pub fn tau_var(&self, bound: &Bound) -> Var {
        bound.var(self.layout.tau)
    }

    fn check_visual(&self, v: &[f32]) {
        assert_eq!(
            v.len(),
            self.config.visual_dim,
            "visual descriptor has {} values, model expects {}",
            v.len(),
            self.config.visual_dim
        );
    }

    /// Checks that every record yields a descriptor this model accepts.
    pub fn check_records<'a>(&self, records: impl IntoIterator<Item = &'a ImageRecord>) -> Result<()> {
        for r in records {
            if r.mode() != self.config.input {
                return Err(Error::config(format!(
                    "record `{}` is {:?} but the model takes {:?} input",
                    r.image_id,
                    r.mode(),
                    self.config.input
                )));
            }
            let n = visual_descriptor(r).len();
            if n != self.config.visual_dim {
                return Err(Error::config(format!(
                    "record `{}` has a {n}-value descriptor, model.visual_dim = {}",
                    r.image_id, self.config.visual_dim
                )));
            }
        }
        Ok(())
    }

    fn visual_tensor(&self, visuals: &[&[f32]]) -> Tensor<S> {
        let centered = self.config.input == CorpusMode::Pixel;
        let mut data = Vec::with_capacity(visuals.len() * self.config.visual_dim);
        for v in visuals {
            self.check_visual(v);
            data.extend(v.iter().map(|&x| <S as Scalar>::from_f32(if centered { x - 0.5 } else { x })));
        }
        Tensor::from_vec(visuals.len(), self.config.visual_dim, data)
    }

    fn vision_tower(&self, tape: &mut Tape<S>, p: &Bound, lay: &Layout, visuals: &[&[f32]]) -> Var {
        let mut h = tape.input(self.visual_tensor(visuals));
        for (i, lin) in lay.vision.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = tape.linear(h, p.var(lin.w), p.var(lin.b));
        }
        h
    }

    fn text_tower(&self, tape: &mut Tape<S>, p: &Bound, lay: &Layout, texts: &[&str]) -> Var {
        let tokens = texts.iter().map(|t| self.tokenizer.tokenize(t)).collect();
        let pooled = tape.embed_mean(p.var(lay.token_table), tokens);
        tape.linear(pooled, p.var(lay.text.w), p.var(lay.text.b))
    }

    fn block(&self, tape: &mut Tape<S>, p: &Bound, b: &Block, x: Var, kind: FusionKind) -> Var {
        let heads = self.config.heads;
        let lin = |tape: &mut Tape<S>, x: Var, l: &Linear| tape.linear(x, p.var(l.w), p.var(l.b));
        let h = tape.layer_norm(x, p.var(b.ln1.gain), p.var(b.ln1.bias));
        let k = lin(tape, h, &b.k);
        let v = lin(tape, h, &b.v);
        let (stream, q_in, q_group) = match kind {
            FusionKind::SelfAttn => (x, h, 2),
            FusionKind::CrossAttn => (tape.select_rows(x, 2, 1), tape.select_rows(h, 2, 1), 1),
        };
        let q = lin(tape, q_in, &b.q);
        let a = tape.attention(q, k, v, q_group, 2, heads);
        let a = lin(tape, a, &b.o);
        let s = tape.add(stream, a);
        let h2 = tape.layer_norm(s, p.var(b.ln2.gain), p.var(b.ln2.bias));
        let u = lin(tape, h2, &b.up);
        let u = tape.gelu(u);
        let f = lin(tape, u, &b.down);
        let s = tape.add(s, f);
        match kind {
            FusionKind::SelfAttn => s,
            FusionKind::CrossAttn => {
                let image = tape.select_rows(x, 2, 0);
                tape.interleave(image, s)
            }
        }
    }

    /// Builds the forward graph for a batch and returns the `N x dim`
    /// unit-norm output node.
    pub fn forward(&self, tape: &mut Tape<S>, p: &Bound, inputs: &[EncodeInput<'_>], kind: FusionKind) -> Var {
        let raw = self.forward_raw(tape, p, inputs, kind);
        tape.l2_normalize(raw)
    }

    /// Pooler output before normalization.
    pub fn forward_raw(&self, tape: &mut Tape<S>, p: &Bound, inputs: &[EncodeInput<'_>], kind: FusionKind) -> Var {
        assert!(!inputs.is_empty());
        let lay = &self.layout;
        let visuals: Vec<&[f32]> = inputs.iter().map(|i| i.visual).collect();
        let texts: Vec<&str> = inputs.iter().map(|i| i.text).collect();
        let v = self.vision_tower(tape, p, lay, &visuals);
        let t = self.text_tower(tape, p, lay, &texts);
        let x = tape.interleave(v, t);
        let mut x = tape.add_cyclic(x, p.var(lay.markers));
        for b in &lay.blocks {
            x = self.block(tape, p, b, x, kind);
        }
        let x = tape.layer_norm(x, p.var(lay.final_ln.gain), p.var(lay.final_ln.bias));
        let lin = |tape: &mut Tape<S>, x: Var, l: &Linear| tape.linear(x, p.var(l.w), p.var(l.b));
        let q = lin(tape, p.var(lay.pool_query), &lay.pool_q);
        let q = tape.repeat_rows(q, inputs.len());
        let k = lin(tape, x, &lay.pool_k);
        let v = lin(tape, x, &lay.pool_v);
        let a = tape.attention(q, k, v, 1, 2, self.config.heads);
        lin(tape, a, &lay.pool_o)
    }

    fn run(&self, inputs: &[EncodeInput<'_>], kind: FusionKind) -> Vec<FusedEmbedding<S>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let raw_var = self.forward_raw(&mut tape, &p, chunk, kind);
            let r = tape.l2_normalize(raw_var);
            let (rv, raw) = (tape.value(r), tape.value(raw_var));
            for i in 0..chunk.len() {
                out.push(FusedEmbedding {
                    vector: rv.row(i).to_vec(),
                    raw: raw.row(i).to_vec(),
                });
            }
        }
        out
    }

    /// Encodes a batch with the configured fusion variant.
    pub fn encode_batch(&self, inputs: &[EncodeInput<'_>]) -> Vec<FusedEmbedding<S>> {
        self.run(inputs, self.config.fusion)
    }

    pub fn encode(&self, visual: &[f32], text: &str) -> FusedEmbedding<S> {
        self.encode_batch(&[EncodeInput { visual, text }]).remove(0)
    }

    /// Target-side embedding: the image with the empty-text placeholder.
    pub fn encode_target(&self, visual: &[f32]) -> FusedEmbedding<S> {
        self.encode(visual, "")
    }

    pub fn encode_targets(&self, visuals: &[&[f32]]) -> Vec<FusedEmbedding<S>> {
        let inputs: Vec<_> = visuals.iter().map(|v| EncodeInput { visual: v, text: "" }).collect();
        self.encode_batch(&inputs)
    }

    /// Cross-attention fusion on the same parameters, whatever the
    /// configured variant.
    pub fn encode_crossattn_variant(&self, visual: &[f32], text: &str) -> FusedEmbedding<S> {
        self.run(&[EncodeInput { visual, text }], FusionKind::CrossAttn).remove(0)
    }

    /// Self-attention fusion on the same parameters.
    pub fn encode_selfattn_variant(&self, visual: &[f32], text: &str) -> FusedEmbedding<S> {
        self.run(&[EncodeInput { visual, text }], FusionKind::SelfAttn).remove(0)
    }

    /// Raw backbone outputs `(image, text)` before fusion, one row per input.
    pub fn backbone_raw(&self, inputs: &[EncodeInput<'_>]) -> (Tensor<S>, Tensor<S>) {
        let lay = &self.layout;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let visuals: Vec<&[f32]> = inputs.iter().map(|i| i.visual).collect();
        let texts: Vec<&str> = inputs.iter().map(|i| i.text).collect();
        let v = self.vision_tower(&mut tape, &p, lay, &visuals);
        let t = self.text_tower(&mut tape, &p, lay, &texts);
        (tape.value(v).clone(), tape.value(t).clone())
    }

    /// Unit-norm backbone image embeddings (no fusion head).
    pub fn backbone_images(&self, visuals: &[&[f32]]) -> Vec<Vec<S>> {
        let lay = &self.layout;
        let mut out = Vec::with_capacity(visuals.len());
        for chunk in visuals.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let v = self.vision_tower(&mut tape, &p, lay, chunk);
            let v = tape.l2_normalize(v);
            out.extend(tape.value(v).to_rows());
        }
        out
    }

    /// Unit-norm backbone text embeddings (no fusion head).
    pub fn backbone_texts(&self, texts: &[&str]) -> Vec<Vec<S>> {
        let lay = &self.layout;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let t = self.text_tower(&mut tape, &p, lay, chunk);
            let t = tape.l2_normalize(t);
            out.extend(tape.value(t).to_rows());
        }
        out
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> FusionModel<T> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.add(p.name.clone(), p.group, p.value.cast());
        }
        FusionModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer,
            store,
            layout: self.layout.clone(),
            seed: self.seed,
        }
    }
}

/// Visual descriptor of a record as consumed by the model.
pub fn model_input(record: &ImageRecord) -> Vec<f32> {
    visual_descriptor(record)
}
