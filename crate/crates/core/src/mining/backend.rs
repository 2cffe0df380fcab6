//! Relevance scoring backends producing unit-norm embeddings for images and
//! text.

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, Visual, CHANNELS};
use crate::error::{Error, Result};
use crate::io;
use crate::scalar::normalize_in_place;
use crate::seed;

pub trait ScoringBackend {
    /// Unit-norm image embedding.
    fn image_embed(&self, record: &ImageRecord) -> Result<Vec<f64>, String>;
    /// Unit-norm text embedding in the same space as images.
    fn text_embed(&self, text: &str) -> Result<Vec<f64>, String>;
}

/// Side length of the average-pooled grid used to summarize pixel images.
pub const POOL_GRID: usize = 4;

/// Average-pools a `(height, width, 3)` image into a `POOL_GRID x POOL_GRID x 3`
/// vector. Cells cover the image with integer boundaries
/// `[floor(i*h/g), floor((i+1)*h/g))`, widened to one pixel when empty.
pub fn pool_pixels(pixels: &[f32], width: usize, height: usize, grid: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; grid * grid * CHANNELS];
    for gy in 0..grid {
        let y0 = gy * height / grid;
        let y1 = ((gy + 1) * height / grid).max(y0 + 1).min(height);
        for gx in 0..grid {
            let x0 = gx * width / grid;
            let x1 = ((gx + 1) * width / grid).max(x0 + 1).min(width);
            let mut acc = [0.0f64; CHANNELS];
            for y in y0..y1 {
                for x in x0..x1 {
                    let base = (y * width + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        acc[c] += f64::from(pixels[base + c]);
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let o = (gy * grid + gx) * CHANNELS;
            for c in 0..CHANNELS {
                out[o + c] = (acc[c] / n) as f32;
            }
        }
    }
    out
}

/// Fixed-size visual descriptor for a record: the feature proxy itself, or
/// the pooled pixel grid.
pub fn visual_descriptor(record: &ImageRecord) -> Vec<f32> {
    match &record.visual {
        Visual::Features(f) => f.clone(),
        Visual::Pixels(p) => pool_pixels(p, record.width as usize, record.height as usize, POOL_GRID),
    }
}

/// Splits text into lowercase alphanumeric tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic pseudo-random projection backend.
///
/// Images: descriptor (centered, plus a constant bias input) times a seeded
/// Gaussian matrix. Text: sum of seeded Gaussian token vectors. Image and
/// text spaces are unrelated, so cross-modal scores hover around zero.
#[derive(Debug, Clone)]
pub struct HashingBackend {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashingBackend {
    fn default() -> Self {
        HashingBackend { dim: 64, seed: 0 }
    }
}

impl HashingBackend {
    fn gaussian(&self, keys: &[&str]) -> Vec<f64> {
        let mut rng = seed::rng(self.seed, keys);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl ScoringBackend for HashingBackend {
    fn image_embed(&self, record: &ImageRecord) -> Result<Vec<f64>, String> {
        let desc = visual_descriptor(record);
        let centered = matches!(record.visual, Visual::Pixels(_));
        let mut out = self.gaussian(&["image-bias"]);
        for (i, &x) in desc.iter().enumerate() {
            let x = if centered { f64::from(x) - 0.5 } else { f64::from(x) };
            if x == 0.0 {
                continue;
            }
            let col = self.gaussian(&["image", &i.to_string()]);
            for (o, c) in out.iter_mut().zip(col) {
                *o += x * c;
            }
        }
        normalize_in_place(&mut out);
        Ok(out)
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut out = vec![0.0; self.dim];
        let mut any = false;
        for w in words(text) {
            any = true;
            for (o, c) in out.iter_mut().zip(self.gaussian(&["token", &w])) {
                *o += c;
            }
        }
        if !any {
            return Err(format!("no tokens in text `{text}`"));
        }
        normalize_in_place(&mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

/// One line of a precomputed-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub kind: EmbeddingKind,
    /// `image_id` for images, the exact text for text.
    pub key: String,
    pub vector: Vec<f64>,
}

/// Replays embeddings computed offline by any external model.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingFileBackend {
    images: HashMap<String, Vec<f64>>,
    texts: HashMap<String, Vec<f64>>,
}

impl EmbeddingFileBackend {
    pub fn from_entries(entries: Vec<EmbeddingEntry>) -> Result<Self> {
        let mut me = EmbeddingFileBackend::default();
        let mut dim = None;
        for mut e in entries {
            if *dim.get_or_insert(e.vector.len()) != e.vector.len() {
                return Err(Error::invalid(format!("embedding `{}` has inconsistent dimension", e.key)));
            }
            if e.vector.iter().all(|x| *x == 0.0) || e.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("embedding `{}` is zero or non-finite", e.key)));
            }
            normalize_in_place(&mut e.vector);
            let map = match e.kind {
                EmbeddingKind::Image => &mut me.images,
                EmbeddingKind::Text => &mut me.texts,
            };
            if map.insert(e.key.clone(), e.vector).is_some() {
                return Err(Error::invalid(format!("duplicate embedding key `{}`", e.key)));
            }
        }
        Ok(me)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(io::read_jsonl(path)?)
    }
}

impl ScoringBackend for EmbeddingFileBackend {
    fn image_embed(&self, record: &ImageRecord) -> Result<Vec<f64>, String> {
        self.images
            .get(&record.image_id)
            .cloned()
            .ok_or_else(|| format!("no image embedding for `{}`", record.image_id))
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>, String> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| format!("no text embedding for `{text}`"))
    }
}
