//! Small pixel-mode corpus whose per-stage mining fates are known in
//! advance. Annotations and embeddings are replayed from sidecar files, so
//! every similarity is a designed value.

use std::path::Path;

use crate::annotate::{SidecarEntry, Verdict};
use crate::corpus::{corpus_to_jsonl, ImageRecord, CHANNELS};
use crate::error::Result;
use crate::io;
use crate::mining::{EmbeddingEntry, EmbeddingKind};

/// Embedding width of the demo sidecar.
pub const DIM: usize = 32;
const SIDE: u32 = 32;
const SMALL: u32 = 16;
/// First coordinate used for caption vectors.
const CAPTION_BASE: usize = 17;

/// Demo mining thresholds: defaults except the resolution floor, which is
/// scaled to the demo's thumbnail-sized images.
pub const DEMO_CONFIG: &str = r#"# Mining run over the bundled demo corpus.
seed = 7

[paths]
corpus = "corpus.jsonl"
annotations = "annotations.jsonl"
embeddings = "embeddings.jsonl"
pairs = "out/pairs.jsonl"
mining_stats = "out/mining_stats.json"
triplets = "out/triplets.jsonl"

[corpus]
mode = "pixel"

[filter]
min_resolution = 24
"#;

fn basis(terms: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    for &(i, w) in terms {
        v[i] += w;
    }
    v
}

/// One demo image: identity, page, size, verdict, embedding, labels and caption.
struct Spec {
    id: &'static str,
    page: &'static str,
    side: u32,
    keep: bool,
    alt: &'static str,
    image: Vec<f64>,
    labels: Vec<(&'static str, usize)>,
    caption: (&'static str, Vec<f64>),
}

fn cap(text: &'static str, terms: &[(usize, f64)]) -> (&'static str, Vec<f64>) {
    let shifted: Vec<(usize, f64)> = terms.iter().map(|&(i, w)| (CAPTION_BASE + i, w)).collect();
    (text, basis(&shifted))
}

fn spec(
    id: &'static str,
    page: &'static str,
    side: u32,
    keep: bool,
    image: &[(usize, f64)],
    labels: &[(&'static str, usize)],
    caption: (&'static str, Vec<f64>),
) -> Spec {
    Spec {
        id,
        page,
        side,
        keep,
        alt: if keep { "product photo" } else { "click here to buy now" },
        image: basis(image),
        labels: labels.to_vec(),
        caption,
    }
}

fn specs() -> Vec<Spec> {
    const GALLERY: &str = "https://demo.example/gallery";
    const CLEAN: &str = "https://demo.example/clean";
    const EMPTY: &str = "https://demo.example/empty";
    const SINGLE: &str = "https://demo.example/single";
    const MIRROR_A: &str = "https://demo.example/mirror-a";
    const MIRROR_B: &str = "https://demo.example/mirror-b";
    const NOLABEL: &str = "https://demo.example/nolabel";
    let r51 = 0.51f64.sqrt();
    let r84 = 0.84f64.sqrt();
    let r96 = 0.96f64.sqrt();
    vec![
        // four couples plus an extra target for the first query
        spec("g1", GALLERY, SIDE, true, &[(0, 1.0)], &[("sneaker", 0)], cap("white sneaker", &[(0, 1.0)])),
        spec("g2", GALLERY, SIDE, true, &[(0, 1.0), (1, 0.6)], &[("laces", 1)], cap("sneaker with red laces", &[(0, 0.8), (1, 0.6)])),
        spec("g9", GALLERY, SIDE, true, &[(0, 1.0), (8, 0.6)], &[("insole", 8)], cap("sneaker with a gel insole", &[(0, 0.7), (2, r51)])),
        spec("g3", GALLERY, SIDE, true, &[(2, 1.0)], &[("mug", 2)], cap("plain mug", &[(3, 1.0)])),
        spec("g4", GALLERY, SIDE, true, &[(2, 1.0), (3, 0.6)], &[("handle", 3)], cap("mug with a wooden handle", &[(3, 0.6), (4, 0.8)])),
        spec("g5", GALLERY, SIDE, true, &[(4, 1.0)], &[("backpack", 4)], cap("grey backpack", &[(5, 1.0)])),
        spec("g6", GALLERY, SIDE, true, &[(4, 1.0), (5, 0.6)], &[("zipper", 5)], cap("backpack with gold zipper", &[(5, 0.4), (6, r84)])),
        spec("g7", GALLERY, SIDE, true, &[(6, 1.0)], &[("kettle", 6)], cap("steel kettle", &[(7, 1.0)])),
        spec("g8", GALLERY, SIDE, true, &[(6, 1.0), (7, 0.6)], &[("whistle", 7)], cap("kettle with whistle cap", &[(7, 0.2), (8, r96)])),
        // cleaning stages
        spec("h1", CLEAN, SIDE, true, &[(10, 1.0)], &[("vase", 10)], cap("blue vase", &[(0, 1.0)])),
        spec("h2", CLEAN, SIDE, false, &[(11, 1.0)], &[("banner", 11)], cap("sale banner", &[(1, 1.0)])),
        spec("h3", CLEAN, SMALL, true, &[(10, 1.0), (11, 1.0)], &[("vase", 10)], cap("vase thumbnail", &[(2, 1.0)])),
        spec("h4", CLEAN, SIDE, true, &[(10, 1.0), (11, 0.1)], &[("vase", 10)], cap("blue vase again", &[(3, 1.0)])),
        spec("h5", CLEAN, SIDE, true, &[(10, 1.0), (11, 0.6)], &[("tulips", 11)], cap("vase holding tulips", &[(4, 1.0)])),
        spec("k1", EMPTY, SIDE, false, &[(9, 1.0)], &[("logo", 9)], cap("site logo", &[(0, 1.0)])),
        spec("k2", EMPTY, SMALL, true, &[(9, 1.0), (12, 1.0)], &[("icon", 12)], cap("tiny icon", &[(1, 1.0)])),
        spec("s1", SINGLE, SIDE, true, &[(12, 1.0)], &[("lamp", 12)], cap("desk lamp", &[(0, 1.0)])),
        // near-identical pages
        spec("m1", MIRROR_A, SIDE, true, &[(13, 1.0)], &[("teapot", 13)], cap("glazed teapot", &[(0, 1.0)])),
        spec("m2", MIRROR_A, SIDE, true, &[(14, 1.0)], &[("saucer", 14)], cap("matching saucer", &[(1, 1.0)])),
        spec("n1", MIRROR_B, SIDE, true, &[(13, 1.0)], &[("teapot", 13)], cap("glazed teapot, mirrored", &[(0, 1.0)])),
        spec("n2", MIRROR_B, SIDE, true, &[(14, 1.0)], &[("saucer", 14)], cap("matching saucer, mirrored", &[(1, 1.0)])),
        // a target without labels
        spec("r1", NOLABEL, SIDE, true, &[(15, 1.0)], &[], cap("unlabeled poster", &[(0, 1.0)])),
        spec("r2", NOLABEL, SIDE, true, &[(16, 1.0)], &[("frame", 16)], cap("poster in a frame", &[(1, 1.0)])),
    ]
}

/// Deterministic pixel pattern; duplicates share their source's pattern.
fn pixels(id: &str, side: u32) -> Vec<f32> {
    let source = match id {
        "h4" => "h1",
        "n1" => "m1",
        "n2" => "m2",
        other => other,
    };
    let h = crate::seed::stable_hash(source);
    let tint = [(h & 0xff) as f32 / 255.0, ((h >> 8) & 0xff) as f32 / 255.0, ((h >> 16) & 0xff) as f32 / 255.0];
    let s = side as usize;
    let mut out = Vec::with_capacity(s * s * CHANNELS);
    for y in 0..s {
        for x in 0..s {
            let shade = 0.25 + 0.5 * ((x + y) as f32 / (2 * s - 2) as f32);
            for t in tint {
                out.push((0.5 * t + 0.5 * shade).clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub struct DemoFiles {
    pub corpus: Vec<ImageRecord>,
    pub annotations: Vec<SidecarEntry>,
    pub embeddings: Vec<EmbeddingEntry>,
}

pub fn build() -> DemoFiles {
    let specs = specs();
    let mut corpus = Vec::new();
    let mut annotations = Vec::new();
    let mut embeddings = Vec::new();
    let mut seen_text = std::collections::HashSet::new();
    let mut text = |key: &str, vector: Vec<f64>, out: &mut Vec<EmbeddingEntry>| {
        if seen_text.insert(key.to_string()) {
            out.push(EmbeddingEntry {
                kind: EmbeddingKind::Text,
                key: key.to_string(),
                vector,
            });
        }
    };
    for s in &specs {
        corpus.push(ImageRecord::pixels(s.id, s.page, s.side, s.side, pixels(s.id, s.side)).with_alt_text(s.alt));
        annotations.push(SidecarEntry {
            image_id: s.id.to_string(),
            verdict: if s.keep { Verdict::Keep } else { Verdict::Discard },
            ica_labels: s.labels.iter().map(|(l, _)| l.to_string()).collect(),
            caption: s.caption.0.to_string(),
        });
        embeddings.push(EmbeddingEntry {
            kind: EmbeddingKind::Image,
            key: s.id.to_string(),
            vector: s.image.clone(),
        });
        text(s.caption.0, s.caption.1.clone(), &mut embeddings);
        for &(l, axis) in &s.labels {
            text(l, basis(&[(axis, 1.0)]), &mut embeddings);
        }
    }
    DemoFiles {
        corpus,
        annotations,
        embeddings,
    }
}

/// Writes `corpus.jsonl`, `annotations.jsonl`, `embeddings.jsonl` and
/// `demo.toml` into `dir`.
pub fn write(dir: &Path) -> Result<()> {
    let d = build();
    io::write_atomic(&dir.join("corpus.jsonl"), &corpus_to_jsonl(&d.corpus)?)?;
    io::write_jsonl(&dir.join("annotations.jsonl"), &d.annotations)?;
    io::write_jsonl(&dir.join("embeddings.jsonl"), &d.embeddings)?;
    io::write_atomic(&dir.join("demo.toml"), DEMO_CONFIG.as_bytes())
}
