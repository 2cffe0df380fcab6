//! Planted-relation benchmark over feature-proxy vectors. Each image is the
//! sum of an object, a color and a domain embedding plus rendering noise;
//! instructions name the factor that changes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, QueryCase, Task, TextItem, DOMAIN_TEMPLATE, SBIR_INSTRUCTION};
use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::instructgen::{Provenance, Triplet};
use crate::seed;

pub const OBJECTS: [&str; 10] = ["car", "dog", "cat", "chair", "cake", "lamp", "boat", "shoe", "tree", "house"];
pub const COLORS: [&str; 10] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink", "brown"];
pub const DOMAINS: [&str; 10] = [
    "photo", "sketch", "painting", "cartoon", "sculpture", "origami", "embroidery", "graffiti", "toy", "tattoo",
];

const SKETCH: usize = 1;
const PHOTO: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub objects: usize,
    pub colors: usize,
    pub domains: usize,
    pub feature_dim: usize,
    /// Rendering noise relative to the unit-scale factor embeddings.
    pub noise: f64,
    /// Training triplets generated; smaller budgets are prefixes.
    pub triplets: usize,
    pub val_queries: usize,
    pub test_queries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 10,
            colors: 10,
            domains: 10,
            feature_dim: 32,
            noise: 0.2,
            triplets: 2000,
            val_queries: 200,
            test_queries: 500,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, max) in [
            ("objects", self.objects, OBJECTS.len()),
            ("colors", self.colors, COLORS.len()),
            ("domains", self.domains, DOMAINS.len()),
        ] {
            if !(2..=max).contains(&v) {
                return Err(Error::config(format!("synth.{name} must be in 2..={max}")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::config("synth.feature_dim must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("synth.noise must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn index_size(&self) -> usize {
        self.objects * self.colors * self.domains
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Combo {
    pub object: usize,
    pub color: usize,
    pub domain: usize,
}

impl Combo {
    pub fn item_id(&self) -> String {
        format!("item-{:02}-{:02}-{:02}", self.object, self.color, self.domain)
    }

    pub fn caption(&self) -> String {
        format!("a {} {} {}", COLORS[self.color], OBJECTS[self.object], DOMAINS[self.domain])
    }

    pub fn labels(&self) -> Vec<String> {
        vec![
            OBJECTS[self.object].to_string(),
            COLORS[self.color].to_string(),
            DOMAINS[self.domain].to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Color(usize),
    Object(usize),
    Domain(usize),
}

impl Relation {
    pub fn apply(&self, c: Combo) -> Combo {
        match *self {
            Relation::Color(v) => Combo { color: v, ..c },
            Relation::Object(v) => Combo { object: v, ..c },
            Relation::Domain(v) => Combo { domain: v, ..c },
        }
    }

    pub fn instruction(&self) -> String {
        match *self {
            Relation::Color(v) => format!("change the color to {}", COLORS[v]),
            Relation::Object(v) => format!("replace it with a {}", OBJECTS[v]),
            Relation::Domain(v) => DOMAIN_TEMPLATE.replace("{domain}", DOMAINS[v]),
        }
    }
}

/// Factor embeddings and the seed that drives every rendering.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SynthConfig,
    pub seed: u64,
    objects: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    domains: Vec<Vec<f64>>,
}

impl World {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = config.feature_dim;
        let table = |name: &str, n: usize| -> Vec<Vec<f64>> {
            let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
            (0..n)
                .map(|i| {
                    let mut rng = seed::rng(seed, &["synth-factor", name, &i.to_string()]);
                    (0..dim).map(|_| dist.sample(&mut rng)).collect()
                })
                .collect()
        };
        Ok(World {
            objects: table("object", config.objects),
            colors: table("color", config.colors),
            domains: table("domain", config.domains),
            config,
            seed,
        })
    }

    pub fn combos(&self) -> impl Iterator<Item = Combo> + '_ {
        let c = &self.config;
        (0..c.objects).flat_map(move |object| {
            (0..c.colors).flat_map(move |color| (0..c.domains).map(move |domain| Combo { object, color, domain }))
        })
    }

    /// Feature vector of one rendering; the noise is keyed by `id`.
    pub fn render(&self, combo: Combo, id: &str) -> ImageRecord {
        let dim = self.config.feature_dim;
        let dist = Normal::new(0.0, self.config.noise / (dim as f64).sqrt()).unwrap();
        let mut rng = seed::rng(self.seed, &["synth-render", id]);
        let f = (0..dim)
            .map(|k| {
                let clean = self.objects[combo.object][k] + self.colors[combo.color][k] + self.domains[combo.domain][k];
                (clean + dist.sample(&mut rng)) as f32
            })
            .collect();
        let mut r = ImageRecord::synthetic(id, format!("synthetic://{id}"), f);
        r.ica_labels = combo.labels();
        r.caption = Some(combo.caption());
        r
    }

    fn random_combo(&self, rng: &mut impl Rng) -> Combo {
        Combo {
            object: rng.random_range(0..self.config.objects),
            color: rng.random_range(0..self.config.colors),
            domain: rng.random_range(0..self.config.domains),
        }
    }

    fn random_relation(&self, c: Combo, rng: &mut impl Rng) -> Relation {
        let other = |rng: &mut dyn rand::RngCore, n: usize, cur: usize| {
            let v = rng.random_range(0..n - 1);
            if v >= cur {
                v + 1
            } else {
                v
            }
        };
        match rng.random_range(0..3) {
            0 => Relation::Color(other(rng, self.config.colors, c.color)),
            1 => Relation::Object(other(rng, self.config.objects, c.object)),
            _ => Relation::Domain(other(rng, self.config.domains, c.domain)),
        }
    }

    /// One record per combination, named by [`Combo::item_id`].
    pub fn index_records(&self) -> Vec<ImageRecord> {
        self.combos().map(|c| self.render(c, &c.item_id())).collect()
    }

    /// Planted (query, relation, target) draws for a named split.
    pub fn draws(&self, split: &str, n: usize) -> Vec<(Combo, Relation, Combo)> {
        let mut rng = seed::rng(self.seed, &["synth-split", split]);
        (0..n)
            .map(|_| {
                let q = self.random_combo(&mut rng);
                let rel = self.random_relation(q, &mut rng);
                (q, rel, rel.apply(q))
            })
            .collect()
    }
}

/// Training data plus validation and test CIR splits.
#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    /// Query and target renderings referenced by `triplets`.
    pub train_corpus: Vec<ImageRecord>,
    pub triplets: Vec<Triplet>,
    /// Page-mate pairs behind the triplets, for instruction-generation studies.
    pub pairs: Vec<(String, String)>,
    pub val: Dataset,
    pub test: Dataset,
}

/// Candidate subset of a CIR case: the target plus up to five renderings of
/// the same object and domain in other colors. The query's own combination
/// never appears, so a model cannot score by echoing the query.
fn cir_subset(world: &World, q: Combo, t: Combo) -> Vec<String> {
    let mut ids = vec![t.item_id()];
    ids.extend(
        (0..world.config.colors)
            .map(|color| Combo { color, ..t })
            .filter(|c| *c != t && *c != q)
            .take(5)
            .map(|c| c.item_id()),
    );
    ids
}

fn cir_dataset(world: &World, index: &[ImageRecord], split: &str, n: usize) -> Dataset {
    let mut corpus = index.to_vec();
    let mut cases = Vec::with_capacity(n);
    for (i, (q, rel, t)) in world.draws(split, n).into_iter().enumerate() {
        let id = format!("{split}-q{i:05}");
        corpus.push(world.render(q, &id));
        cases.push(QueryCase {
            query_id: id,
            instruction: rel.instruction(),
            gt_ids: vec![t.item_id()],
            subset_ids: Some(cir_subset(world, q, t)),
            domain: None,
        });
    }
    Dataset {
        corpus,
        cases,
        index_ids: index.iter().map(|r| r.image_id.clone()).collect(),
        texts: Vec::new(),
    }
}

/// Generates the full benchmark. Triplets of smaller budgets are prefixes
/// of the returned list.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthBenchmark> {
    let world = World::new(config.clone(), seed)?;
    let index = world.index_records();
    let mut train_corpus = Vec::with_capacity(2 * config.triplets);
    let mut triplets = Vec::with_capacity(config.triplets);
    let mut pairs = Vec::with_capacity(config.triplets);
    for (i, (q, rel, t)) in world.draws("train", config.triplets).into_iter().enumerate() {
        let page = format!("synthetic://train/{i:06}");
        let (qid, tid) = (format!("train-q{i:06}"), format!("train-t{i:06}"));
        let mut qr = world.render(q, &qid);
        let mut tr = world.render(t, &tid);
        qr.page_url = page.clone();
        tr.page_url = page;
        train_corpus.push(qr);
        train_corpus.push(tr);
        triplets.push(Triplet {
            query_id: qid.clone(),
            instruction: rel.instruction(),
            target_id: tid.clone(),
            provenance: Provenance::TemplateFree,
        });
        pairs.push((qid, tid));
    }
    Ok(SynthBenchmark {
        train_corpus,
        triplets,
        pairs,
        val: cir_dataset(&world, &index, "val", config.val_queries),
        test: cir_dataset(&world, &index, "test", config.test_queries),
    })
}

/// Evaluation dataset shaped for `task`.
pub fn task_dataset(config: &SynthConfig, seed: u64, task: Task) -> Result<Dataset> {
    let world = World::new(config.clone(), seed)?;
    let index = world.index_records();
    let n = config.test_queries;
    let mut rng = seed::rng(seed, &["synth-task", &format!("{task:?}")]);
    match task {
        Task::Cir => Ok(cir_dataset(&world, &index, "test", n)),
        Task::DomainTransfer | Task::Sbir => {
            let mut corpus = index.clone();
            let mut cases = Vec::with_capacity(n);
            for i in 0..n {
                let mut q = world.random_combo(&mut rng);
                let target_domain = if task == Task::Sbir {
                    q.domain = SKETCH;
                    PHOTO
                } else {
                    (q.domain + 1 + rng.random_range(0..config.domains - 1)) % config.domains
                };
                let id = format!("{task:?}-q{i:05}").to_lowercase();
                corpus.push(world.render(q, &id));
                let t = Combo { domain: target_domain, ..q };
                cases.push(QueryCase {
                    query_id: id,
                    instruction: if task == Task::Sbir { SBIR_INSTRUCTION.to_string() } else { String::new() },
                    gt_ids: vec![t.item_id()],
                    subset_ids: None,
                    domain: (task == Task::DomainTransfer).then(|| DOMAINS[target_domain].to_string()),
                });
            }
            Ok(Dataset {
                corpus,
                cases,
                index_ids: index.iter().map(|r| r.image_id.clone()).collect(),
                texts: Vec::new(),
            })
        }
        Task::TextToImage => {
            let mut texts = Vec::with_capacity(n);
            let mut cases = Vec::with_capacity(n);
            for i in 0..n {
                let c = world.random_combo(&mut rng);
                let id = format!("text-q{i:05}");
                texts.push(TextItem {
                    id: id.clone(),
                    text: c.caption(),
                });
                cases.push(QueryCase {
                    query_id: id,
                    instruction: String::new(),
                    gt_ids: vec![c.item_id()],
                    subset_ids: None,
                    domain: None,
                });
            }
            Ok(Dataset {
                index_ids: index.iter().map(|r| r.image_id.clone()).collect(),
                corpus: index,
                cases,
                texts,
            })
        }
        Task::ImageToText => {
            let texts: Vec<TextItem> = world
                .combos()
                .map(|c| TextItem {
                    id: format!("text-{}", c.item_id()),
                    text: c.caption(),
                })
                .collect();
            let mut corpus = Vec::with_capacity(n);
            let mut cases = Vec::with_capacity(n);
            for i in 0..n {
                let c = world.random_combo(&mut rng);
                let id = format!("image-q{i:05}");
                corpus.push(world.render(c, &id));
                cases.push(QueryCase {
                    query_id: id,
                    instruction: String::new(),
                    gt_ids: vec![format!("text-{}", c.item_id())],
                    subset_ids: None,
                    domain: None,
                });
            }
            Ok(Dataset {
                corpus,
                cases,
                index_ids: texts.iter().map(|t| t.id.clone()).collect(),
                texts,
            })
        }
    }
}
