use super::*;
use crate::model::{FusionKind, ModelConfig};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn case(gt: &[&str]) -> QueryCase {
    QueryCase {
        query_id: "q".into(),
        instruction: String::new(),
        gt_ids: ids(gt),
        subset_ids: None,
        domain: None,
    }
}

/// Ranking of `n` filler items with the ground truth at the given 1-based ranks.
fn ranking_with(gt_ranks: &[usize], n: usize) -> (Vec<String>, QueryCase) {
    let mut r: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut gt = Vec::new();
    for (j, &k) in gt_ranks.iter().enumerate() {
        r[k - 1] = format!("g{j}");
        gt.push(format!("g{j}"));
    }
    let c = QueryCase {
        gt_ids: gt,
        ..case(&[])
    };
    (r, c)
}

fn toy_index() -> RetrievalIndex {
    // query = e0; item scores 0.9, 0.5, 0.1
    let mk = |s: f32| vec![s, (1.0 - s * s).sqrt()];
    RetrievalIndex::from_vectors(vec![("c".into(), mk(0.1)), ("a".into(), mk(0.9)), ("b".into(), mk(0.5))]).unwrap()
}

#[test]
fn rank_sorts_by_cosine() {
    assert_eq!(toy_index().rank(&[1.0, 0.0], None).unwrap(), ids(&["a", "b", "c"]));
}

#[test]
fn rank_breaks_ties_by_id() {
    let idx = RetrievalIndex::from_vectors(vec![("b".into(), vec![1.0, 0.0]), ("a".into(), vec![1.0, 0.0])]).unwrap();
    assert_eq!(idx.rank(&[1.0, 0.0], None).unwrap(), ids(&["a", "b"]));
}

#[test]
fn rank_respects_subset() {
    let idx = toy_index();
    assert_eq!(idx.rank(&[1.0, 0.0], Some(&ids(&["c", "b"]))).unwrap(), ids(&["b", "c"]));
    assert!(idx.rank(&[1.0, 0.0], Some(&ids(&["zz"]))).is_err());
}

#[test]
fn index_rejects_duplicates_and_empty() {
    assert!(RetrievalIndex::from_vectors(vec![]).is_err());
    assert!(RetrievalIndex::from_vectors(vec![("a".into(), vec![1.0]), ("a".into(), vec![1.0])]).is_err());
}

#[test]
fn recall_boundaries() {
    let (r, c) = ranking_with(&[5], 10);
    assert_eq!(recall_at_k(&[r.clone()], &[c.clone()], 5), 1.0);
    assert_eq!(recall_at_k(&[r], &[c], 4), 0.0);
    let cases: Vec<_> = [1, 2, 5, 9].iter().map(|&k| ranking_with(&[k], 10)).collect();
    let (rs, cs): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
    assert_eq!(recall_at_k(&rs, &cs, 5), 0.75);
}

#[test]
fn map_examples() {
    let (r, c) = ranking_with(&[1, 3], 10);
    assert!((map_at_k(&[r], &[c], 5) - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    let (r, c) = ranking_with(&[7], 10);
    assert_eq!(map_at_k(&[r], &[c], 5), 0.0);
    let (r, c) = ranking_with(&[1, 2, 3], 10);
    assert_eq!(map_at_k(&[r], &[c], 5), 1.0);
}

#[test]
fn precision_examples() {
    let (r, c) = ranking_with(&[2, 4], 10);
    assert_eq!(precision_at_k(&[r], &[c], 4), 0.5);
    let (r, c) = ranking_with(&[1], 10);
    assert_eq!(precision_at_k(&[r], &[c], 1), 1.0);
    let (r, c) = ranking_with(&[9], 10);
    assert_eq!(precision_at_k(&[r], &[c], 3), 0.0);
}

/// Reference metrics from relevance vectors, without sets or early exits.
mod reference {
    pub fn rel(ranking: &[String], gt: &[String]) -> Vec<u32> {
        ranking.iter().map(|id| gt.iter().filter(|g| *g == id).count().min(1) as u32).collect()
    }

    pub fn recall(rel: &[u32], k: usize) -> f64 {
        let mut found = 0;
        for i in 0..k {
            if i < rel.len() {
                found += rel[i];
            }
        }
        if found > 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn precision(rel: &[u32], k: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            if i < rel.len() {
                s += rel[i] as f64;
            }
        }
        s / k as f64
    }

    pub fn ap(rel: &[u32], n_gt: usize, k: usize) -> f64 {
        let mut s = 0.0;
        for i in 1..=k.min(rel.len()) {
            let p_i: f64 = rel[..i].iter().map(|&x| x as f64).sum::<f64>() / i as f64;
            s += p_i * rel[i - 1] as f64;
        }
        s / (n_gt.min(k)) as f64
    }
}

#[test]
fn metrics_match_reference_on_random_instances() {
    let mut rng = crate::seed::rng(11, &["metric-oracle"]);
    for _ in 0..200 {
        let n_items = rng.random_range(1..=20);
        let mut items: Vec<String> = (0..n_items).map(|i| format!("i{i:02}")).collect();
        let n_gt = rng.random_range(1..=n_items.min(5));
        let gt: Vec<String> = items.choose_multiple(&mut rng, n_gt).cloned().collect();
        let n_cases = rng.random_range(1..=6);
        let mut rankings = Vec::new();
        let mut cases = Vec::new();
        for _ in 0..n_cases {
            items.shuffle(&mut rng);
            rankings.push(items.clone());
            cases.push(QueryCase {
                gt_ids: gt.clone(),
                ..case(&[])
            });
        }
        for k in 1..=22 {
            let rels: Vec<Vec<u32>> = rankings.iter().map(|r| reference::rel(r, &gt)).collect();
            let m = n_cases as f64;
            let r_ref: f64 = rels.iter().map(|r| reference::recall(r, k)).sum::<f64>() / m;
            let p_ref: f64 = rels.iter().map(|r| reference::precision(r, k)).sum::<f64>() / m;
            let a_ref: f64 = rels.iter().map(|r| reference::ap(r, n_gt, k)).sum::<f64>() / m;
            assert!((recall_at_k(&rankings, &cases, k) - r_ref).abs() <= 1e-12);
            assert!((precision_at_k(&rankings, &cases, k) - p_ref).abs() <= 1e-12);
            assert!((map_at_k(&rankings, &cases, k) - a_ref).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn moving_a_gt_up_never_lowers_ap(n in 2usize..20, n_gt in 1usize..5, k in 1usize..20, seed in any::<u64>()) {
        let mut rng = crate::seed::rng(seed, &["ap-mono"]);
        let n_gt = n_gt.min(n);
        let mut ranks: Vec<usize> = (1..=n).collect();
        ranks.shuffle(&mut rng);
        ranks.truncate(n_gt);
        let (r, c) = ranking_with(&ranks, n);
        let before = case_average_precision(&r, &c, k);
        let gt: std::collections::HashSet<&String> = c.gt_ids.iter().collect();
        // swap some GT with the item directly above it if that item is not GT
        for p in 1..n {
            if gt.contains(&r[p]) && !gt.contains(&r[p - 1]) {
                let mut moved = r.clone();
                moved.swap(p, p - 1);
                prop_assert!(case_average_precision(&moved, &c, k) >= before - 1e-15);
            }
        }
    }

    #[test]
    fn rank_is_a_permutation(n in 1usize..30, seed in any::<u64>()) {
        let mut rng = crate::seed::rng(seed, &["perm"]);
        let items: Vec<(String, Vec<f32>)> = (0..n)
            .map(|i| (format!("i{i}"), vec![rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0), (i % 3) as f32]))
            .collect();
        let idx = RetrievalIndex::from_vectors(items).unwrap();
        let q = [0.3f32, 0.9, 0.1];
        let r1 = idx.rank(&q, None).unwrap();
        let mut sorted = r1.clone();
        sorted.sort();
        let mut all: Vec<String> = idx.item_ids().to_vec();
        all.sort();
        prop_assert_eq!(sorted, all);
        prop_assert_eq!(r1, idx.rank(&q, None).unwrap());
    }

    #[test]
    fn subset_recall_dominates_full(n in 3usize..20, seed in any::<u64>(), k in 1usize..5) {
        let mut rng = crate::seed::rng(seed, &["subset"]);
        let items: Vec<(String, Vec<f32>)> = (0..n)
            .map(|i| (format!("i{i:02}"), vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0]))
            .collect();
        let idx = RetrievalIndex::from_vectors(items).unwrap();
        let gt = format!("i{:02}", rng.random_range(0..n));
        let mut subset: Vec<String> = idx.item_ids().iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        if !subset.contains(&gt) {
            subset.push(gt.clone());
        }
        let c = QueryCase { gt_ids: vec![gt], ..case(&[]) };
        let q = [rng.random_range(-1.0f32..1.0), 0.5, 0.2];
        let full = idx.rank(&q, None).unwrap();
        let sub = idx.rank(&q, Some(&subset)).unwrap();
        prop_assert!(case_recall(&sub, &c, k) >= case_recall(&full, &c, k));
    }
}

fn tiny_model() -> FusionModel<f32> {
    let cfg = ModelConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        vocab: 64,
        visual_dim: 8,
        fusion: FusionKind::SelfAttn,
        ..ModelConfig::with_dim(16)
    };
    FusionModel::new(cfg, 1).unwrap()
}

fn tiny_synth() -> synth::SynthConfig {
    synth::SynthConfig {
        objects: 3,
        colors: 3,
        domains: 3,
        feature_dim: 8,
        triplets: 20,
        val_queries: 5,
        test_queries: 12,
        ..Default::default()
    }
}

#[test]
fn build_index_is_unit_norm_and_repeatable() {
    let m = tiny_model();
    let ds = synth::task_dataset(&tiny_synth(), 3, Task::Cir).unwrap();
    let recs: Vec<&ImageRecord> = ds.corpus.iter().take(27).collect();
    let a = RetrievalIndex::build(&recs, &m).unwrap();
    let b = RetrievalIndex::build(&recs, &m).unwrap();
    assert_eq!(a.len(), 27);
    assert_eq!(a, b);
    for i in 0..a.len() {
        assert!((norm(a.vector(i)) - 1.0).abs() < 1e-6);
    }
    // self query on an untrained model: only required not to fail
    let q = m.encode_target(&visual_descriptor(recs[0]));
    assert_eq!(a.rank(&q.vector, None).unwrap().len(), 27);
}

#[test]
fn index_snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let idx = toy_index();
    idx.save(dir.path()).unwrap();
    assert_eq!(RetrievalIndex::load(dir.path()).unwrap(), idx);
}

#[test]
fn dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for task in [Task::DomainTransfer, Task::ImageToText] {
        let ds = synth::task_dataset(&tiny_synth(), 3, task).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.cases, ds.cases);
        assert_eq!(back.index_ids, ds.index_ids);
        assert_eq!(back.texts, ds.texts);
        assert_eq!(back.corpus.len(), ds.corpus.len());
        let _ = std::fs::remove_file(dir.path().join("texts.jsonl"));
    }
}

#[test]
fn sbir_overrides_instruction() {
    let c = QueryCase {
        instruction: "anything".into(),
        ..case(&["a"])
    };
    assert_eq!(effective_instruction(Task::Sbir, &c).unwrap(), "find a natural image of it");
    assert_eq!(effective_instruction(Task::Cir, &c).unwrap(), "anything");
}

#[test]
fn domain_transfer_expands_template() {
    let c = QueryCase {
        domain: Some("origami".into()),
        ..case(&["a"])
    };
    assert_eq!(effective_instruction(Task::DomainTransfer, &c).unwrap(), "find this object in origami");
    assert!(effective_instruction(Task::DomainTransfer, &case(&["a"])).is_err());
}

#[test]
fn text_to_image_uses_backbones_only() {
    let m = tiny_model();
    let ds = synth::task_dataset(&tiny_synth(), 4, Task::TextToImage).unwrap();
    let (_, r) = rank_dataset(Task::TextToImage, &ds, &m).unwrap();
    let texts = ds.texts_by_id();
    let images = ds.records_by_id();
    for (c, rank) in ds.cases.iter().zip(&r.full).take(3) {
        let t = &m.backbone_texts(&[texts[c.query_id.as_str()]])[0];
        let score = |id: &str| {
            let v = &m.backbone_images(&[&visual_descriptor(images[id])])[0];
            crate::scalar::dot(t, v) as f64
        };
        let s: Vec<f64> = rank.iter().map(|id| score(id)).collect();
        assert!(s.windows(2).all(|w| w[0] >= w[1] - 1e-6));
    }
}

#[test]
fn every_task_runs_on_synthetic_data() {
    let m = tiny_model();
    for task in [Task::Cir, Task::DomainTransfer, Task::Sbir, Task::TextToImage, Task::ImageToText] {
        let ds = synth::task_dataset(&tiny_synth(), 5, task).unwrap();
        let cfg = EvalConfig { task, ks: vec![1, 5] };
        let rep = run_task(&ds, &m, &cfg).unwrap();
        assert_eq!(rep.queries, 12);
        assert!(rep.metrics.values().all(|v| (0.0..=1.0).contains(v)));
        assert!(rep.get("R@5").unwrap() >= rep.get("R@1").unwrap());
    }
}

#[test]
fn schema_mismatch_fails_before_ranking() {
    let m = tiny_model();
    let ds = synth::task_dataset(&tiny_synth(), 5, Task::Cir).unwrap();
    let cfg = EvalConfig { task: Task::TextToImage, ks: vec![1] };
    assert!(run_task(&ds, &m, &cfg).is_err());
    let mut bad = ds.clone();
    bad.cases[0].gt_ids = vec!["missing".into()];
    assert!(run_task(&bad, &m, &EvalConfig::default()).is_err());
    let mut bad = ds.clone();
    bad.cases[0].subset_ids = Some(vec![bad.index_ids[0].clone()]);
    bad.cases[0].gt_ids = vec![bad.index_ids[1].clone()];
    assert!(run_task(&bad, &m, &EvalConfig::default()).is_err());
}

#[test]
fn subset_cases_report_subset_recall() {
    let m = tiny_model();
    let mut ds = synth::task_dataset(&tiny_synth(), 5, Task::Cir).unwrap();
    for c in &mut ds.cases {
        let mut s = c.gt_ids.clone();
        s.extend(ds.index_ids.iter().take(3).cloned());
        s.dedup();
        c.subset_ids = Some(s);
    }
    let rep = run_task(&ds, &m, &EvalConfig { task: Task::Cir, ks: vec![1, 3] }).unwrap();
    assert!(rep.get("R_s@1").unwrap() >= rep.get("R@1").unwrap());
}

#[test]
fn synthetic_budgets_are_nested() {
    let small = synth::generate(&synth::SynthConfig { triplets: 10, ..tiny_synth() }, 2).unwrap();
    let large = synth::generate(&synth::SynthConfig { triplets: 30, ..tiny_synth() }, 2).unwrap();
    assert_eq!(small.triplets[..], large.triplets[..10]);
    assert_eq!(small.test.cases, large.test.cases);
    assert_eq!(large.test.index_ids.len(), 27);
    // queries are fresh renderings, never index items
    let index: std::collections::HashSet<_> = large.test.index_ids.iter().collect();
    assert!(large.test.cases.iter().all(|c| !index.contains(&c.query_id)));
}

#[test]
fn cir_subsets_hold_the_target_but_not_the_query_combination() {
    let cfg = synth::SynthConfig { colors: 8, ..tiny_synth() };
    let ds = synth::task_dataset(&cfg, 6, Task::Cir).unwrap();
    let by_id = ds.records_by_id();
    for c in &ds.cases {
        let sub = c.subset_ids.as_ref().unwrap();
        assert_eq!(sub[0], c.gt_ids[0]);
        assert!(sub.len() >= 2 && sub.len() <= 6);
        // the query's own combination is rendered under its caption
        let q_caption = by_id[c.query_id.as_str()].caption.clone().unwrap();
        for id in sub {
            assert_ne!(by_id[id.as_str()].caption.as_deref(), Some(q_caption.as_str()), "{id}");
        }
    }
    let r = run_task(&ds, &tiny_model(), &EvalConfig::default()).unwrap();
    assert!(r.get("R_s@1").unwrap() >= r.get("R@1").unwrap());
}
