//! Acceptance run: one PASS/FAIL line per criterion. Training runs shared
//! between criteria are cached, so the whole run trains each configuration
//! once. Exits nonzero when any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cirkit::cli::config::RunConfig;
use cirkit::cli::experiment::{run_cached, RunCache, RunKey, Variant};
use cirkit::evalkit::{self, synth, QueryCase};
use cirkit::model::{FusionKind, FusionModel, ModelConfig, ParamStore, Tensor};
use cirkit::train::{self, Example};
use cirkit::Result;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

// 1 -------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let sc = synth::SynthConfig {
        objects: 4,
        colors: 4,
        domains: 4,
        feature_dim: 8,
        triplets: 4,
        val_queries: 4,
        test_queries: 4,
        ..Default::default()
    };
    let bench = synth::generate(&sc, 3).unwrap();
    let ex = train::examples(&bench.triplets, &bench.train_corpus).unwrap();
    let mc = ModelConfig {
        layers: 2,
        heads: 4,
        vocab: 128,
        visual_dim: 8,
        ..ModelConfig::with_dim(16)
    };
    let m = FusionModel::<f64>::new(mc, 11).unwrap();
    let f = |p: &ParamStore<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mm = m.clone().with_params(p.clone())?;
        let b: Vec<&Example> = ex.iter().collect();
        let (terms, g) = train::batch_loss(&mm, &b, FusionKind::SelfAttn, true)?;
        Ok((terms.loss, g))
    };
    let rep = train::grad_check(f, m.params(), 50, 1e-5, 5).unwrap();
    let tau = m.params().index_of("temperature").unwrap();
    let tau_rep = train::grad_check_coords(f, m.params(), &[(tau, 0)], 1e-5).unwrap();
    check(
        rep.max_rel_error < 1e-4 && tau_rep.max_rel_error < 1e-6,
        format!(
            "50 coords max rel err {:.2e} (< 1e-4), tau rel err {:.2e} (< 1e-6)",
            rep.max_rel_error, tau_rep.max_rel_error
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn loss_oracles() -> Check {
    let t = |rows: usize, data: Vec<f64>| Tensor::from_vec(rows, data.len() / rows, data);
    // one pair, target aligned, negative orthogonal, tau 1: -ln(e / (e + 1))
    let l1 = train::contrastive_loss(&t(1, vec![1.0, 0.0]), &t(1, vec![1.0, 0.0]), Some(&t(1, vec![0.0, 1.0])), 1.0)
        .unwrap()
        .loss;
    let e = std::f64::consts::E;
    let want1 = (1.0 + 1.0 / e).ln();
    // target and query negative coincide: the two terms are equal, loss ln 2
    let s = 0.6f64;
    let q = t(1, vec![s, (1.0 - s * s).sqrt()]);
    let tg = t(1, vec![0.0, 1.0]);
    let l2 = train::contrastive_loss(&q, &tg, Some(&tg), 0.07).unwrap().loss;
    // jointly permuting a batch leaves the loss unchanged
    let rows = |seed: u64| -> Vec<Vec<f64>> {
        let mut rng = cirkit::seed::rng(seed, &["acceptance-loss"]);
        (0..5)
            .map(|_| {
                let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                v
            })
            .collect()
    };
    let (qs, ts, ns) = (rows(1), rows(2), rows(3));
    let perm = [3usize, 0, 4, 1, 2];
    let pick = |r: &[Vec<f64>]| perm.iter().map(|&i| r[i].clone()).collect::<Vec<_>>();
    let base = train::contrastive_loss(&Tensor::from_rows(&qs), &Tensor::from_rows(&ts), Some(&Tensor::from_rows(&ns)), 0.3)
        .unwrap()
        .loss;
    let permuted = train::contrastive_loss(
        &Tensor::from_rows(&pick(&qs)),
        &Tensor::from_rows(&pick(&ts)),
        Some(&Tensor::from_rows(&pick(&ns))),
        0.3,
    )
    .unwrap()
    .loss;
    let errs = [(l1 - want1).abs(), (l2 - std::f64::consts::LN_2).abs(), (base - permuted).abs()];
    check(
        errs.iter().all(|e| *e < 1e-9) && (l1 - 0.313262).abs() < 1e-6,
        format!("{l1:.9} vs 0.313262, {l2:.12} vs ln 2, permutation diff {:.1e}", errs[2]),
    )
}

// 3 -------------------------------------------------------------------------

/// Brute-force metrics straight from the definitions over 0/1 relevance.
fn reference(rel: &[bool], n_gt: usize, k: usize) -> (f64, f64, f64) {
    let top = &rel[..k.min(rel.len())];
    let recall = if top.iter().any(|&r| r) { 1.0 } else { 0.0 };
    let precision = top.iter().filter(|&&r| r).count() as f64 / k as f64;
    let mut ap = 0.0;
    for i in 0..top.len() {
        if top[i] {
            ap += top[..=i].iter().filter(|&&r| r).count() as f64 / (i + 1) as f64;
        }
    }
    (recall, precision, ap / n_gt.min(k) as f64)
}

fn metric_oracle() -> Check {
    let mut rng = cirkit::seed::rng(2024, &["acceptance-metrics"]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=25);
        let mut items: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let cases_n = rng.random_range(1..=5);
        let mut rankings = Vec::new();
        let mut cases = Vec::new();
        for c in 0..cases_n {
            let n_gt = rng.random_range(1..=n.min(6));
            let gt: Vec<String> = items.choose_multiple(&mut rng, n_gt).cloned().collect();
            items.shuffle(&mut rng);
            rankings.push(items.clone());
            cases.push(QueryCase {
                query_id: format!("q{c}"),
                instruction: String::new(),
                gt_ids: gt,
                subset_ids: None,
                domain: None,
            });
        }
        for k in 1..=n + 2 {
            let mut sums = (0.0, 0.0, 0.0);
            for (r, c) in rankings.iter().zip(&cases) {
                let gt: HashSet<&String> = c.gt_ids.iter().collect();
                let rel: Vec<bool> = r.iter().map(|id| gt.contains(id)).collect();
                let (a, b, m) = reference(&rel, gt.len(), k);
                sums = (sums.0 + a, sums.1 + b, sums.2 + m);
            }
            let m = cases_n as f64;
            worst = worst
                .max((evalkit::recall_at_k(&rankings, &cases, k) - sums.0 / m).abs())
                .max((evalkit::precision_at_k(&rankings, &cases, k) - sums.1 / m).abs())
                .max((evalkit::map_at_k(&rankings, &cases, k) - sums.2 / m).abs());
        }
    }
    check(worst <= 1e-12, format!("200 instances, max abs diff {worst:.1e}"))
}

// 4 -------------------------------------------------------------------------

fn cirkit(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cirkit"))
        .args(args)
        .env_remove("CIRKIT_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("run cirkit");
    assert!(
        out.status.success(),
        "cirkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[derive(serde::Deserialize)]
struct Expected {
    pairs: Vec<(String, String)>,
    stats: BTreeMap<String, u64>,
}

fn pipeline_exactness() -> Check {
    let demo = root().join("data/demo");
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(demo.join("expected.json")).unwrap()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let pairs = tmp.path().join(run).join("pairs.jsonl");
        let stats = tmp.path().join(run).join("stats.json");
        cirkit(&[
            "mine",
            "-c",
            demo.join("demo.toml").to_str().unwrap(),
            "--paths.pairs",
            pairs.to_str().unwrap(),
            "--paths.mining_stats",
            stats.to_str().unwrap(),
        ]);
        outputs.push((std::fs::read(pairs).unwrap(), std::fs::read(stats).unwrap()));
    }
    let pairs: HashSet<(String, String)> = String::from_utf8(outputs[0].0.clone())
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["query_id"].as_str().unwrap().to_string(), v["target_id"].as_str().unwrap().to_string())
        })
        .collect();
    let want: HashSet<(String, String)> = expected.pairs.into_iter().collect();
    let stats: BTreeMap<String, u64> = serde_json::from_slice(&outputs[0].1).unwrap();
    let same_bytes = outputs[0] == outputs[1];
    let nonzero = ["removed_duplicates", "removed_low_resolution", "pairs_rejected_thresholds", "pairs_rejected_cap"]
        .iter()
        .all(|k| stats.get(*k).copied().unwrap_or(0) > 0);
    check(
        pairs == want && stats == expected.stats && same_bytes && nonzero,
        format!(
            "pairs {}/{} expected, stats {}, reruns {}",
            pairs.intersection(&want).count(),
            want.len(),
            if stats == expected.stats { "match" } else { "DIFFER" },
            if same_bytes { "byte-identical" } else { "DIFFER" }
        ),
    )
}

// 5-8 -----------------------------------------------------------------------

struct Runs {
    cfg: RunConfig,
    cache: RunCache,
}

impl Runs {
    fn get(&mut self, variant: Variant, seed: u64, budget: usize) -> cirkit::cli::experiment::RunResult {
        run_cached(&self.cfg, &mut self.cache, RunKey { variant, seed, budget }).unwrap()
    }
}

fn learning_signal(runs: &mut Runs) -> Check {
    let cfg = runs.cfg.clone();
    let budget = cfg.synth.triplets;
    let bench = synth::generate(&cfg.synth, 1).unwrap();
    let mc = ModelConfig {
        visual_dim: cfg.synth.feature_dim,
        ..cfg.model.clone()
    };
    let untrained = FusionModel::<f32>::new(mc, 1).unwrap();
    let r0 = evalkit::cir_recall_at_1(&bench.test, &untrained).unwrap();
    let trained = runs.get(Variant::Main, 1, budget);
    let random = 1.0 / cfg.synth.index_size() as f64;
    check(
        trained.r1 >= 5.0 * r0 && trained.r1 >= 5.0 * random && cfg.train.max_steps <= 2000 && budget >= 2000,
        format!(
            "{budget} triplets, {} steps, index {}: R@1 {:.3} vs untrained {:.3} and random {:.4}",
            trained.steps,
            cfg.synth.index_size(),
            trained.r1,
            r0,
            random
        ),
    )
}

fn query_negative_ablation(runs: &mut Runs) -> Check {
    let budget = runs.cfg.synth.triplets;
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1, 2] {
        let w = runs.get(Variant::Main, seed, budget);
        let wo = runs.get(Variant::NoQueryNegatives, seed, budget);
        ok &= w.self_r1 < wo.self_r1 && w.r1 > wo.r1;
        parts.push(format!(
            "seed {seed}: self@1 {:.3} < {:.3}, R@1 {:.3} > {:.3}",
            w.self_r1, wo.self_r1, w.r1, wo.r1
        ));
    }
    check(ok, parts.join("; "))
}

fn architecture_ablation(runs: &mut Runs) -> Check {
    let budget = runs.cfg.synth.triplets;
    let main = runs.get(Variant::Main, 1, budget);
    let frozen = runs.get(Variant::Frozen, 1, budget);
    check(
        frozen.r1 <= main.r1,
        format!("frozen R@1 {:.3} <= trained R@1 {:.3}", frozen.r1, main.r1),
    )
}

fn data_scaling(runs: &mut Runs) -> Check {
    let budgets = [500usize, 2000, 10000];
    let means: Vec<f64> = budgets
        .iter()
        .map(|&b| (runs.get(Variant::Main, 1, b).r1 + runs.get(Variant::Main, 2, b).r1) / 2.0)
        .collect();
    let ok = means.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let shown: Vec<String> = budgets.iter().zip(&means).map(|(b, m)| format!("{b}: {m:.3}")).collect();
    check(ok, format!("mean R@1 over seeds 1, 2 -> {}", shown.join(", ")))
}

// 9 -------------------------------------------------------------------------

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const REPRO_CONFIG: &str = r#"seed = 5

[paths]
corpus = "synth/train_corpus.jsonl"
triplets = "synth/triplets.jsonl"
val_dataset = "synth/val"
eval_dataset = "synth/test"
checkpoint = "run/model.ckpt"
metrics = "run/metrics.csv"
report = "run/report.json"
index_snapshot = "run/index"
out_dir = "experiments"

[model]
dim = 16
layers = 2
heads = 2
ffn = 32
vocab = 128

[train]
batch_size = 16
max_steps = 40
lr_new = 2e-3
lr_backbone = 2e-4
eval_every = 20

[synth]
objects = 5
colors = 5
domains = 4
triplets = 120
val_queries = 30
test_queries = 30

[experiment]
budgets = [60, 120]
seeds = [1]

[plot]
input = "run/metrics.csv"
output = "run/metrics.svg"
x = "step"
y = "train_loss"
"#;

fn reproducibility() -> Check {
    let demo = root().join("data/demo");
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("run.toml");
        std::fs::write(&cfg, REPRO_CONFIG).unwrap();
        let c = cfg.to_str().unwrap();
        let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
        cirkit(&["synth", "-c", c]);
        cirkit(&["train", "-c", c]);
        cirkit(&["eval", "-c", c]);
        cirkit(&["plot", "-c", c]);
        cirkit(&["experiment", "query_neg_ablation", "-c", c]);
        let demo_cfg = demo.join("demo.toml");
        let (pairs, stats, triplets) = (p("mine/pairs.jsonl"), p("mine/stats.json"), p("mine/triplets.jsonl"));
        let d = demo_cfg.to_str().unwrap();
        cirkit(&["mine", "-c", d, "--paths.pairs", &pairs, "--paths.mining_stats", &stats]);
        cirkit(&[
            "instruct",
            "-c",
            d,
            "--paths.pairs",
            &pairs,
            "--paths.triplets",
            &triplets,
            "--paths.instruct_stats",
            &p("mine/instruct_stats.json"),
        ]);
        trees.push(files_under(&dir));
    }
    let differing: Vec<String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    check(
        differing.is_empty() && same_set,
        if differing.is_empty() {
            format!("{} output files byte-identical across reruns (mine, instruct, synth, train, eval, plot, experiment)", trees[0].len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Check, Duration, Option<Duration>)> = Vec::new();
    let mut run = |n: usize, name: &'static str, budget: Option<Duration>, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let c = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f()))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                check(false, format!("panicked: {msg}"))
            });
        let took = t.elapsed();
        let line = (n, name, c, took, budget);
        print_line(&line);
        results.push(line);
    };

    let cfg = RunConfig::load(Some(&root().join("configs/synthetic.toml")), &[]).expect("load preset");
    let mut runs = Runs {
        cfg,
        cache: RunCache::default(),
    };
    let secs = Duration::from_secs;
    run(1, "gradient correctness", Some(secs(60)), &mut gradient_correctness);
    run(2, "loss unit oracles", None, &mut loss_oracles);
    run(3, "metric oracle equivalence", Some(secs(30)), &mut metric_oracle);
    run(4, "pipeline exactness on the demo corpus", Some(secs(30)), &mut pipeline_exactness);
    run(5, "end-to-end learning signal", Some(secs(600)), &mut || learning_signal(&mut runs));
    run(6, "query-negative ablation", None, &mut || query_negative_ablation(&mut runs));
    run(7, "architecture ablation", None, &mut || architecture_ablation(&mut runs));
    run(8, "data scaling", None, &mut || data_scaling(&mut runs));
    run(9, "reproducibility", None, &mut reproducibility);

    let failed = results
        .iter()
        .filter(|(_, _, c, took, budget)| !c.pass || budget.is_some_and(|b| *took > b))
        .count();
    println!("\nacceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line((n, name, c, took, budget): &(usize, &str, Check, Duration, Option<Duration>)) {
    let over = budget.is_some_and(|b| *took > b);
    let verdict = if c.pass && !over { "PASS" } else { "FAIL" };
    let limit = budget.map(|b| format!(", limit {} s", b.as_secs())).unwrap_or_default();
    println!(
        "[{verdict}] {n}. {name}: {} ({:.1} s{limit})",
        c.detail,
        took.as_secs_f64()
    );
}
