//! Run configuration: one TOML file, environment seed override and dotted
//! flag overrides, in increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::corpus::CorpusMode;
use crate::error::{Error, Result};
use crate::evalkit::synth::SynthConfig;
use crate::evalkit::EvalConfig;
use crate::mining::FilterConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides `seed` from the config file.
pub const SEED_ENV: &str = "CIRKIT_SEED";

/// File locations. Empty means unset. Relative paths in a config file
/// resolve against the file's directory; relative paths given as flags
/// resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Annotation sidecar, read when `annotate.annotator = "file"`.
    pub annotations: PathBuf,
    /// Embedding sidecar, read when `scoring.backend = "file"`.
    pub embeddings: PathBuf,
    pub pairs: PathBuf,
    pub mining_stats: PathBuf,
    pub triplets: PathBuf,
    pub instruct_stats: PathBuf,
    /// Validation dataset directory; unset disables model selection.
    pub val_dataset: PathBuf,
    pub eval_dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    /// Where `eval` stores the index it built; unset skips the snapshot.
    pub index_snapshot: PathBuf,
    /// Replacement prompt assets; unset uses the bundled file.
    pub prompt_assets: PathBuf,
    /// Recorded responses for `instruct.client = "replay"`.
    pub replay: PathBuf,
    /// Experiment outputs.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = PathBuf::from;
        Paths {
            corpus: p("corpus.jsonl"),
            annotations: p("annotations.jsonl"),
            embeddings: PathBuf::new(),
            pairs: p("out/pairs.jsonl"),
            mining_stats: p("out/mining_stats.json"),
            triplets: p("out/triplets.jsonl"),
            instruct_stats: p("out/instruct_stats.json"),
            val_dataset: PathBuf::new(),
            eval_dataset: p("out/eval"),
            checkpoint: p("out/model.ckpt"),
            metrics: p("out/metrics.csv"),
            report: p("out/report.json"),
            index_snapshot: PathBuf::new(),
            prompt_assets: PathBuf::new(),
            replay: PathBuf::new(),
            out_dir: p("out/experiments"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    /// Pixel corpus when any line carries `pixels_b64`.
    #[default]
    Auto,
    Synthetic,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub mode: ModeChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorChoice {
    /// Replay `paths.annotations`.
    #[default]
    File,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSection {
    pub annotator: AnnotatorChoice,
    /// Mock annotator label buckets.
    pub buckets: u64,
    /// Mock annotator alt-text block list.
    pub blocked_terms: Vec<String>,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        let m = crate::annotate::MockAnnotator::default();
        AnnotateSection {
            annotator: AnnotatorChoice::File,
            buckets: m.buckets,
            blocked_terms: m.blocked_terms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    /// Replay `paths.embeddings` when set, otherwise hash.
    #[default]
    Auto,
    Hashing,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub backend: BackendChoice,
    /// Hashing backend width.
    pub dim: usize,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            backend: BackendChoice::Auto,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstructMode {
    #[default]
    TemplateFree,
    TemplateBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClientChoice {
    #[default]
    Mock,
    Replay,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InstructSection {
    pub mode: InstructMode,
    pub client: ClientChoice,
    /// Shell command for `client = "command"`.
    pub command: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Regenerate the planted-relation benchmark for every seed.
    #[default]
    Synthetic,
    /// Use `paths.triplets`, `paths.corpus` and the dataset directories.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub source: DataSource,
    /// Triplet budgets for `data_scaling`; each is a prefix of the data.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            source: DataSource::Synthetic,
            budgets: vec![100, 500, 2000, 10000],
            seeds: vec![1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Column on the horizontal axis.
    pub x: String,
    /// Column on the vertical axis.
    pub y: String,
    /// Column splitting rows into series; empty draws one series.
    pub group: String,
    /// Logarithmic horizontal axis.
    pub log_x: bool,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection {
            input: PathBuf::from("out/metrics.csv"),
            output: PathBuf::from("out/metrics.svg"),
            x: "step".into(),
            y: "train_loss".into(),
            group: String::new(),
            log_x: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub annotate: AnnotateSection,
    pub scoring: ScoringSection,
    pub filter: FilterConfig,
    pub instruct: InstructSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub experiment: ExperimentSection,
    pub plot: PlotSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            annotate: AnnotateSection::default(),
            scoring: ScoringSection::default(),
            filter: FilterConfig::default(),
            instruct: InstructSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            experiment: ExperimentSection::default(),
            plot: PlotSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        if self.scoring.dim == 0 {
            return Err(Error::config("scoring.dim must be positive"));
        }
        if self.annotate.buckets == 0 {
            return Err(Error::config("annotate.buckets must be positive"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must not be empty"));
        }
        if self.experiment.budgets.is_empty() || self.experiment.budgets.contains(&0) {
            return Err(Error::config("experiment.budgets must be a nonempty list of positive counts"));
        }
        Ok(())
    }

    pub fn corpus_mode(&self, corpus_text: &str) -> CorpusMode {
        match self.corpus.mode {
            ModeChoice::Auto => crate::corpus::detect_mode(corpus_text),
            ModeChoice::Synthetic => CorpusMode::Synthetic,
            ModeChoice::Pixel => CorpusMode::Pixel,
        }
    }

    /// Loads `file` (if any), applies the environment seed and then the
    /// dotted overrides, and validates the result.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match file {
            Some(path) => {
                let text = crate::io::read_to_string(path)?;
                let mut t: Table = toml::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                fill_path_defaults(&mut t);
                let base = path.parent().unwrap_or(Path::new(""));
                resolve_paths(&mut t, base);
                t
            }
            None => Table::new(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV} = `{s}` is not an unsigned integer")))?;
            root.insert("seed".into(), Value::Integer(seed as i64));
        }
        for (key, raw) in overrides {
            set_dotted(&mut root, key, parse_value(raw))?;
        }
        let cfg: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Copies unset path defaults into a file's table so that they, too,
/// resolve against the file's directory.
fn fill_path_defaults(root: &mut Table) {
    let Value::Table(defaults) = Value::try_from(RunConfig::default()).expect("config serializes") else {
        unreachable!("config serializes to a table")
    };
    let fill = |root: &mut Table, section: &str, keys: &[&str]| {
        let Some(Value::Table(d)) = defaults.get(section) else { return };
        if let Value::Table(t) = root.entry(section).or_insert_with(|| Value::Table(Table::new())) {
            for &k in keys {
                if let (false, Some(v)) = (t.contains_key(k), d.get(k)) {
                    t.insert(k.to_string(), v.clone());
                }
            }
        }
    };
    let path_keys: Vec<String> = match defaults.get("paths") {
        Some(Value::Table(d)) => d.keys().cloned().collect(),
        _ => Vec::new(),
    };
    fill(root, "paths", &path_keys.iter().map(String::as_str).collect::<Vec<_>>());
    fill(root, "plot", &["input", "output"]);
}

fn resolve_paths(root: &mut Table, base: &Path) {
    let resolve = |v: &mut Value| {
        if let Value::String(s) = v {
            if !s.is_empty() && Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
    };
    if let Some(Value::Table(paths)) = root.get_mut("paths") {
        paths.iter_mut().for_each(|(_, v)| resolve(v));
    }
    if let Some(Value::Table(plot)) = root.get_mut("plot") {
        for key in ["input", "output"] {
            if let Some(v) = plot.get_mut(key) {
                resolve(v);
            }
        }
    }
}

/// A flag value as TOML (numbers, booleans, arrays), else a bare string.
pub fn parse_value(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Probe {
        v: Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::config(format!("override `{key}`: `{part}` is not a section"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--section.key value` and `--section.key=value` out of `args`.
/// Everything else is returned untouched for the argument parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|body| body.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => match body.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::config(format!("override `--{body}` needs a value")))?;
                    overrides.push((body.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Every configuration key with its default, one per line.
pub fn defaults_listing() -> String {
    let value = Value::try_from(RunConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.join("\n")
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("  --{prefix} {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let d = RunConfig::default();
        d.validate().unwrap();
        let back: RunConfig = toml::from_str(&d.to_toml()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let c = RunConfig::load(
            None,
            &ov(&[
                ("filter.img_img_min", "0.5"),
                ("train.crossattn", "true"),
                ("experiment.budgets", "[10, 20]"),
                ("paths.corpus", "x/y.jsonl"),
            ]),
        )
        .unwrap();
        assert_eq!(c.filter.img_img_min, 0.5);
        assert!(c.train.crossattn);
        assert_eq!(c.experiment.budgets, [10, 20]);
        assert_eq!(c.paths.corpus, PathBuf::from("x/y.jsonl"));
    }

    #[test]
    fn out_of_range_threshold_is_rejected() {
        let e = RunConfig::load(None, &ov(&[("filter.img_img_min", "1.01")])).unwrap_err();
        assert!(e.to_string().contains("img_img_min"), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::load(None, &ov(&[("filter.bogus", "1")])).is_err());
        assert!(RunConfig::load(None, &ov(&[("seed.x", "1")])).is_err());
    }

    #[test]
    fn file_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.toml");
        std::fs::write(&f, "[paths]\ncorpus = \"c.jsonl\"\n[filter]\nmin_resolution = 24\n").unwrap();
        let c = RunConfig::load(Some(&f), &ov(&[("paths.pairs", "p.jsonl")])).unwrap();
        assert_eq!(c.paths.corpus, dir.path().join("c.jsonl"));
        assert_eq!(c.paths.pairs, PathBuf::from("p.jsonl"));
        assert_eq!(c.paths.report, dir.path().join("out/report.json"));
        assert_eq!(c.plot.output, dir.path().join("out/metrics.svg"));
        assert_eq!(c.paths.embeddings, PathBuf::new());
        assert_eq!(c.filter.min_resolution, 24);
    }

    #[test]
    fn extraction_handles_both_spellings() {
        let args: Vec<String> = ["mine", "--config", "a.toml", "--filter.x", "1", "--train.y=2", "--seed", "3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, o) = extract_overrides(args).unwrap();
        assert_eq!(rest, ["mine", "--config", "a.toml", "--seed", "3"]);
        assert_eq!(o, ov(&[("filter.x", "1"), ("train.y", "2")]));
        assert!(extract_overrides(vec!["--a.b".into()]).is_err());
    }

    #[test]
    fn listing_covers_nested_keys() {
        let l = defaults_listing();
        for key in ["--seed 1", "--filter.img_img_min 0.82", "--train.loss.tau_min", "--paths.corpus"] {
            assert!(l.contains(key), "missing {key}");
        }
    }
}
