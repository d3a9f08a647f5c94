//! Run configuration: one TOML or JSON file, `--set key=value` overrides,
//! and a single root seed from which every subsystem seed is derived.

use std::path::{Path, PathBuf};

use dialogue_metric::corpus::SplitFractions;
use dialogue_metric::rng::{self, stream};
use dialogue_metric::sampling::SamplingPolicy;
use dialogue_metric::scorer::ScorerConfig;
use dialogue_metric::synthetic::SyntheticSpec;
use dialogue_metric::training::Hyperparams;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "MAUDE_SEED";
pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Falls back to `MAUDE_SEED`; one of the two is required.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ScorerConfig,
    pub sampling: SamplingPolicy,
    pub training: Hyperparams,
    pub eval: EvalConfig,
    pub correlate: CorrelateConfig,
    pub probe: ProbeConfig,
    pub adapter: Option<AdapterConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("run"),
            workers: 0,
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ScorerConfig::default(),
            sampling: SamplingPolicy::default(),
            training: Hyperparams::default(),
            eval: EvalConfig::default(),
            correlate: CorrelateConfig::default(),
            probe: ProbeConfig::default(),
            adapter: None,
        }
    }
}

/// Where dialogues come from. With no paths set, the `[synthetic]` corpus is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One corpus, split by `split`.
    pub corpus: Option<PathBuf>,
    /// Pre-split corpora; all three must be given together.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub split: SplitFractions,
    /// Two-column TSV synonym table for the paraphraser.
    pub synonyms: Option<PathBuf>,
    pub paraphrase_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            train: None,
            val: None,
            test: None,
            split: SplitFractions::new(0.8, 0.1, 0.1),
            synonyms: None,
            paraphrase_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to `<output_dir>/ckpt-best`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the test split.
    pub corpus: Option<PathBuf>,
    pub modes: Vec<String>,
    /// Extra corpus for a zero-shot report.
    pub zero_shot_corpus: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            corpus: None,
            modes: dialogue_metric::eval::EvalMode::ALL
                .iter()
                .map(|m| m.name().to_string())
                .collect(),
            zero_shot_corpus: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateConfig {
    pub logs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Defaults to the full data corpus.
    pub corpus: Option<PathBuf>,
    pub bins: usize,
    /// Also run the shuffled-utterance ablation.
    pub shuffled: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            corpus: None,
            bins: dialogue_metric::probe::DEFAULT_BINS,
            shuffled: false,
        }
    }
}

/// External encoder reached over the subprocess wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub dim: usize,
    #[serde(default)]
    pub pooling: Option<String>,
}

/// Reads a config file (`.json` as JSON, anything else as TOML) into a TOML value tree.
pub fn read_value(path: Option<&Path>) -> Result<toml::Table, CliError> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid JSON config {}: {e}", path.display())))?;
        toml::Table::try_from(json).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| CliError::Usage(format!("invalid TOML config {}: {e}", path.display())))
    }
}

/// Applies one `key.path=value` override. The value is parsed as a TOML
/// literal when possible and kept as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let value = parse_literal(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Loads, overrides, resolves the seed and derives subsystem seeds.
/// Without `require_seed` (scoring draws nothing random) a missing seed becomes 0.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    workers: Option<usize>,
    require_seed: bool,
) -> Result<RunConfig, CliError> {
    let mut table = read_value(path)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if cfg.seed.is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            cfg.seed = Some(s);
        }
    }
    if !require_seed {
        cfg.seed.get_or_insert(0);
    }
    let seed = cfg.seed.ok_or_else(|| {
        CliError::Usage(format!(
            "no seed: set `seed` in the config, `--set seed=N`, or {SEED_ENV}"
        ))
    })?;
    cfg.derive_seeds(seed);
    Ok(cfg)
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.expect("seed resolved at load")
    }

    /// Every subsystem seed is a function of the root seed, so one number
    /// pins the whole run.
    fn derive_seeds(&mut self, seed: u64) {
        self.synthetic.seed = rng::derive(seed, &[stream::SYNTH]);
        self.model.seed = rng::derive(seed, &[stream::INIT]);
        self.model.encoder.seed = rng::derive(seed, &[stream::INIT, 1]);
        self.sampling.seed = rng::derive(seed, &[stream::NEGATIVES]);
        self.training.seed = rng::derive(seed, &[stream::SHUFFLE]);
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive(self.seed(), &[stream::SPLIT])
    }

    pub fn eval_seed(&self) -> u64 {
        rng::derive(self.seed(), &[stream::EVAL])
    }

    pub fn probe_seed(&self) -> u64 {
        rng::derive(self.seed(), &[stream::PROBE])
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("ckpt-best"))
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Paths that must exist before `command` starts.
    pub fn required_paths(&self, command: &str) -> Vec<PathBuf> {
        let d = &self.data;
        let mut paths: Vec<PathBuf> = [&d.corpus, &d.train, &d.val, &d.test, &d.synonyms]
            .into_iter()
            .flatten()
            .cloned()
            .collect();
        match command {
            "evaluate" => {
                paths.push(self.checkpoint_path());
                paths.extend(self.eval.corpus.clone());
                paths.extend(self.eval.zero_shot_corpus.clone());
            }
            "correlate" => {
                paths.push(self.checkpoint_path());
                paths.extend(self.correlate.logs.clone());
            }
            "probe" => paths.extend(self.probe.corpus.clone()),
            _ => {}
        }
        paths
    }

    /// Value checks that need no data, so bad configs fail with exit 2.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: dialogue_metric::Error| CliError::Usage(format!("invalid config: {e}"));
        self.model.validate().map_err(usage)?;
        self.sampling.validate().map_err(usage)?;
        self.training.validate().map_err(usage)?;
        self.synthetic.validate().map_err(usage)?;
        let f = self.data.split;
        if [f.train, f.val, f.test].iter().any(|x| !(0.0..=1.0).contains(x))
            || (f.train + f.val + f.test - 1.0).abs() > 1e-9
        {
            return Err(CliError::Usage(
                "data.split fractions must lie in [0,1] and sum to 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.paraphrase_rate) {
            return Err(CliError::Usage("data.paraphrase_rate must lie in [0,1]".into()));
        }
        if self.probe.bins < 2 {
            return Err(CliError::Usage("probe.bins must be at least 2".into()));
        }
        Ok(())
    }

    pub fn check_paths(&self, command: &str) -> Result<(), CliError> {
        let d = &self.data;
        let split_given = [&d.train, &d.val, &d.test].iter().filter(|p| p.is_some()).count();
        if split_given != 0 && split_given != 3 {
            return Err(CliError::Usage(
                "data.train, data.val and data.test must be given together".into(),
            ));
        }
        if split_given == 3 && d.corpus.is_some() {
            return Err(CliError::Usage(
                "give either data.corpus or data.train/val/test, not both".into(),
            ));
        }
        if command == "correlate" && self.correlate.logs.is_none() {
            return Err(CliError::Usage("correlate needs correlate.logs".into()));
        }
        for p in self.required_paths(command) {
            if !p.exists() {
                return Err(CliError::Usage(format!("path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }
}
