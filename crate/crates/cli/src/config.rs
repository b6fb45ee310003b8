//! Experiment configuration: JSON file, `FRL_OUT`, then dotted `--a.b=v` flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use frl_core::models::TrainConfig;
use frl_core::scoring::ComplexityNorm;
use frl_core::{FrequencyConfig, Manifest, ModelConfig, Scorer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUT_ENV: &str = "FRL_OUT";
pub const SNAPSHOT: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// `None` trains and scores on plain images.
    pub freq: Option<FrequencyConfig>,
    /// Dataset manifest; relative paths resolve against the working directory.
    pub manifest: PathBuf,
    pub train_set: String,
    pub id_set: String,
    pub ood_sets: Vec<String>,
    pub scorer: Scorer,
    /// Base of the per-sample evaluation seeds.
    pub seed: u64,
    /// Importance samples per VAE likelihood. Copied into `model.iw_samples`.
    pub eval_k: usize,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
    pub histogram_bins: usize,
    pub parallel: bool,
    pub complexity_norm: ComplexityNorm,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            freq: Some(FrequencyConfig::default()),
            manifest: PathBuf::from("data/manifest.json"),
            train_set: "fmnist_train".into(),
            id_set: "fmnist_test".into(),
            ood_sets: vec!["mnist".into(), "noise".into(), "constant".into()],
            scorer: Scorer::Frl,
            seed: 0,
            eval_k: 20,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            histogram_bins: 50,
            parallel: false,
            complexity_norm: ComplexityNorm::Image,
        }
    }
}

impl ExperimentConfig {
    /// Defaults < `file` < `FRL_OUT` (`env_out`) < `overrides`.
    pub fn resolve(file: Option<&Path>, env_out: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg: ExperimentConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                serde_json::to_value(cfg)?
            }
            None => serde_json::to_value(Self::default())?,
        };
        if let Some(out) = env_out.filter(|s| !s.is_empty()) {
            value["out_dir"] = Value::String(out.into());
        }
        for (path, raw) in overrides {
            set_path(&mut value, path, parse_value(raw))?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value).context("applying overrides")?;
        cfg.model.iw_samples = cfg.eval_k;
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.bin"))
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let m =
            Manifest::load(&self.manifest).with_context(|| format!("loading manifest {}", self.manifest.display()))?;
        m.validate()?;
        Ok(m)
    }

    /// Everything that can be checked without loading images or training.
    pub fn validate(&self) -> Result<Manifest> {
        ensure!(self.eval_k >= 1, "eval_k must be at least 1");
        ensure!(self.histogram_bins >= 2, "histogram_bins must be at least 2");
        ensure!(self.train.batch_size >= 1, "train.batch_size must be at least 1");
        ensure!((2..=256).contains(&self.model.quant_levels), "model.quant_levels must be in 2..=256");
        if let Some(f) = &self.freq {
            // Image size is unknown here; size-dependent limits are checked at build.
            f.validate(usize::MAX, usize::MAX)?;
        }
        match (self.scorer, &self.freq) {
            (Scorer::Frl, None) => bail!("scorer frl needs a frequency-trained model; set `freq`"),
            (Scorer::Ic, Some(_)) => bail!("scorer ic needs a plain model; set `freq` to null"),
            _ => {}
        }
        let m = self.load_manifest()?;
        for name in std::iter::once(&self.train_set).chain([&self.id_set]).chain(&self.ood_sets) {
            ensure!(m.datasets.contains_key(name), "dataset {name:?} is not in {}", self.manifest.display());
        }
        let mut seen = BTreeSet::new();
        for name in &self.ood_sets {
            ensure!(seen.insert(name), "OOD set {name:?} listed twice");
            ensure!(name != &self.id_set, "OOD set {name:?} is the in-distribution set");
        }
        Ok(m)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Pulls `--a.b=v` style overrides out of `args` and returns the rest. A
/// flag counts as an override when its first path segment is a config key.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys: Vec<String> = match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.strip_prefix("--").and_then(|s| s.split_once('=')).filter(|(path, _)| {
            let head = path.split('.').next().unwrap_or("");
            keys.iter().any(|k| k == head)
        });
        match parsed {
            Some((path, v)) => overrides.push((path.to_string(), v.to_string())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

/// JSON if it parses, otherwise a bare string, so `--scorer=ic` works.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    ensure!(parts.iter().all(|p| !p.is_empty()), "bad override path {path:?}");
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            // e.g. `--freq.kernel_size=7` with `freq: null` starts from defaults.
            *cur = Value::Object(Default::default());
        }
        let Value::Object(map) = cur else {
            bail!("override {path:?}: {} is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), v);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}
