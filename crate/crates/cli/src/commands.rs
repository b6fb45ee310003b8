//! Subcommand implementations. Each returns its results as values as well as
//! writing them, so tests and the acceptance harness can inspect both.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use frl_core::data::{encode_idx_images, fixture_images, write_ppm, DatasetSource};
use frl_core::models::{sample_seed, train, AnyModel, TrainReport};
use frl_core::scoring::{auroc, score_dataset, timed_score_dataset, weight_sweep, Throughput};
use frl_core::tensor::checkpoint;
use frl_core::{
    Dataset, EvalReport, Family, FittedModel, FrequencyConfig, Image, Label, Manifest, Method, ModelConfig, QuantImage,
    ScoreOptions, ScoreRecord, Scorer, Split,
};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FittedModel,
    pub report: TrainReport,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// In-distribution records first, then each OOD set in config order.
    pub records: Vec<ScoreRecord>,
}

/// One row of a sweep CSV: the swept value, AUROC per OOD set, their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub key: String,
    pub auroc: Vec<(String, f64)>,
    pub average: f64,
}

fn score_options(cfg: &ExperimentConfig) -> ScoreOptions {
    ScoreOptions { seed: cfg.seed, parallel: cfg.parallel, complexity_norm: cfg.complexity_norm }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    write_file(path, w.into_inner()?)
}

/// Trains the model described by `cfg` and writes `checkpoint.bin`,
/// `loss_curve.csv` and the resolved-config snapshot.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let manifest = cfg.validate()?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let ds = manifest.dataset(&cfg.train_set)?;
    let mut model = FittedModel::build(&cfg.model, ds.resolution(), cfg.freq.clone())?;
    let data = ds.images().iter().map(|x| model.encode(x)).collect::<Result<Vec<QuantImage>, _>>()?;
    let start = Instant::now();
    let report = train(model.model.as_dyn_mut(), &data, &cfg.train, |epoch, loss| {
        eprintln!("epoch {epoch}: {loss:.4} bits/dim ({:.0}s)", start.elapsed().as_secs_f64());
    })?;
    write_file(&cfg.checkpoint_path(), checkpoint::to_bytes(model.params()))?;
    let rows: Vec<Vec<String>> =
        report.loss_curve.iter().enumerate().map(|(e, l)| vec![e.to_string(), l.to_string()]).collect();
    write_csv(&cfg.out_dir.join("loss_curve.csv"), &["epoch".into(), "loss_bpd".into()], &rows)?;
    Ok(TrainOutcome { model, report })
}

/// Rebuilds the configured model and loads the checkpoint into it. Shapes
/// are taken from the training set.
pub fn load_model(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<FittedModel> {
    let path = cfg.checkpoint_path();
    let bytes = fs::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let params = checkpoint::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let ds = manifest.dataset(&cfg.train_set)?;
    let mut model = FittedModel::build(&cfg.model, ds.resolution(), cfg.freq.clone())?;
    model
        .load_params(&params)
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))?;
    Ok(model)
}

fn load_eval_sets(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<(Dataset, Vec<Dataset>)> {
    let id = manifest.dataset(&cfg.id_set)?;
    let oods = cfg.ood_sets.iter().map(|n| manifest.dataset(n)).collect::<Result<_, _>>()?;
    Ok((id, oods))
}

/// Scores the in-distribution and OOD sets of `cfg` with `model`.
pub fn evaluate(cfg: &ExperimentConfig, model: &FittedModel, manifest: &Manifest) -> Result<EvalOutcome> {
    cfg.scorer.check(model, cfg.freq.as_ref())?;
    let opts = score_options(cfg);
    let (id, oods) = load_eval_sets(cfg, manifest)?;
    let (id_records, throughput) =
        timed_score_dataset(model, cfg.scorer, cfg.freq.as_ref(), &cfg.id_set, id.images(), &opts)?;
    let id_records: Vec<ScoreRecord> = id_records.into_iter().map(|r| r.with_label(Label::Id)).collect();
    let mut ood_records = Vec::new();
    for ds in &oods {
        let r = score_dataset(model, cfg.scorer, cfg.freq.as_ref(), &ds.name, ds.images(), &opts)?;
        ood_records.push(r.into_iter().map(|r| r.with_label(Label::Ood)).collect::<Vec<_>>());
    }
    let groups: Vec<(&str, &[ScoreRecord])> =
        cfg.ood_sets.iter().map(String::as_str).zip(ood_records.iter().map(Vec::as_slice)).collect();
    let report =
        EvalReport::new(cfg.scorer, (&cfg.id_set, &id_records), &groups, cfg.histogram_bins, Some(throughput))?;
    let records = id_records.into_iter().chain(ood_records.into_iter().flatten()).collect();
    Ok(EvalOutcome { report, records })
}

/// Writes `scores.csv`, `auroc.csv`, `histogram.csv`, `report.json` and
/// `throughput.json` into `dir`.
pub fn write_eval(dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &outcome.records {
        w.serialize(r)?;
    }
    write_file(&dir.join("scores.csv"), w.into_inner()?)?;

    let report = &outcome.report;
    let mut rows: Vec<Vec<String>> = report.auroc.iter().map(|r| vec![r.ood.clone(), r.auroc.to_string()]).collect();
    rows.push(vec!["Average".into(), report.average_auroc.to_string()]);
    write_csv(&dir.join("auroc.csv"), &["ood".into(), "auroc".into()], &rows)?;

    let h = &report.histogram;
    let mut header = vec!["bin_start".to_string(), "bin_end".to_string()];
    header.extend(h.groups.iter().map(|(n, _)| n.clone()));
    let rows: Vec<Vec<String>> = (0..h.edges.len() - 1)
        .map(|b| {
            let mut row = vec![h.edges[b].to_string(), h.edges[b + 1].to_string()];
            row.extend(h.groups.iter().map(|(_, c)| c[b].to_string()));
            row
        })
        .collect();
    write_csv(&dir.join("histogram.csv"), &header, &rows)?;

    write_json(&dir.join("report.json"), report)?;
    #[derive(Serialize)]
    struct ThroughputFile<'a> {
        scorer: Scorer,
        dataset: &'a str,
        throughput: Option<Throughput>,
        note: &'a str,
    }
    write_json(
        &dir.join("throughput.json"),
        &ThroughputFile {
            scorer: report.scorer,
            dataset: &report.id_dataset,
            throughput: report.throughput,
            note: &report.throughput_note,
        },
    )
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    let manifest = cfg.validate()?;
    let model = load_model(cfg, &manifest)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let outcome = evaluate(cfg, &model, &manifest)?;
    write_eval(&cfg.out_dir, &outcome)?;
    Ok(outcome)
}

fn sweep_csv(path: &Path, key: &str, oods: &[String], rows: &[SweepRow]) -> Result<()> {
    let mut header = vec![key.to_string()];
    header.extend(oods.iter().cloned());
    header.push("average_auroc".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.key.clone()];
            v.extend(r.auroc.iter().map(|(_, a)| a.to_string()));
            v.push(r.average.to_string());
            v
        })
        .collect();
    write_csv(path, &header, &body)
}

fn row_from_report(key: String, report: &EvalReport) -> SweepRow {
    SweepRow {
        key,
        auroc: report.auroc.iter().map(|r| (r.ood.clone(), r.auroc)).collect(),
        average: report.average_auroc,
    }
}

/// Scores every evaluation set once per weight on the high-frequency
/// channel of a frequency-trained VAE, reusing the checkpoint.
pub fn ablate_weight(
    cfg: &ExperimentConfig,
    model: &FittedModel,
    manifest: &Manifest,
    weights: &[f64],
) -> Result<Vec<SweepRow>> {
    ensure!(!weights.is_empty(), "no weights given");
    if !matches!(model.model, AnyModel::Vae(_)) || model.freq.is_none() {
        bail!("the weight ablation needs a frequency-trained VAE (family vae with `freq` set)");
    }
    let opts = score_options(cfg);
    let (id, oods) = load_eval_sets(cfg, manifest)?;
    let id_sweep = weight_sweep(model, id.images(), weights, &opts)?;
    let ood_sweeps =
        oods.iter().map(|d| weight_sweep(model, d.images(), weights, &opts)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (j, w) in weights.iter().enumerate() {
        let id_scores = id_sweep.scores(j);
        let mut per = Vec::new();
        for (name, s) in cfg.ood_sets.iter().zip(&ood_sweeps) {
            per.push((name.clone(), auroc(&id_scores, &s.scores(j))?));
        }
        let average = per.iter().map(|(_, a)| a).sum::<f64>() / per.len() as f64;
        rows.push(SweepRow { key: w.to_string(), auroc: per, average });
    }
    Ok(rows)
}

pub fn cmd_ablate_weight(cfg: &ExperimentConfig, weights: &[f64]) -> Result<Vec<SweepRow>> {
    ensure!(weights.iter().all(|w| w.is_finite() && *w >= 0.0), "weights must be finite and non-negative");
    ensure!(cfg.model.family == Family::Vae, "the weight ablation is defined for the VAE only");
    ensure!(cfg.freq.is_some(), "the weight ablation needs a frequency-trained model; set `freq`");
    let manifest = cfg.validate()?;
    let model = load_model(cfg, &manifest)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let rows = ablate_weight(cfg, &model, &manifest, weights)?;
    sweep_csv(&cfg.out_dir.join("ablate_weight.csv"), "weight", &cfg.ood_sets, &rows)?;
    Ok(rows)
}

/// Trains and evaluates one configuration in `dir`.
fn train_and_eval(cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    let trained = cmd_train(cfg)?;
    let manifest = cfg.load_manifest()?;
    let outcome = evaluate(cfg, &trained.model, &manifest)?;
    write_eval(&cfg.out_dir, &outcome)?;
    Ok(outcome)
}

fn sub_config(cfg: &ExperimentConfig, dir: &str, freq: Option<FrequencyConfig>, scorer: Scorer) -> ExperimentConfig {
    ExperimentConfig { freq, scorer, out_dir: cfg.out_dir.join(dir), checkpoint: None, ..cfg.clone() }
}

/// Retrains with each Gaussian kernel size; rows are `k` vs AUROC.
pub fn cmd_ablate_kernel(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    ensure!(!sizes.is_empty(), "no kernel sizes given");
    if let Some(k) = sizes.iter().find(|&&k| k.is_multiple_of(2)) {
        bail!("kernel size {k} is even; sizes must be odd");
    }
    let base = cfg.freq.clone().unwrap_or_default();
    let subs: Vec<ExperimentConfig> = sizes
        .iter()
        .map(|&k| {
            let freq = FrequencyConfig { method: Method::Gaussian, kernel_size: k, ..base.clone() };
            sub_config(cfg, &format!("kernel_{k}"), Some(freq), Scorer::Frl)
        })
        .collect();
    for s in &subs {
        s.validate()?;
    }
    cfg.write_snapshot(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for (k, s) in sizes.iter().zip(&subs) {
        rows.push(row_from_report(k.to_string(), &train_and_eval(s)?.report));
    }
    let spread = rows.iter().map(|r| r.average).fold(f64::NEG_INFINITY, f64::max)
        - rows.iter().map(|r| r.average).fold(f64::INFINITY, f64::min);
    eprintln!("average AUROC spread over kernel sizes: {spread:.4}");
    sweep_csv(&cfg.out_dir.join("ablate_kernel.csv"), "kernel_size", &cfg.ood_sets, &rows)?;
    Ok(rows)
}

/// One plain model scored with `ic` (the "none" row), then one model per
/// high-frequency form scored with `frl`.
pub fn cmd_ablate_freqform(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<SweepRow>> {
    ensure!(!methods.is_empty(), "no methods given");
    let base = cfg.freq.clone().unwrap_or_default();
    let mut subs = vec![("none".to_string(), sub_config(cfg, "form_none", None, Scorer::Ic))];
    for &m in methods {
        let freq = FrequencyConfig { method: m, ..base.clone() };
        subs.push((m.name().to_string(), sub_config(cfg, &format!("form_{}", m.name()), Some(freq), Scorer::Frl)));
    }
    for (_, s) in &subs {
        s.validate()?;
    }
    cfg.write_snapshot(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for (name, s) in &subs {
        rows.push(row_from_report(name.clone(), &train_and_eval(s)?.report));
    }
    sweep_csv(&cfg.out_dir.join("ablate_freqform.csv"), "method", &cfg.ood_sets, &rows)?;
    Ok(rows)
}

pub fn parse_method(s: &str) -> Result<Method> {
    Method::ALL
        .into_iter()
        .find(|m| m.name() == s.to_ascii_lowercase())
        .with_context(|| format!("unknown method {s:?} (expected gaussian, fft or haar)"))
}

/// Toy in-distribution images: one soft blob per image at a seeded position.
fn blob_images(n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    (0..n)
        .map(|i| {
            let r = sample_seed(seed, i as u64);
            let cy = (r % size as u64) as f64;
            let cx = ((r >> 16) % size as u64) as f64;
            let width = 1.0 + ((r >> 32) % 3) as f64;
            let px = (0..size * size)
                .map(|p| {
                    let (y, x) = ((p / size) as f64, (p % size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (40.0 + 200.0 * (-d2 / (2.0 * width * width)).exp()).round() as u8
                })
                .collect();
            Ok(Image::new(size, size, 1, px)?)
        })
        .collect()
}

pub const TOY_SIZE: usize = 8;

/// Writes small PPM and IDX fixtures, a manifest naming them and a toy
/// experiment config that trains in seconds. Returns the config path.
pub fn cmd_fixtures(out: &Path, seed: u64) -> Result<PathBuf> {
    create_dir(out)?;
    let out = out.canonicalize().with_context(|| format!("resolving {}", out.display()))?;
    create_dir(&out.join("ppm"))?;
    for (name, img) in fixture_images(16, 16, 3, seed)? {
        write_ppm(out.join("ppm").join(format!("{name}.ppm")), &img)?;
    }
    write_file(&out.join("toy-train-images-idx3-ubyte"), encode_idx_images(&blob_images(64, TOY_SIZE, seed)?)?)?;
    write_file(
        &out.join("toy-test-images-idx3-ubyte"),
        encode_idx_images(&blob_images(32, TOY_SIZE, seed ^ 0x5eed)?)?,
    )?;
    let res = [TOY_SIZE, TOY_SIZE, 1];
    let datasets = BTreeMap::from([
        (
            "toy_train".to_string(),
            DatasetSource::Idx { path: "toy-train-images-idx3-ubyte".into(), split: Split::Train, limit: None },
        ),
        (
            "toy_test".to_string(),
            DatasetSource::Idx { path: "toy-test-images-idx3-ubyte".into(), split: Split::Test, limit: None },
        ),
        ("noise".to_string(), DatasetSource::Noise { count: 32, resolution: res, seed: seed + 1 }),
        ("constant".to_string(), DatasetSource::Constant { count: 32, resolution: res, seed: seed + 2 }),
        ("fixtures_ppm".to_string(), DatasetSource::PpmDir { path: "ppm".into(), resize: None }),
    ]);
    write_json(&out.join("manifest.json"), &Manifest { datasets })?;
    let mut cfg = ExperimentConfig {
        model: ModelConfig { latent_dim: Some(4), filters: Some(8), layers: Some(2), ..ModelConfig::default() },
        manifest: out.join("manifest.json"),
        train_set: "toy_train".into(),
        id_set: "toy_test".into(),
        ood_sets: vec!["noise".into(), "constant".into()],
        eval_k: 4,
        out_dir: out.join("run"),
        histogram_bins: 10,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.model.iw_samples = cfg.eval_k;
    let path = out.join("toy_config.json");
    write_json(&path, &cfg)?;
    Ok(path)
}
