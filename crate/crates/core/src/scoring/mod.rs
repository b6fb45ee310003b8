//! OOD scores from model likelihoods and PNG code lengths, plus the evaluation
//! metrics built on them. Higher scores mean "more out-of-distribution".

mod metrics;
mod recon;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::png_code_length;
use crate::data::Image;
use crate::frequency::FrequencyConfig;
use crate::models::{sample_seed, AnyModel, FittedModel, ModelError, QuantImage};

pub use metrics::{
    auroc, calibrate_threshold, measure_throughput, overlap, threshold_classify, Histogram, Label, Throughput,
};
pub use recon::{recon_metrics, ssim, ssim_window, ReconMetrics, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("empty score list")]
    Empty,
    #[error("non-finite score")]
    NonFinite,
    #[error("need at least 2 histogram bins, got {0}")]
    Bins(usize),
    #[error("shape mismatch: {left} vs {right} values")]
    ShapeMismatch { left: usize, right: usize },
    #[error("frequency config {got:?} does not match the model's training config {expected:?}")]
    FreqMismatch { expected: Option<FrequencyConfig>, got: Option<FrequencyConfig> },
    #[error("scorer `{0}` needs a model trained on plain images")]
    PlainModelRequired(Scorer),
    #[error("scorer `{0}` needs a model trained on frequency-augmented images")]
    FreqModelRequired(Scorer),
    #[error("the channel-weight sweep needs a frequency-trained VAE")]
    WeightSweepModel,
    #[error("sample {sample_id} has a non-finite score")]
    NonFiniteSample { sample_id: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Plain negative log-likelihood of the model input.
    Nll,
    /// NLL minus PNG complexity under a plain model.
    Ic,
    /// NLL of the frequency-augmented input minus PNG complexity.
    Frl,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Nll, Scorer::Ic, Scorer::Frl];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Nll => "nll",
            Scorer::Ic => "ic",
            Scorer::Frl => "frl",
        }
    }

    /// Whether the scorer subtracts `L(x)`.
    pub fn uses_complexity(self) -> bool {
        !matches!(self, Scorer::Nll)
    }

    /// Checks that `model` and `freq` may be used together by this scorer.
    pub fn check(self, model: &FittedModel, freq: Option<&FrequencyConfig>) -> Result<(), ScoringError> {
        match self {
            Scorer::Ic if model.freq.is_some() => return Err(ScoringError::PlainModelRequired(self)),
            Scorer::Frl if model.freq.is_none() => return Err(ScoringError::FreqModelRequired(self)),
            _ => {}
        }
        if model.freq.as_ref() != freq {
            return Err(ScoringError::FreqMismatch { expected: model.freq.clone(), got: freq.cloned() });
        }
        Ok(())
    }

    pub fn fuse(self, nll_bpd: f64, complexity_bpd: f64) -> f64 {
        if self.uses_complexity() {
            nll_bpd - complexity_bpd
        } else {
            nll_bpd
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Scorer::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown scorer `{s}` (expected nll, ic or frl)"))
    }
}

/// Denominator used to turn the PNG code length into bits per dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityNorm {
    /// `dim(x)`, the image the code length was measured on.
    #[default]
    Image,
    /// `dim` of the model input, so both terms share one denominator.
    ModelInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    /// Base of the per-sample seeds `sample_seed(seed, sample_id)`.
    pub seed: u64,
    /// Score samples on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub complexity_norm: ComplexityNorm,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { seed: 0, parallel: false, complexity_norm: ComplexityNorm::Image }
    }
}

/// One scored sample. `label` is left unset by the scorers and filled in by
/// the evaluation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub dataset: String,
    pub label: Option<Label>,
    pub nll_bpd: f64,
    pub complexity_bpd: f64,
    pub score: f64,
}

impl ScoreRecord {
    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

/// Score-independent per-sample quantities: the model NLL of its own input
/// encoding and `L(x)`. Every scorer is a fusion of these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub sample_id: usize,
    pub nll_bpd: f64,
    pub complexity_bpd: f64,
}

impl Components {
    pub fn record(&self, scorer: Scorer, dataset: &str) -> ScoreRecord {
        let complexity_bpd = if scorer.uses_complexity() { self.complexity_bpd } else { 0.0 };
        ScoreRecord {
            sample_id: self.sample_id,
            dataset: dataset.to_string(),
            label: None,
            nll_bpd: self.nll_bpd,
            complexity_bpd,
            score: scorer.fuse(self.nll_bpd, self.complexity_bpd),
        }
    }
}

fn complexity_bpd(model: &FittedModel, image: &Image, norm: ComplexityNorm) -> f64 {
    let l = png_code_length(image);
    match norm {
        ComplexityNorm::Image => l.bits_per_dim,
        ComplexityNorm::ModelInput => l.code_bits / model.spec().dim() as f64,
    }
}

fn encode_for_complexity(model: &FittedModel, image: &Image) -> Result<(QuantImage, Image), ModelError> {
    let x = model.encode(image)?;
    // L(x) is measured on the image as the model sees it (after any channel
    // adaptation), so cross-channel OOD sets are compared like for like.
    let img = if image.channels() == model.image_channels() {
        image.clone()
    } else {
        crate::data::adapt_channels(image, model.image_channels())
            .map_err(|e| ModelError::Architecture(e.to_string()))?
    };
    Ok((x, img))
}

fn map_samples<R: Send>(
    images: &[Image],
    parallel: bool,
    f: impl Fn(usize, &Image) -> Result<R, ScoringError> + Sync,
) -> Result<Vec<R>, ScoringError> {
    if parallel {
        images.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        images.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Components of one image. `sample_id` also selects the sample's seed.
pub fn components(
    model: &FittedModel,
    image: &Image,
    sample_id: usize,
    opts: &ScoreOptions,
) -> Result<Components, ScoringError> {
    let (x, img) = encode_for_complexity(model, image)?;
    let seed = sample_seed(opts.seed, sample_id as u64);
    let nll_bpd = model.model.as_dyn().nll_bits(&[&x], &[seed])?[0];
    let c = Components { sample_id, nll_bpd, complexity_bpd: complexity_bpd(model, &img, opts.complexity_norm) };
    if !(c.nll_bpd.is_finite() && c.complexity_bpd.is_finite()) {
        return Err(ScoringError::NonFiniteSample { sample_id });
    }
    Ok(c)
}

/// Components of every image, `sample_id` = position in `images`.
pub fn dataset_components(
    model: &FittedModel,
    images: &[Image],
    opts: &ScoreOptions,
) -> Result<Vec<Components>, ScoringError> {
    map_samples(images, opts.parallel, |i, x| components(model, x, i, opts))
}

/// Scores every image of one dataset, sorted by `sample_id`.
pub fn score_dataset(
    model: &FittedModel,
    scorer: Scorer,
    freq: Option<&FrequencyConfig>,
    dataset: &str,
    images: &[Image],
    opts: &ScoreOptions,
) -> Result<Vec<ScoreRecord>, ScoringError> {
    scorer.check(model, freq)?;
    let mut out: Vec<ScoreRecord> =
        dataset_components(model, images, opts)?.iter().map(|c| c.record(scorer, dataset)).collect();
    out.sort_by_key(|r| r.sample_id);
    Ok(out)
}

/// [`score_dataset`] timed over the scoring loop, after one untimed warm-up
/// sample.
pub fn timed_score_dataset(
    model: &FittedModel,
    scorer: Scorer,
    freq: Option<&FrequencyConfig>,
    dataset: &str,
    images: &[Image],
    opts: &ScoreOptions,
) -> Result<(Vec<ScoreRecord>, Throughput), ScoringError> {
    scorer.check(model, freq)?;
    let first = images.first().ok_or(ScoringError::Empty)?;
    components(model, first, 0, opts)?;
    let start = Instant::now();
    let records = score_dataset(model, scorer, freq, dataset, images, opts)?;
    Ok((records, Throughput::from_elapsed(images.len(), start.elapsed().as_secs_f64())))
}

fn single(
    model: &FittedModel,
    scorer: Scorer,
    freq: Option<&FrequencyConfig>,
    image: &Image,
    sample_id: usize,
    opts: &ScoreOptions,
) -> Result<ScoreRecord, ScoringError> {
    scorer.check(model, freq)?;
    Ok(components(model, image, sample_id, opts)?.record(scorer, ""))
}

/// NLL of the model's own input encoding (`x_F` for frequency-trained
/// models); the complexity field is zero.
pub fn score_nll(
    model: &FittedModel,
    image: &Image,
    freq: Option<&FrequencyConfig>,
    sample_id: usize,
    opts: &ScoreOptions,
) -> Result<ScoreRecord, ScoringError> {
    single(model, Scorer::Nll, freq, image, sample_id, opts)
}

/// `nll(x) - L(x)` under a plain model.
pub fn score_ic(
    model: &FittedModel,
    image: &Image,
    sample_id: usize,
    opts: &ScoreOptions,
) -> Result<ScoreRecord, ScoringError> {
    single(model, Scorer::Ic, None, image, sample_id, opts)
}

/// `nll(x_F) - L(x)`; `freq` must equal the model's training config.
pub fn score_frl(
    model: &FittedModel,
    image: &Image,
    freq: &FrequencyConfig,
    sample_id: usize,
    opts: &ScoreOptions,
) -> Result<ScoreRecord, ScoringError> {
    single(model, Scorer::Frl, Some(freq), image, sample_id, opts)
}

/// Channel-weighted VAE bound per weight, with `L(x)` shared. Row `i` holds
/// the NLL (bits/dim) of sample `i` for each weight in `weights`.
pub struct WeightSweep {
    pub weights: Vec<f64>,
    pub nll_bpd: Vec<Vec<f64>>,
    pub complexity_bpd: Vec<f64>,
}

impl WeightSweep {
    /// FRL-style scores `nll_w - L(x)` for weight index `j`.
    pub fn scores(&self, j: usize) -> Vec<f64> {
        self.nll_bpd.iter().zip(&self.complexity_bpd).map(|(n, l)| n[j] - l).collect()
    }
}

/// Evaluates the high-frequency channel weight sweep on a frequency-trained
/// VAE, one set of posterior draws per sample shared by all weights.
pub fn weight_sweep(
    model: &FittedModel,
    images: &[Image],
    weights: &[f64],
    opts: &ScoreOptions,
) -> Result<WeightSweep, ScoringError> {
    let AnyModel::Vae(vae) = &model.model else {
        return Err(ScoringError::WeightSweepModel);
    };
    if model.freq.is_none() {
        return Err(ScoringError::WeightSweepModel);
    }
    let k = vae.config().iw_samples;
    let rows = map_samples(images, opts.parallel, |i, image| {
        let (x, img) = encode_for_complexity(model, image)?;
        let nll = vae.channel_weight_sweep(&x, k, weights, sample_seed(opts.seed, i as u64))?;
        Ok((nll, complexity_bpd(model, &img, opts.complexity_norm)))
    })?;
    let (nll_bpd, complexity_bpd) = rows.into_iter().unzip();
    Ok(WeightSweep { weights: weights.to_vec(), nll_bpd, complexity_bpd })
}

/// AUROC of one OOD set against the in-distribution scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub ood: String,
    pub auroc: f64,
}

/// Everything `eval` reports for one scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: Scorer,
    pub id_dataset: String,
    pub auroc: Vec<AurocRow>,
    /// Unweighted mean of the per-set AUROCs.
    pub average_auroc: f64,
    pub throughput: Option<Throughput>,
    /// Timings cover the scoring loop only, never data loading.
    pub throughput_note: String,
    pub histogram: Histogram,
}

impl EvalReport {
    /// Builds the report from labelled records: `id` in-distribution, `oods`
    /// one list per OOD set.
    pub fn new(
        scorer: Scorer,
        id: (&str, &[ScoreRecord]),
        oods: &[(&str, &[ScoreRecord])],
        bins: usize,
        throughput: Option<Throughput>,
    ) -> Result<Self, ScoringError> {
        if oods.is_empty() {
            return Err(ScoringError::Empty);
        }
        let scores = |r: &[ScoreRecord]| -> Vec<f64> {
            let mut r = r.to_vec();
            r.sort_by_key(|x| x.sample_id);
            r.iter().map(|x| x.score).collect()
        };
        let id_scores = scores(id.1);
        let ood_scores: Vec<Vec<f64>> = oods.iter().map(|(_, r)| scores(r)).collect();
        let mut rows = Vec::new();
        for ((name, _), s) in oods.iter().zip(&ood_scores) {
            rows.push(AurocRow { ood: name.to_string(), auroc: auroc(&id_scores, s)? });
        }
        let average_auroc = rows.iter().map(|r| r.auroc).sum::<f64>() / rows.len() as f64;
        let mut groups: Vec<(&str, &[f64])> = vec![(id.0, &id_scores)];
        groups.extend(oods.iter().zip(&ood_scores).map(|((n, _), s)| (*n, s.as_slice())));
        Ok(Self {
            scorer,
            id_dataset: id.0.to_string(),
            auroc: rows,
            average_auroc,
            throughput,
            throughput_note: "wall-clock over the scoring loop only; data loading excluded".into(),
            histogram: Histogram::new(&groups, bins)?,
        })
    }

    pub fn auroc_for(&self, ood: &str) -> Option<f64> {
        self.auroc.iter().find(|r| r.ood == ood).map(|r| r.auroc)
    }
}
