use serde::{Deserialize, Serialize};

use super::ScoringError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Id,
    Ood,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Id => "ID",
            Label::Ood => "OOD",
        }
    }
}

/// `score <= lambda` is in-distribution.
pub fn threshold_classify(scores: &[f64], lambda: f64) -> Vec<Label> {
    scores.iter().map(|&s| if s <= lambda { Label::Id } else { Label::Ood }).collect()
}

/// Smallest observed score that labels at least `fraction` of `scores` ID.
pub fn calibrate_threshold(scores: &[f64], fraction: f64) -> Result<f64, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((fraction.clamp(0.0, 1.0) * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Ok(s[k - 1])
}

/// Area under the ROC curve with OOD as the positive class: the probability a
/// random OOD score exceeds a random ID score, ties counting one half.
///
/// Computed from midranks (Mann-Whitney U) in `O(n log n)`.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64, ScoringError> {
    if id.is_empty() || ood.is_empty() {
        return Err(ScoringError::Empty);
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(ScoringError::NonFinite);
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&v| (v, false)).chain(ood.iter().map(|&v| (v, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n0, n1) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n0 * n1))
}

/// Counts over bin edges shared by every group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub groups: Vec<(String, Vec<u64>)>,
}

impl Histogram {
    /// `bins` equal-width bins spanning all values of all groups. When every
    /// value is equal the span is widened to one unit around it.
    pub fn new(groups: &[(&str, &[f64])], bins: usize) -> Result<Self, ScoringError> {
        if bins < 2 {
            return Err(ScoringError::Bins(bins));
        }
        let values = || groups.iter().flat_map(|(_, v)| v.iter().copied());
        if values().any(|v| !v.is_finite()) {
            return Err(ScoringError::NonFinite);
        }
        let lo = values().fold(f64::INFINITY, f64::min);
        let hi = values().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let groups = groups
            .iter()
            .map(|(name, vals)| {
                let mut counts = vec![0u64; bins];
                for &v in vals.iter() {
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    counts[b] += 1;
                }
                (name.to_string(), counts)
            })
            .collect();
        Ok(Self { edges, groups })
    }

    pub fn counts(&self, name: &str) -> Option<&[u64]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}

/// Shared-bin overlap `sum_i min(a_i / |a|, b_i / |b|)` in `[0, 1]`.
pub fn overlap(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub secs_per_image: f64,
}

impl Throughput {
    pub fn from_elapsed(images: usize, secs: f64) -> Self {
        Self { images_per_sec: images as f64 / secs, secs_per_image: secs / images as f64 }
    }
}

/// Times `f` over `items` after one untimed warm-up call on the first item.
pub fn measure_throughput<I, E>(items: &[I], mut f: impl FnMut(&I) -> Result<(), E>) -> Result<Throughput, E> {
    if let Some(first) = items.first() {
        f(first)?;
    }
    let start = std::time::Instant::now();
    for it in items {
        f(it)?;
    }
    Ok(Throughput::from_elapsed(items.len(), start.elapsed().as_secs_f64()))
}
