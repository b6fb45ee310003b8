use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{rng_for, sample_seed, GenerativeModel, ModelError, QuantImage};
use crate::tensor::{AdamConfig, AdamState, Graph, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` uses the family's default rate.
    pub lr: Option<f64>,
    /// Halve the rate after every this many epochs.
    pub lr_halve_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 64, lr: None, lr_halve_every: Some(30), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, bits/dim.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch Adam over shuffled epochs. Shuffling and per-sample noise come
/// from `config.seed` only, so a run is reproducible bit for bit.
pub fn train<M: GenerativeModel + ?Sized>(
    model: &mut M,
    data: &[QuantImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(ModelError::Architecture("batch_size must be positive".into()));
    }
    let base_lr = config.lr.unwrap_or_else(|| model.default_lr());
    let mut adam = AdamState::new(AdamConfig { lr: base_lr, ..AdamConfig::default() }, model.params());
    let mut rng = rng_for(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        if let Some(every) = config.lr_halve_every.filter(|&e| e > 0) {
            adam.set_lr(base_lr * 0.5f64.powi((epoch / every) as i32));
        }
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&QuantImage> = chunk.iter().map(|&i| &data[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|i| sample_seed(config.seed ^ step, i as u64)).collect();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let loss = match model.loss(&mut g, &p, &batch, &seeds) {
                Ok(l) => l,
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ModelError::NonFiniteLoss { epoch, batch: b })
                }
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item().expect("scalar loss") as f64;
            if !value.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<_> = p.vars().iter().map(|&v| grads.take(v)).collect();
            adam.step(model.params_mut(), &grads)?;
            total += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let mean = total / count as f64;
        on_epoch(epoch, mean);
        report.loss_curve.push(mean);
    }
    report.steps = step;
    model.mark_trained();
    Ok(report)
}
