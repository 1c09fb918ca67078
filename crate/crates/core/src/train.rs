//! Training loop, evaluation and model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape};
use crate::data::{stack, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{forward, ModelParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    pub val_mean_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation F1 (earliest on ties).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    images: &Tensor,
    masks: &Tensor,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let out = forward(&params.config, &mut tape, &bound, x)?;
    let loss = tape.dice_bce_loss(out.logits, masks, cfg.loss)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::contract(format!("non-finite training loss {value}")));
    }
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    adam_step(&mut params.store, &grads, state, &cfg.adam)?;
    Ok(value)
}

const EVAL_BATCH: usize = 8;

/// Sigmoid probabilities for each sample, `[N,1,H,W]`.
pub fn predict(params: &ModelParams, samples: &[&Sample]) -> Result<Tensor> {
    let mut all = Vec::new();
    let mut dims = None;
    for chunk in samples.chunks(EVAL_BATCH) {
        let (images, _) = stack(chunk)?;
        let logits = params.predict_logits(&images)?;
        let d = logits.dims().to_vec();
        dims.get_or_insert([0, d[1], d[2], d[3]])[0] += d[0];
        all.extend(logits.data().iter().map(|&v| sigmoid(v)));
    }
    let dims = dims.ok_or_else(|| Error::contract("nothing to predict"))?;
    Tensor::from_values(&dims, all)
}

pub fn evaluate(params: &ModelParams, samples: &[&Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let prob = predict(params, samples)?;
    let (_, masks) = stack(samples)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    compute_metrics(&prob, &masks, threshold, &ids)
}

/// Trains `init` on the train split, evaluating on val after every epoch.
pub fn train(
    init: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training needs non-empty train and val splits"));
    }
    let mut params = init;
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (images, masks) = stack(&batch)?;
            total += train_step(&mut params, &mut state, &images, &masks, cfg)?;
            batches += 1;
        }
        let val = evaluate(&params, &val_set, cfg.threshold)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_mean_iou: val.mean_iou,
            val_mean_f1: val.mean_f1,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(f1, _, _)| val.mean_f1 > *f1) {
            best = Some((val.mean_f1, epoch, params.clone()));
        }
        history.push(record);
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        last: params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Clutter, SynthConfig};
    use crate::model::ModelConfig;

    fn corpus() -> Dataset {
        generate(&SynthConfig {
            size: 16,
            count: 20,
            seed: 3,
            clutter: Clutter::Low,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn history_length_and_determinism() {
        let ds = corpus();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let p = ModelParams::init(ModelConfig::default().with_base_channels(2), 1).unwrap();
            train(p, &ds, &cfg, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn empty_val_rejected() {
        let mut ds = corpus();
        ds.val.clear();
        let p = ModelParams::init(ModelConfig::default().with_base_channels(2), 1).unwrap();
        assert!(matches!(
            train(p, &ds, &TrainConfig::default(), |_| {}),
            Err(Error::Contract(_))
        ));
    }
}
