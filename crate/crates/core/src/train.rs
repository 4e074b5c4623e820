//! SGD with momentum and the deterministic training loop.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::classification_loss;
use crate::nn::{backward_layers, forward_layers, predict_layers, MlpModel};
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is multiplied by
    /// `multiplier` (cumulatively across entries).
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::input("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::input("weight_decay must be >= 0"));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::input("schedule epochs must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// One momentum step: `v <- m v + g + wd p; p <- p - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig, epoch: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd step: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    raw_step(
        params,
        grads,
        velocity,
        cfg.lr_at(epoch),
        cfg.momentum,
        cfg.weight_decay,
    );
    Ok(())
}

pub(crate) fn raw_step(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub min_delta: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        self.sgd.validate()
    }
}

/// True when the best loss of the last `patience` epochs improves on the best
/// earlier loss by less than `min_delta`.
pub(crate) fn plateaued(losses: &[f64], stop: &EarlyStop) -> bool {
    if stop.patience == 0 || losses.len() <= stop.patience {
        return false;
    }
    let split = losses.len() - stop.patience;
    let before = losses[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = losses[split..].iter().copied().fold(f64::INFINITY, f64::min);
    before - recent < stop.min_delta
}

/// Observer called by the training loop.
pub trait TrainHook {
    fn after_step(&mut self, _epoch: usize, _model: &MlpModel) {}
}

impl TrainHook for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss per epoch (evaluated on the batches as they were
    /// seen, before each update).
    pub epoch_losses: Vec<f64>,
}

/// Replaces a batch's inputs before the optimisation step (e.g. with
/// adversarial examples).
pub type BatchPerturb<'a> = dyn FnMut(&MlpModel, &Tensor, &[usize]) -> Result<Tensor> + 'a;

/// Trains every layer with minibatch SGD.
pub fn train_deterministic(
    model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    prng: &mut Prng,
) -> Result<TrainOutcome> {
    let trainable = vec![true; model.depth()];
    fit(model, data, cfg, prng, &trainable, None, &mut ())
}

pub fn train_with_hook(
    model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    prng: &mut Prng,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutcome> {
    let trainable = vec![true; model.depth()];
    fit(model, data, cfg, prng, &trainable, None, hook)
}

/// Runs `input` through `layers[..upto]` in chunks.
pub(crate) fn prefix_features(model: &MlpModel, input: &Tensor, upto: usize) -> Tensor {
    if upto == 0 {
        return input.clone();
    }
    let refs: Vec<_> = model.layers()[..upto].iter().collect();
    let width = refs[upto - 1].outputs();
    let mut out = Vec::with_capacity(input.rows() * width);
    let chunk = 1024;
    let mut start = 0;
    while start < input.rows() {
        let end = (start + chunk).min(input.rows());
        let idx: Vec<usize> = (start..end).collect();
        out.extend_from_slice(predict_layers(&refs, &input.select_rows(&idx)).data());
        start = end;
    }
    Tensor::from_raw(vec![input.rows(), width], out)
}

/// The shared loop. Layers with `trainable[l] == false` are never touched;
/// when every trainable layer sits above a frozen prefix, the prefix output
/// is computed once and reused (unless a perturbation needs raw inputs).
pub(crate) fn fit(
    mut model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    prng: &mut Prng,
    trainable: &[bool],
    mut perturb: Option<&mut BatchPerturb<'_>>,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::dim(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let depth = model.depth();
    let Some(first) = trainable.iter().position(|&t| t) else {
        return Err(Error::input("no trainable layers"));
    };
    let offset = if perturb.is_some() { 0 } else { first };
    let cached = prefix_features(&model, data.features(), offset);
    let labels = data.labels();

    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at(epoch);
        let mut total = 0.0;
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, prng)?.into_iter().enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut x = cached.select_rows(&idx);
            if let Some(p) = perturb.as_mut() {
                x = p(&model, &x, &y)?;
            }
            let refs: Vec<_> = model.layers()[offset..].iter().collect();
            let cache = forward_layers(&refs, &x);
            let out = classification_loss(cache.output(), &y)?;
            if !out.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    reason: format!("loss is {}", out.loss),
                });
            }
            total += out.loss * idx.len() as f64;
            let grads = backward_layers(&refs, &cache, &out.dlogits, first - offset, false);
            drop(refs);
            for l in first..depth {
                if !trainable[l] {
                    continue;
                }
                let g = grads.layers[l - offset].as_ref().expect("visited layer");
                let layer = model.layer_mut(l);
                let (vw, vb) = &mut velocity[l];
                raw_step(
                    layer.weight.data_mut(),
                    g.weight.data(),
                    vw,
                    lr,
                    cfg.sgd.momentum,
                    cfg.sgd.weight_decay,
                );
                raw_step(
                    layer.bias.data_mut(),
                    g.bias.data(),
                    vb,
                    lr,
                    cfg.sgd.momentum,
                    cfg.sgd.weight_decay,
                );
                if !layer.weight.is_finite() || !layer.bias.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        step,
                        reason: format!("layer {} parameters became non-finite", l + 1),
                    });
                }
            }
            hook.after_step(epoch, &model);
        }
        epoch_losses.push(total / data.len() as f64);
        if let Some(stop) = &cfg.early_stop {
            if plateaued(&epoch_losses, stop) {
                break;
            }
        }
    }
    Ok(TrainOutcome { model, epoch_losses })
}

/// Fraction of correctly classified examples under the deterministic model.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let logits = model.predict(data.features())?;
    let correct = (0..data.len())
        .filter(|&i| predicted_class(logits.row(i)) == data.labels()[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Argmax class of one logit row (threshold at 0 for a binary logit).
pub fn predicted_class(logits: &[f64]) -> usize {
    if logits.len() == 1 {
        usize::from(logits[0] > 0.0)
    } else {
        argmax(logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
