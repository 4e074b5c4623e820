//! Mean-field Gaussian layer and two-phase STF training.
//!
//! Phase 1 is ordinary deterministic training ([`crate::train`]). Phase 2
//! replaces one layer by `Q(theta1) = N(mu, diag(softplus(rho)^2))`, freezes
//! every other layer and maximises the ELBO with the reparameterisation
//! `theta1 = mu + softplus(rho) * eps`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::{classification_loss, sigmoid, softplus};
use crate::nn::{backward_layers, forward_layers, predict_layers, Activation, DenseLayer, MlpModel};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::train::{prefix_features, raw_step, SgdConfig};

/// Lowest and highest `rho` kept after an update. `softplus(-40)` is about
/// `4e-18`, so sigma stays strictly positive.
pub const RHO_MIN: f64 = -40.0;
pub const RHO_MAX: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalInit {
    /// Standard deviation (not variance) of the zero-mean `mu` draw.
    pub mu_std: f64,
    pub rho_mean: f64,
    /// Standard deviation of the `rho` draw around `rho_mean`.
    pub rho_std: f64,
    /// Start `mu` at the pretrained weights instead of a random draw.
    #[serde(default)]
    pub mu_from_pretrained: bool,
}

impl Default for VariationalInit {
    fn default() -> Self {
        Self {
            mu_std: 0.1,
            rho_mean: -2.25,
            rho_std: 0.1,
            mu_from_pretrained: false,
        }
    }
}

/// Gaussian posterior over one dense layer's weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub rho_w: Tensor,
    pub rho_b: Tensor,
    pub activation: Activation,
}

/// One posterior draw and the noise that produced it.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub layer: DenseLayer,
    pub eps_w: Tensor,
    pub eps_b: Tensor,
}

impl VariationalLayer {
    pub fn new(mu_w: Tensor, mu_b: Tensor, rho_w: Tensor, rho_b: Tensor, activation: Activation) -> Result<Self> {
        DenseLayer::new(mu_w.clone(), mu_b.clone(), activation)?;
        if rho_w.shape() != mu_w.shape() || rho_b.shape() != mu_b.shape() {
            return Err(Error::dim("rho shapes must match mu shapes"));
        }
        Ok(Self {
            mu_w,
            mu_b,
            rho_w,
            rho_b,
            activation,
        })
    }

    /// Random initialisation for a layer with the given fan-in and fan-out.
    pub fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        init: &VariationalInit,
        prng: &mut Prng,
    ) -> Self {
        let mut draw =
            |len: usize, mean: f64, std: f64| -> Vec<f64> { (0..len).map(|_| prng.gaussian(mean, std)).collect() };
        let mu_w = draw(inputs * outputs, 0.0, init.mu_std);
        let mu_b = draw(outputs, 0.0, init.mu_std);
        let rho_w = draw(inputs * outputs, init.rho_mean, init.rho_std);
        let rho_b = draw(outputs, init.rho_mean, init.rho_std);
        Self {
            mu_w: Tensor::from_raw(vec![outputs, inputs], mu_w),
            mu_b: Tensor::from_raw(vec![outputs], mu_b),
            rho_w: Tensor::from_raw(vec![outputs, inputs], rho_w),
            rho_b: Tensor::from_raw(vec![outputs], rho_b),
            activation,
        }
    }

    /// Posterior centred on `layer` with every `rho` equal to `rho`.
    pub fn around(layer: &DenseLayer, rho: f64) -> Self {
        Self {
            mu_w: layer.weight.clone(),
            mu_b: layer.bias.clone(),
            rho_w: Tensor::full(layer.weight.shape(), rho),
            rho_b: Tensor::full(layer.bias.shape(), rho),
            activation: layer.activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.mu_w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.mu_w.rows()
    }

    pub fn num_params(&self) -> usize {
        self.mu_w.len() + self.mu_b.len()
    }

    pub fn sigma_w(&self) -> Tensor {
        self.rho_w.map(softplus)
    }

    pub fn sigma_b(&self) -> Tensor {
        self.rho_b.map(softplus)
    }

    /// Posterior variances, weights first (row-major) then biases.
    pub fn variances(&self) -> Vec<f64> {
        self.rho_w
            .data()
            .iter()
            .chain(self.rho_b.data())
            .map(|&r| softplus(r).powi(2))
            .collect()
    }

    pub fn mean_layer(&self) -> DenseLayer {
        DenseLayer {
            weight: self.mu_w.clone(),
            bias: self.mu_b.clone(),
            activation: self.activation,
        }
    }

    /// `theta = mu + softplus(rho) * eps` for the given noise.
    pub fn layer_at(&self, eps_w: &Tensor, eps_b: &Tensor) -> DenseLayer {
        let mix = |mu: &Tensor, rho: &Tensor, eps: &Tensor| {
            let data = mu
                .data()
                .iter()
                .zip(rho.data())
                .zip(eps.data())
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            Tensor::from_raw(mu.shape().to_vec(), data)
        };
        DenseLayer {
            weight: mix(&self.mu_w, &self.rho_w, eps_w),
            bias: mix(&self.mu_b, &self.rho_b, eps_b),
            activation: self.activation,
        }
    }

    pub fn sample(&self, prng: &mut Prng) -> WeightSample {
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_raw(shape.to_vec(), (0..n).map(|_| prng.normal()).collect())
        };
        let eps_w = draw(self.mu_w.shape());
        let eps_b = draw(self.mu_b.shape());
        WeightSample {
            layer: self.layer_at(&eps_w, &eps_b),
            eps_w,
            eps_b,
        }
    }
}

/// `theta1` draw and noise for the layer.
pub fn sample_weights(layer: &VariationalLayer, prng: &mut Prng) -> WeightSample {
    layer.sample(prng)
}

/// `KL(N(mu, sigma^2) || N(0, 1))` summed over every scalar.
pub fn kl_gaussian_to_std_normal(layer: &VariationalLayer) -> f64 {
    kl_terms(
        layer.mu_w.data().iter().chain(layer.mu_b.data()),
        layer
            .rho_w
            .data()
            .iter()
            .chain(layer.rho_b.data())
            .map(|&r| softplus(r).powi(2)),
    )
}

/// `sum 0.5 (var + mu^2 - 1 - ln var)`.
pub fn kl_terms<'a>(mu: impl Iterator<Item = &'a f64>, var: impl Iterator<Item = f64>) -> f64 {
    mu.zip(var).map(|(m, v)| 0.5 * (v + m * m - 1.0 - v.ln())).sum()
}

/// Deterministic network with one layer replaced by a [`VariationalLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StfModel {
    /// Frozen layers below the Bayesian one.
    pub prefix: Vec<DenseLayer>,
    pub bayes: VariationalLayer,
    /// Frozen layers above the Bayesian one.
    pub suffix: Vec<DenseLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StfCheckpoint {
    config_hash: String,
    model: StfModel,
}

impl StfModel {
    /// Splits `model` around the 1-based layer `index`.
    pub fn from_pretrained(model: &MlpModel, index: usize, bayes: VariationalLayer) -> Result<Self> {
        let d = model.depth();
        if index == 0 || index > d {
            return Err(Error::input(format!("bayes layer index {index} outside 1..={d}")));
        }
        let replaced = model.layer(index - 1);
        if bayes.mu_w.shape() != replaced.weight.shape() || bayes.activation != replaced.activation {
            return Err(Error::dim(format!(
                "variational layer {:?} does not match layer {index} {:?}",
                bayes.mu_w.shape(),
                replaced.weight.shape()
            )));
        }
        Ok(Self {
            prefix: model.layers()[..index - 1].to_vec(),
            bayes,
            suffix: model.layers()[index..].to_vec(),
        })
    }

    /// 1-based position of the Bayesian layer.
    pub fn bayes_index(&self) -> usize {
        self.prefix.len() + 1
    }

    pub fn depth(&self) -> usize {
        self.prefix.len() + 1 + self.suffix.len()
    }

    pub fn input_dim(&self) -> usize {
        self.prefix.first().map_or(self.bayes.inputs(), DenseLayer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.suffix.last().map_or(self.bayes.outputs(), DenseLayer::outputs)
    }

    fn with_layer(&self, layer: DenseLayer) -> MlpModel {
        let mut layers = self.prefix.clone();
        layers.push(layer);
        layers.extend(self.suffix.iter().cloned());
        MlpModel::new(layers).expect("STF model keeps a valid chain")
    }

    /// Deterministic network at `theta1 = mu`.
    pub fn mean_model(&self) -> MlpModel {
        self.with_layer(self.bayes.mean_layer())
    }

    pub fn sample_model(&self, prng: &mut Prng) -> MlpModel {
        self.with_layer(self.bayes.sample(prng).layer)
    }

    /// Frozen layers in network order (`theta2`).
    pub fn frozen_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.prefix.iter().chain(&self.suffix)
    }

    /// Output of the frozen prefix, i.e. the Bayesian layer's input.
    pub fn prefix_features(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_matrix("input batch")?;
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if self.prefix.is_empty() {
            return Ok(x.clone());
        }
        let refs: Vec<_> = self.prefix.iter().collect();
        Ok(predict_layers(&refs, x))
    }

    /// Logits from prefix features `h` with the Bayesian layer set to `layer`.
    pub(crate) fn logits_from_prefix(&self, h: &Tensor, layer: &DenseLayer) -> Tensor {
        let mut refs = vec![layer];
        refs.extend(self.suffix.iter());
        predict_layers(&refs, h)
    }

    pub fn save_json(&self, path: &Path, config_hash: &str) -> Result<()> {
        let ck = StfCheckpoint {
            config_hash: config_hash.to_string(),
            model: self.clone(),
        };
        checkpoint::save(path, checkpoint::STF_FORMAT, &ck)
    }

    /// Returns the model and the config hash it was saved with.
    pub fn load_json(path: &Path) -> Result<(Self, String)> {
        let ck: StfCheckpoint = checkpoint::load(path, checkpoint::STF_FORMAT)?;
        let m = &ck.model;
        VariationalLayer::new(
            m.bayes.mu_w.clone(),
            m.bayes.mu_b.clone(),
            m.bayes.rho_w.clone(),
            m.bayes.rho_b.clone(),
            m.bayes.activation,
        )?;
        let mut layers = m.prefix.clone();
        layers.push(m.bayes.mean_layer());
        layers.extend(m.suffix.iter().cloned());
        MlpModel::new(layers)?;
        Ok((ck.model, ck.config_hash))
    }
}

/// How the KL term is weighted against the mean per-example NLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `1 / m`: over one epoch of `m / B` batches the KL is counted once.
    PerEpoch,
    /// `1 / B`: the full KL added to every batch's summed NLL.
    Unit,
    Fixed(f64),
}

impl KlWeighting {
    pub fn weight(self, m: usize, batch_size: usize) -> f64 {
        match self {
            KlWeighting::PerEpoch => 1.0 / m as f64,
            KlWeighting::Unit => 1.0 / batch_size as f64,
            KlWeighting::Fixed(w) => w,
        }
    }
}

fn default_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate, momentum and schedule for `(mu, rho)`; the weight decay
    /// is applied to `mu` only.
    pub sgd: SgdConfig,
    pub kl_weighting: KlWeighting,
    #[serde(default = "default_samples")]
    pub mc_samples_per_step: usize,
    #[serde(default)]
    pub init: VariationalInit,
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        if self.mc_samples_per_step == 0 {
            return Err(Error::input("mc_samples_per_step must be >= 1"));
        }
        if let KlWeighting::Fixed(w) = self.kl_weighting {
            if !(w >= 0.0) {
                return Err(Error::input("fixed KL weight must be >= 0"));
            }
        }
        self.sgd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    /// `nll + kl_weight * kl`.
    pub loss: f64,
    /// Mean cross-entropy over the batch.
    pub nll: f64,
    pub kl: f64,
}

/// Gradient of the fixed-noise ELBO loss with respect to `(mu, rho)`.
#[derive(Debug, Clone)]
pub struct VariationalGrad {
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub rho_w: Tensor,
    pub rho_b: Tensor,
}

/// Loss and pathwise gradients at fixed noise `(eps_w, eps_b)`, given the
/// frozen prefix output `h`.
///
/// `d/dmu = g`, `d/drho = g * eps * sigmoid(rho)` for the data term, plus the
/// analytic KL gradients `w mu` and `w (sigma - 1/sigma) sigmoid(rho)`.
pub fn pathwise_gradients(
    stf: &StfModel,
    h: &Tensor,
    labels: &[usize],
    eps_w: &Tensor,
    eps_b: &Tensor,
    kl_weight: f64,
) -> Result<(ElboParts, VariationalGrad)> {
    let layer = stf.bayes.layer_at(eps_w, eps_b);
    let mut refs = vec![&layer];
    refs.extend(stf.suffix.iter());
    let cache = forward_layers(&refs, h);
    let out = classification_loss(cache.output(), labels)?;
    let grads = backward_layers(&refs, &cache, &out.dlogits, 0, false);
    let g = grads.layers[0].as_ref().expect("bayes layer visited");
    let bayes = &stf.bayes;
    let grad_mu = |g: &Tensor, mu: &Tensor| {
        let d = g.data().iter().zip(mu.data()).map(|(g, m)| g + kl_weight * m).collect();
        Tensor::from_raw(mu.shape().to_vec(), d)
    };
    let grad_rho = |g: &Tensor, rho: &Tensor, eps: &Tensor| {
        let d = g
            .data()
            .iter()
            .zip(rho.data())
            .zip(eps.data())
            .map(|((g, &r), e)| {
                let s = softplus(r);
                let ds = sigmoid(r);
                g * e * ds + kl_weight * (s - 1.0 / s) * ds
            })
            .collect();
        Tensor::from_raw(rho.shape().to_vec(), d)
    };
    let kl = kl_gaussian_to_std_normal(bayes);
    let parts = ElboParts {
        loss: out.loss + kl_weight * kl,
        nll: out.loss,
        kl,
    };
    let grad = VariationalGrad {
        mu_w: grad_mu(&g.weight, &bayes.mu_w),
        mu_b: grad_mu(&g.bias, &bayes.mu_b),
        rho_w: grad_rho(&g.weight, &bayes.rho_w, eps_w),
        rho_b: grad_rho(&g.bias, &bayes.rho_b, eps_b),
    };
    Ok((parts, grad))
}

/// One-sample ELBO loss on a raw input batch.
pub fn elbo_loss(stf: &StfModel, x: &Tensor, labels: &[usize], prng: &mut Prng, kl_weight: f64) -> Result<ElboParts> {
    let h = stf.prefix_features(x)?;
    let s = stf.bayes.sample(prng);
    let logits = stf.logits_from_prefix(&h, &s.layer);
    let nll = classification_loss(&logits, labels)?.loss;
    let kl = kl_gaussian_to_std_normal(&stf.bayes);
    Ok(ElboParts {
        loss: nll + kl_weight * kl,
        nll,
        kl,
    })
}

#[derive(Debug, Clone)]
pub struct StfOutcome {
    pub model: StfModel,
    /// Per-epoch means of the step losses.
    pub epoch_parts: Vec<ElboParts>,
    pub kl_weight: f64,
}

/// Phase 2: builds the variational layer at the 1-based `index` and trains
/// only `(mu, rho)`, with the rest of `pretrained` frozen.
pub fn stf_train(
    pretrained: &MlpModel,
    index: usize,
    data: &Dataset,
    cfg: &ElboConfig,
    prng: &mut Prng,
) -> Result<StfOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.dim() != pretrained.input_dim() {
        return Err(Error::dim(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            pretrained.input_dim()
        )));
    }
    if index == 0 || index > pretrained.depth() {
        return Err(Error::input(format!(
            "bayes layer index {index} outside 1..={}",
            pretrained.depth()
        )));
    }
    let replaced = pretrained.layer(index - 1);
    let mut bayes = VariationalLayer::init(
        replaced.inputs(),
        replaced.outputs(),
        replaced.activation,
        &cfg.init,
        prng,
    );
    if cfg.init.mu_from_pretrained {
        bayes.mu_w = replaced.weight.clone();
        bayes.mu_b = replaced.bias.clone();
    }
    let mut stf = StfModel::from_pretrained(pretrained, index, bayes)?;
    let kl_weight = cfg.kl_weighting.weight(data.len(), cfg.batch_size);
    let h_all = prefix_features(pretrained, data.features(), index - 1);
    let labels = data.labels();

    let zeros = |t: &Tensor| vec![0.0; t.len()];
    let mut v_mu_w = zeros(&stf.bayes.mu_w);
    let mut v_mu_b = zeros(&stf.bayes.mu_b);
    let mut v_rho_w = zeros(&stf.bayes.rho_w);
    let mut v_rho_b = zeros(&stf.bayes.rho_b);
    let mut epoch_parts = Vec::with_capacity(cfg.epochs);
    let samples = cfg.mc_samples_per_step;

    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at(epoch);
        let mut acc = ElboParts {
            loss: 0.0,
            nll: 0.0,
            kl: 0.0,
        };
        let batches = epoch_batches(data.len(), cfg.batch_size, prng)?;
        let n_batches = batches.len() as f64;
        for (step, idx) in batches.into_iter().enumerate() {
            let h = h_all.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut total: Option<(ElboParts, VariationalGrad)> = None;
            for _ in 0..samples {
                let s = stf.bayes.sample(prng);
                let (p, g) = pathwise_gradients(&stf, &h, &y, &s.eps_w, &s.eps_b, kl_weight)?;
                total = Some(match total {
                    None => (p, g),
                    Some((tp, tg)) => (
                        ElboParts {
                            loss: tp.loss + p.loss,
                            nll: tp.nll + p.nll,
                            kl: tp.kl,
                        },
                        VariationalGrad {
                            mu_w: add(&tg.mu_w, &g.mu_w),
                            mu_b: add(&tg.mu_b, &g.mu_b),
                            rho_w: add(&tg.rho_w, &g.rho_w),
                            rho_b: add(&tg.rho_b, &g.rho_b),
                        },
                    ),
                });
            }
            let (mut parts, grad) = total.expect("at least one sample");
            let inv = 1.0 / samples as f64;
            parts.loss *= inv;
            parts.nll *= inv;
            if !parts.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    reason: format!("ELBO loss is {}", parts.loss),
                });
            }
            acc.loss += parts.loss / n_batches;
            acc.nll += parts.nll / n_batches;
            acc.kl += parts.kl / n_batches;

            let scaled = |t: &Tensor| t.data().iter().map(|v| v * inv).collect::<Vec<_>>();
            let b = &mut stf.bayes;
            let (m, wd) = (cfg.sgd.momentum, cfg.sgd.weight_decay);
            raw_step(b.mu_w.data_mut(), &scaled(&grad.mu_w), &mut v_mu_w, lr, m, wd);
            raw_step(b.mu_b.data_mut(), &scaled(&grad.mu_b), &mut v_mu_b, lr, m, wd);
            raw_step(b.rho_w.data_mut(), &scaled(&grad.rho_w), &mut v_rho_w, lr, m, 0.0);
            raw_step(b.rho_b.data_mut(), &scaled(&grad.rho_b), &mut v_rho_b, lr, m, 0.0);
            for r in b.rho_w.data_mut().iter_mut().chain(b.rho_b.data_mut()) {
                *r = r.clamp(RHO_MIN, RHO_MAX);
            }
            if !b.mu_w.is_finite() || !b.mu_b.is_finite() || !b.rho_w.is_finite() || !b.rho_b.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    reason: "variational parameters became non-finite".into(),
                });
            }
        }
        epoch_parts.push(acc);
    }
    Ok(StfOutcome {
        model: stf,
        epoch_parts,
        kl_weight,
    })
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_raw(a.shape().to_vec(), d)
}
