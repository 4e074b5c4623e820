//! Predictive distributions, calibration, confidence thresholds and the
//! asymptotic confidence bound for binary STF models.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::StfModel;
use crate::error::{Error, Result};
use crate::loss::{class_probs, sigmoid};
use crate::nn::{backward_layers, forward_layers, Activation, DenseLayer, MlpModel};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::train::argmax;

/// `pi / 8`, the probit-to-logistic scale.
pub const PROBIT_SCALE: f64 = PI / 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    /// `[batch x k]`; binary logit models report two columns.
    pub mean_probs: Tensor,
    pub confidence: Vec<f64>,
    pub predicted: Vec<usize>,
    pub mc_samples: usize,
}

impl PredictiveSummary {
    pub fn from_probs(mean_probs: Tensor, mc_samples: usize) -> Self {
        let rows = mean_probs.rows();
        let mut confidence = Vec::with_capacity(rows);
        let mut predicted = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = mean_probs.row(i);
            let k = argmax(r);
            predicted.push(k);
            confidence.push(r[k]);
        }
        Self {
            mean_probs,
            confidence,
            predicted,
            mc_samples,
        }
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// Probability assigned to each row's label.
    pub fn true_class_probs(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.mean_probs.get(i, y))
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len() as f64
    }
}

/// Summary of a deterministic network.
pub fn predict_deterministic(model: &MlpModel, x: &Tensor) -> Result<PredictiveSummary> {
    Ok(PredictiveSummary::from_probs(class_probs(&model.predict(x)?), 1))
}

/// Averages the class probabilities of `samples` posterior draws.
pub fn mc_predict(stf: &StfModel, x: &Tensor, samples: usize, prng: &mut Prng) -> Result<PredictiveSummary> {
    if samples == 0 {
        return Err(Error::input("need at least one MC sample"));
    }
    let h = stf.prefix_features(x)?;
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = vec![];
    for _ in 0..samples {
        let layer = stf.bayes.sample(prng).layer;
        let p = class_probs(&stf.logits_from_prefix(&h, &layer));
        match acc.as_mut() {
            None => {
                shape = p.shape().to_vec();
                acc = Some(p.into_data());
            }
            Some(a) => a.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v),
        }
    }
    let inv = 1.0 / samples as f64;
    let data = acc.expect("samples >= 1").into_iter().map(|v| v * inv).collect();
    Ok(PredictiveSummary::from_probs(Tensor::from_raw(shape, data), samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EceNorm {
    /// Bin weights `|B_m| / N`.
    #[default]
    SampleCount,
    /// Bin weights `|B_m| / M`, the literal alternative.
    BinCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub bins: usize,
    pub counts: Vec<usize>,
    /// Per-bin accuracy; 0 for empty bins.
    pub accuracy: Vec<f64>,
    /// Per-bin mean confidence; 0 for empty bins.
    pub confidence: Vec<f64>,
    pub ece: f64,
}

impl EceReport {
    /// Writes `bin,count,acc,conf` with 1-based bins.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin", "count", "acc", "conf"])?;
        for m in 0..self.bins {
            w.write_record([
                (m + 1).to_string(),
                self.counts[m].to_string(),
                self.accuracy[m].to_string(),
                self.confidence[m].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// 0-based bin of `c` among `((m-1)/M, m/M]`; 0 itself goes to the first bin.
fn bin_of(c: f64, bins: usize) -> usize {
    let mut m = (c * bins as f64).ceil() as usize;
    if m > 0 && (m - 1) as f64 / bins as f64 >= c {
        m -= 1;
    }
    m.clamp(1, bins) - 1
}

pub fn ece(summary: &PredictiveSummary, labels: &[usize], bins: usize, norm: EceNorm) -> Result<EceReport> {
    ece_from(&summary.confidence, &summary.predicted, labels, bins, norm)
}

/// Expected calibration error from per-example confidence and prediction.
pub fn ece_from(
    confidence: &[f64],
    predicted: &[usize],
    labels: &[usize],
    bins: usize,
    norm: EceNorm,
) -> Result<EceReport> {
    if bins == 0 {
        return Err(Error::input("ECE needs at least one bin"));
    }
    if confidence.len() != labels.len() || predicted.len() != labels.len() {
        return Err(Error::dim("confidence, predictions and labels differ in length"));
    }
    if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::input(format!("confidence {c} outside [0, 1]")));
    }
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for ((&c, &p), &y) in confidence.iter().zip(predicted).zip(labels) {
        let b = bin_of(c, bins);
        counts[b] += 1;
        hits[b] += usize::from(p == y);
        conf_sum[b] += c;
    }
    let mut accuracy = vec![0.0; bins];
    let mut mean_conf = vec![0.0; bins];
    let mut total = 0.0;
    let denom = match norm {
        EceNorm::SampleCount => labels.len().max(1) as f64,
        EceNorm::BinCount => bins as f64,
    };
    for b in 0..bins {
        if counts[b] == 0 {
            continue;
        }
        accuracy[b] = hits[b] as f64 / counts[b] as f64;
        mean_conf[b] = conf_sum[b] / counts[b] as f64;
        total += counts[b] as f64 / denom * (accuracy[b] - mean_conf[b]).abs();
    }
    Ok(EceReport {
        bins,
        counts,
        accuracy,
        confidence: mean_conf,
        ece: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub coverage: f64,
    /// `None` when nothing is retained.
    pub accuracy: Option<f64>,
}

/// Accuracy over the examples whose confidence is at least each threshold.
pub fn accuracy_at_threshold(
    summary: &PredictiveSummary,
    labels: &[usize],
    thresholds: &[f64],
) -> Result<Vec<ThresholdPoint>> {
    if labels.len() != summary.len() {
        return Err(Error::dim("labels and predictions differ in length"));
    }
    thresholds
        .iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::input(format!("threshold {t} outside [0, 1]")));
            }
            let kept: Vec<usize> = (0..labels.len()).filter(|&i| summary.confidence[i] >= t).collect();
            let coverage = kept.len() as f64 / labels.len().max(1) as f64;
            let accuracy = (!kept.is_empty()).then(|| {
                kept.iter().filter(|&&i| summary.predicted[i] == labels[i]).count() as f64 / kept.len() as f64
            });
            Ok(ThresholdPoint {
                threshold: t,
                coverage,
                accuracy,
            })
        })
        .collect()
}

pub fn write_threshold_csv(curves: &[(&str, &[ThresholdPoint])], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "threshold", "coverage", "accuracy"])?;
    for (name, curve) in curves {
        for p in *curve {
            w.write_record([
                name.to_string(),
                p.threshold.to_string(),
                p.coverage.to_string(),
                p.accuracy.map_or(String::new(), |a| a.to_string()),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probit {
    /// Logit of the mean network.
    pub mean_logit: f64,
    /// `d1^T Sigma1 d1`.
    pub variance: f64,
    pub z: f64,
    /// `sigmoid(z)`, the approximate `P(y = 1 | x)`.
    pub prob: f64,
}

fn ensure_binary(stf: &StfModel) -> Result<()> {
    if stf.output_dim() != 1 {
        return Err(Error::Usage(format!(
            "probit approximation needs a single-logit model, got {} outputs",
            stf.output_dim()
        )));
    }
    Ok(())
}

/// `z = f_mu(x) / sqrt(1 + pi/8 d^T Sigma1 d)` for every row of `x`, with
/// `d` the gradient of the logit in the Bayesian layer's parameters at `mu`.
pub fn probit_logit(stf: &StfModel, x: &Tensor) -> Result<Vec<Probit>> {
    ensure_binary(stf)?;
    let h = stf.prefix_features(x)?;
    let mean = stf.bayes.mean_layer();
    let mut refs = vec![&mean];
    refs.extend(stf.suffix.iter());
    let cache = forward_layers(&refs, &h);
    let ones = Tensor::full(&[h.rows(), 1], 1.0);
    let grads = backward_layers(&refs, &cache, &ones, 0, false);
    let u = &grads.pre_activation;
    let var_w = stf.bayes.sigma_w().map(|s| s * s);
    let var_b = stf.bayes.sigma_b().map(|s| s * s);
    let r = stf.bayes.outputs();
    let out = (0..h.rows())
        .map(|e| {
            let a = h.row(e);
            let mut v = 0.0;
            for i in 0..r {
                let ui2 = u.get(e, i).powi(2);
                if ui2 == 0.0 {
                    continue;
                }
                let row = var_w.row(i);
                let s: f64 = a.iter().zip(row).map(|(aj, sj)| aj * aj * sj).sum();
                v += ui2 * (s + var_b.data()[i]);
            }
            let f = cache.output().get(e, 0);
            let z = f / (1.0 + PROBIT_SCALE * v).sqrt();
            Probit {
                mean_logit: f,
                variance: v,
                z,
                prob: sigmoid(z),
            }
        })
        .collect();
    Ok(out)
}

/// Everything needed to evaluate the far-field confidence along a direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticBound {
    pub direction: Vec<f64>,
    /// Scale at which the activation pattern was found stable.
    pub stable_delta: f64,
    /// Gradient of the logit with respect to the first-layer pre-activation.
    pub u: Vec<f64>,
    /// Logit offset not passing through the first layer: `f(x) = u.(Wx+b) + c`.
    pub c: f64,
    pub w_norm: f64,
    pub u_norm: f64,
    pub lambda_min_sigma1: f64,
    pub s_min_u_j: f64,
    /// `|u| |w| / (s_min sqrt(pi/8 lambda_min))`.
    pub general_bound_logit: f64,
    /// `|w| / sqrt(pi/8 lambda_min)`.
    pub reduced_bound_logit: f64,
    /// Reported bound (infinite when `u = 0`).
    pub bound_logit: f64,
    pub bound_confidence: f64,
    pub pattern: Vec<bool>,
    /// `lim |z(delta x)|` from the closed form.
    pub limit_logit: f64,
}

/// Largest `s_min` problem assembled explicitly (entries of `u (x) I_n`).
pub const MAX_ASSEMBLED_ENTRIES: usize = 4_000_000;

fn mean_pattern(model: &MlpModel, x: &[f64]) -> Vec<bool> {
    let t = Tensor::from_raw(vec![1, x.len()], x.to_vec());
    let cache = forward_layers(&model.layer_refs(), &t);
    cache.activation_pattern(&model.layer_refs())
}

/// Smallest singular value of the map `x -> grad_theta1 (u^T W x) = u (x) x`,
/// assembled as an `(r n) x n` matrix.
pub fn s_min_assembled(u: &[f64], n: usize) -> Result<f64> {
    let rows = u.len() * n;
    if rows * n > MAX_ASSEMBLED_ENTRIES {
        return Err(Error::Usage(format!(
            "assembled matrix {rows}x{n} too large for direct SVD"
        )));
    }
    let m = DMatrix::from_fn(rows, n, |row, col| {
        let (i, j) = (row / n, row % n);
        if j == col {
            u[i]
        } else {
            0.0
        }
    });
    let sv = m.singular_values();
    Ok(sv.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Logit `c` from the frozen layers with the first-layer pre-activation set to
/// zero and the ReLU pattern fixed.
fn gated_offset(first: &DenseLayer, rest: &[DenseLayer], pattern: &[bool]) -> f64 {
    let mut offset = 0;
    let mut h: Vec<f64> = vec![0.0; first.outputs()];
    if first.activation == Activation::Relu {
        offset += h.len();
    }
    for layer in rest {
        let mut next = layer.bias.data().to_vec();
        for (i, v) in next.iter_mut().enumerate() {
            *v += layer.weight.row(i).iter().zip(&h).map(|(w, a)| w * a).sum::<f64>();
        }
        if layer.activation == Activation::Relu {
            for (v, &on) in next.iter_mut().zip(&pattern[offset..]) {
                if !on {
                    *v = 0.0;
                }
            }
            offset += next.len();
        }
        h = next;
    }
    h[0]
}

/// Far-field bound along `direction` for a binary model whose first layer is
/// Bayesian.
pub fn asymptotic_bound(stf: &StfModel, direction: &[f64]) -> Result<AsymptoticBound> {
    ensure_binary(stf)?;
    if stf.bayes_index() != 1 {
        return Err(Error::Usage("asymptotic bound needs the Bayesian layer first".into()));
    }
    if direction.len() != stf.input_dim() {
        return Err(Error::dim(format!(
            "direction has {} entries, model expects {}",
            direction.len(),
            stf.input_dim()
        )));
    }
    if direction.iter().all(|&v| v == 0.0) || direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("direction must be finite and nonzero"));
    }
    let model = stf.mean_model();
    let scaled = |d: f64| direction.iter().map(|v| v * d).collect::<Vec<_>>();
    let mut delta = 1.0;
    let mut prev = mean_pattern(&model, &scaled(delta));
    let mut same = 0;
    let limit = 2f64.powi(64);
    while same < 3 {
        if delta >= limit {
            return Err(Error::Region {
                direction: direction.to_vec(),
            });
        }
        delta *= 2.0;
        let next = mean_pattern(&model, &scaled(delta));
        if next == prev {
            same += 1;
        } else {
            same = 0;
            prev = next;
        }
    }
    let stable_delta = delta / 8.0;
    let pattern = prev;

    let x = Tensor::from_raw(vec![1, direction.len()], scaled(stable_delta));
    let refs = model.layer_refs();
    let cache = forward_layers(&refs, &x);
    let grads = backward_layers(&refs, &cache, &Tensor::full(&[1, 1], 1.0), 0, false);
    let u = grads.pre_activation.row(0).to_vec();
    let c = gated_offset(&stf.bayes.mean_layer(), &stf.suffix, &pattern);

    let w = &stf.bayes.mu_w;
    let w_norm = w.norm();
    let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let var_w = stf.bayes.sigma_w().map(|s| s * s);
    let lambda_min = var_w.data().iter().copied().fold(f64::INFINITY, f64::min);
    let s_min = s_min_assembled(&u, direction.len())?;
    let root = (PROBIT_SCALE * lambda_min).sqrt();
    let reduced = w_norm / root;
    let general = if u_norm == 0.0 {
        f64::INFINITY
    } else {
        u_norm * w_norm / (s_min * root)
    };
    let bound_logit = if u_norm == 0.0 { f64::INFINITY } else { reduced };

    let ux: f64 = (0..w.rows())
        .map(|i| u[i] * w.row(i).iter().zip(direction).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let quad: f64 = (0..w.rows())
        .map(|i| u[i] * u[i] * var_w.row(i).iter().zip(direction).map(|(s, x)| s * x * x).sum::<f64>())
        .sum();
    let limit_logit = if quad > 0.0 {
        ux.abs() / (PROBIT_SCALE * quad).sqrt()
    } else {
        c.abs()
    };
    Ok(AsymptoticBound {
        direction: direction.to_vec(),
        stable_delta,
        u,
        c,
        w_norm,
        u_norm,
        lambda_min_sigma1: lambda_min,
        s_min_u_j: s_min,
        general_bound_logit: general,
        reduced_bound_logit: reduced,
        bound_logit,
        bound_confidence: sigmoid(bound_logit),
        pattern,
        limit_logit,
    })
}

impl AsymptoticBound {
    /// Closed-form `z(delta x)` valid for every `delta` inside the stable region.
    pub fn closed_form_z(&self, stf: &StfModel, delta: f64) -> f64 {
        let w = &stf.bayes.mu_w;
        let b = &stf.bayes.mu_b;
        let var_w = stf.bayes.sigma_w().map(|s| s * s);
        let var_b = stf.bayes.sigma_b().map(|s| s * s);
        let x = &self.direction;
        let mut uwx = 0.0;
        let mut ub = 0.0;
        let mut quad_w = 0.0;
        let mut quad_b = 0.0;
        for (i, &ui) in self.u.iter().enumerate() {
            uwx += ui * w.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            ub += ui * b.data()[i];
            quad_w += ui * ui * var_w.row(i).iter().zip(x).map(|(s, v)| s * v * v).sum::<f64>();
            quad_b += ui * ui * var_b.data()[i];
        }
        let inv = 1.0 / delta;
        (uwx + (ub + self.c) * inv) / (inv * inv + PROBIT_SCALE * (quad_w + quad_b * inv * inv)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub direction_id: usize,
    pub delta: f64,
    /// `sigmoid(|z(delta x)|)`.
    pub confidence: f64,
    pub bound: f64,
}

/// Confidence trajectory `sigmoid(|z(delta x)|)` per direction, with the
/// direction's bound.
pub fn scale_sweep(stf: &StfModel, directions: &[Vec<f64>], deltas: &[f64]) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() || deltas[0] <= 0.0 || deltas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("deltas must be positive and strictly increasing"));
    }
    let mut rows = Vec::with_capacity(directions.len() * deltas.len());
    for (id, dir) in directions.iter().enumerate() {
        let bound = asymptotic_bound(stf, dir)?;
        let pts: Vec<Vec<f64>> = deltas.iter().map(|d| dir.iter().map(|v| v * d).collect()).collect();
        let x = Tensor::from_rows(&pts)?;
        for (p, &delta) in probit_logit(stf, &x)?.iter().zip(deltas) {
            rows.push(SweepRow {
                direction_id: id,
                delta,
                confidence: sigmoid(p.z.abs()),
                bound: bound.bound_confidence,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["direction_id", "delta", "confidence", "bound"])?;
    for r in rows {
        w.write_record([
            r.direction_id.to_string(),
            r.delta.to_string(),
            r.confidence.to_string(),
            r.bound.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
