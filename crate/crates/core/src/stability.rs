//! Single-layer retraining and the layer-stability metric.
//!
//! Layers are indexed `1..=d`, the output layer included.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpModel};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::train::{fit, train_deterministic, TrainConfig};

/// Re-initialises layer `k` (1-based) with the pretraining scheme and trains
/// it alone; every other layer is left bit-identical.
pub fn retrain_layer(
    pretrained: &MlpModel,
    k: usize,
    data: &Dataset,
    cfg: &TrainConfig,
    prng: &mut Prng,
) -> Result<MlpModel> {
    let d = pretrained.depth();
    if k == 0 || k > d {
        return Err(Error::input(format!("layer index {k} outside 1..={d}")));
    }
    let mut model = pretrained.clone();
    let old = model.layer(k - 1);
    let fresh = DenseLayer::he(old.inputs(), old.outputs(), old.activation, prng);
    *model.layer_mut(k - 1) = fresh;
    let mut trainable = vec![false; d];
    trainable[k - 1] = true;
    Ok(fit(model, data, cfg, prng, &trainable, None, &mut ())?.model)
}

/// Mean over rows of `|w_i . w'_i| / (|w_i| |w'_i|)`. Parallel rows score
/// exactly 1.
pub fn layer_stability(w: &Tensor, w_prime: &Tensor) -> Result<f64> {
    w.ensure_matrix("stability")?;
    w.ensure_same_shape(w_prime, "stability")?;
    let rows = w.rows();
    let mut total = 0.0;
    for i in 0..rows {
        let (a, b) = (w.row(i), w_prime.row(i));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 {
            return Err(Error::Singular { which: "first", row: i });
        }
        if nb == 0.0 {
            return Err(Error::Singular {
                which: "second",
                row: i,
            });
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = dot.abs() / (na * nb);
        // Cauchy-Schwarz caps cos at 1; anything within the rounding error
        // of the length-n dot product and norms is parallel.
        total += if cos >= 1.0 - (a.len() + 2) as f64 * f64::EPSILON {
            1.0
        } else {
            cos
        };
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seeds: Vec<u64>,
    /// `per_seed[s][k - 1]` is the stability of layer `k` under seed `s`.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation across seeds.
    pub std: Vec<f64>,
    pub pretrain_accuracy: Vec<f64>,
    pub retrain_accuracy: Vec<Vec<f64>>,
}

impl StabilityReport {
    pub fn from_rows(
        seeds: Vec<u64>,
        per_seed: Vec<Vec<f64>>,
        pretrain_accuracy: Vec<f64>,
        retrain_accuracy: Vec<Vec<f64>>,
    ) -> Self {
        let d = per_seed.first().map_or(0, Vec::len);
        let s = per_seed.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| per_seed.iter().map(|r| r[k]).sum::<f64>() / s).collect();
        let std = (0..d)
            .map(|k| (per_seed.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / s).sqrt())
            .collect();
        Self {
            seeds,
            per_seed,
            mean,
            std,
            pretrain_accuracy,
            retrain_accuracy,
        }
    }

    /// Writes `layer_index,mean,std`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer_index", "mean", "std"])?;
        for (k, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            w.write_record([(k + 1).to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Streams used by one seed of the profile.
const INIT_STREAM: u64 = 0;
const PRETRAIN_STREAM: u64 = 1;
const RETRAIN_STREAM: u64 = 100;

/// For each seed: pretrain once, retrain every layer independently from that
/// checkpoint and measure its stability against the pretrained weights.
pub fn stability_profile(
    widths: &[usize],
    data: &Dataset,
    seeds: &[u64],
    pretrain: &TrainConfig,
    retrain: &TrainConfig,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::input("stability profile needs at least two seeds"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut pre_acc = Vec::with_capacity(seeds.len());
    let mut re_acc = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let root = Prng::new(seed);
        let init = MlpModel::he_init(widths, &mut root.fork(INIT_STREAM))?;
        let model = train_deterministic(init, data, pretrain, &mut root.fork(PRETRAIN_STREAM))?.model;
        pre_acc.push(crate::train::accuracy(&model, data)?);
        let mut row = Vec::with_capacity(model.depth());
        let mut accs = Vec::with_capacity(model.depth());
        for k in 1..=model.depth() {
            let mut prng = root.fork(RETRAIN_STREAM + k as u64);
            let re = retrain_layer(&model, k, data, retrain, &mut prng)?;
            row.push(layer_stability(&model.layer(k - 1).weight, &re.layer(k - 1).weight)?);
            accs.push(crate::train::accuracy(&re, data)?);
        }
        per_seed.push(row);
        re_acc.push(accs);
    }
    Ok(StabilityReport::from_rows(seeds.to_vec(), per_seed, pre_acc, re_acc))
}
