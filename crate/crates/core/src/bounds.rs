//! PAC-Bayes generalisation bound for an STF model.
//!
//! The posterior over all parameters is modelled as
//! `N(., diag(Sigma1, Sigma2))`: `Sigma1` comes from the variational layer,
//! `Sigma2` from the spread of late SGD iterates of the frozen layers, and the
//! cross-covariance is zero.

use serde::{Deserialize, Serialize};

use crate::bayes::{kl_gaussian_to_std_normal, StfModel, VariationalLayer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::rng::Prng;
use crate::train::{predicted_class, TrainHook};

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Running per-scalar mean and variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn push(&mut self, x: &[f64]) {
        if self.count == 0 {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Population variances.
    pub fn variances(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / self.count as f64).collect()
    }
}

/// Diagonal covariance surrogate for the frozen parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Estimate {
    /// Floored at [`VARIANCE_FLOOR`].
    pub variances: Vec<f64>,
    pub iterates: usize,
    pub window_epochs: usize,
}

/// Training hook that records the frozen-layer parameters after every step in
/// the final `window` epochs.
#[derive(Debug, Clone)]
pub struct Sigma2Recorder {
    first_epoch: usize,
    window: usize,
    bayes_index: usize,
    stats: Welford,
}

impl Sigma2Recorder {
    /// `bayes_index` is the 1-based layer that will become Bayesian; it is
    /// excluded from the record.
    pub fn new(total_epochs: usize, window: usize, bayes_index: usize) -> Result<Self> {
        if window == 0 || window > total_epochs {
            return Err(Error::input(format!(
                "window of {window} epochs does not fit in {total_epochs} training epochs"
            )));
        }
        Ok(Self {
            first_epoch: total_epochs - window,
            window,
            bayes_index,
            stats: Welford::default(),
        })
    }

    pub fn finish(&self) -> Result<Sigma2Estimate> {
        estimate_from(&self.stats, self.window)
    }
}

/// `theta2`: every parameter outside layer `bayes_index`, in layer order,
/// weights before biases.
pub fn theta2(model: &MlpModel, bayes_index: usize) -> Vec<f64> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(l, _)| l + 1 != bayes_index)
        .flat_map(|(_, layer)| layer.weight.data().iter().chain(layer.bias.data()).copied())
        .collect()
}

impl TrainHook for Sigma2Recorder {
    fn after_step(&mut self, epoch: usize, model: &MlpModel) {
        if epoch >= self.first_epoch {
            self.stats.push(&theta2(model, self.bayes_index));
        }
    }
}

fn estimate_from(stats: &Welford, window: usize) -> Result<Sigma2Estimate> {
    if stats.count() == 0 {
        return Err(Error::input("no iterates were recorded"));
    }
    Ok(Sigma2Estimate {
        variances: stats.variances().into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect(),
        iterates: stats.count(),
        window_epochs: window,
    })
}

/// Estimate from an explicit iterate sequence.
pub fn estimate_sigma2<'a>(
    iterates: impl IntoIterator<Item = &'a [f64]>,
    window_epochs: usize,
) -> Result<Sigma2Estimate> {
    let mut stats = Welford::default();
    for it in iterates {
        stats.push(it);
    }
    estimate_from(&stats, window_epochs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    pub kl_q1_p1: f64,
    /// `tr(Sigma - 2 I)`.
    pub trace_term: f64,
    /// `ln det Sigma`.
    pub logdet_term: f64,
    /// `|Sigma1|_F^2 + |Sigma2|_F^2`.
    pub frob_terms: f64,
    pub delta: f64,
    pub dim: usize,
}

/// Trace, log-determinant and Frobenius parts for one diagonal block.
pub fn block_terms(variances: &[f64]) -> Result<(f64, f64, f64)> {
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::input(format!("variance {v} is not positive")));
    }
    let trace = variances.iter().map(|v| v - 2.0).sum();
    let logdet = variances.iter().map(|v| v.ln()).sum();
    let frob = variances.iter().map(|v| v * v).sum();
    Ok((trace, logdet, frob))
}

/// `Delta = 2 KL + tr(Sigma - 2I) - ln det Sigma + |Sigma1|^2 + |Sigma2|^2`.
pub fn delta_term(q1: &VariationalLayer, s2: &Sigma2Estimate) -> Result<DeltaTerms> {
    delta_from_parts(kl_gaussian_to_std_normal(q1), &q1.variances(), &s2.variances)
}

pub fn delta_from_parts(kl: f64, sigma1: &[f64], sigma2: &[f64]) -> Result<DeltaTerms> {
    let (t1, l1, f1) = block_terms(sigma1)?;
    let (t2, l2, f2) = block_terms(sigma2)?;
    let (trace, logdet, frob) = (t1 + t2, l1 + l2, f1 + f2);
    Ok(DeltaTerms {
        kl_q1_p1: kl,
        trace_term: trace,
        logdet_term: logdet,
        frob_terms: frob,
        delta: 2.0 * kl + trace - logdet + frob,
        dim: sigma1.len() + sigma2.len(),
    })
}

/// Mean 0-1 error over `samples` posterior draws of `theta1`; the frozen
/// layers stay at their point values.
pub fn empirical_risk_mc(stf: &StfModel, data: &Dataset, samples: usize, prng: &mut Prng) -> Result<f64> {
    if samples == 0 {
        return Err(Error::input("need at least one MC sample"));
    }
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let h = stf.prefix_features(data.features())?;
    let mut errors = 0usize;
    for _ in 0..samples {
        let layer = stf.bayes.sample(prng).layer;
        let logits = stf.logits_from_prefix(&h, &layer);
        errors += (0..data.len())
            .filter(|&i| predicted_class(logits.row(i)) != data.labels()[i])
            .count();
    }
    Ok(errors as f64 / (samples * data.len()) as f64)
}

/// `r_hat + sqrt((Delta + 2 ln(1/conf) + 2 ln m + 4) / (4m - 2))`.
pub fn pac_bayes_rhs(delta: f64, m: usize, confidence: f64, r_hat: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::input("m must be >= 1"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::input("confidence level must be in (0, 1)"));
    }
    let m = m as f64;
    let num = delta + 2.0 * (1.0 / confidence).ln() + 2.0 * m.ln() + 4.0;
    if num < 0.0 {
        return Err(Error::input(format!("bound radicand {num} is negative")));
    }
    Ok(r_hat + (num / (4.0 * m - 2.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub terms: DeltaTerms,
    pub m: usize,
    pub confidence: f64,
    pub bound_rhs: f64,
    pub empirical_risk: f64,
    pub test_risk: f64,
    pub gap: f64,
    pub holds: bool,
    /// The right-hand side is above 1 and says nothing about a 0-1 risk.
    pub vacuous: bool,
    pub sigma2_iterates: usize,
}

pub fn pac_bayes_bound(
    terms: DeltaTerms,
    m: usize,
    confidence: f64,
    r_hat: f64,
    test_risk: f64,
) -> Result<BoundReport> {
    let rhs = pac_bayes_rhs(terms.delta, m, confidence, r_hat)?;
    Ok(BoundReport {
        terms,
        m,
        confidence,
        bound_rhs: rhs,
        empirical_risk: r_hat,
        test_risk,
        gap: test_risk - r_hat,
        holds: test_risk <= rhs,
        vacuous: rhs > 1.0,
        sigma2_iterates: 0,
    })
}
