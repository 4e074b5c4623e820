//! L-infinity evasion attacks, adversarial training and threshold membership
//! inference.

use serde::{Deserialize, Serialize};

use crate::bayes::StfModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::classification_loss;
use crate::nn::MlpModel;
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::train::{fit, TrainConfig, TrainOutcome};
use crate::uncertainty::{mc_predict, predict_deterministic, PredictiveSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity radius in feature units.
    pub radius: f64,
    pub steps: usize,
    /// Defaults to `2.5 radius / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub random_start: bool,
    /// Global feature range; iterates are clipped into it.
    #[serde(default)]
    pub clip: Option<(f64, f64)>,
}

impl AttackConfig {
    pub fn pgd(radius: f64, clip: Option<(f64, f64)>) -> Self {
        Self {
            radius,
            steps: 10,
            step_size: None,
            random_start: true,
            clip,
        }
    }

    pub fn fgsm(radius: f64, clip: Option<(f64, f64)>) -> Self {
        Self {
            radius,
            steps: 1,
            step_size: Some(radius),
            random_start: false,
            clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return Err(Error::input("attack radius must be finite and >= 0"));
        }
        if self.steps == 0 {
            return Err(Error::input("attack needs at least one step"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) && self.radius > 0.0 {
                return Err(Error::input("step_size must be > 0"));
            }
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return Err(Error::input("clip range must satisfy lo < hi"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.radius / self.steps as f64)
    }
}

/// Gradient of the mean loss with respect to the inputs.
pub fn input_gradient(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (logits, cache) = model.forward(x)?;
    let out = classification_loss(&logits, labels)?;
    let grads = model.backward(&cache, &out.dlogits)?;
    Ok(grads.input.expect("full backward returns the input gradient"))
}

fn project(x: &mut [f64], origin: &[f64], radius: f64, clip: Option<(f64, f64)>) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - radius, o + radius);
        // o +- radius may round outward by an ulp
        while *v - o > radius {
            *v = v.next_down();
        }
        while o - *v > radius {
            *v = v.next_up();
        }
        if let Some((lo, hi)) = clip {
            *v = v.clamp(lo, hi);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-gradient ascent on the loss inside the radius ball.
pub fn pgd(model: &MlpModel, x: &Tensor, labels: &[usize], cfg: &AttackConfig, prng: &mut Prng) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.radius == 0.0 {
        return Ok(x.clone());
    }
    let origin = x.data();
    let mut adv = x.data().to_vec();
    if cfg.random_start {
        for v in adv.iter_mut() {
            *v += prng.uniform_range(-cfg.radius, cfg.radius);
        }
    }
    project(&mut adv, origin, cfg.radius, cfg.clip);
    let alpha = cfg.alpha();
    for _ in 0..cfg.steps {
        let cur = Tensor::from_raw(x.shape().to_vec(), adv);
        let g = input_gradient(model, &cur, labels)?;
        adv = cur.into_data();
        for (v, gi) in adv.iter_mut().zip(g.data()) {
            *v += alpha * sign(*gi);
        }
        project(&mut adv, origin, cfg.radius, cfg.clip);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), adv))
}

/// Single full-radius sign step from the clean input. Written out directly
/// rather than through [`pgd`], so the two can be checked against each other.
pub fn fgsm(model: &MlpModel, x: &Tensor, labels: &[usize], radius: f64, clip: Option<(f64, f64)>) -> Result<Tensor> {
    AttackConfig::fgsm(radius, clip).validate()?;
    if radius == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, labels)?;
    let mut adv: Vec<f64> = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(v, gi)| v + radius * sign(*gi))
        .collect();
    project(&mut adv, x.data(), radius, clip);
    Ok(Tensor::from_raw(x.shape().to_vec(), adv))
}

/// Stream reserved for attack randomness inside adversarial training, so the
/// batch order matches plain training.
const ATTACK_STREAM: u64 = 0x00A7_7AC4;

/// Trains on the PGD perturbation of every batch.
pub fn adversarial_train(
    model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    prng: &mut Prng,
) -> Result<TrainOutcome> {
    attack.validate()?;
    let mut attack_prng = prng.fork(ATTACK_STREAM);
    let attack = *attack;
    let mut perturb = move |m: &MlpModel, x: &Tensor, y: &[usize]| pgd(m, x, y, &attack, &mut attack_prng);
    let trainable = vec![true; model.depth()];
    fit(model, data, cfg, prng, &trainable, Some(&mut perturb), &mut ())
}

/// Where attack gradients come from for a Bayesian model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StfGradient {
    /// Through the posterior mean `theta1 = mu`.
    #[default]
    Mean,
    /// Through one fresh posterior sample per batch.
    Sampled,
}

#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Mlp(&'a MlpModel),
    Stf {
        model: &'a StfModel,
        samples: usize,
        gradient: StfGradient,
    },
}

impl Target<'_> {
    pub fn predict(&self, x: &Tensor, prng: &mut Prng) -> Result<PredictiveSummary> {
        match *self {
            Target::Mlp(m) => predict_deterministic(m, x),
            Target::Stf { model, samples, .. } => mc_predict(model, x, samples, prng),
        }
    }

    fn attack_model(&self, prng: &mut Prng) -> MlpModel {
        match *self {
            Target::Mlp(m) => m.clone(),
            Target::Stf { model, gradient, .. } => match gradient {
                StfGradient::Mean => model.mean_model(),
                StfGradient::Sampled => model.sample_model(prng),
            },
        }
    }
}

const EVAL_CHUNK: usize = 500;

/// Crafts adversarial examples against `target` in chunks and returns their
/// accuracy. Radius 0 gives the clean accuracy.
pub fn attack_eval(target: Target<'_>, data: &Dataset, attack: &AttackConfig, prng: &mut Prng) -> Result<f64> {
    attack.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let mut correct = 0usize;
    let mut start = 0;
    let mut mean_model = None;
    while start < data.len() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let model = match (&target, &mean_model) {
            (
                Target::Stf {
                    gradient: StfGradient::Sampled,
                    ..
                },
                _,
            )
            | (_, None) => {
                let m = target.attack_model(prng);
                mean_model = Some(m.clone());
                m
            }
            (_, Some(m)) => m.clone(),
        };
        let adv = pgd(&model, &x, &y, attack, prng)?;
        let s = target.predict(&adv, prng)?;
        correct += s.predicted.iter().zip(&y).filter(|(p, t)| p == t).count();
        start += EVAL_CHUNK;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiScore {
    /// Probability of the true label.
    #[default]
    TrueClass,
    /// Largest class probability.
    MaxConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
}

/// Balanced accuracy of "member iff score >= zeta", swept over every observed
/// score plus 0 and a value above 1.
pub fn mi_from_scores(train: &[f64], test: &[f64]) -> Result<MiReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::input("membership inference needs both splits"));
    }
    if let Some(s) = train.iter().chain(test).find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::input(format!("score {s} outside [0, 1]")));
    }
    let mut tr = train.to_vec();
    let mut te = test.to_vec();
    tr.sort_by(f64::total_cmp);
    te.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tr.iter().chain(&te).copied().collect();
    thresholds.push(0.0);
    thresholds.push(1.0 + 1e-9);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ntr, nte) = (tr.len() as f64, te.len() as f64);
    let accuracy: Vec<f64> = thresholds
        .iter()
        .map(|&z| {
            let train_hits = tr.len() - tr.partition_point(|&s| s < z);
            let test_hits = te.partition_point(|&s| s < z);
            0.5 * (train_hits as f64 / ntr + test_hits as f64 / nte)
        })
        .collect();
    let mut best = 0;
    for (i, &a) in accuracy.iter().enumerate() {
        if a > accuracy[best] {
            best = i;
        }
    }
    Ok(MiReport {
        best_threshold: thresholds[best],
        best_accuracy: accuracy[best],
        thresholds,
        accuracy,
    })
}

pub fn membership_scores(target: Target<'_>, data: &Dataset, score: MiScore, prng: &mut Prng) -> Result<Vec<f64>> {
    let s = target.predict(data.features(), prng)?;
    Ok(match score {
        MiScore::TrueClass => s.true_class_probs(data.labels()),
        MiScore::MaxConfidence => s.confidence,
    })
}

pub fn mi_attack(
    target: Target<'_>,
    train: &Dataset,
    test: &Dataset,
    score: MiScore,
    prng: &mut Prng,
) -> Result<MiReport> {
    let a = membership_scores(target, train, score, prng)?;
    let b = membership_scores(target, test, score, prng)?;
    mi_from_scores(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;
    use crate::nn::{Activation, DenseLayer};
    use crate::train::{train_deterministic, SgdConfig};

    fn linear() -> MlpModel {
        MlpModel::new(vec![DenseLayer::new(
            Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap(),
            Tensor::vector(vec![0.2]).unwrap(),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    fn loss(m: &MlpModel, x: &Tensor, y: &[usize]) -> f64 {
        classification_loss(&m.predict(x).unwrap(), y).unwrap().loss
    }

    #[test]
    fn zero_radius_returns_input() {
        let x = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        assert_eq!(fgsm(&linear(), &x, &[1], 0.0, None).unwrap(), x);
        let cfg = AttackConfig::pgd(0.0, None);
        assert_eq!(pgd(&linear(), &x, &[1], &cfg, &mut Prng::new(1)).unwrap(), x);
    }

    #[test]
    fn fgsm_raises_linear_loss_within_ball() {
        let m = linear();
        let x = Tensor::from_rows(&[vec![0.3, 0.1], vec![-1.0, 2.0]]).unwrap();
        let y = [1, 0];
        let adv = fgsm(&m, &x, &y, 0.3, None).unwrap();
        assert!(adv.max_abs_diff(&x) <= 0.3);
        assert!(loss(&m, &adv, &y) >= loss(&m, &x, &y));
    }

    #[test]
    fn pgd_one_step_equals_fgsm_bitwise() {
        let m = linear();
        let x = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.9, 0.05]]).unwrap();
        let cfg = AttackConfig {
            radius: 0.1,
            steps: 1,
            step_size: Some(0.1),
            random_start: false,
            clip: Some((0.0, 1.0)),
        };
        let a = pgd(&m, &x, &[1, 0], &cfg, &mut Prng::new(5)).unwrap();
        let b = fgsm(&m, &x, &[1, 0], 0.1, Some((0.0, 1.0))).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn pgd_loss_non_decreasing_on_linear_model() {
        let m = linear();
        let x = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        let y = [1];
        let mut last = loss(&m, &x, &y);
        for steps in 1..=8 {
            let cfg = AttackConfig {
                radius: 0.5,
                steps,
                step_size: Some(0.1),
                random_start: false,
                clip: None,
            };
            let l = loss(&m, &pgd(&m, &x, &y, &cfg, &mut Prng::new(0)).unwrap(), &y);
            assert!(l >= last - 1e-15);
            last = l;
        }
    }

    #[test]
    fn pgd_respects_ball_and_clip() {
        let data = make_two_moons(200, 0.1, &mut Prng::new(1)).unwrap();
        let m = MlpModel::he_init(&[2, 16, 2], &mut Prng::new(2)).unwrap();
        // clip to the data's own bounding interval so edge points get clipped
        let d = data.features().data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cfg = AttackConfig::pgd(0.2, Some((lo, hi)));
        let adv = pgd(&m, data.features(), data.labels(), &cfg, &mut Prng::new(3)).unwrap();
        for (a, o) in adv.data().iter().zip(d) {
            assert!((a - o).abs() <= 0.2);
            assert!((lo..=hi).contains(a));
        }
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                schedule: vec![],
            },
            early_stop: None,
        }
    }

    #[test]
    fn zero_radius_adversarial_training_is_plain_training() {
        let data = make_two_moons(200, 0.1, &mut Prng::new(1)).unwrap();
        let m = MlpModel::he_init(&[2, 16, 1], &mut Prng::new(2)).unwrap();
        let a = adversarial_train(
            m.clone(),
            &data,
            &tcfg(),
            &AttackConfig::pgd(0.0, None),
            &mut Prng::new(4),
        )
        .unwrap();
        let b = train_deterministic(m, &data, &tcfg(), &mut Prng::new(4)).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_radius_eval_is_clean_accuracy() {
        let data = make_two_moons(300, 0.1, &mut Prng::new(1)).unwrap();
        let m = MlpModel::he_init(&[2, 16, 1], &mut Prng::new(2)).unwrap();
        let m = train_deterministic(m, &data, &tcfg(), &mut Prng::new(4)).unwrap().model;
        let clean = crate::train::accuracy(&m, &data).unwrap();
        let acc = attack_eval(Target::Mlp(&m), &data, &AttackConfig::pgd(0.0, None), &mut Prng::new(0)).unwrap();
        assert_eq!(acc, clean);
    }

    #[test]
    fn perfectly_separated_scores() {
        let r = mi_from_scores(&[0.9; 20], &[0.1; 30]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert!(r.best_threshold > 0.1 && r.best_threshold <= 0.9);
    }

    #[test]
    fn identical_distributions_near_half() {
        let mut p = Prng::new(9);
        let a: Vec<f64> = (0..10_000).map(|_| p.uniform()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| p.uniform()).collect();
        let r = mi_from_scores(&a, &b).unwrap();
        assert!(r.best_accuracy >= 0.5 && (r.best_accuracy - 0.5).abs() < 0.02);
    }

    #[test]
    fn mi_invariant_to_order_and_includes_degenerate_thresholds() {
        let a = [0.2, 0.8, 0.5];
        let b = [0.4, 0.1];
        let r1 = mi_from_scores(&a, &b).unwrap();
        let r2 = mi_from_scores(&[0.5, 0.2, 0.8], &[0.1, 0.4]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.accuracy[0], 0.5);
        assert_eq!(*r1.accuracy.last().unwrap(), 0.5);
        assert!(mi_from_scores(&[], &b).is_err());
    }
}
