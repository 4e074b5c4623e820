//! Config-driven experiment runs and their on-disk reports.
//!
//! A run resolves one [`ExperimentConfig`] into datasets, then executes the
//! requested tasks for every seed. Per seed, models are trained lazily and
//! shared between tasks, so asking for `evaluate` and `corruption_grid`
//! together trains each model once. Every seed draws from fixed streams of
//! `Prng::new(seed)`; nothing depends on the order tasks are listed in.
//!
//! Output layout: `<out>/<task>/<config hash>/seed-<seed>/` holds
//! `metrics.json` (deterministic) and `report.json` (adds wall clock and
//! artifact names), plus task CSVs. Cross-seed tasks write to
//! `<out>/<task>/<config hash>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{adversarial_train, attack_eval, mi_attack, AttackConfig, MiScore, StfGradient, Target};
use crate::bayes::{stf_train, ElboConfig, StfModel};
use crate::bounds::{delta_term, empirical_risk_mc, pac_bayes_bound, BoundReport, Sigma2Estimate, Sigma2Recorder};
use crate::checkpoint::short_hash;
use crate::data::{corrupt, load_idx, make_blobs, make_two_moons, CorruptionSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::rng::Prng;
use crate::stability::{stability_profile, StabilityReport};
use crate::train::{accuracy, train_deterministic, train_with_hook, TrainConfig};
use crate::uncertainty::{
    accuracy_at_threshold, asymptotic_bound, ece, mc_predict, predict_deterministic, scale_sweep, write_sweep_csv,
    write_threshold_csv, EceNorm, PredictiveSummary, ThresholdPoint,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    StfTrain,
    Stability,
    Ablation,
    Evaluate,
    CorruptionGrid,
    ThresholdCurve,
    Bound,
    ScaleSweep,
    Attack,
    AdvTrain,
    Mi,
}

impl Task {
    pub const ALL: [Task; 12] = [
        Task::Pretrain,
        Task::StfTrain,
        Task::Stability,
        Task::Ablation,
        Task::Evaluate,
        Task::CorruptionGrid,
        Task::ThresholdCurve,
        Task::Bound,
        Task::ScaleSweep,
        Task::Attack,
        Task::AdvTrain,
        Task::Mi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::StfTrain => "stf_train",
            Task::Stability => "stability",
            Task::Ablation => "ablation",
            Task::Evaluate => "evaluate",
            Task::CorruptionGrid => "corruption_grid",
            Task::ThresholdCurve => "threshold_curve",
            Task::Bound => "bound",
            Task::ScaleSweep => "scale_sweep",
            Task::Attack => "attack",
            Task::AdvTrain => "adv_train",
            Task::Mi => "mi",
        }
    }

    fn needs_stf(self) -> bool {
        matches!(
            self,
            Task::StfTrain
                | Task::Evaluate
                | Task::CorruptionGrid
                | Task::ThresholdCurve
                | Task::Bound
                | Task::ScaleSweep
        )
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        train: usize,
        test: usize,
        noise: f64,
    },
    Blobs {
        train: usize,
        test: usize,
        centers: Vec<Vec<f64>>,
        std: f64,
    },
    /// A directory with the four standard IDX files.
    Idx {
        dir: PathBuf,
        /// Class-balanced cap on the training split.
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    /// Two-class data gets a single-logit head (required by the far-field
    /// bound, which is stated for a scalar output).
    #[serde(default)]
    pub binary_head: bool,
}

fn default_mc() -> usize {
    100
}

fn default_bins() -> usize {
    15
}

fn default_thresholds() -> Vec<f64> {
    vec![
        0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995, 0.999,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Posterior samples per predictive evaluation.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub ece_norm: EceNorm,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            mc_samples: default_mc(),
            ece_bins: default_bins(),
            ece_norm: EceNorm::default(),
            thresholds: default_thresholds(),
        }
    }
}

fn default_window() -> usize {
    5
}

fn default_conf() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    /// Final pretraining epochs whose iterates estimate `Sigma2`.
    #[serde(default = "default_window")]
    pub window_epochs: usize,
    #[serde(default = "default_conf")]
    pub confidence: f64,
    #[serde(default = "default_mc")]
    pub risk_samples: usize,
}

impl Default for BoundSpec {
    fn default() -> Self {
        Self {
            window_epochs: default_window(),
            confidence: default_conf(),
            risk_samples: default_mc(),
        }
    }
}

fn default_directions() -> usize {
    100
}

fn default_deltas() -> Vec<f64> {
    (0..=6).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            directions: default_directions(),
            deltas: default_deltas(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    #[default]
    Baseline,
    Stf,
    Both,
}

fn default_radius() -> f64 {
    0.1
}

fn default_steps() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default)]
    pub target: AttackTarget,
    #[serde(default)]
    pub stf_gradient: StfGradient,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            radius: default_radius(),
            steps: default_steps(),
            step_size: None,
            random_start: true,
            target: AttackTarget::default(),
            stf_gradient: StfGradient::default(),
        }
    }
}

impl AttackSpec {
    fn config(&self, clip: Option<(f64, f64)>) -> AttackConfig {
        AttackConfig {
            radius: self.radius,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
            clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiSpec {
    #[serde(default)]
    pub score: MiScore,
    /// Also attack the STF model.
    #[serde(default)]
    pub include_stf: bool,
}

fn default_bayes_index() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Task run by the generic `run` entry point; subcommands override it.
    #[serde(default)]
    pub task: Option<Task>,
    pub dataset: DatasetSpec,
    /// Seed for synthetic data and corruptions; shared by all model seeds.
    #[serde(default)]
    pub data_seed: u64,
    pub arch: ArchSpec,
    pub pretrain: TrainConfig,
    /// Single-layer retraining budget for the stability profile.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    #[serde(default)]
    pub elbo: Option<ElboConfig>,
    #[serde(default = "default_bayes_index")]
    pub bayes_index: usize,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub bound: BoundSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub mi: MiSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn config_error(path: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; serde failures carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if self.arch.hidden.contains(&0) {
            return Err(config_error("arch.hidden", "widths must be >= 1"));
        }
        self.pretrain
            .validate()
            .map_err(|e| config_error("pretrain", e.to_string()))?;
        if let Some(r) = &self.retrain {
            r.validate().map_err(|e| config_error("retrain", e.to_string()))?;
        }
        if let Some(e) = &self.elbo {
            e.validate().map_err(|err| config_error("elbo", err.to_string()))?;
        }
        let depth = self.arch.hidden.len() + 1;
        if self.bayes_index == 0 || self.bayes_index > depth {
            return Err(config_error("bayes_index", format!("must lie in 1..={depth}")));
        }
        if self.eval.mc_samples == 0 {
            return Err(config_error("eval.mc_samples", "must be >= 1"));
        }
        if self.eval.ece_bins == 0 {
            return Err(config_error("eval.ece_bins", "must be >= 1"));
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(config_error("eval.thresholds", format!("{t} outside [0, 1]")));
        }
        if !(self.bound.confidence > 0.0 && self.bound.confidence < 1.0) {
            return Err(config_error("bound.confidence", "must lie in (0, 1)"));
        }
        if self.bound.risk_samples == 0 {
            return Err(config_error("bound.risk_samples", "must be >= 1"));
        }
        self.attack
            .config(None)
            .validate()
            .map_err(|e| config_error("attack", e.to_string()))?;
        Ok(())
    }

    /// Hash of everything that determines per-seed results: the config
    /// without `task`, `seeds` and `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            for key in ["task", "seeds", "output_dir"] {
                map.remove(key);
            }
        }
        // serde_json maps are ordered by key, so this text is canonical.
        Ok(short_hash(serde_json::to_string(&value)?.as_bytes()))
    }

    fn require_elbo(&self, task: Task) -> Result<&ElboConfig> {
        self.elbo
            .as_ref()
            .ok_or_else(|| config_error("elbo", format!("task `{}` needs an elbo section", task.name())))
    }
}

/// Train and test splits built from a [`DatasetSpec`].
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn build(spec: &DatasetSpec, data_seed: u64) -> Result<Self> {
        let root = Prng::new(data_seed);
        match spec {
            DatasetSpec::TwoMoons { train, test, noise } => Ok(Self {
                train: make_two_moons(*train, *noise, &mut root.fork(0))?,
                test: make_two_moons(*test, *noise, &mut root.fork(1))?.with_split(Split::Test),
            }),
            DatasetSpec::Blobs {
                train,
                test,
                centers,
                std,
            } => Ok(Self {
                train: make_blobs(*train, centers, *std, &mut root.fork(0))?,
                test: make_blobs(*test, centers, *std, &mut root.fork(1))?.with_split(Split::Test),
            }),
            DatasetSpec::Idx {
                dir,
                train_per_class,
                test_per_class,
            } => {
                let mut train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let mut test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?
                    .with_split(Split::Test);
                if let Some(n) = train_per_class {
                    train = train.balanced_subset(*n)?;
                }
                if let Some(n) = test_per_class {
                    test = test.balanced_subset(*n)?;
                }
                Ok(Self { train, test })
            }
        }
    }
}

/// `[input, hidden.., output]` for the given data.
pub fn widths(arch: &ArchSpec, data: &Dataset) -> Result<Vec<usize>> {
    let k = data.num_classes();
    let out = if arch.binary_head {
        if k != 2 {
            return Err(config_error(
                "arch.binary_head",
                format!("needs two classes, data has {k}"),
            ));
        }
        1
    } else {
        k
    };
    let mut w = vec![data.dim()];
    w.extend(&arch.hidden);
    w.push(out);
    Ok(w)
}

/// Metric values keyed by dotted names. `None` marks an undefined or
/// non-finite value (JSON has no infinity).
pub type Metrics = BTreeMap<String, Option<f64>>;

fn put(m: &mut Metrics, key: impl Into<String>, v: f64) {
    m.insert(key.into(), v.is_finite().then_some(v));
}

/// Deterministic per-seed output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub task: Task,
    /// `None` for cross-seed tasks.
    pub seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub task: Task,
    pub seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub metrics: Metrics,
    /// File names relative to the report's directory.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied().flatten()
    }
}

/// Streams of `Prng::new(seed)`. Init and pretraining match the stability
/// profile's, so both see the same pretrained network.
mod stream {
    pub const INIT: u64 = 0;
    pub const PRETRAIN: u64 = 1;
    pub const ELBO: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const CORRUPT_EVAL: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const SWEEP: u64 = 6;
    pub const MI: u64 = 7;
    pub const RISK: u64 = 8;
    pub const ABLATION: u64 = 1000;
}

/// Lazily trained models for one seed.
struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Splits,
    root: Prng,
    record_sigma2: bool,
    pretrained: Option<MlpModel>,
    sigma2: Option<Sigma2Estimate>,
    stf: Option<StfModel>,
    baseline_test: Option<PredictiveSummary>,
    stf_test: Option<PredictiveSummary>,
}

impl<'a> SeedRun<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a Splits, seed: u64, record_sigma2: bool) -> Self {
        Self {
            cfg,
            data,
            root: Prng::new(seed),
            record_sigma2,
            pretrained: None,
            sigma2: None,
            stf: None,
            baseline_test: None,
            stf_test: None,
        }
    }

    fn init(&self, stream: u64) -> Result<MlpModel> {
        MlpModel::he_init(&widths(&self.cfg.arch, &self.data.train)?, &mut self.root.fork(stream))
    }

    fn pretrained(&mut self) -> Result<&MlpModel> {
        if self.pretrained.is_none() {
            let init = self.init(stream::INIT)?;
            let mut prng = self.root.fork(stream::PRETRAIN);
            let model = if self.record_sigma2 {
                let mut rec = Sigma2Recorder::new(
                    self.cfg.pretrain.epochs,
                    self.cfg.bound.window_epochs,
                    self.cfg.bayes_index,
                )
                .map_err(|e| config_error("bound.window_epochs", e.to_string()))?;
                let out = train_with_hook(init, &self.data.train, &self.cfg.pretrain, &mut prng, &mut rec)?;
                self.sigma2 = Some(rec.finish()?);
                out.model
            } else {
                train_deterministic(init, &self.data.train, &self.cfg.pretrain, &mut prng)?.model
            };
            self.pretrained = Some(model);
        }
        Ok(self.pretrained.as_ref().expect("set above"))
    }

    fn stf(&mut self, task: Task) -> Result<&StfModel> {
        if self.stf.is_none() {
            let elbo = self.cfg.require_elbo(task)?.clone();
            let index = self.cfg.bayes_index;
            let mut prng = self.root.fork(stream::ELBO);
            let pre = self.pretrained()?.clone();
            self.stf = Some(stf_train(&pre, index, &self.data.train, &elbo, &mut prng)?.model);
        }
        Ok(self.stf.as_ref().expect("set above"))
    }

    fn baseline_test(&mut self) -> Result<&PredictiveSummary> {
        if self.baseline_test.is_none() {
            let data = self.data;
            let s = predict_deterministic(self.pretrained()?, data.test.features())?;
            self.baseline_test = Some(s);
        }
        Ok(self.baseline_test.as_ref().expect("set above"))
    }

    fn stf_test(&mut self, task: Task) -> Result<&PredictiveSummary> {
        if self.stf_test.is_none() {
            let samples = self.cfg.eval.mc_samples;
            let mut prng = self.root.fork(stream::EVAL);
            let x = self.data.test.features().clone();
            let s = mc_predict(self.stf(task)?, &x, samples, &mut prng)?;
            self.stf_test = Some(s);
        }
        Ok(self.stf_test.as_ref().expect("set above"))
    }

    fn ece_of(&self, s: &PredictiveSummary, labels: &[usize]) -> Result<crate::uncertainty::EceReport> {
        ece(s, labels, self.cfg.eval.ece_bins, self.cfg.eval.ece_norm)
    }

    /// Runs one task; returns metrics and writes artifacts into `dir`.
    fn run(&mut self, task: Task, dir: &Path) -> Result<(Metrics, Vec<String>)> {
        let mut m = Metrics::new();
        let mut artifacts = Vec::new();
        let labels = self.data.test.labels().to_vec();
        match task {
            Task::Pretrain => {
                let model = self.pretrained()?.clone();
                put(&mut m, "train_accuracy", accuracy(&model, &self.data.train)?);
                let s = self.baseline_test()?.clone();
                put(&mut m, "test_accuracy", s.accuracy(&labels));
                put(&mut m, "test_ece", self.ece_of(&s, &labels)?.ece);
                model.save_json(&dir.join("model.json"))?;
                artifacts.push("model.json".into());
            }
            Task::StfTrain => {
                let base = self.baseline_test()?.accuracy(&labels);
                let stf = self.stf(task)?.clone();
                let s = self.stf_test(task)?.clone();
                put(&mut m, "baseline_test_accuracy", base);
                put(&mut m, "stf_test_accuracy", s.accuracy(&labels));
                put(
                    &mut m,
                    "stf_mean_model_test_accuracy",
                    accuracy(&stf.mean_model(), &self.data.test)?,
                );
                let sigma = stf.bayes.sigma_w();
                put(
                    &mut m,
                    "stf_mean_sigma",
                    sigma.data().iter().sum::<f64>() / sigma.len() as f64,
                );
                stf.save_json(&dir.join("stf.json"), &self.cfg.hash()?)?;
                artifacts.push("stf.json".into());
            }
            Task::Evaluate => {
                let base = self.baseline_test()?.clone();
                let stf = self.stf_test(task)?.clone();
                for (name, s) in [("baseline", &base), ("stf", &stf)] {
                    let rep = self.ece_of(s, &labels)?;
                    put(&mut m, format!("{name}.accuracy"), s.accuracy(&labels));
                    put(&mut m, format!("{name}.ece"), rep.ece);
                    let mean_conf = s.confidence.iter().sum::<f64>() / s.len().max(1) as f64;
                    put(&mut m, format!("{name}.mean_confidence"), mean_conf);
                    let file = format!("ece_bins_{name}.csv");
                    rep.write_csv(&dir.join(&file))?;
                    artifacts.push(file);
                }
            }
            Task::CorruptionGrid => {
                let pre = self.pretrained()?.clone();
                let samples = self.cfg.eval.mc_samples;
                let stf = self.stf(task)?.clone();
                let mut eval_prng = self.root.fork(stream::CORRUPT_EVAL);
                let mut data_prng = Prng::new(self.cfg.data_seed).fork(2);
                let mut wins = 0usize;
                let grid = CorruptionSpec::grid();
                let mut w = csv::Writer::from_path(dir.join("corruption_grid.csv"))?;
                w.write_record(["cell", "baseline_accuracy", "baseline_ece", "stf_accuracy", "stf_ece"])?;
                for spec in &grid {
                    let c = corrupt(&self.data.test, *spec, &mut data_prng)?;
                    let b = predict_deterministic(&pre, c.features())?;
                    let s = mc_predict(&stf, c.features(), samples, &mut eval_prng)?;
                    let (be, se) = (self.ece_of(&b, c.labels())?.ece, self.ece_of(&s, c.labels())?.ece);
                    let (ba, sa) = (b.accuracy(c.labels()), s.accuracy(c.labels()));
                    let label = spec.label();
                    put(&mut m, format!("{label}.baseline_ece"), be);
                    put(&mut m, format!("{label}.stf_ece"), se);
                    put(&mut m, format!("{label}.baseline_accuracy"), ba);
                    put(&mut m, format!("{label}.stf_accuracy"), sa);
                    w.write_record([label, ba.to_string(), be.to_string(), sa.to_string(), se.to_string()])?;
                    wins += usize::from(se <= be);
                }
                w.flush().map_err(|e| Error::io(dir, e))?;
                artifacts.push("corruption_grid.csv".into());
                put(&mut m, "cells", grid.len() as f64);
                put(&mut m, "stf_wins", wins as f64);
            }
            Task::ThresholdCurve => {
                let t = self.cfg.eval.thresholds.clone();
                let base = accuracy_at_threshold(&self.baseline_test()?.clone(), &labels, &t)?;
                let stf = accuracy_at_threshold(&self.stf_test(task)?.clone(), &labels, &t)?;
                for (name, curve) in [("baseline", &base), ("stf", &stf)] {
                    for p in curve.iter() {
                        put(&mut m, format!("{name}.t{}.coverage", p.threshold), p.coverage);
                        put(
                            &mut m,
                            format!("{name}.t{}.accuracy", p.threshold),
                            p.accuracy.unwrap_or(f64::NAN),
                        );
                    }
                }
                if let Some((b, s)) = highest_common(&base, &stf) {
                    put(&mut m, "highest_common.threshold", b.threshold);
                    put(
                        &mut m,
                        "highest_common.baseline_accuracy",
                        b.accuracy.unwrap_or(f64::NAN),
                    );
                    put(&mut m, "highest_common.stf_accuracy", s.accuracy.unwrap_or(f64::NAN));
                }
                write_threshold_csv(&[("baseline", &base), ("stf", &stf)], &dir.join("threshold_curve.csv"))?;
                artifacts.push("threshold_curve.csv".into());
            }
            Task::Ablation => {
                let elbo = self.cfg.require_elbo(task)?.clone();
                let pre = self.pretrained()?.clone();
                let base = self.baseline_test()?.clone();
                put(&mut m, "baseline.accuracy", base.accuracy(&labels));
                put(&mut m, "baseline.ece", self.ece_of(&base, &labels)?.ece);
                let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
                w.write_record(["bayes_layer_index", "accuracy", "ece"])?;
                for k in 1..=pre.depth() {
                    let mut prng = self.root.fork(stream::ABLATION + k as u64);
                    let stf = stf_train(&pre, k, &self.data.train, &elbo, &mut prng)?.model;
                    let s = mc_predict(&stf, self.data.test.features(), self.cfg.eval.mc_samples, &mut prng)?;
                    let (acc, e) = (s.accuracy(&labels), self.ece_of(&s, &labels)?.ece);
                    put(&mut m, format!("layer{k}.accuracy"), acc);
                    put(&mut m, format!("layer{k}.ece"), e);
                    w.write_record([k.to_string(), acc.to_string(), e.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(dir, e))?;
                artifacts.push("ablation.csv".into());
            }
            Task::Bound => {
                self.pretrained()?;
                let s2 = self
                    .sigma2
                    .clone()
                    .ok_or_else(|| Error::Usage("sigma2 was not recorded during pretraining".into()))?;
                let stf = self.stf(task)?.clone();
                let terms = delta_term(&stf.bayes, &s2)?;
                let mut prng = self.root.fork(stream::RISK);
                let s = self.cfg.bound.risk_samples;
                let r_hat = empirical_risk_mc(&stf, &self.data.train, s, &mut prng)?;
                let test_risk = empirical_risk_mc(&stf, &self.data.test, s, &mut prng)?;
                let mut rep = pac_bayes_bound(
                    terms,
                    self.data.train.len(),
                    self.cfg.bound.confidence,
                    r_hat,
                    test_risk,
                )?;
                rep.sigma2_iterates = s2.iterates;
                bound_metrics(&mut m, &rep);
                let text = serde_json::to_string_pretty(&rep)?;
                write_text(&dir.join("bound_report.json"), &text)?;
                artifacts.push("bound_report.json".into());
            }
            Task::ScaleSweep => {
                let stf = self.stf(task)?.clone();
                let mut prng = self.root.fork(stream::SWEEP);
                let dim = stf.input_dim();
                let dirs: Vec<Vec<f64>> = (0..self.cfg.sweep.directions)
                    .map(|_| {
                        let v: Vec<f64> = (0..dim).map(|_| prng.normal()).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / n).collect()
                    })
                    .collect();
                let rows = scale_sweep(&stf, &dirs, &self.cfg.sweep.deltas)?;
                let excess = rows
                    .iter()
                    .map(|r| r.confidence - r.bound)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut form_gap: f64 = 0.0;
                for d in &dirs {
                    let b = asymptotic_bound(&stf, d)?;
                    if b.general_bound_logit.is_finite() {
                        form_gap = form_gap.max((b.general_bound_logit - b.reduced_bound_logit).abs());
                    }
                }
                put(&mut m, "directions", dirs.len() as f64);
                put(&mut m, "max_confidence_minus_bound", excess);
                put(&mut m, "max_bound_form_difference", form_gap);
                write_sweep_csv(&rows, &dir.join("scale_sweep.csv"))?;
                artifacts.push("scale_sweep.csv".into());
            }
            Task::Attack => {
                let attack = self.cfg.attack.config(self.data.test.feature_range);
                let target = self.cfg.attack.target;
                if matches!(target, AttackTarget::Baseline | AttackTarget::Both) {
                    let pre = self.pretrained()?.clone();
                    let mut prng = self.root.fork(stream::ATTACK);
                    put(&mut m, "baseline.clean_accuracy", accuracy(&pre, &self.data.test)?);
                    put(
                        &mut m,
                        "baseline.adv_accuracy",
                        attack_eval(Target::Mlp(&pre), &self.data.test, &attack, &mut prng)?,
                    );
                }
                if matches!(target, AttackTarget::Stf | AttackTarget::Both) {
                    let stf = self.stf(task)?.clone();
                    let mut prng = self.root.fork(stream::ATTACK).fork(1);
                    let t = Target::Stf {
                        model: &stf,
                        samples: self.cfg.eval.mc_samples,
                        gradient: self.cfg.attack.stf_gradient,
                    };
                    put(&mut m, "stf.clean_accuracy", self.stf_test(task)?.accuracy(&labels));
                    put(
                        &mut m,
                        "stf.adv_accuracy",
                        attack_eval(t, &self.data.test, &attack, &mut prng)?,
                    );
                }
            }
            Task::AdvTrain => {
                let attack = self.cfg.attack.config(self.data.test.feature_range);
                let plain = self.pretrained()?.clone();
                let init = self.init(stream::INIT)?;
                let defended = adversarial_train(
                    init,
                    &self.data.train,
                    &self.cfg.pretrain,
                    &attack,
                    &mut self.root.fork(stream::PRETRAIN),
                )?
                .model;
                for (name, model) in [("undefended", &plain), ("defended", &defended)] {
                    let mut prng = self.root.fork(stream::ATTACK);
                    put(
                        &mut m,
                        format!("{name}.clean_accuracy"),
                        accuracy(model, &self.data.test)?,
                    );
                    put(
                        &mut m,
                        format!("{name}.adv_accuracy"),
                        attack_eval(Target::Mlp(model), &self.data.test, &attack, &mut prng)?,
                    );
                }
                defended.save_json(&dir.join("defended_model.json"))?;
                artifacts.push("defended_model.json".into());
            }
            Task::Mi => {
                let pre = self.pretrained()?.clone();
                let n = self.data.train.len().min(self.data.test.len());
                let idx: Vec<usize> = (0..n).collect();
                let (members, outsiders) = (self.data.train.subset(&idx, "mi"), self.data.test.subset(&idx, "mi"));
                let score = self.cfg.mi.score;
                let mut prng = self.root.fork(stream::MI);
                let rep = mi_attack(Target::Mlp(&pre), &members, &outsiders, score, &mut prng)?;
                put(&mut m, "baseline.best_accuracy", rep.best_accuracy);
                put(&mut m, "baseline.best_threshold", rep.best_threshold);
                put(&mut m, "baseline.train_accuracy", accuracy(&pre, &members)?);
                put(&mut m, "baseline.test_accuracy", accuracy(&pre, &outsiders)?);
                if self.cfg.mi.include_stf {
                    let stf = self.stf(task)?.clone();
                    let t = Target::Stf {
                        model: &stf,
                        samples: self.cfg.eval.mc_samples,
                        gradient: StfGradient::Mean,
                    };
                    let rep = mi_attack(t, &members, &outsiders, score, &mut prng)?;
                    put(&mut m, "stf.best_accuracy", rep.best_accuracy);
                    put(&mut m, "stf.best_threshold", rep.best_threshold);
                }
            }
            Task::Stability => return Err(Error::Usage("stability is a cross-seed task".into())),
        }
        Ok((m, artifacts))
    }
}

/// Highest threshold at which both curves keep at least one example.
pub fn highest_common<'c>(
    a: &'c [ThresholdPoint],
    b: &'c [ThresholdPoint],
) -> Option<(&'c ThresholdPoint, &'c ThresholdPoint)> {
    a.iter()
        .zip(b)
        .filter(|(p, q)| p.coverage > 0.0 && q.coverage > 0.0)
        .max_by(|(p, _), (q, _)| p.threshold.total_cmp(&q.threshold))
}

fn bound_metrics(m: &mut Metrics, rep: &BoundReport) {
    put(m, "kl_q1_p1", rep.terms.kl_q1_p1);
    put(m, "trace_term", rep.terms.trace_term);
    put(m, "logdet_term", rep.terms.logdet_term);
    put(m, "frob_terms", rep.terms.frob_terms);
    put(m, "delta", rep.terms.delta);
    put(m, "m", rep.m as f64);
    put(m, "bound_rhs", rep.bound_rhs);
    put(m, "empirical_risk", rep.empirical_risk);
    put(m, "test_risk", rep.test_risk);
    put(m, "gap", rep.gap);
    put(m, "holds", f64::from(u8::from(rep.holds)));
    put(m, "vacuous", f64::from(u8::from(rep.vacuous)));
    put(m, "sigma2_iterates", rep.sigma2_iterates as f64);
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_outputs(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let metrics = MetricsFile {
        config_hash: report.config_hash.clone(),
        task: report.task,
        seed: report.seed,
        seeds: report.seeds.clone(),
        metrics: report.metrics.clone(),
    };
    write_text(
        &dir.join("metrics.json"),
        &(serde_json::to_string_pretty(&metrics)? + "\n"),
    )?;
    write_text(
        &dir.join("report.json"),
        &(serde_json::to_string_pretty(report)? + "\n"),
    )
}

/// Directory of one task's outputs for this config.
pub fn task_dir(out: &Path, task: Task, hash: &str) -> PathBuf {
    out.join(task.name()).join(hash)
}

fn stability_metrics(rep: &StabilityReport) -> Metrics {
    let mut m = Metrics::new();
    for (k, (mean, std)) in rep.mean.iter().zip(&rep.std).enumerate() {
        put(&mut m, format!("layer{}.mean", k + 1), *mean);
        put(&mut m, format!("layer{}.std", k + 1), *std);
    }
    let n = rep.pretrain_accuracy.len().max(1) as f64;
    put(
        &mut m,
        "pretrain_accuracy.mean",
        rep.pretrain_accuracy.iter().sum::<f64>() / n,
    );
    m
}

/// Runs `tasks` for every seed of `cfg` and writes their outputs under
/// `out`. Returns one report per (task, seed), cross-seed tasks once.
pub fn run_tasks(cfg: &ExperimentConfig, tasks: &[Task], out: &Path) -> Result<Vec<ExperimentReport>> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let data = Splits::build(&cfg.dataset, cfg.data_seed)?;
    let mut reports = Vec::new();
    if tasks.contains(&Task::Stability) {
        let start = Instant::now();
        let retrain = cfg
            .retrain
            .as_ref()
            .ok_or_else(|| config_error("retrain", "the stability task needs a retrain section"))?;
        let rep = stability_profile(
            &widths(&cfg.arch, &data.train)?,
            &data.train,
            &cfg.seeds,
            &cfg.pretrain,
            retrain,
        )?;
        let dir = task_dir(out, Task::Stability, &hash);
        create_dir(&dir)?;
        let mut full = serde_json::to_value(&rep)?;
        full["config_hash"] = serde_json::Value::String(hash.clone());
        write_text(
            &dir.join("stability_report.json"),
            &(serde_json::to_string_pretty(&full)? + "\n"),
        )?;
        rep.write_csv(&dir.join("stability.csv"))?;
        let report = ExperimentReport {
            config_hash: hash.clone(),
            task: Task::Stability,
            seed: None,
            seeds: cfg.seeds.clone(),
            metrics: stability_metrics(&rep),
            artifacts: vec!["stability_report.json".into(), "stability.csv".into()],
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        write_outputs(&dir, &report)?;
        reports.push(report);
    }
    let per_seed: Vec<Task> = tasks.iter().copied().filter(|t| *t != Task::Stability).collect();
    if per_seed.iter().any(|t| t.needs_stf()) || per_seed.contains(&Task::Ablation) {
        cfg.require_elbo(per_seed[0])?;
    }
    for &seed in &cfg.seeds {
        let mut run = SeedRun::new(cfg, &data, seed, per_seed.contains(&Task::Bound));
        for &task in &per_seed {
            let start = Instant::now();
            let dir = task_dir(out, task, &hash).join(format!("seed-{seed}"));
            create_dir(&dir)?;
            let (metrics, artifacts) = run.run(task, &dir)?;
            let report = ExperimentReport {
                config_hash: hash.clone(),
                task,
                seed: Some(seed),
                seeds: cfg.seeds.clone(),
                metrics,
                artifacts,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            };
            write_outputs(&dir, &report)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Runs the config's own `task`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ExperimentReport>> {
    let task = cfg.task.ok_or_else(|| config_error("task", "no task given"))?;
    run_tasks(cfg, &[task], out)
}

/// The smoke-test pipeline run by `demo`.
pub const DEMO_TASKS: [Task; 6] = [
    Task::Pretrain,
    Task::Stability,
    Task::StfTrain,
    Task::Evaluate,
    Task::Bound,
    Task::ScaleSweep,
];

/// Small two-moons configuration exercising every demo task in seconds.
pub fn demo_config() -> ExperimentConfig {
    use crate::bayes::{KlWeighting, VariationalInit};
    use crate::train::SgdConfig;
    let sgd = |lr: f64| SgdConfig {
        learning_rate: lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: vec![],
    };
    let train = |epochs: usize| TrainConfig {
        epochs,
        batch_size: 32,
        sgd: sgd(0.05),
        early_stop: None,
    };
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        task: None,
        dataset: DatasetSpec::TwoMoons {
            train: 400,
            test: 200,
            noise: 0.1,
        },
        data_seed: 0,
        arch: ArchSpec {
            hidden: vec![16, 16],
            binary_head: true,
        },
        pretrain: train(30),
        retrain: Some(train(30)),
        elbo: Some(ElboConfig {
            epochs: 30,
            batch_size: 32,
            sgd: sgd(0.05),
            kl_weighting: KlWeighting::PerEpoch,
            mc_samples_per_step: 1,
            init: VariationalInit::default(),
        }),
        bayes_index: 1,
        eval: EvalSpec {
            mc_samples: 50,
            ..EvalSpec::default()
        },
        bound: BoundSpec {
            risk_samples: 20,
            ..BoundSpec::default()
        },
        sweep: SweepSpec {
            directions: 10,
            ..SweepSpec::default()
        },
        attack: AttackSpec::default(),
        mi: MiSpec::default(),
        seeds: vec![1, 2],
        output_dir: None,
    }
}

/// Mean and population std of every metric across per-seed reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub config_hash: String,
    pub task: Task,
    pub seeds: Vec<u64>,
    pub mean: Metrics,
    pub std: Metrics,
}

/// Merges `metrics.json` or `report.json` files of one config and task.
pub fn report_merge(paths: &[PathBuf]) -> Result<MergedReport> {
    if paths.is_empty() {
        return Err(Error::input("no reports to merge"));
    }
    let files = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<MetricsFile>(&text).map_err(|e| Error::Format {
                path: p.clone(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    merge_metrics(&files)
}

pub fn merge_metrics(files: &[MetricsFile]) -> Result<MergedReport> {
    let first = files.first().ok_or_else(|| Error::input("no reports to merge"))?;
    if let Some(f) = files.iter().find(|f| f.config_hash != first.config_hash) {
        return Err(Error::input(format!(
            "mixed config hashes: {} and {}",
            first.config_hash, f.config_hash
        )));
    }
    if let Some(f) = files.iter().find(|f| f.task != first.task) {
        return Err(Error::input(format!(
            "mixed tasks: {} and {}",
            first.task.name(),
            f.task.name()
        )));
    }
    let mut keys: Vec<&String> = files.iter().flat_map(|f| f.metrics.keys()).collect();
    keys.sort();
    keys.dedup();
    let (mut mean, mut std) = (Metrics::new(), Metrics::new());
    for key in keys {
        let vals: Vec<f64> = files
            .iter()
            .filter_map(|f| f.metrics.get(key).copied().flatten())
            .collect();
        if vals.is_empty() {
            mean.insert(key.clone(), None);
            std.insert(key.clone(), None);
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        mean.insert(key.clone(), Some(mu));
        std.insert(key.clone(), Some(var.sqrt()));
    }
    Ok(MergedReport {
        config_hash: first.config_hash.clone(),
        task: first.task,
        seeds: files.iter().filter_map(|f| f.seed).collect(),
        mean,
        std,
    })
}
