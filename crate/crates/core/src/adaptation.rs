//! Deployment-time adaptation: estimate the observed label distribution from
//! the deployed model, apportion and generate activations, retrain the pruned
//! model's classifier. Also the stored-sample retraining baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cvae::ActivationGenerator;
use crate::error::{Error, Result};
use crate::evaluation::top1_accuracy;
use crate::models::{train_softmax, ActivationBatch, Dataset, MlpModel, TrainConfig};
use crate::numerics::{
    LrSchedule, Matrix, Network, OptimizerConfig, OptimizerKind, Rng, F32_BYTES,
};

/// Probability of each observed class. Only classes with positive mass are
/// stored, so the key set is the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: BTreeMap<usize, f64>,
}

impl ClassDistribution {
    pub fn from_counts(counts: &BTreeMap<usize, usize>) -> Result<Self> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "distribution from an empty stream".into(),
            ));
        }
        let probs = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&c, &n)| (c, n as f64 / total as f64))
            .collect();
        Ok(Self { probs })
    }

    /// Frequencies of `labels`.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn from_probs(probs: BTreeMap<usize, f64>) -> Result<Self> {
        if probs.values().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and ≥ 0".into(),
            ));
        }
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self {
            probs: probs.into_iter().filter(|(_, p)| *p > 0.0).collect(),
        })
    }

    pub fn point_mass(class: usize) -> Self {
        Self {
            probs: BTreeMap::from([(class, 1.0)]),
        }
    }

    pub fn probs(&self) -> &BTreeMap<usize, f64> {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs.get(&class).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> Vec<usize> {
        self.probs.keys().copied().collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(&c) = self.probs.keys().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {c} in distribution but model has {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Class frequencies of the deployed model's argmax predictions on a stream.
pub fn estimate_domain(m0: &MlpModel, observed: &Matrix) -> Result<ClassDistribution> {
    if observed.rows() == 0 {
        return Err(Error::InvalidArgument(
            "cannot estimate a domain from an empty stream".into(),
        ));
    }
    ClassDistribution::from_labels(&m0.predict(observed)?)
}

/// Largest-remainder apportionment of `total` rows over the distribution.
/// Ties on the remainder go to the lower class index.
pub fn allocate_counts(dist: &ClassDistribution, total: usize) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    let mut remainders = Vec::with_capacity(dist.probs.len());
    let mut assigned = 0usize;
    for (&c, &p) in &dist.probs {
        let exact = p * total as f64;
        let base = exact.floor() as usize;
        counts.insert(c, base);
        assigned += base;
        remainders.push((exact - base as f64, c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    // probabilities summing to 1 − ε can leave more than |support| rows, so cycle
    for (_, c) in remainders
        .iter()
        .cycle()
        .take(total.saturating_sub(assigned))
    {
        *counts.get_mut(c).unwrap() += 1;
    }
    counts
}

/// Multinomial draw of `total` class labels; the alternative to
/// [`allocate_counts`] when sampling noise in the counts is wanted.
pub fn allocate_multinomial(
    dist: &ClassDistribution,
    total: usize,
    rng: &mut Rng,
) -> BTreeMap<usize, usize> {
    let classes: Vec<(usize, f64)> = dist.probs.iter().map(|(&c, &p)| (c, p)).collect();
    let mut counts: BTreeMap<usize, usize> = classes.iter().map(|&(c, _)| (c, 0)).collect();
    for _ in 0..total {
        let u = rng.uniform() as f64;
        let mut acc = 0.0;
        let mut pick = classes.last().map(|&(c, _)| c).unwrap_or(0);
        for &(c, p) in &classes {
            acc += p;
            if u < acc {
                pick = c;
                break;
            }
        }
        *counts.entry(pick).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    GroundTruth,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    LargestRemainder,
    Multinomial,
}

/// SGD-with-momentum classifier retraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub momentum: f32,
}

impl RetrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::SgdMomentum {
                    momentum: self.momentum,
                },
                lr: self.lr,
                schedule: LrSchedule {
                    step_epochs: self.lr_step_epochs,
                    gamma: self.lr_gamma,
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Total generated activations `R`.
    pub generated: usize,
    pub retrain: RetrainConfig,
    pub label_mode: LabelMode,
    pub allocation: AllocationMode,
    /// Reject distributions whose support exceeds `generated`.
    pub strict_coverage: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Generated,
    StoredBaseline,
    NoRetrain,
}

/// One adaptation run. Wall-clock time is kept in memory but never
/// serialized, so report files stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub method: Method,
    pub label_mode: LabelMode,
    pub pre_accuracy: f32,
    pub post_accuracy: f32,
    pub class_counts: BTreeMap<usize, usize>,
    pub rows_used: usize,
    pub epochs_run: usize,
    pub ledger: Option<String>,
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

/// Retrains only the classifier of `model` on `(features, labels)`.
pub fn retrain_classifier(
    model: &MlpModel,
    features: &Matrix,
    labels: &[usize],
    cfg: &RetrainConfig,
    rng: &mut Rng,
) -> Result<MlpModel> {
    if features.cols() != model.activation_dim() {
        return Err(Error::Shape {
            op: "retrain_classifier",
            left: features.shape(),
            right: (features.rows(), model.activation_dim()),
        });
    }
    let mut adapted = model.clone();
    let mut head = Network {
        layers: vec![adapted.classifier().clone()],
    };
    train_softmax(
        &mut head,
        features,
        labels,
        &cfg.train_config(),
        rng,
        |_, _| Ok(()),
    )?;
    head.clear_cache();
    *adapted.classifier_mut() = head.layers.pop().expect("one layer");
    Ok(adapted)
}

/// Generates `R` activations following `dist` and retrains the classifier of
/// `mp` on them. The feature extractor is not touched.
pub fn adapt_classifier(
    mp: &MlpModel,
    generator: &dyn ActivationGenerator,
    dist: &ClassDistribution,
    cfg: &AdaptationConfig,
    eval: &Dataset,
    eval_classes: &[usize],
    seed: u64,
) -> Result<(MlpModel, AdaptationReport)> {
    let started = Instant::now();
    if generator.data_dim() != mp.activation_dim() {
        return Err(Error::Config(format!(
            "generator produces {}-dim activations but the pruned model's boundary is {}",
            generator.data_dim(),
            mp.activation_dim()
        )));
    }
    dist.validate(mp.num_classes())?;
    if cfg.generated == 0 {
        return Err(Error::InvalidArgument("R must be at least 1".into()));
    }
    if cfg.strict_coverage && dist.support().len() > cfg.generated {
        return Err(Error::InvalidArgument(format!(
            "R = {} cannot cover {} observed classes",
            cfg.generated,
            dist.support().len()
        )));
    }
    let root = Rng::new(seed);
    let counts = match cfg.allocation {
        AllocationMode::LargestRemainder => allocate_counts(dist, cfg.generated),
        AllocationMode::Multinomial => {
            allocate_multinomial(dist, cfg.generated, &mut root.derive("allocate"))
        }
    };
    let pool = generator.generate(&counts, root.derive("generate").seed())?;
    let pre = top1_accuracy(mp, eval, eval_classes)?;
    let adapted = retrain_classifier(
        mp,
        &pool.features,
        pool.labels()?,
        &cfg.retrain,
        &mut root.derive("retrain"),
    )?;
    let post = top1_accuracy(&adapted, eval, eval_classes)?;
    Ok((
        adapted,
        AdaptationReport {
            method: Method::Generated,
            label_mode: cfg.label_mode,
            pre_accuracy: pre,
            post_accuracy: post,
            class_counts: counts,
            rows_used: pool.len(),
            epochs_run: cfg.retrain.epochs,
            ledger: None,
            wall_clock_ms: started.elapsed().as_millis(),
        },
    ))
}

/// Storage budget for the stored-sample baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Budget {
    Bytes(u64),
    Unbounded,
}

impl Budget {
    pub fn rows(&self, row_bytes: u64, available: usize) -> usize {
        match *self {
            Budget::Bytes(b) => ((b / row_bytes) as usize).min(available),
            Budget::Unbounded => available,
        }
    }
}

/// Bytes needed to keep one stored sample: its activation plus a u32 label.
pub fn stored_row_bytes(activation_dim: usize) -> u64 {
    activation_dim as u64 * F32_BYTES + 4
}

/// Retrains the classifier of `mp` on stored real activations whose labels
/// were already chosen by the caller (ground truth or deployed-model
/// predictions). A seeded subset of rows fitting `budget` is kept.
#[allow(clippy::too_many_arguments)]
pub fn retrain_baseline(
    mp: &MlpModel,
    stored: &ActivationBatch,
    label_mode: LabelMode,
    budget: Budget,
    hyper: &RetrainConfig,
    eval: &Dataset,
    eval_classes: &[usize],
    seed: u64,
) -> Result<(MlpModel, AdaptationReport)> {
    let started = Instant::now();
    let labels = stored.labels()?;
    stored.validate(mp.num_classes())?;
    let row_bytes = stored_row_bytes(stored.features.cols());
    let rows = budget.rows(row_bytes, stored.len());
    if rows == 0 {
        return Err(Error::InvalidArgument(format!(
            "budget {budget:?} holds no {row_bytes}-byte sample"
        )));
    }
    let root = Rng::new(seed);
    let mut keep = root.derive("keep").permutation(stored.len());
    keep.truncate(rows);
    keep.sort_unstable();
    let features = stored.features.select_rows(&keep);
    let kept_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let pre = top1_accuracy(mp, eval, eval_classes)?;
    let adapted = retrain_classifier(
        mp,
        &features,
        &kept_labels,
        hyper,
        &mut root.derive("retrain"),
    )?;
    let post = top1_accuracy(&adapted, eval, eval_classes)?;
    let mut counts = BTreeMap::new();
    for &l in &kept_labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    Ok((
        adapted,
        AdaptationReport {
            method: Method::StoredBaseline,
            label_mode,
            pre_accuracy: pre,
            post_accuracy: post,
            class_counts: counts,
            rows_used: rows,
            epochs_run: hyper.epochs,
            ledger: None,
            wall_clock_ms: started.elapsed().as_millis(),
        },
    ))
}

/// Where the uncertain labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    /// Argmax predictions of the deployed model.
    ModelPredictions,
    /// Each true label replaced, with this probability, by a uniformly chosen different class.
    SyntheticFlip(f32),
}

/// Replaces each label with probability `rate` by a different uniformly drawn class.
pub fn flip_labels(labels: &[usize], num_classes: usize, rate: f32, rng: &mut Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| {
            if num_classes > 1 && rng.uniform() < rate {
                let other = rng.below(num_classes - 1);
                if other >= l {
                    other + 1
                } else {
                    other
                }
            } else {
                l
            }
        })
        .collect()
}

/// Everything one target-domain scenario needs at deployment time.
pub struct Scenario<'a> {
    pub m0: &'a MlpModel,
    pub mp: &'a MlpModel,
    pub generator: &'a dyn ActivationGenerator,
    /// Observed target-domain inputs with their true labels.
    pub stream: &'a Dataset,
    /// Held-out target-domain evaluation data.
    pub eval: &'a Dataset,
    pub classes: &'a [usize],
    pub adaptation: &'a AdaptationConfig,
    pub baseline: &'a RetrainConfig,
    pub budget: Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub noise: NoiseSource,
    /// Fraction of stream labels that differ from the truth.
    pub label_error_rate: f32,
    pub no_retrain: f32,
    pub generated_certain: f32,
    pub generated_uncertain: f32,
    pub baseline_certain: f32,
    pub baseline_uncertain: f32,
    pub generated_degradation: f32,
    pub baseline_degradation: f32,
}

/// Runs both methods with certain and with noisy labels under one seed.
pub fn label_noise_experiment(
    sc: &Scenario<'_>,
    noise: NoiseSource,
    seed: u64,
) -> Result<NoiseReport> {
    let root = Rng::new(seed);
    let truth = &sc.stream.labels;
    let noisy = match noise {
        NoiseSource::ModelPredictions => sc.m0.predict(&sc.stream.inputs)?,
        NoiseSource::SyntheticFlip(rate) => {
            flip_labels(truth, sc.m0.num_classes(), rate, &mut root.derive("flip"))
        }
    };
    let errors = truth.iter().zip(&noisy).filter(|(a, b)| a != b).count();
    let stored = ActivationBatch {
        features: sc.mp.features(&sc.stream.inputs)?,
        labels: None,
        provenance: crate::models::Provenance::Real,
    };
    let adapt_seed = root.derive("adapt").seed();
    let base_seed = root.derive("baseline").seed();

    let run = |labels: &[usize], mode: LabelMode| -> Result<(f32, f32, f32)> {
        let dist = ClassDistribution::from_labels(labels)?;
        let mut cfg = sc.adaptation.clone();
        cfg.label_mode = mode;
        let (_, loco) = adapt_classifier(
            sc.mp,
            sc.generator,
            &dist,
            &cfg,
            sc.eval,
            sc.classes,
            adapt_seed,
        )?;
        let batch = ActivationBatch {
            labels: Some(labels.to_vec()),
            ..stored.clone()
        };
        let (_, base) = retrain_baseline(
            sc.mp,
            &batch,
            mode,
            sc.budget,
            sc.baseline,
            sc.eval,
            sc.classes,
            base_seed,
        )?;
        Ok((loco.pre_accuracy, loco.post_accuracy, base.post_accuracy))
    };
    let (no_retrain, gen_certain, base_certain) = run(truth, LabelMode::GroundTruth)?;
    let (_, gen_uncertain, base_uncertain) = run(&noisy, LabelMode::Estimated)?;
    Ok(NoiseReport {
        noise,
        label_error_rate: errors as f32 / truth.len().max(1) as f32,
        no_retrain,
        generated_certain: gen_certain,
        generated_uncertain: gen_uncertain,
        baseline_certain: base_certain,
        baseline_uncertain: base_uncertain,
        generated_degradation: gen_certain - gen_uncertain,
        baseline_degradation: base_certain - base_uncertain,
    })
}
