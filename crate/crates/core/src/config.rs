//! Pipeline configuration, read from TOML. Every section and key is optional;
//! omitted values take the defaults below. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationConfig, AllocationMode, Budget, LabelMode, RetrainConfig};
use crate::cvae::{BetaSchedule, VaeArch, VaeTrainConfig};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, DatasetSpec, TrainConfig};
use crate::numerics::{LrSchedule, OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Observed target-domain samples per scenario class.
    pub stream_per_class: usize,
    pub mean_scale: f32,
    pub within_sigma: f32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: 20,
            input_dim: 32,
            train_per_class: 600,
            val_per_class: 100,
            stream_per_class: 100,
            mean_scale: 4.0,
            within_sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    /// Feature-extractor widths; the last one is `|A_s|`.
    pub feature_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            feature_widths: vec![64, 32, 16],
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub fraction: f32,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f32,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            finetune_epochs: 5,
            finetune_batch_size: 64,
            finetune_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub beta_start: f32,
    pub beta_step: f32,
    pub beta_every: usize,
    pub beta_max: f32,
}

impl Default for VaeSection {
    fn default() -> Self {
        let beta = BetaSchedule::default();
        Self {
            latent_dim: 16,
            encoder_hidden: vec![1024, 128, 64],
            decoder_hidden: vec![512],
            epochs: 90,
            batch_size: 128,
            lr: 1e-3,
            lr_step_epochs: 30,
            lr_gamma: 0.1,
            beta_start: beta.start,
            beta_step: beta.step,
            beta_every: beta.every,
            beta_max: beta.max,
        }
    }
}

impl VaeSection {
    fn uncond_default() -> Self {
        Self {
            latent_dim: 2,
            encoder_hidden: vec![128, 64],
            decoder_hidden: vec![64],
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule: LrSchedule {
                step_epochs: self.lr_step_epochs,
                gamma: self.lr_gamma,
            },
            beta: BetaSchedule {
                start: self.beta_start,
                step: self.beta_step,
                every: self.beta_every,
                max: self.beta_max,
            },
        }
    }

    pub fn arch(&self, data_dim: usize, num_classes: usize) -> VaeArch {
        VaeArch {
            data_dim,
            num_classes,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        positive(&format!("{name}.latent_dim"), self.latent_dim)?;
        positive(&format!("{name}.epochs"), self.epochs)?;
        positive(&format!("{name}.batch_size"), self.batch_size)?;
        positive(&format!("{name}.lr_step_epochs"), self.lr_step_epochs)?;
        positive(&format!("{name}.beta_every"), self.beta_every)?;
        rate(&format!("{name}.lr"), self.lr)?;
        rate(&format!("{name}.lr_gamma"), self.lr_gamma)?;
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Config(format!(
                "{name}: hidden widths must be positive"
            )));
        }
        if !(self.beta_start >= 0.0 && self.beta_step >= 0.0 && self.beta_max >= self.beta_start) {
            return Err(Error::Config(format!(
                "{name}: beta schedule needs 0 <= beta_start <= beta_max and beta_step >= 0"
            )));
        }
        Ok(())
    }
}

/// Same keys as `[cvae]`, with per-class defaults for any key left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct UncondSection(pub VaeSection);

impl<'de> Deserialize<'de> for UncondSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let given = toml::Table::deserialize(d)?;
        let mut merged =
            toml::Table::try_from(VaeSection::uncond_default()).map_err(D::Error::custom)?;
        for (k, v) in given {
            if !merged.contains_key(&k) {
                return Err(D::Error::unknown_field(&k, &[]));
            }
            merged.insert(k, v);
        }
        toml::Value::Table(merged)
            .try_into()
            .map(UncondSection)
            .map_err(D::Error::custom)
    }
}

impl Default for UncondSection {
    fn default() -> Self {
        Self(VaeSection::uncond_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    /// Total generated activations `R`.
    pub generated: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub momentum: f32,
    pub label_mode: LabelMode,
    pub allocation: AllocationMode,
    pub strict_coverage: bool,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        Self {
            generated: 3000,
            epochs: 50,
            batch_size: 32,
            lr: 1e-6,
            lr_step_epochs: 15,
            lr_gamma: 0.1,
            momentum: 0.9,
            label_mode: LabelMode::Estimated,
            allocation: AllocationMode::LargestRemainder,
            strict_coverage: false,
        }
    }
}

impl AdaptationSection {
    pub fn retrain(&self) -> RetrainConfig {
        RetrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_step_epochs: self.lr_step_epochs,
            lr_gamma: self.lr_gamma,
            momentum: self.momentum,
        }
    }

    pub fn config(&self) -> AdaptationConfig {
        AdaptationConfig {
            generated: self.generated,
            retrain: self.retrain(),
            label_mode: self.label_mode,
            allocation: self.allocation,
            strict_coverage: self.strict_coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub momentum: f32,
    /// Stored-sample budget in bytes; absent means unbounded.
    pub budget_bytes: Option<u64>,
    /// Budgets of the sweep in bytes, ascending.
    pub sweep_budgets: Vec<u64>,
    /// Append an unbounded point to the sweep.
    pub sweep_unbounded: bool,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            lr_step_epochs: 3,
            lr_gamma: 0.1,
            momentum: 0.9,
            budget_bytes: Some(6800),
            sweep_budgets: vec![680, 1360, 3400, 6800, 13600, 20400],
            sweep_unbounded: true,
        }
    }
}

impl BaselineSection {
    pub fn retrain(&self) -> RetrainConfig {
        RetrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_step_epochs: self.lr_step_epochs,
            lr_gamma: self.lr_gamma,
            momentum: self.momentum,
        }
    }

    pub fn budget(&self) -> Budget {
        to_budget(self.budget_bytes)
    }

    pub fn sweep(&self) -> Vec<Budget> {
        let mut v: Vec<Budget> = self
            .sweep_budgets
            .iter()
            .map(|&b| Budget::Bytes(b))
            .collect();
        if self.sweep_unbounded {
            v.push(Budget::Unbounded);
        }
        v
    }
}

pub fn to_budget(bytes: Option<u64>) -> Budget {
    bytes.map_or(Budget::Unbounded, Budget::Bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Seed used when none is given on the command line.
    pub seed: u64,
    /// Retraining seeds per stochastic cell.
    pub seeds: usize,
    /// Label flip rate of the synthetic noise experiment.
    pub noise_rate: f32,
    pub output_dir: Option<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 5,
            noise_rate: 0.2,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    pub source: SourceSection,
    pub prune: PruneSection,
    pub cvae: VaeSection,
    pub uncond: UncondSection,
    pub adaptation: AdaptationSection,
    pub baseline: BaselineSection,
    pub experiment: ExperimentSection,
    pub scenario: Vec<ScenarioSection>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            source: SourceSection::default(),
            prune: PruneSection::default(),
            cvae: VaeSection::default(),
            uncond: UncondSection::default(),
            adaptation: AdaptationSection::default(),
            baseline: BaselineSection::default(),
            experiment: ExperimentSection::default(),
            scenario: vec![
                ScenarioSection {
                    name: "city".into(),
                    classes: vec![0, 3, 7, 12, 18],
                },
                ScenarioSection {
                    name: "offroad".into(),
                    classes: vec![2, 5, 9, 14, 16],
                },
            ],
        }
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{key} must be positive")));
    }
    Ok(())
}

fn rate(key: &str, v: f32) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Config(format!(
            "{key} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_classes < 2 || d.input_dim < 2 {
            return Err(Error::Config(
                "dataset needs num_classes >= 2 and input_dim >= 2".into(),
            ));
        }
        positive("dataset.train_per_class", d.train_per_class)?;
        positive("dataset.val_per_class", d.val_per_class)?;
        positive("dataset.stream_per_class", d.stream_per_class)?;
        if !(d.within_sigma.is_finite() && d.within_sigma > 0.0) {
            return Err(Error::Config(
                "dataset.within_sigma must be positive".into(),
            ));
        }
        rate("dataset.mean_scale", d.mean_scale)?;

        let s = &self.source;
        if s.feature_widths.is_empty() || s.feature_widths.contains(&0) {
            return Err(Error::Config(
                "source.feature_widths must be nonempty and positive".into(),
            ));
        }
        positive("source.epochs", s.epochs)?;
        positive("source.batch_size", s.batch_size)?;
        rate("source.lr", s.lr)?;

        let p = &self.prune;
        if !(0.0..1.0).contains(&p.fraction) {
            return Err(Error::Config(format!(
                "prune.fraction {} outside [0, 1)",
                p.fraction
            )));
        }
        for (i, &w) in s.feature_widths[..s.feature_widths.len() - 1]
            .iter()
            .enumerate()
        {
            let keep = crate::models::retained_width(w, p.fraction);
            if keep < 2 {
                return Err(Error::Config(format!(
                    "prune.fraction {} leaves {keep} units in feature layer {i}",
                    p.fraction
                )));
            }
        }
        positive("prune.finetune_batch_size", p.finetune_batch_size)?;
        rate("prune.finetune_lr", p.finetune_lr)?;

        self.cvae.validate("cvae")?;
        self.uncond.0.validate("uncond")?;

        let a = &self.adaptation;
        positive("adaptation.generated", a.generated)?;
        positive("adaptation.batch_size", a.batch_size)?;
        positive("adaptation.lr_step_epochs", a.lr_step_epochs)?;
        rate("adaptation.lr", a.lr)?;
        rate("adaptation.lr_gamma", a.lr_gamma)?;
        if !(0.0..1.0).contains(&a.momentum) {
            return Err(Error::Config(
                "adaptation.momentum must lie in [0, 1)".into(),
            ));
        }

        let b = &self.baseline;
        positive("baseline.batch_size", b.batch_size)?;
        positive("baseline.lr_step_epochs", b.lr_step_epochs)?;
        rate("baseline.lr", b.lr)?;
        rate("baseline.lr_gamma", b.lr_gamma)?;
        if !(0.0..1.0).contains(&b.momentum) {
            return Err(Error::Config("baseline.momentum must lie in [0, 1)".into()));
        }
        let sweep = b.sweep();
        if sweep.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(
                "baseline.sweep_budgets must be ascending".into(),
            ));
        }

        let e = &self.experiment;
        positive("experiment.seeds", e.seeds)?;
        if !(0.0..=1.0).contains(&e.noise_rate) {
            return Err(Error::Config(
                "experiment.noise_rate must lie in [0, 1]".into(),
            ));
        }

        if self.scenario.is_empty() {
            return Err(Error::Config(
                "at least one [[scenario]] is required".into(),
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for sc in &self.scenario {
            if sc.name.is_empty()
                || !sc
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::Config(format!(
                    "scenario name {:?} must be nonempty ASCII letters, digits, '-' or '_'",
                    sc.name
                )));
            }
            if !names.insert(&sc.name) {
                return Err(Error::Config(format!("duplicate scenario {:?}", sc.name)));
            }
            if sc.classes.is_empty() {
                return Err(Error::Config(format!(
                    "scenario {:?} has no classes",
                    sc.name
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &c in &sc.classes {
                if c >= d.num_classes {
                    return Err(Error::Config(format!(
                        "scenario {:?} lists class {c} but dataset.num_classes = {}",
                        sc.name, d.num_classes
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "scenario {:?} repeats class {c}",
                        sc.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn activation_dim(&self) -> usize {
        *self.source.feature_widths.last().expect("validated")
    }

    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            num_classes: d.num_classes,
            input_dim: d.input_dim,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            mean_scale: d.mean_scale,
            within_sigma: d.within_sigma,
            seed,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            feature_widths: self.source.feature_widths.clone(),
        }
    }

    pub fn source_train(&self) -> TrainConfig {
        adam(self.source.epochs, self.source.batch_size, self.source.lr)
    }

    pub fn finetune(&self) -> TrainConfig {
        adam(
            self.prune.finetune_epochs,
            self.prune.finetune_batch_size,
            self.prune.finetune_lr,
        )
    }

    pub fn scenario(&self, name: &str) -> Result<&ScenarioSection> {
        self.scenario
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no scenario named {name:?}")))
    }
}

fn adam(epochs: usize, batch_size: usize, lr: f32) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::ADAM,
            lr,
            schedule: LrSchedule::CONSTANT,
        },
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
