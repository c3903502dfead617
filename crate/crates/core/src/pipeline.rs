//! Stage functions and the on-disk command layer on top of them.
//!
//! Every stage draws its randomness from `Rng::new(seed).derive(stage)`, so
//! running the stages one command at a time produces the same bytes as
//! [`Run::run_all`] or an in-memory [`Fixture`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    adapt_classifier, allocate_counts, estimate_domain, label_noise_experiment, retrain_baseline,
    retrain_classifier, AdaptationReport, Budget, ClassDistribution, LabelMode, NoiseReport,
    NoiseSource, Scenario,
};
use crate::config::{hex, PipelineConfig};
use crate::cvae::{
    train_cvae, train_uncond_pack, ActivationGenerator, CvaeModel, UncondVaePack, Vae, VaeEpochLog,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    budget_sweep, build_ledger, cond_vs_uncond, seed_list, top1_accuracy, CondUncondReport,
    MemoryLedger, MethodFootprint, SweepReport,
};
use crate::io;
use crate::models::{
    extract_activations, fit_model, init_model, model_memory_bytes, prune_model, synth_dataset,
    ActivationBatch, Dataset, EpochLog, MlpModel, Provenance, SyntheticData,
};
use crate::numerics::{Matrix, Rng};

pub fn stage_rng(seed: u64, stage: &str) -> Rng {
    Rng::new(seed).derive(stage)
}

/// One target domain: the observed stream and held-out evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub name: String,
    pub classes: Vec<usize>,
    /// Observed inputs with their true labels.
    pub stream: Dataset,
    /// Source validation data restricted to `classes`.
    pub eval: Dataset,
}

pub fn make_data(cfg: &PipelineConfig, seed: u64) -> Result<SyntheticData> {
    synth_dataset(&cfg.dataset_spec(stage_rng(seed, "dataset").seed()))
}

pub fn make_scenarios(
    cfg: &PipelineConfig,
    seed: u64,
    data: &SyntheticData,
) -> Result<Vec<ScenarioData>> {
    let root = stage_rng(seed, "stream");
    cfg.scenario
        .iter()
        .map(|sc| {
            let stream = data.sample(
                &sc.classes,
                cfg.dataset.stream_per_class,
                &mut root.derive(&sc.name),
            )?;
            Ok(ScenarioData {
                name: sc.name.clone(),
                classes: sc.classes.clone(),
                stream,
                eval: data.val.restrict(&sc.classes),
            })
        })
        .collect()
}

pub fn make_source(
    cfg: &PipelineConfig,
    seed: u64,
    train: &Dataset,
    val: &Dataset,
) -> Result<(MlpModel, Vec<EpochLog>)> {
    let mut rng = stage_rng(seed, "train-source");
    let mut m0 = init_model(
        train.inputs.cols(),
        cfg.dataset.num_classes,
        &cfg.arch(),
        &mut rng,
    )?;
    let log = fit_model(&mut m0, train, val, &cfg.source_train(), &mut rng)?;
    Ok((m0, log))
}

pub fn make_pruned(
    cfg: &PipelineConfig,
    seed: u64,
    m0: &MlpModel,
    train: &Dataset,
) -> Result<MlpModel> {
    prune_model(
        m0,
        cfg.prune.fraction,
        train,
        &cfg.finetune(),
        &mut stage_rng(seed, "prune"),
    )
}

pub fn make_activations(mp: &MlpModel, train: &Dataset) -> Result<ActivationBatch> {
    extract_activations(mp, &train.inputs, Some(&train.labels))
}

pub fn make_cvae(
    cfg: &PipelineConfig,
    seed: u64,
    acts: &ActivationBatch,
) -> Result<(CvaeModel, Vec<VaeEpochLog>)> {
    let mut rng = stage_rng(seed, "train-cvae");
    let arch = cfg.cvae.arch(acts.features.cols(), cfg.dataset.num_classes);
    let model = Vae::new(arch, &mut rng)?;
    train_cvae(model, acts, &cfg.cvae.train_config(), &mut rng)
}

pub fn make_uncond(
    cfg: &PipelineConfig,
    seed: u64,
    acts: &ActivationBatch,
) -> Result<(UncondVaePack, Vec<Vec<VaeEpochLog>>)> {
    let u = &cfg.uncond.0;
    train_uncond_pack(
        &u.arch(acts.features.cols(), 0),
        cfg.dataset.num_classes,
        acts,
        &u.train_config(),
        &mut stage_rng(seed, "train-uncond"),
    )
}

/// The trained artifacts of one seed, held in memory.
pub struct Fixture {
    pub config: PipelineConfig,
    pub seed: u64,
    pub data: SyntheticData,
    pub scenarios: Vec<ScenarioData>,
    pub m0: MlpModel,
    pub source_log: Vec<EpochLog>,
    pub mp: MlpModel,
    pub activations: ActivationBatch,
    pub cvae: CvaeModel,
    pub cvae_log: Vec<VaeEpochLog>,
}

impl Fixture {
    /// Data, source model, pruned model and CVAE. The per-class pack is
    /// trained separately by [`Fixture::uncond`].
    pub fn build(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let data = make_data(config, seed)?;
        let scenarios = make_scenarios(config, seed, &data)?;
        let (m0, source_log) = make_source(config, seed, &data.train, &data.val)?;
        let mp = make_pruned(config, seed, &m0, &data.train)?;
        let activations = make_activations(&mp, &data.train)?;
        let (cvae, cvae_log) = make_cvae(config, seed, &activations)?;
        Ok(Self {
            config: config.clone(),
            seed,
            data,
            scenarios,
            m0,
            source_log,
            mp,
            activations,
            cvae,
            cvae_log,
        })
    }

    pub fn uncond(&self) -> Result<UncondVaePack> {
        Ok(make_uncond(&self.config, self.seed, &self.activations)?.0)
    }

    pub fn scenario(&self, name: &str) -> Result<&ScenarioData> {
        self.scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no scenario named {name:?}")))
    }
}

/// Labels attached to the observed stream under `mode`.
pub fn stream_labels(m0: &MlpModel, sc: &ScenarioData, mode: LabelMode) -> Result<Vec<usize>> {
    match mode {
        LabelMode::GroundTruth => Ok(sc.stream.labels.clone()),
        LabelMode::Estimated => m0.predict(&sc.stream.inputs),
    }
}

pub fn scenario_distribution(
    m0: &MlpModel,
    sc: &ScenarioData,
    mode: LabelMode,
) -> Result<ClassDistribution> {
    match mode {
        LabelMode::GroundTruth => ClassDistribution::from_labels(&sc.stream.labels),
        LabelMode::Estimated => estimate_domain(m0, &sc.stream.inputs),
    }
}

/// Jaccard index of two class sets.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: std::collections::BTreeSet<_> = a.iter().collect();
    let b: std::collections::BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub source: String,
    pub observed: usize,
    pub probs: BTreeMap<usize, f64>,
    pub support: Vec<usize>,
    /// Against the true labels of the stream, when they are known.
    pub support_jaccard: Option<f64>,
}

pub fn domain_report(
    m0: &MlpModel,
    source: &str,
    stream: &Dataset,
    labelled: bool,
) -> Result<DomainReport> {
    let dist = estimate_domain(m0, &stream.inputs)?;
    let support = dist.support();
    let support_jaccard = labelled.then(|| {
        let mut truth = stream.labels.clone();
        truth.sort_unstable();
        truth.dedup();
        jaccard(&support, &truth)
    });
    Ok(DomainReport {
        source: source.to_string(),
        observed: stream.inputs.rows(),
        probs: dist.probs().clone(),
        support,
        support_jaccard,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAdaptation {
    pub scenario: String,
    pub classes: Vec<usize>,
    pub distribution: BTreeMap<usize, f64>,
    pub report: AdaptationReport,
    /// Same retraining on real stream activations with true labels, drawn
    /// per class in the counts the true distribution allocates to `R` rows.
    pub real_oracle_accuracy: f32,
}

/// Generated-activation adaptation of one scenario, plus the oracle that
/// retrains on the stream's real activations instead.
pub fn adapt_scenario(
    cfg: &PipelineConfig,
    seed: u64,
    m0: &MlpModel,
    mp: &MlpModel,
    generator: &dyn ActivationGenerator,
    sc: &ScenarioData,
    mode: LabelMode,
) -> Result<(MlpModel, ScenarioAdaptation)> {
    let root = stage_rng(seed, "adapt").derive(&sc.name);
    let dist = scenario_distribution(m0, sc, mode)?;
    let mut acfg = cfg.adaptation.config();
    acfg.label_mode = mode;
    let (adapted, report) = adapt_classifier(
        mp,
        generator,
        &dist,
        &acfg,
        &sc.eval,
        &sc.classes,
        root.derive("generated").seed(),
    )?;
    let (real, labels) = oracle_batch(mp, sc, acfg.generated, &mut root.derive("oracle-rows"))?;
    let oracle = retrain_classifier(
        mp,
        &real,
        &labels,
        &acfg.retrain,
        &mut root.derive("oracle"),
    )?;
    Ok((
        adapted,
        ScenarioAdaptation {
            scenario: sc.name.clone(),
            classes: sc.classes.clone(),
            distribution: dist.probs().clone(),
            report,
            real_oracle_accuracy: top1_accuracy(&oracle, &sc.eval, &sc.classes)?,
        },
    ))
}

/// Real stream activations resampled with replacement so each class gets the
/// share of `total` its true frequency allocates.
fn oracle_batch(
    mp: &MlpModel,
    sc: &ScenarioData,
    total: usize,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let truth = ClassDistribution::from_labels(&sc.stream.labels)?;
    let features = mp.features(&sc.stream.inputs)?;
    let mut rows = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (c, k) in allocate_counts(&truth, total) {
        let pool: Vec<usize> = (0..sc.stream.len())
            .filter(|&i| sc.stream.labels[i] == c)
            .collect();
        for _ in 0..k {
            rows.push(pool[rng.below(pool.len())]);
            labels.push(c);
        }
    }
    Ok((features.select_rows(&rows), labels))
}

/// Stored real activations of the stream, labelled per `mode`.
pub fn stored_batch(
    m0: &MlpModel,
    mp: &MlpModel,
    sc: &ScenarioData,
    mode: LabelMode,
) -> Result<ActivationBatch> {
    Ok(ActivationBatch {
        features: mp.features(&sc.stream.inputs)?,
        labels: Some(stream_labels(m0, sc, mode)?),
        provenance: Provenance::Real,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBaseline {
    pub scenario: String,
    pub budget: Budget,
    pub report: AdaptationReport,
}

pub fn baseline_scenario(
    cfg: &PipelineConfig,
    seed: u64,
    m0: &MlpModel,
    mp: &MlpModel,
    sc: &ScenarioData,
    mode: LabelMode,
    budget: Budget,
) -> Result<(MlpModel, ScenarioBaseline)> {
    let stored = stored_batch(m0, mp, sc, mode)?;
    let (model, report) = retrain_baseline(
        mp,
        &stored,
        mode,
        budget,
        &cfg.baseline.retrain(),
        &sc.eval,
        &sc.classes,
        stage_rng(seed, "baseline").derive(&sc.name).seed(),
    )?;
    Ok((
        model,
        ScenarioBaseline {
            scenario: sc.name.clone(),
            budget,
            report,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub scenario: String,
    pub noise: NoiseSource,
    pub runs: Vec<NoiseReport>,
    pub mean_generated_degradation: f32,
    pub mean_baseline_degradation: f32,
}

fn mean(xs: impl Iterator<Item = f32>) -> f32 {
    let mut v: Vec<f32> = xs.collect();
    v.sort_by(f32::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

/// Certain versus uncertain labels for both methods over `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn noise_scenario(
    cfg: &PipelineConfig,
    m0: &MlpModel,
    mp: &MlpModel,
    generator: &dyn ActivationGenerator,
    sc: &ScenarioData,
    noise: NoiseSource,
    seeds: &[u64],
) -> Result<NoiseSummary> {
    let adaptation = cfg.adaptation.config();
    let baseline = cfg.baseline.retrain();
    let scenario = Scenario {
        m0,
        mp,
        generator,
        stream: &sc.stream,
        eval: &sc.eval,
        classes: &sc.classes,
        adaptation: &adaptation,
        baseline: &baseline,
        budget: cfg.baseline.budget(),
    };
    let runs = seeds
        .iter()
        .map(|&s| label_noise_experiment(&scenario, noise, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseSummary {
        scenario: sc.name.clone(),
        noise,
        mean_generated_degradation: mean(runs.iter().map(|r| r.generated_degradation)),
        mean_baseline_degradation: mean(runs.iter().map(|r| r.baseline_degradation)),
        runs,
    })
}

pub fn sweep_scenario(
    cfg: &PipelineConfig,
    seed: u64,
    m0: &MlpModel,
    mp: &MlpModel,
    generator: &dyn ActivationGenerator,
    sc: &ScenarioData,
    mode: LabelMode,
) -> Result<SweepReport> {
    let dist = scenario_distribution(m0, sc, mode)?;
    let stored = stored_batch(m0, mp, sc, mode)?;
    let mut acfg = cfg.adaptation.config();
    acfg.label_mode = mode;
    let seeds = seed_list(
        stage_rng(seed, "sweep-budget").derive(&sc.name).seed(),
        cfg.experiment.seeds,
    );
    budget_sweep(
        mp,
        generator,
        &stored,
        &dist,
        &acfg,
        &cfg.baseline.retrain(),
        &sc.eval,
        &sc.classes,
        &cfg.baseline.sweep(),
        &seeds,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCompare {
    pub scenario: String,
    pub report: CondUncondReport,
}

pub fn compare_scenario(
    cfg: &PipelineConfig,
    seed: u64,
    mp: &MlpModel,
    cvae: &CvaeModel,
    pack: &UncondVaePack,
    sc: &ScenarioData,
) -> Result<ScenarioCompare> {
    let dist = ClassDistribution::from_labels(&sc.stream.labels)?;
    let mut acfg = cfg.adaptation.config();
    acfg.label_mode = LabelMode::GroundTruth;
    let seeds = seed_list(
        stage_rng(seed, "compare-uncond").derive(&sc.name).seed(),
        cfg.experiment.seeds,
    );
    Ok(ScenarioCompare {
        scenario: sc.name.clone(),
        report: cond_vs_uncond(mp, cvae, pack, &dist, &acfg, &sc.eval, &sc.classes, &seeds)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub generated: MemoryLedger,
    pub baseline: MemoryLedger,
    pub baseline_budget: Budget,
    pub baseline_rows: usize,
    /// Baseline total over generated-activation total.
    pub total_ratio: f64,
    pub deployed_bytes: u64,
    pub pruned_bytes: u64,
    pub pruned_feature_bytes: u64,
    pub cvae_bytes: u64,
    pub cvae_to_feature_extractor: f64,
    pub uncond_bytes: Option<u64>,
    pub uncond_member_bytes: Option<u64>,
    pub uncond_to_cvae: Option<f64>,
}

pub fn memory_report(
    cfg: &PipelineConfig,
    m0: &MlpModel,
    mp: &MlpModel,
    cvae: &CvaeModel,
    pack: Option<&UncondVaePack>,
    stored_available: usize,
) -> MemoryReport {
    let budget = cfg.baseline.budget();
    let rows = budget.rows(
        crate::adaptation::stored_row_bytes(mp.activation_dim()),
        stored_available,
    );
    let generated = build_ledger(&MethodFootprint::Generated {
        m0,
        mp,
        generator: cvae,
        generated_rows: cfg.adaptation.generated,
        batch_size: cfg.adaptation.batch_size,
    });
    let baseline = build_ledger(&MethodFootprint::StoredBaseline {
        m0,
        mp,
        stored_rows: rows,
        batch_size: cfg.baseline.batch_size,
    });
    let fe_bytes = mp.feature_param_count() as u64 * crate::numerics::F32_BYTES;
    let cvae_bytes = cvae.memory_bytes();
    MemoryReport {
        total_ratio: baseline.total() as f64 / generated.total() as f64,
        generated,
        baseline,
        baseline_budget: budget,
        baseline_rows: rows,
        deployed_bytes: model_memory_bytes(m0),
        pruned_bytes: model_memory_bytes(mp),
        pruned_feature_bytes: fe_bytes,
        cvae_bytes,
        cvae_to_feature_extractor: cvae_bytes as f64 / fe_bytes as f64,
        uncond_bytes: pack.map(|p| p.memory_bytes()),
        uncond_member_bytes: pack.map(UncondVaePack::member_bytes),
        uncond_to_cvae: pack.map(|p| p.memory_bytes() as f64 / cvae_bytes as f64),
    }
}

/// What a command wrote, with SHA-256 checksums keyed by path relative to
/// the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model: String,
    pub scenario: String,
    pub accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub verified_artifacts: usize,
    pub accuracies: Vec<ModelAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SourceReport {
    val_accuracy: f32,
    log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PruneReport {
    fraction: f32,
    deployed_params: usize,
    pruned_params: usize,
    deployed_val_accuracy: f32,
    pruned_val_accuracy: f32,
}

pub const TRAIN: &str = "data/train.lpac";
pub const VAL: &str = "data/val.lpac";
pub const M0: &str = "models/m0.lpmd";
pub const MP: &str = "models/mp.lpmd";
pub const ACTIVATIONS: &str = "activations/source.lpac";
pub const CVAE: &str = "models/cvae.lpmd";
pub const UNCOND: &str = "models/uncond.lpmd";

fn mode_name(mode: LabelMode) -> &'static str {
    match mode {
        LabelMode::GroundTruth => "ground-truth",
        LabelMode::Estimated => "estimated",
    }
}

pub fn stream_path(name: &str) -> String {
    format!("data/stream-{name}.lpac")
}

/// A configured output directory. Each command method writes its artifacts
/// and `manifests/<command>.json`.
pub struct Run {
    pub config: PipelineConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: PipelineConfig, seed: u64, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seed,
            out: out.into(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn finish(&self, command: &str, artifacts: &[String]) -> Result<Manifest> {
        let mut sums = BTreeMap::new();
        for rel in artifacts {
            sums.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: self.config.hash(),
            seed: self.seed,
            artifacts: sums,
        };
        io::save_json(&self.path(&format!("manifests/{command}.json")), &manifest)?;
        Ok(manifest)
    }

    fn train(&self) -> Result<Dataset> {
        io::load_dataset(&self.path(TRAIN), "synth-data")
    }

    fn val(&self) -> Result<Dataset> {
        io::load_dataset(&self.path(VAL), "synth-data")
    }

    fn m0(&self) -> Result<MlpModel> {
        io::load_model(&self.path(M0), "train-source")
    }

    fn mp(&self) -> Result<MlpModel> {
        io::load_model(&self.path(MP), "prune")
    }

    fn cvae(&self) -> Result<CvaeModel> {
        io::load_vae(&self.path(CVAE), "train-cvae")
    }

    fn pack(&self) -> Result<UncondVaePack> {
        io::load_pack(&self.path(UNCOND), "train-uncond")
    }

    fn scenarios(&self) -> Result<Vec<ScenarioData>> {
        let val = self.val()?;
        self.config
            .scenario
            .iter()
            .map(|sc| {
                Ok(ScenarioData {
                    name: sc.name.clone(),
                    classes: sc.classes.clone(),
                    stream: io::load_dataset(&self.path(&stream_path(&sc.name)), "synth-data")?,
                    eval: val.restrict(&sc.classes),
                })
            })
            .collect()
    }

    fn save_json<T: Serialize>(
        &self,
        rel: &str,
        value: &T,
        written: &mut Vec<String>,
    ) -> Result<()> {
        io::save_json(&self.path(rel), value)?;
        written.push(rel.to_string());
        Ok(())
    }

    fn save_model(&self, rel: &str, model: &MlpModel, written: &mut Vec<String>) -> Result<()> {
        io::save_model(&self.path(rel), model)?;
        written.push(rel.to_string());
        Ok(())
    }

    pub fn synth_data(&self) -> Result<Manifest> {
        let data = make_data(&self.config, self.seed)?;
        let scenarios = make_scenarios(&self.config, self.seed, &data)?;
        let mut written = vec![TRAIN.to_string(), VAL.to_string()];
        io::save_dataset(&self.path(TRAIN), &data.train)?;
        io::save_dataset(&self.path(VAL), &data.val)?;
        for sc in &scenarios {
            let rel = stream_path(&sc.name);
            io::save_dataset(&self.path(&rel), &sc.stream)?;
            written.push(rel);
        }
        self.finish("synth-data", &written)
    }

    pub fn train_source(&self) -> Result<Manifest> {
        let (m0, log) = make_source(&self.config, self.seed, &self.train()?, &self.val()?)?;
        let mut written = Vec::new();
        self.save_model(M0, &m0, &mut written)?;
        let report = SourceReport {
            val_accuracy: log.last().and_then(|l| l.val_accuracy).unwrap_or(0.0),
            log,
        };
        self.save_json("reports/train-source.json", &report, &mut written)?;
        self.finish("train-source", &written)
    }

    pub fn prune(&self) -> Result<Manifest> {
        let m0 = self.m0()?;
        let train = self.train()?;
        let val = self.val()?;
        let mp = make_pruned(&self.config, self.seed, &m0, &train)?;
        let all: Vec<usize> = (0..m0.num_classes()).collect();
        let report = PruneReport {
            fraction: self.config.prune.fraction,
            deployed_params: m0.param_count(),
            pruned_params: mp.param_count(),
            deployed_val_accuracy: top1_accuracy(&m0, &val, &all)?,
            pruned_val_accuracy: top1_accuracy(&mp, &val, &all)?,
        };
        let mut written = Vec::new();
        self.save_model(MP, &mp, &mut written)?;
        self.save_json("reports/prune.json", &report, &mut written)?;
        self.finish("prune", &written)
    }

    pub fn dump_activations(&self) -> Result<Manifest> {
        let acts = make_activations(&self.mp()?, &self.train()?)?;
        io::save_activations(&self.path(ACTIVATIONS), &acts)?;
        self.finish("dump-activations", &[ACTIVATIONS.to_string()])
    }

    fn activations(&self) -> Result<ActivationBatch> {
        io::load_activations(&self.path(ACTIVATIONS), "dump-activations")
    }

    pub fn train_cvae(&self) -> Result<Manifest> {
        let acts = self.activations()?;
        let (cvae, log) = match make_cvae(&self.config, self.seed, &acts) {
            Ok(v) => v,
            Err(Error::Diverged {
                context,
                last_good: Some(model),
            }) => {
                let rel = "models/cvae.last-good.lpmd";
                io::save_vae(&self.path(rel), &model)?;
                return Err(Error::Diverged {
                    context: format!("{context}; last good checkpoint written to {rel}"),
                    last_good: Some(model),
                });
            }
            Err(e) => return Err(e),
        };
        io::save_vae(&self.path(CVAE), &cvae)?;
        let mut written = vec![CVAE.to_string()];
        self.save_json("reports/train-cvae.json", &log, &mut written)?;
        self.finish("train-cvae", &written)
    }

    pub fn train_uncond(&self) -> Result<Manifest> {
        let acts = self.activations()?;
        let (pack, logs) = make_uncond(&self.config, self.seed, &acts)?;
        io::save_pack(&self.path(UNCOND), &pack)?;
        let mut written = vec![UNCOND.to_string()];
        self.save_json("reports/train-uncond.json", &logs, &mut written)?;
        self.finish("train-uncond", &written)
    }

    /// Estimates the label distribution of `stream`, or of every scenario
    /// stream when `None`.
    pub fn estimate_domain(&self, stream: Option<&Path>) -> Result<Manifest> {
        let m0 = self.m0()?;
        let mut written = Vec::new();
        match stream {
            Some(path) => {
                let batch = io::load_activations(path, "synth-data")?;
                let labelled = batch.labels.is_some();
                let data = Dataset {
                    labels: batch.labels.unwrap_or_default(),
                    inputs: batch.features,
                };
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("stream");
                let report = domain_report(&m0, &path.display().to_string(), &data, labelled)?;
                self.save_json(&format!("domain/{stem}.json"), &report, &mut written)?;
            }
            None => {
                for sc in self.scenarios()? {
                    let report = domain_report(&m0, &stream_path(&sc.name), &sc.stream, true)?;
                    self.save_json(&format!("domain/{}.json", sc.name), &report, &mut written)?;
                }
            }
        }
        self.finish("estimate-domain", &written)
    }

    pub fn adapt(&self, mode: LabelMode) -> Result<Manifest> {
        let (m0, mp, cvae) = (self.m0()?, self.mp()?, self.cvae()?);
        let mut written = Vec::new();
        let mut reports = Vec::new();
        for sc in self.scenarios()? {
            let (model, report) =
                adapt_scenario(&self.config, self.seed, &m0, &mp, &cvae, &sc, mode)?;
            self.save_model(
                &format!("models/adapted-{}-{}.lpmd", sc.name, mode_name(mode)),
                &model,
                &mut written,
            )?;
            reports.push(report);
        }
        self.save_json(
            &format!("reports/adapt-{}.json", mode_name(mode)),
            &reports,
            &mut written,
        )?;
        self.finish(&format!("adapt-{}", mode_name(mode)), &written)
    }

    pub fn baseline(&self, mode: LabelMode, budget: Budget) -> Result<Manifest> {
        let (m0, mp) = (self.m0()?, self.mp()?);
        let mut written = Vec::new();
        let mut reports = Vec::new();
        for sc in self.scenarios()? {
            let (model, report) =
                baseline_scenario(&self.config, self.seed, &m0, &mp, &sc, mode, budget)?;
            self.save_model(
                &format!("models/baseline-{}-{}.lpmd", sc.name, mode_name(mode)),
                &model,
                &mut written,
            )?;
            reports.push(report);
        }
        self.save_json(
            &format!("reports/baseline-{}.json", mode_name(mode)),
            &reports,
            &mut written,
        )?;
        self.finish(&format!("baseline-{}", mode_name(mode)), &written)
    }

    pub fn sweep_budget(&self, mode: LabelMode) -> Result<Manifest> {
        let (m0, mp, cvae) = (self.m0()?, self.mp()?, self.cvae()?);
        let mut written = Vec::new();
        for sc in self.scenarios()? {
            let report = sweep_scenario(&self.config, self.seed, &m0, &mp, &cvae, &sc, mode)?;
            let csv = format!("tables/sweep-{}.csv", sc.name);
            io::write_bytes(&self.path(&csv), report.to_csv()?.as_bytes())?;
            written.push(csv);
            self.save_json(
                &format!("reports/sweep-{}.json", sc.name),
                &report,
                &mut written,
            )?;
        }
        self.finish("sweep-budget", &written)
    }

    pub fn compare_uncond(&self) -> Result<Manifest> {
        let (mp, cvae, pack) = (self.mp()?, self.cvae()?, self.pack()?);
        let reports = self
            .scenarios()?
            .iter()
            .map(|sc| compare_scenario(&self.config, self.seed, &mp, &cvae, &pack, sc))
            .collect::<Result<Vec<_>>>()?;
        let mut written = Vec::new();
        self.save_json("reports/compare-uncond.json", &reports, &mut written)?;
        self.finish("compare-uncond", &written)
    }

    pub fn memory_report(&self) -> Result<Manifest> {
        let (m0, mp, cvae) = (self.m0()?, self.mp()?, self.cvae()?);
        let pack = match self.pack() {
            Ok(p) => Some(p),
            Err(Error::MissingInput { .. }) => None,
            Err(e) => return Err(e),
        };
        let available = self.config.dataset.stream_per_class
            * self
                .config
                .scenario
                .iter()
                .map(|s| s.classes.len())
                .max()
                .unwrap_or(0);
        let report = memory_report(&self.config, &m0, &mp, &cvae, pack.as_ref(), available);
        let mut written = Vec::new();
        self.save_json("reports/memory.json", &report, &mut written)?;
        self.finish("memory-report", &written)
    }

    pub fn noise_experiment(&self) -> Result<Manifest> {
        let (m0, mp, cvae) = (self.m0()?, self.mp()?, self.cvae()?);
        let mut summaries = Vec::new();
        for sc in self.scenarios()? {
            let seeds = seed_list(
                stage_rng(self.seed, "noise").derive(&sc.name).seed(),
                self.config.experiment.seeds,
            );
            for noise in [
                NoiseSource::SyntheticFlip(self.config.experiment.noise_rate),
                NoiseSource::ModelPredictions,
            ] {
                summaries.push(noise_scenario(
                    &self.config,
                    &m0,
                    &mp,
                    &cvae,
                    &sc,
                    noise,
                    &seeds,
                )?);
            }
        }
        let mut written = Vec::new();
        self.save_json("reports/noise.json", &summaries, &mut written)?;
        self.finish("noise-experiment", &written)
    }

    /// Checks every manifest against the files on disk, then scores every
    /// model found on every scenario.
    pub fn evaluate(&self) -> Result<Manifest> {
        let verified = self.verify()?;
        let scenarios = self.scenarios()?;
        let mut models: Vec<(String, PathBuf)> =
            vec![("m0".into(), self.path(M0)), ("mp".into(), self.path(MP))];
        let dir = self.path("models");
        let mut extra: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                (name.starts_with("adapted-") || name.starts_with("baseline-"))
                    && name.ends_with(".lpmd")
            })
            .collect();
        extra.sort();
        for p in extra {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            models.push((stem, p));
        }
        let mut accuracies = Vec::new();
        for (name, path) in &models {
            let model = io::load_model(path, "train-source")?;
            for sc in &scenarios {
                if (name.starts_with("adapted-") || name.starts_with("baseline-"))
                    && !name.contains(&format!("-{}-", sc.name))
                {
                    continue;
                }
                accuracies.push(ModelAccuracy {
                    model: name.clone(),
                    scenario: sc.name.clone(),
                    accuracy: top1_accuracy(&model, &sc.eval, &sc.classes)?,
                });
            }
        }
        let mut written = Vec::new();
        self.save_json(
            "reports/evaluate.json",
            &EvaluationReport {
                verified_artifacts: verified,
                accuracies,
            },
            &mut written,
        )?;
        self.finish("evaluate", &written)
    }

    /// Verifies the checksums of every manifest except `evaluate`'s own;
    /// returns the number of artifacts checked.
    pub fn verify(&self) -> Result<usize> {
        let dir = self.path("manifests");
        let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingInput {
                    path: dir,
                    producer: "run-all",
                })
            }
            Err(e) => return Err(e.into()),
        };
        paths.sort();
        let hash = self.config.hash();
        let mut checked = 0;
        for p in paths {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem == "evaluate"
                || stem == "run-all"
                || p.extension().and_then(|e| e.to_str()) != Some("json")
            {
                continue;
            }
            let m: Manifest = io::load_json(&p, "run-all")?;
            if m.config_hash != hash || m.seed != self.seed {
                return Err(Error::Config(format!(
                    "{} was produced by {} with another config or seed (hash {}, seed {})",
                    p.display(),
                    m.command,
                    m.config_hash,
                    m.seed
                )));
            }
            for (rel, expected) in &m.artifacts {
                let path = self.path(rel);
                if !path.exists() {
                    return Err(Error::MissingInput {
                        path,
                        producer: command_producer(&m.command),
                    });
                }
                let actual = sha256_file(&path)?;
                if &actual != expected {
                    return Err(Error::Checksum {
                        path,
                        expected: expected.clone(),
                        actual,
                    });
                }
                checked += 1;
            }
        }
        Ok(checked)
    }

    /// Every stage in order; the final manifest lists all artifacts.
    pub fn run_all(&self) -> Result<Manifest> {
        let mut manifests = vec![
            self.synth_data()?,
            self.train_source()?,
            self.prune()?,
            self.dump_activations()?,
            self.train_cvae()?,
            self.train_uncond()?,
            self.estimate_domain(None)?,
        ];
        for mode in [LabelMode::GroundTruth, LabelMode::Estimated] {
            manifests.push(self.adapt(mode)?);
            manifests.push(self.baseline(mode, self.config.baseline.budget())?);
        }
        manifests.push(self.sweep_budget(LabelMode::GroundTruth)?);
        manifests.push(self.compare_uncond()?);
        manifests.push(self.memory_report()?);
        manifests.push(self.noise_experiment()?);
        manifests.push(self.evaluate()?);
        let all: Vec<String> = manifests
            .iter()
            .flat_map(|m| m.artifacts.keys().cloned())
            .chain(
                manifests
                    .iter()
                    .map(|m| format!("manifests/{}.json", m.command)),
            )
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        self.finish("run-all", &all)
    }
}

/// The command-line name that regenerates a manifest's artifacts.
fn command_producer(command: &str) -> &'static str {
    const KNOWN: [&str; 13] = [
        "synth-data",
        "train-source",
        "prune",
        "dump-activations",
        "train-cvae",
        "train-uncond",
        "estimate-domain",
        "adapt",
        "baseline",
        "sweep-budget",
        "compare-uncond",
        "memory-report",
        "noise-experiment",
    ];
    KNOWN
        .iter()
        .find(|k| command == **k || command.starts_with(&format!("{k}-")))
        .copied()
        .unwrap_or("run-all")
}
