//! Metrics, memory accounting, budget sweeps and the conditional versus
//! unconditional generator comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapt_classifier, retrain_baseline, stored_row_bytes, AdaptationConfig, AdaptationReport,
    Budget, ClassDistribution, LabelMode, RetrainConfig,
};
use crate::cvae::ActivationGenerator;
use crate::error::{Error, Result};
use crate::models::{model_memory_bytes, ActivationBatch, Dataset, MlpModel};
use crate::numerics::F32_BYTES;

/// Fraction of samples with a label in `classes` whose argmax over the full
/// head equals the label. Out-of-subset logits are not masked.
pub fn top1_accuracy(model: &MlpModel, data: &Dataset, classes: &[usize]) -> Result<f32> {
    let subset = data.restrict(classes);
    if subset.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no evaluation samples for classes {classes:?}"
        )));
    }
    let pred = model.predict(&subset.inputs)?;
    let correct = pred
        .iter()
        .zip(&subset.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f32 / subset.len() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryCategory {
    StaticNetwork,
    StaticSamples,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub category: MemoryCategory,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub entries: Vec<LedgerEntry>,
}

impl MemoryLedger {
    pub fn push(&mut self, name: impl Into<String>, category: MemoryCategory, bytes: u64) {
        self.entries.push(LedgerEntry {
            name: name.into(),
            category,
            bytes,
        });
    }

    pub fn total_of(&self, category: MemoryCategory) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.category == category)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn static_total(&self) -> u64 {
        self.total_of(MemoryCategory::StaticNetwork) + self.total_of(MemoryCategory::StaticSamples)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn totals(&self) -> BTreeMap<MemoryCategory, u64> {
        [
            MemoryCategory::StaticNetwork,
            MemoryCategory::StaticSamples,
            MemoryCategory::Runtime,
        ]
        .into_iter()
        .map(|c| (c, self.total_of(c)))
        .collect()
    }
}

/// What is kept on the device for one adaptation method.
pub enum MethodFootprint<'a> {
    Generated {
        m0: &'a MlpModel,
        mp: &'a MlpModel,
        generator: &'a dyn ActivationGenerator,
        generated_rows: usize,
        batch_size: usize,
    },
    StoredBaseline {
        m0: &'a MlpModel,
        mp: &'a MlpModel,
        stored_rows: usize,
        batch_size: usize,
    },
}

/// Runtime model of classifier-only retraining, in floats: the trainable
/// classifier, its gradient and momentum buffer, plus one batch of
/// activations and of logits with their gradients.
pub fn classifier_runtime_floats(mp: &MlpModel, batch_size: usize) -> u64 {
    let fc = mp.classifier().param_count() as u64;
    let batch = batch_size as u64;
    let a = mp.activation_dim() as u64;
    let s = mp.num_classes() as u64;
    3 * fc + batch * a + 2 * batch * s
}

pub fn build_ledger(method: &MethodFootprint<'_>) -> MemoryLedger {
    let mut ledger = MemoryLedger::default();
    match *method {
        MethodFootprint::Generated {
            m0,
            mp,
            generator,
            generated_rows,
            batch_size,
        } => {
            ledger.push(
                "deployed model",
                MemoryCategory::StaticNetwork,
                model_memory_bytes(m0),
            );
            ledger.push(
                "pruned model",
                MemoryCategory::StaticNetwork,
                model_memory_bytes(mp),
            );
            ledger.push(
                "generator",
                MemoryCategory::StaticNetwork,
                generator.memory_bytes(),
            );
            ledger.push("stored samples", MemoryCategory::StaticSamples, 0);
            ledger.push(
                "generated activations",
                MemoryCategory::Runtime,
                generated_rows as u64 * stored_row_bytes(mp.activation_dim()),
            );
            ledger.push(
                "classifier training",
                MemoryCategory::Runtime,
                classifier_runtime_floats(mp, batch_size) * F32_BYTES,
            );
        }
        MethodFootprint::StoredBaseline {
            m0,
            mp,
            stored_rows,
            batch_size,
        } => {
            ledger.push(
                "deployed model",
                MemoryCategory::StaticNetwork,
                model_memory_bytes(m0),
            );
            ledger.push(
                "pruned model",
                MemoryCategory::StaticNetwork,
                model_memory_bytes(mp),
            );
            ledger.push(
                "stored samples",
                MemoryCategory::StaticSamples,
                stored_rows as u64 * stored_row_bytes(mp.activation_dim()),
            );
            ledger.push(
                "classifier training",
                MemoryCategory::Runtime,
                classifier_runtime_floats(mp, batch_size) * F32_BYTES,
            );
        }
    }
    ledger
}

/// Reproducible seed list for a cell.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

fn mean(xs: &[f32]) -> f32 {
    // sorted before reduction so the result does not depend on cell order
    let mut v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    (v.iter().sum::<f64>() / v.len().max(1) as f64) as f32
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: Budget,
    pub rows_used: usize,
    pub mean_accuracy: f32,
    pub per_seed: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub budget: Budget,
    /// Stored-sample bytes at the crossover over the generator's bytes.
    pub ratio_to_generator: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub label_mode: LabelMode,
    pub points: Vec<SweepPoint>,
    pub no_retrain: f32,
    pub generated_accuracy: f32,
    pub generator_bytes: u64,
    pub spearman: f64,
    pub crossover: Option<Crossover>,
}

impl SweepReport {
    /// Plot-ready rows: `budget_bytes,rows_used,baseline,no_retrain,generated`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "budget_bytes",
            "rows_used",
            "baseline_accuracy",
            "no_retrain_accuracy",
            "generated_accuracy",
        ])
        .map_err(io)?;
        for p in &self.points {
            let budget = match p.budget {
                Budget::Bytes(b) => b.to_string(),
                Budget::Unbounded => "inf".to_string(),
            };
            w.write_record([
                budget,
                p.rows_used.to_string(),
                format!("{:.6}", p.mean_accuracy),
                format!("{:.6}", self.no_retrain),
                format!("{:.6}", self.generated_accuracy),
            ])
            .map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Baseline accuracy against storage budget, each point averaged over
/// `seeds`; generated-activation adaptation and no-retrain as references.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    mp: &MlpModel,
    generator: &dyn ActivationGenerator,
    stored: &ActivationBatch,
    dist: &ClassDistribution,
    adaptation: &AdaptationConfig,
    baseline: &RetrainConfig,
    eval: &Dataset,
    classes: &[usize],
    budgets: &[Budget],
    seeds: &[u64],
) -> Result<SweepReport> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("budgets must be ascending".into()));
    }
    let no_retrain = top1_accuracy(mp, eval, classes)?;
    let mut gen = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (_, r) = adapt_classifier(mp, generator, dist, adaptation, eval, classes, seed)?;
        gen.push(r.post_accuracy);
    }
    let generated_accuracy = mean(&gen);
    let row_bytes = stored_row_bytes(mp.activation_dim());
    let mode = adaptation.label_mode;
    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let rows = budget.rows(row_bytes, stored.len());
        let per_seed = if rows == 0 {
            vec![no_retrain; seeds.len()]
        } else {
            let mut accs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let (_, r) =
                    retrain_baseline(mp, stored, mode, budget, baseline, eval, classes, seed)?;
                accs.push(r.post_accuracy);
            }
            accs
        };
        points.push(SweepPoint {
            budget,
            rows_used: rows,
            mean_accuracy: mean(&per_seed),
            per_seed,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.rows_used as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_accuracy as f64).collect();
    let generator_bytes = generator.memory_bytes();
    let crossover = points
        .iter()
        .find(|p| p.mean_accuracy >= generated_accuracy)
        .map(|p| Crossover {
            budget: p.budget,
            ratio_to_generator: match p.budget {
                Budget::Bytes(b) => Some(b as f64 / generator_bytes as f64),
                Budget::Unbounded => None,
            },
        });
    Ok(SweepReport {
        label_mode: mode,
        spearman: spearman(&xs, &ys),
        points,
        no_retrain,
        generated_accuracy,
        generator_bytes,
        crossover,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondUncondReport {
    pub no_retrain: f32,
    pub conditional_accuracy: f32,
    pub unconditional_accuracy: f32,
    /// conditional − unconditional, in percentage points.
    pub delta_pp: f32,
    pub conditional_bytes: u64,
    pub unconditional_bytes: u64,
    pub memory_ratio: f64,
    pub conditional_per_seed: Vec<f32>,
    pub unconditional_per_seed: Vec<f32>,
}

/// Adapts with a single conditional generator and with the per-class pack.
#[allow(clippy::too_many_arguments)]
pub fn cond_vs_uncond(
    mp: &MlpModel,
    conditional: &dyn ActivationGenerator,
    unconditional: &dyn ActivationGenerator,
    dist: &ClassDistribution,
    cfg: &AdaptationConfig,
    eval: &Dataset,
    classes: &[usize],
    seeds: &[u64],
) -> Result<CondUncondReport> {
    let mut cond = Vec::with_capacity(seeds.len());
    let mut uncond = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        cond.push(
            adapt_classifier(mp, conditional, dist, cfg, eval, classes, seed)?
                .1
                .post_accuracy,
        );
        uncond.push(
            adapt_classifier(mp, unconditional, dist, cfg, eval, classes, seed)?
                .1
                .post_accuracy,
        );
    }
    let (c, u) = (mean(&cond), mean(&uncond));
    let (cb, ub) = (conditional.memory_bytes(), unconditional.memory_bytes());
    Ok(CondUncondReport {
        no_retrain: top1_accuracy(mp, eval, classes)?,
        conditional_accuracy: c,
        unconditional_accuracy: u,
        delta_pp: 100.0 * (c - u),
        conditional_bytes: cb,
        unconditional_bytes: ub,
        memory_ratio: ub as f64 / cb as f64,
        conditional_per_seed: cond,
        unconditional_per_seed: uncond,
    })
}

/// One cell of a scenario × method × seed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub outcome: std::result::Result<AdaptationReport, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub cells: Vec<MatrixCell>,
}

impl ExperimentMatrix {
    pub fn record(
        &mut self,
        scenario: &str,
        method: &str,
        seed: u64,
        outcome: Result<AdaptationReport>,
    ) {
        self.cells.push(MatrixCell {
            scenario: scenario.to_string(),
            method: method.to_string(),
            seed,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }

    /// Mean post-adaptation accuracy of the successful cells of one row.
    pub fn mean_post(&self, scenario: &str, method: &str) -> Option<f32> {
        let accs: Vec<f32> = self
            .cells
            .iter()
            .filter(|c| c.scenario == scenario && c.method == method)
            .filter_map(|c| c.outcome.as_ref().ok().map(|r| r.post_accuracy))
            .collect();
        (!accs.is_empty()).then(|| mean(&accs))
    }
}
