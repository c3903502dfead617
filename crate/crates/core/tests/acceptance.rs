//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line to
//! stderr (bypassing the harness capture) before asserting.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use loco_core::adaptation::{
    allocate_counts, retrain_baseline, Budget, ClassDistribution, LabelMode, NoiseSource,
};
use loco_core::config::PipelineConfig;
use loco_core::cvae::{ActivationGenerator, UncondVaePack, Vae, VaeArch};
use loco_core::evaluation::{build_ledger, MemoryCategory, MethodFootprint};
use loco_core::io;
use loco_core::models::{model_memory_bytes, ActivationBatch, MlpModel};
use loco_core::numerics::{Activation, Rng};
use loco_core::pipeline::{
    adapt_scenario, compare_scenario, noise_scenario, stored_batch, sweep_scenario, Fixture, Run,
};

const SEEDS: u64 = 5;

struct Built {
    fixture: Fixture,
    elapsed: Duration,
}

fn fixtures() -> &'static [Built] {
    static CELL: OnceLock<Vec<Built>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = PipelineConfig::default();
        (0..SEEDS)
            .map(|seed| {
                let t = Instant::now();
                let fixture = Fixture::build(&cfg, seed).expect("fixture");
                Built {
                    fixture,
                    elapsed: t.elapsed(),
                }
            })
            .collect()
    })
}

fn packs() -> &'static [UncondVaePack] {
    static CELL: OnceLock<Vec<UncondVaePack>> = OnceLock::new();
    CELL.get_or_init(|| {
        fixtures()
            .iter()
            .map(|b| b.fixture.uncond().expect("pack"))
            .collect()
    })
}

fn default_scenario(f: &Fixture) -> &loco_core::pipeline::ScenarioData {
    &f.scenarios[0]
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n:>2} {name:<28} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_01_gradients() {
    let t = Instant::now();
    let mut worst_op: f64 = 0.0;
    for seed in 0..5 {
        for r in [
            common::check_dense(Activation::Identity, seed),
            common::check_dense(Activation::Relu, seed),
            common::check_mse(seed),
            common::check_xent(seed),
            common::check_mlp_mse(seed),
        ] {
            assert!(r.checked > 0);
            worst_op = worst_op.max(r.max_rel_error);
        }
    }
    let mut worst_cvae: f64 = 0.0;
    for (seed, beta) in [(0, 0.0), (1, 0.3), (2, 1.0), (3, 1.0)] {
        worst_cvae = worst_cvae.max(common::check_cvae(seed, beta).max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_op < 1e-4 && worst_cvae < 1e-3 && secs < 30.0;
    report(
        1,
        "gradient suite",
        pass,
        format!("ops max rel {worst_op:.2e} (< 1e-4), cvae max rel {worst_cvae:.2e} (< 1e-3), {secs:.1}s (< 30s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_kl_oracle() {
    let t = Instant::now();
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..4)
            .map(|_| rng.uniform_range(-1.5, 1.5) as f64)
            .collect();
        let sigma: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.3, 2.0) as f64).collect();
        let closed = common::kl_closed_form(&mu, &sigma);
        let mc = common::kl_monte_carlo(&mu, &sigma, 1_000_000, &mut rng);
        worst = worst.max((closed - mc).abs() / closed);
    }
    let zero = common::kl_closed_form(&[0.0; 4], &[1.0; 4]);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 0.01 && zero == 0.0 && secs < 60.0;
    report(
        2,
        "KL oracle",
        pass,
        format!("max rel {worst:.2e} over 20 pairs (< 1e-2), KL(0,1) = {zero}, {secs:.1}s (< 60s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_beta_schedule() {
    let cfg = PipelineConfig::default();
    let train = cfg.cvae.train_config();
    let b = train.beta;
    let betas: Vec<f32> = (0..=train.epochs + 30).map(|e| b.at(e)).collect();
    let monotone = betas.windows(2).all(|w| w[1] >= w[0]);
    let clamped = betas[30..].iter().all(|&v| v == 1.0);
    let lr_waits = (0..train.epochs)
        .filter(|&e| b.at(e) < 1.0)
        .all(|e| train.lr_schedule.lr_at(train.lr, e) == train.lr);
    let pass = betas[0] == 0.0 && monotone && betas[30] == 1.0 && clamped && lr_waits;
    report(
        3,
        "beta schedule",
        pass,
        format!(
            "beta(0) = {}, beta(29) = {}, beta(30) = {}, monotone {monotone}, clamped {clamped}, lr fixed until beta = 1 {lr_waits}",
            betas[0], betas[29], betas[30]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_distribution_matching() {
    let built = &fixtures()[..3];
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for b in built {
        let f = &b.fixture;
        let s = f.config.dataset.num_classes;
        let labels = f.activations.labels.as_ref().unwrap();
        let (err, lo, hi) = common::matching(
            &f.cvae,
            &f.activations.features,
            labels,
            s,
            1000,
            100 + f.seed,
        );
        worst = worst.max(err);
        details.push(format!(
            "seed {}: {err:.3} (var ratio {lo:.2}..{hi:.1})",
            f.seed
        ));
    }
    let secs =
        t.elapsed().as_secs_f64() + built.iter().map(|b| b.elapsed.as_secs_f64()).sum::<f64>();
    let pass = worst < 0.15 && secs < 300.0;
    report(
        4,
        "distribution matching",
        pass,
        format!("worst mean error / min inter-class distance {worst:.3} (< 0.15), {secs:.0}s (< 300s); {}", details.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_05_adaptation_parity() {
    let mut lines = Vec::new();
    let mut pass = true;
    let names: Vec<String> = fixtures()[0]
        .fixture
        .scenarios
        .iter()
        .map(|s| s.name.clone())
        .collect();
    for (i, name) in names.iter().enumerate() {
        let (mut pre, mut post, mut oracle) = (Vec::new(), Vec::new(), Vec::new());
        for b in fixtures() {
            let f = &b.fixture;
            let sc = &f.scenarios[i];
            let (_, r) = adapt_scenario(
                &f.config,
                f.seed,
                &f.m0,
                &f.mp,
                &f.cvae,
                sc,
                LabelMode::GroundTruth,
            )
            .unwrap();
            pre.push(r.report.pre_accuracy as f64);
            post.push(r.report.post_accuracy as f64);
            oracle.push(r.real_oracle_accuracy as f64);
        }
        let (pre, post, oracle) = (mean(&pre), mean(&post), mean(&oracle));
        let ok = post >= oracle - 0.03 && post >= pre;
        pass &= ok;
        lines.push(format!(
            "{name}: unadapted {pre:.3}, generated {post:.3}, real oracle {oracle:.3}"
        ));
    }
    report(
        5,
        "adaptation parity",
        pass,
        format!(
            "5-seed means, need generated >= oracle - 0.03 and >= unadapted; {}",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_noisy_label_robustness() {
    let mut pass = true;
    let mut lines = Vec::new();
    for noise in [
        NoiseSource::SyntheticFlip(0.2),
        NoiseSource::ModelPredictions,
    ] {
        let (mut gen, mut base, mut floor_gap) = (Vec::new(), Vec::new(), f64::INFINITY);
        for b in fixtures() {
            let f = &b.fixture;
            let sc = default_scenario(f);
            let summary =
                noise_scenario(&f.config, &f.m0, &f.mp, &f.cvae, sc, noise, &[f.seed]).unwrap();
            for r in &summary.runs {
                gen.push(r.generated_degradation as f64);
                base.push(r.baseline_degradation as f64);
                floor_gap = floor_gap.min(r.generated_uncertain as f64 - r.no_retrain as f64);
            }
        }
        let (g, bl) = (mean(&gen), mean(&base));
        let ok = g < bl && floor_gap >= -0.01;
        if noise == NoiseSource::SyntheticFlip(0.2) {
            pass &= ok;
        }
        lines.push(format!(
            "{noise:?}: degradation generated {:.2}pp vs baseline {:.2}pp, worst generated - unadapted {:+.2}pp",
            100.0 * g,
            100.0 * bl,
            100.0 * floor_gap
        ));
    }
    report(6, "noisy-label robustness", pass, lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_07_allocation_exactness() {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        ..Config::default()
    });
    let strategy = (
        proptest::collection::btree_map(0usize..50, 1u32..1000, 1..20),
        1usize..10_000,
    );
    let result = runner.run(&strategy, |(weights, total)| {
        let sum: u64 = weights.values().map(|&w| w as u64).sum();
        let probs: BTreeMap<usize, f64> = weights
            .iter()
            .map(|(&c, &w)| (c, w as f64 / sum as f64))
            .collect();
        let counts = allocate_counts(&ClassDistribution::from_probs(probs).unwrap(), total);
        prop_assert_eq!(counts.values().sum::<usize>(), total);
        for (&c, &w) in &weights {
            // |count − total·w/sum| ≤ 1, compared in integers
            let exact = total as u128 * w as u128;
            let got = *counts.get(&c).unwrap_or(&0) as u128 * sum as u128;
            prop_assert!(
                got.abs_diff(exact) <= sum as u128,
                "class {} off by more than one row",
                c
            );
        }
        Ok(())
    });
    let pass = result.is_ok();
    let detail = match &result {
        Ok(()) => "1000 random distributions: sums to R, every class within 1 of R·p".to_string(),
        Err(e) => e.to_string(),
    };
    report(7, "allocation exactness", pass, detail);
    assert!(pass);
}

fn mlp_bytes(widths: &[usize]) -> u64 {
    widths
        .windows(2)
        .map(|w| (w[0] * w[1] + w[1]) as u64 * 4)
        .sum()
}

fn widths_of(model: &MlpModel) -> Vec<usize> {
    let layers = model.layers();
    std::iter::once(layers[0].inputs())
        .chain(layers.iter().map(|l| l.outputs()))
        .collect()
}

fn vae_bytes(a: &VaeArch) -> u64 {
    let mut enc = vec![a.data_dim + a.num_classes];
    enc.extend(&a.encoder_hidden);
    enc.push(2 * a.latent_dim);
    let mut dec = vec![a.latent_dim + a.num_classes];
    dec.extend(&a.decoder_hidden);
    dec.push(a.data_dim);
    mlp_bytes(&enc) + mlp_bytes(&dec) + (a.data_dim as u64 + 1) * 4
}

#[test]
fn criterion_08_memory_ledger() {
    let f = &fixtures()[0].fixture;
    let pack = &packs()[0];
    let cfg = &f.config;
    let (s, a) = (cfg.dataset.num_classes as u64, cfg.activation_dim() as u64);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let m0_bytes = mlp_bytes(&widths_of(&f.m0));
    let mp_bytes = mlp_bytes(&widths_of(&f.mp));
    checks.push(("deployed bytes", model_memory_bytes(&f.m0) == m0_bytes));
    checks.push(("pruned bytes", model_memory_bytes(&f.mp) == mp_bytes));
    let cvae_bytes = vae_bytes(f.cvae.arch());
    checks.push(("cvae bytes", f.cvae.memory_bytes() == cvae_bytes));
    let member = vae_bytes(pack.vaes()[0].arch());
    checks.push(("pack bytes", pack.memory_bytes() == s * member));

    let bs = cfg.adaptation.batch_size as u64;
    let runtime = |bs: u64| (3 * (s * a + s) + bs * a + 2 * bs * s) * 4;
    let generated = build_ledger(&MethodFootprint::Generated {
        m0: &f.m0,
        mp: &f.mp,
        generator: &f.cvae,
        generated_rows: cfg.adaptation.generated,
        batch_size: cfg.adaptation.batch_size,
    });
    checks.push((
        "stored bytes == 0",
        generated.total_of(MemoryCategory::StaticSamples) == 0,
    ));
    checks.push((
        "generated ledger",
        generated.total()
            == m0_bytes
                + mp_bytes
                + cvae_bytes
                + cfg.adaptation.generated as u64 * (a * 4 + 4)
                + runtime(bs),
    ));
    let rows = 100u64;
    let baseline = build_ledger(&MethodFootprint::StoredBaseline {
        m0: &f.m0,
        mp: &f.mp,
        stored_rows: rows as usize,
        batch_size: cfg.baseline.batch_size,
    });
    checks.push((
        "baseline ledger",
        baseline.total()
            == m0_bytes + mp_bytes + rows * (a * 4 + 4) + runtime(cfg.baseline.batch_size as u64),
    ));
    let ratio = pack.memory_bytes() as f64 / f.cvae.memory_bytes() as f64;
    checks.push((
        "pack/cvae ratio",
        ratio == (s * member) as f64 / cvae_bytes as f64,
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let pass = failed.is_empty();
    report(
        8,
        "memory ledger arithmetic",
        pass,
        format!(
            "{} closed-form checks{}; cvae {cvae_bytes} B, pack {} B, pack/cvae {ratio:.3}",
            checks.len(),
            if pass { String::new() } else { format!(", failed {failed:?}") },
            s * member
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_budget_sweep() {
    let f = &fixtures()[0].fixture;
    let sc = default_scenario(f);
    let mode = LabelMode::GroundTruth;
    let sweep = sweep_scenario(&f.config, f.seed, &f.m0, &f.mp, &f.cvae, sc, mode).unwrap();
    let finite = sweep
        .points
        .iter()
        .filter(|p| matches!(p.budget, Budget::Bytes(_)))
        .count();
    let inf = sweep
        .points
        .iter()
        .find(|p| p.budget == Budget::Unbounded)
        .expect("unbounded point");
    let seeds = loco_core::evaluation::seed_list(
        loco_core::pipeline::stage_rng(f.seed, "sweep-budget")
            .derive(&sc.name)
            .seed(),
        f.config.experiment.seeds,
    );
    let stored: ActivationBatch = stored_batch(&f.m0, &f.mp, sc, mode).unwrap();
    let unbounded: Vec<f32> = seeds
        .iter()
        .map(|&seed| {
            retrain_baseline(
                &f.mp,
                &stored,
                mode,
                Budget::Unbounded,
                &f.config.baseline.retrain(),
                &sc.eval,
                &sc.classes,
                seed,
            )
            .unwrap()
            .1
            .post_accuracy
        })
        .collect();
    let pass = sweep.spearman > 0.0 && finite >= 6 && seeds.len() == 5 && inf.per_seed == unbounded;
    let curve: Vec<String> = sweep
        .points
        .iter()
        .map(|p| match p.budget {
            Budget::Bytes(b) => format!("{b}B {:.3}", p.mean_accuracy),
            Budget::Unbounded => format!("inf {:.3}", p.mean_accuracy),
        })
        .collect();
    let crossover = match &sweep.crossover {
        Some(c) => format!(
            "{:?} ({:?} x generator bytes)",
            c.budget, c.ratio_to_generator
        ),
        None => "none".into(),
    };
    report(
        9,
        "budget sweep",
        pass,
        format!(
            "spearman {:.3} (> 0) over {} budgets, unbounded point matches fixture {}; [{}]; generated {:.3}; crossover {crossover}",
            sweep.spearman,
            sweep.points.len(),
            inf.per_seed == unbounded,
            curve.join(", "),
            sweep.generated_accuracy
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_conditional_vs_unconditional() {
    let (mut cond, mut uncond) = (Vec::new(), Vec::new());
    let mut more_memory = true;
    let mut ratio = 0.0;
    for (b, pack) in fixtures().iter().zip(packs()) {
        let f = &b.fixture;
        let c =
            compare_scenario(&f.config, f.seed, &f.mp, &f.cvae, pack, default_scenario(f)).unwrap();
        cond.push(c.report.conditional_accuracy as f64);
        uncond.push(c.report.unconditional_accuracy as f64);
        more_memory &= c.report.unconditional_bytes > c.report.conditional_bytes;
        ratio = c.report.memory_ratio;
    }
    let delta = 100.0 * (mean(&cond) - mean(&uncond));
    let pass = delta.abs() < 2.0 && more_memory;
    report(
        10,
        "conditional vs unconditional",
        pass,
        format!(
            "conditional {:.3}, unconditional {:.3}, delta {delta:+.2}pp (|.| < 2), pack uses more memory {more_memory} (ratio {ratio:.3})",
            mean(&cond),
            mean(&uncond)
        ),
    );
    assert!(pass);
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_determinism() {
    // Shortened training keeps two full runs affordable; every stage and
    // artifact of the default pipeline is still produced.
    let mut cfg = PipelineConfig::default();
    cfg.source.epochs = 4;
    cfg.prune.finetune_epochs = 1;
    cfg.cvae.epochs = 4;
    cfg.uncond.0.epochs = 2;
    cfg.adaptation.epochs = 3;
    cfg.baseline.epochs = 2;
    cfg.experiment.seeds = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Run::new(cfg.clone(), 7, d.path())
            .unwrap()
            .run_all()
            .unwrap();
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass = !a.is_empty() && a.keys().eq(b.keys()) && differing.is_empty();
    report(
        11,
        "determinism",
        pass,
        format!(
            "{} files from two run-all invocations, {} differ",
            a.len(),
            differing.len()
        ),
    );
    assert!(pass);
}

fn sample_vae(classes: usize, rng: &mut Rng) -> Vae {
    Vae::new(
        VaeArch {
            data_dim: 5,
            num_classes: classes,
            latent_dim: 2,
            encoder_hidden: vec![7, 4],
            decoder_hidden: vec![6],
        },
        rng,
    )
    .unwrap()
}

#[test]
fn criterion_12_serialization() {
    let mut rng = Rng::new(12);
    let mut round_trips = 0;
    let mut ok = true;
    for rows in [0, 1, 17] {
        let m = rng.normal_matrix(rows, 6);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(9)).collect();
        for l in [None, Some(labels.as_slice())] {
            let bytes = io::encode_activations(&m, l).unwrap();
            let (back, back_labels) = io::decode_activations(&bytes).unwrap();
            ok &= back
                .data()
                .iter()
                .map(|v| v.to_bits())
                .eq(m.data().iter().map(|v| v.to_bits()))
                && back.shape() == m.shape()
                && back_labels.as_deref() == l;
            round_trips += 1;
        }
    }
    let f = &fixtures()[0].fixture;
    for model in [&f.m0, &f.mp] {
        let bytes = io::encode_mlp(model).unwrap();
        let back = io::decode_mlp(&bytes).unwrap();
        ok &= back == *model && io::encode_mlp(&back).unwrap() == bytes;
        round_trips += 1;
    }
    let bytes = io::encode_vae(&f.cvae).unwrap();
    ok &= io::decode_vae(&bytes).unwrap() == f.cvae;
    round_trips += 1;
    let pack = UncondVaePack::new((0..3).map(|_| sample_vae(0, &mut rng)).collect()).unwrap();
    ok &= io::decode_pack(&io::encode_pack(&pack).unwrap()).unwrap() == pack;
    round_trips += 1;

    let samples: Vec<(&str, Vec<u8>)> = vec![
        (
            "activations",
            io::encode_activations(&rng.normal_matrix(9, 4), Some(&[1, 2, 3, 0, 1, 2, 3, 0, 1]))
                .unwrap(),
        ),
        ("mlp", io::encode_mlp(&f.mp).unwrap()),
        ("vae", io::encode_vae(&sample_vae(3, &mut rng)).unwrap()),
    ];
    let decode = |kind: &str, b: &[u8]| -> bool {
        match kind {
            "activations" => io::decode_activations(b).is_ok(),
            "mlp" => io::decode_mlp(b).is_ok(),
            _ => io::decode_vae(b).is_ok(),
        }
    };
    let (mut crashes, mut truncations_accepted, mut flips_rejected) = (0, 0, 0);
    for i in 0..1000 {
        let (kind, bytes) = &samples[i % samples.len()];
        let cut = rng.below(bytes.len());
        match catch_unwind(AssertUnwindSafe(|| decode(kind, &bytes[..cut]))) {
            Ok(true) => truncations_accepted += 1,
            Ok(false) => {}
            Err(_) => crashes += 1,
        }
        let mut flipped = bytes.clone();
        let bit = rng.below(bytes.len() * 8);
        flipped[bit / 8] ^= 1 << (bit % 8);
        match catch_unwind(AssertUnwindSafe(|| decode(kind, &flipped))) {
            Ok(false) => flips_rejected += 1,
            Ok(true) => {}
            Err(_) => crashes += 1,
        }
    }
    let pass = ok && crashes == 0 && truncations_accepted == 0;
    report(
        12,
        "serialization",
        pass,
        format!(
            "{round_trips} bit-exact round trips {ok}; fuzz 1000 truncations + 1000 bit flips: {crashes} crashes, {truncations_accepted} truncations accepted, {flips_rejected} flips rejected"
        ),
    );
    assert!(pass);
}
