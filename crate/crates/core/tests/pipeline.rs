use loco_core::config::PipelineConfig;
use loco_core::pipeline::Run;
use loco_core::{Error, ErrorCategory};

fn small() -> PipelineConfig {
    PipelineConfig::from_toml(
        "[dataset]\ntrain_per_class = 30\nval_per_class = 10\nstream_per_class = 10\n\
         [source]\nepochs = 3\n[prune]\nfinetune_epochs = 1\n[cvae]\nepochs = 2\n\
         [experiment]\nseeds = 1\n",
    )
    .unwrap()
}

#[test]
fn missing_input_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(), 0, dir.path()).unwrap();
    let err = run.prune().unwrap_err();
    assert_eq!(err.category(), ErrorCategory::MissingDependency);
    assert!(err.to_string().contains("train-source"), "{err}");
    let err = run.train_cvae().unwrap_err();
    assert!(err.to_string().contains("dump-activations"), "{err}");
}

#[test]
fn verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(), 0, dir.path()).unwrap();
    run.synth_data().unwrap();
    let manifest = run.train_source().unwrap();
    assert!(run.verify().unwrap() >= manifest.artifacts.len());

    let m0 = run.path("models/m0.lpmd");
    let mut bytes = std::fs::read(&m0).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&m0, bytes).unwrap();
    match run.verify() {
        Err(Error::Checksum { path, .. }) => assert!(path.ends_with("models/m0.lpmd")),
        other => panic!("expected a checksum error, got {other:?}"),
    }
}

#[test]
fn stage_outputs_depend_only_on_config_and_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = Run::new(small(), 5, a.path())
        .unwrap()
        .synth_data()
        .unwrap();
    let second = Run::new(small(), 5, b.path())
        .unwrap()
        .synth_data()
        .unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert_eq!(first.config_hash, second.config_hash);

    let other = Run::new(small(), 6, b.path())
        .unwrap()
        .synth_data()
        .unwrap();
    assert_ne!(first.artifacts, other.artifacts);
    let mut changed = small();
    changed.dataset.within_sigma = 1.0;
    assert_ne!(changed.hash(), small().hash());
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.prune.fraction = 1.5;
    let err = Run::new(cfg, 0, dir.path())
        .err()
        .expect("fraction 1.5 accepted");
    assert_eq!(err.category(), ErrorCategory::Config);
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}
