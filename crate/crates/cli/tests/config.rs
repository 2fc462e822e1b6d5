use std::path::PathBuf;

use proptest::prelude::*;
use tomocvae::config::{apply_override, Method};
use tomocvae::{exit_code, ExperimentConfig, ValidationError, EXIT_INVALID, EXIT_RUNTIME};
use tomocvae_core::cvae::DataTermMode;

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn defaults_validate_and_roundtrip() {
    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    let text = cfg.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), cfg);
}

#[test]
fn shipped_configs_roundtrip() {
    for name in ["desk.toml", "toy.toml"] {
        let cfg = ExperimentConfig::load(&repo_config(name), &[]).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again, cfg, "{name}");
    }
    let desk = ExperimentConfig::load(&repo_config("desk.toml"), &[]).unwrap();
    assert_eq!(desk.data.test_peaks, vec![1e2, 1e4]);
    assert_eq!(desk.model.iterations, 10);
    assert_eq!(desk.model.latent_dim, 6);
    assert_eq!(desk.baselines.tv.alpha, vec![2.0, 0.2]);
}

#[test]
fn unknown_keys_are_errors() {
    for text in ["bogus = 1", "[model]\nbetta = 1.0", "[train.adam]\nlearning_rate = 1.0", "[toy.model]\nx = 1"] {
        let e = ExperimentConfig::from_toml(text, &[]).unwrap_err();
        assert!(e.0.contains("unknown field"), "{text}: {e}");
    }
}

#[test]
fn invalid_values_are_errors() {
    let cases = [
        "[model]\nbeta = 0.0",
        "[model]\niterations = 0",
        "[geometry]\nheight = 1",
        "[data]\ntest_peaks = []",
        "[data]\ntrain_peaks = [-1.0]",
        "[data]\ntest_phantoms = 3\ntumours = [{ phantom = 3, center = [4, 4], radius = 2.0 }]",
        "[baselines.tv]\nalpha = [1.0, 2.0]",
        "[eval]\nhpd_rows = [16]",
        "[eval]\nhpd_level = 1.0",
        "[sample]\nsamples = 0",
        "[toy]\nbins = 10",
        "[train]\nbatches = 0",
        "[train.adam]\nbeta1 = 1.0",
        "[output]\ndir = \"\"",
        "[data]\nbatch_size = \"ten\"",
    ];
    for text in cases {
        assert!(ExperimentConfig::from_toml(text, &[]).is_err(), "{text}");
    }
}

#[test]
fn overrides() {
    let o = |items: &[&str]| {
        let items: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_toml("", &items)
    };
    let cfg = o(&["train.batches=7", "model.data_term=residual-norm", "train.adam.lr = 0.01"]).unwrap();
    assert_eq!(cfg.train.batches, 7);
    assert_eq!(cfg.model.data_term, DataTermMode::ResidualNorm);
    assert_eq!(cfg.train.adam.lr, 0.01);
    let cfg = o(&["data.test_peaks=[100.0, 10000.0]", "baselines.tv.alpha=[2.0, 0.2]", "baselines.methods=[\"gm3\"]"]).unwrap();
    assert_eq!(cfg.data.test_peaks, vec![1e2, 1e4]);
    assert_eq!(cfg.baselines.methods, vec![Method::Gm3]);
    assert!(o(&["train.batchez=7"]).is_err());
    assert!(o(&["train.batches"]).is_err());
    assert!(o(&["train..batches=1"]).is_err());
    assert!(o(&["train.batches.x=1"]).is_err());

    let mut doc = toml::Table::new();
    apply_override(&mut doc, "a.b.c=\"x\"").unwrap();
    assert_eq!(doc["a"]["b"]["c"].as_str(), Some("x"));
}

#[test]
fn exit_codes_distinguish_validation() {
    let v: anyhow::Error = ValidationError("x".into()).into();
    assert_eq!(exit_code(&v), EXIT_INVALID);
    assert_eq!(exit_code(&v.context("while loading")), EXIT_INVALID);
    assert_eq!(exit_code(&anyhow::anyhow!("disk full")), EXIT_RUNTIME);
    let e = ExperimentConfig::load(&PathBuf::from("/nonexistent/config.toml"), &[]).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_INVALID);
}

proptest! {
    #[test]
    fn roundtrip_preserves_values(
        batches in 1usize..100_000,
        beta in 1e-9f64..1e3,
        lr in 1e-8f64..1.0,
        peaks in proptest::collection::vec(1e-3f64..1e6, 1..4),
        seed in 0u64..(1 << 62),
        normalize in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.batches = batches;
        cfg.model.beta = beta;
        cfg.train.adam.lr = lr;
        cfg.baselines.tv.alpha = vec![1.0; peaks.len()];
        cfg.data.test_peaks = peaks;
        cfg.data.seed = seed;
        cfg.data.normalize = normalize;
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
