use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tomocvae_core::cvae::{ModelBundle, ModelConfig};
use tomocvae_core::data::{make_training_stream, StreamConfig, TrainingTuple};
use tomocvae_core::engine::{
    draw_rng, estimate_covariance, estimate_stats, sample_posterior, train, TrainConfig, MAX_COVARIANCE_PIXELS,
};
use tomocvae_core::exec::{Executor, Sequential};
use tomocvae_core::{Error, Image, LinearOperator, OperatorGeometry, RadonTransform};

fn op16() -> RadonTransform {
    RadonTransform::new(OperatorGeometry::covering(16, 16, 12)).unwrap()
}

fn small_bundle(seed: u64) -> ModelBundle {
    let config = ModelConfig {
        hidden_channels: 8,
        encoder_channels: 8,
        iterations: 3,
        ..ModelConfig::default()
    };
    ModelBundle::new(config, seed).unwrap()
}

fn stream(op: &RadonTransform, batch_size: usize, seed: u64) -> tomocvae_core::data::TrainingStream<'_> {
    let cfg = StreamConfig {
        batch_size,
        peaks: vec![1e2],
        normalize: true,
    };
    make_training_stream(cfg, op, seed).unwrap()
}

/// Evaluates in reverse index order, returning results in index order.
struct Reversed;

impl Executor for Reversed {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        let mut out: Vec<T> = (0..n).rev().map(f).collect();
        out.reverse();
        out
    }
}

#[test]
fn smoke_training_reduces_loss() {
    let op = op16();
    let mut bundle = small_bundle(3);
    let cfg = TrainConfig {
        batches: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let ops: [&dyn LinearOperator; 1] = [&op];
    let trace = train(&mut bundle, &cfg, stream(&op, 4, 11), &ops, &Sequential, |_, _, _| Ok(())).unwrap();
    assert_eq!(trace.len(), 200);
    assert!(trace.iter().all(|r| r.loss.is_finite()));
    let head: f64 = trace[..20].iter().map(|r| r.loss).sum();
    let tail: f64 = trace[180..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let op = op16();
    let mut bundle = small_bundle(1);
    let before = bundle.params().clone();
    let mut cfg = TrainConfig {
        batches: 1,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 0.0;
    let ops: [&dyn LinearOperator; 1] = [&op];
    train(&mut bundle, &cfg, stream(&op, 2, 0), &ops, &Sequential, |_, _, _| Ok(())).unwrap();
    assert_eq!(bundle.params().step(), 1);
    for (name, entry) in before.iter() {
        assert_eq!(bundle.params().get(name).unwrap(), &entry.value, "{name}");
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_batch() {
    let op = op16();
    let mut bundle = small_bundle(1);
    let before = bundle.params().clone();
    let good = stream(&op, 2, 0).next().unwrap();
    let mut bad = good.clone();
    bad[1].y.as_mut_slice()[3] = f64::NAN;
    let batches = vec![good, bad.clone()];
    let cfg = TrainConfig {
        batches: 2,
        ..TrainConfig::default()
    };
    let ops: [&dyn LinearOperator; 1] = [&op];
    let failure = train(&mut bundle, &cfg, batches, &ops, &Sequential, |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(failure.error, Error::NonFiniteLoss { batch: 1, .. }));
    assert_eq!(failure.batch_index, 1);
    assert_eq!(failure.trace.len(), 1);
    assert_eq!(failure.batch.len(), bad.len());
    assert!(failure.batch[1].y.as_slice()[3].is_nan());
    assert_ne!(bundle.params(), &before);
    assert!(failure.to_string().contains("batch 1"));
}

#[test]
fn exhausted_stream_is_reported() {
    let op = op16();
    let mut bundle = small_bundle(1);
    let cfg = TrainConfig {
        batches: 3,
        ..TrainConfig::default()
    };
    let ops: [&dyn LinearOperator; 1] = [&op];
    let batches: Vec<Vec<TrainingTuple>> = stream(&op, 1, 0).take(1).collect();
    let failure = train(&mut bundle, &cfg, batches, &ops, &Sequential, |_, _, _| Ok(())).unwrap_err();
    assert_eq!(failure.batch_index, 1);
    assert!(failure.batch.is_empty());
}

#[test]
fn checkpoints_follow_cadence() {
    let op = op16();
    let ops: [&dyn LinearOperator; 1] = [&op];
    let run = |batches, every| {
        let mut bundle = small_bundle(1);
        let cfg = TrainConfig {
            batches,
            checkpoint_every: every,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        train(&mut bundle, &cfg, stream(&op, 1, 0), &ops, &Sequential, |n, _, trace| {
            assert_eq!(trace.len(), n);
            seen.push(n);
            Ok(())
        })
        .unwrap();
        seen
    };
    assert_eq!(run(7, Some(3)), vec![3, 6, 7]);
    assert_eq!(run(5, None), vec![1, 2, 3, 4, 5]);
    assert_eq!(TrainConfig { batches: 100, ..TrainConfig::default() }.checkpoint_interval(), 5);
    assert_eq!(TrainConfig { batches: 1, ..TrainConfig::default() }.checkpoint_interval(), 1);
}

#[test]
fn invalid_train_config_is_rejected() {
    for cfg in [
        TrainConfig { batches: 0, ..TrainConfig::default() },
        TrainConfig { latent_samples: 0, ..TrainConfig::default() },
        TrainConfig { checkpoint_every: Some(0), ..TrainConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

#[test]
fn training_is_independent_of_executor_order() {
    let op = op16();
    let ops: [&dyn LinearOperator; 1] = [&op];
    let cfg = TrainConfig {
        batches: 3,
        latent_samples: 2,
        ..TrainConfig::default()
    };
    let mut a = small_bundle(2);
    let mut b = small_bundle(2);
    let ta = train(&mut a, &cfg, stream(&op, 3, 4), &ops, &Sequential, |_, _, _| Ok(())).unwrap();
    let tb = train(&mut b, &cfg, stream(&op, 3, 4), &ops, &Reversed, |_, _, _| Ok(())).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.params(), b.params());
}

fn observation(op: &RadonTransform, seed: u64) -> tomocvae_core::Sinogram {
    let ph = tomocvae_core::data::generate_ellipse_phantom(16, 16, 1e2, seed).unwrap();
    tomocvae_core::data::poissonize(&op.apply(&ph.image).unwrap(), seed + 1).unwrap()
}

#[test]
fn sampling_is_reproducible_and_order_independent() {
    let op = op16();
    let mut bundle = small_bundle(6);
    // Give the decoder a z-dependent output so draws differ.
    let last = bundle.recurrent().net.last_param_layer().unwrap();
    let name = bundle.recurrent().net.weight_name(last);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for v in bundle.params_mut().get_mut(&name).unwrap().data_mut() {
        *v = 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    let y = observation(&op, 9);
    let a = sample_posterior(&bundle, &y, 100.0, &op, 6, 17, &Sequential).unwrap();
    let b = sample_posterior(&bundle, &y, 100.0, &op, 6, 17, &Reversed).unwrap();
    let c = sample_posterior(&bundle, &y, 100.0, &op, 6, 18, &Sequential).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.samples, c.samples);
    assert_eq!(a.count(), 6);
    assert_ne!(a.samples[0], a.samples[1]);
    let (mean, var) = estimate_stats(&a.samples, a.beta).unwrap();
    assert_eq!((mean, var), (a.mean.clone(), a.variance.clone()));
    assert!(a.variance.as_slice().iter().all(|v| *v >= a.beta - 1e-12));
}

#[test]
fn degenerate_decoder_returns_backprojection_with_floor_variance() {
    let op = op16();
    let bundle = small_bundle(0);
    let y = observation(&op, 2);
    let s = sample_posterior(&bundle, &y, 100.0, &op, 5, 3, &Sequential).unwrap();
    let x0 = op.adjoint(&y).unwrap();
    let scale = x0.max();
    for sample in &s.samples {
        for (a, b) in sample.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
    assert!(s.variance.as_slice().iter().all(|v| *v == bundle.beta()));
}

#[test]
fn sampling_rejects_bad_arguments() {
    let op = op16();
    let bundle = small_bundle(0);
    let y = observation(&op, 2);
    assert!(sample_posterior(&bundle, &y, 1.0, &op, 0, 0, &Sequential).is_err());
    assert!(sample_posterior(&bundle, &y, 0.0, &op, 1, 0, &Sequential).is_err());
    let wrong = Image::zeros(3, 3);
    assert!(sample_posterior(&bundle, &wrong, 1.0, &op, 1, 0, &Sequential).is_err());
}

#[test]
fn draw_streams_are_distinct() {
    use rand::RngCore;
    let a = draw_rng(1, 0).next_u64();
    assert_eq!(a, draw_rng(1, 0).next_u64());
    assert_ne!(a, draw_rng(1, 1).next_u64());
    assert_ne!(a, draw_rng(2, 0).next_u64());
}

#[test]
fn single_sample_has_floor_variance() {
    let x = Image::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 2.5);
    let (mean, var) = estimate_stats(std::slice::from_ref(&x), 0.3).unwrap();
    assert_eq!(mean, x);
    assert!(var.as_slice().iter().all(|v| *v == 0.3));
    assert!(estimate_stats(&[], 0.1).is_err());
    assert!(estimate_stats(&[Image::zeros(2, 2), Image::zeros(2, 3)], 0.1).is_err());
}

#[test]
fn two_point_mixture_matches_exact_formula() {
    let beta = 5e-3;
    let a = Image::from_fn(4, 4, |r, c| (r as f64 - c as f64) * 0.7);
    let b = Image::from_fn(4, 4, |r, c| (r * c) as f64 * 0.2 + 1.0);
    let samples = vec![a.clone(), b.clone(), b.clone(), a.clone()];
    let (mean, var) = estimate_stats(&samples, beta).unwrap();
    for i in 0..16 {
        let (xa, xb) = (a.as_slice()[i], b.as_slice()[i]);
        let m = 0.5 * (xa + xb);
        let v = beta + 0.25 * (xa - xb) * (xa - xb);
        assert!((mean.as_slice()[i] - m).abs() < 1e-12);
        assert!((var.as_slice()[i] - v).abs() < 1e-12);
    }
}

#[test]
fn enumeration_over_discrete_latent_matches_population_moments() {
    // z takes four values with probabilities 1/8, 3/8, 1/4, 1/4; S = 8 draws
    // holding each value in proportion is an exact enumeration.
    let beta = 0.01;
    let decoder = |z: usize| Image::from_fn(2, 3, |r, c| ((z + 1) as f64).powi(2) * 0.1 - (r + 2 * c) as f64 * z as f64);
    let probs = [1.0 / 8.0, 3.0 / 8.0, 0.25, 0.25];
    let counts = [1, 3, 2, 2];
    let samples: Vec<Image> = counts.iter().enumerate().flat_map(|(z, &n)| vec![decoder(z); n]).collect();
    let (mean, var) = estimate_stats(&samples, beta).unwrap();
    for i in 0..6 {
        let m: f64 = (0..4).map(|z| probs[z] * decoder(z).as_slice()[i]).sum();
        let second: f64 = (0..4).map(|z| probs[z] * decoder(z).as_slice()[i].powi(2)).sum();
        assert!((mean.as_slice()[i] - m).abs() < 1e-12);
        assert!((var.as_slice()[i] - (beta + second - m * m)).abs() < 1e-12);
    }
}

#[test]
fn gaussian_scatter_variance_converges() {
    let (beta, sigma) = (5e-3, 0.3);
    let c = Image::from_fn(2, 2, |r, col| 1.0 + r as f64 - col as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<Image> = (0..100_000)
        .map(|_| {
            let noise: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            c.zip_map(&Image::from_vec(2, 2, noise).unwrap(), |v, e| v + sigma * e).unwrap()
        })
        .collect();
    let (_, var) = estimate_stats(&samples, beta).unwrap();
    let target = beta + sigma * sigma;
    for v in var.as_slice() {
        assert!((v - target).abs() / target < 0.02, "{v} vs {target}");
    }
}

#[test]
fn covariance_diagonal_matches_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Image> = (0..7)
        .map(|_| Image::from_fn(3, 3, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
        .collect();
    let cov = estimate_covariance(&samples, 0.2).unwrap();
    let (_, var) = estimate_stats(&samples, 0.2).unwrap();
    for i in 0..9 {
        assert!((cov[i * 9 + i] - var.as_slice()[i]).abs() < 1e-12);
        for j in 0..9 {
            assert_eq!(cov[i * 9 + j], cov[j * 9 + i]);
        }
    }
    let side = (MAX_COVARIANCE_PIXELS as f64).sqrt() as usize + 1;
    assert!(estimate_covariance(&[Image::zeros(side, side)], 0.1).is_err());
}

proptest! {
    #[test]
    fn stats_match_direct_second_moment(
        data in proptest::collection::vec(-50.0f64..50.0, 6 * 5),
        beta in 0.0f64..1.0,
    ) {
        let samples: Vec<Image> = data.chunks(6).map(|c| Image::from_vec(2, 3, c.to_vec()).unwrap()).collect();
        let (mean, var) = estimate_stats(&samples, beta).unwrap();
        let n = samples.len() as f64;
        for i in 0..6 {
            let m: f64 = samples.iter().map(|s| s.as_slice()[i]).sum::<f64>() / n;
            let sq: f64 = samples.iter().map(|s| s.as_slice()[i].powi(2)).sum::<f64>() / n;
            prop_assert!((mean.as_slice()[i] - m).abs() < 1e-12);
            prop_assert!((var.as_slice()[i] - (beta + sq - m * m)).abs() < 1e-12 * (1.0 + sq));
            prop_assert!(var.as_slice()[i] >= beta - 1e-12);
        }
    }
}
