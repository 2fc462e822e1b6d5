use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tomocvae_core::toyval::{
    histogram_distance, mode_coverage, sample_mixture, toy_train, HistogramGrid, MixtureSpec, Point, ToyConfig,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn ring_layout() {
    let spec = MixtureSpec::ring(7, 5.0, 0.25);
    spec.validate().unwrap();
    assert_eq!(spec.means.len(), 7);
    for m in &spec.means {
        assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 5.0).abs() < 1e-12);
    }
    assert!(spec.weights.iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-15));
    assert_eq!(spec.nearest_component([5.1, 0.2]), 0);
}

#[test]
fn invalid_mixtures_are_rejected() {
    let mut s = MixtureSpec::ring(3, 1.0, 1.0);
    s.weights = vec![0.5, 0.5, 0.5];
    assert!(s.validate().is_err());
    let mut s = MixtureSpec::ring(3, 1.0, 1.0);
    s.covariances[1] = [[1.0, 2.0], [2.0, 1.0]];
    assert!(s.validate().is_err());
    let mut s = MixtureSpec::ring(3, 1.0, 1.0);
    s.covariances.pop();
    assert!(s.validate().is_err());
    assert!(MixtureSpec::ring(0, 1.0, 1.0).validate().is_err());
}

#[test]
fn degenerate_component_samples_its_mean() {
    let spec = MixtureSpec { means: vec![[1.5, -2.0]], covariances: vec![[[0.0; 2]; 2]], weights: vec![1.0] };
    let pts = sample_mixture(&spec, 100, &mut rng(0)).unwrap();
    assert!(pts.iter().all(|p| *p == [1.5, -2.0]));
}

#[test]
fn component_frequencies_follow_weights() {
    let weights = [0.1, 0.2, 0.3, 0.4];
    let spec = MixtureSpec {
        means: vec![[-100.0, 0.0], [100.0, 0.0], [0.0, -100.0], [0.0, 100.0]],
        covariances: vec![[[1.0, 0.3], [0.3, 2.0]]; 4],
        weights: weights.to_vec(),
    };
    let n = 100_000;
    let pts = sample_mixture(&spec, n, &mut rng(1)).unwrap();
    let freq = mode_coverage(&spec, &pts).unwrap();
    for (f, w) in freq.iter().zip(weights) {
        let sd = (w * (1.0 - w) / n as f64).sqrt();
        assert!((f - w).abs() < 3.0 * sd, "{f} vs {w}");
    }
}

#[test]
fn component_covariance_is_reproduced() {
    let c = [[1.0, 0.6], [0.6, 0.5]];
    let spec = MixtureSpec { means: vec![[0.0, 0.0]], covariances: vec![c], weights: vec![1.0] };
    let pts = sample_mixture(&spec, 200_000, &mut rng(2)).unwrap();
    let n = pts.len() as f64;
    let mut s = [[0.0; 2]; 2];
    for p in &pts {
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += p[i] * p[j] / n;
            }
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            assert!((s[i][j] - c[i][j]).abs() < 0.01, "{s:?}");
        }
    }
}

#[test]
fn histogram_distance_limits() {
    let spec = MixtureSpec::ring(7, 5.0, 0.25);
    let a = sample_mixture(&spec, 100_000, &mut rng(3)).unwrap();
    let b = sample_mixture(&spec, 100_000, &mut rng(4)).unwrap();
    let grid = HistogramGrid::bounding(&a, &b, 50).unwrap();
    assert_eq!(histogram_distance(&a, &a, &grid).unwrap(), 0.0);
    let d = histogram_distance(&a, &b, &grid).unwrap();
    assert!(d < 0.05, "{d}");
    let far: Vec<Point> = a.iter().map(|p| [p[0] + 100.0, p[1]]).collect();
    let grid = HistogramGrid::bounding(&a, &far, 50).unwrap();
    assert_eq!(histogram_distance(&a, &far, &grid).unwrap(), 1.0);
}

#[test]
fn points_outside_the_grid_count_as_mismatch() {
    let grid = HistogramGrid { min: [0.0, 0.0], max: [1.0, 1.0], bins: 20 };
    let inside = vec![[0.5, 0.5]; 10];
    let outside = vec![[5.0, 5.0]; 10];
    assert_eq!(histogram_distance(&inside, &outside, &grid).unwrap(), 1.0);
    assert_eq!(grid.cell([1.0, 1.0]), Some(399));
    assert_eq!(grid.cell([-0.1, 0.5]), None);
}

#[test]
fn histogram_argument_errors() {
    let p = vec![[0.0, 0.0]];
    let grid = HistogramGrid::bounding(&p, &p, 19).unwrap();
    assert!(histogram_distance(&p, &p, &grid).is_err());
    let grid = HistogramGrid::bounding(&p, &p, 20).unwrap();
    assert!(histogram_distance(&p, &[], &grid).is_err());
    assert!(HistogramGrid::bounding(&[], &p, 20).is_err());
    assert!(mode_coverage(&MixtureSpec::ring(3, 1.0, 1.0), &[]).is_err());
}

proptest! {
    #[test]
    fn histogram_distance_symmetric_and_bounded(
        a in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60),
        b in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60),
        bins in 20usize..40,
    ) {
        let a: Vec<Point> = a.into_iter().map(|(x, y)| [x, y]).collect();
        let b: Vec<Point> = b.into_iter().map(|(x, y)| [x, y]).collect();
        let grid = HistogramGrid::bounding(&a, &b, bins).unwrap();
        let d = histogram_distance(&a, &b, &grid).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - histogram_distance(&b, &a, &grid).unwrap()).abs() < 1e-12);
        let cov = mode_coverage(&MixtureSpec::ring(5, 2.0, 0.1), &a).unwrap();
        prop_assert!((cov.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn tiny_config() -> ToyConfig {
    ToyConfig { hidden: 16, train_points: 400, batch_size: 50, ..ToyConfig::default() }
}

#[test]
fn untrained_model_samples_are_finite() {
    let spec = MixtureSpec::ring(7, 5.0, 0.25);
    let (model, trace) = toy_train(&spec, tiny_config(), 0, 0).unwrap();
    assert!(trace.is_empty());
    let pts = model.sample(5000, &mut rng(5)).unwrap();
    assert_eq!(pts.len(), 5000);
    assert!(pts.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
}

#[test]
fn short_training_lowers_loss_and_is_reproducible() {
    let spec = MixtureSpec::ring(7, 5.0, 0.25);
    let (model, trace) = toy_train(&spec, tiny_config(), 30, 6).unwrap();
    assert_eq!(trace.len(), 30 * 8);
    assert!(trace.iter().all(|l| l.is_finite()));
    let head: f64 = trace[..16].iter().sum();
    let tail: f64 = trace[trace.len() - 16..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
    let (again, trace2) = toy_train(&spec, tiny_config(), 30, 6).unwrap();
    assert_eq!(trace, trace2);
    assert_eq!(model.sample(10, &mut rng(1)).unwrap(), again.sample(10, &mut rng(1)).unwrap());
}

#[test]
fn toy_config_validation() {
    assert!(ToyConfig { latent_dim: 0, ..ToyConfig::default() }.validate().is_err());
    assert!(ToyConfig { beta: 0.0, ..ToyConfig::default() }.validate().is_err());
    assert!(ToyConfig { final_lr: Some(0.0), ..ToyConfig::default() }.validate().is_err());
    assert_eq!(ToyConfig::default().latent_dim, 2);
    assert_eq!(ToyConfig::default().beta, 1e-2);
}
