use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomocvae_core::linop::{estimate_norm, trace_ray, DenseOperator};
use tomocvae_core::{Grid, LinearOperator, OperatorGeometry, RadonTransform};

/// Length of the segment of the line `p . (cos t, sin t) = s` inside the
/// axis-aligned box `[x0, x1] x [y0, y1]` (Liang-Barsky clipping).
fn clip_length(angle: f64, s: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let (sin, cos) = angle.sin_cos();
    let (px, py) = (s * cos, s * sin);
    let (dx, dy) = (-sin, cos);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, d, a, b) in [(px, dx, x0, x1), (py, dy, y0, y1)] {
        if d.abs() < 1e-12 {
            if p < a || p > b {
                return 0.0;
            }
        } else {
            let (t0, t1) = ((a - p) / d, (b - p) / d);
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
    }
    (hi - lo).max(0.0)
}

/// Brute-force system matrix: clip every ray against every pixel box.
fn brute_force_matrix(g: &OperatorGeometry) -> Vec<f64> {
    let (h, w) = (g.image_height, g.image_width);
    let mut m = Vec::new();
    for angle in g.angles() {
        for bin in 0..g.num_bins {
            let s = g.bin_offset(bin);
            for r in 0..h {
                for c in 0..w {
                    let x0 = c as f64 - w as f64 / 2.0;
                    let y1 = h as f64 / 2.0 - r as f64;
                    m.push(clip_length(angle, s, x0, x0 + 1.0, y1 - 1.0, y1));
                }
            }
        }
    }
    m
}

fn random_grid(rng: &mut impl Rng, shape: (usize, usize)) -> Grid {
    Grid::from_fn(shape.0, shape.1, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn full_size_shapes() {
    let g = OperatorGeometry::covering(128, 128, 30);
    assert_eq!(g.num_bins, 183);
    let op = RadonTransform::new(g).unwrap();
    assert_eq!(op.domain_shape(), (128, 128));
    assert_eq!(op.range_shape(), (30, 183));
}

#[test]
fn invalid_geometry_rejected() {
    assert!(RadonTransform::new(OperatorGeometry::new(1, 8, 4, 9)).is_err());
    assert!(RadonTransform::new(OperatorGeometry::new(8, 8, 0, 9)).is_err());
    assert!(RadonTransform::new(OperatorGeometry::new(8, 8, 4, 0)).is_err());
    let mut g = OperatorGeometry::new(8, 8, 4, 9);
    g.bin_spacing = -1.0;
    assert!(RadonTransform::new(g).is_err());
}

#[test]
fn forward_matches_brute_force_clipping() {
    // Non-integer spacing keeps rays off pixel edges, where the half-open
    // assignment and closed-box clipping legitimately differ.
    let mut g = OperatorGeometry::new(7, 9, 5, 15);
    g.bin_spacing = 0.8137;
    let op = RadonTransform::unnormalized(g.clone()).unwrap();
    let dense = DenseOperator::assemble(&op);
    let oracle = brute_force_matrix(&g);
    for (a, b) in dense.matrix().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn centre_pixel_single_dominant_bin() {
    let g = OperatorGeometry::covering(9, 9, 4);
    let op = RadonTransform::unnormalized(g.clone()).unwrap();
    let mut x = Grid::zeros(9, 9);
    x.set(4, 4, 1.0);
    let y = op.apply(&x).unwrap();
    for (a, angle) in g.angles().into_iter().enumerate() {
        let row = y.row(a);
        let nonzero: Vec<usize> = (0..row.len()).filter(|&b| row[b] > 1e-12).collect();
        assert_eq!(nonzero.len(), 1, "angle {a}: {row:?}");
        let b = nonzero[0];
        let expected = clip_length(angle, g.bin_offset(b), -0.5, 0.5, -0.5, 0.5);
        assert!((row[b] - expected).abs() < 1e-12);
        assert_eq!(b, g.num_bins / 2);
    }
}

#[test]
fn zero_in_zero_out() {
    let op = RadonTransform::new(OperatorGeometry::covering(16, 16, 8)).unwrap();
    assert!(op.apply(&Grid::zeros(16, 16)).unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(op.adjoint(&Grid::zeros(8, 23)).unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(op.apply(&Grid::zeros(16, 15)).is_err());
    assert!(op.adjoint(&Grid::zeros(8, 22)).is_err());
}

#[test]
fn linearity() {
    let op = RadonTransform::new(OperatorGeometry::covering(16, 16, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_grid(&mut rng, (16, 16));
    let w = random_grid(&mut rng, (16, 16));
    let (a, b) = (1.7, -0.3);
    let lhs = op.apply(&x.zip_map(&w, |p, q| a * p + b * q).unwrap()).unwrap();
    let rhs = op
        .apply(&x)
        .unwrap()
        .zip_map(&op.apply(&w).unwrap(), |p, q| a * p + b * q)
        .unwrap();
    let err = lhs.zip_map(&rhs, |p, q| p - q).unwrap().norm() / rhs.norm();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn uniform_disk_is_rotation_invariant() {
    let n = 48;
    let op = RadonTransform::new(OperatorGeometry::covering(n, n, 12)).unwrap();
    let c = n as f64 / 2.0;
    let disk = Grid::from_fn(n, n, |r, col| {
        let (dx, dy) = (col as f64 + 0.5 - c, r as f64 + 0.5 - c);
        if dx * dx + dy * dy <= 15.0 * 15.0 {
            1.0
        } else {
            0.0
        }
    });
    let y = op.apply(&disk).unwrap();
    let reference = y.row(0).to_vec();
    let total: f64 = reference.iter().sum();
    for a in 1..12 {
        // Ray sums sample the projection, so mass and profile agree only up
        // to pixelation.
        let row = y.row(a);
        assert!((row.iter().sum::<f64>() - total).abs() < 0.02 * total);
        // A staircase rim can shift a chord by up to one pixel diagonal at
        // each end.
        let tol = 2.0 * 2f64.sqrt() * op.normalization_scale();
        for (p, q) in row.iter().zip(&reference) {
            assert!((p - q).abs() < tol, "angle {a}: {p} vs {q}");
        }
    }
}

#[test]
fn adjoint_identity_random_pairs() {
    let op = RadonTransform::new(OperatorGeometry::covering(32, 32, 16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let x = random_grid(&mut rng, op.domain_shape());
        let y = random_grid(&mut rng, op.range_shape());
        let ax = op.apply(&x).unwrap();
        let aty = op.adjoint(&y).unwrap();
        let mismatch = (ax.dot(&y) - x.dot(&aty)).abs() / (ax.norm() * y.norm() + 1e-30);
        assert!(mismatch < 1e-6, "{mismatch}");
    }
}

#[test]
fn dense_equivalence_and_transpose() {
    let op = RadonTransform::new(OperatorGeometry::covering(8, 8, 6)).unwrap();
    let dense = DenseOperator::assemble(&op);
    let (m, n) = (6 * op.range_shape().1, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = random_grid(&mut rng, op.range_shape());
    let aty = op.adjoint(&y).unwrap();
    for j in 0..n {
        let expected: f64 = (0..m).map(|i| dense.entry(i, j) * y.as_slice()[i]).sum();
        assert!((aty.as_slice()[j] - expected).abs() < 1e-10);
    }
    // Row i of the adjoint matrix is column i of the forward matrix.
    let adj_dense = {
        let mut e = Grid::zeros(op.range_shape().0, op.range_shape().1);
        let mut cols = vec![0.0; m * n];
        for i in 0..m {
            e.as_mut_slice()[i] = 1.0;
            let col = op.adjoint(&e).unwrap();
            e.as_mut_slice()[i] = 0.0;
            for j in 0..n {
                cols[i * n + j] = col.as_slice()[j];
            }
        }
        cols
    };
    for (a, b) in adj_dense.iter().zip(dense.matrix()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn one_hot_backprojection_traces_the_ray() {
    let g = OperatorGeometry::covering(12, 12, 6);
    let op = RadonTransform::unnormalized(g.clone()).unwrap();
    let (a, b) = (2, 9);
    let mut y = Grid::zeros(6, g.num_bins);
    y.set(a, b, 1.0);
    let bp = op.adjoint(&y).unwrap();
    let mut expected = vec![0.0; 144];
    for (idx, len) in trace_ray(12, 12, g.angles()[a], g.bin_offset(b)) {
        expected[idx] += len;
    }
    assert_eq!(bp.as_slice(), &expected[..]);
}

#[test]
fn nonnegativity_preserved() {
    let op = RadonTransform::new(OperatorGeometry::covering(16, 16, 10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Grid::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0));
    assert!(op.apply(&x).unwrap().min() >= 0.0);
    let y = Grid::from_fn(10, op.range_shape().1, |_, _| rng.random_range(0.0..1.0));
    assert!(op.adjoint(&y).unwrap().min() >= 0.0);
}

/// Largest singular value from the dense matrix by Jacobi eigenvalues of A^T A.
fn dense_top_singular_value(a: &[f64], m: usize, n: usize) -> f64 {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..m).map(|k| a[k * n + i] * a[k * n + j]).sum();
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                off += apq * apq;
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[k * n + p];
                    let skq = s[k * n + q];
                    s[k * n + p] = c * skp - sn * skq;
                    s[k * n + q] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[p * n + k];
                    let sqk = s[q * n + k];
                    s[p * n + k] = c * spk - sn * sqk;
                    s[q * n + k] = sn * spk + c * sqk;
                }
            }
        }
        if off < 1e-24 {
            break;
        }
    }
    (0..n).map(|i| s[i * n + i]).fold(0.0, f64::max).sqrt()
}

#[test]
fn normalized_norm_matches_dense_svd() {
    let op = RadonTransform::new(OperatorGeometry::covering(8, 8, 6)).unwrap();
    let dense = DenseOperator::assemble(&op);
    let m = op.range_shape().0 * op.range_shape().1;
    let sigma = dense_top_singular_value(dense.matrix(), m, 64);
    assert!((sigma - 1.0).abs() < 1e-2, "{sigma}");
    let est = estimate_norm(&op, 50);
    assert!((0.99..=1.01).contains(&est), "{est}");
}

#[test]
fn norm_estimate_properties() {
    let id = DenseOperator::new((1, 1), (1, 1), vec![1.0]).unwrap();
    assert!((estimate_norm(&id, 1) - 1.0).abs() < 1e-15);

    let op = RadonTransform::new(OperatorGeometry::covering(16, 16, 8)).unwrap();
    let mut prev = 0.0;
    for it in 1..30 {
        let e = estimate_norm(&op, it);
        assert!(e >= prev - 1e-14, "{it}: {e} < {prev}");
        prev = e;
    }
    let doubled = op.with_scale(2.0 * op.normalization_scale());
    let ratio = estimate_norm(&doubled, 50) / estimate_norm(&op, 50);
    assert!((ratio - 2.0).abs() < 1e-12);
}
