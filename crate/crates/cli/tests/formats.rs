use proptest::prelude::*;
use tempfile::tempdir;
use tomocvae::checkpoint::{self, Checkpoint};
use tomocvae::gridio::{self, Array};
use tomocvae::report::{ArchiveSummary, SampleArchive};
use tomocvae_core::autodiff::{adam_step, AdamConfig, Gradients, Tensor};
use tomocvae_core::cvae::{ModelBundle, ModelConfig};
use tomocvae_core::Grid;

#[test]
fn grid_header_layout() {
    let bytes = gridio::encode(&Array { dims: vec![1, 2], data: vec![1.0, -2.0] }).unwrap();
    let mut want = b"TGRD".to_vec();
    want.extend_from_slice(&1u16.to_le_bytes());
    want.push(1);
    want.push(2);
    want.extend_from_slice(&1u64.to_le_bytes());
    want.extend_from_slice(&2u64.to_le_bytes());
    want.extend_from_slice(&1.0f64.to_le_bytes());
    want.extend_from_slice(&(-2.0f64).to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn malformed_grids_are_rejected() {
    let good = gridio::encode(&Array { dims: vec![2, 2], data: vec![0.0; 4] }).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(format!("{:#}", gridio::decode(&bad_magic).unwrap_err()).contains("magic"));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(format!("{:#}", gridio::decode(&bad_version).unwrap_err()).contains("version"));
    let mut bad_dtype = good.clone();
    bad_dtype[6] = 2;
    assert!(gridio::decode(&bad_dtype).is_err());
    assert!(gridio::decode(&good[..good.len() - 1]).is_err());
    let mut long = good.clone();
    long.push(0);
    assert!(gridio::decode(&long).is_err());
    assert!(gridio::decode(&good[..6]).is_err());
    assert!(gridio::encode(&Array { dims: vec![3], data: vec![0.0; 2] }).is_err());
}

#[test]
fn grid_and_stack_files() {
    let dir = tempdir().unwrap();
    let g = Grid::from_fn(3, 5, |r, c| r as f64 - 0.25 * c as f64);
    let p = dir.path().join("a/b/g.tgrd");
    gridio::write_grid(&p, &g).unwrap();
    assert_eq!(gridio::read_grid(&p).unwrap(), g);
    assert!(gridio::read_stack(&p).is_err());
    let stack = vec![g.clone(), g.scaled(2.0)];
    let s = dir.path().join("s.tgrd");
    gridio::write_stack(&s, &stack).unwrap();
    assert_eq!(gridio::read_stack(&s).unwrap(), stack);
    assert!(gridio::read_grid(&s).is_err());
    assert!(gridio::write_stack(&s, &[g.clone(), Grid::zeros(2, 2)]).is_err());
}

#[test]
fn phantom_files() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("p.tgrd");
    let g = Grid::from_fn(4, 4, |r, c| (r * c) as f64);
    gridio::write_grid(&p, &g).unwrap();
    let ph = gridio::load_phantom_file(&p, 1e4).unwrap();
    assert_eq!(ph.image.max(), 1e4);
    for (a, b) in ph.image.as_slice().iter().zip(g.as_slice()) {
        assert!((a - b * 1e4 / 9.0).abs() <= 1e-12 * 1e4);
    }
    gridio::write_grid(&p, &Grid::zeros(4, 4)).unwrap();
    assert!(gridio::load_phantom_file(&p, 1.0).is_err());
    gridio::write_grid(&p, &Grid::filled(4, 4, -1.0)).unwrap();
    assert!(gridio::load_phantom_file(&p, 1.0).is_err());
    assert!(gridio::load_phantom_file(&dir.path().join("missing.tgrd"), 1.0).is_err());
    std::fs::write(&p, b"not a grid").unwrap();
    assert!(gridio::load_phantom_file(&p, 1.0).is_err());
}

proptest! {
    #[test]
    fn grid_roundtrip_is_bitwise(
        rows in 1usize..6,
        cols in 1usize..6,
        bits in proptest::collection::vec(any::<u64>(), 36),
    ) {
        let data: Vec<f64> = bits[..rows * cols].iter().map(|b| f64::from_bits(*b)).collect();
        let a = Array { dims: vec![rows, cols], data };
        let back = gridio::decode(&gridio::encode(&a).unwrap()).unwrap();
        prop_assert_eq!(&back.dims, &a.dims);
        let same = back.data.iter().zip(&a.data).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
    }
}

fn trained_checkpoint() -> Checkpoint {
    let config = ModelConfig { hidden_channels: 4, encoder_channels: 4, latent_dim: 2, iterations: 2, ..Default::default() };
    let mut bundle = ModelBundle::new(config, 5).unwrap();
    let mut grads = Gradients::zeros_like(bundle.params());
    for (k, (name, _)) in bundle.params().iter().enumerate() {
        let t = grads.get_mut(name).unwrap();
        let shape = t.shape();
        *t = Tensor::filled(shape, 0.1 * (k as f64 + 1.0).sqrt());
    }
    for _ in 0..3 {
        adam_step(bundle.params_mut(), &grads, &AdamConfig::default()).unwrap();
    }
    Checkpoint {
        kind: "cvae".into(),
        config: serde_json::to_value(bundle.config()).unwrap(),
        batches_done: 3,
        params: bundle.params().clone(),
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let ck = trained_checkpoint();
    assert_eq!(ck.params.step(), 3);
    let bytes = checkpoint::encode(&ck).unwrap();
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    let config: ModelConfig = serde_json::from_value(back.config.clone()).unwrap();
    let bundle = ModelBundle::from_parts(config, back.params).unwrap();
    assert_eq!(bundle.params(), &ck.params);

    let dir = tempdir().unwrap();
    let p = dir.path().join("m.tckp");
    checkpoint::save(&p, &ck).unwrap();
    assert_eq!(checkpoint::load_kind(&p, "cvae").unwrap(), ck);
    assert!(checkpoint::load_kind(&p, "lgd").is_err());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&trained_checkpoint()).unwrap();
    let mut version = bytes.clone();
    version[4] = 2;
    let e = format!("{:#}", checkpoint::decode(&version).unwrap_err());
    assert!(e.contains("version 2"), "{e}");
    let mut header = bytes.clone();
    header[15] = b'#';
    let e = format!("{:#}", checkpoint::decode(&header).unwrap_err());
    assert!(e.contains("corrupted checkpoint header"), "{e}");
    assert!(checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(checkpoint::decode(&long).is_err());
    let mut magic = bytes;
    magic[..4].copy_from_slice(b"TGRD");
    assert!(checkpoint::decode(&magic).is_err());
}

#[test]
fn sample_archive_roundtrip() {
    let dir = tempdir().unwrap();
    let samples: Vec<Grid> = (0..4).map(|k| Grid::filled(3, 2, k as f64)).collect();
    let a = SampleArchive {
        summary: ArchiveSummary {
            seed: 3,
            samples: 4,
            iterations: 10,
            beta: 5e-3,
            latent_dim: 6,
            count_level: 1e2,
            scale: 1e2,
            phantom: 0,
            stored_samples: true,
        },
        samples,
        mean: Grid::filled(3, 2, 1.5),
        variance: Grid::filled(3, 2, 1.25 + 5e-3),
    };
    let files = a.write(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    assert_eq!(SampleArchive::read(dir.path()).unwrap(), a);
}
