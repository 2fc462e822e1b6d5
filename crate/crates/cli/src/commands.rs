//! The experiment commands. Each reads its inputs from and writes its
//! artifacts under `output.dir`, finishing with a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tomocvae_core::baselines::{
    gm3_predict, gm3_train, lgd_reconstruct, lgd_train, mlem, tv_reconstruct, Gm3Bundle, LgdModel, TvConfig,
};
use tomocvae_core::cvae::ModelBundle;
use tomocvae_core::data::{
    generate_ellipse_phantom, insert_tumour, make_training_stream, poissonize, Phantom, StreamConfig,
};
use tomocvae_core::engine::{sample_posterior, train};
use tomocvae_core::metrics::{compare_methods, cross_section, hpd_band_from, ReconstructionSet};
use tomocvae_core::toyval::{histogram_distance, mode_coverage, sample_mixture, toy_train, HistogramGrid};
use tomocvae_core::{Image, LinearOperator, RadonTransform};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ExperimentConfig, Method};
use crate::gridio::{self, Array};
use crate::manifest::Manifest;
use crate::par::Rayon;
use crate::report::{self, ArchiveSummary, SampleArchive};

pub const CVAE: &str = "cvae";
pub const X0: &str = "x0";
pub const MODEL_FILE: &str = "model.tckp";

/// Independent seed for item `index` of purpose `purpose` under `base`.
pub fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(purpose);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

/// Directory label of a count level, e.g. `peak_1e2`.
pub fn peak_label(peak: f64) -> String {
    format!("peak_{peak:e}")
}

/// Paths of the artifact tree rooted at `output.dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout { root: cfg.output.dir.clone() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn phantom(&self, peak: f64, i: usize) -> PathBuf {
        self.data().join(peak_label(peak)).join(format!("phantom_{i:03}.tgrd"))
    }

    pub fn sinogram(&self, peak: f64, i: usize) -> PathBuf {
        self.data().join(peak_label(peak)).join(format!("sinogram_{i:03}.tgrd"))
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn model(&self) -> PathBuf {
        self.train().join(MODEL_FILE)
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn archive(&self, peak: f64, i: usize) -> PathBuf {
        self.samples().join(peak_label(peak)).join(format!("phantom_{i:03}"))
    }

    pub fn baselines(&self) -> PathBuf {
        self.root.join("baselines")
    }

    pub fn reconstruction(&self, method: &str, peak: f64, i: usize) -> PathBuf {
        self.baselines().join(method).join(peak_label(peak)).join(format!("phantom_{i:03}.tgrd"))
    }

    pub fn baseline_variance(&self, method: &str, peak: f64, i: usize) -> PathBuf {
        self.baselines().join(method).join(peak_label(peak)).join(format!("variance_{i:03}.tgrd"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn toy(&self) -> PathBuf {
        self.root.join("toy")
    }
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing input: {what} ({}); run `{producer}` first", path.display());
    }
    Ok(())
}

fn operator(cfg: &ExperimentConfig) -> Result<RadonTransform> {
    cfg.geometry.operator()
}

/// Test phantoms at unit peak, with tumours inserted.
pub fn test_phantoms(cfg: &ExperimentConfig) -> Result<Vec<Phantom>> {
    let (h, w) = (cfg.geometry.height, cfg.geometry.width);
    let d = &cfg.data;
    let mut out: Vec<Phantom> = if d.phantom_files.is_empty() {
        (0..d.test_phantoms)
            .map(|i| Ok(generate_ellipse_phantom(h, w, 1.0, derive_seed(d.test_seed, 0, i as u64))?))
            .collect::<Result<_>>()?
    } else {
        d.phantom_files
            .iter()
            .map(|p| {
                let ph = gridio::load_phantom_file(p, 1.0)?;
                ensure!(ph.image.shape() == (h, w), "{} is not {h}x{w}", p.display());
                Ok(ph)
            })
            .collect::<Result<_>>()?
    };
    for t in &d.tumours {
        out[t.phantom] = insert_tumour(&out[t.phantom], (t.center[0], t.center[1]), t.radius)
            .with_context(|| format!("inserting tumour into phantom {}", t.phantom))?;
    }
    Ok(out)
}

/// Writes phantoms and Poisson sinograms for every test count level.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let op = operator(cfg)?;
    let base = test_phantoms(cfg)?;
    let mut files = Vec::new();
    for (li, &peak) in cfg.data.test_peaks.iter().enumerate() {
        for (i, ph) in base.iter().enumerate() {
            let p = Phantom::calibrate(ph.image.clone(), peak, ph.provenance)?;
            let y = poissonize(&op.apply(&p.image)?, derive_seed(cfg.data.test_seed, 1 + li as u64, i as u64))?;
            let (pp, sp) = (layout.phantom(peak, i), layout.sinogram(peak, i));
            gridio::write_grid(&pp, &p.image)?;
            gridio::write_grid(&sp, &y)?;
            files.push(pp);
            files.push(sp);
        }
    }
    Manifest::new("generate", Some(cfg), &[("data.test_seed", cfg.data.test_seed)]).write(&layout.data(), &files)?;
    Ok(())
}

fn load_test_set(cfg: &ExperimentConfig, layout: &Layout, peak: f64) -> Result<Vec<(Image, Image)>> {
    (0..cfg.data.test_count())
        .map(|i| {
            let (pp, sp) = (layout.phantom(peak, i), layout.sinogram(peak, i));
            require(&pp, "test phantom", "generate")?;
            require(&sp, "test sinogram", "generate")?;
            Ok((gridio::read_grid(&pp)?, gridio::read_grid(&sp)?))
        })
        .collect()
}

fn stream_config(cfg: &ExperimentConfig) -> StreamConfig {
    StreamConfig {
        batch_size: cfg.data.batch_size,
        peaks: cfg.data.train_peaks.clone(),
        normalize: cfg.data.normalize,
    }
}

fn cvae_checkpoint(bundle: &ModelBundle, done: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: CVAE.into(),
        config: serde_json::to_value(bundle.config())?,
        batches_done: done,
        params: bundle.params().clone(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainFailureReport {
    batch_index: usize,
    error: String,
    batch_peaks: Vec<f64>,
}

/// Trains the cVAE, writing periodic checkpoints, the final model and the loss trace.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let dir = layout.train();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let op = operator(cfg)?;
    let ops: [&dyn LinearOperator; 1] = [&op];
    let stream = make_training_stream(stream_config(cfg), &op, cfg.data.seed)?;
    let mut bundle = ModelBundle::new(cfg.model.clone(), derive_seed(cfg.train.seed, 0, 0))?;
    let mut files = Vec::new();
    let result = train(&mut bundle, &cfg.train, stream, &ops, &Rayon, |done, b, _| {
        let path = dir.join(format!("checkpoint_{done:06}.tckp"));
        let ck = cvae_checkpoint(b, done).map_err(|e| tomocvae_core::Error::InvalidArgument(e.to_string()))?;
        checkpoint::save(&path, &ck).map_err(|e| tomocvae_core::Error::InvalidArgument(e.to_string()))?;
        files.push(path);
        Ok(())
    });
    let trace = match result {
        Ok(trace) => trace,
        Err(failure) => {
            report::write_loss_trace(&dir.join("loss.csv"), &failure.trace)?;
            let rep = TrainFailureReport {
                batch_index: failure.batch_index,
                error: failure.error.to_string(),
                batch_peaks: failure.batch.iter().map(|t| t.peak).collect(),
            };
            fs::write(dir.join("failure.json"), serde_json::to_string_pretty(&rep)?)?;
            bail!("{failure}");
        }
    };
    let loss = dir.join("loss.csv");
    report::write_loss_trace(&loss, &trace)?;
    files.push(loss);
    let model = layout.model();
    checkpoint::save(&model, &cvae_checkpoint(&bundle, cfg.train.batches)?)?;
    files.push(model);
    Manifest::new("train", Some(cfg), &[("data.seed", cfg.data.seed), ("train.seed", cfg.train.seed)])
        .write(&dir, &files)?;
    Ok(())
}

pub fn load_cvae(path: &Path) -> Result<(ModelBundle, usize)> {
    let ck = checkpoint::load_kind(path, CVAE)?;
    let config = serde_json::from_value(ck.config).context("checkpoint model configuration")?;
    Ok((ModelBundle::from_parts(config, ck.params)?, ck.batches_done))
}

/// Draws posterior samples for every test observation.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    require(&layout.model(), "trained model", "train")?;
    let (bundle, _) = load_cvae(&layout.model())?;
    let op = operator(cfg)?;
    let s = &cfg.sample;
    let mut files = Vec::new();
    for (li, &peak) in cfg.data.test_peaks.iter().enumerate() {
        let set = load_test_set(cfg, &layout, peak)?;
        for (i, (_, y)) in set.iter().enumerate() {
            let seed = derive_seed(s.seed, li as u64, i as u64);
            let scale = cfg.data.scale(peak);
            let post = sample_posterior(&bundle, y, scale, &op, s.samples, seed, &Rayon)?;
            let archive = SampleArchive {
                summary: ArchiveSummary {
                    seed,
                    samples: s.samples,
                    iterations: bundle.config().iterations,
                    beta: post.beta,
                    latent_dim: bundle.latent_dim(),
                    count_level: peak,
                    scale,
                    phantom: i,
                    stored_samples: s.keep_samples,
                },
                samples: if s.keep_samples { post.samples } else { Vec::new() },
                mean: post.mean,
                variance: post.variance,
            };
            files.extend(archive.write(&layout.archive(peak, i))?);
        }
    }
    Manifest::new("sample", Some(cfg), &[("sample.seed", s.seed)]).write(&layout.samples(), &files)?;
    Ok(())
}

fn learned_stream_seed(cfg: &ExperimentConfig, method: Method) -> u64 {
    derive_seed(cfg.data.seed, 100, method as u64)
}

/// Runs the baseline reconstructions (back-projection always, plus the
/// configured methods) on every test observation.
pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let op = operator(cfg)?;
    let ops: [&dyn LinearOperator; 1] = [&op];
    let b = &cfg.baselines;
    let mut files = Vec::new();
    let mut methods = b.methods.clone();
    methods.sort();
    methods.dedup();

    let lgd = if methods.contains(&Method::Lgd) {
        let stream = make_training_stream(stream_config(cfg), &op, learned_stream_seed(cfg, Method::Lgd))?;
        let (model, trace) = lgd_train(&b.lgd, stream, &ops, &Rayon)?;
        let dir = layout.baselines().join("lgd");
        let (m, l) = (dir.join(MODEL_FILE), dir.join("loss.csv"));
        checkpoint::save(&m, &Checkpoint {
            kind: "lgd".into(),
            config: serde_json::to_value(&b.lgd)?,
            batches_done: trace.len(),
            params: model.params.clone(),
        })?;
        report::write_plain_trace(&l, &trace)?;
        files.extend([m, l]);
        Some(model)
    } else {
        None
    };
    let gm3 = if methods.contains(&Method::Gm3) {
        let stream = make_training_stream(stream_config(cfg), &op, learned_stream_seed(cfg, Method::Gm3))?;
        let (bundle, traces) = gm3_train(&b.gm3, b.gm3_components, stream, &ops, &Rayon)?;
        let dir = layout.baselines().join("gm3");
        let m = dir.join(MODEL_FILE);
        checkpoint::save(&m, &Checkpoint {
            kind: "gm3".into(),
            config: serde_json::to_value(&b.gm3)?,
            batches_done: traces.iter().map(Vec::len).sum(),
            params: bundle.params.clone(),
        })?;
        files.push(m);
        for (k, t) in traces.iter().enumerate() {
            let l = dir.join(format!("loss_stage_{k}.csv"));
            report::write_plain_trace(&l, t)?;
            files.push(l);
        }
        Some(bundle)
    } else {
        None
    };

    for (li, &peak) in cfg.data.test_peaks.iter().enumerate() {
        let set = load_test_set(cfg, &layout, peak)?;
        let scale = cfg.data.scale(peak);
        let tv = TvConfig { alpha: b.tv.alpha[li], iterations: b.tv.iterations, tau: b.tv.tau, sigma: b.tv.sigma };
        for (i, (_, y)) in set.iter().enumerate() {
            let mut put = |method: &str, img: &Image| -> Result<()> {
                let p = layout.reconstruction(method, peak, i);
                gridio::write_grid(&p, img)?;
                files.push(p);
                Ok(())
            };
            put(X0, &op.adjoint(y)?)?;
            if methods.contains(&Method::Mlem) {
                put("mlem", &mlem(&op, y, &b.mlem)?)?;
            }
            if methods.contains(&Method::Tv) {
                put("tv", &tv_reconstruct(&op, y, &tv)?)?;
            }
            let yn = y.scaled(1.0 / scale);
            if let Some(model) = &lgd {
                put("lgd", &lgd_reconstruct(&op, &yn, model)?.scaled(scale))?;
            }
            if let Some(bundle) = &gm3 {
                let (mean, var) = gm3_predict(&op, &yn, bundle)?;
                put("gm3", &mean.scaled(scale))?;
                let p = layout.baseline_variance("gm3", peak, i);
                gridio::write_grid(&p, &var.scaled(scale * scale))?;
                files.push(p);
            }
        }
    }
    Manifest::new("baseline", Some(cfg), &[
        ("data.seed", cfg.data.seed),
        ("baselines.lgd.seed", b.lgd.seed),
        ("baselines.gm3.seed", b.gm3.seed),
    ])
    .write(&layout.baselines(), &files)?;
    Ok(())
}

/// Rebuilds a stored LGD model.
pub fn load_lgd(path: &Path) -> Result<LgdModel> {
    let ck = checkpoint::load_kind(path, "lgd")?;
    let config = serde_json::from_value(ck.config)?;
    let mut model = LgdModel::new(&config)?;
    ensure!(model.params.len() == ck.params.len(), "checkpoint does not match the LGD architecture");
    model.params = ck.params;
    Ok(model)
}

/// Rebuilds a stored GM3 ensemble with `components` members.
pub fn load_gm3(path: &Path, components: usize) -> Result<Gm3Bundle> {
    let ck = checkpoint::load_kind(path, "gm3")?;
    let config = serde_json::from_value(ck.config)?;
    let mut bundle = Gm3Bundle::new(&config, components)?;
    ensure!(bundle.params.len() == ck.params.len(), "checkpoint does not match the GM3 architecture");
    bundle.params = ck.params;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityCsvRow {
    pub phantom: usize,
    pub method: String,
    pub count_level: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCsvRow {
    pub method: String,
    pub count_level: f64,
    pub phantoms: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
}

/// Posterior variance statistics of one archive, in count units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub phantom: usize,
    pub count_level: f64,
    pub beta: f64,
    pub mean_variance: f64,
    /// Mean variance divided by the squared count level.
    pub relative_variance: f64,
    /// Mean of `variance - beta` where the phantom is zero.
    pub background_excess: Option<f64>,
    /// Mean of `variance - beta` where the phantom is positive.
    pub support_excess: Option<f64>,
}

fn excess_split(truth: &Image, var: &Image, beta: f64) -> (Option<f64>, Option<f64>) {
    let (mut bs, mut bn, mut ss, mut sn) = (0.0, 0usize, 0.0, 0usize);
    for (t, v) in truth.as_slice().iter().zip(var.as_slice()) {
        if *t == 0.0 {
            bs += v - beta;
            bn += 1;
        } else {
            ss += v - beta;
            sn += 1;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (avg(bs, bn), avg(ss, sn))
}

/// Scores every available reconstruction against the test phantoms and
/// extracts credible bands from the cVAE archives.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let n = cfg.data.test_count();
    let mut files = Vec::new();
    let mut sets = Vec::new();
    let mut phantoms: Option<Vec<Image>> = None;
    let mut uncertainty = Vec::new();
    let candidates = [X0, "mlem", "tv", "lgd", "gm3"];
    for &peak in &cfg.data.test_peaks {
        let truth: Vec<Image> = (0..n)
            .map(|i| {
                let p = layout.phantom(peak, i);
                require(&p, "test phantom", "generate")?;
                gridio::read_grid(&p)
            })
            .collect::<Result<_>>()?;
        if layout.archive(peak, 0).join(report::SUMMARY_FILE).exists() {
            let mut images = Vec::with_capacity(n);
            for (i, t) in truth.iter().enumerate() {
                let dir = layout.archive(peak, i);
                require(&dir.join(report::SUMMARY_FILE), "sample archive", "sample")?;
                let a = SampleArchive::read(&dir)?;
                let beta = a.summary.beta;
                let (background_excess, support_excess) = excess_split(t, &a.variance, beta);
                uncertainty.push(UncertaintyRow {
                    phantom: i,
                    count_level: peak,
                    beta,
                    mean_variance: a.variance.mean(),
                    relative_variance: a.variance.mean() / (peak * peak),
                    background_excess,
                    support_excess,
                });
                for &row in &cfg.hpd_rows() {
                    let band = hpd_band_from(&a.mean, &a.variance, beta, row, cfg.eval.hpd_level, cfg.eval.hpd_variant)?;
                    let p = layout
                        .eval()
                        .join("hpd")
                        .join(format!("{}_phantom_{i:03}_row_{row:03}.csv", peak_label(peak)));
                    report::write_band(&p, &band, Some(&cross_section(t, row)?))?;
                    files.push(p);
                }
                images.push(a.mean);
            }
            sets.push(ReconstructionSet { method: CVAE.into(), count_level: peak, images });
        }
        for m in candidates {
            if !layout.reconstruction(m, peak, 0).exists() {
                continue;
            }
            let images = (0..n)
                .map(|i| {
                    let p = layout.reconstruction(m, peak, i);
                    require(&p, "baseline reconstruction", "baseline")?;
                    gridio::read_grid(&p)
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push(ReconstructionSet { method: m.into(), count_level: peak, images });
        }
        if phantoms.is_none() {
            phantoms = Some(truth);
        }
    }
    if sets.is_empty() {
        bail!(
            "missing input: no reconstructions under {} or {}; run `sample` or `baseline` first",
            layout.samples().display(),
            layout.baselines().display()
        );
    }
    let report = compare_methods(phantoms.as_deref().expect("at least one test peak"), &sets)?;
    let rows: Vec<QualityCsvRow> = report
        .rows
        .iter()
        .map(|r| QualityCsvRow {
            phantom: r.phantom,
            method: r.method.clone(),
            count_level: r.count_level,
            ssim: r.ssim,
            psnr: r.psnr,
        })
        .collect();
    let summary: Vec<SummaryCsvRow> = report
        .aggregates()
        .into_iter()
        .map(|a| SummaryCsvRow {
            method: a.method,
            count_level: a.count_level,
            phantoms: a.phantoms,
            mean_ssim: a.mean_ssim,
            mean_psnr: a.mean_psnr,
        })
        .collect();
    let dir = layout.eval();
    let (q, s) = (dir.join("quality.csv"), dir.join("summary.csv"));
    report::write_csv(&q, &rows)?;
    report::write_csv(&s, &summary)?;
    files.extend([q, s]);
    if !uncertainty.is_empty() {
        let u = dir.join("uncertainty.csv");
        report::write_csv(&u, &uncertainty)?;
        files.push(u);
    }
    Manifest::new("eval", Some(cfg), &[]).write(&dir, &files)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub components: usize,
    pub samples: usize,
    pub bins: usize,
    pub batches: usize,
    pub histogram_distance: f64,
    pub mode_coverage: Vec<f64>,
    pub min_mode_coverage: f64,
}

/// Trains the toy model and compares its samples with the mixture.
pub fn cmd_toy(cfg: &ExperimentConfig) -> Result<ToyMetrics> {
    let layout = Layout::new(cfg);
    let t = &cfg.toy;
    let spec = t.mixture();
    let (model, trace) = toy_train(&spec, t.model.clone(), t.epochs, t.seed)?;
    let drawn = model.sample(t.samples, &mut ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 1, 0)))?;
    let truth = sample_mixture(&spec, t.samples, &mut ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 2, 0)))?;
    let grid = HistogramGrid::bounding(&drawn, &truth, t.bins)?;
    let coverage = mode_coverage(&spec, &drawn)?;
    let metrics = ToyMetrics {
        components: t.components,
        samples: t.samples,
        bins: t.bins,
        batches: trace.len(),
        histogram_distance: histogram_distance(&drawn, &truth, &grid)?,
        min_mode_coverage: coverage.iter().copied().fold(f64::INFINITY, f64::min),
        mode_coverage: coverage,
    };
    let dir = layout.toy();
    let mut files = Vec::new();
    let (sp, tp, lp) = (dir.join("samples.csv"), dir.join("truth.csv"), dir.join("loss.csv"));
    report::write_points(&sp, &drawn)?;
    report::write_points(&tp, &truth)?;
    report::write_plain_trace(&lp, &trace)?;
    files.extend([sp, tp, lp]);
    for (name, pts) in [("histogram_samples.tgrd", &drawn), ("histogram_truth.tgrd", &truth)] {
        let h = grid.histogram(pts);
        let b = t.bins;
        let p = dir.join(name);
        gridio::write_array(&p, &Array { dims: vec![b, b], data: h[..b * b].to_vec() })?;
        files.push(p);
    }
    let mp = dir.join("metrics.json");
    fs::write(&mp, serde_json::to_string_pretty(&metrics)? + "\n")?;
    files.push(mp);
    Manifest::new("toy", Some(cfg), &[("toy.seed", t.seed)]).write(&dir, &files)?;
    Ok(metrics)
}
