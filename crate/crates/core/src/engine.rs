//! Training loop, posterior sampling and sample statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AdamConfig;
use crate::cvae::{sample_latent, ModelBundle};
use crate::data::TrainingTuple;
use crate::error::{shape_err, Error, Result};
use crate::exec::Executor;
use crate::grid::{Image, Sinogram};
use crate::linop::LinearOperator;

/// Largest image (in pixels) for which a dense covariance is formed.
pub const MAX_COVARIANCE_PIXELS: usize = 32 * 32;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Number of minibatches `T`.
    pub batches: usize,
    /// Latent draws per tuple `L`.
    pub latent_samples: usize,
    pub adam: AdamConfig,
    /// Checkpoint cadence in batches; `None` means `max(1, T / 20)`.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batches: 1000,
            latent_samples: 1,
            adam: AdamConfig::default(),
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 {
            return Err(Error::InvalidArgument("batches must be at least 1".into()));
        }
        if self.latent_samples == 0 {
            return Err(Error::InvalidArgument("latent_samples must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidArgument("checkpoint_every must be at least 1".into()));
        }
        self.adam.validate()
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.batches / 20).max(1))
    }
}

/// Loss of one minibatch, recorded before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub batch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Why training stopped early, with enough context to reproduce it.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub batch_index: usize,
    /// The offending minibatch, empty if the stream itself ran dry.
    pub batch: Vec<TrainingTuple>,
    pub trace: Vec<LossRecord>,
}

impl core::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "training stopped at batch {}: {}", self.batch_index, self.error)
    }
}

/// Runs `config.batches` ADAM steps on batches drawn from `stream`.
///
/// `on_checkpoint` is called after every `checkpoint_interval()` batches and
/// after the last one, with the number of completed batches. A non-finite
/// loss or gradient aborts before the parameters are touched.
pub fn train<E, S, C>(
    bundle: &mut ModelBundle,
    config: &TrainConfig,
    stream: S,
    ops: &[&dyn LinearOperator],
    exec: &E,
    mut on_checkpoint: C,
) -> core::result::Result<Vec<LossRecord>, TrainFailure>
where
    E: Executor,
    S: IntoIterator<Item = Vec<TrainingTuple>>,
    C: FnMut(usize, &ModelBundle, &[LossRecord]) -> Result<()>,
{
    let fail = |error, batch_index, batch, trace: &Vec<LossRecord>| TrainFailure {
        error,
        batch_index,
        batch,
        trace: trace.clone(),
    };
    let mut trace = Vec::with_capacity(config.batches);
    if let Err(e) = config.validate() {
        return Err(fail(e, 0, Vec::new(), &trace));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let interval = config.checkpoint_interval();
    let mut stream = stream.into_iter();
    for t in 0..config.batches {
        let Some(batch) = stream.next() else {
            return Err(fail(Error::Empty("training stream"), t, Vec::new(), &trace));
        };
        let out = match bundle.loss_minibatch(&batch, ops, config.latent_samples, &mut rng, exec) {
            Ok(out) => out,
            Err(e) => return Err(fail(e, t, batch, &trace)),
        };
        if !out.loss.is_finite() || !out.gradients.is_finite() {
            let e = Error::NonFiniteLoss { batch: t, loss: out.loss };
            return Err(fail(e, t, batch, &trace));
        }
        trace.push(LossRecord {
            batch: t,
            loss: out.loss,
            reconstruction: out.reconstruction,
            kl: out.kl,
        });
        if let Err(e) = bundle.apply_gradients(&out.gradients, &config.adam) {
            return Err(fail(e, t, batch, &trace));
        }
        let done = t + 1;
        if done % interval == 0 || done == config.batches {
            if let Err(e) = on_checkpoint(done, bundle, &trace) {
                return Err(fail(e, t, Vec::new(), &trace));
            }
        }
    }
    Ok(trace)
}

/// Posterior draws and their statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub samples: Vec<Image>,
    pub mean: Image,
    /// Per-pixel variance including the fixed observation variance `beta`.
    pub variance: Image,
    pub beta: f64,
}

impl PosteriorSummary {
    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// RNG for draw `index` of a sampling run seeded with `seed`.
///
/// Each draw gets its own ChaCha stream, so results do not depend on the
/// order or concurrency in which draws are evaluated.
pub fn draw_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `samples` reconstructions `x(z)`, `z ~ p(z | y)`, and summarizes them.
///
/// `y` is in count units. A model trained on data divided by the peak takes
/// that peak as `scale`; samples and statistics are returned in count units.
pub fn sample_posterior<E: Executor>(
    bundle: &ModelBundle,
    y: &Sinogram,
    scale: f64,
    op: &dyn LinearOperator,
    samples: usize,
    seed: u64,
    exec: &E,
) -> Result<PosteriorSummary> {
    if samples == 0 {
        return Err(Error::Empty("posterior samples"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    y.check_shape(op.range_shape())?;
    let y = &y.scaled(1.0 / scale);
    let prior = bundle.student_encode(y)?;
    let draws = exec.map(samples, |s| {
        let z = sample_latent(&prior, &mut draw_rng(seed, s));
        bundle.decode(y, op, &z, None).map(|x| x.scaled(scale))
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, variance) = estimate_stats(&draws, bundle.beta())?;
    Ok(PosteriorSummary {
        samples: draws,
        mean,
        variance,
        beta: bundle.beta(),
    })
}

fn check_samples(samples: &[Image]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::Empty("samples"))?;
    let shape = first.shape();
    for s in samples {
        s.check_shape(shape)?;
    }
    Ok(shape)
}

/// Sample mean and `beta + (1/S) sum (x - mean)^2` per pixel.
///
/// This equals `beta + (1/S) sum x^2 - mean^2`; the centred form is used
/// because it cannot go below `beta` through cancellation.
pub fn estimate_stats(samples: &[Image], beta: f64) -> Result<(Image, Image)> {
    let (h, w) = check_samples(samples)?;
    let n = samples.len() as f64;
    let mut mean = vec![0.0; h * w];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; h * w];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = beta + *v / n);
    Ok((Image::from_vec(h, w, mean)?, Image::from_vec(h, w, var)?))
}

/// Dense `n x n` sample covariance (row-major) plus `beta I`, for images of
/// at most [`MAX_COVARIANCE_PIXELS`] pixels.
pub fn estimate_covariance(samples: &[Image], beta: f64) -> Result<Vec<f64>> {
    let (h, w) = check_samples(samples)?;
    let p = h * w;
    if p > MAX_COVARIANCE_PIXELS {
        return Err(shape_err(MAX_COVARIANCE_PIXELS, p));
    }
    let (mean, _) = estimate_stats(samples, 0.0)?;
    let n = samples.len() as f64;
    let mut cov = vec![0.0; p * p];
    for s in samples {
        let d: Vec<f64> = s.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| a - b).collect();
        for i in 0..p {
            for j in 0..p {
                cov[i * p + j] += d[i] * d[j];
            }
        }
    }
    for (k, c) in cov.iter_mut().enumerate() {
        *c /= n;
        if k / p == k % p {
            *c += beta;
        }
    }
    Ok(cov)
}
