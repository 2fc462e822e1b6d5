//! Synthetic phantoms, tumour insertion, Poisson corruption, and on-the-fly
//! training streams.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};
use crate::linop::LinearOperator;

/// Peak value for the moderate count level.
pub const PEAK_MODERATE: f64 = 1e4;
/// Peak value for the low count level.
pub const PEAK_LOW: f64 = 1e2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Provenance {
    SyntheticEllipses,
    ExternalFile,
    TumourModified,
}

/// A nonnegative test image calibrated so its maximum equals `peak`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub peak: f64,
    pub provenance: Provenance,
}

impl Phantom {
    /// Rescales a nonnegative, nonzero image so that its maximum is `peak`.
    pub fn calibrate(image: Image, peak: f64, provenance: Provenance) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
        }
        image.ensure_nonnegative()?;
        let max = image.max();
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::InvalidArgument(
                "image has no positive pixel; cannot calibrate peak".into(),
            ));
        }
        // Rounding is monotone, so only the maximal pixels can miss `peak`.
        let image = image.map(|v| if v == max { peak } else { v * (peak / max) });
        Ok(Phantom { image, peak, provenance })
    }
}

/// Random parameters of one ellipse, in pixel units.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    intensity: f64,
}

impl Ellipse {
    fn sample(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        Ellipse {
            cx: rng.random_range(0.1 * w..=0.9 * w),
            cy: rng.random_range(0.1 * h..=0.9 * h),
            a: rng.random_range(0.05 * w..=0.4 * w),
            b: rng.random_range(0.05 * h..=0.4 * h),
            rot: rng.random_range(0.0..PI),
            intensity: rng.random_range(0.2..=1.0),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = (libm::sin(self.rot), libm::cos(self.rot));
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

fn ellipse_image(rng: &mut impl Rng, height: usize, width: usize) -> Image {
    loop {
        let count = rng.random_range(3..=8);
        let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::sample(rng, height, width)).collect();
        let img = Image::from_fn(height, width, |r, c| {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum::<f64>()
                .max(0.0)
        });
        // Tiny ellipses may miss every pixel centre on small grids.
        if img.max() > 0.0 {
            return img;
        }
    }
}

/// Sum of 3 to 8 random ellipses, rescaled so the maximum equals `peak`.
pub fn generate_ellipse_phantom(height: usize, width: usize, peak: f64, rng_seed: u64) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    generate_ellipse_phantom_with(&mut rng, height, width, peak)
}

pub fn generate_ellipse_phantom_with(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    peak: f64,
) -> Result<Phantom> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidArgument(format!(
            "phantom must be at least 2x2, got {height}x{width}"
        )));
    }
    let img = ellipse_image(rng, height, width);
    Phantom::calibrate(img, peak, Provenance::SyntheticEllipses)
}

/// Sets every pixel within Euclidean distance `radius` of `center` to the
/// phantom's peak value.
pub fn insert_tumour(phantom: &Phantom, center: (usize, usize), radius: f64) -> Result<Phantom> {
    let (h, w) = phantom.image.shape();
    let (cr, cc) = (center.0 as f64, center.1 as f64);
    if !(radius >= 0.0)
        || cr - radius < 0.0
        || cc - radius < 0.0
        || cr + radius > (h - 1) as f64
        || cc + radius > (w - 1) as f64
    {
        return Err(Error::InvalidArgument(format!(
            "tumour disk at {center:?} with radius {radius} does not fit in a {h}x{w} image"
        )));
    }
    let mut image = phantom.image.clone();
    let r2 = radius * radius;
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            if dr * dr + dc * dc <= r2 {
                image.set(r, c, phantom.peak);
            }
        }
    }
    Ok(Phantom {
        image,
        peak: phantom.peak,
        provenance: Provenance::TumourModified,
    })
}

/// Draws `y_i ~ Pois(clean_i)` independently for every entry.
pub fn poissonize(clean: &Sinogram, rng_seed: u64) -> Result<Sinogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    poissonize_with(clean, &mut rng)
}

pub fn poissonize_with(clean: &Sinogram, rng: &mut impl Rng) -> Result<Sinogram> {
    clean.ensure_nonnegative()?;
    let mut out = clean.clone();
    for v in out.as_mut_slice() {
        if *v > 0.0 {
            let dist = Poisson::new(*v)
                .map_err(|e| Error::InvalidArgument(format!("poisson rate {v}: {e}")))?;
            *v = dist.sample(rng);
        }
    }
    Ok(out)
}

/// A training example `(x, y)` for operator `operator_id`.
///
/// `x` and `y` are stored divided by `scale`: the peak when the stream
/// normalizes, 1 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub x: Image,
    pub y: Sinogram,
    pub operator_id: usize,
    pub peak: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StreamConfig {
    pub batch_size: usize,
    /// Count levels, cycled through tuple by tuple.
    pub peaks: Vec<f64>,
    /// Divide phantoms and data by their peak value.
    pub normalize: bool,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.peaks.is_empty() || self.peaks.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("peaks must be a non-empty list of positive reals".into()));
        }
        Ok(())
    }
}

/// Builds one tuple from a phantom: `(x, Pois(A x))`, optionally normalized.
pub fn make_tuple(
    op: &dyn LinearOperator,
    phantom: &Phantom,
    normalize: bool,
    rng: &mut impl Rng,
) -> Result<TrainingTuple> {
    let clean = op.apply(&phantom.image)?;
    let noisy = poissonize_with(&clean, rng)?;
    let scale = if normalize { phantom.peak } else { 1.0 };
    Ok(TrainingTuple {
        x: phantom.image.scaled(1.0 / scale),
        y: noisy.scaled(1.0 / scale),
        operator_id: 0,
        peak: phantom.peak,
        scale,
    })
}

/// Endless stream of training batches generated on the fly.
pub struct TrainingStream<'a> {
    op: &'a dyn LinearOperator,
    config: StreamConfig,
    rng: ChaCha8Rng,
    counter: usize,
}

impl TrainingStream<'_> {
    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn next_batch(&mut self) -> Result<Vec<TrainingTuple>> {
        let (h, w) = self.op.domain_shape();
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let peak = self.config.peaks[self.counter % self.config.peaks.len()];
            self.counter += 1;
            let mut phantom_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
            let mut noise_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
            let phantom = generate_ellipse_phantom_with(&mut phantom_rng, h, w, peak)?;
            batch.push(make_tuple(self.op, &phantom, self.config.normalize, &mut noise_rng)?);
        }
        Ok(batch)
    }
}

impl Iterator for TrainingStream<'_> {
    type Item = Vec<TrainingTuple>;

    fn next(&mut self) -> Option<Self::Item> {
        // Configuration was validated at construction, so generation cannot fail.
        Some(self.next_batch().expect("validated stream configuration"))
    }
}

pub fn make_training_stream<'a>(
    config: StreamConfig,
    op: &'a dyn LinearOperator,
    rng_seed: u64,
) -> Result<TrainingStream<'a>> {
    config.validate()?;
    Ok(TrainingStream {
        op,
        config,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        counter: 0,
    })
}
