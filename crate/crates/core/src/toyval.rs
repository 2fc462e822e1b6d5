//! A two-dimensional sanity check of the conditional VAE: learn a known
//! multi-modal distribution and compare samples by histogram distance.
//!
//! Dense layers are 1x1 convolutions over a `[features, 1, batch]` tensor,
//! so a whole minibatch runs through one matrix product per layer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{adam_step, AdamConfig, Eager, Graph, LayerSpec, Network, ParamSet, Tape, Tensor};
use crate::cvae::{encode_graph, kl_graph};
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// A weighted mixture of bivariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MixtureSpec {
    pub means: Vec<Point>,
    /// Row-major `[[a, b], [b, c]]` covariances.
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// `components` equal-weight isotropic Gaussians at uniform angles on a
    /// circle.
    pub fn ring(components: usize, radius: f64, variance: f64) -> Self {
        let means = (0..components)
            .map(|k| {
                let t = 2.0 * core::f64::consts::PI * k as f64 / components as f64;
                [radius * libm::cos(t), radius * libm::sin(t)]
            })
            .collect();
        MixtureSpec {
            means,
            covariances: vec![[[variance, 0.0], [0.0, variance]]; components],
            weights: vec![1.0 / components as f64; components],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 {
            return Err(Error::Empty("mixture components"));
        }
        if self.covariances.len() != k || self.weights.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{k} means, {} covariances and {} weights",
                self.covariances.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || libm::fabs(self.weights.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(Error::InvalidArgument("weights must be nonnegative and sum to 1".into()));
        }
        for c in &self.covariances {
            // Semi-definite is allowed so that degenerate components can be sampled.
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if c[0][1] != c[1][0] || c[0][0] < 0.0 || c[1][1] < 0.0 || det < -1e-12 {
                return Err(Error::InvalidArgument("covariances must be symmetric positive semi-definite".into()));
            }
        }
        Ok(())
    }

    /// Index of the component whose mean is closest to `p`.
    pub fn nearest_component(&self, p: Point) -> usize {
        let d = |m: &Point| (m[0] - p[0]) * (m[0] - p[0]) + (m[1] - p[1]) * (m[1] - p[1]);
        let mut best = 0;
        for (k, m) in self.means.iter().enumerate() {
            if d(m) < d(&self.means[best]) {
                best = k;
            }
        }
        best
    }
}

/// Lower Cholesky factor of a 2x2 positive semi-definite matrix.
fn cholesky2(c: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l00 = libm::sqrt(c[0][0].max(0.0));
    let l10 = if l00 > 0.0 { c[1][0] / l00 } else { 0.0 };
    let l11 = libm::sqrt((c[1][1] - l10 * l10).max(0.0));
    [[l00, 0.0], [l10, l11]]
}

/// Ancestral sampling: a component by weight, then its Gaussian.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
    spec.validate()?;
    let factors: Vec<_> = spec.covariances.iter().map(cholesky2).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = spec.weights.len() - 1;
        for (i, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let l = &factors[k];
        let m = spec.means[k];
        out.push([m[0] + l[0][0] * e0, m[1] + l[1][0] * e0 + l[1][1] * e1]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ToyConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub hidden: usize,
    /// Size of the fixed training set.
    pub train_points: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate reached at the last epoch, decaying geometrically from
    /// `adam.lr`; `None` keeps it constant.
    pub final_lr: Option<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            latent_dim: 2,
            beta: 1e-2,
            hidden: 128,
            train_points: 20_000,
            batch_size: 200,
            adam: AdamConfig::default(),
            final_lr: None,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.train_points == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("toy sizes must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        if self.final_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::InvalidArgument("final_lr must be positive".into()));
        }
        self.adam.validate()
    }
}

/// Dimension of the dummy condition.
const CONDITION_DIM: usize = 1;

fn dense(name: &str, input: usize, hidden: usize, output: usize) -> Result<Network> {
    Network::new(
        name,
        vec![
            LayerSpec::conv(input, hidden, 1),
            LayerSpec::relu(),
            LayerSpec::conv(hidden, hidden, 1),
            LayerSpec::relu(),
            LayerSpec::conv(hidden, output, 1),
        ],
    )
}

/// Teacher, student and decoder for points in the plane, each a
/// three-layer ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub teacher: Network,
    pub student: Network,
    pub decoder: Network,
    pub params: ParamSet,
}

impl ToyModel {
    pub fn new(config: ToyConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let teacher = dense("toy.teacher", 2 + CONDITION_DIM, config.hidden, 2 * d)?;
        let student = dense("toy.student", CONDITION_DIM, config.hidden, 2 * d)?;
        let decoder = dense("toy.decoder", d + CONDITION_DIM, config.hidden, 2)?;
        let mut params = ParamSet::new();
        for net in [&teacher, &student, &decoder] {
            net.init_params(&mut params, rng);
        }
        for net in [&teacher, &student] {
            let last = net.last_param_layer().expect("dense network has parameters");
            params.get_mut(&net.weight_name(last))?.data_mut().fill(0.0);
            params.get_mut(&net.bias_name(last))?.data_mut().fill(0.0);
        }
        Ok(ToyModel { config, teacher, student, decoder, params })
    }

    fn condition(n: usize) -> Tensor {
        Tensor::filled([CONDITION_DIM, 1, n], 1.0)
    }

    /// Loss `(1/2M) sum |x - xhat|^2 + (beta/M) sum KL` on one minibatch.
    fn loss(&self, tape: &mut Tape<'static>, points: &[Point], rng: &mut impl Rng) -> Result<crate::autodiff::Var> {
        let m = points.len();
        let d = self.config.latent_dim;
        let mut xs = vec![0.0; 2 * m];
        for (i, p) in points.iter().enumerate() {
            xs[i] = p[0];
            xs[m + i] = p[1];
        }
        let x = tape.constant(Tensor::from_vec([2, 1, m], xs)?);
        let y = tape.constant(Self::condition(m));
        let tin = tape.concat(&[x.clone(), y.clone()])?;
        let (mq, lq) = encode_graph(tape, &self.teacher, &self.params, &tin, d)?;
        let (mp, lp) = encode_graph(tape, &self.student, &self.params, &y, d)?;
        let kl = kl_graph(tape, &mq, &lq, &mp, &lp)?;
        let half = tape.scale(&lq, 0.5);
        let std = tape.exp(&half);
        let eps: Vec<f64> = (0..d * m).map(|_| StandardNormal.sample(rng)).collect();
        let eps = tape.constant(Tensor::from_vec([d, 1, m], eps)?);
        let se = tape.mul(&std, &eps)?;
        let z = tape.add(&mq, &se)?;
        let din = tape.concat(&[z, y])?;
        let xhat = self.decoder.apply(tape, &self.params, &din)?;
        let diff = tape.sub(&x, &xhat)?;
        let d2 = tape.mul(&diff, &diff)?;
        let recon = tape.sum(&d2);
        let recon = tape.scale(&recon, 0.5 / m as f64);
        let kl = tape.scale(&kl, self.config.beta / m as f64);
        tape.add(&recon, &kl)
    }

    /// Draws `n` points: `z ~ p(z | y)`, then `xhat(z) + sqrt(beta) eps`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
        let d = self.config.latent_dim;
        let mut g = Eager;
        let y = g.constant(Self::condition(1));
        let (mp, lp) = encode_graph(&mut g, &self.student, &self.params, &y, d)?;
        let sd: Vec<f64> = lp.data().iter().map(|l| libm::exp(0.5 * l)).collect();
        let mut out = Vec::with_capacity(n);
        const CHUNK: usize = 4096;
        let noise_sd = libm::sqrt(self.config.beta);
        let mut left = n;
        while left > 0 {
            let c = left.min(CHUNK);
            let mut z = vec![0.0; d * c];
            for i in 0..c {
                for j in 0..d {
                    let e: f64 = StandardNormal.sample(rng);
                    z[j * c + i] = mp.data()[j] + sd[j] * e;
                }
            }
            let zv = g.constant(Tensor::from_vec([d, 1, c], z)?);
            let yv = g.constant(Self::condition(c));
            let din = g.concat(&[zv, yv])?;
            let xhat = self.decoder.apply(&mut g, &self.params, &din)?;
            for i in 0..c {
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                out.push([xhat.data()[i] + noise_sd * e0, xhat.data()[c + i] + noise_sd * e1]);
            }
            left -= c;
        }
        Ok(out)
    }
}

/// Trains a toy model on `config.train_points` draws from `spec` for
/// `epochs` passes. Returns the model and the per-batch loss trace.
pub fn toy_train(spec: &MixtureSpec, config: ToyConfig, epochs: usize, seed: u64) -> Result<(ToyModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::new(config, &mut rng)?;
    let mut data = sample_mixture(spec, model.config.train_points, &mut rng)?;
    let bs = model.config.batch_size.min(data.len());
    let mut trace = Vec::new();
    let mut adam = model.config.adam;
    for epoch in 0..epochs {
        if let Some(end) = model.config.final_lr {
            let t = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 1.0 };
            adam.lr = model.config.adam.lr * libm::pow(end / model.config.adam.lr, t);
        }
        // Fisher-Yates shuffle per epoch.
        for i in (1..data.len()).rev() {
            let j = rng.random_range(0..=i);
            data.swap(i, j);
        }
        for chunk in data.chunks(bs) {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, chunk, &mut rng)?;
            let value = tape.value(&loss).item();
            let grads = tape.backward(loss, &Tensor::scalar(1.0))?.params(&model.params);
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { batch: trace.len(), loss: value });
            }
            trace.push(value);
            adam_step(&mut model.params, &grads, &adam)?;
        }
    }
    Ok((model, trace))
}

/// A rectangular grid of equal cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramGrid {
    pub min: Point,
    pub max: Point,
    pub bins: usize,
}

pub const MIN_HISTOGRAM_BINS: usize = 20;

impl HistogramGrid {
    /// The smallest box holding every point of both sets.
    pub fn bounding(a: &[Point], b: &[Point], bins: usize) -> Result<Self> {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in a.iter().chain(b) {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        for k in 0..2 {
            if max[k] <= min[k] {
                max[k] = min[k] + 1.0;
            }
        }
        Ok(HistogramGrid { min, max, bins })
    }

    /// Cell of `p`, or `None` outside the box. The upper edge is inclusive.
    pub fn cell(&self, p: Point) -> Option<usize> {
        let mut idx = [0usize; 2];
        for k in 0..2 {
            if !(p[k] >= self.min[k] && p[k] <= self.max[k]) {
                return None;
            }
            let t = (p[k] - self.min[k]) / (self.max[k] - self.min[k]);
            idx[k] = ((t * self.bins as f64) as usize).min(self.bins - 1);
        }
        Some(idx[1] * self.bins + idx[0])
    }

    /// Normalized counts, with one extra trailing cell for points outside.
    pub fn histogram(&self, points: &[Point]) -> Vec<f64> {
        let mut h = vec![0.0; self.bins * self.bins + 1];
        for p in points {
            let c = self.cell(*p).unwrap_or(self.bins * self.bins);
            h[c] += 1.0;
        }
        let n = points.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }
}

/// Total-variation distance `0.5 sum |p - q|` between the normalized
/// histograms of two point sets on `grid`. Points outside the grid share
/// one overflow cell.
pub fn histogram_distance(a: &[Point], b: &[Point], grid: &HistogramGrid) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if grid.bins < MIN_HISTOGRAM_BINS {
        return Err(Error::InvalidArgument(format!(
            "histogram needs at least {MIN_HISTOGRAM_BINS} bins per axis, got {}",
            grid.bins
        )));
    }
    if !(grid.max[0] > grid.min[0] && grid.max[1] > grid.min[1]) {
        return Err(Error::InvalidArgument("empty histogram box".into()));
    }
    let ha = grid.histogram(a);
    let hb = grid.histogram(b);
    let d: f64 = ha.iter().zip(&hb).map(|(p, q)| libm::fabs(p - q)).sum();
    Ok((0.5 * d).min(1.0))
}

/// Fraction of points nearest to each component mean.
pub fn mode_coverage(spec: &MixtureSpec, points: &[Point]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let mut counts = vec![0.0; spec.means.len()];
    for p in points {
        counts[spec.nearest_component(*p)] += 1.0;
    }
    let n = points.len() as f64;
    Ok(counts.into_iter().map(|c| c / n).collect())
}
