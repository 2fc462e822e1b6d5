//! Reference reconstructions: MLEM, TV-regularized least squares solved by
//! PDHG, learned gradient descent, and a three-component Gaussian ensemble.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, AdamConfig, Eager, Gradients, Graph, LayerSpec, Network, ParamSet, Tape, Tensor, Var};
use crate::cvae::{DataTermMode, PenaltyMode, RecurrentUnit};
use crate::data::TrainingTuple;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::{Image, Sinogram};
use crate::linop::{estimate_norm, LinearOperator, NORMALIZATION_ITERATIONS};
use crate::tvops;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MlemConfig {
    pub iterations: usize,
    /// Division guard.
    pub epsilon: f64,
}

impl Default for MlemConfig {
    fn default() -> Self {
        MlemConfig { iterations: 20, epsilon: 1e-12 }
    }
}

impl MlemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("MLEM needs at least one iteration".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("MLEM epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Poisson log-likelihood `sum_i y_i log (Ax)_i - (Ax)_i`, dropping the
/// constant `log y_i!`. Terms with `y_i = 0` contribute `-(Ax)_i`.
pub fn poisson_log_likelihood(op: &dyn LinearOperator, x: &Image, y: &Sinogram) -> Result<f64> {
    let ax = op.apply(x)?;
    y.check_shape(ax.shape())?;
    Ok(ax
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&a, &b)| if b == 0.0 { -a } else { b * libm::log(a) - a })
        .sum())
}

/// Sensitivity image `A* 1`.
pub fn sensitivity(op: &dyn LinearOperator) -> Image {
    let (a, b) = op.range_shape();
    let (h, w) = op.domain_shape();
    let mut out = Image::zeros(h, w);
    op.adjoint_into(Sinogram::filled(a, b, 1.0).as_slice(), out.as_mut_slice());
    out
}

/// One EM update `x * A*(y / (Ax + eps)) / (A*1 + eps)`.
pub fn mlem_step(op: &dyn LinearOperator, y: &Sinogram, x: &Image, sens: &Image, epsilon: f64) -> Result<Image> {
    let ax = op.apply(x)?;
    let ratio = y.zip_map(&ax, |b, a| b / (a + epsilon))?;
    let back = op.adjoint(&ratio)?;
    let mut out = x.clone();
    for ((o, b), s) in out.as_mut_slice().iter_mut().zip(back.as_slice()).zip(sens.as_slice()) {
        *o *= b / (s + epsilon);
    }
    Ok(out)
}

/// MLEM from an explicit starting image.
pub fn mlem_from(op: &dyn LinearOperator, y: &Sinogram, config: &MlemConfig, x0: &Image) -> Result<Image> {
    config.validate()?;
    y.check_shape(op.range_shape())?;
    x0.check_shape(op.domain_shape())?;
    y.ensure_nonnegative()?;
    x0.ensure_nonnegative()?;
    let sens = sensitivity(op);
    let mut x = x0.clone();
    for _ in 0..config.iterations {
        x = mlem_step(op, y, &x, &sens, config.epsilon)?;
    }
    Ok(x)
}

/// MLEM from the all-ones image.
pub fn mlem(op: &dyn LinearOperator, y: &Sinogram, config: &MlemConfig) -> Result<Image> {
    let (h, w) = op.domain_shape();
    mlem_from(op, y, config, &Image::filled(h, w, 1.0))
}

/// Squared norm bound of the finite-difference gradient on a 2-D grid.
pub const GRADIENT_NORM_SQ_BOUND: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TvConfig {
    pub alpha: f64,
    pub iterations: usize,
    /// Primal step; `None` picks `0.99 / L` with `L^2 = ||A||^2 + 8`.
    pub tau: Option<f64>,
    /// Dual step; `None` picks `0.99 / L`.
    pub sigma: Option<f64>,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig { alpha: 2e-1, iterations: 500, tau: None, sigma: None }
    }
}

/// `0.5 ||Ax - y||^2 + alpha TV(x)`.
pub fn tv_objective(op: &dyn LinearOperator, y: &Sinogram, x: &Image, alpha: f64) -> Result<f64> {
    let ax = op.apply(x)?;
    let r: f64 = ax.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let (h, w) = x.shape();
    Ok(0.5 * r + alpha * tvops::total_variation(x.as_slice(), h, w))
}

/// Step sizes for `config` on `op`, checked against `sigma tau ||K||^2 <= 1`.
pub fn tv_steps(op: &dyn LinearOperator, config: &TvConfig) -> Result<(f64, f64)> {
    // The power-iteration estimate approaches the norm from below.
    let na = estimate_norm(op, NORMALIZATION_ITERATIONS) * 1.01;
    let k2 = na * na + GRADIENT_NORM_SQ_BOUND;
    let default = 0.99 / libm::sqrt(k2);
    let tau = config.tau.unwrap_or(default);
    let sigma = config.sigma.unwrap_or(default);
    if !(tau > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidArgument("PDHG steps must be positive".into()));
    }
    if sigma * tau * k2 > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "PDHG steps violate sigma*tau*||K||^2 <= 1 (sigma={sigma}, tau={tau}, ||K||^2={k2:.4})"
        )));
    }
    Ok((tau, sigma))
}

/// Result of a TV reconstruction with its objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TvOutcome {
    /// Lowest-objective iterate seen.
    pub image: Image,
    /// Objective of `image` after each iteration.
    pub objective: Vec<f64>,
    /// Objective of the raw PDHG iterate after each iteration.
    pub raw_objective: Vec<f64>,
}

/// Solves `min_{x >= 0} 0.5 ||Ax - y||^2 + alpha TV(x)` (isotropic TV,
/// forward differences, Neumann boundary) by primal-dual hybrid gradient.
///
/// PDHG iterates do not decrease the objective monotonically, so the
/// reported iterate only moves when the objective improves.
pub fn tv_reconstruct_traced(op: &dyn LinearOperator, y: &Sinogram, config: &TvConfig) -> Result<TvOutcome> {
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(Error::InvalidArgument("alpha must be a nonnegative real".into()));
    }
    if config.iterations == 0 {
        return Err(Error::InvalidArgument("TV needs at least one iteration".into()));
    }
    y.check_shape(op.range_shape())?;
    y.ensure_nonnegative()?;
    let (tau, sigma) = tv_steps(op, config)?;
    let (h, w) = op.domain_shape();
    let (ra, rb) = op.range_shape();
    let n = h * w;
    let mut x = Image::zeros(h, w);
    let mut xbar = x.clone();
    let mut p = Sinogram::zeros(ra, rb);
    let (mut qx, mut qy) = (vec![0.0; n], vec![0.0; n]);
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut ax = Sinogram::zeros(ra, rb);
    let mut atp = Image::zeros(h, w);
    let mut div = vec![0.0; n];
    let mut objective = Vec::with_capacity(config.iterations);
    let mut raw_objective = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, x.clone());
    for _ in 0..config.iterations {
        op.apply_into(xbar.as_slice(), ax.as_mut_slice());
        for ((pv, a), b) in p.as_mut_slice().iter_mut().zip(ax.as_slice()).zip(y.as_slice()) {
            *pv = (*pv + sigma * (a - b)) / (1.0 + sigma);
        }
        tvops::gradient(xbar.as_slice(), h, w, &mut gx, &mut gy);
        for i in 0..n {
            let ux = qx[i] + sigma * gx[i];
            let uy = qy[i] + sigma * gy[i];
            let norm = libm::sqrt(ux * ux + uy * uy);
            let shrink = if norm > config.alpha { config.alpha / norm } else { 1.0 };
            qx[i] = ux * shrink;
            qy[i] = uy * shrink;
        }
        op.adjoint_into(p.as_slice(), atp.as_mut_slice());
        tvops::gradient_adjoint(&qx, &qy, h, w, &mut div);
        let prev = x.clone();
        for i in 0..n {
            let v = x.as_slice()[i] - tau * (atp.as_slice()[i] + div[i]);
            x.as_mut_slice()[i] = v.max(0.0);
        }
        for ((b, xn), xo) in xbar.as_mut_slice().iter_mut().zip(x.as_slice()).zip(prev.as_slice()) {
            *b = 2.0 * xn - xo;
        }
        let f = tv_objective(op, y, &x, config.alpha)?;
        raw_objective.push(f);
        if f <= best.0 {
            best = (f, x.clone());
        }
        objective.push(best.0);
    }
    Ok(TvOutcome { image: best.1, objective, raw_objective })
}

pub fn tv_reconstruct(op: &dyn LinearOperator, y: &Sinogram, config: &TvConfig) -> Result<Image> {
    Ok(tv_reconstruct_traced(op, y, config)?.image)
}

/// Settings shared by the learned baselines.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LearnedConfig {
    pub iterations: usize,
    pub hidden_channels: usize,
    pub data_term: DataTermMode,
    pub penalty: PenaltyMode,
    /// Minibatches per training stage.
    pub batches: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        LearnedConfig {
            iterations: 10,
            hidden_channels: 32,
            data_term: DataTermMode::Gradient,
            penalty: PenaltyMode::SquaredL2,
            batches: 1000,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl LearnedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.hidden_channels == 0 || self.batches == 0 {
            return Err(Error::InvalidArgument(
                "iterations, hidden_channels and batches must be positive".into(),
            ));
        }
        self.adam.validate()
    }

    fn unit(&self, name: &str) -> Result<RecurrentUnit> {
        RecurrentUnit::new(name, 0, self.hidden_channels, self.iterations, self.data_term, self.penalty)
    }
}

fn check_ops(batch: &[TrainingTuple], ops: &[&dyn LinearOperator]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    match batch.iter().find(|t| t.operator_id >= ops.len()) {
        Some(t) => Err(Error::InvalidArgument(format!("operator id {} out of range", t.operator_id))),
        None => Ok(()),
    }
}

/// Minimizes the batch mean of `per_sample` over `params` by ADAM.
/// Returns the loss trace.
fn fit<'a, E, S, F>(
    params: &mut ParamSet,
    batches: usize,
    adam: &AdamConfig,
    stream: S,
    ops: &[&'a dyn LinearOperator],
    exec: &E,
    per_sample: F,
) -> Result<Vec<f64>>
where
    E: Executor,
    S: IntoIterator<Item = Vec<TrainingTuple>>,
    F: Fn(&mut Tape<'a>, &ParamSet, &TrainingTuple, &'a dyn LinearOperator) -> Result<Var> + Sync + Send,
{
    adam.validate()?;
    let mut stream = stream.into_iter();
    let mut trace = Vec::with_capacity(batches);
    for t in 0..batches {
        let batch = stream.next().ok_or(Error::Empty("training stream"))?;
        check_ops(&batch, ops)?;
        let m = batch.len() as f64;
        let snapshot = &*params;
        let parts = exec.map(batch.len(), |i| -> Result<(f64, Gradients)> {
            let tuple = &batch[i];
            let mut tape = Tape::new();
            let loss = per_sample(&mut tape, snapshot, tuple, ops[tuple.operator_id])?;
            let loss = tape.scale(&loss, 1.0 / m);
            let grads = tape.backward(loss.clone(), &Tensor::scalar(1.0))?;
            Ok((tape.value(&loss).item(), grads.params(snapshot)))
        });
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(params);
        for part in parts {
            let (l, g) = part?;
            total += l;
            grads.add_assign(&g);
        }
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { batch: t, loss: total });
        }
        trace.push(total);
        adam_step(params, &grads, adam)?;
    }
    Ok(trace)
}

/// `0.5 ||x - xhat||^2` on a tape.
fn half_sq_error<'op>(tape: &mut Tape<'op>, x: &Image, xhat: &Var) -> Result<Var> {
    let xv = tape.constant(Tensor::from_grid(x));
    let d = tape.sub(&xv, xhat)?;
    let d2 = tape.mul(&d, &d)?;
    let s = tape.sum(&d2);
    Ok(tape.scale(&s, 0.5))
}

/// Learned gradient descent: the recurrent unit without latent channels,
/// trained by squared error against the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LgdModel {
    pub unit: RecurrentUnit,
    pub params: ParamSet,
}

pub const LGD: &str = "lgd";

impl LgdModel {
    pub fn new(config: &LearnedConfig) -> Result<Self> {
        config.validate()?;
        let unit = config.unit(LGD)?;
        let mut params = ParamSet::new();
        unit.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(config.seed));
        Ok(LgdModel { unit, params })
    }
}

/// Trains an LGD model; returns it with the per-batch loss trace.
pub fn lgd_train<E, S>(
    config: &LearnedConfig,
    stream: S,
    ops: &[&dyn LinearOperator],
    exec: &E,
) -> Result<(LgdModel, Vec<f64>)>
where
    E: Executor,
    S: IntoIterator<Item = Vec<TrainingTuple>>,
{
    let mut model = LgdModel::new(config)?;
    let unit = &model.unit;
    let trace = fit(&mut model.params, config.batches, &config.adam, stream, ops, exec, |tape, p, tuple, op| {
        let yv = tape.constant(Tensor::from_grid(&tuple.y));
        let xhat = unit.unroll_graph(tape, p, &yv, op, None, None)?;
        half_sq_error(tape, &tuple.x, &xhat)
    })?;
    Ok((model, trace))
}

pub fn lgd_reconstruct(op: &dyn LinearOperator, y: &Sinogram, model: &LgdModel) -> Result<Image> {
    model.unit.reconstruct(&model.params, y, op, None, None)
}

/// Variance head: conv layers on `[A*y; mean]` followed by softplus.
pub fn variance_network(name: &str, width: usize) -> Result<Network> {
    Network::new(
        name,
        vec![
            LayerSpec::conv(2, width, 3),
            LayerSpec::relu(),
            LayerSpec::conv(width, width, 3),
            LayerSpec::relu(),
            LayerSpec::conv(width, 1, 3),
        ],
    )
}

/// One ensemble member: a mean unit and a variance head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gm3Component {
    pub mean: RecurrentUnit,
    pub variance: Network,
}

/// Equal-weight mixture of Gaussian predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gm3Bundle {
    pub components: Vec<Gm3Component>,
    pub params: ParamSet,
}

pub const GM3_COMPONENTS: usize = 3;

fn variance_graph<'op, G: Graph<'op>>(
    g: &mut G,
    net: &Network,
    params: &ParamSet,
    backprojection: &G::Var,
    mean: &G::Var,
) -> Result<G::Var> {
    let input = g.concat(&[backprojection.clone(), mean.clone()])?;
    let raw = net.apply(g, params, &input)?;
    Ok(g.softplus(&raw))
}

impl Gm3Bundle {
    pub fn new(config: &LearnedConfig, components: usize) -> Result<Self> {
        config.validate()?;
        if components == 0 {
            return Err(Error::InvalidArgument("at least one component is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut out = Vec::with_capacity(components);
        for c in 0..components {
            let mean = config.unit(&format!("gm{c}.mean"))?;
            let variance = variance_network(&format!("gm{c}.var"), config.hidden_channels)?;
            mean.init_params(&mut params, &mut rng);
            variance.init_params(&mut params, &mut rng);
            out.push(Gm3Component { mean, variance });
        }
        Ok(Gm3Bundle { components: out, params })
    }

    /// Per-component `(mean, variance)` predictions.
    pub fn component_predictions(&self, op: &dyn LinearOperator, y: &Sinogram) -> Result<Vec<(Image, Image)>> {
        y.check_shape(op.range_shape())?;
        self.components
            .iter()
            .map(|c| {
                let mut g = Eager;
                let yv = g.constant(Tensor::from_grid(y));
                let bp = g.adjoint_op(&yv, op)?;
                let mean = c.mean.unroll_graph(&mut g, &self.params, &yv, op, None, Some(&bp))?;
                let var = variance_graph(&mut g, &c.variance, &self.params, &bp, &mean)?;
                Ok((mean.channel_grid(0), var.channel_grid(0)))
            })
            .collect()
    }
}

/// Trains each component in two stages: the mean by squared error, then
/// the variance head by Gaussian negative log-likelihood with the mean
/// frozen. Every stage consumes `config.batches` batches from `stream`.
/// Returns the bundle with the loss trace of every stage.
pub fn gm3_train<E, S>(
    config: &LearnedConfig,
    components: usize,
    stream: S,
    ops: &[&dyn LinearOperator],
    exec: &E,
) -> Result<(Gm3Bundle, Vec<Vec<f64>>)>
where
    E: Executor,
    S: IntoIterator<Item = Vec<TrainingTuple>>,
{
    let mut bundle = Gm3Bundle::new(config, components)?;
    let mut stream = stream.into_iter();
    let mut traces = Vec::new();
    for c in 0..components {
        let comp = bundle.components[c].clone();
        let prefix_mean = format!("gm{c}.mean.");
        let prefix_var = format!("gm{c}.var.");
        let mut mean_params = subset(&bundle.params, &prefix_mean);
        let trace = fit(&mut mean_params, config.batches, &config.adam, stream.by_ref(), ops, exec, |tape, p, tuple, op| {
            let yv = tape.constant(Tensor::from_grid(&tuple.y));
            let xhat = comp.mean.unroll_graph(tape, p, &yv, op, None, None)?;
            half_sq_error(tape, &tuple.x, &xhat)
        })?;
        traces.push(trace);
        let mut var_params = subset(&bundle.params, &prefix_var);
        let frozen = &mean_params;
        let trace = fit(&mut var_params, config.batches, &config.adam, stream.by_ref(), ops, exec, |tape, p, tuple, op| {
            let mean = comp.mean.reconstruct(frozen, &tuple.y, op, None, None)?;
            let bp = op.adjoint(&tuple.y)?;
            let bpv = tape.constant(Tensor::from_grid(&bp));
            let mv = tape.constant(Tensor::from_grid(&mean));
            let var = variance_graph(tape, &comp.variance, p, &bpv, &mv)?;
            gaussian_nll(tape, &tuple.x, &mean, &var)
        })?;
        traces.push(trace);
        bundle.params.overwrite(mean_params);
        bundle.params.overwrite(var_params);
    }
    Ok((bundle, traces))
}

fn subset(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, entry) in params.iter() {
        if name.starts_with(prefix) {
            out.insert_entry(name.clone(), entry.clone());
        }
    }
    out
}

/// `0.5 sum [log var + (x - mean)^2 / var]`.
fn gaussian_nll<'op>(tape: &mut Tape<'op>, x: &Image, mean: &Image, var: &Var) -> Result<Var> {
    let r2: Vec<f64> = x.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| (a - b) * (a - b)).collect();
    let (h, w) = x.shape();
    let r2 = tape.constant(Tensor::from_vec([1, h, w], r2)?);
    let logv = tape.ln(var);
    let neg = tape.scale(&logv, -1.0);
    let inv = tape.exp(&neg);
    let quad = tape.mul(&r2, &inv)?;
    let s = tape.add(&logv, &quad)?;
    let s = tape.sum(&s);
    Ok(tape.scale(&s, 0.5))
}

/// Mixture mean and per-pixel variance `mean_c(var_c + mean_c^2) - mean^2`
/// for equally weighted components.
pub fn mixture_moments(components: &[(Image, Image)]) -> Result<(Image, Image)> {
    let (m0, _) = components.first().ok_or(Error::Empty("mixture components"))?;
    let shape = m0.shape();
    for (m, v) in components {
        m.check_shape(shape)?;
        v.check_shape(shape)?;
    }
    let n = components.len() as f64;
    let len = m0.len();
    let mut mean = vec![0.0; len];
    for (m, _) in components {
        for (acc, v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    // Centred form of mean_c(var_c + mean_c^2) - mean^2.
    let mut var = vec![0.0; len];
    for (m, v) in components {
        for j in 0..len {
            let d = m.as_slice()[j] - mean[j];
            var[j] += v.as_slice()[j] + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok((Image::from_vec(shape.0, shape.1, mean)?, Image::from_vec(shape.0, shape.1, var)?))
}

/// Mixture mean and variance predicted by a trained ensemble.
pub fn gm3_predict(op: &dyn LinearOperator, y: &Sinogram, bundle: &Gm3Bundle) -> Result<(Image, Image)> {
    mixture_moments(&bundle.component_predictions(op, y)?)
}
