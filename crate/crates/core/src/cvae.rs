//! The conditional VAE: teacher and student encoders, the recurrent
//! reconstruction unit, and the training objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{adam_step, AdamConfig, Eager, Gradients, Graph, LayerSpec, Network, ParamSet, Tape, Tensor, Var};
use crate::data::TrainingTuple;
use crate::error::{shape_err, Error, Result};
use crate::exec::Executor;
use crate::grid::{Image, Sinogram};
use crate::linop::LinearOperator;

/// Encoder log-variances are clamped to `[-LOG_VAR_BOUND, LOG_VAR_BOUND]`.
pub const LOG_VAR_BOUND: f64 = 20.0;
/// Smoothing used by the TV penalty channel.
pub const TV_SMOOTHING: f64 = 1e-6;
/// Memory channels carried between recurrent steps.
pub const MEMORY_CHANNELS: usize = 5;
/// Channels of the recurrent input besides the latent code: x, E, R, memory.
pub const BASE_INPUT_CHANNELS: usize = 3 + MEMORY_CHANNELS;

pub const TEACHER: &str = "teacher";
pub const STUDENT: &str = "student";
pub const RECURRENT: &str = "recurrent";

/// What the data-consistency channel `E` carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DataTermMode {
    /// `A*(Ax - y)`, the gradient of the data misfit.
    #[default]
    Gradient,
    /// `||y - Ax||^2` broadcast to a constant channel.
    ResidualNorm,
}

/// What the penalty channel `R` carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PenaltyMode {
    /// Gradient of `||x||^2`, i.e. `2x`.
    #[default]
    SquaredL2,
    /// Gradient of smoothed total variation.
    Tv,
}

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Number of recurrent refinement steps `K`.
    pub iterations: usize,
    /// Weight of the KL term, also the fixed observation variance, in
    /// image units. On data divided by `s` both become `beta / s^2`.
    pub beta: f64,
    pub data_term: DataTermMode,
    pub penalty: PenaltyMode,
    /// Feature width of the recurrent unit.
    pub hidden_channels: usize,
    /// Feature width of both encoders.
    pub encoder_channels: usize,
    /// Initial bias of the teacher's log-variance outputs.
    pub teacher_log_var_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 6,
            iterations: 10,
            beta: 5e-3,
            data_term: DataTermMode::Gradient,
            penalty: PenaltyMode::SquaredL2,
            hidden_channels: 32,
            encoder_channels: 32,
            teacher_log_var_init: -4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if self.hidden_channels == 0 || self.encoder_channels == 0 {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        if !self.teacher_log_var_init.is_finite() {
            return Err(Error::InvalidArgument("teacher_log_var_init must be finite".into()));
        }
        Ok(())
    }
}

/// A diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        LatentGaussian { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn from_tensor(t: &Tensor) -> Self {
        let d = t.channels() / 2;
        LatentGaussian {
            mean: t.data()[..d].to_vec(),
            log_var: t.data()[d..2 * d].to_vec(),
        }
    }
}

/// State carried between recurrent steps: the current image and memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub x: Image,
    /// `[MEMORY_CHANNELS, h, w]`.
    pub memory: Tensor,
}

impl RecurrentState {
    /// `x = A* y`, zero memory.
    pub fn initial(y: &Sinogram, op: &dyn LinearOperator) -> Result<Self> {
        let x = op.adjoint(y)?;
        let (h, w) = x.shape();
        Ok(RecurrentState { x, memory: Tensor::zeros([MEMORY_CHANNELS, h, w]) })
    }
}

/// Convolutional encoder: two blocks of three 3x3 conv+ReLU separated by a
/// 2x2 average pool, a global mean, then a 1x1 conv to `2 * latent_dim`
/// outputs (means followed by log-variances).
pub fn encoder_network(name: &str, in_channels: usize, width: usize, latent_dim: usize) -> Result<Network> {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for block in 0..2 {
        if block == 1 {
            layers.push(LayerSpec::avgpool2());
        }
        for _ in 0..3 {
            layers.push(LayerSpec::conv(c, width, 3));
            layers.push(LayerSpec::relu());
            c = width;
        }
    }
    layers.push(LayerSpec::global_mean());
    layers.push(LayerSpec::conv(width, 2 * latent_dim, 1));
    Network::new(name, layers)
}

/// The recurrent unit's convolutional core: two 3x3 conv+ReLU layers and a
/// 3x3 conv to `1 + MEMORY_CHANNELS` outputs (update, new memory).
pub fn recurrent_network(name: &str, latent_dim: usize, width: usize) -> Result<Network> {
    Network::new(
        name,
        vec![
            LayerSpec::conv(BASE_INPUT_CHANNELS + latent_dim, width, 3),
            LayerSpec::relu(),
            LayerSpec::conv(width, width, 3),
            LayerSpec::relu(),
            LayerSpec::conv(width, 1 + MEMORY_CHANNELS, 3),
        ],
    )
}

/// A learned iterative refiner `x <- x + dx` driven by data and penalty
/// gradients and, optionally, a latent code tiled over the image.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentUnit {
    pub net: Network,
    pub latent_dim: usize,
    pub iterations: usize,
    pub data_term: DataTermMode,
    pub penalty: PenaltyMode,
}

impl RecurrentUnit {
    pub fn new(
        name: &str,
        latent_dim: usize,
        width: usize,
        iterations: usize,
        data_term: DataTermMode,
        penalty: PenaltyMode,
    ) -> Result<Self> {
        Ok(RecurrentUnit {
            net: recurrent_network(name, latent_dim, width)?,
            latent_dim,
            iterations,
            data_term,
            penalty,
        })
    }

    /// He-uniform initialization with a zero output layer, so the untrained
    /// unit returns its starting image. With random output weights the
    /// update compounds over the unrolled steps and the first losses are
    /// many orders of magnitude off.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.net.init_params(params, rng);
        if let Some(last) = self.net.last_param_layer() {
            if let Ok(w) = params.get_mut(&self.net.weight_name(last)) {
                w.data_mut().fill(0.0);
            }
        }
    }

    /// One refinement step on any graph; returns the new image and memory.
    #[allow(clippy::too_many_arguments)]
    pub fn step_graph<'op, G: Graph<'op>>(
        &self,
        g: &mut G,
        params: &ParamSet,
        x: &G::Var,
        memory: &G::Var,
        y: &G::Var,
        op: &'op dyn LinearOperator,
        z_tiled: Option<&G::Var>,
    ) -> Result<(G::Var, G::Var)> {
        let ax = g.forward_op(x, op)?;
        let e = match self.data_term {
            DataTermMode::Gradient => {
                let r = g.sub(&ax, y)?;
                g.adjoint_op(&r, op)?
            }
            DataTermMode::ResidualNorm => {
                let r = g.sub(y, &ax)?;
                let r2 = g.mul(&r, &r)?;
                let s = g.sum(&r2);
                let (h, w) = op.domain_shape();
                g.tile(&s, h, w)?
            }
        };
        let r = match self.penalty {
            PenaltyMode::SquaredL2 => g.scale(x, 2.0),
            PenaltyMode::Tv => g.tv_gradient(x, TV_SMOOTHING)?,
        };
        let mut parts = vec![x.clone(), e, r, memory.clone()];
        if let Some(z) = z_tiled {
            parts.push(z.clone());
        }
        let input = g.concat(&parts)?;
        let out = self.net.apply(g, params, &input)?;
        let dx = g.slice_channels(&out, 0, 1)?;
        let new_memory = g.slice_channels(&out, 1, MEMORY_CHANNELS)?;
        Ok((g.add(x, &dx)?, new_memory))
    }

    /// Runs all `iterations` steps from `x0` (default `A* y`) and zero memory.
    pub fn unroll_graph<'op, G: Graph<'op>>(
        &self,
        g: &mut G,
        params: &ParamSet,
        y: &G::Var,
        op: &'op dyn LinearOperator,
        z: Option<&G::Var>,
        x0: Option<&G::Var>,
    ) -> Result<G::Var> {
        let (h, w) = op.domain_shape();
        let z_tiled = match z {
            Some(z) => Some(g.tile(z, h, w)?),
            None => None,
        };
        let mut x = match x0 {
            Some(x0) => x0.clone(),
            None => g.adjoint_op(y, op)?,
        };
        let mut memory = g.constant(Tensor::zeros([MEMORY_CHANNELS, h, w]));
        for _ in 0..self.iterations {
            let (nx, nm) = self.step_graph(g, params, &x, &memory, y, op, z_tiled.as_ref())?;
            x = nx;
            memory = nm;
        }
        Ok(x)
    }

    fn check_latent(&self, z: Option<&[f64]>) -> Result<()> {
        let got = z.map_or(0, <[f64]>::len);
        if got != self.latent_dim {
            return Err(shape_err(self.latent_dim, got));
        }
        Ok(())
    }

    /// One eager step.
    pub fn step(
        &self,
        params: &ParamSet,
        state: &RecurrentState,
        y: &Sinogram,
        op: &dyn LinearOperator,
        z: Option<&[f64]>,
    ) -> Result<RecurrentState> {
        self.check_latent(z)?;
        y.check_shape(op.range_shape())?;
        state.x.check_shape(op.domain_shape())?;
        let (h, w) = op.domain_shape();
        state.memory.check_shape([MEMORY_CHANNELS, h, w])?;
        let mut g = Eager;
        let xv = g.constant(Tensor::from_grid(&state.x));
        let mv = g.constant(state.memory.clone());
        let yv = g.constant(Tensor::from_grid(y));
        let zt = match z {
            Some(z) => {
                let zv = g.constant(Tensor::vector(z.to_vec()));
                Some(g.tile(&zv, h, w)?)
            }
            None => None,
        };
        let (nx, nm) = self.step_graph(&mut g, params, &xv, &mv, &yv, op, zt.as_ref())?;
        Ok(RecurrentState { x: nx.channel_grid(0), memory: (*nm).clone() })
    }

    /// Eager unrolled reconstruction.
    pub fn reconstruct(
        &self,
        params: &ParamSet,
        y: &Sinogram,
        op: &dyn LinearOperator,
        z: Option<&[f64]>,
        x0: Option<&Image>,
    ) -> Result<Image> {
        self.check_latent(z)?;
        y.check_shape(op.range_shape())?;
        if let Some(x0) = x0 {
            x0.check_shape(op.domain_shape())?;
        }
        let mut g = Eager;
        let yv = g.constant(Tensor::from_grid(y));
        let zv = z.map(|z| g.constant(Tensor::vector(z.to_vec())));
        let x0v = x0.map(|x| g.constant(Tensor::from_grid(x)));
        let out = self.unroll_graph(&mut g, params, &yv, op, zv.as_ref(), x0v.as_ref())?;
        Ok(out.channel_grid(0))
    }
}

/// Encoder output on a graph, split into mean and clamped log-variance.
pub fn encode_graph<'op, G: Graph<'op>>(
    g: &mut G,
    net: &Network,
    params: &ParamSet,
    input: &G::Var,
    latent_dim: usize,
) -> Result<(G::Var, G::Var)> {
    let out = net.apply(g, params, input)?;
    let mean = g.slice_channels(&out, 0, latent_dim)?;
    let raw = g.slice_channels(&out, latent_dim, latent_dim)?;
    Ok((mean, g.clamp(&raw, -LOG_VAR_BOUND, LOG_VAR_BOUND)))
}

/// `KL(q || p)` between diagonal Gaussians, as a scalar graph node.
pub fn kl_graph<'op, G: Graph<'op>>(
    g: &mut G,
    mean_q: &G::Var,
    log_var_q: &G::Var,
    mean_p: &G::Var,
    log_var_p: &G::Var,
) -> Result<G::Var> {
    let ratio = {
        let d = g.sub(log_var_q, log_var_p)?;
        g.exp(&d)
    };
    let mahal = {
        let d = g.sub(mean_p, mean_q)?;
        let d2 = g.mul(&d, &d)?;
        let neg = g.scale(log_var_p, -1.0);
        let inv = g.exp(&neg);
        g.mul(&d2, &inv)?
    };
    let logdet = g.sub(log_var_p, log_var_q)?;
    let s = g.add(&ratio, &mahal)?;
    let s = g.add(&s, &logdet)?;
    let s = g.add_scalar(&s, -1.0);
    let total = g.sum(&s);
    Ok(g.scale(&total, 0.5))
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gauss(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    let d = q.dim();
    for (len, what) in [(q.log_var.len(), d), (p.mean.len(), d), (p.log_var.len(), d)] {
        if len != what {
            return Err(shape_err(what, len));
        }
    }
    let mut g = Eager;
    let v = |g: &mut Eager, x: &[f64]| g.constant(Tensor::vector(x.to_vec()));
    let (mq, lq, mp, lp) = (v(&mut g, &q.mean), v(&mut g, &q.log_var), v(&mut g, &p.mean), v(&mut g, &p.log_var));
    Ok(kl_graph(&mut g, &mq, &lq, &mp, &lp)?.item())
}

/// Reparameterized draw `mean + exp(log_var / 2) * eps`.
pub fn sample_latent(dist: &LatentGaussian, rng: &mut impl Rng) -> Vec<f64> {
    dist.mean
        .iter()
        .zip(&dist.log_var)
        .map(|(m, lv)| {
            let e: f64 = StandardNormal.sample(rng);
            m + libm::exp(0.5 * lv) * e
        })
        .collect()
}

/// Parameters and architecture of a complete model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    teacher: Network,
    student: Network,
    recurrent: RecurrentUnit,
    params: ParamSet,
}

/// Scalar objective and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// The reconstruction part of `loss`.
    pub reconstruction: f64,
    /// The weighted KL part of `loss`.
    pub kl: f64,
    pub gradients: Gradients,
}

impl ModelBundle {
    fn networks(config: &ModelConfig) -> Result<(Network, Network, RecurrentUnit)> {
        config.validate()?;
        let d = config.latent_dim;
        if d == 0 {
            return Err(Error::InvalidArgument("latent_dim must be at least 1".into()));
        }
        Ok((
            encoder_network(TEACHER, 2, config.encoder_channels, d)?,
            encoder_network(STUDENT, 1, config.encoder_channels, d)?,
            RecurrentUnit::new(
                RECURRENT,
                d,
                config.hidden_channels,
                config.iterations,
                config.data_term,
                config.penalty,
            )?,
        ))
    }

    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (teacher, student, recurrent) = Self::networks(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        teacher.init_params(&mut params, &mut rng);
        student.init_params(&mut params, &mut rng);
        recurrent.init_params(&mut params, &mut rng);
        let last = teacher.last_param_layer().expect("encoder has parameters");
        let bias = params.get_mut(&teacher.bias_name(last))?;
        let dz = config.latent_dim;
        bias.data_mut()[dz..].fill(config.teacher_log_var_init);
        Ok(ModelBundle { config, teacher, student, recurrent, params })
    }

    /// Reassembles a model from stored parameters, checking every name and
    /// shape against the architecture.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let (teacher, student, recurrent) = Self::networks(&config)?;
        let mut reference = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        teacher.init_params(&mut reference, &mut rng);
        student.init_params(&mut reference, &mut rng);
        recurrent.init_params(&mut reference, &mut rng);
        if reference.len() != params.len() {
            return Err(shape_err(reference.len(), params.len()));
        }
        for (name, entry) in reference.iter() {
            params.get(name)?.check_shape(entry.value.shape())?;
        }
        Ok(ModelBundle { config, teacher, student, recurrent, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }

    pub fn student(&self) -> &Network {
        &self.student
    }

    pub fn recurrent(&self) -> &RecurrentUnit {
        &self.recurrent
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    /// Teacher input: the two-channel stack `[Ax; y]`.
    fn teacher_input(x: &Image, y: &Sinogram, op: &dyn LinearOperator) -> Result<Tensor> {
        let ax = op.apply(x)?;
        y.check_shape(op.range_shape())?;
        let mut data = ax.into_vec();
        data.extend_from_slice(y.as_slice());
        let (a, b) = op.range_shape();
        Tensor::from_vec([2, a, b], data)
    }

    /// `q(z | x, y, A)`.
    pub fn teacher_encode(&self, x: &Image, y: &Sinogram, op: &dyn LinearOperator) -> Result<LatentGaussian> {
        let input = Self::teacher_input(x, y, op)?;
        let mut g = Eager;
        let iv = g.constant(input);
        let out = self.teacher.apply(&mut g, &self.params, &iv)?;
        Ok(clamped(LatentGaussian::from_tensor(&out)))
    }

    /// `p(z | y)`.
    pub fn student_encode(&self, y: &Sinogram) -> Result<LatentGaussian> {
        let mut g = Eager;
        let iv = g.constant(Tensor::from_grid(y));
        let out = self.student.apply(&mut g, &self.params, &iv)?;
        Ok(clamped(LatentGaussian::from_tensor(&out)))
    }

    /// One step of the recurrent unit with latent code `z`.
    pub fn recurrent_step(
        &self,
        state: &RecurrentState,
        y: &Sinogram,
        op: &dyn LinearOperator,
        z: &[f64],
    ) -> Result<RecurrentState> {
        self.recurrent.step(&self.params, state, y, op, Some(z))
    }

    /// The reconstruction for latent code `z` after `K` steps.
    pub fn decode(&self, y: &Sinogram, op: &dyn LinearOperator, z: &[f64], x0: Option<&Image>) -> Result<Image> {
        self.recurrent.reconstruct(&self.params, y, op, Some(z), x0)
    }

    /// Objective contribution of one tuple for fixed noise draws, recorded
    /// on `tape`. `noise` holds one `latent_dim` vector per latent sample.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_graph<'op>(
        &self,
        tape: &mut Tape<'op>,
        params: &ParamSet,
        tuple: &TrainingTuple,
        op: &'op dyn LinearOperator,
        noise: &[Vec<f64>],
        batch_size: usize,
    ) -> Result<(Var, Var)> {
        let d = self.config.latent_dim;
        if noise.is_empty() {
            return Err(Error::InvalidArgument("at least one latent sample is required".into()));
        }
        let m = batch_size as f64;
        let l = noise.len() as f64;
        let yv = tape.constant(Tensor::from_grid(&tuple.y));
        let xv = tape.constant(Tensor::from_grid(&tuple.x));
        let ax = tape.forward_op(&xv, op)?;
        let t_in = tape.concat(&[ax, yv.clone()])?;
        let (mq, lq) = encode_graph(tape, &self.teacher, params, &t_in, d)?;
        let (mp, lp) = encode_graph(tape, &self.student, params, &yv, d)?;
        let kl = kl_graph(tape, &mq, &lq, &mp, &lp)?;
        let kl = tape.scale(&kl, self.config.beta / (tuple.scale * tuple.scale) / m);
        let half_lq = tape.scale(&lq, 0.5);
        let std = tape.exp(&half_lq);
        let mut recon: Option<Var> = None;
        for eps in noise {
            if eps.len() != d {
                return Err(shape_err(d, eps.len()));
            }
            let ev = tape.constant(Tensor::vector(eps.clone()));
            let se = tape.mul(&std, &ev)?;
            let z = tape.add(&mq, &se)?;
            let xhat = self.recurrent.unroll_graph(tape, params, &yv, op, Some(&z), None)?;
            let diff = tape.sub(&xv, &xhat)?;
            let d2 = tape.mul(&diff, &diff)?;
            let s = tape.sum(&d2);
            recon = Some(match recon {
                Some(acc) => tape.add(&acc, &s)?,
                None => s,
            });
        }
        let recon = recon.expect("noise is non-empty");
        let recon = tape.scale(&recon, 1.0 / (2.0 * m * l));
        Ok((recon, kl))
    }

    /// Loss and gradient for a minibatch with explicit noise
    /// (`noise[i][l]` is the draw for tuple `i`, latent sample `l`).
    pub fn loss_with_noise<E: Executor>(
        &self,
        batch: &[TrainingTuple],
        ops: &[&dyn LinearOperator],
        noise: &[Vec<Vec<f64>>],
        exec: &E,
    ) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        if noise.len() != batch.len() {
            return Err(shape_err(batch.len(), noise.len()));
        }
        for t in batch {
            if t.operator_id >= ops.len() {
                return Err(Error::InvalidArgument(format!(
                    "operator id {} out of range ({} operators)",
                    t.operator_id,
                    ops.len()
                )));
            }
        }
        let m = batch.len();
        let parts = exec.map(m, |i| -> Result<(f64, f64, Gradients)> {
            let tuple = &batch[i];
            let op = ops[tuple.operator_id];
            let mut tape = Tape::new();
            let (recon, kl) = self.sample_loss_graph(&mut tape, &self.params, tuple, op, &noise[i], m)?;
            let total = tape.add(&recon, &kl)?;
            let grads = tape.backward(total, &Tensor::scalar(1.0))?;
            Ok((tape.value(&recon).item(), tape.value(&kl).item(), grads.params(&self.params)))
        });
        let mut out = LossOutput {
            loss: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
            gradients: Gradients::zeros_like(&self.params),
        };
        for part in parts {
            let (r, k, g) = part?;
            out.reconstruction += r;
            out.kl += k;
            out.gradients.add_assign(&g);
        }
        out.loss = out.reconstruction + out.kl;
        Ok(out)
    }

    /// Draws `samples` noise vectors per tuple from `rng`.
    pub fn draw_noise(&self, batch_len: usize, samples: usize, rng: &mut impl Rng) -> Vec<Vec<Vec<f64>>> {
        (0..batch_len)
            .map(|_| {
                (0..samples)
                    .map(|_| (0..self.config.latent_dim).map(|_| StandardNormal.sample(rng)).collect())
                    .collect()
            })
            .collect()
    }

    /// Monte-Carlo estimate of the objective with `samples` latent draws
    /// per tuple, and its gradient.
    pub fn loss_minibatch<E: Executor>(
        &self,
        batch: &[TrainingTuple],
        ops: &[&dyn LinearOperator],
        samples: usize,
        rng: &mut impl Rng,
        exec: &E,
    ) -> Result<LossOutput> {
        let noise = self.draw_noise(batch.len(), samples, rng);
        self.loss_with_noise(batch, ops, &noise, exec)
    }

    /// One ADAM update.
    pub fn apply_gradients(&mut self, grads: &Gradients, adam: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, grads, adam)
    }
}

fn clamped(mut g: LatentGaussian) -> LatentGaussian {
    for v in &mut g.log_var {
        *v = v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND);
    }
    g
}
