//! Layer specifications and sequential networks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::graph::{Graph, Tape, TapeGradients, Var};
use super::params::{he_uniform, Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LayerKind {
    Conv2d,
    Relu,
    AvgPool2,
    GlobalMean,
    Affine,
}

/// One layer of a sequential network.
///
/// Convolutions use an odd kernel, stride 1 and `kernel_size / 2` zero
/// padding, so spatial dims are preserved. Affine layers flatten their input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel_size,
            in_channels,
            out_channels,
            stride: 1,
            padding: kernel_size / 2,
        }
    }

    pub fn affine(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Affine,
            kernel_size: 1,
            in_channels: in_features,
            out_channels: out_features,
            stride: 1,
            padding: 0,
        }
    }

    fn parameterless(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            kernel_size: 0,
            in_channels: 0,
            out_channels: 0,
            stride: if kind == LayerKind::AvgPool2 { 2 } else { 1 },
            padding: 0,
        }
    }

    pub fn relu() -> Self {
        Self::parameterless(LayerKind::Relu)
    }

    pub fn avgpool2() -> Self {
        Self::parameterless(LayerKind::AvgPool2)
    }

    pub fn global_mean() -> Self {
        Self::parameterless(LayerKind::GlobalMean)
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::Affine)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv2d => {
                if self.kernel_size % 2 == 0 || self.stride != 1 || self.padding != self.kernel_size / 2 {
                    return Err(Error::InvalidArgument(format!(
                        "conv2d needs an odd kernel with stride 1 and same padding: {self:?}"
                    )));
                }
                if self.in_channels == 0 || self.out_channels == 0 {
                    return Err(Error::InvalidArgument("conv2d needs nonzero channels".into()));
                }
            }
            LayerKind::Affine => {
                if self.in_channels == 0 || self.out_channels == 0 {
                    return Err(Error::InvalidArgument("affine needs nonzero features".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn weight_shape(&self) -> [usize; 3] {
        match self.kind {
            LayerKind::Conv2d => [self.out_channels, self.in_channels, self.kernel_size * self.kernel_size],
            _ => [self.out_channels, self.in_channels, 1],
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }
}

/// A sequential stack of layers whose parameters live under `name.` in a
/// [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    name: String,
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let name = name.into();
        for l in &layers {
            l.validate()?;
        }
        // Channel chain between parameterized layers.
        let mut channels: Option<usize> = None;
        for l in &layers {
            if l.kind == LayerKind::Conv2d {
                if let Some(c) = channels {
                    if c != l.in_channels {
                        return Err(Error::InvalidArgument(format!(
                            "network `{name}`: layer expects {} channels, previous produces {c}",
                            l.in_channels
                        )));
                    }
                }
            }
            if l.has_params() {
                channels = Some(l.out_channels);
            }
        }
        Ok(Network { name, layers })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.name)
    }

    /// Index of the last parameterized layer.
    pub fn last_param_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.has_params())
    }

    /// He-uniform weights and zero biases for every parameterized layer.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for (i, l) in self.layers.iter().enumerate() {
            if l.has_params() {
                params.insert(self.weight_name(i), he_uniform(rng, l.weight_shape(), l.fan_in()));
                params.insert(self.bias_name(i), Tensor::zeros([l.out_channels, 1, 1]));
            }
        }
    }

    /// Runs the stack on any graph back end.
    pub fn apply<'op, G: Graph<'op>>(&self, g: &mut G, params: &ParamSet, input: &G::Var) -> Result<G::Var> {
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = match l.kind {
                LayerKind::Conv2d => {
                    let w = g.param(params, &self.weight_name(i))?;
                    let b = g.param(params, &self.bias_name(i))?;
                    g.conv2d(&x, &w, &b, l.kernel_size)?
                }
                LayerKind::Affine => {
                    let w = g.param(params, &self.weight_name(i))?;
                    let b = g.param(params, &self.bias_name(i))?;
                    g.affine(&x, &w, &b)?
                }
                LayerKind::Relu => g.relu(&x),
                LayerKind::AvgPool2 => g.avgpool2(&x)?,
                LayerKind::GlobalMean => g.global_mean(&x),
            };
        }
        Ok(x)
    }
}

/// Record of a [`forward`] call sufficient for [`backward`].
pub struct Recording {
    tape: Tape<'static>,
    input: Var,
    output: Var,
    input_shape: [usize; 3],
    params: ParamSet,
}

impl Recording {
    pub fn tape(&self) -> &Tape<'static> {
        &self.tape
    }
}

/// Forward pass of a network, returning the output and a recording.
pub fn forward(net: &Network, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Recording)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = net.apply(&mut tape, params, &x)?;
    let out = tape.value(&y).clone();
    Ok((
        out,
        Recording {
            tape,
            input: x,
            output: y,
            input_shape: input.shape(),
            params: params.clone(),
        },
    ))
}

/// Reverse pass: parameter gradients and the gradient with respect to the
/// input, given the gradient of some scalar with respect to the output.
pub fn backward(rec: &Recording, output_gradient: &Tensor) -> Result<(Gradients, Tensor)> {
    let grads: TapeGradients = rec.tape.backward(rec.output, output_gradient)?;
    let input_grad = grads.wrt(rec.input, rec.input_shape)?;
    Ok((grads.params(&rec.params), input_grad))
}
