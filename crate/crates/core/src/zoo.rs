//! LeNet-5, AlexNet and VGG built from variational layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bayes_conv2d, bayes_linear, init_params, derive_seed, BoundParams, MuInit, NoiseStream};
use crate::tensor::conv_output_len;
use crate::{Real, Tape, Tensor, Var};

/// Beta of every hidden Softplus.
pub const HIDDEN_SOFTPLUS_BETA: Real = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lenet5,
    Alexnet,
    Vgg,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Lenet5 => "lenet5",
            Arch::Alexnet => "alexnet",
            Arch::Vgg => "vgg",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Arch::Lenet5),
            "alexnet" => Ok(Arch::Alexnet),
            "vgg" => Ok(Arch::Vgg),
            other => Err(Error::Contract(format!(
                "unknown architecture {other:?} (expected lenet5, alexnet or vgg)"
            ))),
        }
    }
}

/// Whether weights carry a posterior (`Bayesian`) or are point estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Bayesian,
    Frequentist,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bayesian => "bayesian",
            Mode::Frequentist => "frequentist",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayesian" => Ok(Mode::Bayesian),
            "frequentist" => Ok(Mode::Frequentist),
            other => Err(Error::Contract(format!(
                "unknown mode {other:?} (expected bayesian or frequentist)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Softplus after the layer. The classifier has none: its outputs go to
    /// the Softplus-normalization head.
    pub softplus: bool,
}

impl LayerSpec {
    fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            softplus: true,
        }
    }

    fn pool() -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool { size: 2, stride: 2 },
            softplus: false,
        }
    }

    fn linear(inputs: usize, outputs: usize, softplus: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Linear { inputs, outputs },
            softplus,
        }
    }

    fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            softplus: false,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }

    /// Weight shape and fan-in of a weight-bearing layer.
    fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            )),
            LayerKind::Linear { inputs, outputs } => Some((vec![inputs, outputs], inputs)),
            _ => None,
        }
    }

    fn out_features(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            LayerKind::Linear { outputs, .. } => Some(outputs),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
    /// `[C, H, W]` of one image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn new(arch: Arch, in_channels: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {num_classes}")));
        }
        if in_channels == 0 {
            return Err(Error::Contract("input needs at least one channel".into()));
        }
        let c = in_channels;
        let layers = match arch {
            Arch::Lenet5 => vec![
                LayerSpec::conv(c, 6, 5, 1, 0),
                LayerSpec::pool(),
                LayerSpec::conv(6, 16, 5, 1, 0),
                LayerSpec::pool(),
                LayerSpec::flatten(),
                LayerSpec::linear(400, 120, true),
                LayerSpec::linear(120, 84, true),
                LayerSpec::linear(84, num_classes, false),
            ],
            Arch::Alexnet => vec![
                LayerSpec::conv(c, 64, 11, 4, 5),
                LayerSpec::pool(),
                LayerSpec::conv(64, 192, 5, 1, 2),
                LayerSpec::pool(),
                LayerSpec::conv(192, 384, 3, 1, 1),
                LayerSpec::conv(384, 256, 3, 1, 1),
                LayerSpec::conv(256, 128, 3, 1, 1),
                LayerSpec::pool(),
                LayerSpec::flatten(),
                LayerSpec::linear(128, num_classes, false),
            ],
            Arch::Vgg => {
                let mut layers = Vec::new();
                let mut prev = c;
                for (width, convs) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
                    for _ in 0..convs {
                        layers.push(LayerSpec::conv(prev, width, 3, 1, 1));
                        prev = width;
                    }
                    layers.push(LayerSpec::pool());
                }
                layers.push(LayerSpec::flatten());
                layers.push(LayerSpec::linear(512, num_classes, false));
                layers
            }
        };
        let spec = ArchitectureSpec {
            arch,
            layers,
            input_shape: [c, 32, 32],
            num_classes,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Per-sample activation shape after every layer, starting with the
    /// input shape; errors if the stack does not compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut out = vec![cur.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::shape("architecture", format!("layer {i}: {detail}"));
            cur = match l.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(format!("conv expects {in_channels} channels, got {cur:?}")));
                    }
                    if cur[1] + 2 * padding < kernel || cur[2] + 2 * padding < kernel {
                        return Err(bad(format!("kernel {kernel} too large for {cur:?}")));
                    }
                    vec![
                        out_channels,
                        conv_output_len(cur[1], kernel, stride, padding),
                        conv_output_len(cur[2], kernel, stride, padding),
                    ]
                }
                LayerKind::MaxPool { size, stride } => {
                    if cur.len() != 3 || cur[1] < size || cur[2] < size {
                        return Err(bad(format!("pool {size} on {cur:?}")));
                    }
                    vec![cur[0], (cur[1] - size) / stride + 1, (cur[2] - size) / stride + 1]
                }
                LayerKind::Flatten => vec![cur.iter().product()],
                LayerKind::Linear { inputs, outputs } => {
                    if cur != [inputs] {
                        return Err(bad(format!("linear expects [{inputs}], got {cur:?}")));
                    }
                    vec![outputs]
                }
            };
            out.push(cur.clone());
        }
        if cur != [self.num_classes] {
            return Err(Error::shape(
                "architecture",
                format!("final output {cur:?}, expected [{}]", self.num_classes),
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Mu,
    LogAlpha,
    Bias,
}

/// One named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct WeightSlots {
    mu: usize,
    log_alpha: usize,
    bias: usize,
}

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub mode: Mode,
    params: Vec<Param>,
    slots: Vec<Option<WeightSlots>>,
}

/// Builds `arch` for `[in_channels, 32, 32]` inputs with freshly
/// initialized parameters.
pub fn build(arch: Arch, in_channels: usize, num_classes: usize, mode: Mode, mu_init: MuInit, seed: u64) -> Result<Model> {
    let spec = ArchitectureSpec::new(arch, in_channels, num_classes)?;
    let mut params = Vec::new();
    let mut slots = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let Some((shape, fan_in)) = layer.weight_shape() else {
            slots.push(None);
            continue;
        };
        let post = init_params(&shape, fan_in, derive_seed(seed, &[i as u64]), mu_init);
        let width = layer.out_features().expect("weight layer");
        let base = params.len();
        params.push(Param {
            name: format!("layer{i}.mu"),
            kind: ParamKind::Mu,
            value: post.mu,
        });
        params.push(Param {
            name: format!("layer{i}.log_alpha"),
            kind: ParamKind::LogAlpha,
            value: post.log_alpha,
        });
        params.push(Param {
            name: format!("layer{i}.bias"),
            kind: ParamKind::Bias,
            value: Tensor::zeros(&[width]),
        });
        slots.push(Some(WeightSlots {
            mu: base,
            log_alpha: base + 1,
            bias: base + 2,
        }));
    }
    Ok(Model {
        spec,
        mode,
        params,
        slots,
    })
}

impl Model {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Whether the optimizer updates this parameter. Point-estimate models
    /// never touch their `log_alpha` tensors.
    pub fn is_trainable(&self, index: usize) -> bool {
        !(self.mode == Mode::Frequentist && self.params[index].kind == ParamKind::LogAlpha)
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// exactly once with its current shape.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Consistency(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut fresh: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (name, value) in values {
            let i = self
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Consistency(format!("unknown parameter {name:?}")))?;
            if value.shape() != self.params[i].value.shape() {
                return Err(Error::Consistency(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.params[i].value.shape()
                )));
            }
            if fresh[i].replace(value).is_some() {
                return Err(Error::Consistency(format!("parameter {name:?} given twice")));
            }
        }
        for (p, v) in self.params.iter_mut().zip(fresh) {
            p.value = v.expect("count and uniqueness checked");
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, trainable ones as gradient leaves
    /// when `grads` is set, everything else as constants.
    pub fn bind(&self, tape: &mut Tape, grads: bool) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| {
                let v = self.params[i].value.clone();
                if grads && self.is_trainable(i) {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// Pre-normalization class scores `[N, num_classes]` for `input` of
    /// shape `[N, C, 32, 32]`. Layer `l` draws its noise from substream `l`
    /// of `noise`. Point-estimate models ignore `stochastic`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], input: Var, noise: &NoiseStream, stochastic: bool) -> Result<Var> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {:?}], got {shape:?}", self.spec.input_shape),
            ));
        }
        let stochastic = stochastic && self.mode == Mode::Bayesian;
        let mut x = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let layer_noise = noise.substream(i as u64);
            x = match (layer.kind, self.slots[i]) {
                (LayerKind::Conv { stride, padding, .. }, Some(s)) => {
                    let p = BoundParams {
                        mu: vars[s.mu],
                        log_alpha: vars[s.log_alpha],
                    };
                    bayes_conv2d(tape, x, p, Some(vars[s.bias]), stride, padding, &layer_noise, stochastic)?
                }
                (LayerKind::Linear { .. }, Some(s)) => {
                    let p = BoundParams {
                        mu: vars[s.mu],
                        log_alpha: vars[s.log_alpha],
                    };
                    bayes_linear(tape, x, p, Some(vars[s.bias]), &layer_noise, stochastic)?
                }
                (LayerKind::MaxPool { size, stride }, None) => tape.maxpool2d(x, size, stride)?,
                (LayerKind::Flatten, None) => tape.flatten(x)?,
                _ => unreachable!("slots follow the layer list"),
            };
            if layer.softplus {
                x = tape.softplus(x, HIDDEN_SOFTPLUS_BETA)?;
            }
        }
        Ok(x)
    }

    /// Gradient-free forward pass over `images`.
    pub fn forward(&self, images: &Tensor, noise: &NoiseStream, stochastic: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.forward_on(&mut tape, &vars, x, noise, stochastic)?;
        Ok(tape.value(y).clone())
    }

    /// `(mu, log_alpha)` index pairs of every weight-bearing layer.
    pub fn posterior_slots(&self) -> Vec<(usize, usize)> {
        self.slots.iter().flatten().map(|s| (s.mu, s.log_alpha)).collect()
    }
}
