//! Convolutional feature extractor feeding the fuzzy head.
//!
//! A backbone is described by a [`BackboneConfig`]: an input shape plus an
//! ordered chain of layer descriptors ending in `flatten`. The text form is
//!
//! ```text
//! 1x28x28: conv(6,5,1,0) > relu > maxpool(2,2) > conv(16,5,1,0) > relu > maxpool(2,2) > flatten
//! ```
//!
//! with `conv(out_channels, kernel, stride, pad)`, `maxpool(kernel, stride)`,
//! `bn` (per-channel normalization) and `residual[<inner chain>]`, whose
//! inner chain must preserve the activation shape.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{ConvAttrs, NormStats, PoolAttrs, Tape, Var};
use crate::tensor::{window_out, Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    BatchNorm,
    Residual(Vec<LayerSpec>),
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// `(channels, height, width)` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl BackboneConfig {
    /// The LeNet-style convolutional base used by default.
    pub fn lenet() -> Self {
        use LayerSpec::*;
        Self {
            input: [1, 28, 28],
            layers: vec![
                Conv { out_channels: 6, kernel: 5, stride: 1, pad: 0 },
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv { out_channels: 16, kernel: 5, stride: 1, pad: 0 },
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Flatten,
            ],
        }
    }

    /// Shape-checks the chain and returns the feature width `N_V`.
    pub fn validate(&self) -> Result<usize> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Backbone {
                index: 0,
                message: format!("input shape {:?} has a zero extent", self.input),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Backbone {
                index: 0,
                message: "layer list is empty".into(),
            });
        }
        match self.layers.last() {
            Some(LayerSpec::Flatten) => {}
            _ => {
                return Err(Error::Backbone {
                    index: self.layers.len() - 1,
                    message: "the final layer must be flatten".into(),
                })
            }
        }
        let shape = propagate(&self.layers, self.input.to_vec(), true)?;
        Ok(shape[0])
    }

    pub fn feature_width(&self) -> Result<usize> {
        self.validate()
    }
}

fn layer_err(index: usize, message: impl Into<String>) -> Error {
    Error::Backbone {
        index,
        message: message.into(),
    }
}

/// Walks `layers` from `shape` (without the batch axis).
fn propagate(layers: &[LayerSpec], mut shape: Vec<usize>, top_level: bool) -> Result<Vec<usize>> {
    for (i, layer) in layers.iter().enumerate() {
        let spatial = |shape: &[usize]| -> Result<[usize; 3]> {
            match *shape {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(layer_err(i, "expects a C x H x W activation")),
            }
        };
        shape = match layer {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                let [_, h, w] = spatial(&shape)?;
                if *out_channels == 0 {
                    return Err(layer_err(i, "conv needs at least one output channel"));
                }
                match (window_out(h, *kernel, *stride, *pad), window_out(w, *kernel, *stride, *pad)) {
                    (Some(oh), Some(ow)) => vec![*out_channels, oh, ow],
                    _ => return Err(layer_err(i, format!("conv kernel {kernel} does not fit {h}x{w}"))),
                }
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let [c, h, w] = spatial(&shape)?;
                match (window_out(h, *kernel, *stride, 0), window_out(w, *kernel, *stride, 0)) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => return Err(layer_err(i, format!("pool window {kernel} does not fit {h}x{w}"))),
                }
            }
            LayerSpec::Relu | LayerSpec::BatchNorm => shape,
            LayerSpec::Residual(inner) => {
                if inner.is_empty() {
                    return Err(layer_err(i, "residual block is empty"));
                }
                let out = propagate(inner, shape.clone(), false).map_err(|e| match e {
                    Error::Backbone { index, message } => {
                        layer_err(i, format!("residual inner layer {index}: {message}"))
                    }
                    other => other,
                })?;
                if out != shape {
                    return Err(layer_err(
                        i,
                        format!("residual inner chain maps {shape:?} to {out:?}"),
                    ));
                }
                out
            }
            LayerSpec::Flatten => {
                if !top_level || i + 1 != layers.len() {
                    return Err(layer_err(i, "flatten may only appear as the final layer"));
                }
                vec![shape.iter().product()]
            }
        };
    }
    Ok(shape)
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                write!(f, "conv({out_channels},{kernel},{stride},{pad})")
            }
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { kernel, stride } => write!(f, "maxpool({kernel},{stride})"),
            LayerSpec::BatchNorm => f.write_str("bn"),
            LayerSpec::Residual(inner) => write!(f, "residual[{}]", Chain(inner)),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

struct Chain<'a>(&'a [LayerSpec]);

impl fmt::Display for Chain<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" > ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl fmt::Display for BackboneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "{c}x{h}x{w}: {}", Chain(&self.layers))
    }
}

/// Parses `CxHxW`.
pub fn parse_input_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .trim()
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| layer_err(0, format!("bad input shape '{s}', expected CxHxW")))?;
    match dims[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(layer_err(0, format!("bad input shape '{s}', expected CxHxW"))),
    }
}

/// Splits on `>` outside brackets.
fn split_chain(s: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in s.char_indices() {
        match ch {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            '>' if depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(layer_err(parts.len(), "unbalanced brackets"));
        }
    }
    if depth != 0 {
        return Err(layer_err(parts.len(), "unbalanced brackets"));
    }
    parts.push(s[start..].trim());
    Ok(parts)
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    split_chain(s)?
        .into_iter()
        .enumerate()
        .map(|(i, tok)| parse_layer(tok).map_err(|m| layer_err(i, m)))
        .collect()
}

fn parse_layer(tok: &str) -> std::result::Result<LayerSpec, String> {
    let args = |body: &str, n: usize| -> std::result::Result<Vec<usize>, String> {
        let v: Vec<usize> = body
            .split(',')
            .map(|a| a.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("bad arguments in '{tok}'"))?;
        if v.len() != n {
            return Err(format!("'{tok}' takes {n} arguments"));
        }
        Ok(v)
    };
    if let Some(inner) = tok.strip_prefix("residual[").and_then(|r| r.strip_suffix(']')) {
        let layers = parse_layers(inner).map_err(|e| e.to_string())?;
        return Ok(LayerSpec::Residual(layers));
    }
    if let Some(body) = tok.strip_prefix("conv(").and_then(|r| r.strip_suffix(')')) {
        let a = args(body, 4)?;
        return Ok(LayerSpec::Conv { out_channels: a[0], kernel: a[1], stride: a[2], pad: a[3] });
    }
    if let Some(body) = tok.strip_prefix("maxpool(").and_then(|r| r.strip_suffix(')')) {
        let a = args(body, 2)?;
        return Ok(LayerSpec::MaxPool { kernel: a[0], stride: a[1] });
    }
    match tok {
        "relu" => Ok(LayerSpec::Relu),
        "bn" => Ok(LayerSpec::BatchNorm),
        "flatten" => Ok(LayerSpec::Flatten),
        _ => Err(format!("unknown layer '{tok}'")),
    }
}

impl FromStr for BackboneConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (input, chain) = s
            .split_once(':')
            .ok_or_else(|| layer_err(0, "expected 'CxHxW: layer > layer > ...'"))?;
        Ok(Self {
            input: parse_input_shape(input)?,
            layers: parse_layers(chain)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        attrs: ConvAttrs,
    },
    Relu,
    MaxPool(PoolAttrs),
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Residual(Vec<Layer<T>>),
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization layers; running statistics updated.
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    config: BackboneConfig,
    layers: Vec<Layer<T>>,
    feature_width: usize,
}

/// Per-layer activations of one batch, pre- and post-layer.
#[derive(Clone, Debug)]
pub struct ActivationTrace<T = f32> {
    pub layers: Vec<LayerActivation<T>>,
}

#[derive(Clone, Debug)]
pub struct LayerActivation<T = f32> {
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

/// Result of running the backbone on a tape.
pub struct BackboneForward<T> {
    pub features: Var,
    /// Parameter names and the tape variables they were bound to.
    pub params: Vec<(String, Var)>,
    /// `(input, output)` variables per top-level layer.
    pub trace: Vec<(Var, Var)>,
    /// Batch statistics seen by normalization layers: `(name prefix, mean, var)`.
    pub norm_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

fn init_layers<T: Real, R: Rng + ?Sized>(specs: &[LayerSpec], mut channels: usize, rng: &mut R) -> Result<Vec<Layer<T>>> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        layers.push(match spec {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                let fan_in = channels * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                let n = out_channels * fan_in;
                let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
                let weight = Tensor::new(vec![*out_channels, channels, *kernel, *kernel], data)?;
                channels = *out_channels;
                Layer::Conv {
                    weight,
                    bias: Tensor::zeros(&[*out_channels]),
                    attrs: ConvAttrs { stride: *stride, pad: *pad },
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(PoolAttrs { kernel: *kernel, stride: *stride }),
            LayerSpec::BatchNorm => Layer::BatchNorm {
                gamma: Tensor::full(&[channels], T::one()),
                beta: Tensor::zeros(&[channels]),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::full(&[channels], T::one()),
            },
            LayerSpec::Residual(inner) => Layer::Residual(init_layers(inner, channels, rng)?),
            LayerSpec::Flatten => Layer::Flatten,
        });
    }
    Ok(layers)
}

fn visit<'a, T>(layers: &'a [Layer<T>], prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Tensor<T>)>) {
    for (i, layer) in layers.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Conv { weight, bias, .. } if !buffers => {
                out.push((format!("{p}.weight"), weight));
                out.push((format!("{p}.bias"), bias));
            }
            Layer::BatchNorm { gamma, beta, .. } if !buffers => {
                out.push((format!("{p}.gamma"), gamma));
                out.push((format!("{p}.beta"), beta));
            }
            Layer::BatchNorm { running_mean, running_var, .. } if buffers => {
                out.push((format!("{p}.running_mean"), running_mean));
                out.push((format!("{p}.running_var"), running_var));
            }
            Layer::Residual(inner) => visit(inner, &p, buffers, out),
            _ => {}
        }
    }
}

fn visit_mut<'a, T>(layers: &'a mut [Layer<T>], prefix: &str, buffers: bool, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Conv { weight, bias, .. } if !buffers => {
                out.push((format!("{p}.weight"), weight));
                out.push((format!("{p}.bias"), bias));
            }
            Layer::BatchNorm { gamma, beta, .. } if !buffers => {
                out.push((format!("{p}.gamma"), gamma));
                out.push((format!("{p}.beta"), beta));
            }
            Layer::BatchNorm { running_mean, running_var, .. } if buffers => {
                out.push((format!("{p}.running_mean"), running_mean));
                out.push((format!("{p}.running_var"), running_var));
            }
            Layer::Residual(inner) => visit_mut(inner, &p, buffers, out),
            _ => {}
        }
    }
}

impl Backbone<f32> {
    /// Kaiming-normal conv weights (fan-in), zero biases, seeded.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with(config, &mut rng)
    }
}

impl<T: Real> Backbone<T> {
    pub fn build_with<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let feature_width = config.validate()?;
        let layers = init_layers(&config.layers, config.input[0], rng)?;
        Ok(Self {
            config,
            layers,
            feature_width,
        })
    }

    /// Assembles a backbone from explicit layers, checking them against the
    /// config.
    pub fn from_layers(config: BackboneConfig, layers: Vec<Layer<T>>) -> Result<Self> {
        let feature_width = config.validate()?;
        let template: Backbone<T> = Backbone {
            layers: init_layers(&config.layers, config.input[0], &mut ChaCha8Rng::seed_from_u64(0))?,
            config: config.clone(),
            feature_width,
        };
        let mut candidate = Backbone { config, layers, feature_width };
        let want: Vec<_> = template.all_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<_> = candidate.all_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if want != got {
            return Err(Error::Invalid("layer parameters do not match the backbone config".into()));
        }
        candidate.feature_width = feature_width;
        Ok(candidate)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// `N_V`, the length of every emitted feature vector.
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Trainable tensors, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit(&self.layers, "backbone", false, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        visit_mut(&mut self.layers, "backbone", false, &mut out);
        out
    }

    /// Normalization running statistics (not trained by gradient).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit(&self.layers, "backbone", true, &mut out);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        visit_mut(&mut self.layers, "backbone", true, &mut out);
        out
    }

    pub fn all_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.params();
        out.extend(self.buffers());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        fn cast_layers<T: Real, U: Real>(layers: &[Layer<T>]) -> Vec<Layer<U>> {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { weight, bias, attrs } => Layer::Conv {
                        weight: weight.cast(),
                        bias: bias.cast(),
                        attrs: *attrs,
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool(a) => Layer::MaxPool(*a),
                    Layer::BatchNorm { gamma, beta, running_mean, running_var } => Layer::BatchNorm {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    },
                    Layer::Residual(inner) => Layer::Residual(cast_layers(inner)),
                    Layer::Flatten => Layer::Flatten,
                })
                .collect()
        }
        Backbone {
            config: self.config.clone(),
            layers: cast_layers(&self.layers),
            feature_width: self.feature_width,
        }
    }

    pub fn check_batch_shape(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input;
        match *shape {
            [n, c2, h2, w2] if n > 0 && [c2, h2, w2] == [c, h, w] => Ok(()),
            _ => Err(Error::shape("backbone input", format!("[N, {c}, {h}, {w}]"), shape)),
        }
    }

    /// Runs the layers on `tape`. With `trainable`, parameters are recorded
    /// as gradient-requiring leaves.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<BackboneForward<T>> {
        self.check_batch_shape(tape.value(x).shape())?;
        let mut fwd = BackboneForward {
            features: x,
            params: Vec::new(),
            trace: Vec::with_capacity(self.layers.len()),
            norm_stats: Vec::new(),
        };
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("backbone.{i}");
            let out = run_layer(tape, layer, cur, &prefix, mode, trainable, &mut fwd)?;
            fwd.trace.push((cur, out));
            cur = out;
        }
        fwd.features = cur;
        Ok(fwd)
    }

    /// Folds batch statistics from a training forward into the running
    /// averages.
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<T>, Vec<T>)]) {
        let momentum = T::from_f64(NORM_MOMENTUM);
        let mut buffers = self.buffers_mut();
        for (prefix, mean, var) in stats {
            for (name, t) in buffers.iter_mut() {
                let batch = if *name == format!("{prefix}.running_mean") {
                    mean
                } else if *name == format!("{prefix}.running_var") {
                    var
                } else {
                    continue;
                };
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - momentum) * *r + momentum * *b;
                }
            }
        }
    }
}

fn bind<T: Real>(tape: &mut Tape<T>, t: &Tensor<T>, name: String, trainable: bool, fwd: &mut BackboneForward<T>) -> Var {
    if trainable {
        let v = tape.param(t.clone());
        fwd.params.push((name, v));
        v
    } else {
        tape.constant(t.clone())
    }
}

fn run_layer<T: Real>(
    tape: &mut Tape<T>,
    layer: &Layer<T>,
    x: Var,
    prefix: &str,
    mode: Mode,
    trainable: bool,
    fwd: &mut BackboneForward<T>,
) -> Result<Var> {
    match layer {
        Layer::Conv { weight, bias, attrs } => {
            let w = bind(tape, weight, format!("{prefix}.weight"), trainable, fwd);
            let b = bind(tape, bias, format!("{prefix}.bias"), trainable, fwd);
            tape.conv2d(x, w, Some(b), *attrs)
        }
        Layer::Relu => Ok(tape.relu(x)),
        Layer::MaxPool(attrs) => tape.maxpool2d(x, *attrs),
        Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
            let g = bind(tape, gamma, format!("{prefix}.gamma"), trainable, fwd);
            let b = bind(tape, beta, format!("{prefix}.beta"), trainable, fwd);
            let stats = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Eval => NormStats::Fixed {
                    mean: running_mean.data().to_vec(),
                    var: running_var.data().to_vec(),
                },
            };
            let (y, mean, var) = tape.normalize(x, g, b, stats, T::from_f64(NORM_EPS))?;
            if mode == Mode::Train {
                fwd.norm_stats.push((prefix.to_string(), mean, var));
            }
            Ok(y)
        }
        Layer::Residual(inner) => {
            let mut cur = x;
            for (j, l) in inner.iter().enumerate() {
                cur = run_layer(tape, l, cur, &format!("{prefix}.{j}"), mode, trainable, fwd)?;
            }
            if tape.value(cur).shape() != tape.value(x).shape() {
                return Err(Error::shape(
                    "residual inner output",
                    format!("{:?}", tape.value(x).shape()),
                    tape.value(cur).shape(),
                ));
            }
            tape.add(cur, x)
        }
        Layer::Flatten => tape.flatten(x),
    }
}

/// Applies a residual block, `inner(x) + x`, outside of any model.
pub fn residual_forward<T: Real>(inner: &[Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut fwd = BackboneForward {
        features: xv,
        params: Vec::new(),
        trace: Vec::new(),
        norm_stats: Vec::new(),
    };
    let block = Layer::Residual(inner.to_vec());
    let out = run_layer(&mut tape, &block, xv, "residual", Mode::Eval, false, &mut fwd)?;
    Ok(tape.value(out).clone())
}

/// Features for a batch (`N x C x H x W`), optionally with the per-layer
/// activation trace.
pub fn extract_features<T: Real>(
    backbone: &Backbone<T>,
    batch: &Tensor<T>,
    with_trace: bool,
) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let fwd = backbone.forward(&mut tape, x, Mode::Eval, false)?;
    let features = tape.value(fwd.features).clone();
    if !features.all_finite() {
        return Err(Error::NonFinite("backbone features".into()));
    }
    let trace = with_trace.then(|| ActivationTrace {
        layers: fwd
            .trace
            .iter()
            .map(|(i, o)| LayerActivation {
                input: tape.value(*i).clone(),
                output: tape.value(*o).clone(),
            })
            .collect(),
    });
    Ok((features, trace))
}
