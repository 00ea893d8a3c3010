use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, window_output, LrnParams};
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn {
        depth_radius: usize,
        alpha: f64,
        beta: f64,
        bias: f64,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
    Dropout {
        p: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Self::MaxPool { window, stride }
    }

    pub fn lrn() -> Self {
        let p = LrnParams::default();
        Self::Lrn {
            depth_radius: p.depth_radius,
            alpha: p.alpha,
            beta: p.beta,
            bias: p.bias,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        Self::Dense { out_features }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Relu => "relu",
            Self::MaxPool { .. } => "maxpool",
            Self::Lrn { .. } => "lrn",
            Self::Flatten => "flatten",
            Self::Dense { .. } => "dense",
            Self::Dropout { .. } => "dropout",
            Self::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::Dense { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Canonical eight-layer AlexNet at 227×227.
    Full,
    /// Scaled-down network for 64×64 inputs that trains on a CPU in minutes.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(format!("unknown preset '{other}' (expected full or desk)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// Class names indexed by output unit; may be empty before training.
    #[serde(default)]
    pub labels: Vec<String>,
}

pub fn build_alexnet(num_classes: usize, preset: Preset) -> Result<NetworkConfig, NnError> {
    build_alexnet_with(num_classes, preset, false)
}

/// As [`build_alexnet`]; `desk_lrn` inserts LRN after the first two desk
/// convolutions the way the full network has it.
pub fn build_alexnet_with(num_classes: usize, preset: Preset, desk_lrn: bool) -> Result<NetworkConfig, NnError> {
    if num_classes < 1 {
        return Err(NnError::ShapeMismatch("network needs at least one class".into()));
    }
    use LayerSpec as L;
    let (input, layers) = match preset {
        Preset::Full => (
            (3, 227, 227),
            vec![
                L::conv(96, 11, 4, 0),
                L::Relu,
                L::lrn(),
                L::maxpool(3, 2),
                L::conv(256, 5, 1, 2),
                L::Relu,
                L::lrn(),
                L::maxpool(3, 2),
                L::conv(384, 3, 1, 1),
                L::Relu,
                L::conv(384, 3, 1, 1),
                L::Relu,
                L::conv(256, 3, 1, 1),
                L::Relu,
                L::maxpool(3, 2),
                L::Flatten,
                L::dense(4096),
                L::Relu,
                L::Dropout { p: 0.5 },
                L::dense(4096),
                L::Relu,
                L::Dropout { p: 0.5 },
                L::dense(num_classes),
                L::Softmax,
            ],
        ),
        Preset::Desk => {
            let mut layers = vec![L::conv(16, 5, 2, 2), L::Relu];
            if desk_lrn {
                layers.push(L::lrn());
            }
            layers.extend([L::maxpool(2, 2), L::conv(32, 3, 1, 1), L::Relu]);
            if desk_lrn {
                layers.push(L::lrn());
            }
            layers.extend([
                L::maxpool(2, 2),
                L::conv(64, 3, 1, 1),
                L::Relu,
                L::maxpool(2, 2),
                L::Flatten,
                L::dense(256),
                L::Relu,
                L::Dropout { p: 0.5 },
                L::dense(num_classes),
                L::Softmax,
            ]);
            ((3, 64, 64), layers)
        }
    };
    let config = NetworkConfig {
        input,
        layers,
        num_classes,
        labels: Vec::new(),
    };
    config.layer_shapes()?;
    Ok(config)
}

impl NetworkConfig {
    /// Output shape (without batch dimension) after each layer, or the first
    /// layer whose input does not fit.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let (c, h, w) = self.input;
        let mut shape = vec![c, h, w];
        let mut shapes = Vec::with_capacity(self.layers.len());
        let bad = |i: usize, spec: &LayerSpec, shape: &[usize], why: &str| NnError::LayerShape {
            layer: i,
            kind: spec.name(),
            message: format!("input {shape:?}: {why}"),
        };
        for (i, spec) in self.layers.iter().enumerate() {
            shape = match (*spec, shape.as_slice()) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad }, &[_, h, w]) => {
                    if out_channels == 0 {
                        return Err(bad(i, spec, &shape, "zero output channels"));
                    }
                    match (window_output(h, kernel, stride, pad), window_output(w, kernel, stride, pad)) {
                        (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                        _ => return Err(bad(i, spec, &shape, "kernel does not fit")),
                    }
                }
                (LayerSpec::MaxPool { window, stride }, &[c, h, w]) => {
                    match (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) {
                        (Some(oh), Some(ow)) => vec![c, oh, ow],
                        _ => return Err(bad(i, spec, &shape, "window does not fit")),
                    }
                }
                (LayerSpec::Lrn { .. }, &[_, _, _]) => shape.clone(),
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Dense { out_features }, &[_]) if out_features > 0 => vec![out_features],
                (LayerSpec::Dropout { p }, _) if !(0.0..1.0).contains(&p) => {
                    return Err(bad(i, spec, &shape, "dropout rate outside [0, 1)"))
                }
                (LayerSpec::Relu | LayerSpec::Dropout { .. }, _) => shape.clone(),
                (LayerSpec::Softmax, &[_]) if i + 1 == self.layers.len() => shape.clone(),
                (LayerSpec::Softmax, _) => {
                    return Err(bad(i, spec, &shape, "softmax must be the final layer over a vector"))
                }
                _ => return Err(bad(i, spec, &shape, "incompatible rank")),
            };
            shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(NnError::ShapeMismatch(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    /// Shapes of `(weight, bias)` for every parameterized layer, aligned with
    /// `layers`.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>, NnError> {
        let out_shapes = self.layer_shapes()?;
        let (c, h, w) = self.input;
        let mut prev = vec![c, h, w];
        let mut result = Vec::with_capacity(self.layers.len());
        for (spec, out) in self.layers.iter().zip(&out_shapes) {
            result.push(match *spec {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    Some((vec![out_channels, prev[0], kernel, kernel], vec![out_channels]))
                }
                LayerSpec::Dense { out_features } => Some((vec![out_features, prev[0]], vec![out_features])),
                _ => None,
            });
            prev = out.clone();
        }
        Ok(result)
    }

    pub fn parameter_count(&self) -> Result<usize, NnError> {
        Ok(self
            .param_shapes()?
            .iter()
            .flatten()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.name() == kind).count()
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn label(&self, index: usize) -> String {
        self.labels
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("class_{index}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Learnable tensors aligned with `NetworkConfig::layers`; `None` for
/// layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(config: &NetworkConfig) -> Result<Self, NnError> {
        Ok(Self {
            layers: config
                .param_shapes()?
                .into_iter()
                .map(|s| {
                    s.map(|(w, b)| LayerParams {
                        weight: Tensor::zeros(&w),
                        bias: Tensor::zeros(&b),
                    })
                })
                .collect(),
        })
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_he(config: &NetworkConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(config)?;
        for lp in params.layers.iter_mut().flatten() {
            let fan_in: usize = lp.weight.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in lp.weight.data_mut() {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten().flat_map(|lp| [&lp.weight, &lp.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|lp| [&mut lp.weight, &mut lp.bias])
    }

    pub fn count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|lp| LayerParams {
                        weight: lp.weight.cast(),
                        bias: lp.bias.cast(),
                    })
                })
                .collect(),
        }
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout masks are drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

enum Cache<T> {
    Input(Tensor<T>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Lrn { input: Tensor<T>, scale: Tensor<T> },
    Shape(Vec<usize>),
    Mask(Vec<T>),
    Identity,
}

/// Activations recorded by a forward pass for the matching backward pass.
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

fn lrn_params(spec: &LayerSpec) -> LrnParams {
    match *spec {
        LayerSpec::Lrn { depth_radius, alpha, beta, bias } => LrnParams {
            depth_radius,
            alpha,
            beta,
            bias,
        },
        _ => unreachable!("not an lrn layer"),
    }
}

fn layer_params<'p, T>(params: &'p Parameters<T>, i: usize) -> Result<&'p LayerParams<T>, NnError> {
    params
        .layers
        .get(i)
        .and_then(|l| l.as_ref())
        .ok_or_else(|| NnError::ShapeMismatch(format!("missing parameters for layer {i}")))
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: Parameters<T>,
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig, params: Parameters<T>) -> Result<Self, NnError> {
        let expected = config.param_shapes()?;
        if expected.len() != params.layers.len() {
            return Err(NnError::ShapeMismatch("parameter list does not match layers".into()));
        }
        for (i, (want, got)) in expected.iter().zip(&params.layers).enumerate() {
            let ok = match (want, got) {
                (None, None) => true,
                (Some((w, b)), Some(lp)) => lp.weight.shape() == w.as_slice() && lp.bias.shape() == b.as_slice(),
                _ => false,
            };
            if !ok {
                return Err(NnError::ShapeMismatch(format!("parameters of layer {i} do not match config")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self, NnError> {
        let params = Parameters::init_he(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Runs every layer up to (not including) the terminal softmax and
    /// returns `N×classes` logits. With `record`, the returned trace holds
    /// what [`Network::backward`] needs.
    pub fn forward(&self, input: &Tensor<T>, mut mode: Mode<'_>, record: bool) -> Result<(Tensor<T>, Trace<T>), NnError> {
        let (c, h, w) = self.config.input;
        let n = match *input.shape() {
            [n, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => n,
            ref s => {
                return Err(NnError::ShapeMismatch(format!(
                    "network expects N×{c}×{h}×{w} input, got {s:?}"
                )))
            }
        };
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.config.layers.len());
        for (i, spec) in self.config.layers.iter().enumerate() {
            let (next, cache) = match *spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let lp = layer_params(&self.params, i)?;
                    let y = layers::conv2d_forward(&x, &lp.weight, &lp.bias, stride, pad)?;
                    (y, Cache::Input(x))
                }
                LayerSpec::Relu => (layers::relu_forward(&x), Cache::Input(x)),
                LayerSpec::MaxPool { window, stride } => {
                    let (y, argmax) = layers::maxpool_forward(&x, window, stride)?;
                    let input_shape = x.shape().to_vec();
                    (y, Cache::Pool { input_shape, argmax })
                }
                LayerSpec::Lrn { .. } => {
                    let (y, scale) = layers::lrn_forward(&x, lrn_params(spec))?;
                    (y, Cache::Lrn { input: x, scale })
                }
                LayerSpec::Flatten => {
                    let shape = x.shape().to_vec();
                    let features = shape[1..].iter().product();
                    (x.reshape(&[n, features])?, Cache::Shape(shape))
                }
                LayerSpec::Dense { .. } => {
                    let lp = layer_params(&self.params, i)?;
                    let y = layers::dense_forward(&x, &lp.weight, &lp.bias)?;
                    (y, Cache::Input(x))
                }
                LayerSpec::Dropout { p } => match &mut mode {
                    Mode::Train(rng) if p > 0.0 => {
                        let mask = layers::dropout_mask::<T>(x.len(), p, rng);
                        (layers::apply_mask(&x, &mask)?, Cache::Mask(mask))
                    }
                    _ => (x, Cache::Identity),
                },
                LayerSpec::Softmax => break,
            };
            x = next;
            if record {
                caches.push(cache);
            }
        }
        Ok((x, Trace { caches }))
    }

    /// Backpropagates `grad_logits` through a recorded trace, returning
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, trace: Trace<T>, grad_logits: &Tensor<T>) -> Result<(Parameters<T>, Tensor<T>), NnError> {
        let mut grads = Parameters::zeros(&self.config)?;
        let mut g = grad_logits.clone();
        for (i, cache) in trace.caches.into_iter().enumerate().rev() {
            let spec = self.config.layers[i];
            g = match (spec, cache) {
                (LayerSpec::Conv { stride, pad, .. }, Cache::Input(input)) => {
                    let lp = layer_params(&self.params, i)?;
                    let cg = layers::conv2d_backward(&input, &lp.weight, &lp.bias, stride, pad, &g)?;
                    grads.layers[i] = Some(LayerParams { weight: cg.weight, bias: cg.bias });
                    cg.input
                }
                (LayerSpec::Relu, Cache::Input(input)) => layers::relu_backward(&input, &g)?,
                (LayerSpec::MaxPool { .. }, Cache::Pool { input_shape, argmax }) => {
                    layers::maxpool_backward(&input_shape, &argmax, &g)?
                }
                (LayerSpec::Lrn { .. }, Cache::Lrn { input, scale }) => {
                    layers::lrn_backward(&input, &scale, lrn_params(&spec), &g)?
                }
                (LayerSpec::Flatten, Cache::Shape(shape)) => g.reshape(&shape)?,
                (LayerSpec::Dense { .. }, Cache::Input(input)) => {
                    let lp = layer_params(&self.params, i)?;
                    let dg = layers::dense_backward(&input, &lp.weight, &lp.bias, &g)?;
                    grads.layers[i] = Some(LayerParams { weight: dg.weight, bias: dg.bias });
                    dg.input
                }
                (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => layers::apply_mask(&g, &mask)?,
                (LayerSpec::Dropout { .. }, Cache::Identity) => g,
                _ => return Err(NnError::ShapeMismatch(format!("trace does not match layer {i}"))),
            };
        }
        Ok((grads, g))
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.forward(input, Mode::Eval, false)?.0)
    }

    /// Eval-mode class probabilities.
    pub fn probabilities(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        layers::softmax_rows(&self.logits(input)?)
    }

    /// The `k` most probable classes for one `C×H×W` sample, as
    /// `(label index, probability)` ranked by descending score with ties going
    /// to the lower index.
    pub fn predict_topk(&self, sample: &Tensor<T>, k: usize) -> Result<Vec<(usize, T)>, NnError> {
        let classes = self.config.num_classes;
        if k == 0 || k > classes {
            return Err(NnError::BadK { k, classes });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(sample.shape());
        let batch = sample.clone().reshape(&shape)?;
        let logits = self.logits(&batch)?;
        let probs = layers::softmax_rows(&logits)?;
        Ok(rank_desc(logits.data())
            .into_iter()
            .take(k)
            .map(|i| (i, probs.data()[i]))
            .collect())
    }
}

/// Indices sorted by descending value, ties by ascending index.
pub fn rank_desc<T: Real>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Zero-based position of `label` in [`rank_desc`] order, computed without
/// sorting.
pub fn rank_of<T: Real>(values: &[T], label: usize) -> usize {
    let truth = values[label];
    values
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > truth || (v == truth && j < label))
        .count()
}
