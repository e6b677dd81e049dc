//! Sequential layer specifications, parameter storage and the reference
//! generator/discriminator architectures.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 128;
pub const DEFAULT_LEAKY_ALPHA: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv(ConvGeometry),
    ConvTranspose(ConvGeometry),
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    LeakyRelu {
        alpha: f64,
    },
    Sigmoid,
    /// Per-sample target shape.
    Reshape {
        shape: Vec<usize>,
    },
    Upsample {
        factor: usize,
    },
}

impl Layer {
    pub fn batchnorm(channels: usize) -> Self {
        Layer::BatchNorm {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "conv_transpose",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Reshape { .. } => "reshape",
            Layer::Upsample { .. } => "upsample",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expect: Vec<usize>| Error::Shape {
            op: self.kind(),
            lhs: input.to_vec(),
            rhs: expect,
        };
        match self {
            &Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            Layer::Conv(g) | Layer::ConvTranspose(g) => {
                let &[c, h, w] = input else {
                    return Err(mismatch(vec![g.in_channels, 0, 0]));
                };
                if c != g.in_channels {
                    return Err(mismatch(vec![g.in_channels, h, w]));
                }
                let (oh, ow) = match self {
                    Layer::Conv(_) => g.conv_output(h, w)?,
                    _ => g.transpose_output(h, w)?,
                };
                Ok(vec![g.out_channels, oh, ow])
            }
            &Layer::BatchNorm { channels, .. } => match *input {
                [c, _, _] if c == channels => Ok(input.to_vec()),
                _ => Err(mismatch(vec![channels, 0, 0])),
            },
            Layer::LeakyRelu { .. } | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
            &Layer::Upsample { factor } => match *input {
                [c, h, w] if factor >= 1 => Ok(vec![c, h * factor, w * factor]),
                _ => Err(mismatch(vec![0, 0, 0])),
            },
        }
    }

    /// `(name suffix, shape)` of each trainable tensor.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::Dense { inputs, outputs } => {
                vec![("weight", vec![inputs, outputs]), ("bias", vec![outputs])]
            }
            Layer::Conv(g) => vec![
                (
                    "weight",
                    vec![g.out_channels, g.in_channels, g.kernel.0, g.kernel.1],
                ),
                ("bias", vec![g.out_channels]),
            ],
            Layer::ConvTranspose(g) => vec![
                (
                    "weight",
                    vec![g.in_channels, g.out_channels, g.kernel.0, g.kernel.1],
                ),
                ("bias", vec![g.out_channels]),
            ],
            Layer::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            _ => vec![],
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let geom = |f: &mut fmt::Formatter<'_>, g: &ConvGeometry| {
            write!(
                f,
                " k{}x{} s{}x{} p{}x{} {}->{}",
                g.kernel.0,
                g.kernel.1,
                g.stride.0,
                g.stride.1,
                g.padding.0,
                g.padding.1,
                g.in_channels,
                g.out_channels
            )
        };
        f.write_str(self.kind())?;
        match self {
            Layer::Dense { inputs, outputs } => write!(f, " {inputs}->{outputs}"),
            Layer::Conv(g) | Layer::ConvTranspose(g) => geom(f, g),
            Layer::BatchNorm {
                channels,
                eps,
                momentum,
            } => write!(f, " {channels} eps={eps} momentum={momentum}"),
            Layer::LeakyRelu { alpha } => write!(f, " {alpha}"),
            Layer::Sigmoid => Ok(()),
            Layer::Reshape { shape } => write!(f, " {shape:?}"),
            Layer::Upsample { factor } => write!(f, " x{factor}"),
        }
    }
}

/// Ordered layers with validated shape chaining. Shapes are per sample (the
/// batch axis is implicit).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Precondition(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for layer in &layers {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, |s| s)
    }

    /// Output shape after each layer.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn ends_with_sigmoid(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Sigmoid))
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {:?}", self.input_shape)?;
        for (l, s) in self.layers.iter().zip(&self.shapes) {
            writeln!(f, "{l} => {s:?}")?;
        }
        Ok(())
    }
}

/// Combined digest of a generator/discriminator pair.
pub fn pair_digest(g: &ModelSpec, d: &ModelSpec) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"generator\n");
    h.update(g.to_string().as_bytes());
    h.update(b"discriminator\n");
    h.update(d.to_string().as_bytes());
    h.finalize().into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    First,
    Refine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// Image-shaped noise through conv/dense bottleneck and transposed convs.
    DenseNoise,
    /// 128-element latent, dense projection and transposed-conv upsampling.
    #[default]
    LatentUpsample,
}

impl fmt::Display for GeneratorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorVariant::DenseNoise => "dense_noise",
            GeneratorVariant::LatentUpsample => "latent_upsample",
        })
    }
}

impl FromStr for GeneratorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense_noise" => Ok(Self::DenseNoise),
            "latent_upsample" => Ok(Self::LatentUpsample),
            _ => Err(format!(
                "expected dense_noise or latent_upsample, got `{s}`"
            )),
        }
    }
}

fn check_size((h, w): (usize, usize)) -> Result<()> {
    let ok = |n: usize| n >= 16 && n.is_power_of_two();
    if ok(h) && ok(w) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "image size {h}x{w} unsupported: both sides must be powers of two >= 16"
        )))
    }
}

fn down(i: usize, o: usize) -> Layer {
    Layer::Conv(ConvGeometry::square(i, o, 4, 2, 1))
}

fn up(i: usize, o: usize) -> Layer {
    Layer::ConvTranspose(ConvGeometry::square(i, o, 4, 2, 1))
}

pub fn build_generator(
    stage: Stage,
    variant: GeneratorVariant,
    out: (usize, usize),
    alpha: f64,
) -> Result<ModelSpec> {
    check_size(out)?;
    let (h, w) = out;
    let lr = || Layer::LeakyRelu { alpha };
    match (stage, variant) {
        (Stage::Refine, _) => ModelSpec::new(
            vec![1, h, w],
            vec![
                down(1, 16),
                lr(),
                down(16, 32),
                lr(),
                up(32, 16),
                lr(),
                up(16, 1),
                Layer::Sigmoid,
            ],
        ),
        (Stage::First, GeneratorVariant::LatentUpsample) => {
            let (bh, bw) = (h / 8, w / 8);
            let mut layers = vec![
                Layer::Dense {
                    inputs: LATENT_DIM,
                    outputs: bh * bw * 64,
                },
                Layer::Reshape {
                    shape: vec![64, bh, bw],
                },
            ];
            for (i, o) in [(64, 32), (32, 16), (16, 8)] {
                layers.extend([up(i, o), Layer::batchnorm(o), lr()]);
            }
            layers.extend([
                Layer::Conv(ConvGeometry::square(8, 1, 3, 1, 1)),
                Layer::Sigmoid,
            ]);
            ModelSpec::new(vec![LATENT_DIM], layers)
        }
        (Stage::First, GeneratorVariant::DenseNoise) => {
            let (bh, bw) = (h / 8, w / 8);
            let flat = 32 * bh * bw;
            ModelSpec::new(
                vec![1, h, w],
                vec![
                    down(1, 16),
                    lr(),
                    down(16, 32),
                    lr(),
                    down(32, 32),
                    lr(),
                    Layer::Reshape { shape: vec![flat] },
                    Layer::Dense {
                        inputs: flat,
                        outputs: 64,
                    },
                    lr(),
                    Layer::Dense {
                        inputs: 64,
                        outputs: flat,
                    },
                    lr(),
                    Layer::Reshape {
                        shape: vec![32, bh, bw],
                    },
                    up(32, 16),
                    lr(),
                    up(16, 8),
                    lr(),
                    up(8, 1),
                    Layer::Sigmoid,
                ],
            )
        }
    }
}

pub fn build_discriminator(input: (usize, usize), alpha: f64) -> Result<ModelSpec> {
    check_size(input)?;
    let (h, w) = input;
    let mut layers = Vec::new();
    for (i, o) in [(1, 16), (16, 32), (32, 64), (64, 128)] {
        layers.extend([down(i, o), Layer::LeakyRelu { alpha }]);
    }
    let flat = 128 * (h / 16) * (w / 16);
    layers.extend([
        Layer::Reshape { shape: vec![flat] },
        Layer::Dense {
            inputs: flat,
            outputs: 1,
        },
        Layer::Sigmoid,
    ]);
    ModelSpec::new(vec![1, h, w], layers)
}

/// How batch norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    TrainFrozenStats,
    /// Running statistics.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    params: Vec<usize>,
    /// `[running_mean, running_var]` for batch norm layers.
    buffers: Vec<usize>,
}

/// A [`ModelSpec`] with its parameter and running-statistic tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    slots: Vec<Slots>,
}

impl<T: Scalar> Model<T> {
    /// Weights of dense and (transposed) conv layers from `N(0, init_std)`,
    /// biases zero, batch norm `gamma = 1`, `beta = 0`.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, init_std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, init_std).expect("finite std");
        let mut model = Self::zeroed(spec);
        for (li, layer) in model.spec.layers.iter().enumerate() {
            let slots = &model.slots[li];
            match layer {
                Layer::Dense { .. } | Layer::Conv(_) | Layer::ConvTranspose(_) => {
                    for v in model.params[slots.params[0]].data_mut() {
                        *v = lit(normal.sample(rng));
                    }
                }
                Layer::BatchNorm { .. } => {
                    model.params[slots.params[0]] =
                        Tensor::ones(model.params[slots.params[0]].shape().to_vec());
                }
                _ => {}
            }
        }
        model
    }

    /// All parameters zero; batch norm running variance one.
    pub fn zeroed(spec: ModelSpec) -> Self {
        let mut params = Vec::new();
        let mut param_names = Vec::new();
        let mut buffers = Vec::new();
        let mut buffer_names = Vec::new();
        let mut slots = Vec::new();
        for (li, layer) in spec.layers.iter().enumerate() {
            let mut s = Slots {
                params: vec![],
                buffers: vec![],
            };
            for (suffix, shape) in layer.param_shapes() {
                s.params.push(params.len());
                params.push(Tensor::zeros(shape));
                param_names.push(format!("{li}.{}.{suffix}", layer.kind()));
            }
            if let Layer::BatchNorm { channels, .. } = *layer {
                s.buffers = vec![buffers.len(), buffers.len() + 1];
                buffers.push(Tensor::zeros([channels]));
                buffers.push(Tensor::ones([channels]));
                buffer_names.push(format!("{li}.batchnorm.running_mean"));
                buffer_names.push(format!("{li}.batchnorm.running_var"));
            }
            slots.push(s);
        }
        Self {
            spec,
            params,
            param_names,
            buffers,
            buffer_names,
            slots,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    /// Every named tensor: parameters then running statistics.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.param_names
            .iter()
            .zip(&self.params)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    /// Overwrites the tensor called `name`. Shapes must match.
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(i) = self.param_names.iter().position(|n| n == name) {
            &mut self.params[i]
        } else if let Some(i) = self.buffer_names.iter().position(|n| n == name) {
            &mut self.buffers[i]
        } else {
            return Err(Error::CheckpointTensor(name.to_string()));
        };
        if slot.shape() != value.shape() {
            return Err(Error::CheckpointTensor(name.to_string()));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            param_names: self.param_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            slots: self.slots.clone(),
        }
    }

    /// Adds every parameter to `g` as a leaf; trainable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.input(p.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass of `x: [batch, ..input_shape]` on `g` using
    /// the leaves returned by [`Model::bind`].
    pub fn apply(
        &mut self,
        g: &mut Graph<T>,
        leaves: &[NodeId],
        x: NodeId,
        phase: Phase,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..]
        {
            let mut expect = vec![shape.first().copied().unwrap_or(0)];
            expect.extend_from_slice(&self.spec.input_shape);
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: expect,
            });
        }
        let batch = shape[0];
        let mut cur = x;
        for li in 0..self.spec.layers.len() {
            let p = |k: usize| leaves[self.slots[li].params[k]];
            cur = match &self.spec.layers[li] {
                Layer::Dense { .. } => g.dense(cur, p(0), p(1))?,
                Layer::Conv(geom) => g.conv2d(cur, p(0), p(1), *geom)?,
                Layer::ConvTranspose(geom) => g.conv2d_transpose(cur, p(0), p(1), *geom)?,
                &Layer::BatchNorm { eps, momentum, .. } => {
                    let (rm, rv) = (self.slots[li].buffers[0], self.slots[li].buffers[1]);
                    match phase {
                        Phase::Infer => g.batchnorm_infer(
                            cur,
                            p(0),
                            p(1),
                            &self.buffers[rm],
                            &self.buffers[rv],
                            lit(eps),
                        )?,
                        Phase::Train | Phase::TrainFrozenStats => {
                            let id = g.batchnorm_train(cur, p(0), p(1), lit(eps))?;
                            if phase == Phase::Train {
                                let (mean, var) =
                                    g.batch_statistics(id).expect("training-mode node");
                                let (mean, var) = (mean.to_vec(), var.to_vec());
                                kernels::update_running(&mut self.buffers[rm], &mean, momentum);
                                kernels::update_running(&mut self.buffers[rv], &var, momentum);
                            }
                            id
                        }
                    }
                }
                &Layer::LeakyRelu { alpha } => g.leaky_relu(cur, lit(alpha)),
                Layer::Sigmoid => g.sigmoid(cur),
                Layer::Reshape { shape } => {
                    let mut full = vec![batch];
                    full.extend_from_slice(shape);
                    g.reshape(cur, &full)?
                }
                &Layer::Upsample { factor } => g.upsample_nearest(cur, factor)?,
            };
        }
        Ok(cur)
    }

    /// Forward pass without keeping the graph.
    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false);
        let xi = g.input(x.clone());
        let y = self.apply(&mut g, &leaves, xi, phase)?;
        Ok(g.value(y).clone())
    }
}
