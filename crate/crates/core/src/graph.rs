//! Tape of recorded operations and reverse-mode differentiation over it.
//!
//! Nodes are appended in evaluation order, so node ids are a topological
//! order and `backward` is a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormCache, ConvGeometry};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies the operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Leaf,
    Dense,
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    LeakyRelu,
    Sigmoid,
    Reshape,
    Upsample,
    Downsample,
    Add,
    Scale,
    Bce,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Dense => "dense",
            Primitive::Conv2d => "conv2d",
            Primitive::ConvTranspose2d => "conv2d_transpose",
            Primitive::BatchNorm => "batchnorm",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Reshape => "reshape",
            Primitive::Upsample => "upsample_nearest",
            Primitive::Downsample => "downsample_nearest",
            Primitive::Add => "add",
            Primitive::Scale => "scale",
            Primitive::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub const ALL: [Primitive; 13] = [
        Primitive::Leaf,
        Primitive::Dense,
        Primitive::Conv2d,
        Primitive::ConvTranspose2d,
        Primitive::BatchNorm,
        Primitive::LeakyRelu,
        Primitive::Sigmoid,
        Primitive::Reshape,
        Primitive::Upsample,
        Primitive::Downsample,
        Primitive::Add,
        Primitive::Scale,
        Primitive::Bce,
    ];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T: Scalar> {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    },
    ConvT {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_var: Tensor<T>,
        x_hat: Tensor<T>,
        eps: T,
    },
    LeakyRelu {
        x: NodeId,
        alpha: T,
    },
    Sigmoid {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Downsample {
        x: NodeId,
        factor: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: T,
    },
    Bce {
        p: NodeId,
        target: Tensor<T>,
        clamp: T,
    },
}

impl<T: Scalar> Op<T> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Dense { .. } => Primitive::Dense,
            Op::Conv { .. } => Primitive::Conv2d,
            Op::ConvT { .. } => Primitive::ConvTranspose2d,
            Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => Primitive::BatchNorm,
            Op::LeakyRelu { .. } => Primitive::LeakyRelu,
            Op::Sigmoid { .. } => Primitive::Sigmoid,
            Op::Reshape { .. } => Primitive::Reshape,
            Op::Upsample { .. } => Primitive::Upsample,
            Op::Downsample { .. } => Primitive::Downsample,
            Op::Add { .. } => Primitive::Add,
            Op::Scale { .. } => Primitive::Scale,
            Op::Bce { .. } => Primitive::Bce,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Conv { x, k, b, .. } | Op::ConvT { x, k, b, .. } => vec![x, k, b],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormInfer { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Reshape { x }
            | Op::Upsample { x, .. }
            | Op::Downsample { x, .. }
            | Op::Scale { x, .. } => vec![x],
            Op::Add { a, b } => vec![a, b],
            Op::Bce { p, .. } => vec![p],
        }
    }
}

/// One recorded value with its producing operation and, after
/// [`Graph::backward`], its gradient.
pub struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn primitive(&self) -> Primitive {
        self.op.primitive()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }
}

/// Recording of a forward computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Primitive>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `primitive` by scaling its input
    /// gradients by 1.5. Used to prove the gradient checker catches faults.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in recording order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node<T>> {
        self.nodes.iter()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }, false))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let y = kernels::conv2d(self.value(x), self.value(k), self.value(b), &geom)?;
        Ok(self.push(y, Op::Conv { x, k, b, geom }, false))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let y = kernels::conv2d_transpose(self.value(x), self.value(k), self.value(b), &geom)?;
        Ok(self.push(y, Op::ConvT { x, k, b, geom }, false))
    }

    /// Batch norm over batch statistics. The statistics are readable through
    /// [`Graph::batch_statistics`].
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let (y, cache) =
            kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            },
            false,
        ))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<NodeId> {
        let (y, x_hat) = kernels::batchnorm_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            running_var: running_var.clone(),
            x_hat,
            eps,
        };
        Ok(self.push(y, op, false))
    }

    /// Per-channel `(mean, biased variance)` of a training-mode batch norm node.
    pub fn batch_statistics(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { cache, .. } => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: T) -> NodeId {
        let y = kernels::leaky_relu(self.value(x), alpha);
        self.push(y, Op::LeakyRelu { x, alpha }, false)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape { x }, false))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let y = kernels::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }, false))
    }

    pub fn downsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let y = kernels::downsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, Op::Downsample { x, factor }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add { a, b }, false))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale { x, k }, false)
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed labels,
    /// with `p` clamped to `[clamp, 1 - clamp]` before the logarithm.
    pub fn bce(&mut self, p: NodeId, target: Tensor<T>, clamp: T) -> Result<NodeId> {
        let loss = crate::loss::bce(self.value(p), &target, clamp)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target, clamp }, false))
    }

    /// Populates the gradient of every node reachable from the scalar `root`.
    /// Gradients from several consumers of one node are summed.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut reachable = vec![false; root.0 + 1];
        reachable[root.0] = true;
        for i in (0..=root.0).rev() {
            if reachable[i] {
                for p in self.nodes[i].op.parents() {
                    reachable[p.0] = true;
                }
            }
        }

        let shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(shape));
        for i in (0..=root.0).rev() {
            if !reachable[i] {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let mut contributions = self.local_grads(i, &g)?;
            if self.fault == Some(self.nodes[i].op.primitive()) {
                for (_, c) in &mut contributions {
                    *c = c.scale(lit(1.5));
                }
            }
            for (parent, c) in contributions {
                let slot = &mut self.nodes[parent.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&c)?,
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        Ok(match &node.op {
            Op::Leaf => vec![],
            &Op::Dense { x, w, b } => {
                let (gx, gw, gb) = kernels::dense_backward(self.value(x), self.value(w), g);
                vec![(x, gx), (w, gw), (b, gb)]
            }
            &Op::Conv { x, k, b, geom } => {
                let (gx, gk, gb) =
                    kernels::conv2d_backward(self.value(x), self.value(k), g, &geom)?;
                vec![(x, gx), (k, gk), (b, gb)]
            }
            &Op::ConvT { x, k, b, geom } => {
                let (gx, gk, gb) =
                    kernels::conv2d_transpose_backward(self.value(x), self.value(k), g, &geom)?;
                vec![(x, gx), (k, gk), (b, gb)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = kernels::batchnorm_train_backward(g, self.value(*gamma), cache);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                running_var,
                x_hat,
                eps,
            } => {
                let (gx, gg, gb) = kernels::batchnorm_infer_backward(
                    g,
                    self.value(*gamma),
                    running_var,
                    x_hat,
                    *eps,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            &Op::LeakyRelu { x, alpha } => {
                let gx = self
                    .value(x)
                    .zip_map(g, |v, gv| if v >= T::zero() { gv } else { alpha * gv })?;
                vec![(x, gx)]
            }
            &Op::Sigmoid { x } => {
                let gx = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                vec![(x, gx)]
            }
            &Op::Reshape { x } => {
                let gx = g.clone().reshape(self.value(x).shape().to_vec())?;
                vec![(x, gx)]
            }
            &Op::Upsample { x, factor } => vec![(x, kernels::upsample_nearest_adjoint(g, factor)?)],
            &Op::Downsample { x, factor } => {
                vec![(x, kernels::downsample_nearest_adjoint(g, factor)?)]
            }
            &Op::Add { a, b } => vec![(a, g.clone()), (b, g.clone())],
            &Op::Scale { x, k } => vec![(x, g.scale(k))],
            Op::Bce { p, target, clamp } => {
                let gp = crate::loss::bce_grad(self.value(*p), target, *clamp, g.item())?;
                vec![(*p, gp)]
            }
        })
    }
}
