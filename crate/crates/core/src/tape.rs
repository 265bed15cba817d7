//! Reverse-mode differentiation over [`Tensor5`] values.
//!
//! A [`Tape`] records every operation applied during a forward pass as a node
//! holding its output value and a reference to its inputs. Nodes are appended
//! in execution order, so the reverse of the node list is a valid topological
//! order for [`Tape::backward`]. Learnable tensors live outside the tape in a
//! [`ParamStore`] and are referenced by [`ParamId`].

use crate::conv::{self, ConvGeometry, ConvPath};
use crate::error::{Error, Result};
use crate::losses::{self, ClassWeights, DiceReduction};
use crate::ops;
use crate::tensor::{Shape5, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor5,
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor5) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: value.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor5 {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor5 {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Adds tape gradients into each parameter's gradient slot.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.value.accumulate_grad(g);
            }
        }
    }
}

/// Per-parameter gradients produced by [`Tape::backward`], indexed like the
/// store; `None` for parameters the loss does not reach.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Operations a network definition is written against, so the same wiring
/// runs recorded on a [`Tape`] or eagerly without gradient bookkeeping.
pub trait Graph {
    type Node: Clone;

    fn shape(&self, x: &Self::Node) -> Shape5;
    fn conv(
        &mut self,
        x: &Self::Node,
        w: ParamId,
        b: ParamId,
        g: ConvGeometry,
    ) -> Result<Self::Node>;
    fn up_conv(
        &mut self,
        x: &Self::Node,
        w: ParamId,
        b: ParamId,
        g: ConvGeometry,
    ) -> Result<Self::Node>;
    fn prelu(&mut self, x: &Self::Node, slope: ParamId) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn concat(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn tile_channels(&mut self, x: &Self::Node, times: usize) -> Result<Self::Node>;
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        g: ConvGeometry,
    },
    UpConv {
        x: Var,
        w: ParamId,
        b: ParamId,
        g: ConvGeometry,
    },
    Prelu {
        x: Var,
        slope: ParamId,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Tile {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    /// Scalar loss whose gradient with respect to `x` was computed in the
    /// forward pass.
    Loss {
        x: Var,
        local: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor5,
    op: Op,
    /// Whether any parameter or requires-grad input feeds this node.
    needs_grad: bool,
}

/// Recorded forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    path: ConvPath,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_path(params, ConvPath::default())
    }

    pub fn with_path(params: &'p ParamStore, path: ConvPath) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            path,
            leaf_grads: Vec::new(),
            param_grads: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor5, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Gradients flow to it only if the tensor was
    /// marked `requires_grad`.
    pub fn input(&mut self, value: Tensor5) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Input, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor5 {
        &self.nodes[v.0].value
    }

    /// Which side of zero every rectifier input fell on, in recording order.
    /// Two passes with equal patterns lie on the same linear piece of each
    /// PReLU.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Prelu { x, .. } => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v >= 0.0))
            .collect()
    }

    /// Accumulated gradient of a requires-grad input.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> ParamGrads {
        ParamGrads(self.param_grads.clone())
    }

    pub fn into_param_grads(self) -> ParamGrads {
        ParamGrads(self.param_grads)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let out = Tensor5::from_vec([1, 1, 1, 1, 1], vec![s])?;
        out.ensure_finite("sum")?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Sum { x }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax2(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x }, ng))
    }

    /// `1 - Dice` on the foreground channel of a two-channel probability
    /// node. Returns the loss node and the per-volume (or pooled) smoothed
    /// Dice values.
    pub fn dice_loss(
        &mut self,
        probs: Var,
        labels: &[u8],
        reduction: DiceReduction,
    ) -> Result<(Var, Vec<f64>)> {
        let p = self.value(probs);
        if p.channels() != 2 {
            return Err(Error::Shape(format!(
                "Dice loss needs 2 channels, got {}",
                p.channels()
            )));
        }
        let plane = p.spatial_len();
        let batch = p.batch();
        if labels.len() != batch * plane {
            return Err(Error::Shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                batch * plane
            )));
        }
        let mut local = vec![0.0; p.numel()];
        let mut dice = Vec::new();
        let loss = match reduction {
            DiceReduction::MeanPerVolume => {
                let mut mean = 0.0;
                for n in 0..batch {
                    let r =
                        losses::dice_forward(p.channel(n, 1), &labels[n * plane..(n + 1) * plane])?;
                    let dst = &mut local[(2 * n + 1) * plane..(2 * n + 2) * plane];
                    for (d, g) in dst.iter_mut().zip(&r.grad) {
                        *d = -g / batch as f64;
                    }
                    mean += r.dice;
                    dice.push(r.dice);
                }
                1.0 - mean / batch as f64
            }
            DiceReduction::Pooled => {
                let fg: Vec<f64> = (0..batch).flat_map(|n| p.channel(n, 1).to_vec()).collect();
                let r = losses::dice_forward(&fg, labels)?;
                for n in 0..batch {
                    let dst = &mut local[(2 * n + 1) * plane..(2 * n + 2) * plane];
                    for (d, g) in dst.iter_mut().zip(&r.grad[n * plane..(n + 1) * plane]) {
                        *d = -g;
                    }
                }
                dice.push(r.dice);
                r.loss
            }
        };
        let value = Tensor5::from_vec([1, 1, 1, 1, 1], vec![loss])?;
        value.ensure_finite("dice loss")?;
        let ng = self.needs(probs);
        Ok((self.push(value, Op::Loss { x: probs, local }, ng), dice))
    }

    /// Re-weighted logistic loss applied to a logits node (softmax folded in).
    pub fn weighted_logistic(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: ClassWeights,
    ) -> Result<Var> {
        let probs = ops::softmax2(self.value(logits))?;
        let (loss, grad) = losses::weighted_logistic(&probs, labels, weights)?;
        let value = Tensor5::from_vec([1, 1, 1, 1, 1], vec![loss])?;
        value.ensure_finite("logistic loss")?;
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::Loss {
                x: logits,
                local: grad.into_data(),
            },
            ng,
        ))
    }

    /// Propagates d(root)/d(.) to every parameter and requires-grad input
    /// reachable from `root`. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Tape(
                "backward called before any forward operation was recorded".into(),
            ));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let params = self.params;
        let path = self.path;
        let node = &self.nodes[i];
        let gy = Tensor5::from_vec(node.value.shape(), g)?;
        match &node.op {
            Op::Input => {
                add_into(&mut self.leaf_grads[i], gy.data());
            }
            Op::Conv { x, w, b, g: geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = params.get(*w);
                if self.nodes[x.0].needs_grad {
                    let zeros = vec![0.0; wv.shape()[1]];
                    let gx =
                        conv::conv3d_transpose(&gy, wv, &zeros, *geom, Some(xv.spatial()), path)?;
                    add_into(&mut grads[x.0], gx.data());
                }
                let gw = conv::conv3d_weight_grad(xv, &gy, *geom, path)?;
                add_into(&mut self.param_grads[w.0], gw.data());
                add_into(&mut self.param_grads[b.0], &conv::channel_sums(&gy));
            }
            Op::UpConv { x, w, b, g: geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = params.get(*w);
                if self.nodes[x.0].needs_grad {
                    let zeros = vec![0.0; wv.shape()[0]];
                    let gx = conv::conv3d(&gy, wv, &zeros, *geom, path)?;
                    add_into(&mut grads[x.0], gx.data());
                }
                // The transposed kernel (c_in, c_out, ..) is the kernel
                // gradient of the convolution from the output back to x.
                let gw = conv::conv3d_weight_grad(&gy, xv, *geom, path)?;
                add_into(&mut self.param_grads[w.0], gw.data());
                add_into(&mut self.param_grads[b.0], &conv::channel_sums(&gy));
            }
            Op::Prelu { x, slope } => {
                let xv = &self.nodes[x.0].value;
                let (gx, gs) = ops::prelu_backward(xv, params.get(*slope).data(), &gy);
                if self.nodes[x.0].needs_grad {
                    add_into(&mut grads[x.0], gx.data());
                }
                add_into(&mut self.param_grads[slope.0], &gs);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].needs_grad {
                        add_into(&mut grads[v.0], gy.data());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    add_into(&mut grads[a.0], ops::mul(&gy, bv)?.data());
                }
                if self.nodes[b.0].needs_grad {
                    add_into(&mut grads[b.0], ops::mul(&gy, av)?.data());
                }
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[a.0].value.channels();
                let (ga, gb) = ops::concat_backward(&gy, ca)?;
                if self.nodes[a.0].needs_grad {
                    add_into(&mut grads[a.0], ga.data());
                }
                if self.nodes[b.0].needs_grad {
                    add_into(&mut grads[b.0], gb.data());
                }
            }
            Op::Tile { x } => {
                let c = self.nodes[x.0].value.channels();
                let gx = ops::tile_channels_backward(&gy, c);
                add_into(&mut grads[x.0], gx.data());
            }
            Op::Softmax { x } => {
                let gx = ops::softmax2_backward(&node.value, &gy);
                add_into(&mut grads[x.0], gx.data());
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                add_into(&mut grads[x.0], &vec![gy.data()[0]; n]);
            }
            Op::Loss { x, local } => {
                let s = gy.data()[0];
                let gx: Vec<f64> = local.iter().map(|v| v * s).collect();
                add_into(&mut grads[x.0], &gx);
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl Graph for Tape<'_> {
    type Node = Var;

    fn shape(&self, x: &Var) -> Shape5 {
        self.value(*x).shape()
    }

    fn conv(&mut self, x: &Var, w: ParamId, b: ParamId, g: ConvGeometry) -> Result<Var> {
        let out = conv::conv3d(
            self.value(*x),
            self.params.get(w),
            self.params.get(b).data(),
            g,
            self.path,
        )?;
        Ok(self.push(out, Op::Conv { x: *x, w, b, g }, true))
    }

    fn up_conv(&mut self, x: &Var, w: ParamId, b: ParamId, g: ConvGeometry) -> Result<Var> {
        let out = conv::conv3d_transpose(
            self.value(*x),
            self.params.get(w),
            self.params.get(b).data(),
            g,
            None,
            self.path,
        )?;
        Ok(self.push(out, Op::UpConv { x: *x, w, b, g }, true))
    }

    fn prelu(&mut self, x: &Var, slope: ParamId) -> Result<Var> {
        let out = ops::prelu(self.value(*x), self.params.get(slope).data())?;
        Ok(self.push(out, Op::Prelu { x: *x, slope }, true))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(self.value(*a), self.value(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Add(*a, *b), ng))
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(*a), self.value(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Concat(*a, *b), ng))
    }

    fn tile_channels(&mut self, x: &Var, times: usize) -> Result<Var> {
        let out = ops::tile_channels(self.value(*x), times)?;
        let ng = self.needs(*x);
        Ok(self.push(out, Op::Tile { x: *x }, ng))
    }
}

/// Forward-only evaluation that keeps no intermediate values alive beyond
/// what the caller holds.
pub struct Eager<'p> {
    params: &'p ParamStore,
    path: ConvPath,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            path: ConvPath::default(),
        }
    }

    pub fn with_path(params: &'p ParamStore, path: ConvPath) -> Self {
        Self { params, path }
    }
}

impl Graph for Eager<'_> {
    type Node = Tensor5;

    fn shape(&self, x: &Tensor5) -> Shape5 {
        x.shape()
    }

    fn conv(&mut self, x: &Tensor5, w: ParamId, b: ParamId, g: ConvGeometry) -> Result<Tensor5> {
        conv::conv3d(
            x,
            self.params.get(w),
            self.params.get(b).data(),
            g,
            self.path,
        )
    }

    fn up_conv(&mut self, x: &Tensor5, w: ParamId, b: ParamId, g: ConvGeometry) -> Result<Tensor5> {
        conv::conv3d_transpose(
            x,
            self.params.get(w),
            self.params.get(b).data(),
            g,
            None,
            self.path,
        )
    }

    fn prelu(&mut self, x: &Tensor5, slope: ParamId) -> Result<Tensor5> {
        ops::prelu(x, self.params.get(slope).data())
    }

    fn add(&mut self, a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
        ops::add(a, b)
    }

    fn concat(&mut self, a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
        ops::concat_channels(a, b)
    }

    fn tile_channels(&mut self, x: &Tensor5, times: usize) -> Result<Tensor5> {
        ops::tile_channels(x, times)
    }
}
