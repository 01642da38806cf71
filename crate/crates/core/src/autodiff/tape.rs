use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Kernel, Saved};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

struct Node {
    value: Tensor,
    kernel: Option<Kernel>,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Saved,
}

/// Ordered record of kernels applied during a forward pass.
///
/// Every node's inputs were recorded before it, so a reverse sweep is a
/// valid topological order. [`Tape::clear`] invalidates all issued handles.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn clear(&mut self) {
        self.id = fresh_id();
        self.nodes.clear();
        self.flops = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar arithmetic operations performed by forward kernels so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            kernel: None,
            inputs: Vec::new(),
            requires_grad,
            saved: Saved::None,
        })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::StaleHandle);
        }
        Ok(v.index)
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` was issued by another tape or before a `clear`.
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v).expect("stale tape handle")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Applies `kernel` to `inputs` and registers the result.
    pub fn record(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = kernels::forward(&kernel, &values)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.flops += out.flops;
        Ok(self.push(Node {
            value: out.value,
            kernel: Some(kernel),
            inputs: idx,
            requires_grad,
            saved: out.saved,
        }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(kernel) = &node.kernel else { continue };
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            if !need.iter().any(|&b| b) {
                grads[i] = Some(g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let contribs = kernels::backward(kernel, &inputs, &node.value, &node.saved, &g, &need);
            grads[i] = Some(g);
            for (&j, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches forward shape")
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    // Thin wrappers over `record`.

    pub fn conv2d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.record(Kernel::Conv2dSame, &[x, kernel])
    }
    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::ChannelAvgPool, &[x])
    }
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::ChannelMaxPool, &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.record(Kernel::Concat { axis }, xs)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::Sigmoid, &[x])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::Sub, &[a, b])
    }
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::Hadamard, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::Div, &[a, b])
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.record(Kernel::Scale(s), &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::Sqrt, &[x])
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::Square, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::Log, &[x])
    }
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.record(Kernel::ClampMin(floor), &[x])
    }
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::LogAddExp, &[a, b])
    }
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        self.record(Kernel::MatVec, &[m, x])
    }
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Kernel::ReduceMean { axis }, &[x])
    }
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Kernel::ReduceSum { axis }, &[x])
    }
    pub fn reduce_var(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Kernel::ReduceVar { axis }, &[x])
    }
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::L2Normalize, &[x])
    }
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Kernel::CosineSim, &[a, b])
    }
    pub fn softmax_xent(&mut self, logits: Var, target: usize, temperature: f64) -> Result<Var> {
        self.record(
            Kernel::SoftmaxXent {
                target,
                temperature,
            },
            &[logits],
        )
    }
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        self.record(Kernel::Stack, xs)
    }
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Kernel::Slice { start, len }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.record(Kernel::Reshape(shape.to_vec()), &[x])
    }
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.record(Kernel::AvgPool2, &[x])
    }
    pub fn expand_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        self.record(Kernel::ExpandChannels(channels), &[x])
    }
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        self.record(Kernel::BroadcastRows(rows), &[x])
    }

    /// Row `i` of `x` along axis 0, with that axis dropped.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, i, 1)?;
        let shape = self.value(x).shape()[1..].to_vec();
        self.reshape(s, &shape)
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce_sum(flat, 0)
    }

    /// Mean of all entries as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce_mean(flat, 0)
    }
}

/// Gradients of a scalar loss, keyed by node.
///
/// Only nodes that require gradients and are reachable from the loss have
/// entries; constants never do.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` has no entry.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }
}
