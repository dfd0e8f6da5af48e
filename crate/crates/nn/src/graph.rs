use std::collections::HashMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::ops::{self, AttnMask, CustomOp, Op};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F: Real> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    value: Option<Tensor<F>>,
    aux: Vec<Tensor<F>>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in topological order. A node is computed as soon as
/// it is added if all of its inputs have values; otherwise it stays pending
/// until [`Graph::evaluate`].
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, NodeId>,
    inputs: HashMap<String, NodeId>,
    pending: bool,
    train: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    /// New graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            inputs: HashMap::new(),
            pending: false,
            train: false,
        }
    }

    pub fn training() -> Self {
        Self {
            train: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, op: Op<F>, value: Option<Tensor<F>>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        if value.is_none() {
            self.pending = true;
        }
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            aux: Vec::new(),
            needs_grad,
        });
        id
    }

    /// Named input slot without a value; bind it with [`Graph::evaluate`].
    pub fn placeholder(&mut self, name: &str) -> NodeId {
        let id = self.leaf(Op::Input(name.to_string()), None, false);
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Named input with an initial value.
    pub fn input(&mut self, name: &str, value: Tensor<F>) -> NodeId {
        let id = self.leaf(Op::Input(name.to_string()), Some(value), false);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(Op::Constant, Some(value), false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.leaf(Op::Param(id), Some(store.get(id).clone()), !store.is_frozen(id));
        self.params.insert(id, n);
        n
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let ready = inputs.iter().all(|i| self.nodes[i.0].value.is_some());
        let (value, aux) = if ready {
            let (v, a) = self.compute(id.0, &op, &inputs)?;
            (Some(v), a)
        } else {
            self.pending = true;
            (None, Vec::new())
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
        });
        Ok(id)
    }

    fn compute(
        &self,
        index: usize,
        op: &Op<F>,
        inputs: &[NodeId],
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let xs: Vec<&Tensor<F>> = inputs
            .iter()
            .map(|i| self.nodes[i.0].value.as_ref().ok_or(NnError::Unevaluated))
            .collect::<Result<_>>()?;
        let (value, aux) = ops::forward(op, &xs).map_err(|detail| NnError::Shape {
            node: index,
            op: op.name(),
            detail,
        })?;
        if !value.all_finite() {
            return Err(NnError::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        Ok((value, aux))
    }

    fn clear_computed(&mut self) {
        for n in &mut self.nodes {
            if !n.op.is_leaf() {
                n.value = None;
                n.aux.clear();
            }
        }
        self.pending = true;
    }

    /// Rebinds an input. Every computed node becomes stale until the next
    /// [`Graph::evaluate`].
    pub fn set_input(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = *self
            .inputs
            .get(name)
            .ok_or_else(|| NnError::UnknownInput(name.to_string()))?;
        self.nodes[id.0].value = Some(value);
        self.clear_computed();
        Ok(())
    }

    /// Re-reads parameter leaves from `store`, invalidating computed nodes.
    pub fn refresh_params(&mut self, store: &ParamStore<F>) {
        for (&pid, &nid) in &self.params {
            self.nodes[nid.0].value = Some(store.get(pid).clone());
        }
        self.clear_computed();
    }

    /// Binds the given inputs and recomputes every node.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor<F>)]) -> Result<()> {
        for (name, value) in bindings {
            let id = *self
                .inputs
                .get(*name)
                .ok_or_else(|| NnError::UnknownInput(name.to_string()))?;
            self.nodes[id.0].value = Some(value.clone());
        }
        for i in 0..self.nodes.len() {
            if let Op::Input(name) = &self.nodes[i].op {
                if self.nodes[i].value.is_none() {
                    return Err(NnError::UnboundInput(name.clone()));
                }
                continue;
            }
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let (v, a) = {
                let n = &self.nodes[i];
                self.compute(i, &n.op, &n.inputs)?
            };
            self.nodes[i].value = Some(v);
            self.nodes[i].aux = a;
        }
        self.pending = false;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<F>> {
        self.nodes[id.0].value.as_ref().ok_or(NnError::Unevaluated)
    }

    pub fn scalar(&self, id: NodeId) -> Result<F> {
        let v = self.value(id)?;
        if v.numel() != 1 {
            return Err(NnError::NonScalarLoss {
                node: id.0,
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn node_inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Cached attention weights `[heads, queries, keys]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&Tensor<F>> {
        match self.nodes[id.0].op {
            Op::Attention { .. } => self.nodes[id.0].aux.first(),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.pending {
            return Err(NnError::Unevaluated);
        }
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut out = Gradients::new();
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                out.accumulate_owned(pid, g);
                continue;
            }
            if node.op.is_leaf() {
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|j| self.nodes[j.0].needs_grad).collect();
            let xs: Vec<&Tensor<F>> = node
                .inputs
                .iter()
                .map(|j| self.nodes[j.0].value.as_ref().expect("evaluated"))
                .collect();
            let value = node.value.as_ref().expect("evaluated");
            let input_grads = ops::backward(&node.op, &xs, value, &node.aux, &g, &need);
            for ((j, gj), needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let (Some(gj), true) = (gj, *needed) else { continue };
                debug_assert_eq!(
                    gj.numel(),
                    self.nodes[j.0].value.as_ref().map_or(0, Tensor::numel),
                    "gradient size for input of {}",
                    node.op.name()
                );
                match &mut grads[j.0] {
                    Some(acc) => acc.add_assign(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(out)
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    /// `x·w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(F::of(s)), vec![x])
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias, vec![x, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Swish, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, vec![x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![x])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::LayerNorm { eps: F::of(eps) }, vec![x, gain, bias])
    }

    /// Looks up rows of `table` by id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::Embedding { ids: ids.to_vec() }, vec![table])
    }

    /// Stacks matrices vertically (along time).
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows, xs.to_vec())
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols, xs.to_vec())
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, len }, vec![x])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, len }, vec![x])
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.push(Op::GatherRows { idx: idx.to_vec() }, vec![x])
    }

    /// Overwrites the listed rows of `seq` with the row vector `replacement`.
    pub fn replace_rows(&mut self, seq: NodeId, replacement: NodeId, positions: &[usize]) -> Result<NodeId> {
        self.push(
            Op::ReplaceRows {
                positions: positions.to_vec(),
            },
            vec![seq, replacement],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape { shape: shape.to_vec() }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![x])
    }

    /// Mean over rows (time pooling): `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows, vec![x])
    }

    /// Per-channel 1-D convolution over time with "same" padding.
    /// `x` is `[time, channels]`, `kernel` is `[width, channels]` with odd width.
    pub fn depthwise_conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::DepthwiseConv1d, vec![x, kernel])
    }

    /// 2-D convolution. `x` is `[C, H, W]`, `kernel` is `[O, C, kh, kw]`,
    /// `bias` has `O` values.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.push(Op::Conv2d { stride, padding }, vec![x, kernel, bias])
    }

    /// `[C, T, F] -> [T, C*F]`.
    pub fn channels_to_time(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelsToTime, vec![x])
    }

    /// Inverted dropout; the identity in evaluation mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let n = self.value(x).map(Tensor::numel).map_err(|_| NnError::Unevaluated)?;
        let keep = F::of(1.0 / (1.0 - rate));
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        self.push(Op::Dropout { mask }, vec![x])
    }

    /// Scaled dot-product attention over `heads` column blocks of already
    /// projected `q`, `k`, `v`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        self.push(Op::Attention { heads, mask }, vec![q, k, v])
    }

    /// Mean label-smoothed cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], smoothing: f64) -> Result<NodeId> {
        self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                smoothing: F::of(smoothing),
            },
            vec![logits],
        )
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<F>>, inputs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Custom(op), inputs.to_vec())
    }
}
