//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order: forward walks it front to back, backward walks it back
//! to front and accumulates parent gradients in a fixed order, so gradients
//! are bit-reproducible for a given build.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, AttentionDims, AttentionProbs, LayerNormStats, LossSaved};
use super::{Result, Scalar, Tensor, TensorError};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query attention window: row `i` may attend to keys
/// `window_start[i]..=i`. Causal masking is implied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    window_start: Arc<[usize]>,
}

impl AttentionMask {
    pub fn causal(seq: usize) -> Self {
        Self {
            window_start: vec![0; seq].into(),
        }
    }

    /// Block-diagonal causal mask from per-position segment ids. Segments
    /// must be contiguous runs; a position attends only inside its own run.
    pub fn from_segments(segments: &[u32]) -> Result<Self> {
        let mut ws = Vec::with_capacity(segments.len());
        let mut seen = std::collections::HashSet::new();
        let mut start = 0;
        for (i, &s) in segments.iter().enumerate() {
            if i == 0 || segments[i - 1] != s {
                if !seen.insert(s) {
                    return Err(TensorError::Invalid {
                        op: "attention_mask",
                        detail: format!("segment {s} is not contiguous"),
                    });
                }
                start = i;
            }
            ws.push(start);
        }
        Ok(Self {
            window_start: ws.into(),
        })
    }

    pub fn from_window_start(window_start: Vec<usize>) -> Result<Self> {
        if let Some((i, &s)) = window_start.iter().enumerate().find(|(i, &s)| s > *i) {
            return Err(TensorError::Invalid {
                op: "attention_mask",
                detail: format!("window start {s} after query position {i}"),
            });
        }
        Ok(Self {
            window_start: window_start.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.window_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_start.is_empty()
    }

    pub fn window_start(&self) -> &[usize] {
        &self.window_start
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query && key >= self.window_start[query]
    }
}

/// Source of named input tensors for [`Graph::forward`].
pub trait Feed<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T> Feed<T> for BTreeMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Feed<T> for HashMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Feed<T> for () {
    fn tensor(&self, _: &str) -> Option<&Tensor<T>> {
        None
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input { name: String, requires_grad: bool },
    Constant(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
        eps: T,
    },
    Embedding {
        table: NodeId,
        ids: Arc<[usize]>,
    },
    Rope {
        x: NodeId,
        heads: usize,
        head_dim: usize,
        positions: Arc<[usize]>,
        base: f64,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
        mask: AttentionMask,
    },
    ConcatRows(Vec<NodeId>),
    LmLoss {
        logits: NodeId,
        targets: Arc<[usize]>,
        mask: Arc<[T]>,
        normalizer: T,
        z_coef: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
enum Saved<T> {
    Nothing,
    LayerNorm(LayerNormStats<T>),
    Attention(AttentionProbs<T>),
    Loss { ce: T, z: T, saved: LossSaved<T> },
}

/// Gradients of a backward pass, keyed by input name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Element-wise accumulation, used for gradient accumulation over
    /// micro-batches. Names missing on either side are carried over.
    pub fn accumulate(&mut self, other: Gradients<T>) -> Result<()> {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(mine) => mine.add_assign(&g)?,
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
        Ok(())
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    values: Option<Vec<Tensor<T>>>,
    saved: Vec<Saved<T>>,
    exec: Option<Exec>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: HashMap::new(),
            outputs: Vec::new(),
            values: None,
            saved: Vec::new(),
            exec: None,
        }
    }

    /// Forces one execution strategy for every op instead of sizing per op.
    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = Some(exec);
    }

    fn exec_for(&self, work: usize) -> Exec {
        self.exec.unwrap_or_else(|| Exec::auto(work))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Constant(_) => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.values = None;
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input with a fixed shape.
    pub fn input(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                requires_grad,
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Names of inputs declared with `requires_grad`, in declaration order.
    pub fn grad_inputs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input {
                    name,
                    requires_grad: true,
                } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    /// Names a node as a graph output.
    pub fn output(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| TensorError::UnknownOutput(name.to_string()))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn matrix(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            other => Err(invalid(op, format!("expected rank-2 operand, got {other:?}"))),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    /// Adds a `[n]` vector to every row of `[.., n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sa.last() != sr.first() {
            return Err(mismatch("add_row", sa, sr));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::AddRow(a, row), shape))
    }

    /// `[m, k] x [k, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    /// `[m, k] x [n, k]^T`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix("matmul_bt", a)?;
        let (n, k2) = self.matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        Ok(self.push(Op::MatMulBt(a, b), vec![m, n]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.last().copied().unwrap_or(0) == 0 {
            return Err(invalid("softmax", "empty last dimension"));
        }
        Ok(self.push(Op::Softmax(a), shape))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
        eps: T,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(invalid("layer_norm", "zero-length feature dimension"));
        }
        if self.shape(gain) != [d] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(mismatch("layer_norm", &shape, self.shape(b)));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape))
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: NodeId, ids: Arc<[usize]>) -> Result<NodeId> {
        let (vocab, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(
                "embedding",
                format!("token id {bad} out of range for vocabulary {vocab}"),
            ));
        }
        let rows = ids.len();
        Ok(self.push(Op::Embedding { table, ids }, vec![rows, d]))
    }

    pub fn rope(
        &mut self,
        x: NodeId,
        heads: usize,
        head_dim: usize,
        positions: Arc<[usize]>,
        base: f64,
    ) -> Result<NodeId> {
        if !head_dim.is_multiple_of(2) {
            return Err(invalid("rope", format!("head_dim {head_dim} is odd")));
        }
        if !(base > 0.0) {
            return Err(invalid("rope", format!("base {base} must be positive")));
        }
        let (rows, width) = self.matrix("rope", x)?;
        if width != heads * head_dim {
            return Err(mismatch("rope", &[rows, width], &[rows, heads * head_dim]));
        }
        if positions.len() != rows {
            return Err(mismatch("rope", &[rows], &[positions.len()]));
        }
        Ok(self.push(
            Op::Rope {
                x,
                heads,
                head_dim,
                positions,
                base,
            },
            vec![rows, width],
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
        mask: AttentionMask,
    ) -> Result<NodeId> {
        if kv_heads == 0 || !heads.is_multiple_of(kv_heads) {
            return Err(invalid(
                "attention",
                format!("{heads} query heads not divisible into {kv_heads} kv heads"),
            ));
        }
        let (seq, qw) = self.matrix("attention", q)?;
        if qw != heads * head_dim {
            return Err(mismatch("attention", &[seq, qw], &[seq, heads * head_dim]));
        }
        let kv_shape = [seq, kv_heads * head_dim];
        if self.shape(k) != kv_shape {
            return Err(mismatch("attention", self.shape(k), &kv_shape));
        }
        if self.shape(v) != kv_shape {
            return Err(mismatch("attention", self.shape(v), &kv_shape));
        }
        if mask.len() != seq {
            return Err(mismatch("attention", &[seq], &[mask.len()]));
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                head_dim,
                mask,
            },
            vec![seq, qw],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "nothing to concatenate"))?;
        let (_, d) = self.matrix("concat_rows", *first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = self.matrix("concat_rows", p)?;
            if dp != d {
                return Err(mismatch("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, d]))
    }

    /// Masked mean cross-entropy with z-loss over `[rows, vocab]` logits.
    /// `normalizer` defaults to the number of unmasked rows.
    pub fn lm_loss(
        &mut self,
        logits: NodeId,
        targets: Arc<[usize]>,
        mask: Arc<[T]>,
        normalizer: Option<T>,
        z_coef: T,
    ) -> Result<NodeId> {
        let (rows, vocab) = self.matrix("lm_loss", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(mismatch("lm_loss", &[rows], &[targets.len(), mask.len()]));
        }
        if mask.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(invalid("lm_loss", "loss mask must be 0 or 1"));
        }
        let count = mask.iter().filter(|&&m| m == T::one()).count();
        if count == 0 {
            return Err(invalid("lm_loss", "every position is masked"));
        }
        if let Some(bad) = targets
            .iter()
            .zip(mask.iter())
            .find(|(&t, &m)| m == T::one() && t >= vocab)
        {
            return Err(invalid(
                "lm_loss",
                format!("target {} out of range for vocabulary {vocab}", bad.0),
            ));
        }
        let normalizer = normalizer.unwrap_or_else(|| T::of(count as f64));
        Ok(self.push(
            Op::LmLoss {
                logits,
                targets,
                mask,
                normalizer,
                z_coef,
            },
            vec![],
        ))
    }

    /// Evaluates every node and keeps the values for [`Graph::backward`].
    pub fn forward(&mut self, feed: &impl Feed<T>) -> Result<()> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, s) = self.eval(node, &values, feed)?;
            values.push(value);
            saved.push(s);
        }
        self.values = Some(values);
        self.saved = saved;
        Ok(())
    }

    /// [`Graph::forward`] followed by a copy of every named output.
    pub fn run(&mut self, feed: &impl Feed<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        self.forward(feed)?;
        let values = self.values.as_ref().expect("just evaluated");
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), values[id.0].clone()))
            .collect())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .as_ref()
            .map(|v| &v[id.0])
            .ok_or(TensorError::NotEvaluated)
    }

    /// `(ce, z)` components of an evaluated loss node.
    pub fn loss_parts(&self, id: NodeId) -> Result<(T, T)> {
        match self.saved.get(id.0) {
            Some(Saved::Loss { ce, z, .. }) if self.values.is_some() => Ok((*ce, *z)),
            _ if self.values.is_none() => Err(TensorError::NotEvaluated),
            _ => Err(invalid("loss_parts", "node is not a loss")),
        }
    }

    fn eval(
        &self,
        node: &Node<T>,
        values: &[Tensor<T>],
        feed: &impl Feed<T>,
    ) -> Result<(Tensor<T>, Saved<T>)> {
        let val = |id: NodeId| &values[id.0];
        let shaped = |data: Vec<T>| Tensor::new(node.shape.clone(), data);
        let out = match &node.op {
            Op::Input { name, .. } => {
                let t = feed
                    .tensor(name)
                    .ok_or_else(|| TensorError::MissingInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(mismatch("input", &node.shape, t.shape()));
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) => shaped(zip_map(val(*a), val(*b), |x, y| x + y))?,
            Op::Sub(a, b) => shaped(zip_map(val(*a), val(*b), |x, y| x - y))?,
            Op::Mul(a, b) => shaped(zip_map(val(*a), val(*b), |x, y| x * y))?,
            Op::Scale(a, f) => shaped(val(*a).data().iter().map(|&x| x * *f).collect())?,
            Op::AddRow(a, r) => {
                let row = val(*r).data();
                let d = row.len();
                let mut data = val(*a).data().to_vec();
                for chunk in data.chunks_exact_mut(d) {
                    for (x, &b) in chunk.iter_mut().zip(row) {
                        *x = *x + b;
                    }
                }
                shaped(data)?
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let exec = self.exec_for(m * k * n);
                shaped(kernels::matmul(exec, val(*a).data(), val(*b).data(), m, k, n))?
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let exec = self.exec_for(m * k * n);
                shaped(kernels::matmul_bt(exec, val(*a).data(), val(*b).data(), m, k, n))?
            }
            Op::Sum(a) => Tensor::scalar(val(*a).data().iter().copied().sum()),
            Op::Softmax(a) => {
                let d = val(*a).last_dim();
                shaped(kernels::softmax_rows(val(*a).data(), d))?
            }
            Op::Gelu(a) => shaped(val(*a).data().iter().map(|&x| kernels::gelu(x)).collect())?,
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = val(*x).last_dim();
                let (y, stats) = kernels::layer_norm_forward(
                    val(*x).data(),
                    d,
                    val(*gain).data(),
                    bias.map(|b| val(b).data()),
                    *eps,
                );
                return Ok((shaped(y)?, Saved::LayerNorm(stats)));
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.last_dim();
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids.iter() {
                    data.extend_from_slice(t.row(i));
                }
                shaped(data)?
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                positions,
                base,
            } => shaped(kernels::rope(
                val(*x).data(),
                *heads,
                *head_dim,
                positions,
                *base,
                false,
            ))?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                head_dim,
                mask,
            } => {
                let dims = AttentionDims {
                    seq: mask.len(),
                    heads: *heads,
                    kv_heads: *kv_heads,
                    head_dim: *head_dim,
                };
                let exec = self.exec.unwrap_or(Exec::Parallel);
                let (out, probs) = kernels::attention_forward(
                    exec,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    dims,
                    mask.window_start(),
                );
                return Ok((shaped(out)?, Saved::Attention(probs)));
            }
            Op::ConcatRows(parts) => {
                let mut data = Vec::with_capacity(node.shape.iter().product());
                for p in parts {
                    data.extend_from_slice(val(*p).data());
                }
                shaped(data)?
            }
            Op::LmLoss {
                logits,
                targets,
                mask,
                normalizer,
                z_coef,
            } => {
                let vocab = self.shape(*logits)[1];
                let (total, ce, z, saved) = kernels::lm_loss_forward(
                    val(*logits).data(),
                    vocab,
                    targets,
                    mask,
                    *normalizer,
                    *z_coef,
                );
                return Ok((Tensor::scalar(total), Saved::Loss { ce, z, saved }));
            }
        };
        Ok((out, Saved::Nothing))
    }

    /// Backpropagates from `seeds` and returns gradients of every input
    /// declared with `requires_grad`.
    pub fn backward(&self, seeds: &[(NodeId, Tensor<T>)]) -> Result<Gradients<T>> {
        let values = self.values.as_ref().ok_or(TensorError::NotEvaluated)?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(mismatch("backward", self.shape(*id), seed.shape()));
            }
            accumulate(&mut grads, *id, seed.data().to_vec());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Input { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, values, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                requires_grad: true,
            } = &node.op
            {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.shape.iter().product()]);
                out.insert(name.clone(), Tensor::new(node.shape.clone(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Backward from a named output using the given seed tensors.
    pub fn backward_named(&self, seeds: &BTreeMap<String, Tensor<T>>) -> Result<Gradients<T>> {
        let mut list = Vec::with_capacity(seeds.len());
        for (name, seed) in seeds {
            list.push((self.output_id(name)?, seed.clone()));
        }
        self.backward(&list)
    }

    /// Backward from a scalar node with seed 1.
    pub fn backward_scalar(&self, id: NodeId) -> Result<Gradients<T>> {
        if !self.shape(id).iter().all(|&d| d == 1) {
            return Err(TensorError::NonScalar(self.shape(id).to_vec()));
        }
        self.backward(&[(id, Tensor::full(self.shape(id).to_vec(), T::one()))])
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[T],
        values: &[Tensor<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let val = |id: NodeId| values[id.0].data();
        match &node.op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|&x| x * *f).collect()),
            Op::AddRow(a, r) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*r) {
                    let d = self.shape(*r)[0];
                    let mut acc = vec![T::zero(); d];
                    for chunk in g.chunks_exact(d) {
                        for (o, &x) in acc.iter_mut().zip(chunk) {
                            *o = *o + x;
                        }
                    }
                    accumulate(grads, *r, acc);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let exec = self.exec_for(m * k * n);
                if needs(*a) {
                    accumulate(grads, *a, kernels::matmul_bt(exec, g, val(*b), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, kernels::matmul_at(exec, val(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let exec = self.exec_for(m * k * n);
                if needs(*a) {
                    accumulate(grads, *a, kernels::matmul(exec, g, val(*b), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, kernels::matmul_at(exec, g, val(*a), m, n, k));
                }
            }
            Op::Sum(a) => {
                let n = values[a.0].len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Softmax(a) => {
                let d = values[a.0].last_dim();
                let y = values[idx].data();
                accumulate(grads, *a, kernels::softmax_rows_backward(y, g, d));
            }
            Op::Gelu(a) => {
                let dx = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| gy * kernels::gelu_grad(x))
                    .collect();
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let Saved::LayerNorm(stats) = &self.saved[idx] else {
                    unreachable!("layer norm without saved stats")
                };
                let d = values[x.0].last_dim();
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(val(*x), d, val(*gain), stats, g);
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        accumulate(grads, *b, dbias);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let t = &values[table.0];
                let d = t.last_dim();
                let mut dt = vec![T::zero(); t.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o = *o + x;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                positions,
                base,
            } => {
                let dx = kernels::rope(g, *heads, *head_dim, positions, *base, true);
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                head_dim,
                mask,
            } => {
                let Saved::Attention(probs) = &self.saved[idx] else {
                    unreachable!("attention without saved probabilities")
                };
                let dims = AttentionDims {
                    seq: mask.len(),
                    heads: *heads,
                    kv_heads: *kv_heads,
                    head_dim: *head_dim,
                };
                let exec = self.exec.unwrap_or(Exec::Parallel);
                let (dq, dk, dv) = kernels::attention_backward(
                    exec,
                    val(*q),
                    val(*k),
                    val(*v),
                    dims,
                    mask.window_start(),
                    probs,
                    g,
                );
                if needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = values[p.0].len();
                    if needs(*p) {
                        accumulate(grads, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::LmLoss {
                logits,
                targets,
                mask,
                normalizer,
                z_coef,
            } => {
                let Saved::Loss { saved, .. } = &self.saved[idx] else {
                    unreachable!("loss without saved partitions")
                };
                let vocab = self.shape(*logits)[1];
                let d = kernels::lm_loss_backward(
                    val(*logits),
                    vocab,
                    targets,
                    mask,
                    *normalizer,
                    *z_coef,
                    saved,
                    g[0],
                );
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn parents<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Input { .. } | Op::Constant(_) => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulBt(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Sum(a) | Op::Softmax(a) | Op::Gelu(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => {
            let mut v = vec![*x, *gain];
            v.extend(bias);
            v
        }
        Op::Embedding { table, .. } => vec![*table],
        Op::Rope { x, .. } => vec![*x],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::ConcatRows(parts) => parts.clone(),
        Op::LmLoss { logits, .. } => vec![*logits],
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
