//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters enter the tape through [`Graph::param`]; after the sweep,
//! [`Graph::into_outputs`] hands their gradients (and any running-statistic
//! updates) back to the [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::losses::ctc;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    log_softmax_in_place, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place, transpose,
    Conv1dGeom, Im2ColGeom, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

type DerivFn<F> = Box<dyn Fn(F) -> F>;

enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Conv1d {
        x: NodeId,
        k: NodeId,
        geom: Conv1dGeom,
    },
    Im2Col {
        x: NodeId,
        geom: Im2ColGeom,
    },
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    MeanCols(NodeId),
    Sum(NodeId),
    PickSum {
        x: NodeId,
        picks: Vec<usize>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Ctc {
        logits: NodeId,
        grad: Vec<F>,
    },
    Map {
        x: NodeId,
        deriv: DerivFn<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients and buffer updates produced by one recorded pass.
#[derive(Debug, Default)]
pub struct GraphOutputs<F> {
    pub grads: Vec<(ParamId, Vec<F>)>,
    pub buffer_updates: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> GraphOutputs<F> {
    /// Accumulates gradients into `store` and overwrites updated buffers.
    pub fn apply(self, store: &mut ParamStore<F>) -> Result<()> {
        for (id, g) in &self.grads {
            store.accumulate_grad(*id, g);
        }
        for (id, v) in &self.buffer_updates {
            store.set_data(*id, v)?;
        }
        Ok(())
    }
}

/// Per-call configuration of a batch-norm node.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

pub struct Graph<'a, F: Scalar> {
    store: Option<&'a ParamStore<F>>,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<ParamId, NodeId>,
    buffer_updates: Vec<(ParamId, Vec<F>)>,
    kink_signature: u64,
    train: bool,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<'a, F: Scalar> Graph<'a, F> {
    /// A graph with no parameter store; inputs come from [`Graph::leaf`].
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            buffer_updates: Vec::new(),
            kink_signature: FNV_OFFSET,
            train: false,
        }
    }

    pub fn with_params(store: &'a ParamStore<F>, train: bool) -> Self {
        Self {
            store: Some(store),
            train,
            ..Self::new()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store.expect("graph was created without a parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a 2-D operand, got {s:?}"))),
        }
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two passes with
    /// equal signatures took the same branch at every kink.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    /// Enters a stored tensor into the tape once; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let store = self.store();
        let trainable = store.kind(id) == ParamKind::Weight;
        let n = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`N` vector to every row of an `M×N` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(n.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// Adds a length-`C` vector to every column of a `C×T` matrix.
    pub fn add_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (c, t) = self.dims2(x, "add_col")?;
        if self.value(col).len() != c {
            return Err(Error::dim(
                "add_col",
                format!("{:?} + column {:?}", self.shape(x), self.shape(col)),
            ));
        }
        let b = self.value(col).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(t.max(1)).enumerate().take(c) {
            for v in chunk {
                *v += b[i];
            }
        }
        Ok(self.push(out, Op::AddCol(x, col), &[x, col]))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let mut h = self.kink_signature;
        for &v in self.value(x).data() {
            h = (h ^ u64::from(v > F::zero())).wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = h;
        self.push(t, Op::Relu(x), &[x])
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(
        &mut self,
        x: NodeId,
        f: impl Fn(F) -> F,
        df: impl Fn(F) -> F + 'static,
    ) -> NodeId {
        let t = self.value(x).map(f);
        self.push(
            t,
            Op::Map {
                x,
                deriv: Box::new(df),
            },
            &[x],
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).log_softmax();
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut t = self.value(x).clone();
        let cols = *t.shape().last().unwrap_or(&1);
        if cols > 0 {
            for row in t.data_mut().chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Normalizes each row over its last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "feature size {d} vs gain {:?} / bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = F::of(eps);
        let dn = F::of(d as f64);
        let xv = self.value(x).data();
        let rows = xv.len().checked_div(d).unwrap_or(0);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let out: Vec<F> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Batch normalization of a `B×C×T` tensor, per channel over `B` and `T`.
    ///
    /// In training graphs the batch statistics are used and the running
    /// statistics update is queued in the graph outputs; otherwise the stored
    /// running statistics are used.
    pub fn batch_norm1d(&mut self, x: NodeId, p: &BatchNormParams) -> Result<NodeId> {
        let [b, c, t] = self.shape(x)[..] else {
            return Err(Error::dim(
                "batch_norm1d",
                format!("expected B×C×T, got {:?}", self.shape(x)),
            ));
        };
        let store = self.store();
        if store.get(p.gain).len() != c || store.get(p.bias).len() != c {
            return Err(Error::dim(
                "batch_norm1d",
                format!("{c} channels vs gain {:?}", store.get(p.gain).shape()),
            ));
        }
        let count = b * t;
        let train = self.train;
        if train && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let eps = F::of(p.eps);
        let xv = self.value(x).data();
        let idx = |bi: usize, ci: usize, ti: usize| (bi * c + ci) * t + ti;
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        if train {
            let n = F::of(count as f64);
            for ci in 0..c {
                let mut s = F::zero();
                for bi in 0..b {
                    for ti in 0..t {
                        s += xv[idx(bi, ci, ti)];
                    }
                }
                let m = s / n;
                let mut v = F::zero();
                for bi in 0..b {
                    for ti in 0..t {
                        let d = xv[idx(bi, ci, ti)] - m;
                        v += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = v / n;
            }
            let mom = F::of(p.momentum);
            let unbias = F::of(count as f64 / (count as f64 - 1.0));
            let rm = store.get(p.running_mean).data();
            let rv = store.get(p.running_var).data();
            let new_mean = (0..c).map(|i| (F::one() - mom) * rm[i] + mom * mean[i]).collect();
            let new_var = (0..c)
                .map(|i| (F::one() - mom) * rv[i] + mom * var[i] * unbias)
                .collect();
            self.buffer_updates.push((p.running_mean, new_mean));
            self.buffer_updates.push((p.running_var, new_var));
        } else {
            mean.copy_from_slice(store.get(p.running_mean).data());
            var.copy_from_slice(store.get(p.running_var).data());
        }
        let inv_std: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gain = self.param(p.gain);
        let bias = self.param(p.bias);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let xv = self.value(x).data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let i = idx(bi, ci, ti);
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = h * gv[ci] + bv[ci];
                }
            }
        }
        let tensor = Tensor::new(vec![b, c, t], out)?;
        Ok(self.push(
            tensor,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                train,
            },
            &[x, gain, bias],
        ))
    }

    /// Cross-correlation of a `C_in×T` input with `C_out×C_in×K` kernels.
    pub fn conv1d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = Conv1dGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let out = geom.forward(self.value(x).data(), self.value(k).data());
        let t = Tensor::new(vec![geom.c_out, geom.t_out], out)?;
        Ok(self.push(t, Op::Conv1d { x, k, geom }, &[x, k]))
    }

    /// Unfolds `L×H×W×C` frames into `(L·H'·W')×(K·K·C)` patch rows.
    pub fn im2col(&mut self, x: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = Im2ColGeom::new(self.shape(x), kernel, stride, padding)?;
        let out = geom.forward(self.value(x).data());
        let t = Tensor::new(vec![geom.rows(), geom.patch_len()], out)?;
        Ok(self.push(t, Op::Im2Col { x, geom }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need at least one input and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&i| self.dims2(i, "concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::dim("concat", format!("column counts differ: {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &i in inputs {
                data.extend_from_slice(self.value(i).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::dim("concat", format!("row counts differ: {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &i in inputs {
                    let v = self.value(i);
                    let c = v.shape()[1];
                    data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` consecutive rows (`axis` 0) or columns (`axis` 1) of a 2-D tensor.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) out of range for axis {axis} of {:?}", start + len, self.shape(x)),
            ));
        }
        let v = self.value(x).data();
        let t = if axis == 0 {
            Tensor::new(vec![len, c], v[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&v[row * c + start..row * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean over the columns of a `C×T` matrix, giving `C×1`.
    pub fn mean_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "mean_cols")?;
        if c == 0 {
            return Err(Error::dim("mean_cols", "cannot average zero columns"));
        }
        let v = self.value(x).data();
        let n = F::of(c as f64);
        let data = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().copied().sum::<F>() / n)
            .collect();
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::MeanCols(x), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ_i x[i, picks[i]]` over a 2-D tensor.
    pub fn pick_sum(&mut self, x: NodeId, picks: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "pick_sum")?;
        if picks.len() != r {
            return Err(Error::Alignment(format!(
                "{} targets for {r} prediction rows",
                picks.len()
            )));
        }
        if let Some(&bad) = picks.iter().find(|&&p| p >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let v = self.value(x).data();
        let s = picks.iter().enumerate().map(|(i, &p)| v[i * c + p]).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::PickSum {
                x,
                picks: picks.to_vec(),
            },
            &[x],
        ))
    }

    /// Gathers rows of a `V×D` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Label {
                label: bad,
                classes: v,
            });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// CTC negative log-likelihood of `target` given `T×V` logits (normalized
    /// internally). Unrealizable targets are a gradient error; callers skip them.
    pub fn ctc_loss(&mut self, logits: NodeId, target: &[usize], blank: usize) -> Result<NodeId> {
        let (t, v) = self.dims2(logits, "ctc_loss")?;
        let mut lp = self.value(logits).data().to_vec();
        for row in lp.chunks_mut(v) {
            log_softmax_in_place(row);
        }
        let log_probs = Tensor::new(vec![t, v], lp)?;
        let (loss, grad) = ctc::loss_and_grad(&log_probs, target, blank)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Ctc {
                logits,
                grad: grad.into_data(),
            },
            &[logits],
        ))
    }

    /// Linear combination `Σ c_i · x_i` of same-shape nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, F)]) -> Result<NodeId> {
        let (&(first, c0), rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("weighted_sum of no terms".into()))?;
        let mut acc = self.scale(first, c0);
        for &(x, c) in rest {
            let s = self.scale(x, c);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut self.grads, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward seed with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// Consumes the graph, releasing the borrow of the parameter store.
    pub fn into_outputs(self) -> GraphOutputs<F> {
        let mut grads: Vec<(ParamId, Vec<F>)> = self
            .params
            .iter()
            .filter(|(_, n)| self.nodes[n.0].requires_grad)
            .filter_map(|(&p, n)| self.grads.get(n.0).cloned().flatten().map(|g| (p, g)))
            .collect();
        grads.sort_by_key(|(p, _)| *p);
        GraphOutputs {
            grads,
            buffer_updates: self.buffer_updates,
        }
    }

}

fn acc<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: NodeId,
    f: impl FnOnce(&mut [F], &Tensor<F>),
) {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[id.0].get_or_insert_with(|| vec![F::zero(); node.value.len()]);
    f(buf, &node.value);
}

fn propagate<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
let val = |id: NodeId| &nodes[id.0].value;
let needs = |id: NodeId| nodes[id.0].requires_grad;
let out_shape = nodes[i].value.shape();
match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if needs(a) {
                let bv = val(b).data();
                acc(nodes, grads, a, |ga, _| matmul_bt_acc(g, bv, ga, m, n, k));
            }
            if needs(b) {
                let av = val(a).data();
                acc(nodes, grads, b, |gb, _| matmul_at_acc(av, g, gb, m, k, n));
            }
        }
        &Op::MatMulBt(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[0];
            if needs(a) {
                let bv = val(b).data();
                acc(nodes, grads, a, |ga, _| matmul_acc(g, bv, ga, m, n, k));
            }
            if needs(b) {
                let av = val(a).data();
                acc(nodes, grads, b, |gb, _| matmul_at_acc(g, av, gb, m, n, k));
            }
        }
        &Op::Transpose(x) => {
            let gt = transpose(g, out_shape[0], out_shape[1]);
            acc(nodes, grads, x, |gx, _| add_into(gx, &gt));
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, |ga, _| add_into(ga, g));
            acc(nodes, grads, b, |gb, _| add_into(gb, g));
        }
        &Op::Mul(a, b) => {
            let av = val(a).data();
            let bv = val(b).data();
            acc(nodes, grads, a, |ga, _| {
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * y;
                }
            });
            acc(nodes, grads, b, |gb, _| {
                for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * x;
                }
            });
        }
        &Op::AddRow(x, row) => {
            acc(nodes, grads, x, |gx, _| add_into(gx, g));
            let n = out_shape[1];
            acc(nodes, grads, row, |gr, _| {
                for chunk in g.chunks(n.max(1)) {
                    add_into(gr, chunk);
                }
            });
        }
        &Op::AddCol(x, col) => {
            acc(nodes, grads, x, |gx, _| add_into(gx, g));
            let t = out_shape[1];
            acc(nodes, grads, col, |gc, _| {
                for (o, chunk) in gc.iter_mut().zip(g.chunks(t.max(1))) {
                    *o += chunk.iter().copied().sum::<F>();
                }
            });
        }
        &Op::Scale(x, c) => acc(nodes, grads, x, |gx, _| {
            for (o, &gi) in gx.iter_mut().zip(g) {
                *o += c * gi;
            }
        }),
        &Op::Relu(x) => acc(nodes, grads, x, |gx, xv| {
            for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                if v > F::zero() {
                    *o += gi;
                }
            }
        }),
        Op::Map { x, deriv } => acc(nodes, grads, *x, |gx, xv| {
            for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                *o += gi * deriv(v);
            }
        }),
        &Op::LogSoftmax(x) => {
            let y = nodes[i].value.data();
            let cols = *out_shape.last().unwrap_or(&1);
            acc(nodes, grads, x, |gx, _| {
                for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let s: F = gr.iter().copied().sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi += gi - yi.exp() * s;
                    }
                }
            });
        }
        &Op::Softmax(x) => {
            let y = nodes[i].value.data();
            let cols = *out_shape.last().unwrap_or(&1);
            acc(nodes, grads, x, |gx, _| {
                for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi += yi * (gi - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = *out_shape.last().unwrap_or(&1);
            let gv = val(*gain).data();
            acc(nodes, grads, *gain, |gg, _| {
                for (k, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    gg[k % d] += gi * h;
                }
            });
            acc(nodes, grads, *bias, |gb, _| {
                for (k, &gi) in g.iter().enumerate() {
                    gb[k % d] += gi;
                }
            });
            let dn = F::of(d as f64);
            acc(nodes, grads, *x, |gx, _| {
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let gr = &g[span.clone()];
                    let hr = &xhat[span.clone()];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        s1 += gh;
                        s2 += gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        gx[r * d + j] += is / dn * (dn * gh - s1 - hr[j] * s2);
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            train,
        } => {
            let (b, c, t) = (out_shape[0], out_shape[1], out_shape[2]);
            let idx = |bi: usize, ci: usize, ti: usize| (bi * c + ci) * t + ti;
            let gv = val(*gain).data();
            acc(nodes, grads, *gain, |gg, _| {
                for k in 0..g.len() {
                    gg[(k / t) % c] += g[k] * xhat[k];
                }
            });
            acc(nodes, grads, *bias, |gb, _| {
                for k in 0..g.len() {
                    gb[(k / t) % c] += g[k];
                }
            });
            let train = *train;
            acc(nodes, grads, *x, |gx, _| {
                let n = F::of((b * t) as f64);
                for ci in 0..c {
                    let is = inv_std[ci];
                    if !train {
                        for bi in 0..b {
                            for ti in 0..t {
                                let k = idx(bi, ci, ti);
                                gx[k] += g[k] * gv[ci] * is;
                            }
                        }
                        continue;
                    }
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for bi in 0..b {
                        for ti in 0..t {
                            let k = idx(bi, ci, ti);
                            let gh = g[k] * gv[ci];
                            s1 += gh;
                            s2 += gh * xhat[k];
                        }
                    }
                    for bi in 0..b {
                        for ti in 0..t {
                            let k = idx(bi, ci, ti);
                            let gh = g[k] * gv[ci];
                            gx[k] += is / n * (n * gh - s1 - xhat[k] * s2);
                        }
                    }
                }
            });
        }
        &Op::Conv1d { x, k, geom } => {
            let xv = val(x).data();
            let kv = val(k).data();
            if needs(x) {
                acc(nodes, grads, x, |gx, _| geom.backward(xv, kv, g, Some(gx), None));
            }
            if needs(k) {
                acc(nodes, grads, k, |gk, _| geom.backward(xv, kv, g, None, Some(gk)));
            }
        }
        &Op::Im2Col { x, geom } => acc(nodes, grads, x, |gx, _| geom.backward(g, gx)),
        &Op::Reshape(x) => acc(nodes, grads, x, |gx, _| add_into(gx, g)),
        Op::Concat { inputs, axis } => {
            let cols = out_shape[1];
            let mut offset = 0;
            for &inp in inputs {
                let (r, c) = (val(inp).shape()[0], val(inp).shape()[1]);
                if *axis == 0 {
                    let part = &g[offset * cols..(offset + r) * cols];
                    acc(nodes, grads, inp, |gi, _| add_into(gi, part));
                    offset += r;
                } else {
                    let off = offset;
                    acc(nodes, grads, inp, |gi, _| {
                        for row in 0..r {
                            add_into(
                                &mut gi[row * c..(row + 1) * c],
                                &g[row * cols + off..row * cols + off + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
        }
        &Op::Slice { x, axis, start } => {
            let (rows, len) = (out_shape[0], out_shape[1]);
            let c = val(x).shape()[1];
            acc(nodes, grads, x, |gx, _| {
                if axis == 0 {
                    add_into(&mut gx[start * c..(start + rows) * c], g);
                } else {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * c + start..r * c + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            });
        }
        &Op::MeanCols(x) => {
            let c = val(x).shape()[1];
            let n = F::of(c as f64);
            acc(nodes, grads, x, |gx, _| {
                for (r, &gi) in g.iter().enumerate() {
                    for o in &mut gx[r * c..(r + 1) * c] {
                        *o += gi / n;
                    }
                }
            });
        }
        &Op::Sum(x) => acc(nodes, grads, x, |gx, _| {
            for o in gx.iter_mut() {
                *o += g[0];
            }
        }),
        Op::PickSum { x, picks } => {
            let c = val(*x).shape()[1];
            acc(nodes, grads, *x, |gx, _| {
                for (r, &p) in picks.iter().enumerate() {
                    gx[r * c + p] += g[0];
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = out_shape[1];
            acc(nodes, grads, *table, |gt, _| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::Ctc { logits, grad } => acc(nodes, grads, *logits, |gx, _| {
            for (o, &gi) in gx.iter_mut().zip(grad) {
                *o += g[0] * gi;
            }
        }),
}
}


fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn three_uses_accumulate_threefold() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]), true);
        let s = g.add(x, x).unwrap();
        let s = g.add(s, x).unwrap();
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_sum_gradient_matches_rule() {
        // d/dA sum(A·B) = 1·Bᵀ, d/dB = Aᵀ·1
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = g.leaf(t(&[3, 2], &[1., -1., 2., 0.5, -3., 4.]), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let row_sums_b: Vec<f64> = vec![0.0, 2.5, 1.0];
        for r in 0..2 {
            assert_eq!(&g.grad(a).unwrap()[r * 3..r * 3 + 3], &row_sums_b[..]);
        }
        assert_eq!(g.grad(b).unwrap(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(t(&[2], &[1., 1.]));
        let bias = g.constant(t(&[2], &[0., 0.]));
        let x = g.constant(t(&[2, 2], &[5., 5., 1., 3.]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-9 && (v[3] - 1.0).abs() < 1e-9);
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
        let short = g.constant(t(&[3], &[1., 1., 1.]));
        assert!(matches!(
            g.layer_norm(x, short, bias, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn log_softmax_symmetry_and_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let y = g.log_softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        let a = t(&[1, 3], &[0.3, -1.2, 2.0]).log_softmax();
        let b = t(&[1, 3], &[100.3, 98.8, 102.0]).log_softmax();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let left = g.slice(x, 1, 0, 1).unwrap();
        let right = g.slice(x, 1, 1, 2).unwrap();
        let y = g.concat(&[right, left], 1).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3., 1., 5., 6., 4.]);
        let w = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 1., 2., 6., 4., 5.]);
    }

    #[test]
    fn kink_signature_tracks_relu_branches() {
        let sig = |v: f64| {
            let mut g = Graph::new();
            let x = g.constant(t(&[2], &[v, 1.0]));
            g.relu(x);
            g.kink_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
