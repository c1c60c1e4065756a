//! Reverse-mode differentiation over a per-batch tape.
//!
//! A [`Graph`] is rebuilt for every batch: ops evaluate eagerly at insertion
//! and record what the backward pass needs. Sequence models with growing
//! state (append-only memories, per-step attention) fall out naturally since
//! the graph topology can differ from batch to batch.

use crate::error::{NnError, Result};
use crate::ops::{
    self, batchnorm_with_saved, conv2d_with_cols, im2col, lstm_cell_with_saved, ConvGeom,
};
use crate::params::ParamStore;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Element, Tensor};
use std::collections::BTreeMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// x [b,n] scaled per row by s [b,1].
    MulCol {
        x: NodeId,
        s: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    /// Row-wise dot product of two [b,n] tensors -> [b,1].
    RowDot {
        a: NodeId,
        b: NodeId,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start_row: usize,
    },
    Reshape {
        x: NodeId,
    },
    /// Replicate a [1,n] (or [n]) tensor into `copies` rows.
    BroadcastRows {
        x: NodeId,
    },
    Lstm {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
        gates: Tensor<T>,
        tanh_c: Tensor<T>,
    },
    Conv {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        cols: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    ConvT {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Tensor<T>,
        reduce: usize,
        training: bool,
    },
    CeMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    MseMean {
        pred: NodeId,
        target: NodeId,
    },
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    grad_enabled: bool,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; backward state is not kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked leaf (used for inputs under differentiation tests).
    pub fn var(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls with the same path
    /// return the same node, so weight sharing accumulates gradients.
    pub fn param(&mut self, store: &ParamStore<T>, path: &str) -> NodeId {
        if let Some(&id) = self.params.get(path) {
            return id;
        }
        let entry = store
            .get(path)
            .unwrap_or_else(|e| panic!("graph param: {e}"));
        let id = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.params.insert(path.to_string(), id);
        id
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut y = matmul_nt(self.value(x), self.value(w));
        ops::add_bias_rows(&mut y, self.value(b));
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(y, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(ops::sigmoid_scalar);
        let rg = self.requires(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.tanh());
        let rg = self.requires(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = ops::softmax(self.value(x));
        let rg = self.requires(x);
        self.push(y, Op::Softmax { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(y, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(y, Op::Mul { a, b }, rg)
    }

    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).as_matrix();
        assert_eq!(self.value(s).as_matrix(), (rows, 1), "mul_col scale shape");
        let mut y = self.value(x).clone();
        {
            let sd = self.nodes[s.0].value.data();
            let yd = y.data_mut();
            for r in 0..rows {
                let sv = sd[r];
                for v in &mut yd[r * cols..(r + 1) * cols] {
                    *v *= sv;
                }
            }
        }
        let rg = self.requires(x) || self.requires(s);
        self.push(y, Op::MulCol { x, s }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        self.push(y, Op::Scale { x, c }, rg)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.value(a).as_matrix();
        assert_eq!(self.value(b).as_matrix(), (rows, cols), "row_dot shapes");
        let mut y = Tensor::zeros(&[rows, 1]);
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let yd = y.data_mut();
            for r in 0..rows {
                let mut acc = T::zero();
                for c in 0..cols {
                    acc += ad[r * cols + c] * bd[r * cols + c];
                }
                yd[r] = acc;
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(y, Op::RowDot { a, b }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).as_matrix().0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).as_matrix();
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .sum();
        let mut y = Tensor::zeros(&[rows, total]);
        {
            let yd = y.data_mut();
            let mut off = 0;
            for &p in parts {
                let (_, c) = self.nodes[p.0].value.as_matrix();
                let pd = self.nodes[p.0].value.data();
                for r in 0..rows {
                    yd[r * total + off..r * total + off + c]
                        .copy_from_slice(&pd[r * c..(r + 1) * c]);
                }
                off += c;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            y,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.value(x).as_matrix();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut y = Tensor::zeros(&[rows, len]);
        {
            let xd = self.nodes[x.0].value.data();
            let yd = y.data_mut();
            for r in 0..rows {
                yd[r * len..(r + 1) * len]
                    .copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
            }
        }
        let rg = self.requires(x);
        self.push(y, Op::SliceCols { x, start }, rg)
    }

    /// Contiguous row range of a [rows, cols] tensor.
    pub fn slice_rows(&mut self, x: NodeId, start_row: usize, rows: usize) -> NodeId {
        let (total_rows, cols) = self.value(x).as_matrix();
        assert!(start_row + rows <= total_rows, "slice_rows out of range");
        let data =
            self.value(x).data()[start_row * cols..(start_row + rows) * cols].to_vec();
        let y = Tensor::new(vec![rows, cols], data).unwrap();
        let rg = self.requires(x);
        self.push(y, Op::SliceRows { x, start_row }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let y = self
            .value(x)
            .clone()
            .reshaped(shape.to_vec())
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.requires(x);
        self.push(y, Op::Reshape { x }, rg)
    }

    pub fn broadcast_rows(&mut self, x: NodeId, copies: usize) -> NodeId {
        let (rows, cols) = self.value(x).as_matrix();
        assert_eq!(rows, 1, "broadcast_rows expects a single row");
        let mut y = Tensor::zeros(&[copies, cols]);
        {
            let xd = self.nodes[x.0].value.data();
            let yd = y.data_mut();
            for r in 0..copies {
                yd[r * cols..(r + 1) * cols].copy_from_slice(xd);
            }
        }
        let rg = self.requires(x);
        self.push(y, Op::BroadcastRows { x }, rg)
    }

    /// LSTM step; returns (h', c').
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
    ) -> (NodeId, NodeId) {
        let ((h_new, c_new), saved) = lstm_cell_with_saved(
            self.value(x),
            self.value(h),
            self.value(c),
            self.value(w_ih),
            self.value(w_hh),
            self.value(bias),
        )
        .unwrap_or_else(|e| panic!("lstm_cell: {e}"));
        let (bsz, hidden) = h_new.as_matrix();
        let mut packed = Tensor::zeros(&[bsz, 2 * hidden]);
        {
            let pd = packed.data_mut();
            let hd = h_new.data();
            let cd = c_new.data();
            for r in 0..bsz {
                pd[r * 2 * hidden..r * 2 * hidden + hidden]
                    .copy_from_slice(&hd[r * hidden..(r + 1) * hidden]);
                pd[r * 2 * hidden + hidden..(r + 1) * 2 * hidden]
                    .copy_from_slice(&cd[r * hidden..(r + 1) * hidden]);
            }
        }
        let rg = self.requires(x)
            || self.requires(h)
            || self.requires(c)
            || self.requires(w_ih)
            || self.requires(w_hh)
            || self.requires(bias);
        let (gates, tanh_c) = if self.grad_enabled && rg {
            (saved.gates, saved.tanh_c)
        } else {
            (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
        };
        let packed_id = self.push(
            packed,
            Op::Lstm {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                gates,
                tanh_c,
            },
            rg,
        );
        let h_id = self.slice_cols(packed_id, 0, hidden);
        let c_id = self.slice_cols(packed_id, hidden, hidden);
        (h_id, c_id)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (out, cols, geom) = conv2d_with_cols(
            self.value(x),
            self.value(k),
            self.value(b),
            stride,
            pad,
        )
        .unwrap_or_else(|e| panic!("conv2d: {e}"));
        let rg = self.requires(x) || self.requires(k) || self.requires(b);
        let cols = if self.grad_enabled && rg {
            Some(cols)
        } else {
            None
        };
        self.push(out, Op::Conv { x, k, b, cols, geom }, rg)
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let out = ops::conv2d_transpose_impl(
            self.value(x),
            self.value(k),
            self.value(b),
            stride,
            pad,
        )
        .unwrap_or_else(|e| panic!("conv2d_transpose: {e}"));
        let c_out = self.value(k).shape()[1];
        let kh = self.value(k).shape()[2];
        let kw = self.value(k).shape()[3];
        let geom = ConvGeom {
            batch: out.shape()[0],
            channels: c_out,
            height: out.shape()[2],
            width: out.shape()[3],
            kh,
            kw,
            stride,
            pad,
            out_h: self.value(x).shape()[2],
            out_w: self.value(x).shape()[3],
        };
        let rg = self.requires(x) || self.requires(k) || self.requires(b);
        self.push(out, Op::ConvT { x, k, b, geom }, rg)
    }

    /// Batch normalization. Running stats are owned by the caller and updated
    /// in place during training-mode forward.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        training: bool,
        eps: T,
        momentum: T,
    ) -> NodeId {
        let (out, (xhat, inv_std), reduce) = batchnorm_with_saved(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            training,
            eps,
            momentum,
        )
        .unwrap_or_else(|e| panic!("batchnorm: {e}"));
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let (xhat, inv_std) = if self.grad_enabled && rg {
            (xhat, inv_std)
        } else {
            (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
        };
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                reduce,
                training,
            },
            rg,
        )
    }

    /// Mean cross-entropy of row logits against per-row target indices.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (rows, cols) = self.value(logits).as_matrix();
        assert_eq!(rows, targets.len(), "cross_entropy_mean target count");
        assert!(
            targets.iter().all(|&t| t < cols),
            "cross_entropy_mean target out of range"
        );
        let probs = ops::softmax(self.value(logits));
        let mut acc = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let p = probs.data()[r * cols + t];
            acc -= p.max(T::from_f64(1e-300)).ln();
        }
        let loss = acc / T::from_f64(rows as f64);
        let rg = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CeMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse_mean(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        assert_eq!(
            self.value(pred).shape(),
            self.value(target).shape(),
            "mse_mean shapes"
        );
        let loss = ops::mse_loss(self.value(pred), self.value(target)).unwrap();
        let rg = self.requires(pred) || self.requires(target);
        self.push(Tensor::scalar(loss), Op::MseMean { pred, target }, rg)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// leaf slots hold the accumulated gradients.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor<T>>> {
        assert!(
            self.grad_enabled,
            "backward called on an inference graph"
        );
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep leaf grads for collection
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
        }
        grads
    }

    /// Gradients of `loss` with respect to every trainable parameter of
    /// `store`. Parameters that never entered the graph (or sit off the
    /// computation path) get zero tensors.
    pub fn compute_gradients(
        &self,
        loss: NodeId,
        store: &ParamStore<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.backward(loss);
        let mut out = BTreeMap::new();
        for (path, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let g = self
                .params
                .get(path)
                .and_then(|id| grads[id.0].take())
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            if g.shape() != entry.value.shape() {
                return Err(NnError::ShapeMismatch {
                    context: "compute_gradients",
                    expected: entry.value.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            out.insert(path.clone(), g);
        }
        Ok(out)
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if self.requires(*x) {
                    let dx = matmul_nn(g, self.value(*w));
                    acc_shaped(&mut grads[x.0], dx, self.value(*x).shape());
                }
                if self.requires(*w) {
                    let dw = matmul_tn(g, self.value(*x));
                    acc(&mut grads[w.0], dw);
                }
                if self.requires(*b) {
                    acc(&mut grads[b.0], col_sum(g));
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let dx = node.value.zip_map(g, |y, gy| {
                        if y > T::zero() {
                            gy
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let dx = node
                        .value
                        .zip_map(g, |y, gy| gy * y * (T::one() - y));
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::Tanh { x } => {
                if self.requires(*x) {
                    let dx = node.value.zip_map(g, |y, gy| gy * (T::one() - y * y));
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::Softmax { x } => {
                if self.requires(*x) {
                    let (rows, cols) = node.value.as_matrix();
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    let y = node.value.data();
                    let gd = g.data();
                    let dd = dx.data_mut();
                    for r in 0..rows {
                        let mut s = T::zero();
                        for c in 0..cols {
                            s += y[r * cols + c] * gd[r * cols + c];
                        }
                        for c in 0..cols {
                            dd[r * cols + c] = y[r * cols + c] * (gd[r * cols + c] - s);
                        }
                    }
                    acc_shaped(&mut grads[x.0], dx, self.value(*x).shape());
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.requires(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.requires(*b) {
                    acc(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    acc(&mut grads[a.0], g.zip_map(self.value(*b), |gy, bv| gy * bv));
                }
                if self.requires(*b) {
                    acc(&mut grads[b.0], g.zip_map(self.value(*a), |gy, av| gy * av));
                }
            }
            Op::MulCol { x, s } => {
                let (rows, cols) = self.value(*x).as_matrix();
                if self.requires(*x) {
                    let mut dx = g.clone();
                    let sd = self.value(*s).data();
                    let dd = dx.data_mut();
                    for r in 0..rows {
                        let sv = sd[r];
                        for v in &mut dd[r * cols..(r + 1) * cols] {
                            *v *= sv;
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                if self.requires(*s) {
                    let mut ds = Tensor::zeros(&[rows, 1]);
                    let xd = self.value(*x).data();
                    let gd = g.data();
                    let dd = ds.data_mut();
                    for r in 0..rows {
                        let mut acc_v = T::zero();
                        for c in 0..cols {
                            acc_v += gd[r * cols + c] * xd[r * cols + c];
                        }
                        dd[r] = acc_v;
                    }
                    acc(&mut grads[s.0], ds);
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    acc(&mut grads[x.0], g.map(|v| v * *c));
                }
            }
            Op::RowDot { a, b } => {
                let (rows, cols) = self.value(*a).as_matrix();
                let gd = g.data();
                if self.requires(*a) {
                    let mut da = self.value(*b).clone();
                    let dd = da.data_mut();
                    for r in 0..rows {
                        let gv = gd[r];
                        for v in &mut dd[r * cols..(r + 1) * cols] {
                            *v *= gv;
                        }
                    }
                    acc(&mut grads[a.0], da);
                }
                if self.requires(*b) {
                    let mut db = self.value(*a).clone();
                    let dd = db.data_mut();
                    for r in 0..rows {
                        let gv = gd[r];
                        for v in &mut dd[r * cols..(r + 1) * cols] {
                            *v *= gv;
                        }
                    }
                    acc(&mut grads[b.0], db);
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = node.value.as_matrix();
                let gd = g.data();
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.value(p).as_matrix();
                    if self.requires(p) {
                        let mut dp = Tensor::zeros(&[rows, c]);
                        {
                            let dd = dp.data_mut();
                            for r in 0..rows {
                                dd[r * c..(r + 1) * c].copy_from_slice(
                                    &gd[r * total + off..r * total + off + c],
                                );
                            }
                        }
                        let shape = self.value(p).shape().to_vec();
                        acc_shaped(&mut grads[p.0], dp, &shape);
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires(*x) {
                    let (rows, cols) = self.value(*x).as_matrix();
                    let (_, len) = node.value.as_matrix();
                    let slot = &mut grads[x.0];
                    if slot.is_none() {
                        *slot = Some(Tensor::zeros(self.value(*x).shape()));
                    }
                    let dd = slot.as_mut().unwrap().data_mut();
                    let gd = g.data();
                    for r in 0..rows {
                        for c in 0..len {
                            dd[r * cols + start + c] += gd[r * len + c];
                        }
                    }
                }
            }
            Op::SliceRows { x, start_row } => {
                if self.requires(*x) {
                    let (_, cols) = self.value(*x).as_matrix();
                    let (rows, _) = node.value.as_matrix();
                    let slot = &mut grads[x.0];
                    if slot.is_none() {
                        *slot = Some(Tensor::zeros(self.value(*x).shape()));
                    }
                    let dd = slot.as_mut().unwrap().data_mut();
                    let gd = g.data();
                    let base = start_row * cols;
                    for i in 0..rows * cols {
                        dd[base + i] += gd[i];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    let dx = g
                        .clone()
                        .reshaped(self.value(*x).shape().to_vec())
                        .unwrap();
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::BroadcastRows { x } => {
                if self.requires(*x) {
                    let summed = col_sum(g);
                    acc_shaped(&mut grads[x.0], summed, self.value(*x).shape());
                }
            }
            Op::Lstm {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                gates,
                tanh_c,
            } => {
                let (bsz, hidden2) = node.value.as_matrix();
                let hidden = hidden2 / 2;
                let gd = gates.data();
                let tc = tanh_c.data();
                let cd = self.value(*c).data();
                let gg = g.data();
                let mut dpre = Tensor::zeros(&[bsz, 4 * hidden]);
                let mut dc_in = Tensor::zeros(&[bsz, hidden]);
                {
                    let dp = dpre.data_mut();
                    let dci = dc_in.data_mut();
                    for r in 0..bsz {
                        for j in 0..hidden {
                            let dh = gg[r * hidden2 + j];
                            let dc_out = gg[r * hidden2 + hidden + j];
                            let i = gd[r * 4 * hidden + j];
                            let f = gd[r * 4 * hidden + hidden + j];
                            let gc = gd[r * 4 * hidden + 2 * hidden + j];
                            let o = gd[r * 4 * hidden + 3 * hidden + j];
                            let t = tc[r * hidden + j];
                            let do_ = dh * t;
                            let dct = dc_out + dh * o * (T::one() - t * t);
                            let di = dct * gc;
                            let df = dct * cd[r * hidden + j];
                            let dg = dct * i;
                            dci[r * hidden + j] = dct * f;
                            dp[r * 4 * hidden + j] = di * i * (T::one() - i);
                            dp[r * 4 * hidden + hidden + j] = df * f * (T::one() - f);
                            dp[r * 4 * hidden + 2 * hidden + j] = dg * (T::one() - gc * gc);
                            dp[r * 4 * hidden + 3 * hidden + j] = do_ * o * (T::one() - o);
                        }
                    }
                }
                if self.requires(*x) {
                    let dx = matmul_nn(&dpre, self.value(*w_ih));
                    acc_shaped(&mut grads[x.0], dx, self.value(*x).shape());
                }
                if self.requires(*h) {
                    let dh = matmul_nn(&dpre, self.value(*w_hh));
                    acc(&mut grads[h.0], dh);
                }
                if self.requires(*c) {
                    acc(&mut grads[c.0], dc_in);
                }
                if self.requires(*w_ih) {
                    acc(&mut grads[w_ih.0], matmul_tn(&dpre, self.value(*x)));
                }
                if self.requires(*w_hh) {
                    acc(&mut grads[w_hh.0], matmul_tn(&dpre, self.value(*h)));
                }
                if self.requires(*bias) {
                    acc_shaped(&mut grads[bias.0], col_sum(&dpre), self.value(*bias).shape());
                }
            }
            Op::Conv { x, k, b, cols, geom } => {
                let cols = cols.as_ref().expect("conv cols not saved");
                let c_out = self.value(*k).shape()[0];
                let spatial = geom.out_h * geom.out_w;
                // dy as rows (b, oh, ow) x cols (c_out)
                let mut dy_flat = Tensor::zeros(&[geom.batch * spatial, c_out]);
                {
                    let gd = g.data();
                    let dd = dy_flat.data_mut();
                    for bi in 0..geom.batch {
                        for ci in 0..c_out {
                            for s in 0..spatial {
                                dd[(bi * spatial + s) * c_out + ci] =
                                    gd[(bi * c_out + ci) * spatial + s];
                            }
                        }
                    }
                }
                if self.requires(*k) {
                    let dk = matmul_tn(&dy_flat, cols);
                    acc_shaped(&mut grads[k.0], dk, self.value(*k).shape());
                }
                if self.requires(*b) {
                    acc_shaped(&mut grads[b.0], col_sum(&dy_flat), self.value(*b).shape());
                }
                if self.requires(*x) {
                    let kshape = self.value(*k).shape().to_vec();
                    let kmat = self
                        .value(*k)
                        .clone()
                        .reshaped(vec![kshape[0], kshape[1] * kshape[2] * kshape[3]])
                        .unwrap();
                    let dcols = matmul_nn(&dy_flat, &kmat);
                    let dx = ops::col2im(&dcols, geom);
                    acc_shaped(&mut grads[x.0], dx, self.value(*x).shape());
                }
            }
            Op::ConvT { x, k, b, geom } => {
                // geom describes the (big) output side.
                let kshape = self.value(*k).shape().to_vec();
                let (c_in, c_out, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let cols_d = im2col(g, geom); // [b·h·w (small), c_out·kh·kw]
                if self.requires(*b) {
                    // per output channel sum over batch and space
                    let mut db = Tensor::zeros(&[c_out]);
                    {
                        let gd = g.data();
                        let dd = db.data_mut();
                        let plane = geom.height * geom.width;
                        for bi in 0..geom.batch {
                            for ci in 0..c_out {
                                let base = (bi * c_out + ci) * plane;
                                let mut s = T::zero();
                                for p in 0..plane {
                                    s += gd[base + p];
                                }
                                dd[ci] += s;
                            }
                        }
                    }
                    acc_shaped(&mut grads[b.0], db, self.value(*b).shape());
                }
                if self.requires(*x) {
                    let kmat = self
                        .value(*k)
                        .clone()
                        .reshaped(vec![c_in, c_out * kh * kw])
                        .unwrap();
                    let dx_mat = matmul_nt(&cols_d, &kmat); // [b·hw, c_in]
                    // scatter rows (b,h,w) x cols (c_in) back to [b, c_in, h, w]
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = Tensor::zeros(&xs);
                    {
                        let md = dx_mat.data();
                        let dd = dx.data_mut();
                        let spatial = h * w;
                        for bi in 0..xs[0] {
                            for s in 0..spatial {
                                for ci in 0..c_in {
                                    dd[(bi * c_in + ci) * spatial + s] =
                                        md[(bi * spatial + s) * c_in + ci];
                                }
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                if self.requires(*k) {
                    // x as rows (b,h,w) x cols (c_in)
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut xmat = Tensor::zeros(&[xs[0] * h * w, c_in]);
                    {
                        let xd = self.value(*x).data();
                        let md = xmat.data_mut();
                        let spatial = h * w;
                        for bi in 0..xs[0] {
                            for s in 0..spatial {
                                for ci in 0..c_in {
                                    md[(bi * spatial + s) * c_in + ci] =
                                        xd[(bi * c_in + ci) * spatial + s];
                                }
                            }
                        }
                    }
                    let dk = matmul_tn(&xmat, &cols_d); // [c_in, c_out·kh·kw]
                    acc_shaped(&mut grads[k.0], dk, &kshape);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                reduce,
                training,
            } => {
                let (features, _) = ops::bn_layout(self.value(*x)).unwrap();
                let mut dgamma = vec![T::zero(); features];
                let mut dbeta = vec![T::zero(); features];
                {
                    let xh = xhat.data();
                    let gd = g.data();
                    bn_index_fold(self.value(*x), features, |i, f| {
                        dgamma[f] += gd[i] * xh[i];
                        dbeta[f] += gd[i];
                    });
                }
                if self.requires(*gamma) {
                    acc_shaped(
                        &mut grads[gamma.0],
                        Tensor::from_vec(dgamma.clone()),
                        self.value(*gamma).shape(),
                    );
                }
                if self.requires(*beta) {
                    acc_shaped(
                        &mut grads[beta.0],
                        Tensor::from_vec(dbeta.clone()),
                        self.value(*beta).shape(),
                    );
                }
                if self.requires(*x) {
                    let gm = self.value(*gamma).data();
                    let is = inv_std.data();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let nr = T::from_f64(*reduce as f64);
                    {
                        let xh = xhat.data();
                        let gd = g.data();
                        let dd = dx.data_mut();
                        if *training {
                            bn_index_fold(self.value(*x), features, |i, f| {
                                dd[i] = gm[f] * is[f] / nr
                                    * (nr * gd[i] - dbeta[f] - xh[i] * dgamma[f]);
                            });
                        } else {
                            bn_index_fold(self.value(*x), features, |i, f| {
                                dd[i] = gd[i] * gm[f] * is[f];
                            });
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::CeMean {
                logits,
                targets,
                probs,
            } => {
                if self.requires(*logits) {
                    let (rows, cols) = probs.as_matrix();
                    let scale = g.data()[0] / T::from_f64(rows as f64);
                    let mut dl = probs.clone();
                    {
                        let dd = dl.data_mut();
                        for (r, &t) in targets.iter().enumerate() {
                            dd[r * cols + t] -= T::one();
                        }
                        for v in dd.iter_mut() {
                            *v *= scale;
                        }
                    }
                    acc_shaped(&mut grads[logits.0], dl, self.value(*logits).shape());
                }
            }
            Op::MseMean { pred, target } => {
                let n = T::from_f64(self.value(*pred).numel() as f64);
                let scale = g.data()[0] * T::from_f64(2.0) / n;
                if self.requires(*pred) {
                    let dp = self
                        .value(*pred)
                        .zip_map(self.value(*target), |p, t| (p - t) * scale);
                    acc(&mut grads[pred.0], dp);
                }
                if self.requires(*target) {
                    let dt = self
                        .value(*pred)
                        .zip_map(self.value(*target), |p, t| (t - p) * scale);
                    acc(&mut grads[target.0], dt);
                }
            }
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Element>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        None => *slot = Some(add),
        Some(t) => t.add_assign(&add),
    }
}

/// Accumulate, coercing `add` to the parent's exact shape (1-D bias vs
/// [1, n] row and similar rank differences).
fn acc_shaped<T: Element>(slot: &mut Option<Tensor<T>>, add: Tensor<T>, shape: &[usize]) {
    let add = if add.shape() != shape {
        add.reshaped(shape.to_vec()).expect("gradient shape coercion")
    } else {
        add
    };
    acc(slot, add);
}

/// Column sums of a matrix -> [cols].
fn col_sum<T: Element>(m: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = m.as_matrix();
    let mut out = Tensor::zeros(&[cols]);
    let md = m.data();
    let od = out.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            od[c] += md[r * cols + c];
        }
    }
    out
}

/// Visit each element index of `x` with its feature index (batchnorm layout).
fn bn_index_fold<T: Element>(x: &Tensor<T>, features: usize, mut f: impl FnMut(usize, usize)) {
    match x.rank() {
        2 => {
            let cols = x.shape()[1];
            debug_assert_eq!(cols, features);
            for i in 0..x.numel() {
                f(i, i % cols);
            }
        }
        4 => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let plane = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for s in 0..plane {
                        f(base + s, ci);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_linear_hand_gradient() {
        // loss = mse(W·x, 0) with x=[1], W=[2] -> dW = 2*(Wx)*x / 1 = 4
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 1], vec![2.0f64]).unwrap(), true);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let w = g.param(&store, "w");
        let b = g.zeros(&[1]);
        let y = g.linear(x, w, b);
        let target = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let loss = g.mse_mean(y, target);
        let grads = g.compute_gradients(loss, &store).unwrap();
        assert!((grads["w"].data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![1.0f64; 4]).unwrap(), true);
        let mut g = Graph::new();
        // loss never touches w
        let a = g.var(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let loss = g.mse_mean(a, a);
        let grads = g.compute_gradients(loss, &store).unwrap();
        assert!(grads["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // y = w*x + w*x (same node twice) -> dw = 2x
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 1], vec![3.0f64]).unwrap(), true);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
        let w = g.param(&store, "w");
        let w2 = g.param(&store, "w");
        assert_eq!(w, w2);
        let zb = g.zeros(&[1]);
        let y1 = g.linear(x, w, zb);
        let y2 = g.linear(x, w, zb);
        let y = g.add(y1, y2);
        let t = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let loss = g.mse_mean(y, t);
        // loss = (2wx)^2, dloss/dw = 2*(2wx)*2x = 8wx^2 = 8*3*25 = 600
        let grads = g.compute_gradients(loss, &store).unwrap();
        assert!((grads["w"].data()[0] - 600.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 1], vec![2.0f64]).unwrap(), false);
        let mut g = Graph::new();
        let x = g.var(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let w = g.param(&store, "w");
        let zb = g.zeros(&[1]);
        let y = g.linear(x, w, zb);
        let t = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let loss = g.mse_mean(y, t);
        let grads = g.compute_gradients(loss, &store).unwrap();
        assert!(grads.is_empty());
        // gradient still flows THROUGH the frozen layer to the input:
        // loss = (wx)^2 -> dx = 2*(wx)*w = 8
        let all = g.backward(loss);
        let dx = all[x.0].as_ref().expect("input gradient missing");
        assert!((dx.data()[0] - 8.0).abs() < 1e-12);
    }
}
