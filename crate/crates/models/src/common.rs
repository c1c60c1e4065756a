//! Shared building blocks: LSTM controllers with per-gate-block
//! initialization, linear heads, and the output container.

use esbn_nn::init::init_with_scheme;
use esbn_nn::tape::{Graph, NodeId};
use esbn_nn::{Activation, Element, InitScheme, ParamStore, Tensor};
use rand::Rng;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Generative,
    Mc,
}

impl Mode {
    /// Input sequence length presented to a model in this mode.
    pub fn sequence_len(&self) -> usize {
        match self {
            Mode::Generative => 5,
            Mode::Mc => 9,
        }
    }
}

/// What a sequence-level forward pass produces; exactly the field the task
/// mode demands is populated. `z_pred` lives in embedding space and is
/// decoded by the autoencoder for a stimulus-space prediction.
#[derive(Copy, Clone, Debug)]
pub struct SeqOutput {
    pub y_logits: Option<NodeId>,
    pub z_pred: Option<NodeId>,
}

/// One-layer LSTM with named weights under a path prefix.
///
/// The candidate (tanh) block of each weight matrix is initialized
/// separately from the three sigmoid gate blocks: Xavier gain 5/3 for the
/// candidate, gain 1 for the gates, applied per block. The forget-gate bias
/// starts at 1, all other biases at 0.
#[derive(Clone, Debug)]
pub struct LstmController {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmController {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    fn path(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w_ih = self.init_gate_blocks(self.input, rng);
        let w_hh = self.init_gate_blocks(self.hidden, rng);
        store.insert(self.path("w_ih"), w_ih, true);
        store.insert(self.path("w_hh"), w_hh, true);
        let mut bias = vec![T::zero(); 4 * self.hidden];
        for v in bias[self.hidden..2 * self.hidden].iter_mut() {
            *v = T::one(); // forget gate
        }
        store.insert(self.path("bias"), Tensor::from_vec(bias), true);
    }

    /// [4H, in] assembled from per-block draws in (i, f, g, o) order.
    fn init_gate_blocks<T: Element, R: Rng>(&self, input: usize, rng: &mut R) -> Tensor<T> {
        let h = self.hidden;
        let mut data = Vec::with_capacity(4 * h * input);
        for block in 0..4 {
            let scheme = if block == 2 {
                InitScheme::for_activation(Activation::Tanh)
            } else {
                InitScheme::for_activation(Activation::Sigmoid)
            };
            let t: Tensor<T> = init_with_scheme(&[h, input], scheme, rng).unwrap();
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![4 * h, input], data).unwrap()
    }

    pub fn step<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let w_ih = g.param(store, &self.path("w_ih"));
        let w_hh = g.param(store, &self.path("w_hh"));
        let bias = g.param(store, &self.path("bias"));
        g.lstm_cell(x, h, c, w_ih, w_hh, bias)
    }
}

/// Fully connected head with activation-matched initialization.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub prefix: String,
    pub out: usize,
    pub input: usize,
    pub activation: Activation,
}

impl LinearHead {
    pub fn new(prefix: impl Into<String>, out: usize, input: usize, activation: Activation) -> Self {
        Self {
            prefix: prefix.into(),
            out,
            input,
            activation,
        }
    }

    fn w_path(&self) -> String {
        format!("{}.w", self.prefix)
    }
    fn b_path(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w: Tensor<T> =
            esbn_nn::init_parameters(&[self.out, self.input], self.activation, rng).unwrap();
        store.insert(self.w_path(), w, true);
        store.insert(self.b_path(), Tensor::zeros(&[self.out]), true);
    }

    /// Pre-activation output.
    pub fn linear<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = g.param(store, &self.w_path());
        let b = g.param(store, &self.b_path());
        g.linear(x, w, b)
    }

    /// Output with this head's activation applied.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let y = self.linear(g, store, x);
        match self.activation {
            Activation::Identity => y,
            Activation::Relu => g.relu(y),
            Activation::Sigmoid => g.sigmoid(y),
            Activation::Tanh => g.tanh(y),
            Activation::Softmax => g.softmax(y),
        }
    }
}

/// Content addressing: softmax over dot products of `query` with each row.
pub fn content_weights<T: Element>(g: &mut Graph<T>, rows: &[NodeId], query: NodeId) -> NodeId {
    assert!(!rows.is_empty());
    let dots: Vec<NodeId> = rows.iter().map(|&k| g.row_dot(k, query)).collect();
    let cat = g.concat_cols(&dots);
    g.softmax(cat)
}

/// Weighted sum of rows under a [batch, rows] weighting.
pub fn weighted_row_sum<T: Element>(g: &mut Graph<T>, values: &[NodeId], weights: NodeId) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (i, &v) in values.iter().enumerate() {
        let wi = g.slice_cols(weights, i, 1);
        let term = g.mul_col(v, wi);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("weighted_row_sum over empty rows")
}

/// Row-wise attention over a list of memory rows: softmax of dot products
/// with `query`, then a weighted sum of `values`. Returns (weights, readout).
pub fn attention_readout<T: Element>(
    g: &mut Graph<T>,
    keys: &[NodeId],
    values: &[NodeId],
    query: NodeId,
) -> (NodeId, NodeId) {
    assert_eq!(keys.len(), values.len());
    let weights = content_weights(g, keys, query);
    let readout = weighted_row_sum(g, values, weights);
    (weights, readout)
}
