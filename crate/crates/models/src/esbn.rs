//! Sequence model with a growing external key-value memory.
//!
//! Per input step the LSTM controller (fed only by the previous read key)
//! emits two sigmoid gates, a ReLU write key and a ReLU query key. The
//! encoded input is matched against stored values to retrieve a gated read
//! key; the query key is matched against stored keys to retrieve a gated
//! value prediction. The (write key, input embedding) pair is then appended
//! to memory. One extra step runs after the input sequence with no encoding
//! and no write; the final prediction comes from that step.

use crate::common::{attention_readout, LinearHead, LstmController, Mode, SeqOutput};
use crate::{ModelError, Result};
use esbn_nn::tape::{Graph, NodeId};
use esbn_nn::{Activation, Element, ParamStore, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Esbn {
    pub embed: usize,
    pub key: usize,
    pub hidden: usize,
}

/// Node handles recorded per step so tests can inspect gates, attention
/// weights and memory growth.
#[derive(Clone, Debug)]
pub struct EsbnStepTrace {
    pub g_k: NodeId,
    pub g_v: NodeId,
    /// softmax(M_v . z_t); None at t = 1 and on the extra step.
    pub w_k: Option<NodeId>,
    /// softmax(M_k . k_q); None when value retrieval is skipped.
    pub w_v: Option<NodeId>,
    pub k_r: Option<NodeId>,
    pub z_hat: Option<NodeId>,
    pub mem_rows_after: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EsbnTrace {
    pub steps: Vec<EsbnStepTrace>,
}

impl Esbn {
    pub fn paper(embed: usize) -> Self {
        Self {
            embed,
            key: 256,
            hidden: 512,
        }
    }

    fn controller(&self) -> LstmController {
        LstmController::new("seq.ctrl", self.key, self.hidden)
    }

    fn gates_head(&self) -> LinearHead {
        LinearHead::new("seq.gates", 2, self.hidden, Activation::Sigmoid)
    }

    fn write_key_head(&self) -> LinearHead {
        LinearHead::new("seq.key_w", self.key, self.hidden, Activation::Relu)
    }

    fn query_key_head(&self) -> LinearHead {
        LinearHead::new("seq.key_q", self.key, self.hidden, Activation::Relu)
    }

    fn mc_head(&self) -> LinearHead {
        LinearHead::new("seq.mc", 4, self.hidden, Activation::Softmax)
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.controller().init_params(store, rng);
        self.gates_head().init_params(store, rng);
        self.write_key_head().init_params(store, rng);
        self.query_key_head().init_params(store, rng);
        self.mc_head().init_params(store, rng);
    }

    /// Run the sequence plus the extra step. `zs` are embedding nodes of
    /// shape [batch, embed]. With `trace` set, per-step value retrieval is
    /// materialized even where the final output does not need it.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zs: &[NodeId],
        mode: Mode,
        trace: bool,
    ) -> Result<(SeqOutput, EsbnTrace)> {
        let expected = mode.sequence_len();
        if zs.len() != expected {
            return Err(ModelError::BadSequenceLength {
                mode,
                expected,
                got: zs.len(),
            });
        }
        let batch = g.value(zs[0]).shape()[0];
        let ctrl = self.controller();

        let mut h = g.zeros(&[batch, self.hidden]);
        let mut c = g.zeros(&[batch, self.hidden]);
        let mut k_r = g.zeros(&[batch, self.key]);
        let mut mem_k: Vec<NodeId> = Vec::new();
        let mut mem_v: Vec<NodeId> = Vec::new();
        let mut out = SeqOutput {
            y_logits: None,
            z_pred: None,
        };
        let mut steps = Vec::new();

        let total = expected + 1;
        for t in 1..=total {
            let is_extra = t == total;
            let (h_new, c_new) = ctrl.step(g, store, k_r, h, c);
            h = h_new;
            c = c_new;

            let gates_pre = self.gates_head().linear(g, store, h);
            let gates = g.sigmoid(gates_pre);
            let g_k = g.slice_cols(gates, 0, 1);
            let g_v = g.slice_cols(gates, 1, 1);
            let k_q = self.query_key_head().forward(g, store, h);

            let mut step_trace = EsbnStepTrace {
                g_k,
                g_v,
                w_k: None,
                w_v: None,
                k_r: None,
                z_hat: None,
                mem_rows_after: mem_k.len(),
            };

            if !is_extra {
                let z = zs[t - 1];
                if t == 1 {
                    k_r = g.zeros(&[batch, self.key]);
                    if trace {
                        step_trace.z_hat = Some(g.zeros(&[batch, self.embed]));
                    }
                } else {
                    let (w_k, key_sum) = attention_readout(g, &mem_v, &mem_k, z);
                    k_r = g.mul_col(key_sum, g_k);
                    step_trace.w_k = Some(w_k);
                    if trace {
                        let (w_v, val_sum) = attention_readout(g, &mem_k, &mem_v, k_q);
                        let z_hat = g.mul_col(val_sum, g_v);
                        step_trace.w_v = Some(w_v);
                        step_trace.z_hat = Some(z_hat);
                    }
                }
                let k_w = self.write_key_head().forward(g, store, h);
                mem_k.push(k_w);
                mem_v.push(z);
            } else {
                // Extra step: no encoding, no read-key retrieval, no write.
                // Value retrieval with the fresh query key yields the
                // generative prediction; the task head yields MC logits.
                match mode {
                    Mode::Generative => {
                        let (w_v, val_sum) = attention_readout(g, &mem_k, &mem_v, k_q);
                        let z_hat = g.mul_col(val_sum, g_v);
                        out.z_pred = Some(z_hat);
                        step_trace.w_v = Some(w_v);
                        step_trace.z_hat = Some(z_hat);
                    }
                    Mode::Mc => {
                        out.y_logits = Some(self.mc_head().linear(g, store, h));
                        if trace {
                            let (w_v, val_sum) = attention_readout(g, &mem_k, &mem_v, k_q);
                            let z_hat = g.mul_col(val_sum, g_v);
                            step_trace.w_v = Some(w_v);
                            step_trace.z_hat = Some(z_hat);
                        }
                    }
                }
            }
            step_trace.k_r = Some(k_r);
            step_trace.mem_rows_after = mem_k.len();
            debug_assert_eq!(mem_k.len(), mem_v.len());
            steps.push(step_trace);
        }
        Ok((out, EsbnTrace { steps }))
    }

    /// Value retrieval at a fixed memory state (softmax over key dots, gated
    /// weighted sum of values); exposed for the permutation-invariance
    /// contract.
    pub fn retrieve<T: Element>(
        &self,
        g: &mut Graph<T>,
        mem_k: &[NodeId],
        mem_v: &[NodeId],
        query: NodeId,
        gate: NodeId,
    ) -> (NodeId, NodeId) {
        let (w, sum) = attention_readout(g, mem_k, mem_v, query);
        (w, g.mul_col(sum, gate))
    }

    /// Frozen per-sequence state sizes, mirroring the memory contract.
    pub fn state_dims(&self) -> (usize, usize, usize) {
        (self.key, self.embed, self.hidden)
    }

    /// Convenience for tests: zero-state one-step controller output values.
    pub fn initial_read_key<T: Element>(&self, batch: usize) -> Tensor<T> {
        Tensor::zeros(&[batch, self.key])
    }
}
