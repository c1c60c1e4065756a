//! Simplified NTM: a fixed 10-row memory with content-based addressing by
//! plain dot product (no key strength, no sharpening, no location-based
//! addressing), one read head and one write head, and a learned initial
//! memory that is reset at the start of every sequence.

use crate::common::{attention_readout, content_weights, LinearHead, LstmController, Mode, SeqOutput};
use crate::{ModelError, Result};
use esbn_nn::tape::{Graph, NodeId};
use esbn_nn::{Activation, Element, InitScheme, ParamStore};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Ntm {
    pub embed: usize,
    pub key: usize,
    pub hidden: usize,
    pub mem_rows: usize,
}

impl Ntm {
    pub fn paper(embed: usize) -> Self {
        Self {
            embed,
            key: 256,
            hidden: 512,
            mem_rows: 10,
        }
    }

    fn controller(&self) -> LstmController {
        LstmController::new("seq.ctrl", self.embed + self.key, self.hidden)
    }

    fn head(&self, name: &str) -> LinearHead {
        LinearHead::new(format!("seq.head.{name}"), self.key, self.hidden, Activation::Relu)
    }

    fn gen_head(&self) -> LinearHead {
        LinearHead::new(
            "seq.out_gen",
            self.embed,
            self.hidden + self.key,
            Activation::Identity,
        )
    }

    fn mc_head(&self) -> LinearHead {
        LinearHead::new(
            "seq.out_mc",
            4,
            self.hidden + self.key,
            Activation::Softmax,
        )
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let mem0 = esbn_nn::init_with_scheme(
            &[self.mem_rows, self.key],
            InitScheme::XavierNormal { gain: 1.0 },
            rng,
        )
        .unwrap();
        store.insert("seq.mem0", mem0, true);
        self.controller().init_params(store, rng);
        for name in ["add", "erase", "wkey", "rkey"] {
            self.head(name).init_params(store, rng);
        }
        self.gen_head().init_params(store, rng);
        self.mc_head().init_params(store, rng);
    }

    /// Content-based read: weights = softmax(memory . key), r = weighted row
    /// sum. Exposed for the addressing contracts.
    pub fn read<T: Element>(
        &self,
        g: &mut Graph<T>,
        memory: &[NodeId],
        read_key: NodeId,
    ) -> (NodeId, NodeId) {
        attention_readout(g, memory, memory, read_key)
    }

    /// Erase-then-add write: M'(i) = M(i) o (1 - w(i) e) + w(i) a.
    /// `weights` is the [batch, rows] result of content addressing.
    pub fn write<T: Element>(
        &self,
        g: &mut Graph<T>,
        memory: &mut [NodeId],
        weights: NodeId,
        erase: NodeId,
        add: NodeId,
    ) {
        for (i, row) in memory.iter_mut().enumerate() {
            let wi = g.slice_cols(weights, i, 1);
            let erase_i = g.mul_col(erase, wi);
            let erased = g.mul(*row, erase_i);
            let kept = g.sub(*row, erased);
            let add_i = g.mul_col(add, wi);
            *row = g.add(kept, add_i);
        }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zs: &[NodeId],
        mode: Mode,
    ) -> Result<SeqOutput> {
        let expected = mode.sequence_len();
        if zs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if zs.len() != expected {
            return Err(ModelError::BadSequenceLength {
                mode,
                expected,
                got: zs.len(),
            });
        }
        let batch = g.value(zs[0]).shape()[0];
        let ctrl = self.controller();

        // Memory starts from the learned initialization on every sequence.
        let mem0 = g.param(store, "seq.mem0");
        let mut memory: Vec<NodeId> = (0..self.mem_rows)
            .map(|i| {
                let row = g.slice_rows(mem0, i, 1);
                g.broadcast_rows(row, batch)
            })
            .collect();

        let mut h = g.zeros(&[batch, self.hidden]);
        let mut c = g.zeros(&[batch, self.hidden]);
        let mut r = g.zeros(&[batch, self.key]);

        for &z in zs {
            let x = g.concat_cols(&[z, r]);
            let (h_new, c_new) = ctrl.step(g, store, x, h, c);
            h = h_new;
            c = c_new;

            let add = self.head("add").forward(g, store, h);
            let erase_relu = self.head("erase").forward(g, store, h);
            let erase = g.sigmoid(erase_relu);
            let wkey = self.head("wkey").forward(g, store, h);
            let rkey = self.head("rkey").forward(g, store, h);

            // read with the read key, then write with the write key
            let (_rw, r_new) = self.read(g, &memory, rkey);
            r = r_new;
            let ww = content_weights(g, &memory, wkey);
            self.write(g, &mut memory, ww, erase, add);
        }

        let out_in = g.concat_cols(&[h, r]);
        Ok(match mode {
            Mode::Generative => SeqOutput {
                y_logits: None,
                z_pred: Some(self.gen_head().linear(g, store, out_in)),
            },
            Mode::Mc => SeqOutput {
                y_logits: Some(self.mc_head().linear(g, store, out_in)),
                z_pred: None,
            },
        })
    }
}
