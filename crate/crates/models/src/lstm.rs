//! Plain LSTM baseline over the embedding sequence.

use crate::common::{LinearHead, LstmController, Mode, SeqOutput};
use crate::{ModelError, Result};
use esbn_nn::tape::{Graph, NodeId};
use esbn_nn::{Activation, Element, ParamStore};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Lstm {
    pub embed: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn paper(embed: usize) -> Self {
        Self { embed, hidden: 512 }
    }

    fn controller(&self) -> LstmController {
        LstmController::new("seq.ctrl", self.embed, self.hidden)
    }

    fn gen_head(&self) -> LinearHead {
        LinearHead::new("seq.out_gen", self.embed, self.hidden, Activation::Identity)
    }

    fn mc_head(&self) -> LinearHead {
        LinearHead::new("seq.out_mc", 4, self.hidden, Activation::Softmax)
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.controller().init_params(store, rng);
        self.gen_head().init_params(store, rng);
        self.mc_head().init_params(store, rng);
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zs: &[NodeId],
        mode: Mode,
    ) -> Result<SeqOutput> {
        if zs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
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
        for &z in zs {
            let (h_new, c_new) = ctrl.step(g, store, z, h, c);
            h = h_new;
            c = c_new;
        }
        Ok(match mode {
            Mode::Generative => SeqOutput {
                y_logits: None,
                z_pred: Some(self.gen_head().linear(g, store, h)),
            },
            Mode::Mc => SeqOutput {
                y_logits: Some(self.mc_head().linear(g, store, h)),
                z_pred: None,
            },
        })
    }
}
