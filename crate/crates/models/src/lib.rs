//! The four networks: vector and image autoencoders, the key-value memory
//! model, a simplified NTM, and the LSTM baseline.
//!
//! Sequence models operate on embeddings and expose a sequence-level forward
//! pass on a [`esbn_nn::Graph`]; the autoencoders convert between stimulus
//! space and embedding space. Composition (encode -> sequence -> decode) is
//! the caller's job since pretrained pipelines cache embeddings.

mod autoencoder;
mod common;
mod esbn;
mod lstm;
mod ntm;

pub use autoencoder::{ImageAutoencoder, VecAutoencoder, BN_EPS, BN_MOMENTUM};
pub use common::{
    attention_readout, content_weights, weighted_row_sum, LinearHead, LstmController, Mode,
    SeqOutput,
};
pub use esbn::{Esbn, EsbnStepTrace, EsbnTrace};
pub use lstm::Lstm;
pub use ntm::Ntm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {got} invalid for {mode:?} mode (expected {expected})")]
    BadSequenceLength {
        mode: Mode,
        expected: usize,
        got: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("{0}")]
    Nn(#[from] esbn_nn::NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
