//! Stimulus-space autoencoders.
//!
//! The vector autoencoder embeds N-dimensional one-hots into 10 dimensions
//! (FC ReLU) and decodes with an FC softmax over N units. The image
//! autoencoder compresses 32x32 maps through three stride-2 convolutions
//! (32 kernels, 4x4) into a 128-dimensional embedding and decodes through
//! the mirrored transposed convolutions, sigmoid at the output. Batch
//! normalization, when enabled, sits before each nonlinearity except the
//! final sigmoid layer.

use crate::common::LinearHead;
use esbn_nn::tape::{Graph, NodeId};
use esbn_nn::{Activation, Element, ParamStore, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct VecAutoencoder {
    pub n: usize,
    pub embed: usize,
}

impl VecAutoencoder {
    pub fn paper(n: usize) -> Self {
        Self { n, embed: 10 }
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        LinearHead::new("ae.enc", self.embed, self.n, Activation::Relu).init_params(store, rng);
        LinearHead::new("ae.dec", self.n, self.embed, Activation::Softmax).init_params(store, rng);
    }

    pub fn encode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        LinearHead::new("ae.enc", self.embed, self.n, Activation::Relu).forward(g, store, x)
    }

    /// Pre-softmax decoder output (what cross-entropy consumes).
    pub fn decode_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
    ) -> NodeId {
        LinearHead::new("ae.dec", self.n, self.embed, Activation::Softmax).linear(g, store, z)
    }

    /// Probability vector over the N fillers.
    pub fn decode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: NodeId) -> NodeId {
        let logits = self.decode_logits(g, store, z);
        g.softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub struct ImageAutoencoder {
    pub embed: usize,
    pub batchnorm: bool,
}

impl ImageAutoencoder {
    pub fn paper(batchnorm: bool) -> Self {
        Self {
            embed: 128,
            batchnorm,
        }
    }

    fn conv_layers(&self) -> [(&'static str, usize, usize); 3] {
        // (path, c_in, c_out)
        [
            ("ae.enc.conv1", 1, 32),
            ("ae.enc.conv2", 32, 32),
            ("ae.enc.conv3", 32, 32),
        ]
    }

    pub fn init_params<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (path, c_in, c_out) in self.conv_layers() {
            let k: Tensor<T> =
                esbn_nn::init_parameters(&[c_out, c_in, 4, 4], Activation::Relu, rng).unwrap();
            store.insert(format!("{path}.k"), k, true);
            store.insert(format!("{path}.b"), Tensor::zeros(&[c_out]), true);
            if self.batchnorm {
                insert_bn_params(store, path, c_out);
            }
        }
        LinearHead::new("ae.enc.fc1", 256, 512, Activation::Relu).init_params(store, rng);
        if self.batchnorm {
            insert_bn_params(store, "ae.enc.fc1", 256);
        }
        LinearHead::new("ae.enc.fc2", self.embed, 256, Activation::Relu).init_params(store, rng);
        if self.batchnorm {
            insert_bn_params(store, "ae.enc.fc2", self.embed);
        }

        LinearHead::new("ae.dec.fc1", 256, self.embed, Activation::Relu).init_params(store, rng);
        if self.batchnorm {
            insert_bn_params(store, "ae.dec.fc1", 256);
        }
        LinearHead::new("ae.dec.fc2", 512, 256, Activation::Relu).init_params(store, rng);
        if self.batchnorm {
            insert_bn_params(store, "ae.dec.fc2", 512);
        }
        // transposed conv kernels are [c_in, c_out, kh, kw]
        for (path, c_in, c_out, act) in [
            ("ae.dec.convt1", 32, 32, Activation::Relu),
            ("ae.dec.convt2", 32, 32, Activation::Relu),
            ("ae.dec.convt3", 32, 1, Activation::Sigmoid),
        ] {
            let k: Tensor<T> = esbn_nn::init_parameters(&[c_in, c_out, 4, 4], act, rng).unwrap();
            store.insert(format!("{path}.k"), k, true);
            store.insert(format!("{path}.b"), Tensor::zeros(&[c_out]), true);
            if self.batchnorm && act == Activation::Relu {
                insert_bn_params(store, path, c_out);
            }
        }
    }

    /// x is [b, 1, 32, 32]; returns [b, embed].
    pub fn encode<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let mut cur = x;
        for (path, c_in, c_out) in self.conv_layers() {
            let _ = (c_in, c_out);
            let k = g.param(store, &format!("{path}.k"));
            let b = g.param(store, &format!("{path}.b"));
            cur = g.conv2d(cur, k, b, 2, 1);
            cur = self.maybe_bn(g, store, cur, path, training);
            cur = g.relu(cur);
        }
        let batch = g.value(cur).shape()[0];
        cur = g.reshape(cur, &[batch, 512]);
        cur = self.fc_bn_relu(g, store, cur, "ae.enc.fc1", 256, 512, training);
        cur = self.fc_bn_relu(g, store, cur, "ae.enc.fc2", self.embed, 256, training);
        cur
    }

    /// z is [b, embed]; returns [b, 1, 32, 32] with every pixel in (0,1).
    pub fn decode<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        z: NodeId,
        training: bool,
    ) -> NodeId {
        let mut cur = self.fc_bn_relu(g, store, z, "ae.dec.fc1", 256, self.embed, training);
        cur = self.fc_bn_relu(g, store, cur, "ae.dec.fc2", 512, 256, training);
        let batch = g.value(cur).shape()[0];
        cur = g.reshape(cur, &[batch, 32, 4, 4]);
        for (path, last) in [("ae.dec.convt1", false), ("ae.dec.convt2", false), ("ae.dec.convt3", true)]
        {
            let k = g.param(store, &format!("{path}.k"));
            let b = g.param(store, &format!("{path}.b"));
            cur = g.conv2d_transpose(cur, k, b, 2, 1);
            if last {
                cur = g.sigmoid(cur);
            } else {
                cur = self.maybe_bn(g, store, cur, path, training);
                cur = g.relu(cur);
            }
        }
        cur
    }

    #[allow(clippy::too_many_arguments)]
    fn fc_bn_relu<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        path: &str,
        out: usize,
        input: usize,
        training: bool,
    ) -> NodeId {
        let head = LinearHead::new(path, out, input, Activation::Relu);
        let pre = head.linear(g, store, x);
        let pre = self.maybe_bn(g, store, pre, path, training);
        g.relu(pre)
    }

    fn maybe_bn<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        path: &str,
        training: bool,
    ) -> NodeId {
        if !self.batchnorm {
            return x;
        }
        batchnorm_layer(g, store, x, path, training)
    }
}

fn insert_bn_params<T: Element>(store: &mut ParamStore<T>, prefix: &str, features: usize) {
    store.insert(format!("{prefix}.bn.gamma"), Tensor::full(&[features], T::one()), true);
    store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[features]), true);
    // running stats persist with the parameters but never take gradients
    store.insert(format!("{prefix}.bn.mean"), Tensor::zeros(&[features]), false);
    store.insert(format!("{prefix}.bn.var"), Tensor::full(&[features], T::one()), false);
}

/// Batch normalization reading gamma/beta from the store and folding batch
/// statistics back into the stored running stats during training.
pub(crate) fn batchnorm_layer<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    x: NodeId,
    prefix: &str,
    training: bool,
) -> NodeId {
    let gamma = g.param(store, &format!("{prefix}.bn.gamma"));
    let beta = g.param(store, &format!("{prefix}.bn.beta"));
    let mean_path = format!("{prefix}.bn.mean");
    let var_path = format!("{prefix}.bn.var");
    let mut rm = store.value(&mean_path).unwrap().clone();
    let mut rv = store.value(&var_path).unwrap().clone();
    let y = g.batchnorm(
        x,
        gamma,
        beta,
        &mut rm,
        &mut rv,
        training,
        T::from_f64(BN_EPS),
        T::from_f64(BN_MOMENTUM),
    );
    if training {
        *store.value_mut(&mean_path).unwrap() = rm;
        *store.value_mut(&var_path).unwrap() = rv;
    }
    y
}
