//! Activation-matched parameter initialization.

use crate::error::{NnError, Result};
use crate::ops::Activation;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum InitScheme {
    XavierNormal { gain: f64 },
    KaimingNormal,
}

impl InitScheme {
    /// Scheme used for a layer with the given activation: tanh gets Xavier
    /// with gain 5/3, sigmoid/softmax/identity get Xavier with gain 1, relu
    /// gets Kaiming.
    pub fn for_activation(activation: Activation) -> Self {
        match activation {
            Activation::Tanh => InitScheme::XavierNormal { gain: 5.0 / 3.0 },
            Activation::Relu => InitScheme::KaimingNormal,
            Activation::Sigmoid | Activation::Softmax | Activation::Identity => {
                InitScheme::XavierNormal { gain: 1.0 }
            }
        }
    }

    /// Standard deviation for a weight of the given shape.
    ///
    /// Fans follow the usual convention: for [out, in] matrices fan_in = in
    /// and fan_out = out; for 4-D kernels the receptive field multiplies
    /// shape[1] (fan_in) and shape[0] (fan_out).
    pub fn std_for(&self, shape: &[usize]) -> Result<f64> {
        let (fan_in, fan_out) = fans(shape)?;
        Ok(match self {
            InitScheme::XavierNormal { gain } => {
                if *gain <= 0.0 {
                    return Err(NnError::InvalidArgument("xavier gain must be > 0".into()));
                }
                gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
            }
            InitScheme::KaimingNormal => (2.0 / fan_in as f64).sqrt(),
        })
    }
}

fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        2 => Ok((shape[1], shape[0])),
        4 => {
            let receptive = shape[2] * shape[3];
            Ok((shape[1] * receptive, shape[0] * receptive))
        }
        _ => Err(NnError::InvalidArgument(format!(
            "no fan convention for shape {shape:?}"
        ))),
    }
}

/// Draw a weight tensor for a layer with the given activation. Values are
/// sampled in f64 row-major order and narrowed, so the stream is identical
/// for f32 and f64 instantiations of the same seed.
pub fn init_parameters<T: Element, R: Rng>(
    shape: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let scheme = InitScheme::for_activation(activation);
    init_with_scheme(shape, scheme, rng)
}

pub fn init_with_scheme<T: Element, R: Rng>(
    shape: &[usize],
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let std = scheme.std_for(shape)?;
    let dist = Normal::new(0.0f64, std)
        .map_err(|e| NnError::InvalidArgument(format!("bad normal params: {e}")))?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}
