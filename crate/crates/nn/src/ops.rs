//! Forward implementations of the layer zoo.
//!
//! These are the contract-level entry points (shape-checked, `Result`-returning).
//! The tape in [`crate::tape`] reuses the same kernels and adds the backward
//! passes.

use crate::error::{NnError, Result};
use crate::tensor::{matmul_nt, Element, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            other => Err(NnError::InvalidArgument(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn apply_activation<T: Element>(t: &mut Tensor<T>, act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in t.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for v in t.data_mut() {
                *v = sigmoid_scalar(*v);
            }
        }
        Activation::Tanh => {
            for v in t.data_mut() {
                *v = v.tanh();
            }
        }
        Activation::Softmax => softmax_rows_in_place(t),
    }
}

/// Numerically stable row-wise softmax (max subtraction).
pub(crate) fn softmax_rows_in_place<T: Element>(t: &mut Tensor<T>) {
    let (rows, cols) = t.as_matrix();
    let data = t.data_mut();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// softmax over the last dimension; entries positive, rows sum to 1.
pub fn softmax<T: Element>(v: &Tensor<T>) -> Tensor<T> {
    let mut out = v.clone();
    softmax_rows_in_place(&mut out);
    out
}

/// activation(weights · x + bias). `x` may be a single vector or a batch of
/// row vectors; `weights` is [out, in].
pub fn fc_forward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    if weights.rank() != 2 {
        return Err(NnError::ShapeMismatch {
            context: "fc_forward weights",
            expected: vec![2],
            actual: weights.shape().to_vec(),
        });
    }
    let out_dim = weights.shape()[0];
    let in_dim = weights.shape()[1];
    let (_, xc) = x.as_matrix();
    if xc != in_dim {
        return Err(NnError::ShapeMismatch {
            context: "fc_forward input",
            expected: vec![in_dim],
            actual: vec![xc],
        });
    }
    if bias.numel() != out_dim {
        return Err(NnError::ShapeMismatch {
            context: "fc_forward bias",
            expected: vec![out_dim],
            actual: vec![bias.numel()],
        });
    }
    let mut y = matmul_nt(x, weights);
    add_bias_rows(&mut y, bias);
    apply_activation(&mut y, activation);
    if x.rank() == 1 {
        y = y.reshaped(vec![out_dim])?;
    }
    Ok(y)
}

pub(crate) fn add_bias_rows<T: Element>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let (rows, cols) = y.as_matrix();
    debug_assert_eq!(bias.numel(), cols);
    let b = bias.data();
    let d = y.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            d[r * cols + c] += b[c];
        }
    }
}

/// −log softmax(logits)[target]. `logits` is a single vector.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, target_index: usize) -> Result<T> {
    let n = logits.numel();
    if target_index >= n {
        return Err(NnError::InvalidArgument(format!(
            "target index {target_index} out of range for {n} logits"
        )));
    }
    let d = logits.data();
    let mut max = d[0];
    for &v in d {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in d {
        sum += (v - max).exp();
    }
    Ok(sum.ln() - (d[target_index] - max))
}

/// Mean over all elements of the squared difference.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            context: "mse_loss",
            expected: pred.shape().to_vec(),
            actual: target.shape().to_vec(),
        });
    }
    let n = T::from_f64(pred.numel() as f64);
    let mut acc = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc / n)
}

// ---------------------------------------------------------------------------
// Convolution via im2col / col2im
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let hp = height + 2 * pad;
        let wp = width + 2 * pad;
        if hp < kh || wp < kw {
            return Err(NnError::InvalidArgument(format!(
                "input {height}x{width} too small for kernel {kh}x{kw} with pad {pad}"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (hp - kh) / stride + 1,
            out_w: (wp - kw) / stride + 1,
        })
    }
}

/// Unfold `x` [b, C, H, W] into [b·OH·OW, C·kh·kw], zero-padding out of range.
pub(crate) fn im2col<T: Element>(x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let row_len = g.channels * g.kh * g.kw;
    let mut cols = Tensor::zeros(&[g.batch * g.out_h * g.out_w, row_len]);
    let xd = x.data();
    let cd = cols.data_mut();
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let x_base = b * g.channels * plane;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = ((b * g.out_h + oh) * g.out_w + ow) * row_len;
                let ih0 = (oh * g.stride) as isize - g.pad as isize;
                let iw0 = (ow * g.stride) as isize - g.pad as isize;
                for c in 0..g.channels {
                    let cbase = x_base + c * plane;
                    let rbase = row + c * g.kh * g.kw;
                    for kh in 0..g.kh {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for kw in 0..g.kw {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            cd[rbase + kh * g.kw + kw] =
                                xd[cbase + ih as usize * g.width + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Element>(cols: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let row_len = g.channels * g.kh * g.kw;
    let mut x = Tensor::zeros(&[g.batch, g.channels, g.height, g.width]);
    let cd = cols.data();
    let xd = x.data_mut();
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let x_base = b * g.channels * plane;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = ((b * g.out_h + oh) * g.out_w + ow) * row_len;
                let ih0 = (oh * g.stride) as isize - g.pad as isize;
                let iw0 = (ow * g.stride) as isize - g.pad as isize;
                for c in 0..g.channels {
                    let cbase = x_base + c * plane;
                    let rbase = row + c * g.kh * g.kw;
                    for kh in 0..g.kh {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for kw in 0..g.kw {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            xd[cbase + ih as usize * g.width + iw as usize] +=
                                cd[rbase + kh * g.kw + kw];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_input_geom<T: Element>(x: &Tensor<T>, context: &'static str) -> Result<(usize, Vec<usize>)> {
    match x.rank() {
        3 => Ok((1, x.shape().to_vec())),
        4 => Ok((x.shape()[0], x.shape()[1..].to_vec())),
        _ => Err(NnError::ShapeMismatch {
            context,
            expected: vec![4],
            actual: x.shape().to_vec(),
        }),
    }
}

/// Cross-correlation with stride-2 halving geometry. `kernels` is
/// [C_out, C_in, kh, kw]. Returns `(output, cols)`; the unfolded input is
/// kept so the backward pass can reuse it.
pub(crate) fn conv2d_with_cols<T: Element>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, ConvGeom)> {
    let (batch, chw) = conv_input_geom(x, "conv2d input")?;
    if kernels.rank() != 4 {
        return Err(NnError::ShapeMismatch {
            context: "conv2d kernels",
            expected: vec![4],
            actual: kernels.shape().to_vec(),
        });
    }
    let (c_out, c_in, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if chw[0] != c_in {
        return Err(NnError::ShapeMismatch {
            context: "conv2d channels",
            expected: vec![c_in],
            actual: vec![chw[0]],
        });
    }
    let (h, w) = (chw[1], chw[2]);
    if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
        return Err(NnError::InvalidArgument(format!(
            "conv2d with stride 2 requires even spatial size, got {h}x{w}"
        )));
    }
    if bias.numel() != c_out {
        return Err(NnError::ShapeMismatch {
            context: "conv2d bias",
            expected: vec![c_out],
            actual: vec![bias.numel()],
        });
    }
    let g = ConvGeom::new(batch, c_in, h, w, kh, kw, stride, pad)?;
    let cols = im2col(x, &g);
    // [b·OH·OW, C_in·kh·kw] · [C_out, C_in·kh·kw]ᵀ
    let kmat = kernels
        .clone()
        .reshaped(vec![c_out, c_in * kh * kw])
        .unwrap();
    let flat = matmul_nt(&cols, &kmat);
    // Rearrange rows (b,oh,ow) x cols (c_out) into [b, C_out, OH, OW].
    let mut out = Tensor::zeros(&[batch, c_out, g.out_h, g.out_w]);
    {
        let fd = flat.data();
        let od = out.data_mut();
        let bd = bias.data();
        let spatial = g.out_h * g.out_w;
        for b in 0..batch {
            for s in 0..spatial {
                let frow = (b * spatial + s) * c_out;
                for c in 0..c_out {
                    od[(b * c_out + c) * spatial + s] = fd[frow + c] + bd[c];
                }
            }
        }
    }
    Ok((out, cols, g))
}

/// `x` is [C_in, H, W] or [b, C_in, H, W]; output spatial size is exactly
/// halved with the stride-2, pad-1, 4x4 geometry.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let squeeze = x.rank() == 3;
    let (out, _, _) = conv2d_with_cols(x, kernels, bias, stride, pad)?;
    if squeeze {
        let s = out.shape()[1..].to_vec();
        return out.reshaped(s);
    }
    Ok(out)
}

/// Transposed convolution: the exact adjoint of [`conv2d_forward`] for a
/// shared kernel. `kernels` is [C_in, C_out, kh, kw]; output spatial size is
/// doubled for the stride-2, pad-1, 4x4 geometry (fractional stride 1/2).
pub fn conv2d_transpose_forward<T: Element>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let squeeze = x.rank() == 3;
    let out = conv2d_transpose_impl(x, kernels, bias, stride, pad)?;
    if squeeze {
        let s = out.shape()[1..].to_vec();
        return out.reshaped(s);
    }
    Ok(out)
}

pub(crate) fn conv2d_transpose_impl<T: Element>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (batch, chw) = conv_input_geom(x, "conv2d_transpose input")?;
    if kernels.rank() != 4 {
        return Err(NnError::ShapeMismatch {
            context: "conv2d_transpose kernels",
            expected: vec![4],
            actual: kernels.shape().to_vec(),
        });
    }
    let (c_in, c_out, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if chw[0] != c_in {
        return Err(NnError::ShapeMismatch {
            context: "conv2d_transpose channels",
            expected: vec![c_in],
            actual: vec![chw[0]],
        });
    }
    if bias.numel() != c_out {
        return Err(NnError::ShapeMismatch {
            context: "conv2d_transpose bias",
            expected: vec![c_out],
            actual: vec![bias.numel()],
        });
    }
    let (h, w) = (chw[1], chw[2]);
    // Output geometry inverts the conv contract: OH = (H-1)*stride - 2*pad + kh.
    let out_h = (h - 1) * stride + kh - 2 * pad;
    let out_w = (w - 1) * stride + kw - 2 * pad;
    let g = ConvGeom::new(batch, c_out, out_h, out_w, kh, kw, stride, pad)?;
    debug_assert_eq!(g.out_h, h);
    debug_assert_eq!(g.out_w, w);

    // Gather x into rows (b, h, w) x cols (c_in).
    let mut xmat = Tensor::zeros(&[batch * h * w, c_in]);
    {
        let xd = x.data();
        let md = xmat.data_mut();
        let spatial = h * w;
        for b in 0..batch {
            for s in 0..spatial {
                for c in 0..c_in {
                    md[(b * spatial + s) * c_in + c] = xd[(b * c_in + c) * spatial + s];
                }
            }
        }
    }
    let kmat = kernels
        .clone()
        .reshaped(vec![c_in, c_out * kh * kw])
        .unwrap();
    let cols = matmul_nn(&xmat, &kmat);
    let mut out = col2im(&cols, &g);
    {
        let od = out.data_mut();
        let bd = bias.data();
        let spatial = out_h * out_w;
        for b in 0..batch {
            for c in 0..c_out {
                let base = (b * c_out + c) * spatial;
                for s in 0..spatial {
                    od[base + s] += bd[c];
                }
            }
        }
    }
    Ok(out)
}

use crate::tensor::matmul_nn;

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-feature batch normalization. Features are the second axis for 4-D
/// input (channels) and the last axis for 2-D input. Training mode
/// normalizes by batch statistics (population variance) and folds them into
/// the running stats with the given momentum; eval mode uses running stats.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    training: bool,
    eps: T,
    momentum: T,
) -> Result<Tensor<T>> {
    let (out, _, _) = batchnorm_with_saved(x, gamma, beta, running_mean, running_var, training, eps, momentum)?;
    Ok(out)
}

pub(crate) type BnSaved<T> = (Tensor<T>, Tensor<T>); // (xhat, inv_std per feature)

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_with_saved<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    training: bool,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, BnSaved<T>, usize)> {
    let (features, reduce) = bn_layout(x)?;
    if gamma.numel() != features || beta.numel() != features {
        return Err(NnError::ShapeMismatch {
            context: "batchnorm gamma/beta",
            expected: vec![features],
            actual: vec![gamma.numel(), beta.numel()],
        });
    }
    if training && x.shape()[0] < 2 {
        return Err(NnError::InvalidArgument(
            "batchnorm in training mode requires batch size >= 2".into(),
        ));
    }
    let (mean, var) = if training {
        let mut mean = vec![T::zero(); features];
        let mut var = vec![T::zero(); features];
        bn_moments(x, features, &mut mean, &mut var);
        let nr = T::from_f64(reduce as f64);
        let _ = nr;
        for f in 0..features {
            let rm = running_mean.data_mut();
            rm[f] = (T::one() - momentum) * rm[f] + momentum * mean[f];
            let rv = running_var.data_mut();
            rv[f] = (T::one() - momentum) * rv[f] + momentum * var[f];
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    bn_apply(&mut xhat, features, |v, f| (v - mean[f]) * inv_std[f]);
    let mut out = xhat.clone();
    let gd = gamma.data();
    let bd = beta.data();
    bn_apply(&mut out, features, |v, f| v * gd[f] + bd[f]);
    let inv_std_t = Tensor::from_vec(inv_std);
    Ok((out, (xhat, inv_std_t), reduce))
}

/// (features, reduce_count)
pub(crate) fn bn_layout<T: Element>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.rank() {
        2 => Ok((x.shape()[1], x.shape()[0])),
        4 => Ok((x.shape()[1], x.shape()[0] * x.shape()[2] * x.shape()[3])),
        _ => Err(NnError::ShapeMismatch {
            context: "batchnorm input",
            expected: vec![2],
            actual: x.shape().to_vec(),
        }),
    }
}

fn bn_moments<T: Element>(x: &Tensor<T>, features: usize, mean: &mut [T], var: &mut [T]) {
    let (_, reduce) = bn_layout(x).unwrap();
    let nr = T::from_f64(reduce as f64);
    bn_fold(x, features, |v, f| mean[f] += v);
    for m in mean.iter_mut() {
        *m /= nr;
    }
    bn_fold(x, features, |v, f| {
        let d = v - mean[f];
        var[f] += d * d;
    });
    for v in var.iter_mut() {
        *v /= nr;
    }
}

pub(crate) fn bn_fold<T: Element>(x: &Tensor<T>, features: usize, mut f: impl FnMut(T, usize)) {
    match x.rank() {
        2 => {
            let cols = x.shape()[1];
            debug_assert_eq!(cols, features);
            for (i, &v) in x.data().iter().enumerate() {
                f(v, i % cols);
            }
        }
        4 => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            debug_assert_eq!(c, features);
            let plane = h * w;
            let d = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for s in 0..plane {
                        f(d[base + s], ci);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

pub(crate) fn bn_apply<T: Element>(x: &mut Tensor<T>, features: usize, f: impl Fn(T, usize) -> T) {
    match x.rank() {
        2 => {
            let cols = x.shape()[1];
            debug_assert_eq!(cols, features);
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v = f(*v, i % cols);
            }
        }
        4 => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            debug_assert_eq!(c, features);
            let plane = h * w;
            let d = x.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for s in 0..plane {
                        d[base + s] = f(d[base + s], ci);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// One LSTM step. Gate order in the 4H dimension is (input, forget,
/// candidate, output). `x` is [b, in] (or a single vector), `h`/`c` are
/// [b, H]. Returns (h', c').
pub fn lstm_cell_step<T: Element>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, _saved) = lstm_cell_with_saved(x, h, c, w_ih, w_hh, bias)?;
    Ok(out)
}

pub(crate) struct LstmSaved<T> {
    pub gates: Tensor<T>,  // [b, 4H] post-activation (i, f, g, o)
    pub tanh_c: Tensor<T>, // [b, H] tanh of the new cell state
}

#[allow(clippy::type_complexity)]
pub(crate) fn lstm_cell_with_saved<T: Element>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<((Tensor<T>, Tensor<T>), LstmSaved<T>)> {
    let hidden4 = w_ih.shape()[0];
    if hidden4 % 4 != 0 {
        return Err(NnError::InvalidArgument(
            "LSTM weight rows must be a multiple of 4".into(),
        ));
    }
    let hidden = hidden4 / 4;
    let (bsz, xc) = x.as_matrix();
    if xc != w_ih.shape()[1] {
        return Err(NnError::ShapeMismatch {
            context: "lstm input",
            expected: vec![w_ih.shape()[1]],
            actual: vec![xc],
        });
    }
    let (hb, hc) = h.as_matrix();
    if hb != bsz || hc != hidden || c.as_matrix() != (bsz, hidden) {
        return Err(NnError::ShapeMismatch {
            context: "lstm state",
            expected: vec![bsz, hidden],
            actual: h.shape().to_vec(),
        });
    }
    if w_hh.shape() != [hidden4, hidden] || bias.numel() != hidden4 {
        return Err(NnError::ShapeMismatch {
            context: "lstm weights",
            expected: vec![hidden4, hidden],
            actual: w_hh.shape().to_vec(),
        });
    }

    let mut pre = matmul_nt(x, w_ih);
    let hh = matmul_nt(h, w_hh);
    pre.add_assign(&hh);
    add_bias_rows(&mut pre, bias);

    // Activate in place: sigmoid on i/f/o blocks, tanh on the candidate.
    {
        let d = pre.data_mut();
        for b in 0..bsz {
            let row = &mut d[b * hidden4..(b + 1) * hidden4];
            for v in row[..2 * hidden].iter_mut() {
                *v = sigmoid_scalar(*v);
            }
            for v in row[2 * hidden..3 * hidden].iter_mut() {
                *v = v.tanh();
            }
            for v in row[3 * hidden..].iter_mut() {
                *v = sigmoid_scalar(*v);
            }
        }
    }
    let gates = pre;

    let mut c_new = Tensor::zeros(&[bsz, hidden]);
    let mut tanh_c = Tensor::zeros(&[bsz, hidden]);
    let mut h_new = Tensor::zeros(&[bsz, hidden]);
    {
        let gd = gates.data();
        let cd = c.data();
        let cn = c_new.data_mut();
        let tc = tanh_c.data_mut();
        let hn = h_new.data_mut();
        for b in 0..bsz {
            let g_row = &gd[b * hidden4..(b + 1) * hidden4];
            for j in 0..hidden {
                let i = g_row[j];
                let f = g_row[hidden + j];
                let g = g_row[2 * hidden + j];
                let o = g_row[3 * hidden + j];
                let cval = f * cd[b * hidden + j] + i * g;
                let t = cval.tanh();
                cn[b * hidden + j] = cval;
                tc[b * hidden + j] = t;
                hn[b * hidden + j] = o * t;
            }
        }
    }
    Ok(((h_new, c_new), LstmSaved { gates, tanh_c }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn fc_identity_case() {
        let x = t(&[2], &[1.0, 0.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = fc_forward(&x, &w, &b, Activation::Identity).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fc_uniform_softmax() {
        let x = t(&[2], &[0.0, 0.0]);
        let w = t(&[2, 2], &[0.0; 4]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = fc_forward(&x, &w, &b, Activation::Softmax).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fc_relu_hand_oracle() {
        // W·x = [1*1+1*2, 2*1+0*2] = [3, 2]; +b = [3, 3]; relu keeps both.
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]);
        let b = t(&[2], &[0.0, 1.0]);
        let y = fc_forward(&x, &w, &b, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn fc_rejects_shape_mismatch() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let w = t(&[2, 2], &[1.0; 4]);
        let b = t(&[2], &[0.0; 2]);
        assert!(fc_forward(&x, &w, &b, Activation::Identity).is_err());
    }

    #[test]
    fn softmax_matches_exponential_sum() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        let s = softmax(&v);
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_values_stable() {
        let v = t(&[2], &[1000.0, 0.0]);
        let s = softmax(&v);
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = t(&[4], &[0.3, 0.3, 0.3, 0.3]);
        let l = cross_entropy_loss(&uniform, 2).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        let confident = t(&[4], &[100.0, 0.0, 0.0, 0.0]);
        assert!(cross_entropy_loss(&confident, 0).unwrap() < 1e-12);

        let two = t(&[2], &[1.0, 2.0]);
        assert!((cross_entropy_loss(&two, 0).unwrap() - 1.3132616875182228).abs() < 1e-10);

        assert!(cross_entropy_loss(&two, 2).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let z = t(&[3], &[0.0, 0.0, 0.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!((mse_loss(&a, &z).unwrap() - 14.0 / 3.0).abs() < 1e-12);
        let b = t(&[2], &[1.0, 1.0]);
        let zb = t(&[2], &[0.0, 0.0]);
        assert_eq!(mse_loss(&b, &zb).unwrap(), 1.0);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn conv_ones_sliding_window_oracle() {
        let x = Tensor::full(&[1, 4, 4], 1.0f64);
        let k = Tensor::full(&[1, 1, 4, 4], 1.0f64);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn conv_shape_contract_and_zero_linearity() {
        let x = Tensor::zeros(&[1, 32, 32]);
        let k = Tensor::<f64>::zeros(&[32, 1, 4, 4]);
        let b = Tensor::zeros(&[32]);
        let y = conv2d_forward(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[32, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        // odd spatial size rejected
        let bad = Tensor::<f64>::zeros(&[1, 5, 5]);
        assert!(conv2d_forward(&bad, &k, &b, 2, 1).is_err());
    }

    #[test]
    fn conv_transpose_doubles_and_adjoint_holds() {
        let xt = Tensor::<f64>::zeros(&[32, 4, 4]);
        let kt = Tensor::<f64>::zeros(&[32, 32, 4, 4]);
        let bt = Tensor::zeros(&[32]);
        let y = conv2d_transpose_forward(&xt, &kt, &bt, 2, 1).unwrap();
        assert_eq!(y.shape(), &[32, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        // <conv(x), y> == <x, convT(y)> with a shared kernel.
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|_| next()).collect()).unwrap();
        let yv = Tensor::new(vec![1, 2, 2], (0..4).map(|_| next()).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| next()).collect()).unwrap();
        let zb = Tensor::zeros(&[1]);
        let cx = conv2d_forward(&x, &k, &zb, 2, 1).unwrap();
        let cty = conv2d_transpose_forward(&yv, &k, &zb, 2, 1).unwrap();
        let lhs = cx.dot(&yv);
        let rhs = x.dot(&cty);
        assert!((lhs - rhs).abs() < 1e-10, "adjoint broken: {lhs} vs {rhs}");
    }

    #[test]
    fn batchnorm_hand_oracle() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let gamma = t(&[1], &[1.0]);
        let beta = t(&[1], &[0.0]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let y = batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.1).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-3, "{a} vs {e}");
        }
        // population variance of {1,2,3} is 2/3
        assert!((rv.data()[0] - (0.9 + 0.1 * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_symmetric_and_gamma_zero() {
        let x = t(&[2, 2], &[-1.0, 1.0, 1.0, -1.0]);
        let gamma = t(&[2], &[1.0, 0.0]);
        let beta = t(&[2], &[0.0, 7.0]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let y = batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.1).unwrap();
        // feature 0: {-1, +1} stays {-1, +1} up to eps
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[2] - 1.0).abs() < 1e-4);
        // feature 1: gamma 0 makes every output beta
        assert!((y.data()[1] - 7.0).abs() < 1e-12);
        assert!((y.data()[3] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        assert!(
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, true, 1e-5, 0.1).is_err()
        );
        // eval mode is fine with a single sample
        assert!(
            batchnorm_forward(&x, &gamma, &beta, &mut rm, &mut rv, false, 1e-5, 0.1).is_ok()
        );
    }

    #[test]
    fn lstm_zero_network_and_saturated_forget() {
        let hidden = 3;
        let x = t(&[2], &[0.5, -0.25]);
        let h = Tensor::zeros(&[1, hidden]);
        let c = Tensor::new(vec![1, hidden], vec![0.3, -0.7, 1.1]).unwrap();
        let w_ih = Tensor::zeros(&[4 * hidden, 2]);
        let w_hh = Tensor::zeros(&[4 * hidden, hidden]);
        let bias = Tensor::zeros(&[4 * hidden]);
        let (h1, c1) = lstm_cell_step(&x, &h, &c, &w_ih, &w_hh, &bias).unwrap();
        // zero weights and biases: i = 0.5, g = 0 so c' = 0.5*c... with zero
        // forget bias f = 0.5, so c' = 0.5*c and h' = 0.5*tanh(c')
        for j in 0..hidden {
            assert!((c1.data()[j] - 0.5 * c.data()[j]).abs() < 1e-12);
            assert!((h1.data()[j] - 0.5 * (0.5 * c.data()[j]).tanh()).abs() < 1e-12);
        }
        // saturating the forget gate (bias 100) with input gate driven to 0
        // (bias -100) keeps the cell state intact
        let mut bias_sat = vec![0.0f64; 4 * hidden];
        for j in 0..hidden {
            bias_sat[j] = -100.0; // input gate ~ 0
            bias_sat[hidden + j] = 100.0; // forget gate ~ 1
        }
        let bias_sat = Tensor::from_vec(bias_sat);
        let (_, c2) = lstm_cell_step(&x, &h, &c, &w_ih, &w_hh, &bias_sat).unwrap();
        for j in 0..hidden {
            assert!((c2.data()[j] - c.data()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_matches_scalar_equation_oracle() {
        // 2-unit cell, fixed small weights, checked against the gate
        // equations evaluated scalar by scalar.
        let hidden = 2;
        let input = 2;
        let mut vals = Vec::new();
        let mut s = 1u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for _ in 0..(4 * hidden * input + 4 * hidden * hidden + 4 * hidden + input + 2 * hidden) {
            vals.push(next());
        }
        let mut it = vals.into_iter();
        let w_ih = Tensor::new(vec![4 * hidden, input], (0..4 * hidden * input).map(|_| it.next().unwrap()).collect()).unwrap();
        let w_hh = Tensor::new(vec![4 * hidden, hidden], (0..4 * hidden * hidden).map(|_| it.next().unwrap()).collect()).unwrap();
        let bias = Tensor::new(vec![4 * hidden], (0..4 * hidden).map(|_| it.next().unwrap()).collect()).unwrap();
        let x = Tensor::new(vec![input], (0..input).map(|_| it.next().unwrap()).collect()).unwrap();
        let h = Tensor::new(vec![1, hidden], (0..hidden).map(|_| it.next().unwrap()).collect()).unwrap();
        let c = Tensor::new(vec![1, hidden], (0..hidden).map(|_| it.next().unwrap()).collect()).unwrap();

        let (h1, c1) = lstm_cell_step(&x, &h, &c, &w_ih, &w_hh, &bias).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hidden {
            let pre = |block: usize| -> f64 {
                let row = block * hidden + j;
                let mut acc = bias.data()[row];
                for (xi, &xv) in x.data().iter().enumerate() {
                    acc += w_ih.data()[row * input + xi] * xv;
                }
                for (hi, &hv) in h.data().iter().enumerate() {
                    acc += w_hh.data()[row * hidden + hi] * hv;
                }
                acc
            };
            let i = sig(pre(0));
            let f = sig(pre(1));
            let g = pre(2).tanh();
            let o = sig(pre(3));
            let c_exp = f * c.data()[j] + i * g;
            let h_exp = o * c_exp.tanh();
            assert!((c1.data()[j] - c_exp).abs() < 1e-12);
            assert!((h1.data()[j] - h_exp).abs() < 1e-12);
        }
    }
}
