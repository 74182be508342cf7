//! Position-wise feed-forward, residual layer norm and positional encoding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FeedForwardCache<S> {
    x: Matrix<S>,
    pre: Matrix<S>,
    hidden: Matrix<S>,
}

/// `ReLU(x·W₁)·W₂`, row by row. No biases.
pub fn feed_forward<S: Scalar>(x: &Matrix<S>, w1: &Matrix<S>, w2: &Matrix<S>) -> Result<Matrix<S>> {
    feed_forward_cached(x, w1, w2).map(|(y, _)| y)
}

pub fn feed_forward_cached<S: Scalar>(
    x: &Matrix<S>,
    w1: &Matrix<S>,
    w2: &Matrix<S>,
) -> Result<(Matrix<S>, FeedForwardCache<S>)> {
    if x.cols() != w1.rows() || w1.cols() != w2.rows() {
        return Err(Error::Shape(format!(
            "feed-forward shapes {:?} · {:?} · {:?}",
            x.shape(),
            w1.shape(),
            w2.shape()
        )));
    }
    let pre = x.matmul(w1);
    let hidden = pre.map(|v| v.max(S::zero()));
    let y = hidden.matmul(w2);
    Ok((
        y,
        FeedForwardCache {
            x: x.clone(),
            pre,
            hidden,
        },
    ))
}

pub struct FeedForwardGrads<S> {
    pub d_x: Matrix<S>,
    pub d_w1: Matrix<S>,
    pub d_w2: Matrix<S>,
}

pub fn feed_forward_backward<S: Scalar>(
    w1: &Matrix<S>,
    w2: &Matrix<S>,
    cache: &FeedForwardCache<S>,
    d_y: &Matrix<S>,
) -> FeedForwardGrads<S> {
    let d_hidden = d_y.matmul_t(w2);
    let d_w2 = cache.hidden.t_matmul(d_y);
    let d_pre = d_hidden.zip_map(&cache.pre, |g, p| if p > S::zero() { g } else { S::zero() });
    FeedForwardGrads {
        d_x: d_pre.matmul_t(w1),
        d_w1: cache.x.t_matmul(&d_pre),
        d_w2,
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    normalized: Matrix<S>,
    inv_std: Vec<S>,
}

/// Post-norm residual: `LayerNorm(x + sublayer)` with per-feature gain and bias.
pub fn residual_layer_norm<S: Scalar>(
    x: &Matrix<S>,
    sublayer: &Matrix<S>,
    gain: &Matrix<S>,
    bias: &Matrix<S>,
) -> Result<Matrix<S>> {
    residual_layer_norm_cached(x, sublayer, gain, bias).map(|(y, _)| y)
}

pub fn residual_layer_norm_cached<S: Scalar>(
    x: &Matrix<S>,
    sublayer: &Matrix<S>,
    gain: &Matrix<S>,
    bias: &Matrix<S>,
) -> Result<(Matrix<S>, LayerNormCache<S>)> {
    let d = x.cols();
    if x.shape() != sublayer.shape() || gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer norm over {:?} + {:?} with {} gains and {} biases",
            x.shape(),
            sublayer.shape(),
            gain.len(),
            bias.len()
        )));
    }
    let z = x.add(sublayer);
    let eps = S::of(LAYER_NORM_EPS);
    let width = S::of_usize(d);
    let mut normalized = Matrix::zeros(z.rows(), d);
    let mut inv_std = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let row = z.row(r);
        let mean = row.iter().copied().sum::<S>() / width;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / width;
        let inv = S::one() / (var + eps).sqrt();
        for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let (g, b) = (gain.as_slice(), bias.as_slice());
    let y = Matrix::from_fn(z.rows(), d, |r, c| normalized[(r, c)] * g[c] + b[c]);
    Ok((
        y,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

pub struct LayerNormGrads<S> {
    /// Gradient w.r.t. the summed input, shared by the residual and sublayer branches.
    pub d_input: Matrix<S>,
    pub d_gain: Matrix<S>,
    pub d_bias: Matrix<S>,
}

pub fn residual_layer_norm_backward<S: Scalar>(
    gain: &Matrix<S>,
    cache: &LayerNormCache<S>,
    d_y: &Matrix<S>,
) -> LayerNormGrads<S> {
    let (rows, d) = d_y.shape();
    let width = S::of_usize(d);
    let g = gain.as_slice();
    let mut d_input = Matrix::zeros(rows, d);
    let mut d_gain = Matrix::zeros(1, d);
    let d_bias = d_y.column_sums();
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dy = d_y.row(r);
        for c in 0..d {
            d_gain.as_mut_slice()[c] = d_gain.as_slice()[c] + dy[c] * xhat[c];
        }
        let dxhat: Vec<S> = dy.iter().zip(g).map(|(&a, &b)| a * b).collect();
        let mean_dxhat = dxhat.iter().copied().sum::<S>() / width;
        let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<S>() / width;
        let inv = cache.inv_std[r];
        for (c, o) in d_input.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    LayerNormGrads {
        d_input,
        d_gain,
        d_bias,
    }
}

/// Sinusoidal encoding of node positions: `sin` on even features, `cos` on odd.
pub fn positional_encoding<S: Scalar>(node_count: usize, d_model: usize) -> Result<Matrix<S>> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    Ok(Matrix::from_fn(node_count, d_model, |pos, dim| {
        let pair = (dim / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        S::of(if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        })
    }))
}
