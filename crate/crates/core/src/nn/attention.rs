//! Softmax, scaled dot-product attention and multi-head attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Row-wise softmax. Entries where `mask` is `false` are treated as −∞ and
/// come out exactly zero.
pub fn softmax_rows<S: Scalar>(x: &Matrix<S>, mask: Option<&[bool]>) -> Result<Matrix<S>> {
    if let Some(mask) = mask {
        if mask.len() != x.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, logits are {}x{}",
                mask.len(),
                x.rows(),
                x.cols()
            )));
        }
    }
    let cols = x.cols();
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let row = x.row(r);
        let max = (0..cols)
            .filter(|&c| allowed(c))
            .map(|c| row[c])
            .fold(None, |acc: Option<S>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::DegenerateRow { row: r })?;
        let out_row = out.row_mut(r);
        let mut total = S::zero();
        for c in (0..cols).filter(|&c| allowed(c)) {
            let e = (row[c] - max).exp();
            out_row[c] = e;
            total = total + e;
        }
        for v in out_row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`softmax_rows`] given its output `probs`.
pub fn softmax_rows_backward<S: Scalar>(probs: &Matrix<S>, d_probs: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner = crate::tensor::dot(p, dp);
        for (o, (&pi, &dpi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - inner);
        }
    }
    out
}

/// Attention result: mixed values plus one row-stochastic weight matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<S> {
    pub output: Matrix<S>,
    pub weights: Vec<Matrix<S>>,
}

impl<S: Scalar> AttentionOutput<S> {
    /// Element-wise mean of the per-head weight matrices.
    pub fn mean_weights(&self) -> Matrix<S> {
        mean_of(&self.weights)
    }
}

pub(crate) fn mean_of<S: Scalar>(matrices: &[Matrix<S>]) -> Matrix<S> {
    let mut acc = matrices[0].clone();
    for m in &matrices[1..] {
        acc.add_assign(m);
    }
    acc.scale_assign(S::one() / S::of_usize(matrices.len()));
    acc
}

/// `softmax(QKᵀ/√d_k, mask)·V`
pub fn scaled_dot_product_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    d_k: usize,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput<S>> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "Q has {} columns, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "K has {} rows, V has {}",
            k.rows(),
            v.rows()
        )));
    }
    let logits = q.matmul_t(k).scale(S::one() / S::of_usize(d_k).sqrt());
    let weights = softmax_rows(&logits, mask)?;
    Ok(AttentionOutput {
        output: weights.matmul(v),
        weights: vec![weights],
    })
}

pub struct AttentionGrads<S> {
    pub d_q: Matrix<S>,
    pub d_k: Matrix<S>,
    pub d_v: Matrix<S>,
}

pub fn scaled_dot_product_attention_backward<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    weights: &Matrix<S>,
    d_k: usize,
    d_out: &Matrix<S>,
) -> AttentionGrads<S> {
    let scale = S::one() / S::of_usize(d_k).sqrt();
    let d_weights = d_out.matmul_t(v);
    let d_v = weights.t_matmul(d_out);
    let d_logits = softmax_rows_backward(weights, &d_weights).scale(scale);
    AttentionGrads {
        d_q: d_logits.matmul(k),
        d_k: d_logits.t_matmul(q),
        d_v,
    }
}

/// Q/K/V/O projections for all heads. Head `i` owns columns
/// `[i·d_k, (i+1)·d_k)` of `w_q`, `w_k`, `w_v` and the matching rows of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<S> {
    pub heads: usize,
    pub w_q: Matrix<S>,
    pub w_k: Matrix<S>,
    pub w_v: Matrix<S>,
    pub w_o: Matrix<S>,
}

impl<S: Scalar> ProjectionWeights<S> {
    pub fn zeros(d_model: usize, heads: usize) -> Self {
        ProjectionWeights {
            heads,
            w_q: Matrix::zeros(d_model, d_model),
            w_k: Matrix::zeros(d_model, d_model),
            w_v: Matrix::zeros(d_model, d_model),
            w_o: Matrix::zeros(d_model, d_model),
        }
    }

    /// Uniform in ±√(1/fan_in).
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d_model as f64).sqrt();
        ProjectionWeights {
            heads,
            w_q: Matrix::random_uniform(d_model, d_model, bound, rng),
            w_k: Matrix::random_uniform(d_model, d_model, bound, rng),
            w_v: Matrix::random_uniform(d_model, d_model, bound, rng),
            w_o: Matrix::random_uniform(d_model, d_model, bound, rng),
        }
    }

    pub fn identity(d_model: usize, heads: usize) -> Self {
        ProjectionWeights {
            heads,
            w_q: Matrix::identity(d_model),
            w_k: Matrix::identity(d_model),
            w_v: Matrix::identity(d_model),
            w_o: Matrix::identity(d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn matrices(&self) -> [(&'static str, &Matrix<S>); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut Matrix<S>); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {d}",
                self.heads
            )));
        }
        for (name, m) in self.matrices() {
            if m.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {d}x{d}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MultiHeadCache<S> {
    x_q: Matrix<S>,
    x_kv: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    concat: Matrix<S>,
    weights: Vec<Matrix<S>>,
}

impl<S> MultiHeadCache<S> {
    /// Per-head attention weights of the cached pass.
    pub fn weights(&self) -> &[Matrix<S>] {
        &self.weights
    }
}

pub fn multi_head_attention<S: Scalar>(
    x_q: &Matrix<S>,
    x_kv: &Matrix<S>,
    w: &ProjectionWeights<S>,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput<S>> {
    multi_head_attention_cached(x_q, x_kv, w, mask).map(|(out, _)| out)
}

pub fn multi_head_attention_cached<S: Scalar>(
    x_q: &Matrix<S>,
    x_kv: &Matrix<S>,
    w: &ProjectionWeights<S>,
    mask: Option<&[bool]>,
) -> Result<(AttentionOutput<S>, MultiHeadCache<S>)> {
    w.validate()?;
    let d = w.d_model();
    if x_q.cols() != d || x_kv.cols() != d {
        return Err(Error::Shape(format!(
            "attention inputs have {} and {} columns, d_model is {d}",
            x_q.cols(),
            x_kv.cols()
        )));
    }
    let d_k = w.head_dim();
    let q = x_q.matmul(&w.w_q);
    let k = x_kv.matmul(&w.w_k);
    let v = x_kv.matmul(&w.w_v);
    let mut concat = Matrix::zeros(x_q.rows(), d);
    let mut weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let head = scaled_dot_product_attention(
            &q.columns(h * d_k, d_k),
            &k.columns(h * d_k, d_k),
            &v.columns(h * d_k, d_k),
            d_k,
            mask,
        )?;
        concat.set_columns(h * d_k, &head.output);
        weights.extend(head.weights);
    }
    let output = concat.matmul(&w.w_o);
    let cache = MultiHeadCache {
        x_q: x_q.clone(),
        x_kv: x_kv.clone(),
        q,
        k,
        v,
        concat,
        weights: weights.clone(),
    };
    Ok((AttentionOutput { output, weights }, cache))
}

pub struct MultiHeadGrads<S> {
    pub d_x_q: Matrix<S>,
    pub d_x_kv: Matrix<S>,
    pub d_weights: ProjectionWeights<S>,
}

pub fn multi_head_attention_backward<S: Scalar>(
    w: &ProjectionWeights<S>,
    cache: &MultiHeadCache<S>,
    d_out: &Matrix<S>,
) -> MultiHeadGrads<S> {
    let d = w.d_model();
    let d_k = w.head_dim();
    let d_concat = d_out.matmul_t(&w.w_o);
    let d_w_o = cache.concat.t_matmul(d_out);
    let mut d_q = Matrix::zeros(cache.q.rows(), d);
    let mut d_k_all = Matrix::zeros(cache.k.rows(), d);
    let mut d_v = Matrix::zeros(cache.v.rows(), d);
    for h in 0..w.heads {
        let g = scaled_dot_product_attention_backward(
            &cache.q.columns(h * d_k, d_k),
            &cache.k.columns(h * d_k, d_k),
            &cache.v.columns(h * d_k, d_k),
            &cache.weights[h],
            d_k,
            &d_concat.columns(h * d_k, d_k),
        );
        d_q.set_columns(h * d_k, &g.d_q);
        d_k_all.set_columns(h * d_k, &g.d_k);
        d_v.set_columns(h * d_k, &g.d_v);
    }
    let d_x_q = d_q.matmul_t(&w.w_q);
    let mut d_x_kv = d_k_all.matmul_t(&w.w_k);
    d_x_kv.add_assign(&d_v.matmul_t(&w.w_v));
    MultiHeadGrads {
        d_x_q,
        d_x_kv,
        d_weights: ProjectionWeights {
            heads: w.heads,
            w_q: cache.x_q.t_matmul(&d_q),
            w_k: cache.x_kv.t_matmul(&d_k_all),
            w_v: cache.x_kv.t_matmul(&d_v),
            w_o: d_w_o,
        },
    }
}
