//! Forward pass, attention capture and reverse-mode gradients of the full network.

use crate::dataset::{zscore_invert, NormalizationStats, SPEED_CHANNEL};
use crate::error::{Error, Result};
use crate::graph::{build_khop_mask, KHopMask, SensorGraph};
use crate::model::config::ModelConfig;
use crate::model::params::{
    DecoderBlock, Embedding, EncoderBlock, FeedForwardParams, NormParams, ParameterSet,
};
use crate::nn::attention::{
    mean_of, multi_head_attention_backward, multi_head_attention_cached, MultiHeadCache,
};
use crate::nn::layers::{
    feed_forward_backward, feed_forward_cached, residual_layer_norm_backward,
    residual_layer_norm_cached, FeedForwardCache, LayerNormCache,
};
use crate::nn::lstm::{temporal_embed_backward, temporal_embed_cached, TemporalCache};
use crate::nn::positional_encoding;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor3};

/// Head-averaged attention matrices of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<S> {
    /// Encoder self-attention, one per encoder block.
    pub src: Vec<Matrix<S>>,
    /// Decoder masked self-attention, one per decoder block.
    pub tgt: Vec<Matrix<S>>,
    /// Decoder fusion attention over the encoder output.
    pub mem: Vec<Matrix<S>>,
    /// The same matrices before head averaging: `[block][head]`.
    pub per_head: AttentionHeads<S>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionHeads<S> {
    pub src: Vec<Vec<Matrix<S>>>,
    pub tgt: Vec<Vec<Matrix<S>>>,
    pub mem: Vec<Vec<Matrix<S>>>,
}

impl<S: Scalar> AttentionRecord<S> {
    fn from_heads(per_head: AttentionHeads<S>) -> Self {
        let avg = |v: &Vec<Vec<Matrix<S>>>| v.iter().map(|h| mean_of(h)).collect();
        AttentionRecord {
            src: avg(&per_head.src),
            tgt: avg(&per_head.tgt),
            mem: avg(&per_head.mem),
            per_head,
        }
    }

    /// `(kind, 1-based layer, matrix)` for every recorded layer.
    pub fn layers(&self) -> Vec<(&'static str, usize, &Matrix<S>)> {
        let mut out = Vec::new();
        for (kind, v) in [("src", &self.src), ("tgt", &self.tgt), ("mem", &self.mem)] {
            out.extend(v.iter().enumerate().map(|(i, m)| (kind, i + 1, m)));
        }
        out
    }
}

/// Normalized-space output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast<S> {
    /// `n × N`, z-scored speeds.
    pub predictions: Matrix<S>,
    pub attention: AttentionRecord<S>,
}

/// Forecast in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult<S> {
    /// `n × N`
    pub predictions: Matrix<S>,
    pub attention: AttentionRecord<S>,
}

impl<S: Scalar> Forecast<S> {
    pub fn denormalize(self, stats: &NormalizationStats) -> ForecastResult<S> {
        ForecastResult {
            predictions: zscore_invert(&self.predictions, stats),
            attention: self.attention,
        }
    }
}

struct EncoderCache<S> {
    attention: MultiHeadCache<S>,
    norm_attention: LayerNormCache<S>,
    ffn: FeedForwardCache<S>,
    norm_ffn: LayerNormCache<S>,
}

struct DecoderCache<S> {
    masked: MultiHeadCache<S>,
    norm_masked: LayerNormCache<S>,
    fusion: Option<(MultiHeadCache<S>, LayerNormCache<S>)>,
    ffn: FeedForwardCache<S>,
    norm_ffn: LayerNormCache<S>,
}

enum EmbeddingCache<S> {
    Lstm(TemporalCache<S>),
    Flatten(Matrix<S>),
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<S> {
    embedding: EmbeddingCache<S>,
    encoder: Vec<EncoderCache<S>>,
    decoder: Vec<DecoderCache<S>>,
    head_input: Matrix<S>,
}

/// A validated model structure bound to a node count and (when the variant
/// needs one) a K-hop mask. Parameters are passed separately so one pipeline
/// can evaluate many parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    config: ModelConfig,
    nodes: usize,
    mask: Option<KHopMask>,
}

/// Builds the forward pipeline for `config.variant`. Variants with a decoder
/// need `graph`; the others ignore it.
pub fn build_variant(
    config: &ModelConfig,
    nodes: usize,
    graph: Option<&SensorGraph>,
) -> Result<Pipeline> {
    config.validate()?;
    if nodes == 0 {
        return Err(Error::Config("model needs at least one node".into()));
    }
    let mask = if config.variant.needs_graph() {
        let graph = graph.ok_or_else(|| Error::MissingGraph(config.variant.to_string()))?;
        if graph.node_count() != nodes {
            return Err(Error::Shape(format!(
                "graph has {} nodes, model expects {nodes}",
                graph.node_count()
            )));
        }
        Some(build_khop_mask(graph, config.mask_hops)?)
    } else {
        None
    };
    Ok(Pipeline {
        config: config.clone(),
        nodes,
        mask,
    })
}

fn check_finite<S: Scalar>(m: &Matrix<S>, location: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: location(),
        })
    }
}

impl Pipeline {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn mask(&self) -> Option<&KHopMask> {
        self.mask.as_ref()
    }

    pub fn init_params<S: Scalar, R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<S> {
        ParameterSet::init(&self.config, self.nodes, rng)
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        window: &Tensor3<S>,
    ) -> Result<Forecast<S>> {
        self.forward_cached(params, window).map(|(f, _)| f)
    }

    pub fn forecast<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        window: &Tensor3<S>,
        stats: &NormalizationStats,
    ) -> Result<ForecastResult<S>> {
        Ok(self.forward(params, window)?.denormalize(stats))
    }

    fn check_inputs<S: Scalar>(&self, params: &ParameterSet<S>, window: &Tensor3<S>) -> Result<()> {
        let c = &self.config;
        let (m, n, ch) = window.shape();
        if m != c.window || n != self.nodes || ch != c.input_channels {
            return Err(Error::Shape(format!(
                "window is {m}x{n}x{ch}, model expects {}x{}x{}",
                c.window, self.nodes, c.input_channels
            )));
        }
        if params.count() != crate::model::params::parameter_count(c, self.nodes)
            || params.head.shape() != (c.d_model, c.horizon)
        {
            return Err(Error::Shape(
                "parameter set does not match the model configuration".into(),
            ));
        }
        Ok(())
    }

    fn embed<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        window: &Tensor3<S>,
    ) -> Result<(Matrix<S>, EmbeddingCache<S>)> {
        match &params.embedding {
            Embedding::Lstm(w) => {
                let (h, cache) = temporal_embed_cached(window, w)?;
                Ok((h, EmbeddingCache::Lstm(cache)))
            }
            Embedding::Flatten(w) => {
                let history = window.channel_matrix(SPEED_CHANNEL).transpose();
                Ok((history.matmul(w), EmbeddingCache::Flatten(history)))
            }
        }
    }

    pub fn forward_cached<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        window: &Tensor3<S>,
    ) -> Result<(Forecast<S>, ForwardCache<S>)> {
        self.check_inputs(params, window)?;
        let config = &self.config;
        let (mut stream, embedding) = self.embed(params, window)?;
        check_finite(&stream, || "temporal embedding".into())?;
        if config.variant.uses_positional_terms() && config.positional_encoding {
            stream.add_assign(&positional_encoding(self.nodes, config.d_model)?);
        }
        if let Some(p) = &params.node_embedding {
            stream.add_assign(p);
        }

        let mut heads = AttentionHeads::default();
        let mut encoder = Vec::with_capacity(params.encoder.len());
        let mut enc = stream.clone();
        for (i, block) in params.encoder.iter().enumerate() {
            let (out, cache) = encoder_block_forward(block, &enc)?;
            check_finite(&out, || format!("encoder block {}", i + 1))?;
            heads.src.push(cache.attention.weights().to_vec());
            encoder.push(cache);
            enc = out;
        }

        let mask = self.mask.as_ref().map(KHopMask::as_slice);
        let mut decoder = Vec::with_capacity(params.decoder.len());
        let mut dec = stream;
        for (i, block) in params.decoder.iter().enumerate() {
            let (out, cache) = decoder_block_forward(block, &dec, &enc, mask)?;
            check_finite(&out, || format!("decoder block {}", i + 1))?;
            heads.tgt.push(cache.masked.weights().to_vec());
            if let Some((fusion, _)) = &cache.fusion {
                heads.mem.push(fusion.weights().to_vec());
            }
            decoder.push(cache);
            dec = out;
        }

        let head_input = if config.variant.uses_decoder() {
            dec
        } else {
            enc
        };
        let predictions = head_input.matmul(&params.head).transpose();
        check_finite(&predictions, || "output head".into())?;
        let forecast = Forecast {
            predictions,
            attention: AttentionRecord::from_heads(heads),
        };
        let cache = ForwardCache {
            embedding,
            encoder,
            decoder,
            head_input,
        };
        Ok((forecast, cache))
    }

    /// Gradients of `Σ d_predictions ⊙ predictions` w.r.t. every parameter.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        cache: &ForwardCache<S>,
        d_predictions: &Matrix<S>,
    ) -> ParameterSet<S> {
        let config = &self.config;
        let mut grads = params.zeros_like();
        let d_head_out = d_predictions.transpose();
        grads.head = cache.head_input.t_matmul(&d_head_out);
        let d_head_input = d_head_out.matmul_t(&params.head);

        let d = config.d_model;
        let mut d_enc_out = Matrix::zeros(self.nodes, d);
        let mut d_stream = Matrix::zeros(self.nodes, d);

        if config.variant.uses_decoder() {
            let mut d_dec = d_head_input;
            for ((block, bcache), g) in params
                .decoder
                .iter()
                .zip(&cache.decoder)
                .zip(grads.decoder.iter_mut())
                .rev()
            {
                d_dec = decoder_block_backward(block, bcache, &d_dec, &mut d_enc_out, g);
            }
            d_stream.add_assign(&d_dec);
        } else {
            d_enc_out = d_head_input;
        }

        if config.variant.uses_encoder() {
            let mut d_enc = d_enc_out;
            for ((block, bcache), g) in params
                .encoder
                .iter()
                .zip(&cache.encoder)
                .zip(grads.encoder.iter_mut())
                .rev()
            {
                d_enc = encoder_block_backward(block, bcache, &d_enc, g);
            }
            d_stream.add_assign(&d_enc);
        }

        if let Some(p) = &mut grads.node_embedding {
            *p = d_stream.clone();
        }
        match (&params.embedding, &cache.embedding, &mut grads.embedding) {
            (Embedding::Lstm(w), EmbeddingCache::Lstm(c), Embedding::Lstm(g)) => {
                *g = temporal_embed_backward(w, c, &d_stream);
            }
            (Embedding::Flatten(_), EmbeddingCache::Flatten(history), Embedding::Flatten(g)) => {
                *g = history.t_matmul(&d_stream);
            }
            _ => unreachable!("cache built from the same parameter set"),
        }
        grads
    }
}

fn norm_forward<S: Scalar>(
    x: &Matrix<S>,
    sub: &Matrix<S>,
    norm: &NormParams<S>,
) -> Result<(Matrix<S>, LayerNormCache<S>)> {
    residual_layer_norm_cached(x, sub, &norm.gain, &norm.bias)
}

fn ffn_forward<S: Scalar>(
    x: &Matrix<S>,
    ffn: &FeedForwardParams<S>,
) -> Result<(Matrix<S>, FeedForwardCache<S>)> {
    feed_forward_cached(x, &ffn.w1, &ffn.w2)
}

fn encoder_block_forward<S: Scalar>(
    block: &EncoderBlock<S>,
    x: &Matrix<S>,
) -> Result<(Matrix<S>, EncoderCache<S>)> {
    let (att, attention) = multi_head_attention_cached(x, x, &block.attention, None)?;
    let (h1, norm_attention) = norm_forward(x, &att.output, &block.norm_attention)?;
    let (f, ffn) = ffn_forward(&h1, &block.ffn)?;
    let (h2, norm_ffn) = norm_forward(&h1, &f, &block.norm_ffn)?;
    Ok((
        h2,
        EncoderCache {
            attention,
            norm_attention,
            ffn,
            norm_ffn,
        },
    ))
}

fn decoder_block_forward<S: Scalar>(
    block: &DecoderBlock<S>,
    x: &Matrix<S>,
    memory: &Matrix<S>,
    mask: Option<&[bool]>,
) -> Result<(Matrix<S>, DecoderCache<S>)> {
    let (att, masked) = multi_head_attention_cached(x, x, &block.masked_attention, mask)?;
    let (mut h, norm_masked) = norm_forward(x, &att.output, &block.norm_masked)?;
    let fusion = match &block.fusion {
        Some(fp) => {
            let (fused, fcache) = multi_head_attention_cached(&h, memory, &fp.attention, None)?;
            let (h2, ncache) = norm_forward(&h, &fused.output, &fp.norm)?;
            h = h2;
            Some((fcache, ncache))
        }
        None => None,
    };
    let (f, ffn) = ffn_forward(&h, &block.ffn)?;
    let (out, norm_ffn) = norm_forward(&h, &f, &block.norm_ffn)?;
    Ok((
        out,
        DecoderCache {
            masked,
            norm_masked,
            fusion,
            ffn,
            norm_ffn,
        },
    ))
}

/// Backward through `LN(x + FFN(x))`; returns the gradient w.r.t. `x`.
fn ffn_sublayer_backward<S: Scalar>(
    ffn: &FeedForwardParams<S>,
    norm: &NormParams<S>,
    ffn_cache: &FeedForwardCache<S>,
    norm_cache: &LayerNormCache<S>,
    d_out: &Matrix<S>,
    g_ffn: &mut FeedForwardParams<S>,
    g_norm: &mut NormParams<S>,
) -> Matrix<S> {
    let ln = residual_layer_norm_backward(&norm.gain, norm_cache, d_out);
    g_norm.gain.add_assign(&ln.d_gain);
    g_norm.bias.add_assign(&ln.d_bias);
    let fg = feed_forward_backward(&ffn.w1, &ffn.w2, ffn_cache, &ln.d_input);
    g_ffn.w1.add_assign(&fg.d_w1);
    g_ffn.w2.add_assign(&fg.d_w2);
    ln.d_input.add(&fg.d_x)
}

fn encoder_block_backward<S: Scalar>(
    block: &EncoderBlock<S>,
    cache: &EncoderCache<S>,
    d_out: &Matrix<S>,
    g: &mut EncoderBlock<S>,
) -> Matrix<S> {
    let d_h1 = ffn_sublayer_backward(
        &block.ffn,
        &block.norm_ffn,
        &cache.ffn,
        &cache.norm_ffn,
        d_out,
        &mut g.ffn,
        &mut g.norm_ffn,
    );
    let ln = residual_layer_norm_backward(&block.norm_attention.gain, &cache.norm_attention, &d_h1);
    g.norm_attention.gain.add_assign(&ln.d_gain);
    g.norm_attention.bias.add_assign(&ln.d_bias);
    let att = multi_head_attention_backward(&block.attention, &cache.attention, &ln.d_input);
    accumulate_projections(&mut g.attention, &att.d_weights);
    let mut d_x = ln.d_input;
    d_x.add_assign(&att.d_x_q);
    d_x.add_assign(&att.d_x_kv);
    d_x
}

fn decoder_block_backward<S: Scalar>(
    block: &DecoderBlock<S>,
    cache: &DecoderCache<S>,
    d_out: &Matrix<S>,
    d_memory: &mut Matrix<S>,
    g: &mut DecoderBlock<S>,
) -> Matrix<S> {
    let mut d_h = ffn_sublayer_backward(
        &block.ffn,
        &block.norm_ffn,
        &cache.ffn,
        &cache.norm_ffn,
        d_out,
        &mut g.ffn,
        &mut g.norm_ffn,
    );
    if let (Some(fp), Some((fcache, ncache)), Some(gf)) =
        (&block.fusion, &cache.fusion, &mut g.fusion)
    {
        let ln = residual_layer_norm_backward(&fp.norm.gain, ncache, &d_h);
        gf.norm.gain.add_assign(&ln.d_gain);
        gf.norm.bias.add_assign(&ln.d_bias);
        let att = multi_head_attention_backward(&fp.attention, fcache, &ln.d_input);
        accumulate_projections(&mut gf.attention, &att.d_weights);
        d_memory.add_assign(&att.d_x_kv);
        d_h = ln.d_input.add(&att.d_x_q);
    }
    let ln = residual_layer_norm_backward(&block.norm_masked.gain, &cache.norm_masked, &d_h);
    g.norm_masked.gain.add_assign(&ln.d_gain);
    g.norm_masked.bias.add_assign(&ln.d_bias);
    let att = multi_head_attention_backward(&block.masked_attention, &cache.masked, &ln.d_input);
    accumulate_projections(&mut g.masked_attention, &att.d_weights);
    let mut d_x = ln.d_input;
    d_x.add_assign(&att.d_x_q);
    d_x.add_assign(&att.d_x_kv);
    d_x
}

fn accumulate_projections<S: Scalar>(
    acc: &mut crate::nn::ProjectionWeights<S>,
    g: &crate::nn::ProjectionWeights<S>,
) {
    for ((_, a), (_, b)) in acc.matrices_mut().into_iter().zip(g.matrices()) {
        a.add_assign(b);
    }
}
