//! Learnable parameters and their canonical ordering.

use rand::Rng;

use crate::model::config::ModelConfig;
use crate::nn::{LstmWeights, ProjectionWeights};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<S> {
    pub gain: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> NormParams<S> {
    pub fn new(d_model: usize) -> Self {
        NormParams {
            gain: Matrix::filled(1, d_model, S::one()),
            bias: Matrix::zeros(1, d_model),
        }
    }

    fn zeros(d_model: usize) -> Self {
        NormParams {
            gain: Matrix::zeros(1, d_model),
            bias: Matrix::zeros(1, d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<S> {
    pub w1: Matrix<S>,
    pub w2: Matrix<S>,
}

impl<S: Scalar> FeedForwardParams<S> {
    fn zeros(d_model: usize, d_ff: usize) -> Self {
        FeedForwardParams {
            w1: Matrix::zeros(d_model, d_ff),
            w2: Matrix::zeros(d_ff, d_model),
        }
    }

    fn random<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForwardParams {
            w1: Matrix::random_uniform(d_model, d_ff, (1.0 / d_model as f64).sqrt(), rng),
            w2: Matrix::random_uniform(d_ff, d_model, (1.0 / d_ff as f64).sqrt(), rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<S> {
    pub attention: ProjectionWeights<S>,
    pub norm_attention: NormParams<S>,
    pub ffn: FeedForwardParams<S>,
    pub norm_ffn: NormParams<S>,
}

/// Attention over the encoder output, used by decoder blocks of fusing variants.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<S> {
    pub attention: ProjectionWeights<S>,
    pub norm: NormParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<S> {
    pub masked_attention: ProjectionWeights<S>,
    pub norm_masked: NormParams<S>,
    pub fusion: Option<FusionParams<S>>,
    pub ffn: FeedForwardParams<S>,
    pub norm_ffn: NormParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Embedding<S> {
    Lstm(LstmWeights<S>),
    /// `m × d_model` projection of the flattened speed history.
    Flatten(Matrix<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    pub embedding: Embedding<S>,
    /// Learnable per-node embedding, `N × d_model`.
    pub node_embedding: Option<Matrix<S>>,
    pub encoder: Vec<EncoderBlock<S>>,
    pub decoder: Vec<DecoderBlock<S>>,
    /// `d_model × n`, shared by all nodes.
    pub head: Matrix<S>,
}

/// Fills every tensor of a parameter set; used to build zeros and random sets
/// through a single structural definition.
trait Filler<S> {
    fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix<S>;
    fn projections(&mut self, d_model: usize, heads: usize) -> ProjectionWeights<S>;
    fn lstm(&mut self, input: usize, hidden: usize) -> LstmWeights<S>;
    fn ffn(&mut self, d_model: usize, d_ff: usize) -> FeedForwardParams<S>;
    fn norm(&mut self, d_model: usize) -> NormParams<S>;
}

struct ZeroFill;

impl<S: Scalar> Filler<S> for ZeroFill {
    fn matrix(&mut self, rows: usize, cols: usize, _: usize) -> Matrix<S> {
        Matrix::zeros(rows, cols)
    }
    fn projections(&mut self, d_model: usize, heads: usize) -> ProjectionWeights<S> {
        ProjectionWeights::zeros(d_model, heads)
    }
    fn lstm(&mut self, input: usize, hidden: usize) -> LstmWeights<S> {
        LstmWeights::zeros(input, hidden)
    }
    fn ffn(&mut self, d_model: usize, d_ff: usize) -> FeedForwardParams<S> {
        FeedForwardParams::zeros(d_model, d_ff)
    }
    fn norm(&mut self, d_model: usize) -> NormParams<S> {
        NormParams::zeros(d_model)
    }
}

struct RandomFill<'a, R: ?Sized>(&'a mut R);

impl<S: Scalar, R: Rng + ?Sized> Filler<S> for RandomFill<'_, R> {
    fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix<S> {
        Matrix::random_uniform(rows, cols, (1.0 / fan_in as f64).sqrt(), self.0)
    }
    fn projections(&mut self, d_model: usize, heads: usize) -> ProjectionWeights<S> {
        ProjectionWeights::random(d_model, heads, self.0)
    }
    fn lstm(&mut self, input: usize, hidden: usize) -> LstmWeights<S> {
        LstmWeights::random(input, hidden, self.0)
    }
    fn ffn(&mut self, d_model: usize, d_ff: usize) -> FeedForwardParams<S> {
        FeedForwardParams::random(d_model, d_ff, self.0)
    }
    fn norm(&mut self, d_model: usize) -> NormParams<S> {
        NormParams::new(d_model)
    }
}

impl<S: Scalar> ParameterSet<S> {
    fn build(config: &ModelConfig, nodes: usize, fill: &mut impl Filler<S>) -> Self {
        let d = config.d_model;
        let v = config.variant;
        let embedding = if v.uses_lstm() {
            Embedding::Lstm(fill.lstm(config.input_channels, d))
        } else {
            Embedding::Flatten(fill.matrix(config.window, d, config.window))
        };
        let node_embedding = v.uses_positional_terms().then(|| fill.matrix(nodes, d, d));
        let encoder = (0..config.active_encoder_blocks())
            .map(|_| EncoderBlock {
                attention: fill.projections(d, config.heads),
                norm_attention: fill.norm(d),
                ffn: fill.ffn(d, config.d_ff),
                norm_ffn: fill.norm(d),
            })
            .collect();
        let decoder = (0..config.active_decoder_blocks())
            .map(|_| {
                let masked_attention = fill.projections(d, config.heads);
                let norm_masked = fill.norm(d);
                let fusion = v.decoder_fuses_encoder().then(|| FusionParams {
                    attention: fill.projections(d, config.heads),
                    norm: fill.norm(d),
                });
                DecoderBlock {
                    masked_attention,
                    norm_masked,
                    fusion,
                    ffn: fill.ffn(d, config.d_ff),
                    norm_ffn: fill.norm(d),
                }
            })
            .collect();
        let head = fill.matrix(d, config.horizon, d);
        ParameterSet {
            embedding,
            node_embedding,
            encoder,
            decoder,
            head,
        }
    }

    /// Same structure as an initialized set, every entry zero (gradient accumulator).
    pub fn zeros(config: &ModelConfig, nodes: usize) -> Self {
        Self::build(config, nodes, &mut ZeroFill)
    }

    /// Uniform ±√(1/fan_in) weights, unit gains, zero norm biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, nodes: usize, rng: &mut R) -> Self {
        Self::build(config, nodes, &mut RandomFill(rng))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.fill(S::zero());
        }
        z
    }

    /// Every tensor in canonical (checkpoint) order with a dotted name.
    pub fn tensors(&self) -> Vec<(String, &Matrix<S>)> {
        let mut out: Vec<(String, &Matrix<S>)> = Vec::new();
        match &self.embedding {
            Embedding::Lstm(w) => out.extend(
                w.matrices()
                    .into_iter()
                    .map(|(n, m)| (format!("embedding.lstm.{n}"), m)),
            ),
            Embedding::Flatten(m) => out.push(("embedding.flatten".into(), m)),
        }
        if let Some(p) = &self.node_embedding {
            out.push(("node_embedding".into(), p));
        }
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            push_projections(&mut out, &format!("{p}.attention"), &b.attention);
            push_norm(&mut out, &format!("{p}.norm_attention"), &b.norm_attention);
            push_ffn(&mut out, &format!("{p}.ffn"), &b.ffn);
            push_norm(&mut out, &format!("{p}.norm_ffn"), &b.norm_ffn);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            push_projections(
                &mut out,
                &format!("{p}.masked_attention"),
                &b.masked_attention,
            );
            push_norm(&mut out, &format!("{p}.norm_masked"), &b.norm_masked);
            if let Some(f) = &b.fusion {
                push_projections(&mut out, &format!("{p}.fusion.attention"), &f.attention);
                push_norm(&mut out, &format!("{p}.fusion.norm"), &f.norm);
            }
            push_ffn(&mut out, &format!("{p}.ffn"), &b.ffn);
            push_norm(&mut out, &format!("{p}.norm_ffn"), &b.norm_ffn);
        }
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable view in the same order as [`ParameterSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<S>)> {
        let mut out: Vec<(String, &mut Matrix<S>)> = Vec::new();
        match &mut self.embedding {
            Embedding::Lstm(w) => out.extend(
                w.matrices_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("embedding.lstm.{n}"), m)),
            ),
            Embedding::Flatten(m) => out.push(("embedding.flatten".into(), m)),
        }
        if let Some(p) = &mut self.node_embedding {
            out.push(("node_embedding".into(), p));
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            push_projections_mut(&mut out, &format!("{p}.attention"), &mut b.attention);
            push_norm_mut(
                &mut out,
                &format!("{p}.norm_attention"),
                &mut b.norm_attention,
            );
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut b.ffn);
            push_norm_mut(&mut out, &format!("{p}.norm_ffn"), &mut b.norm_ffn);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            push_projections_mut(
                &mut out,
                &format!("{p}.masked_attention"),
                &mut b.masked_attention,
            );
            push_norm_mut(&mut out, &format!("{p}.norm_masked"), &mut b.norm_masked);
            if let Some(f) = &mut b.fusion {
                push_projections_mut(&mut out, &format!("{p}.fusion.attention"), &mut f.attention);
                push_norm_mut(&mut out, &format!("{p}.fusion.norm"), &mut f.norm);
            }
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut b.ffn);
            push_norm_mut(&mut out, &format!("{p}.norm_ffn"), &mut b.norm_ffn);
        }
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// All entries, canonical order.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    /// Overwrites all entries from a canonical-order slice of length [`ParameterSet::count`].
    pub fn assign(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.count());
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let len = m.len();
            m.as_mut_slice()
                .copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale_assign(&mut self, k: S) {
        for (_, m) in self.tensors_mut() {
            m.scale_assign(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

fn push_projections<'a, S>(
    out: &mut Vec<(String, &'a Matrix<S>)>,
    prefix: &str,
    w: &'a ProjectionWeights<S>,
) where
    S: Scalar,
{
    out.extend(
        w.matrices()
            .into_iter()
            .map(|(n, m)| (format!("{prefix}.{n}"), m)),
    );
}

fn push_norm<'a, S>(out: &mut Vec<(String, &'a Matrix<S>)>, prefix: &str, n: &'a NormParams<S>) {
    out.push((format!("{prefix}.gain"), &n.gain));
    out.push((format!("{prefix}.bias"), &n.bias));
}

fn push_ffn<'a, S>(
    out: &mut Vec<(String, &'a Matrix<S>)>,
    prefix: &str,
    f: &'a FeedForwardParams<S>,
) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.w2"), &f.w2));
}

fn push_projections_mut<'a, S>(
    out: &mut Vec<(String, &'a mut Matrix<S>)>,
    prefix: &str,
    w: &'a mut ProjectionWeights<S>,
) where
    S: Scalar,
{
    out.extend(
        w.matrices_mut()
            .into_iter()
            .map(|(n, m)| (format!("{prefix}.{n}"), m)),
    );
}

fn push_norm_mut<'a, S>(
    out: &mut Vec<(String, &'a mut Matrix<S>)>,
    prefix: &str,
    n: &'a mut NormParams<S>,
) {
    out.push((format!("{prefix}.gain"), &mut n.gain));
    out.push((format!("{prefix}.bias"), &mut n.bias));
}

fn push_ffn_mut<'a, S>(
    out: &mut Vec<(String, &'a mut Matrix<S>)>,
    prefix: &str,
    f: &'a mut FeedForwardParams<S>,
) {
    out.push((format!("{prefix}.w1"), &mut f.w1));
    out.push((format!("{prefix}.w2"), &mut f.w2));
}

/// Whether a named tensor is exempt from weight decay (node embedding, norm gains/biases).
pub fn decay_exempt(name: &str) -> bool {
    name == "node_embedding" || name.ends_with(".gain") || name.ends_with(".bias")
}

/// Closed-form number of learnable scalars for `config` on `nodes` sensors.
pub fn parameter_count(config: &ModelConfig, nodes: usize) -> usize {
    let d = config.d_model;
    let v = config.variant;
    let projections = 4 * d * d;
    let ffn = 2 * d * config.d_ff;
    let norm = 2 * d;
    let embedding = if v.uses_lstm() {
        4 * ((d + config.input_channels) * d + d)
    } else {
        config.window * d
    };
    let node_embedding = if v.uses_positional_terms() {
        nodes * d
    } else {
        0
    };
    let encoder_block = projections + ffn + 2 * norm;
    let decoder_block = if v.decoder_fuses_encoder() {
        2 * projections + ffn + 3 * norm
    } else {
        projections + ffn + 2 * norm
    };
    embedding
        + node_embedding
        + config.active_encoder_blocks() * encoder_block
        + config.active_decoder_blocks() * decoder_block
        + d * config.horizon
}
