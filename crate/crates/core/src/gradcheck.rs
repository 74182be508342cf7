//! Central finite-difference checks of the hand-written backward passes.
//!
//! Every check uses the scalar loss `Σ R ⊙ f(θ)` for a fixed random
//! cotangent `R`, so the analytic gradient is exactly what the backward pass
//! receives as `d_out = R`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::SensorGraph;
use crate::model::{build_variant, ModelConfig, ParameterSet, Variant};
use crate::nn::attention::{
    multi_head_attention_backward, multi_head_attention_cached, scaled_dot_product_attention,
    scaled_dot_product_attention_backward, ProjectionWeights,
};
use crate::nn::layers::{
    feed_forward_backward, feed_forward_cached, residual_layer_norm_backward,
    residual_layer_norm_cached,
};
use crate::nn::lstm::{lstm_step_backward, lstm_step_cached, LstmWeights};
use crate::tensor::{Matrix, Tensor3};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Block name and flat index of the worst relative error.
    pub worst: (String, usize),
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} entries, max rel {:.3e}, max abs {:.3e} at {}[{}]",
            self.name,
            self.entries,
            self.max_rel_error,
            self.max_abs_error,
            self.worst.0,
            self.worst.1
        )
    }
}

/// Compares `analytic` with central differences of `loss` around `blocks`.
pub fn compare_blocks(
    name: &str,
    blocks: &[(String, Matrix<f64>)],
    analytic: &[Matrix<f64>],
    loss: impl Fn(&[Matrix<f64>]) -> Result<f64>,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    assert_eq!(
        blocks.len(),
        analytic.len(),
        "one analytic gradient per block"
    );
    let mut values: Vec<Matrix<f64>> = blocks.iter().map(|(_, m)| m.clone()).collect();
    let mut report = GradCheckReport {
        name: name.to_string(),
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (String::new(), 0),
    };
    for b in 0..blocks.len() {
        assert_eq!(
            analytic[b].shape(),
            values[b].shape(),
            "gradient shape of {}",
            blocks[b].0
        );
        for i in 0..values[b].len() {
            let original = values[b].as_slice()[i];
            values[b].as_mut_slice()[i] = original + step;
            let up = loss(&values)?;
            values[b].as_mut_slice()[i] = original - step;
            let down = loss(&values)?;
            values[b].as_mut_slice()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[b].as_slice()[i];
            let rel = relative_error(a, numeric, floor);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.0.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = (blocks[b].0.clone(), i);
            }
        }
    }
    Ok(report)
}

fn pair(r: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    r.hadamard(y).sum()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::random_uniform(rows, cols, 1.0, rng)
}

/// The operations with a hand-written backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    FeedForward,
    LayerNorm,
    Attention,
    MultiHeadAttention,
    LstmStep,
    /// Full variant, N = 3, d_model = 4, 2 heads, one encoder and one decoder block.
    TinyModel,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 6] = [
        CheckedOp::FeedForward,
        CheckedOp::LayerNorm,
        CheckedOp::Attention,
        CheckedOp::MultiHeadAttention,
        CheckedOp::LstmStep,
        CheckedOp::TinyModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::FeedForward => "feed_forward",
            CheckedOp::LayerNorm => "residual_layer_norm",
            CheckedOp::Attention => "scaled_dot_product_attention",
            CheckedOp::MultiHeadAttention => "multi_head_attention",
            CheckedOp::LstmStep => "lstm_step",
            CheckedOp::TinyModel => "tiny_model",
        }
    }

    pub fn run(self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            CheckedOp::FeedForward => check_feed_forward(&mut rng),
            CheckedOp::LayerNorm => check_layer_norm(&mut rng),
            CheckedOp::Attention => check_attention(&mut rng),
            CheckedOp::MultiHeadAttention => check_multi_head(&mut rng),
            CheckedOp::LstmStep => check_lstm_step(&mut rng),
            CheckedOp::TinyModel => check_tiny_model(&mut rng),
        }
    }
}

fn named(blocks: Vec<(&str, Matrix<f64>)>) -> Vec<(String, Matrix<f64>)> {
    blocks
        .into_iter()
        .map(|(n, m)| (n.to_string(), m))
        .collect()
}

fn check_feed_forward(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (x, w1, w2) = (random(4, 5, rng), random(5, 7, rng), random(7, 5, rng));
    let r = random(4, 5, rng);
    let (_, cache) = feed_forward_cached(&x, &w1, &w2)?;
    let g = feed_forward_backward(&w1, &w2, &cache, &r);
    let blocks = named(vec![("x", x), ("w1", w1), ("w2", w2)]);
    compare_blocks(
        CheckedOp::FeedForward.name(),
        &blocks,
        &[g.d_x, g.d_w1, g.d_w2],
        |v| Ok(pair(&r, &feed_forward_cached(&v[0], &v[1], &v[2])?.0)),
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (x, sub) = (random(3, 6, rng), random(3, 6, rng));
    let (gain, bias) = (random(1, 6, rng), random(1, 6, rng));
    let r = random(3, 6, rng);
    let (_, cache) = residual_layer_norm_cached(&x, &sub, &gain, &bias)?;
    let g = residual_layer_norm_backward(&gain, &cache, &r);
    let blocks = named(vec![
        ("x", x),
        ("sublayer", sub),
        ("gain", gain),
        ("bias", bias),
    ]);
    compare_blocks(
        CheckedOp::LayerNorm.name(),
        &blocks,
        &[g.d_input.clone(), g.d_input, g.d_gain, g.d_bias],
        |v| {
            Ok(pair(
                &r,
                &residual_layer_norm_cached(&v[0], &v[1], &v[2], &v[3])?.0,
            ))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}

fn check_attention(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = 4;
    let (q, k, v) = (random(n, 3, rng), random(n, 3, rng), random(n, 3, rng));
    // Path-graph style mask with the diagonal kept.
    let mask: Vec<bool> = (0..n * n).map(|i| (i / n).abs_diff(i % n) <= 1).collect();
    let r = random(n, 3, rng);
    let out = scaled_dot_product_attention(&q, &k, &v, 3, Some(&mask))?;
    let g = scaled_dot_product_attention_backward(&q, &k, &v, &out.weights[0], 3, &r);
    let blocks = named(vec![("q", q), ("k", k), ("v", v)]);
    compare_blocks(
        CheckedOp::Attention.name(),
        &blocks,
        &[g.d_q, g.d_k, g.d_v],
        |b| {
            Ok(pair(
                &r,
                &scaled_dot_product_attention(&b[0], &b[1], &b[2], 3, Some(&mask))?.output,
            ))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}

fn check_multi_head(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (d, heads) = (4, 2);
    let (x_q, x_kv) = (random(3, d, rng), random(5, d, rng));
    let w = ProjectionWeights::random(d, heads, rng);
    let r = random(3, d, rng);
    let (_, cache) = multi_head_attention_cached(&x_q, &x_kv, &w, None)?;
    let g = multi_head_attention_backward(&w, &cache, &r);
    let blocks = named(vec![
        ("x_q", x_q),
        ("x_kv", x_kv),
        ("w_q", w.w_q.clone()),
        ("w_k", w.w_k.clone()),
        ("w_v", w.w_v.clone()),
        ("w_o", w.w_o.clone()),
    ]);
    let analytic = [
        g.d_x_q,
        g.d_x_kv,
        g.d_weights.w_q,
        g.d_weights.w_k,
        g.d_weights.w_v,
        g.d_weights.w_o,
    ];
    compare_blocks(
        CheckedOp::MultiHeadAttention.name(),
        &blocks,
        &analytic,
        |b| {
            let w = ProjectionWeights {
                heads,
                w_q: b[2].clone(),
                w_k: b[3].clone(),
                w_v: b[4].clone(),
                w_o: b[5].clone(),
            };
            Ok(pair(
                &r,
                &multi_head_attention_cached(&b[0], &b[1], &w, None)?
                    .0
                    .output,
            ))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}

fn check_lstm_step(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (rows, input, hidden) = (3, 2, 4);
    let w = LstmWeights::random(input, hidden, rng);
    let (x, h, c) = (
        random(rows, input, rng),
        random(rows, hidden, rng),
        random(rows, hidden, rng),
    );
    let (r_h, r_c) = (random(rows, hidden, rng), random(rows, hidden, rng));
    let (_, _, cache) = lstm_step_cached(&x, &h, &c, &w)?;
    let mut d_w = LstmWeights::zeros(input, hidden);
    let g = lstm_step_backward(&w, &cache, &r_h, &r_c, &mut d_w);
    let mut blocks = named(vec![("x", x), ("h_prev", h), ("c_prev", c)]);
    blocks.extend(
        w.matrices()
            .into_iter()
            .map(|(n, m)| (n.to_string(), m.clone())),
    );
    let mut analytic = vec![g.d_x, g.d_h_prev, g.d_c_prev];
    analytic.extend(d_w.matrices().into_iter().map(|(_, m)| m.clone()));
    compare_blocks(
        CheckedOp::LstmStep.name(),
        &blocks,
        &analytic,
        |b| {
            let mut w = LstmWeights::zeros(input, hidden);
            for ((_, m), v) in w.matrices_mut().into_iter().zip(&b[3..]) {
                *m = v.clone();
            }
            let (h, c, _) = lstm_step_cached(&b[0], &b[1], &b[2], &w)?;
            Ok(pair(&r_h, &h) + pair(&r_c, &c))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}

/// Configuration of the tiny model used by [`CheckedOp::TinyModel`].
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        d_ff: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        horizon: 3,
        window: 4,
        mask_hops: 1,
        input_channels: 3,
        variant: Variant::Full,
        positional_encoding: true,
    }
}

fn check_tiny_model(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let config = tiny_config();
    let nodes = 3;
    let graph = SensorGraph::path(vec!["a".into(), "b".into(), "c".into()])?;
    let pipeline = build_variant(&config, nodes, Some(&graph))?;
    let params: ParameterSet<f64> = pipeline.init_params(rng);
    let window = Tensor3::from_fn(config.window, nodes, config.input_channels, |_, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let r = random(config.horizon, nodes, rng);
    let (_, cache) = pipeline.forward_cached(&params, &window)?;
    let grads = pipeline.backward(&params, &cache, &r);
    let blocks: Vec<(String, Matrix<f64>)> = params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    let analytic: Vec<Matrix<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, m)| m.clone())
        .collect();
    compare_blocks(
        CheckedOp::TinyModel.name(),
        &blocks,
        &analytic,
        |b| {
            let mut p = params.clone();
            for ((_, m), v) in p.tensors_mut().into_iter().zip(b) {
                *m = v.clone();
            }
            Ok(pair(&r, &pipeline.forward(&p, &window)?.predictions))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}
