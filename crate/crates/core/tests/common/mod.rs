//! Independent reference implementations used by the integration tests.
//! Everything here works on nested `Vec`s with plain loops.

#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use traffic_transformer::model::params::{DecoderBlock, Embedding, EncoderBlock, NormParams};
use traffic_transformer::nn::{LstmWeights, ProjectionWeights};
use traffic_transformer::{Matrix, ModelConfig, ParameterSet, SensorGraph, Tensor3};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

// ---- metrics ----

pub fn naive_mae(a: &Rows, p: &Rows) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - p[i][j]).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn naive_rmse(a: &Rows, p: &Rows) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - p[i][j]) * (a[i][j] - p[i][j]);
            n += 1.0;
        }
    }
    (s / n).sqrt()
}

pub fn naive_mape(a: &Rows, p: &Rows, floor: f64) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            if a[i][j].abs() > floor {
                s += (a[i][j] - p[i][j]).abs() / a[i][j].abs();
                n += 1.0;
            }
        }
    }
    100.0 * s / n
}

// ---- graphs ----

/// Undirected random graph with edge probability `p`.
pub fn random_graph<R: Rng>(n: usize, p: f64, rng: &mut R) -> SensorGraph {
    let mut a = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    SensorGraph::with_default_ids(a).unwrap()
}

/// `reach[i][j]`: `j` is within `hops` edges of `i` (`i` itself included).
pub fn bfs_reach(graph: &SensorGraph, hops: usize) -> Vec<Vec<bool>> {
    let n = graph.node_count();
    let a = graph.adjacency();
    let mut out = vec![vec![false; n]; n];
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if a[(u, v)] > 0.0 && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for v in 0..n {
            out[s][v] = dist[v] <= hops;
        }
    }
    out
}

// ---- positional encoding ----

pub fn pe_oracle(pos: usize, dim: usize, d_model: usize) -> f64 {
    let i = dim / 2;
    let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

// ---- straight-line forward ----

fn matmul(a: &Rows, b: &Rows) -> Rows {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm_node(window: &Tensor3<f64>, node: usize, w: &LstmWeights<f64>) -> Vec<f64> {
    let d = w.b_f.cols();
    let (wf, wi, wc, wo) = (rows(&w.w_f), rows(&w.w_i), rows(&w.w_c), rows(&w.w_o));
    let (bf, bi, bc, bo) = (w.b_f.row(0), w.b_i.row(0), w.b_c.row(0), w.b_o.row(0));
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    for t in 0..window.steps() {
        let mut z = h.clone();
        for ch in 0..window.channels() {
            z.push(window.get(t, node, ch));
        }
        let gate = |wm: &Rows, b: &[f64], j: usize| {
            b[j] + (0..z.len()).map(|k| z[k] * wm[k][j]).sum::<f64>()
        };
        let mut h_next = vec![0.0; d];
        for j in 0..d {
            let f = sigmoid(gate(&wf, bf, j));
            let i = sigmoid(gate(&wi, bi, j));
            let g = gate(&wc, bc, j).tanh();
            let o = sigmoid(gate(&wo, bo, j));
            c[j] = f * c[j] + i * g;
            h_next[j] = o * c[j].tanh();
        }
        h = h_next;
    }
    h
}

fn attention(
    xq: &Rows,
    xkv: &Rows,
    w: &ProjectionWeights<f64>,
    mask: Option<&Vec<Vec<bool>>>,
) -> Rows {
    let d = xq[0].len();
    let dk = d / w.heads;
    let q = matmul(xq, &rows(&w.w_q));
    let k = matmul(xkv, &rows(&w.w_k));
    let v = matmul(xkv, &rows(&w.w_v));
    let mut concat = vec![vec![0.0; d]; xq.len()];
    for h in 0..w.heads {
        let off = h * dk;
        for i in 0..xq.len() {
            let mut logits = vec![f64::NEG_INFINITY; xkv.len()];
            for j in 0..xkv.len() {
                if mask.is_none_or(|m| m[i][j]) {
                    logits[j] = (0..dk).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>()
                        / (dk as f64).sqrt();
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i][off + c] = (0..xkv.len()).map(|j| e[j] / total * v[j][off + c]).sum();
            }
        }
    }
    matmul(&concat, &rows(&w.w_o))
}

fn layer_norm(x: &Rows, norm: &NormParams<f64>) -> Rows {
    let (g, b) = (norm.gain.row(0), norm.bias.row(0));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[c] + b[c])
                .collect()
        })
        .collect()
}

fn ffn(x: &Rows, w1: &Matrix<f64>, w2: &Matrix<f64>) -> Rows {
    let hidden: Rows = matmul(x, &rows(w1))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    matmul(&hidden, &rows(w2))
}

fn encoder_block(x: &Rows, b: &EncoderBlock<f64>) -> Rows {
    let y = layer_norm(
        &add(x, &attention(x, x, &b.attention, None)),
        &b.norm_attention,
    );
    layer_norm(&add(&y, &ffn(&y, &b.ffn.w1, &b.ffn.w2)), &b.norm_ffn)
}

fn decoder_block(
    x: &Rows,
    enc: &Rows,
    b: &DecoderBlock<f64>,
    mask: Option<&Vec<Vec<bool>>>,
) -> Rows {
    let mut h = layer_norm(
        &add(x, &attention(x, x, &b.masked_attention, mask)),
        &b.norm_masked,
    );
    if let Some(f) = &b.fusion {
        h = layer_norm(&add(&h, &attention(&h, enc, &f.attention, None)), &f.norm);
    }
    layer_norm(&add(&h, &ffn(&h, &b.ffn.w1, &b.ffn.w2)), &b.norm_ffn)
}

/// Predictions (`n × N`, normalized space) recomputed from scratch.
pub fn straight_line_forward(
    config: &ModelConfig,
    params: &ParameterSet<f64>,
    window: &Tensor3<f64>,
    graph: Option<&SensorGraph>,
) -> Rows {
    let nodes = window.nodes();
    let d = config.d_model;
    let mut stream: Rows = match &params.embedding {
        Embedding::Lstm(w) => (0..nodes).map(|n| lstm_node(window, n, w)).collect(),
        Embedding::Flatten(w) => {
            let history: Rows = (0..nodes)
                .map(|n| (0..window.steps()).map(|t| window.get(t, n, 0)).collect())
                .collect();
            matmul(&history, &rows(w))
        }
    };
    if config.variant.uses_positional_terms() && config.positional_encoding {
        for (n, row) in stream.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += pe_oracle(n, c, d);
            }
        }
    }
    if let Some(p) = &params.node_embedding {
        stream = add(&stream, &rows(p));
    }
    let mask = graph.map(|g| bfs_reach(g, config.mask_hops));
    let mut enc = stream.clone();
    for b in &params.encoder {
        enc = encoder_block(&enc, b);
    }
    let mut dec = stream;
    for b in &params.decoder {
        dec = decoder_block(&dec, &enc, b, mask.as_ref());
    }
    let last = if config.variant.uses_decoder() {
        dec
    } else {
        enc
    };
    let out = matmul(&last, &rows(&params.head));
    (0..config.horizon)
        .map(|s| (0..nodes).map(|n| out[n][s]).collect())
        .collect()
}
