//! LSTM cell and the node-wise temporal embedding built on it.
//!
//! Rows are independent sequences (one per sensor node); all rows share the
//! same weights. Gate inputs are the concatenation `[h_{t-1} | x_t]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<S> {
    /// `(d_hidden + C) × d_hidden`
    pub w_f: Matrix<S>,
    pub w_i: Matrix<S>,
    pub w_c: Matrix<S>,
    pub w_o: Matrix<S>,
    /// `1 × d_hidden`
    pub b_f: Matrix<S>,
    pub b_i: Matrix<S>,
    pub b_c: Matrix<S>,
    pub b_o: Matrix<S>,
}

impl<S: Scalar> LstmWeights<S> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Matrix::zeros(hidden + input, hidden);
        let b = || Matrix::zeros(1, hidden);
        LstmWeights {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    /// Uniform in ±√(1/fan_in), biases included.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = (1.0 / (hidden + input) as f64).sqrt();
        let mut w = Self::zeros(input, hidden);
        for (_, m) in w.matrices_mut() {
            *m = Matrix::random_uniform(m.rows(), m.cols(), bound, rng);
        }
        w
    }

    pub fn hidden(&self) -> usize {
        self.w_f.cols()
    }

    pub fn input(&self) -> usize {
        self.w_f.rows() - self.hidden()
    }

    pub fn matrices(&self) -> [(&'static str, &Matrix<S>); 8] {
        [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut Matrix<S>); 8] {
        [
            ("w_f", &mut self.w_f),
            ("w_i", &mut self.w_i),
            ("w_c", &mut self.w_c),
            ("w_o", &mut self.w_o),
            ("b_f", &mut self.b_f),
            ("b_i", &mut self.b_i),
            ("b_c", &mut self.b_c),
            ("b_o", &mut self.b_o),
        ]
    }

    fn validate(&self) -> Result<()> {
        let (rows, hidden) = self.w_f.shape();
        for (name, m) in self.matrices() {
            let expected = if name.starts_with('b') {
                (1, hidden)
            } else {
                (rows, hidden)
            };
            if m.shape() != expected {
                return Err(Error::Shape(format!(
                    "LSTM {name} is {:?}, expected {expected:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LstmStepCache<S> {
    concat: Matrix<S>,
    forget: Matrix<S>,
    input: Matrix<S>,
    candidate: Matrix<S>,
    output: Matrix<S>,
    cell_prev: Matrix<S>,
    cell_tanh: Matrix<S>,
}

/// One step for every row: returns `(h_t, C_t)`.
pub fn lstm_step<S: Scalar>(
    x_t: &Matrix<S>,
    h_prev: &Matrix<S>,
    c_prev: &Matrix<S>,
    w: &LstmWeights<S>,
) -> Result<(Matrix<S>, Matrix<S>)> {
    lstm_step_cached(x_t, h_prev, c_prev, w).map(|(h, c, _)| (h, c))
}

pub fn lstm_step_cached<S: Scalar>(
    x_t: &Matrix<S>,
    h_prev: &Matrix<S>,
    c_prev: &Matrix<S>,
    w: &LstmWeights<S>,
) -> Result<(Matrix<S>, Matrix<S>, LstmStepCache<S>)> {
    w.validate()?;
    let hidden = w.hidden();
    let rows = x_t.rows();
    if x_t.cols() != w.input()
        || h_prev.shape() != (rows, hidden)
        || c_prev.shape() != (rows, hidden)
    {
        return Err(Error::Shape(format!(
            "LSTM step with x {:?}, h {:?}, C {:?} for input {} hidden {hidden}",
            x_t.shape(),
            h_prev.shape(),
            c_prev.shape(),
            w.input()
        )));
    }
    let concat = h_prev.hcat(x_t);
    let gate = |wm: &Matrix<S>, b: &Matrix<S>| concat.matmul(wm).add_row_broadcast(b);
    let forget = gate(&w.w_f, &w.b_f).map(sigmoid);
    let input = gate(&w.w_i, &w.b_i).map(sigmoid);
    let candidate = gate(&w.w_c, &w.b_c).map(S::tanh);
    let output = gate(&w.w_o, &w.b_o).map(sigmoid);
    let cell = forget.hadamard(c_prev).add(&input.hadamard(&candidate));
    let cell_tanh = cell.map(S::tanh);
    let h = output.hadamard(&cell_tanh);
    let cache = LstmStepCache {
        concat,
        forget,
        input,
        candidate,
        output,
        cell_prev: c_prev.clone(),
        cell_tanh,
    };
    Ok((h, cell, cache))
}

pub struct LstmStepGrads<S> {
    pub d_x: Matrix<S>,
    pub d_h_prev: Matrix<S>,
    pub d_c_prev: Matrix<S>,
}

/// Backward through one step; weight gradients are accumulated into `d_w`.
pub fn lstm_step_backward<S: Scalar>(
    w: &LstmWeights<S>,
    cache: &LstmStepCache<S>,
    d_h: &Matrix<S>,
    d_c: &Matrix<S>,
    d_w: &mut LstmWeights<S>,
) -> LstmStepGrads<S> {
    let one = S::one();
    let d_out_gate = d_h.hadamard(&cache.cell_tanh);
    let d_cell = Matrix::from_fn(d_h.rows(), d_h.cols(), |r, c| {
        let t = cache.cell_tanh[(r, c)];
        d_c[(r, c)] + d_h[(r, c)] * cache.output[(r, c)] * (one - t * t)
    });
    let sig_grad = |d: &Matrix<S>, s: &Matrix<S>| d.zip_map(s, |g, v| g * v * (one - v));
    let a_f = sig_grad(&d_cell.hadamard(&cache.cell_prev), &cache.forget);
    let a_i = sig_grad(&d_cell.hadamard(&cache.candidate), &cache.input);
    let a_c = d_cell
        .hadamard(&cache.input)
        .zip_map(&cache.candidate, |g, v| g * (one - v * v));
    let a_o = sig_grad(&d_out_gate, &cache.output);

    let mut d_concat = Matrix::zeros(cache.concat.rows(), cache.concat.cols());
    for (a, wm, dwm, db) in [
        (&a_f, &w.w_f, &mut d_w.w_f, &mut d_w.b_f),
        (&a_i, &w.w_i, &mut d_w.w_i, &mut d_w.b_i),
        (&a_c, &w.w_c, &mut d_w.w_c, &mut d_w.b_c),
        (&a_o, &w.w_o, &mut d_w.w_o, &mut d_w.b_o),
    ] {
        dwm.add_assign(&cache.concat.t_matmul(a));
        db.add_assign(&a.column_sums());
        d_concat.add_assign(&a.matmul_t(wm));
    }
    let hidden = w.hidden();
    LstmStepGrads {
        d_h_prev: d_concat.columns(0, hidden),
        d_x: d_concat.columns(hidden, w.input()),
        d_c_prev: d_cell.hadamard(&cache.forget),
    }
}

#[derive(Debug, Clone)]
pub struct TemporalCache<S> {
    steps: Vec<LstmStepCache<S>>,
}

/// Runs the shared LSTM over each node's `m` timesteps from a zero state and
/// returns the final hidden states as an `N × d_hidden` matrix.
pub fn temporal_embed<S: Scalar>(window: &Tensor3<S>, w: &LstmWeights<S>) -> Result<Matrix<S>> {
    temporal_embed_cached(window, w).map(|(h, _)| h)
}

pub fn temporal_embed_cached<S: Scalar>(
    window: &Tensor3<S>,
    w: &LstmWeights<S>,
) -> Result<(Matrix<S>, TemporalCache<S>)> {
    if window.steps() == 0 {
        return Err(Error::Data(
            "temporal embedding needs a non-empty window".into(),
        ));
    }
    let nodes = window.nodes();
    let mut h = Matrix::zeros(nodes, w.hidden());
    let mut c = Matrix::zeros(nodes, w.hidden());
    let mut steps = Vec::with_capacity(window.steps());
    for t in 0..window.steps() {
        let (h_next, c_next, cache) = lstm_step_cached(&window.step_matrix(t), &h, &c, w)?;
        h = h_next;
        c = c_next;
        steps.push(cache);
    }
    Ok((h, TemporalCache { steps }))
}

/// Backpropagation through time; returns weight gradients.
pub fn temporal_embed_backward<S: Scalar>(
    w: &LstmWeights<S>,
    cache: &TemporalCache<S>,
    d_out: &Matrix<S>,
) -> LstmWeights<S> {
    let mut d_w = LstmWeights::zeros(w.input(), w.hidden());
    let mut d_h = d_out.clone();
    let mut d_c = Matrix::zeros(d_out.rows(), d_out.cols());
    for step in cache.steps.iter().rev() {
        let g = lstm_step_backward(w, step, &d_h, &d_c, &mut d_w);
        d_h = g.d_h_prev;
        d_c = g.d_c_prev;
    }
    d_w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_closed_form() {
        let w = LstmWeights::<f64>::zeros(2, 3);
        let x = Matrix::from_rows(&[vec![0.7, -1.2]]).unwrap();
        let c_prev = Matrix::from_rows(&[vec![1.0, -2.0, 0.4]]).unwrap();
        let (h, c) = lstm_step(&x, &Matrix::zeros(1, 3), &c_prev, &w).unwrap();
        for k in 0..3 {
            let expect_c = 0.5 * c_prev[(0, k)];
            assert!((c[(0, k)] - expect_c).abs() < 1e-15);
            assert!((h[(0, k)] - 0.5 * expect_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_state_depends_only_on_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = LstmWeights::<f64>::random(2, 3, &mut rng);
        let (h, c) = lstm_step(
            &Matrix::zeros(1, 2),
            &Matrix::zeros(1, 3),
            &Matrix::zeros(1, 3),
            &w,
        )
        .unwrap();
        for k in 0..3 {
            let expect_c = sig(w.b_i[(0, k)]) * w.b_c[(0, k)].tanh();
            assert!((c[(0, k)] - expect_c).abs() < 1e-15);
            assert!((h[(0, k)] - sig(w.b_o[(0, k)]) * expect_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_window_equals_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = LstmWeights::<f64>::random(3, 4, &mut rng);
        let window = Tensor3::from_fn(1, 5, 3, |_, n, c| (n as f64 - 2.0) * 0.3 + c as f64 * 0.1);
        let emb = temporal_embed(&window, &w).unwrap();
        let (h, _) = lstm_step(
            &window.step_matrix(0),
            &Matrix::zeros(5, 4),
            &Matrix::zeros(5, 4),
            &w,
        )
        .unwrap();
        assert_eq!(emb, h);
        assert_eq!(emb.shape(), (5, 4));
    }

    #[test]
    fn node_permutation_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = LstmWeights::<f64>::random(2, 4, &mut rng);
        let window = Tensor3::from_fn(6, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let a = temporal_embed(&window.permute_nodes(&perm), &w).unwrap();
        let b = temporal_embed(&window, &w).unwrap().permute_rows(&perm);
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn empty_window_rejected() {
        let w = LstmWeights::<f64>::zeros(1, 2);
        assert!(temporal_embed(&Tensor3::zeros(0, 3, 1), &w).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = LstmWeights::<f64>::zeros(2, 3);
        let r = lstm_step(
            &Matrix::zeros(1, 3),
            &Matrix::zeros(1, 3),
            &Matrix::zeros(1, 3),
            &w,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
