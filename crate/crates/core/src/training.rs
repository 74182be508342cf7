//! MAE training with Adam, decoupled weight decay, gradient clipping and
//! validation early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::model::params::decay_exempt;
use crate::model::{ParameterSet, Pipeline};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Shuffle training windows each epoch with the seeded generator.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 5.0,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !positive(self.clip_norm) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn mae_loss<S: Scalar>(pred: &Matrix<S>, target: &Matrix<S>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, target is {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let total: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Subgradient of [`mae_loss`] w.r.t. `pred`, taking `sign(0) = 0`.
pub fn mae_loss_grad<S: Scalar>(pred: &Matrix<S>, target: &Matrix<S>) -> Matrix<S> {
    let inv = S::one() / S::of_usize(pred.len());
    pred.zip_map(target, |p, t| {
        if p > t {
            inv
        } else if p < t {
            -inv
        } else {
            S::zero()
        }
    })
}

pub fn global_norm<S: Scalar>(grads: &ParameterSet<S>) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, m)| m.frobenius_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<S: Scalar>(grads: &mut ParameterSet<S>, clip_norm: f64) -> Result<f64> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "clip norm {clip_norm} must be positive"
        )));
    }
    let norm = global_norm(grads);
    if norm > clip_norm {
        grads.scale_assign(S::of(clip_norm / norm));
    }
    Ok(norm)
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ParameterSet<S>,
    pub v: ParameterSet<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterSet<S>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update on flat slices at step `t ≥ 1`:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
pub fn adam_update<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    learning_rate: f64,
    weight_decay: f64,
) {
    let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
    let c1 = S::one() - S::of(ADAM_BETA1.powi(t as i32));
    let c2 = S::one() - S::of(ADAM_BETA2.powi(t as i32));
    let lr = S::of(learning_rate);
    let decay = S::of(learning_rate * weight_decay);
    let eps = S::of(ADAM_EPS);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (S::one() - b1) * g;
        v[i] = b2 * v[i] + (S::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps) - decay * theta[i];
    }
}

/// Applies one Adam step to every tensor. Decay is skipped for the node
/// embedding and layer-norm parameters.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &ParameterSet<S>,
    state: &mut AdamState<S>,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if !g.is_finite() {
            return Err(Error::Numeric {
                location: format!("gradient of {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, theta), (_, g)), (_, m)), (_, v)) in
        params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
    {
        let wd = if decay_exempt(&name) {
            0.0
        } else {
            config.weight_decay
        };
        adam_update(
            theta.as_mut_slice(),
            g.as_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            t,
            config.learning_rate,
            wd,
        );
        if !theta.is_finite() {
            return Err(Error::Numeric {
                location: format!("parameter {name} after step {t}"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Patience counter over validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss; returns true if it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epochs;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    /// 1-based, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// `epoch,train_mae,val_mae` lines. Identical across runs with the same seed.
    pub fn log(&self) -> String {
        let mut out = String::from("epoch,train_mae,val_mae\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.train_mae, r.val_mae));
        }
        out.push_str(&format!(
            "# best_epoch={} best_val_mae={:e} stop={}\n",
            self.best_epoch,
            self.best_val_mae,
            match self.stop_reason {
                StopReason::Patience => "patience",
                StopReason::MaxEpochs => "max-epochs",
            }
        ));
        out
    }

    /// `epoch,seconds` lines.
    pub fn timing(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.6}\n", r.epoch, r.seconds));
        }
        out
    }
}

fn locate(err: Error, epoch: usize, batch: Option<usize>) -> Error {
    match err {
        Error::Numeric { location } => Error::Numeric {
            location: match batch {
                Some(b) => format!("{location} (epoch {epoch}, batch {b})"),
                None => format!("{location} (epoch {epoch}, validation)"),
            },
        },
        other => other,
    }
}

/// Mean loss and summed gradient (of the mean loss) over a batch. Samples
/// run in parallel; results are reduced in batch order.
pub fn batch_gradient<S: Scalar>(
    pipeline: &Pipeline,
    params: &ParameterSet<S>,
    batch: &[&WindowSample<S>],
) -> Result<(f64, ParameterSet<S>)> {
    let per_sample: Vec<Result<(f64, ParameterSet<S>)>> = batch
        .par_iter()
        .map(|sample| {
            let (forecast, cache) = pipeline.forward_cached(params, &sample.input)?;
            let loss = mae_loss(&forecast.predictions, &sample.target)?;
            let d = mae_loss_grad(&forecast.predictions, &sample.target);
            Ok((loss, pipeline.backward(params, &cache, &d)))
        })
        .collect();
    let inv = S::one() / S::of_usize(batch.len());
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for item in per_sample {
        let (loss, g) = item?;
        total += loss;
        grads.add_assign(&g);
    }
    grads.scale_assign(inv);
    Ok((total / batch.len() as f64, grads))
}

/// Mean per-window MAE in normalized space.
pub fn evaluate_loss<S: Scalar>(
    pipeline: &Pipeline,
    params: &ParameterSet<S>,
    samples: &[WindowSample<S>],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let f = pipeline.forward(params, &s.input)?;
            mae_loss(&f.predictions, &s.target)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains from a seeded initialization.
pub fn train<S: Scalar>(
    pipeline: &Pipeline,
    train_set: &[WindowSample<S>],
    validation: &[WindowSample<S>],
    config: &TrainConfig,
) -> Result<(ParameterSet<S>, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = pipeline.init_params(&mut rng);
    train_from(pipeline, init, train_set, validation, config)
}

/// Trains starting at `params`. Returns the parameters of the best
/// validation epoch.
pub fn train_from<S: Scalar>(
    pipeline: &Pipeline,
    mut params: ParameterSet<S>,
    train_set: &[WindowSample<S>],
    validation: &[WindowSample<S>],
    config: &TrainConfig,
) -> Result<(ParameterSet<S>, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split yields no windows".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("validation split yields no windows".into()));
    }
    // Offset so shuffling does not replay the initialization stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&WindowSample<S>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(pipeline, &params, &batch)
                .map_err(|e| locate(e, epoch, Some(b + 1)))?;
            weighted += loss * batch.len() as f64;
            clip_gradients(&mut grads, config.clip_norm)?;
            adam_step(&mut params, &grads, &mut state, config)
                .map_err(|e| locate(e, epoch, Some(b + 1)))?;
        }
        let train_mae = weighted / train_set.len() as f64;
        let val_mae =
            evaluate_loss(pipeline, &params, validation).map_err(|e| locate(e, epoch, None))?;
        if stopper.observe(val_mae) {
            best = params.clone();
        }
        let seconds = started.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train_mae {train_mae:.6} val_mae {val_mae:.6} ({seconds:.2}s)");
        records.push(EpochRecord {
            epoch,
            train_mae,
            val_mae,
            seconds,
        });
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let report = TrainReport {
        epochs: records,
        best_epoch: stopper.best_epoch(),
        best_val_mae: stopper.best_loss(),
        stop_reason,
    };
    Ok((best, report))
}
