//! Minibatch ELBO ascent with Adam, and predictive metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gather_rows, DataError, Dataset};
use crate::models::{self, predict, Regressor};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

/// RNG stream for weight initialization (see [`rng_for`]).
pub const INIT_STREAM: u64 = 0;
/// RNG stream for minibatch order and training noise.
pub const TRAIN_STREAM: u64 = 1;
/// RNG stream for evaluation noise.
pub const EVAL_STREAM: u64 = 2;

/// Independent deterministic generator for one purpose of one seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, term: String },
    #[error("invalid training configuration: {field} {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    500
}
fn one() -> usize {
    1
}
fn default_eval_mc() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Monte Carlo samples per ELBO estimate.
    #[serde(default = "one")]
    pub n_mc_train: usize,
    /// Posterior draws for test metrics.
    #[serde(default = "default_eval_mc")]
    pub n_mc_eval: usize,
    /// Linear KL weight ramp over this many epochs; 0 disables it.
    #[serde(default)]
    pub kl_warmup_epochs: usize,
    /// Test metrics are computed every this many epochs and after the last.
    #[serde(default = "one")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            n_mc_train: 1,
            n_mc_eval: default_eval_mc(),
            kl_warmup_epochs: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, message: &str| {
            Err(TrainError::Config {
                field,
                message: message.to_string(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.adam_eps < 1.0) {
            return bad("adam_eps", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.n_mc_train == 0 {
            return bad("n_mc_train", "must be at least 1");
        }
        if self.n_mc_eval == 0 {
            return bad("n_mc_eval", "must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments; updates trainable entries only.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn from_config(store: &ParamStore, c: &TrainConfig) -> Self {
        Self::new(store, c.learning_rate, c.beta1, c.beta2, c.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// One descent step on `grads` (store order, gradients of a loss).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per entry");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One epoch of training output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
    /// Mean of the epoch's minibatch ELBO estimates; `data_fit - kl`.
    pub elbo: f64,
    pub data_fit: f64,
    pub kl: f64,
    /// `None` on epochs skipped by `eval_every`.
    pub test_rmse: Option<f64>,
    pub test_mnll: Option<f64>,
    /// Seconds since training started.
    pub wall_clock: f64,
    pub num_params: usize,
}

/// Root mean squared error of the Monte Carlo mean prediction.
/// `means` is `[n_mc, b, out]`, `y` is `[b, out]`.
pub fn rmse(means: &Tensor, y: &Tensor) -> f64 {
    let pred = models::Predictive {
        means: means.clone(),
        log_noise_var: vec![],
    }
    .mean();
    assert_eq!(pred.shape(), y.shape(), "prediction/target shape");
    let sq: f64 = pred.data().iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    (sq / y.len() as f64).sqrt()
}

/// Mean over test points of `-log (1/S) Σ_s N(y | mean_s, exp(log_var))`,
/// summed over output dimensions, via log-sum-exp.
pub fn mnll(means: &Tensor, y: &Tensor, log_noise_var: &[f64]) -> f64 {
    let s = means.shape();
    let (n_mc, b, out) = (s[0], s[1], s[2]);
    assert_eq!(y.shape(), [b, out], "prediction/target shape");
    assert_eq!(log_noise_var.len(), out, "one log-variance per output");
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let md = means.data();
    let mut total = 0.0;
    let mut logs = vec![0.0; n_mc];
    for i in 0..b {
        for t in 0..out {
            let lv = log_noise_var[t];
            let target = y.get2(i, t);
            for (k, l) in logs.iter_mut().enumerate() {
                let r = target - md[(k * b + i) * out + t];
                *l = -0.5 * (ln_2pi + lv + r * r * (-lv).exp());
            }
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total -= lse - (n_mc as f64).ln();
        }
    }
    total / b as f64
}

/// Test RMSE and MNLL from `n_mc` posterior draws.
pub fn evaluate<R: rand::Rng + ?Sized>(
    model: &dyn Regressor,
    x: &Tensor,
    y: &Tensor,
    n_mc: usize,
    rng: &mut R,
) -> Result<(f64, f64), TensorError> {
    let p = predict(model, x, n_mc, rng)?;
    Ok((rmse(&p.means, y), mnll(&p.means, y, &p.log_noise_var)))
}

/// Trains `model` on the training split of `dataset` and evaluates on its
/// test split. `on_epoch` sees each record as it is produced.
pub fn train_loop(
    model: &mut dyn Regressor,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    model_label: &str,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>, TrainError> {
    config.validate()?;
    let x_train = dataset.train_x()?;
    let y_train = dataset.train_y()?;
    let x_test = dataset.test_x()?;
    let y_test = dataset.test_y()?;
    let n = x_train.rows();
    let batch = config.batch_size.min(n);
    let mut rng = rng_for(seed, TRAIN_STREAM);
    let mut eval_rng = rng_for(seed, EVAL_STREAM);
    let mut adam = Adam::from_config(model.store(), config);
    let num_params = model.store().num_trainable();
    let start = Instant::now();
    let mut records = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let kl_weight = if config.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / config.kl_warmup_epochs as f64).min(1.0)
        };
        let (mut fit_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, rows) in order.chunks(batch).enumerate() {
            let xb = gather_rows(&x_train, rows);
            let yb = gather_rows(&y_train, rows);
            let noise: Vec<_> = (0..config.n_mc_train)
                .map(|_| models::sample_noise(model, rows.len(), &mut rng))
                .collect();
            let tape = crate::autodiff::Tape::new();
            let at = |term: &str| TrainError::NonFinite {
                epoch,
                batch: bi + 1,
                term: term.to_string(),
            };
            if let Some(e) = model.store().entries().iter().find(|e| !e.value.is_finite()) {
                return Err(at(&format!("parameter {}", e.name)));
            }
            let bound = model.store().bind(&tape)?;
            let fit = models::data_fit(model, &bound, &xb, &yb, n, &noise)
                .map_err(|e| non_finite(e, || at("data-fit term")))?;
            let kl = model.kl_to_prior(&bound).map_err(|e| non_finite(e, || at("KL term")))?;
            let loss = kl
                .scale(kl_weight)
                .and_then(|k| k.sub(fit))
                .map_err(|e| non_finite(e, || at("loss")))?;
            tape.backward(loss)?;
            let grads = bound.grads();
            for (g, e) in grads.iter().zip(model.store().entries()) {
                if !g.is_finite() {
                    return Err(at(&format!("gradient of {}", e.name)));
                }
            }
            fit_sum += fit.item()?;
            kl_sum += kl.item()?;
            batches += 1;
            adam.step(model.store_mut(), &grads);
        }
        let data_fit = fit_sum / batches as f64;
        let kl = kl_sum / batches as f64;
        let (test_rmse, test_mnll) = if epoch % config.eval_every == 0 || epoch == config.epochs {
            let (r, m) = evaluate(model, &x_test, &y_test, config.n_mc_eval, &mut eval_rng)?;
            (Some(r), Some(m))
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            dataset: dataset.name.clone(),
            model: model_label.to_string(),
            seed,
            epoch,
            elbo: data_fit - kl,
            data_fit,
            kl,
            test_rmse,
            test_mnll,
            wall_clock: start.elapsed().as_secs_f64(),
            num_params,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

fn non_finite(e: TensorError, at: impl FnOnce() -> TrainError) -> TrainError {
    match e {
        TensorError::NonFinite { .. } => at(),
        other => TrainError::Tensor(other),
    }
}
