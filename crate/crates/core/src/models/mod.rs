//! Regression models over variational layers, the ELBO, and Monte Carlo
//! prediction.
//!
//! Every model owns its [`ParamStore`]. A forward pass takes one noise
//! tensor per stochastic component (see [`Regressor::noise_shapes`]), so
//! callers can freeze noise for gradient checks and reproducible estimates.

mod bnn;
mod gp;

pub use bnn::{BnnRegressor, BnnSpec};
pub use gp::{GpSpec, GpWeights, RffGpRegressor};

use std::fmt::Debug;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_nll, Var};
use crate::layer::standard_normal;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Posterior family of a model's weight layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    #[default]
    Whvi,
    MeanField,
}

/// Architecture description, sufficient to rebuild a model's parameter
/// layout (used by checkpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSpec {
    Bnn(BnnSpec),
    Gp(GpSpec),
}

impl ModelSpec {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Box<dyn Regressor>> {
        Ok(match self {
            ModelSpec::Bnn(s) => Box::new(BnnRegressor::new(s.clone(), rng)?),
            ModelSpec::Gp(s) => Box::new(RffGpRegressor::new(s.clone(), rng)?),
        })
    }
}

/// A regression model with a Gaussian likelihood
/// `y ~ N(mean(x, W), exp(log_var))` and a variational posterior over `W`.
pub trait Regressor: Debug + Send + Sync {
    fn spec(&self) -> ModelSpec;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn out_dim(&self) -> usize;

    /// Shapes of the noise tensors consumed by [`forward`](Self::forward)
    /// for `batch` input rows.
    fn noise_shapes(&self, batch: usize) -> Vec<Vec<usize>>;

    /// Predictive mean `[b, out]` in target units for one posterior draw, and
    /// the per-target observation log-variance `[out]` in target units.
    fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, noise: &[Tensor]) -> Result<(Var<'t>, Var<'t>)>;

    /// Sum of the KL divergences of every variational component.
    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>>;

    /// Named groups of trainable tensors, one per layer or component.
    fn param_groups(&self) -> Vec<(String, Vec<ParamId>)>;

    /// Sets every posterior standard deviation to `exp(log_sigma)`.
    fn set_log_scale(&mut self, log_sigma: f64);

    /// Target standardization constants applied to the network output,
    /// `y = f(x) * std + mean`.
    fn set_output_scaling(&mut self, mean: &[f64], std: &[f64]);
}

/// Fresh standard normal noise for one forward pass.
pub fn sample_noise<R: Rng + ?Sized>(model: &dyn Regressor, batch: usize, rng: &mut R) -> Vec<Tensor> {
    model
        .noise_shapes(batch)
        .into_iter()
        .map(|s| standard_normal(s, rng))
        .collect()
}

/// ELBO decomposition; `elbo = data_fit - kl`.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms<'t> {
    pub elbo: Var<'t>,
    pub data_fit: Var<'t>,
    pub kl: Var<'t>,
}

/// Minibatch ELBO estimate: `(N / b)` times the Monte Carlo average of the
/// batch log-likelihood, minus the KL term. `noise` holds one set of noise
/// tensors per Monte Carlo sample.
pub fn elbo<'t>(
    model: &dyn Regressor,
    bound: &Bound<'t>,
    x: &Tensor,
    y: &Tensor,
    dataset_size: usize,
    noise: &[Vec<Tensor>],
) -> Result<ElboTerms<'t>> {
    let data_fit = data_fit(model, bound, x, y, dataset_size, noise)?;
    let kl = model.kl_to_prior(bound)?;
    Ok(ElboTerms {
        elbo: data_fit.sub(kl)?,
        data_fit,
        kl,
    })
}

/// The `(N / b)`-scaled expected log-likelihood term of [`elbo`].
pub fn data_fit<'t>(
    model: &dyn Regressor,
    bound: &Bound<'t>,
    x: &Tensor,
    y: &Tensor,
    dataset_size: usize,
    noise: &[Vec<Tensor>],
) -> Result<Var<'t>> {
    let b = x.shape().first().copied().unwrap_or(0);
    if noise.is_empty() || b == 0 || b > dataset_size {
        return Err(TensorError::Invalid {
            op: "elbo",
            message: format!(
                "need ≥ 1 noise sample and 1 ≤ batch ≤ N (got {} samples, batch {b}, N {dataset_size})",
                noise.len()
            ),
        });
    }
    let tape = bound.tape();
    let xv = tape.leaf(x.clone())?;
    let mut nll: Option<Var<'t>> = None;
    for eps in noise {
        let (mean, log_var) = model.forward(bound, xv, eps)?;
        let term = gaussian_nll(y, mean, log_var)?;
        nll = Some(match nll {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let scale = dataset_size as f64 / (b as f64 * noise.len() as f64);
    nll.expect("at least one sample").scale(-scale)
}

/// Monte Carlo predictive distribution: one mean per posterior draw plus
/// the Gaussian observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    /// `[n_mc, b, out]`
    pub means: Tensor,
    /// Per-target observation log-variance.
    pub log_noise_var: Vec<f64>,
}

impl Predictive {
    pub fn n_mc(&self) -> usize {
        self.means.shape()[0]
    }

    /// Average over draws, `[b, out]`.
    pub fn mean(&self) -> Tensor {
        let s = self.means.shape();
        let (n, rest) = (s[0], s[1] * s[2]);
        let mut acc = vec![0.0; rest];
        for draw in self.means.data().chunks_exact(rest) {
            for (a, v) in acc.iter_mut().zip(draw) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Tensor::new(vec![s[1], s[2]], acc).expect("sized")
    }

    /// Draws of `y` itself: each mean plus observation noise.
    pub fn sample_targets<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let out = self.means.shape()[2];
        let eps = standard_normal(self.means.shape().to_vec(), rng);
        let data = self
            .means
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (m, e))| m + (0.5 * self.log_noise_var[i % out]).exp() * e)
            .collect();
        Tensor::new(self.means.shape().to_vec(), data).expect("sized")
    }
}

/// `n_mc` forward passes with independent posterior draws.
pub fn predict<R: Rng + ?Sized>(model: &dyn Regressor, x: &Tensor, n_mc: usize, rng: &mut R) -> Result<Predictive> {
    let noise: Vec<_> = (0..n_mc).map(|_| sample_noise(model, x.rows(), rng)).collect();
    predict_with_noise(model, x, &noise)
}

/// [`predict`] with caller-supplied noise, one set per draw.
pub fn predict_with_noise(model: &dyn Regressor, x: &Tensor, noise: &[Vec<Tensor>]) -> Result<Predictive> {
    if noise.is_empty() {
        return Err(TensorError::Invalid {
            op: "predict",
            message: "n_mc must be at least 1".into(),
        });
    }
    let (b, out) = (x.rows(), model.out_dim());
    let mut means = Vec::with_capacity(noise.len() * b * out);
    let mut log_noise_var = Vec::new();
    for eps in noise {
        let tape = crate::autodiff::Tape::new();
        let bound = model.store().bind(&tape)?;
        let (mean, lv) = model.forward(&bound, tape.leaf(x.clone())?, eps)?;
        means.extend_from_slice(mean.value_ref().data());
        log_noise_var = lv.value().into_data();
    }
    Ok(Predictive {
        means: Tensor::new(vec![noise.len(), b, out], means)?,
        log_noise_var,
    })
}

/// Predictive draws of a Bayesian neural network.
pub fn bnn_predict<R: Rng + ?Sized>(model: &BnnRegressor, x: &Tensor, n_mc: usize, rng: &mut R) -> Result<Predictive> {
    predict(model, x, n_mc, rng)
}

/// Predictive draws of a random-feature GP.
pub fn gp_predict<R: Rng + ?Sized>(model: &RffGpRegressor, x: &Tensor, n_mc: usize, rng: &mut R) -> Result<Predictive> {
    predict(model, x, n_mc, rng)
}

/// Adds `y_std`/`y_mean` output rescaling on top of raw outputs `f` and
/// converts a normalized log-variance to target units.
fn rescale<'t>(
    bound: &Bound<'t>,
    f: Var<'t>,
    log_var: Var<'t>,
    y_mean: ParamId,
    y_std: ParamId,
) -> Result<(Var<'t>, Var<'t>)> {
    let std = bound.var(y_std);
    let mean = f.mul(std)?.add(bound.var(y_mean))?;
    let lv = log_var.add(std.ln()?.scale(2.0)?)?;
    Ok((mean, lv))
}

fn write_scaling(store: &mut ParamStore, y_mean: ParamId, y_std: ParamId, mean: &[f64], std: &[f64]) {
    let out = store.get(y_mean).len();
    assert!(mean.len() == out && std.len() == out, "scaling has wrong length");
    assert!(std.iter().all(|s| *s > 0.0), "scales must be positive");
    store.get_mut(y_mean).data_mut().copy_from_slice(mean);
    store.get_mut(y_std).data_mut().copy_from_slice(std);
}

fn invalid(op: &'static str, message: String) -> TensorError {
    TensorError::Invalid { op, message }
}
