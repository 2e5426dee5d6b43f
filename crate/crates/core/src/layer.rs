//! The interface shared by every variational linear layer.

use std::fmt::Debug;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::baselines::MeanFieldLayer;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor};
use crate::whvi::WhviLayer;

/// A linear map with a Gaussian variational posterior over its weights and
/// a standard normal prior.
pub trait VariationalLayer: Debug + Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;

    /// Trainable tensors owned by this layer, in creation order.
    fn param_ids(&self) -> Vec<ParamId>;

    /// Shape of the noise consumed by [`forward_local`](Self::forward_local)
    /// for a minibatch of `batch` rows.
    fn local_noise_shape(&self, batch: usize) -> Vec<usize>;

    /// Per-row sample of `h Wᵀ` under the posterior, driven by `eps`.
    fn forward_local<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>>;

    /// `KL(q || p)` for this layer's weights.
    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>>;

    /// Overwrites every posterior standard deviation with `exp(log_sigma)`.
    fn set_log_scale(&self, store: &mut ParamStore, log_sigma: f64);

    fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

/// Draws standard normal noise of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

impl VariationalLayer for WhviLayer {
    fn in_dim(&self) -> usize {
        WhviLayer::in_dim(self)
    }

    fn out_dim(&self) -> usize {
        WhviLayer::out_dim(self)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        WhviLayer::param_ids(self)
    }

    fn local_noise_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.noise_dim()]
    }

    fn forward_local<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        self.forward_local_reparam(bound, h, eps)
    }

    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        WhviLayer::kl_to_prior(self, bound)
    }

    fn set_log_scale(&self, store: &mut ParamStore, log_sigma: f64) {
        WhviLayer::set_log_scale(self, store, log_sigma)
    }
}

impl VariationalLayer for MeanFieldLayer {
    fn in_dim(&self) -> usize {
        MeanFieldLayer::in_dim(self)
    }

    fn out_dim(&self) -> usize {
        MeanFieldLayer::out_dim(self)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.mu, self.log_sigma]
    }

    fn local_noise_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.out_dim()]
    }

    fn forward_local<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        self.forward_local_reparam(bound, h, eps)
    }

    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        MeanFieldLayer::kl_to_prior(self, bound)
    }

    fn set_log_scale(&self, store: &mut ParamStore, log_sigma: f64) {
        store.get_mut(self.log_sigma).data_mut().fill(log_sigma);
    }
}
