//! Fully factorized (mean-field) Gaussian linear layers, and helpers for
//! sizing them to a given parameter budget.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Var;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

const INIT_LOG_SIGMA: f64 = -4.605_170_185_988_091; // ln 0.01

/// `W_ij ~ N(mu_ij, sigma_ij²)` independently, prior `N(0, 1)` per weight.
#[derive(Debug, Clone)]
pub struct MeanFieldLayer {
    in_dim: usize,
    out_dim: usize,
    /// `[out, in]`
    pub mu: ParamId,
    /// `[out, in]`
    pub log_sigma: ParamId,
}

impl MeanFieldLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / (in_dim.max(1) as f64).sqrt()).expect("positive std");
        let mu = Tensor::new(
            vec![out_dim, in_dim],
            (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
        )
        .expect("sized");
        let mu = store.add(format!("{name}.mu"), mu);
        let log_sigma = store.add(
            format!("{name}.log_sigma"),
            Tensor::full(vec![out_dim, in_dim], INIT_LOG_SIGMA),
        );
        Self {
            in_dim,
            out_dim,
            mu,
            log_sigma,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Samples pre-activations directly: mean `h muᵀ`, variance
    /// `h² (sigma²)ᵀ`, plus `sqrt(variance) ⊙ eps` with `eps` `[b, out]`.
    pub fn forward_local_reparam<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        let hs = h.shape();
        if hs.len() != 2 || hs[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "mean_field_forward",
                lhs: hs,
                rhs: vec![0, self.in_dim],
            });
        }
        if eps.shape() != [hs[0], self.out_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "mean_field_noise",
                lhs: eps.shape().to_vec(),
                rhs: vec![hs[0], self.out_dim],
            });
        }
        let mean = h.matmul(bound.var(self.mu).transpose()?)?;
        let var_w = bound.var(self.log_sigma).scale(2.0)?.exp()?;
        let var = h.square()?.matmul(var_w.transpose()?)?;
        let noise = h.tape().leaf(eps.clone())?;
        mean.add(var.sqrt()?.mul(noise)?)
    }

    /// `Σ ½(sigma² + mu² - 1 - 2 ln sigma)`.
    pub fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        let mu = bound.var(self.mu);
        let ls = bound.var(self.log_sigma);
        let n = (self.in_dim * self.out_dim) as f64;
        ls.scale(2.0)?
            .exp()?
            .add(mu.square()?)?
            .sub(ls.scale(2.0)?)?
            .sum()?
            .add_scalar(-n)?
            .scale(0.5)
    }
}

/// Width `w` in `1..=max` whose `count(w)` is closest to `budget`
/// (ties go to the smaller width).
pub fn match_budget(budget: usize, max: usize, count: impl Fn(usize) -> usize) -> usize {
    (1..=max.max(1))
        .min_by_key(|&w| count(w).abs_diff(budget))
        .expect("non-empty range")
}

/// Number of mean-field random-feature weights (two scalars each) matching
/// a variational parameter budget.
pub fn matched_feature_count(budget: usize) -> usize {
    match_budget(budget, budget.max(1), |w| 2 * w)
}

/// Width of a mean-field `in_dim -> width` layer matching `budget`.
pub fn matched_layer_width(budget: usize, in_dim: usize) -> usize {
    match_budget(budget, budget.max(1), |w| 2 * in_dim * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::fwht::HadamardDim;
    use crate::layer::{standard_normal, VariationalLayer};
    use crate::whvi::{CovarianceMode, WhviLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_gives_mean_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = MeanFieldLayer::new(&mut store, "mf", 3, 2, &mut rng);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let h = standard_normal(vec![4, 3], &mut rng);
        let out = layer
            .forward_local_reparam(&bound, tape.leaf(h.clone()).unwrap(), &Tensor::zeros(vec![4, 2]))
            .unwrap()
            .value();
        let expect = h.matmul(&store.get(layer.mu).transpose().unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn collapsed_sigma_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = MeanFieldLayer::new(&mut store, "mf", 3, 2, &mut rng);
        layer.set_log_scale(&mut store, -30.0);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let h = tape.leaf(standard_normal(vec![4, 3], &mut rng)).unwrap();
        let a = layer
            .forward_local_reparam(&bound, h, &standard_normal(vec![4, 2], &mut rng))
            .unwrap();
        let b = layer
            .forward_local_reparam(&bound, h, &standard_normal(vec![4, 2], &mut rng))
            .unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-10);
    }

    #[test]
    fn kl_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = MeanFieldLayer::new(&mut store, "mf", 1, 1, &mut rng);
        store.get_mut(layer.mu).data_mut()[0] = 0.0;
        layer.set_log_scale(&mut store, 0.0);
        let kl = |store: &ParamStore| {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            layer.kl_to_prior(&bound).unwrap().item().unwrap()
        };
        assert_eq!(kl(&store), 0.0);
        store.get_mut(layer.mu).data_mut()[0] = 1.0;
        assert!((kl(&store) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_sum_of_scalar_kls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = MeanFieldLayer::new(&mut store, "mf", 3, 2, &mut rng);
        *store.get_mut(layer.log_sigma) = standard_normal(vec![2, 3], &mut rng).scale(0.5);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let total = layer.kl_to_prior(&bound).unwrap().item().unwrap();
        let separate: f64 = store
            .get(layer.mu)
            .data()
            .iter()
            .zip(store.get(layer.log_sigma).data())
            .map(|(&m, &ls)| {
                let s2 = (2.0 * ls).exp();
                0.5 * (s2 + m * m - 1.0) - ls
            })
            .sum();
        assert!((total - separate).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts_and_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = MeanFieldLayer::new(&mut store, "mf", 128, 128, &mut rng);
        assert_eq!(layer.num_params(&store), 2 * 128 * 128);

        let mut wstore = ParamStore::new();
        let whvi = WhviLayer::square(
            &mut wstore,
            "w",
            HadamardDim::new(16).unwrap(),
            CovarianceMode::Diagonal,
            &mut rng,
        );
        let budget = whvi.num_params(&wstore);
        assert_eq!(matched_feature_count(budget), 32);
        assert_eq!(matched_feature_count(7), 3);
        assert_eq!(matched_layer_width(512, 8), 32);
        assert_eq!(match_budget(100, 50, |w| w * w), 10);
    }
}
