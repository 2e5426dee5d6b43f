use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{invalid, rescale, write_scaling, ModelSpec, Regressor};
use crate::autodiff::Var;
use crate::baselines::{matched_feature_count, MeanFieldLayer};
use crate::fwht::HadamardDim;
use crate::layer::{standard_normal, VariationalLayer};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor};
use crate::whvi::{CovarianceMode, WhviBlock};

/// Posterior over the random-feature weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpWeights {
    /// `w = vect(W)` with `W` a `d×d` WHVI matrix (one per block).
    #[default]
    Whvi,
    /// Fully factorized Gaussian over fewer features, sized to match the
    /// WHVI variant's number of variational parameters.
    MeanFieldMatched,
}

fn default_d() -> usize {
    16
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_noise_std() -> f64 {
    0.1
}

/// RBF-kernel random Fourier feature regression with a Bayesian linear
/// read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    pub in_dim: usize,
    #[serde(default)]
    pub weights: GpWeights,
    /// Hadamard dimension `d`; each WHVI block reads `d²` features.
    #[serde(default = "default_d")]
    pub hadamard_dim: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default)]
    pub covariance: CovarianceMode,
    /// Overrides the matched feature count of the mean-field variant.
    #[serde(default)]
    pub features: Option<usize>,
    #[serde(default = "unit")]
    pub init_lengthscale: f64,
    #[serde(default = "unit")]
    pub init_amplitude: f64,
    #[serde(default = "default_noise_std")]
    pub init_noise_std: f64,
    #[serde(default = "yes")]
    pub learn_noise: bool,
    /// Optimize lengthscale and amplitude; otherwise they stay at their
    /// initial values.
    #[serde(default = "yes")]
    pub learn_kernel: bool,
    #[serde(default = "yes")]
    pub rescale_output: bool,
}

impl GpSpec {
    pub fn new(in_dim: usize, weights: GpWeights) -> Self {
        Self {
            in_dim,
            weights,
            hadamard_dim: default_d(),
            blocks: 1,
            covariance: CovarianceMode::Diagonal,
            features: None,
            init_lengthscale: 1.0,
            init_amplitude: 1.0,
            init_noise_std: default_noise_std(),
            learn_noise: true,
            learn_kernel: true,
            rescale_output: true,
        }
    }

    /// Variational parameters of the WHVI read-out.
    pub fn whvi_weight_params(&self) -> usize {
        let d = self.hadamard_dim;
        let q = match self.covariance {
            CovarianceMode::Diagonal => 2 * d,
            CovarianceMode::Full => d + d * (d + 1) / 2,
        };
        self.blocks * (2 * d + q)
    }

    /// Number of random features.
    pub fn num_features(&self) -> usize {
        match self.weights {
            GpWeights::Whvi => self.blocks * self.hadamard_dim * self.hadamard_dim,
            GpWeights::MeanFieldMatched => self
                .features
                .unwrap_or_else(|| matched_feature_count(self.whvi_weight_params())),
        }
    }
}

#[derive(Debug)]
enum ReadOut {
    Whvi(Vec<WhviBlock>),
    MeanField(MeanFieldLayer),
}

#[derive(Debug)]
pub struct RffGpRegressor {
    spec: GpSpec,
    store: ParamStore,
    omega: ParamId,
    phase: ParamId,
    log_lengthscale: ParamId,
    log_amplitude: ParamId,
    log_noise_var: ParamId,
    readout: ReadOut,
    y_mean: ParamId,
    y_std: ParamId,
}

impl RffGpRegressor {
    pub fn new<R: Rng + ?Sized>(spec: GpSpec, rng: &mut R) -> Result<Self> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if spec.in_dim == 0 || spec.blocks == 0 {
            return Err(invalid("RffGpRegressor::new", format!("empty model {spec:?}")));
        }
        if !(positive(spec.init_lengthscale) && positive(spec.init_amplitude) && positive(spec.init_noise_std)) {
            return Err(invalid(
                "RffGpRegressor::new",
                "initial lengthscale, amplitude and noise must be positive".into(),
            ));
        }
        let d = HadamardDim::new(spec.hadamard_dim).map_err(|e| invalid("RffGpRegressor::new", e.to_string()))?;
        let n_rf = spec.num_features();
        if n_rf == 0 {
            return Err(invalid("RffGpRegressor::new", "no random features".into()));
        }
        let mut store = ParamStore::new();
        let omega = store.add_buffer("omega", standard_normal(vec![spec.in_dim, n_rf], rng));
        let uniform = Uniform::new(0.0, 2.0 * PI);
        let phase = store.add_buffer(
            "phase",
            Tensor::vector((0..n_rf).map(|_| uniform.sample(rng)).collect()),
        );
        let add = |store: &mut ParamStore, name: &str, v: f64| {
            if spec.learn_kernel {
                store.add(name, Tensor::scalar(v))
            } else {
                store.add_buffer(name, Tensor::scalar(v))
            }
        };
        let log_lengthscale = add(&mut store, "log_lengthscale", spec.init_lengthscale.ln());
        let log_amplitude = add(&mut store, "log_amplitude", spec.init_amplitude.ln());
        let lv = Tensor::full(vec![1], 2.0 * spec.init_noise_std.ln());
        let log_noise_var = if spec.learn_noise {
            store.add("log_noise_var", lv)
        } else {
            store.add_buffer("log_noise_var", lv)
        };
        let readout = match spec.weights {
            GpWeights::Whvi => ReadOut::Whvi(
                (0..spec.blocks)
                    .map(|k| {
                        let name = if spec.blocks == 1 {
                            "weights".to_string()
                        } else {
                            format!("weights.block{k}")
                        };
                        WhviBlock::new(&mut store, &name, d, spec.covariance, rng)
                    })
                    .collect(),
            ),
            GpWeights::MeanFieldMatched => ReadOut::MeanField(MeanFieldLayer::new(&mut store, "weights", n_rf, 1, rng)),
        };
        let y_mean = store.add_buffer("y_mean", Tensor::zeros(vec![1]));
        let y_std = store.add_buffer("y_std", Tensor::ones(vec![1]));
        Ok(Self {
            spec,
            store,
            omega,
            phase,
            log_lengthscale,
            log_amplitude,
            log_noise_var,
            readout,
            y_mean,
            y_std,
        })
    }

    pub fn num_features(&self) -> usize {
        self.store.get(self.phase).len()
    }

    pub fn omega(&self) -> ParamId {
        self.omega
    }

    pub fn log_lengthscale(&self) -> ParamId {
        self.log_lengthscale
    }

    pub fn log_amplitude(&self) -> ParamId {
        self.log_amplitude
    }

    /// WHVI blocks of the read-out, empty for the mean-field variant.
    pub fn whvi_blocks(&self) -> &[WhviBlock] {
        match &self.readout {
            ReadOut::Whvi(b) => b,
            ReadOut::MeanField(_) => &[],
        }
    }

    /// `sqrt(2 amplitude / D_rf) cos(x Omega / lengthscale + phase)`, `[b, D_rf]`.
    pub fn features<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let inv_ls = bound.var(self.log_lengthscale).neg()?.exp()?;
        let amp = bound.var(self.log_amplitude).scale(0.5)?.exp()?;
        let n_rf = self.num_features() as f64;
        x.matmul(bound.var(self.omega))?
            .mul(inv_ls)?
            .add(bound.var(self.phase))?
            .cos()?
            .mul(amp)?
            .scale((2.0 / n_rf).sqrt())
    }

    /// `Phi(x) w` for one posterior draw per row, `[b, 1]`.
    pub fn latent<'t>(&self, bound: &Bound<'t>, x: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        let phi = self.features(bound, x)?;
        let b = phi.shape()[0];
        match &self.readout {
            ReadOut::MeanField(layer) => layer.forward_local_reparam(bound, phi, eps),
            ReadOut::Whvi(blocks) => {
                let d = self.spec.hadamard_dim;
                let mut total: Option<Var<'t>> = None;
                for (k, block) in blocks.iter().enumerate() {
                    let e = column_slice(eps, k * d, d);
                    let g = block.sample_g(bound, &e)?;
                    let part = whvi_readout(bound, block, phi.slice_last(k * d * d, d * d)?, d)?
                        .mul(g)?
                        .sum_last()?;
                    total = Some(match total {
                        Some(t) => t.add(part)?,
                        None => part,
                    });
                }
                total.expect("at least one block").reshape(vec![b, 1])
            }
        }
    }
}

/// Coefficients `c[n, k] = (H S1 P_n S2 H)_kk`, where `P_n` is the `d×d`
/// column-major reshape of feature row `n`, so `Phi_n · vect(W(g)) = c_n · g`.
fn whvi_readout<'t>(bound: &Bound<'t>, block: &WhviBlock, phi: Var<'t>, d: usize) -> Result<Var<'t>> {
    let b = phi.shape()[0];
    // Row-major reshape of a column-major vect gives P_nᵀ; scaling row j by
    // s2_j and column i by s1_i gives (S1 P_n S2)ᵀ, whose H·H diagonal is the
    // same as that of S1 P_n S2.
    let s2 = bound.var(block.s2).reshape(vec![d, 1])?;
    let s1 = bound.var(block.s1).reshape(vec![1, d])?;
    phi.reshape(vec![b, d, d])?
        .mul(s2.matmul(s1)?)?
        .fwht(true)?
        .transpose_last2()?
        .fwht(true)?
        .diag_last2()
}

fn column_slice(eps: &Tensor, start: usize, len: usize) -> Tensor {
    let w = eps.last_dim();
    if start == 0 && len == w {
        return eps.clone();
    }
    let data = eps
        .data()
        .chunks_exact(w)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::new(vec![eps.rows(), len], data).expect("sized")
}

impl Regressor for RffGpRegressor {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Gp(self.spec.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn out_dim(&self) -> usize {
        1
    }

    fn noise_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        match &self.readout {
            ReadOut::Whvi(blocks) => vec![vec![batch, blocks.len() * self.spec.hadamard_dim]],
            ReadOut::MeanField(layer) => vec![layer.local_noise_shape(batch)],
        }
    }

    fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, noise: &[Tensor]) -> Result<(Var<'t>, Var<'t>)> {
        if noise.len() != 1 {
            return Err(invalid(
                "gp_forward",
                format!("expected 1 noise tensor, got {}", noise.len()),
            ));
        }
        let f = self.latent(bound, x, &noise[0])?;
        rescale(bound, f, bound.var(self.log_noise_var), self.y_mean, self.y_std)
    }

    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        match &self.readout {
            ReadOut::MeanField(layer) => layer.kl_to_prior(bound),
            ReadOut::Whvi(blocks) => {
                let mut kl = blocks[0].kl_to_prior(bound)?;
                for b in &blocks[1..] {
                    kl = kl.add(b.kl_to_prior(bound)?)?;
                }
                Ok(kl)
            }
        }
    }

    fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let weights = match &self.readout {
            ReadOut::Whvi(blocks) => blocks.iter().flat_map(WhviBlock::param_ids).collect(),
            ReadOut::MeanField(layer) => layer.param_ids(),
        };
        let mut groups = vec![("weights".to_string(), weights)];
        if self.spec.learn_kernel {
            groups.push(("kernel".to_string(), vec![self.log_lengthscale, self.log_amplitude]));
        }
        if self.spec.learn_noise {
            groups.push(("likelihood".into(), vec![self.log_noise_var]));
        }
        groups
    }

    fn set_log_scale(&mut self, log_sigma: f64) {
        match &self.readout {
            ReadOut::Whvi(blocks) => {
                for b in blocks {
                    b.q.set_log_scale(&mut self.store, log_sigma);
                }
            }
            ReadOut::MeanField(layer) => layer.set_log_scale(&mut self.store, log_sigma),
        }
    }

    fn set_output_scaling(&mut self, mean: &[f64], std: &[f64]) {
        if self.spec.rescale_output {
            write_scaling(&mut self.store, self.y_mean, self.y_std, mean, std);
        }
    }
}
