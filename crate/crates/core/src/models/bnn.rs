use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, rescale, write_scaling, LayerKind, ModelSpec, Regressor};
use crate::autodiff::Var;
use crate::baselines::MeanFieldLayer;
use crate::fwht::HadamardDim;
use crate::layer::VariationalLayer;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor};
use crate::whvi::{CovarianceMode, WhviLayer};

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn yes() -> bool {
    true
}

fn default_noise_std() -> f64 {
    0.1
}

/// Fully connected ReLU network with variational hidden layers, a mean-field
/// output layer, deterministic biases and a Gaussian likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnnSpec {
    pub in_dim: usize,
    #[serde(default = "one")]
    pub out_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub hidden_kind: LayerKind,
    #[serde(default)]
    pub covariance: CovarianceMode,
    /// Hadamard dimension of WHVI hidden layers; derived from the widths
    /// when absent.
    #[serde(default)]
    pub hadamard_dim: Option<usize>,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default = "yes")]
    pub learn_noise: bool,
    /// Initial observation noise standard deviation, in standardized
    /// target units.
    #[serde(default = "default_noise_std")]
    pub init_noise_std: f64,
    /// Apply `y = f(x) * sigma_y + mu_y` with training-target statistics.
    #[serde(default = "yes")]
    pub rescale_output: bool,
}

fn one() -> usize {
    1
}

impl BnnSpec {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden: default_hidden(),
            hidden_kind: LayerKind::Whvi,
            covariance: CovarianceMode::Diagonal,
            hadamard_dim: None,
            bias: true,
            learn_noise: true,
            init_noise_std: default_noise_std(),
            rescale_output: true,
        }
    }
}

#[derive(Debug)]
pub struct BnnRegressor {
    spec: BnnSpec,
    store: ParamStore,
    hidden: Vec<Box<dyn VariationalLayer>>,
    hidden_bias: Vec<Option<ParamId>>,
    output: MeanFieldLayer,
    output_bias: Option<ParamId>,
    log_noise_var: ParamId,
    y_mean: ParamId,
    y_std: ParamId,
}

impl BnnRegressor {
    pub fn new<R: Rng + ?Sized>(spec: BnnSpec, rng: &mut R) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 || spec.hidden.contains(&0) {
            return Err(invalid("BnnRegressor::new", format!("zero-width layer in {spec:?}")));
        }
        if !(spec.init_noise_std > 0.0 && spec.init_noise_std.is_finite()) {
            return Err(invalid(
                "BnnRegressor::new",
                format!("init_noise_std must be positive, got {}", spec.init_noise_std),
            ));
        }
        let hadamard_dim = spec
            .hadamard_dim
            .map(|d| HadamardDim::new(d).map_err(|e| invalid("BnnRegressor::new", e.to_string())))
            .transpose()?;
        let mut store = ParamStore::new();
        let mut hidden: Vec<Box<dyn VariationalLayer>> = Vec::new();
        let mut hidden_bias = Vec::new();
        let mut width = spec.in_dim;
        for (i, &w) in spec.hidden.iter().enumerate() {
            let name = format!("hidden{i}");
            let layer: Box<dyn VariationalLayer> = match spec.hidden_kind {
                LayerKind::Whvi => Box::new(WhviLayer::new(
                    &mut store,
                    &name,
                    width,
                    w,
                    hadamard_dim,
                    spec.covariance,
                    rng,
                )?),
                LayerKind::MeanField => Box::new(MeanFieldLayer::new(&mut store, &name, width, w, rng)),
            };
            hidden.push(layer);
            hidden_bias.push(
                spec.bias
                    .then(|| store.add(format!("{name}_bias"), Tensor::zeros(vec![w]))),
            );
            width = w;
        }
        let output = MeanFieldLayer::new(&mut store, "output", width, spec.out_dim, rng);
        let output_bias = spec
            .bias
            .then(|| store.add("output_bias", Tensor::zeros(vec![spec.out_dim])));
        let lv = Tensor::full(vec![spec.out_dim], 2.0 * spec.init_noise_std.ln());
        let log_noise_var = if spec.learn_noise {
            store.add("log_noise_var", lv)
        } else {
            store.add_buffer("log_noise_var", lv)
        };
        let y_mean = store.add_buffer("y_mean", Tensor::zeros(vec![spec.out_dim]));
        let y_std = store.add_buffer("y_std", Tensor::ones(vec![spec.out_dim]));
        Ok(Self {
            spec,
            store,
            hidden,
            hidden_bias,
            output,
            output_bias,
            log_noise_var,
            y_mean,
            y_std,
        })
    }

    pub fn hidden_layers(&self) -> &[Box<dyn VariationalLayer>] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &MeanFieldLayer {
        &self.output
    }

    pub fn log_noise_var(&self) -> ParamId {
        self.log_noise_var
    }

    /// Network output before rescaling, `[b, out]`.
    pub fn raw_output<'t>(&self, bound: &Bound<'t>, x: Var<'t>, noise: &[Tensor]) -> Result<Var<'t>> {
        let mut h = x;
        for (i, (layer, bias)) in self.hidden.iter().zip(&self.hidden_bias).enumerate() {
            h = layer.forward_local(bound, h, &noise[i])?;
            if let Some(b) = bias {
                h = h.add(bound.var(*b))?;
            }
            h = h.relu()?;
        }
        let mut out = self.output.forward_local_reparam(bound, h, &noise[self.hidden.len()])?;
        if let Some(b) = self.output_bias {
            out = out.add(bound.var(b))?;
        }
        Ok(out)
    }
}

impl Regressor for BnnRegressor {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Bnn(self.spec.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    fn noise_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        let mut shapes: Vec<_> = self.hidden.iter().map(|l| l.local_noise_shape(batch)).collect();
        shapes.push(self.output.local_noise_shape(batch));
        shapes
    }

    fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, noise: &[Tensor]) -> Result<(Var<'t>, Var<'t>)> {
        if noise.len() != self.hidden.len() + 1 {
            return Err(invalid(
                "bnn_forward",
                format!("expected {} noise tensors, got {}", self.hidden.len() + 1, noise.len()),
            ));
        }
        let f = self.raw_output(bound, x, noise)?;
        rescale(bound, f, bound.var(self.log_noise_var), self.y_mean, self.y_std)
    }

    fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        let mut kl = self.output.kl_to_prior(bound)?;
        for layer in &self.hidden {
            kl = kl.add(layer.kl_to_prior(bound)?)?;
        }
        Ok(kl)
    }

    fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = Vec::new();
        for (i, (layer, bias)) in self.hidden.iter().zip(&self.hidden_bias).enumerate() {
            groups.push((format!("hidden{i}"), layer.param_ids()));
            if let Some(b) = bias {
                groups.push((format!("hidden{i}_bias"), vec![*b]));
            }
        }
        groups.push(("output".into(), self.output.param_ids()));
        if let Some(b) = self.output_bias {
            groups.push(("output_bias".into(), vec![b]));
        }
        if self.spec.learn_noise {
            groups.push(("likelihood".into(), vec![self.log_noise_var]));
        }
        groups
    }

    fn set_log_scale(&mut self, log_sigma: f64) {
        for layer in &self.hidden {
            layer.set_log_scale(&mut self.store, log_sigma);
        }
        self.output.set_log_scale(&mut self.store, log_sigma);
    }

    fn set_output_scaling(&mut self, mean: &[f64], std: &[f64]) {
        if self.spec.rescale_output {
            write_scaling(&mut self.store, self.y_mean, self.y_std, mean, std);
        }
    }
}
