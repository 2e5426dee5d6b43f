//! Walsh-Hadamard variational layers.
//!
//! A `d×d` weight matrix is parameterized as
//!
//! ```text
//! W = S1 · H · diag(g) · H · S2,      g ~ q(g) = N(mu, Sigma)
//! ```
//!
//! with `S1`, `S2` trainable diagonals, `H` the orthonormal Walsh-Hadamard
//! matrix and a Gaussian over the `d`-vector `g`. The map `g -> W` is linear,
//! so `q(g)` induces a matrix-variate Gaussian over `W` with a dense
//! covariance while the layer holds only `O(d)` numbers. Products `W h`
//! never materialize `W`: they are two scaled FWHTs, `O(d log d)` per row.
//!
//! The prior is `p(g) = N(0, I)`. `S1` and `S2` are point-estimated, so the
//! KL term is the closed-form `KL(N(mu, Sigma) || N(0, I))` in `g`-space.
//!
//! Layers that are not `d×d` zero-pad inputs to `d`, truncate outputs to the
//! requested width, and stack `ceil(out / d)` independent blocks when the
//! output is wider than `d`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::fwht::HadamardDim;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Largest `d` for which [`WhviBlock::cov_vect_w`] builds the dense `d²×d²` matrix.
pub const MAX_COV_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleParam {
    /// `log sigma`, length `d`; `Sigma = diag(sigma²)`.
    DiagLogSigma(ParamId),
    /// Packed lower triangle of `L` (diagonal stored as `log L_ii`);
    /// `Sigma = L Lᵀ`.
    Cholesky(ParamId),
}

/// `q(g) = N(mu, Sigma)` over the diagonal of the core matrix.
#[derive(Debug, Clone)]
pub struct GaussianVariational {
    dim: usize,
    pub mu: ParamId,
    pub scale: ScaleParam,
}

const INIT_SIGMA: f64 = 0.1;

impl GaussianVariational {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, mode: CovarianceMode) -> Self {
        let mu = store.add(format!("{prefix}.mu"), Tensor::zeros(vec![dim]));
        let scale = match mode {
            CovarianceMode::Diagonal => ScaleParam::DiagLogSigma(
                store.add(format!("{prefix}.log_sigma"), Tensor::full(vec![dim], INIT_SIGMA.ln())),
            ),
            CovarianceMode::Full => {
                let mut packed = vec![0.0; dim * (dim + 1) / 2];
                for i in 0..dim {
                    packed[i * (i + 1) / 2 + i] = INIT_SIGMA.ln();
                }
                ScaleParam::Cholesky(store.add(format!("{prefix}.scale_tril"), Tensor::vector(packed)))
            }
        };
        Self { dim, mu, scale }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovarianceMode {
        match self.scale {
            ScaleParam::DiagLogSigma(_) => CovarianceMode::Diagonal,
            ScaleParam::Cholesky(_) => CovarianceMode::Full,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.scale {
            ScaleParam::DiagLogSigma(s) | ScaleParam::Cholesky(s) => vec![self.mu, s],
        }
    }

    /// `Sigma^{1/2} eps` for `eps` of shape `[d]` or `[b, d]`.
    pub fn scale_noise<'t>(&self, bound: &Bound<'t>, eps: Var<'t>) -> Result<Var<'t>> {
        match self.scale {
            ScaleParam::DiagLogSigma(ls) => bound.var(ls).exp()?.mul(eps),
            ScaleParam::Cholesky(p) => {
                let l = bound.var(p).packed_tril(self.dim)?;
                let shape = eps.shape();
                let n = shape.iter().product::<usize>();
                let rows = eps.reshape(vec![n / self.dim, self.dim])?;
                rows.matmul(l.transpose()?)?.reshape(shape)
            }
        }
    }

    /// Reparameterized draw `mu + Sigma^{1/2} eps`.
    pub fn sample<'t>(&self, bound: &Bound<'t>, eps: &Tensor) -> Result<Var<'t>> {
        if eps.last_dim() != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "sample_g",
                lhs: eps.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let tape = bound.var(self.mu).tape();
        let e = tape.leaf(eps.clone())?;
        bound.var(self.mu).add(self.scale_noise(bound, e)?)
    }

    /// `KL(N(mu, Sigma) || N(0, I)) = ½[tr Sigma + muᵀmu - d - log det Sigma]`.
    pub fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        let mu = bound.var(self.mu);
        let (trace, log_det) = match self.scale {
            ScaleParam::DiagLogSigma(ls) => {
                let ls = bound.var(ls);
                (ls.scale(2.0)?.exp()?.sum()?, ls.sum()?.scale(2.0)?)
            }
            ScaleParam::Cholesky(p) => {
                let l = bound.var(p).packed_tril(self.dim)?;
                (l.square()?.sum()?, l.diag_last2()?.ln()?.sum()?.scale(2.0)?)
            }
        };
        trace
            .add(mu.square()?.sum()?)?
            .add_scalar(-(self.dim as f64))?
            .sub(log_det)?
            .scale(0.5)
    }

    /// Dense covariance `Sigma`.
    pub fn covariance(&self, store: &ParamStore) -> Tensor {
        let d = self.dim;
        match self.scale {
            ScaleParam::DiagLogSigma(ls) => {
                let mut s = Tensor::zeros(vec![d, d]);
                for (i, v) in store.get(ls).data().iter().enumerate() {
                    s.set2(i, i, (2.0 * v).exp());
                }
                s
            }
            ScaleParam::Cholesky(p) => {
                let l = cholesky_from_packed(store.get(p).data(), d);
                l.matmul(&l.transpose().expect("matrix")).expect("square")
            }
        }
    }

    /// Sets every posterior scale to `exp(log_sigma)` and drops correlations.
    pub fn set_log_scale(&self, store: &mut ParamStore, log_sigma: f64) {
        match self.scale {
            ScaleParam::DiagLogSigma(ls) => {
                store.get_mut(ls).data_mut().fill(log_sigma);
            }
            ScaleParam::Cholesky(p) => {
                let packed = store.get_mut(p).data_mut();
                packed.fill(0.0);
                for i in 0..self.dim {
                    packed[i * (i + 1) / 2 + i] = log_sigma;
                }
            }
        }
    }
}

fn cholesky_from_packed(packed: &[f64], d: usize) -> Tensor {
    let mut l = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..=i {
            let x = packed[i * (i + 1) / 2 + j];
            l.set2(i, j, if i == j { x.exp() } else { x });
        }
    }
    l
}

/// One `d×d` factorized weight matrix.
#[derive(Debug, Clone)]
pub struct WhviBlock {
    d: HadamardDim,
    pub s1: ParamId,
    pub s2: ParamId,
    pub q: GaussianVariational,
}

impl WhviBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: HadamardDim,
        mode: CovarianceMode,
        rng: &mut R,
    ) -> Self {
        let n = d.get();
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("positive std");
        let mut draw = || Tensor::vector((0..n).map(|_| normal.sample(rng)).collect());
        let s1 = store.add(format!("{prefix}.s1"), draw());
        let s2 = store.add(format!("{prefix}.s2"), draw());
        let q = GaussianVariational::new(store, prefix, n, mode);
        // A zero mean leaves stacked layers at a saddle where no mean signal
        // reaches the loss, so the mean starts at a draw from the prior.
        for v in store.get_mut(q.mu).data_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Self { d, s1, s2, q }
    }

    pub fn dim(&self) -> HadamardDim {
        self.d
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.s1, self.s2];
        ids.extend(self.q.param_ids());
        ids
    }

    pub fn sample_g<'t>(&self, bound: &Bound<'t>, eps: &Tensor) -> Result<Var<'t>> {
        self.q.sample(bound, eps)
    }

    /// `H S2 h` for every row of `x` (`[b, d]`).
    pub fn project_in<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.mul(bound.var(self.s2))?.fwht(true)
    }

    /// `S1 H diag(g) v`; `g` is `[d]` (shared) or `[b, d]` (per row).
    pub fn project_out<'t>(&self, bound: &Bound<'t>, v: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
        v.mul(g)?.fwht(true)?.mul(bound.var(self.s1))
    }

    /// Rows of `x` mapped through `W(g) = S1 H diag(g) H S2`, i.e. `x Wᵀ`.
    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let v = self.project_in(bound, x)?;
        self.project_out(bound, v, g)
    }

    /// Dense `W(g)`, built by pushing the identity through the fast path.
    /// `O(d² log d)`; for inspection and tests.
    pub fn materialize_w<'t>(&self, bound: &Bound<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let tape = g.tape();
        let eye = tape.leaf(Tensor::eye(self.d.get()))?;
        // Row j of the result is (W e_j)ᵀ, i.e. the result is Wᵀ.
        self.apply(bound, eye, g)?.transpose()
    }

    /// Covariance of `vect(W)` (column-major) under `q(g)`: `M Sigma Mᵀ`
    /// where column `i` of `M` is `vect(W(e_i))`.
    pub fn cov_vect_w(&self, store: &ParamStore) -> Result<Tensor> {
        let d = self.d.get();
        if d > MAX_COV_DIM {
            return Err(TensorError::Invalid {
                op: "cov_vect_w",
                message: format!("d = {d} exceeds {MAX_COV_DIM}; the result has d⁴ entries"),
            });
        }
        let m = self.vect_basis(store)?;
        let sigma = self.q.covariance(store);
        m.matmul(&sigma)?.matmul(&m.transpose()?)
    }

    /// `M` with `vect(W(g)) = M g`, shape `[d², d]`.
    pub fn vect_basis(&self, store: &ParamStore) -> Result<Tensor> {
        let d = self.d.get();
        let mut m = Tensor::zeros(vec![d * d, d]);
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        for i in 0..d {
            let mut e = Tensor::zeros(vec![d]);
            e.data_mut()[i] = 1.0;
            let w = self.materialize_w(&bound, tape.leaf(e)?)?.value();
            for c in 0..d {
                for r in 0..d {
                    m.set2(r + c * d, i, w.get2(r, c));
                }
            }
        }
        Ok(m)
    }

    pub fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        self.q.kl_to_prior(bound)
    }
}

/// A variational linear map `R^in -> R^out` built from WHVI blocks.
#[derive(Debug, Clone)]
pub struct WhviLayer {
    in_dim: usize,
    out_dim: usize,
    d: HadamardDim,
    blocks: Vec<WhviBlock>,
}

impl WhviLayer {
    /// `hadamard_dim` defaults to the smallest power of two covering both
    /// `in_dim` and `out_dim`; it must cover `in_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        hadamard_dim: Option<HadamardDim>,
        mode: CovarianceMode,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(TensorError::Invalid {
                op: "WhviLayer::new",
                message: format!("empty layer {in_dim}→{out_dim}"),
            });
        }
        let d = hadamard_dim.unwrap_or_else(|| HadamardDim::covering(in_dim.max(out_dim)));
        if d.get() < in_dim {
            return Err(TensorError::Invalid {
                op: "WhviLayer::new",
                message: format!("Hadamard dimension {} is smaller than input width {in_dim}", d.get()),
            });
        }
        let n_blocks = out_dim.div_ceil(d.get());
        let blocks = (0..n_blocks)
            .map(|k| {
                let prefix = if n_blocks == 1 {
                    name.to_string()
                } else {
                    format!("{name}.block{k}")
                };
                WhviBlock::new(store, &prefix, d, mode, rng)
            })
            .collect();
        Ok(Self {
            in_dim,
            out_dim,
            d,
            blocks,
        })
    }

    /// A single `d×d` block.
    pub fn square<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: HadamardDim,
        mode: CovarianceMode,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, d.get(), d.get(), Some(d), mode, rng).expect("square layer is valid")
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn hadamard_dim(&self) -> HadamardDim {
        self.d
    }

    pub fn blocks(&self) -> &[WhviBlock] {
        &self.blocks
    }

    pub fn mode(&self) -> CovarianceMode {
        self.blocks[0].q.mode()
    }

    /// Length of one `g`-space noise vector across all blocks.
    pub fn noise_dim(&self) -> usize {
        self.blocks.len() * self.d.get()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(WhviBlock::param_ids).collect()
    }

    fn run<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor, shared: bool) -> Result<Var<'t>> {
        let hs = h.shape();
        if hs.len() != 2 || hs[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "whvi_forward",
                lhs: hs,
                rhs: vec![0, self.in_dim],
            });
        }
        let expect = if shared {
            vec![self.noise_dim()]
        } else {
            vec![hs[0], self.noise_dim()]
        };
        if eps.shape() != expect.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "whvi_noise",
                lhs: eps.shape().to_vec(),
                rhs: expect,
            });
        }
        let d = self.d.get();
        let x = h.pad_last(d)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            let e = if self.blocks.len() == 1 {
                eps.clone()
            } else {
                slice_noise(eps, k * d, d)
            };
            let g = block.sample_g(bound, &e)?;
            outs.push(block.apply(bound, x, g)?);
        }
        Var::concat_last(&outs)?.slice_last(0, self.out_dim)
    }

    /// One weight sample `W~` shared by all rows: `eps` is `[noise_dim]`.
    pub fn forward_reparam<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        self.run(bound, h, eps, true)
    }

    /// Local reparameterization: each row gets its own draw of
    /// `W(mu) h + W(Sigma^{1/2} eps_row) h = m + A eps_row`, with
    /// `m = S1 H diag(mu) H S2 h` and `A = S1 H diag(H S2 h) Sigma^{1/2}`.
    /// Because `W(.)` is linear in `g`, this is evaluated as one pass with a
    /// per-row `g = mu + Sigma^{1/2} eps_row`. `eps` is `[b, noise_dim]`.
    pub fn forward_local_reparam<'t>(&self, bound: &Bound<'t>, h: Var<'t>, eps: &Tensor) -> Result<Var<'t>> {
        self.run(bound, h, eps, false)
    }

    pub fn kl_to_prior<'t>(&self, bound: &Bound<'t>) -> Result<Var<'t>> {
        let mut total = self.blocks[0].kl_to_prior(bound)?;
        for block in &self.blocks[1..] {
            total = total.add(block.kl_to_prior(bound)?)?;
        }
        Ok(total)
    }

    pub fn set_log_scale(&self, store: &mut ParamStore, log_sigma: f64) {
        for b in &self.blocks {
            b.q.set_log_scale(store, log_sigma);
        }
    }
}

fn slice_noise(eps: &Tensor, start: usize, len: usize) -> Tensor {
    let w = eps.last_dim();
    let mut shape = eps.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len;
    let data = eps
        .data()
        .chunks_exact(w)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::new(shape, data).expect("sliced shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fwht::naive_hadamard;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dim(d: usize) -> HadamardDim {
        HadamardDim::new(d).unwrap()
    }

    fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Dense `S1 H diag(g) H S2` from the naive Hadamard matrix.
    fn dense_w(s1: &[f64], s2: &[f64], g: &[f64]) -> Tensor {
        let d = g.len();
        let h = naive_hadamard(dim(d)).scale(1.0 / (d as f64).sqrt());
        let mut w = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            for j in 0..d {
                let v: f64 = (0..d).map(|k| h.get2(i, k) * g[k] * h.get2(k, j)).sum();
                w.set2(i, j, s1[i] * v * s2[j]);
            }
        }
        w
    }

    fn set_identity_scales(store: &mut ParamStore, block: &WhviBlock) {
        store.get_mut(block.s1).data_mut().fill(1.0);
        store.get_mut(block.s2).data_mut().fill(1.0);
    }

    #[test]
    fn sample_g_at_zero_noise_is_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [CovarianceMode::Diagonal, CovarianceMode::Full] {
            let mut store = ParamStore::new();
            let layer = WhviLayer::square(&mut store, "l", dim(4), mode, &mut rng);
            let mu = normal_tensor(&[4], &mut rng);
            *store.get_mut(layer.blocks()[0].q.mu) = mu.clone();
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let g = layer.blocks()[0].sample_g(&bound, &Tensor::zeros(vec![4])).unwrap();
            assert_eq!(g.value(), mu);
        }
    }

    #[test]
    fn degenerate_scale_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(4), CovarianceMode::Diagonal, &mut rng);
        layer.set_log_scale(&mut store, -20.0);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let eps = normal_tensor(&[4], &mut rng);
        let g = layer.blocks()[0].sample_g(&bound, &eps).unwrap().value();
        let mu = store.get(layer.blocks()[0].q.mu);
        for ((gi, mi), ei) in g.data().iter().zip(mu.data()).zip(eps.data()) {
            assert!((gi - mi).abs() <= 1e-8 * ei.abs().max(1.0));
        }
    }

    #[test]
    fn materialize_d2_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(2), CovarianceMode::Diagonal, &mut rng);
        let block = &layer.blocks()[0];
        set_identity_scales(&mut store, block);
        let (a, b) = (0.7, -1.3);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let g = tape.leaf(Tensor::vector(vec![a, b])).unwrap();
        let w = block.materialize_w(&bound, g).unwrap().value();
        let hand = [0.5 * (a + b), 0.5 * (a - b), 0.5 * (a - b), 0.5 * (a + b)];
        let oracle = dense_w(&[1.0, 1.0], &[1.0, 1.0], &[a, b]);
        for k in 0..4 {
            assert!((w.data()[k] - hand[k]).abs() < 1e-15);
            assert!((oracle.data()[k] - hand[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn materialize_annihilators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(8), CovarianceMode::Diagonal, &mut rng);
        let block = &layer.blocks()[0];
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let zero = tape.leaf(Tensor::zeros(vec![8])).unwrap();
        let w = block.materialize_w(&bound, zero).unwrap().value();
        assert!(w.data().iter().all(|&v| v == 0.0));

        store.get_mut(block.s1).data_mut().fill(0.0);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let g = tape.leaf(normal_tensor(&[8], &mut rng)).unwrap();
        let w = block.materialize_w(&bound, g).unwrap().value();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn materialize_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [2, 4, 8, 16] {
            let mut store = ParamStore::new();
            let layer = WhviLayer::square(&mut store, "l", dim(d), CovarianceMode::Diagonal, &mut rng);
            let block = &layer.blocks()[0];
            let g = normal_tensor(&[d], &mut rng);
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let w = block
                .materialize_w(&bound, tape.leaf(g.clone()).unwrap())
                .unwrap()
                .value();
            let oracle = dense_w(store.get(block.s1).data(), store.get(block.s2).data(), g.data());
            assert!(w.max_abs_diff(&oracle) < 1e-12, "d = {d}");
        }
    }

    #[test]
    fn forward_paths_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(8), CovarianceMode::Diagonal, &mut rng);
        *store.get_mut(layer.blocks()[0].q.mu) = normal_tensor(&[8], &mut rng);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let zero_h = tape.leaf(Tensor::zeros(vec![3, 8])).unwrap();
        let eps = normal_tensor(&[8], &mut rng);
        let out = layer.forward_reparam(&bound, zero_h, &eps).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let h = tape.leaf(normal_tensor(&[3, 8], &mut rng)).unwrap();
        let det = layer
            .forward_reparam(&bound, h, &Tensor::zeros(vec![8]))
            .unwrap()
            .value();
        let local = layer
            .forward_local_reparam(&bound, h, &Tensor::zeros(vec![3, 8]))
            .unwrap()
            .value();
        let mu = bound.var(layer.blocks()[0].q.mu);
        let w_mu = layer.blocks()[0].materialize_w(&bound, mu).unwrap().value();
        let dense = h.value().matmul(&w_mu.transpose().unwrap()).unwrap();
        assert!(det.max_abs_diff(&dense) < 1e-12);
        assert_eq!(det, local);
    }

    #[test]
    fn noise_shape_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(4), CovarianceMode::Diagonal, &mut rng);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let h = tape.leaf(Tensor::zeros(vec![2, 4])).unwrap();
        assert!(layer.forward_reparam(&bound, h, &Tensor::zeros(vec![2, 4])).is_err());
        assert!(layer.forward_local_reparam(&bound, h, &Tensor::zeros(vec![4])).is_err());
        let wrong = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(layer.forward_reparam(&bound, wrong, &Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn kl_closed_form_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for mode in [CovarianceMode::Diagonal, CovarianceMode::Full] {
            let mut store = ParamStore::new();
            let layer = WhviLayer::square(&mut store, "l", dim(1), mode, &mut rng);
            layer.set_log_scale(&mut store, 0.0);
            store.get_mut(layer.blocks()[0].q.mu).data_mut()[0] = 0.0;
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            assert_eq!(layer.kl_to_prior(&bound).unwrap().item().unwrap(), 0.0);
            store.get_mut(layer.blocks()[0].q.mu).data_mut()[0] = 1.0;
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            assert!((layer.kl_to_prior(&bound).unwrap().item().unwrap() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn full_covariance_matches_packed_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(4), CovarianceMode::Full, &mut rng);
        let q = &layer.blocks()[0].q;
        let ScaleParam::Cholesky(p) = q.scale else {
            panic!("full mode")
        };
        *store.get_mut(p) = normal_tensor(&[10], &mut rng).scale(0.3);
        let sigma = q.covariance(&store);
        assert!(sigma.max_abs_diff(&sigma.transpose().unwrap()) < 1e-15);
        // KL from the dense covariance via log det = 2 Σ log L_ii.
        let packed = store.get(p).data().to_vec();
        let log_det: f64 = 2.0 * (0..4).map(|i| packed[i * (i + 1) / 2 + i]).sum::<f64>();
        let trace: f64 = (0..4).map(|i| sigma.get2(i, i)).sum();
        let mu_sq: f64 = store.get(q.mu).data().iter().map(|m| m * m).sum();
        let expect = 0.5 * (trace + mu_sq - 4.0 - log_det);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let kl = layer.kl_to_prior(&bound).unwrap().item().unwrap();
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn rectangular_layers_pad_and_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let wide = WhviLayer::new(&mut store, "w", 3, 20, Some(dim(8)), CovarianceMode::Diagonal, &mut rng).unwrap();
        assert_eq!(wide.blocks().len(), 3);
        assert_eq!(wide.noise_dim(), 24);
        let narrow = WhviLayer::new(&mut store, "n", 5, 2, None, CovarianceMode::Diagonal, &mut rng).unwrap();
        assert_eq!(narrow.hadamard_dim().get(), 8);
        assert!(WhviLayer::new(
            &mut store,
            "bad",
            9,
            2,
            Some(dim(8)),
            CovarianceMode::Diagonal,
            &mut rng
        )
        .is_err());

        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let h = normal_tensor(&[2, 3], &mut rng);
        let eps = normal_tensor(&[24], &mut rng);
        let out = wide
            .forward_reparam(&bound, tape.leaf(h.clone()).unwrap(), &eps)
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[2, 20]);
        // Dense oracle: block k gives output columns 8k..8k+8.
        for (k, block) in wide.blocks().iter().enumerate() {
            let g: Vec<f64> = (0..8)
                .map(|i| {
                    let mu = store.get(block.q.mu).data()[i];
                    let ScaleParam::DiagLogSigma(ls) = block.q.scale else {
                        unreachable!()
                    };
                    mu + store.get(ls).data()[i].exp() * eps.data()[8 * k + i]
                })
                .collect();
            let w = dense_w(store.get(block.s1).data(), store.get(block.s2).data(), &g);
            for r in 0..2 {
                for c in 0..8 {
                    let col = 8 * k + c;
                    if col >= 20 {
                        continue;
                    }
                    let expect: f64 = (0..3).map(|j| w.get2(c, j) * h.get2(r, j)).sum();
                    assert!((out.get2(r, col) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cov_vect_w_refuses_large_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(32), CovarianceMode::Diagonal, &mut rng);
        assert!(layer.blocks()[0].cov_vect_w(&store).is_err());
    }

    #[test]
    fn cov_vect_w_d2_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "l", dim(2), CovarianceMode::Diagonal, &mut rng);
        let block = &layer.blocks()[0];
        set_identity_scales(&mut store, block);
        layer.set_log_scale(&mut store, 0.0);
        // vect(W) = ½ [a+b, a-b, a-b, a+b] = M [a, b].
        let m = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, -0.5], vec![0.5, -0.5], vec![0.5, 0.5]]).unwrap();
        let expect = m.matmul(&m.transpose().unwrap()).unwrap();
        let cov = block.cov_vect_w(&store).unwrap();
        assert!(cov.max_abs_diff(&expect) < 1e-15);

        layer.set_log_scale(&mut store, -30.0);
        let cov = block.cov_vect_w(&store).unwrap();
        assert!(cov.data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in [4usize, 16, 128] {
            let mut store = ParamStore::new();
            WhviLayer::square(&mut store, "l", dim(d), CovarianceMode::Diagonal, &mut rng);
            assert_eq!(store.num_trainable(), 4 * d);
            let mut store = ParamStore::new();
            WhviLayer::square(&mut store, "l", dim(d), CovarianceMode::Full, &mut rng);
            assert_eq!(store.num_trainable(), 3 * d + d * (d + 1) / 2);
        }
    }
}
