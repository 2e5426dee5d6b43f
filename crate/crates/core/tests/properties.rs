use proptest::prelude::*;
use whvi::data::{synth_generate, Dataset, SyntheticFunction};
use whvi::layer::standard_normal;
use whvi::train::rng_for;
use whvi::whvi::{CovarianceMode, ScaleParam, WhviBlock, WhviLayer};
use whvi::{naive_hadamard, HadamardDim, ParamStore, Tape, Tensor};

fn mode(full: bool) -> CovarianceMode {
    if full {
        CovarianceMode::Full
    } else {
        CovarianceMode::Diagonal
    }
}

/// A block with every parameter randomized, including a non-trivial scale.
fn random_block(d: usize, full: bool, seed: u64) -> (ParamStore, WhviBlock) {
    let mut r = rng_for(seed, 0);
    let mut store = ParamStore::new();
    let block = WhviBlock::new(&mut store, "w", HadamardDim::new(d).unwrap(), mode(full), &mut r);
    let (ScaleParam::DiagLogSigma(p) | ScaleParam::Cholesky(p)) = block.q.scale;
    let n = store.get(p).len();
    *store.get_mut(p) = standard_normal(vec![n], &mut r).scale(0.3);
    for id in [block.s1, block.s2] {
        *store.get_mut(id) = standard_normal(vec![d], &mut r);
    }
    (store, block)
}

/// `S1 (H/√d) diag(g) (H/√d) S2` from the dense ±1 matrix.
fn dense_w(store: &ParamStore, block: &WhviBlock, g: &[f64]) -> Tensor {
    let d = g.len();
    let h = naive_hadamard(HadamardDim::new(d).unwrap()).scale(1.0 / (d as f64).sqrt());
    let (s1, s2) = (store.get(block.s1).data(), store.get(block.s2).data());
    let mut w = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..d {
            let v: f64 = (0..d).map(|k| h.get2(i, k) * g[k] * h.get2(k, j)).sum();
            w.set2(i, j, s1[i] * v * s2[j]);
        }
    }
    w
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Tensor) -> Tensor {
    let d = a.rows();
    let mut l = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get2(i, k) * l.get2(j, k)).sum();
            let v = if i == j {
                (a.get2(i, i) - s).sqrt()
            } else {
                (a.get2(i, j) - s) / l.get2(j, j)
            };
            l.set2(i, j, v);
        }
    }
    l
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fast_product_equals_dense_weight(k in 1u32..6, full: bool, seed: u64, b in 1usize..4) {
        let d = 1usize << k;
        let (store, block) = random_block(d, full, seed);
        let mut r = rng_for(seed, 1);
        let x = standard_normal(vec![b, d], &mut r);
        let eps = standard_normal(vec![d], &mut r);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let g = block.sample_g(&bound, &eps).unwrap();
        let fast = block.apply(&bound, tape.leaf(x.clone()).unwrap(), g).unwrap().value();
        let w = dense_w(&store, &block, g.value().data());
        let dense = x.matmul(&w.transpose().unwrap()).unwrap();
        prop_assert!(fast.max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn local_path_with_shared_noise_equals_shared_sample(k in 1u32..5, full: bool, seed: u64, b in 1usize..5) {
        let d = 1usize << k;
        let mut r = rng_for(seed, 0);
        let mut store = ParamStore::new();
        let layer = WhviLayer::square(&mut store, "w", HadamardDim::new(d).unwrap(), mode(full), &mut r);
        let x = standard_normal(vec![b, d], &mut r);
        let eps = standard_normal(vec![d], &mut r);
        let tiled = Tensor::new(vec![b, d], eps.data().iter().copied().cycle().take(b * d).collect()).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let xv = tape.leaf(x).unwrap();
        let shared = layer.forward_reparam(&bound, xv, &eps).unwrap().value();
        let local = layer.forward_local_reparam(&bound, xv, &tiled).unwrap().value();
        prop_assert!(shared.max_abs_diff(&local) < 1e-12);
    }

    #[test]
    fn kl_matches_covariance_formula_and_is_non_negative(k in 0u32..5, full: bool, seed: u64) {
        let d = 1usize << k;
        let (store, block) = random_block(d, full, seed);
        let tape = Tape::new();
        let kl = block.kl_to_prior(&store.bind(&tape).unwrap()).unwrap().item().unwrap();
        let sigma = block.q.covariance(&store);
        let l = cholesky(&sigma);
        let log_det: f64 = (0..d).map(|i| 2.0 * l.get2(i, i).ln()).sum();
        let trace: f64 = (0..d).map(|i| sigma.get2(i, i)).sum();
        let mu2: f64 = store.get(block.q.mu).data().iter().map(|v| v * v).sum();
        let oracle = 0.5 * (trace + mu2 - d as f64 - log_det);
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn induced_covariance_is_symmetric_psd(k in 1u32..4, full: bool, seed: u64) {
        let d = 1usize << k;
        let (store, block) = random_block(d, full, seed);
        let c = block.cov_vect_w(&store).unwrap();
        let n = d * d;
        prop_assert!(c.max_abs_diff(&c.transpose().unwrap()) < 1e-12);
        let v = standard_normal(vec![n, 1], &mut rng_for(seed, 2));
        let quad = v.transpose().unwrap().matmul(&c).unwrap().matmul(&v).unwrap().item().unwrap();
        let scale: f64 = (0..n).map(|i| c.get2(i, i)).sum::<f64>() * v.data().iter().map(|x| x * x).sum::<f64>();
        prop_assert!(quad >= -1e-12 * scale.max(1.0));
    }

    #[test]
    fn padded_input_matches_square_layer(in_dim in 1usize..8, seed: u64, b in 1usize..4) {
        let d = HadamardDim::covering(in_dim);
        let mut store = ParamStore::new();
        let layer = WhviLayer::new(&mut store, "w", in_dim, d.get(), Some(d), CovarianceMode::Diagonal, &mut rng_for(seed, 0)).unwrap();
        let mut r = rng_for(seed, 1);
        let x = standard_normal(vec![b, in_dim], &mut r);
        let eps = standard_normal(vec![d.get()], &mut r);
        let mut padded = Tensor::zeros(vec![b, d.get()]);
        for i in 0..b {
            for j in 0..in_dim {
                padded.set2(i, j, x.get2(i, j));
            }
        }
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let out = layer.forward_reparam(&bound, tape.leaf(x).unwrap(), &eps).unwrap().value();
        let g = layer.blocks()[0].sample_g(&bound, &eps).unwrap();
        let w = dense_w(&store, &layer.blocks()[0], g.value().data());
        let dense = padded.matmul(&w.transpose().unwrap()).unwrap();
        prop_assert!(out.max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn trainable_count_is_linear_in_d(k in 0u32..10, full: bool) {
        let d = 1usize << k;
        let mut store = ParamStore::new();
        WhviBlock::new(&mut store, "w", HadamardDim::new(d).unwrap(), mode(full), &mut rng_for(0, 0));
        let expect = if full { 3 * d + d * (d + 1) / 2 } else { 4 * d };
        prop_assert_eq!(store.num_trainable(), expect);
    }

    #[test]
    fn split_partitions_and_standardizes(n in 2usize..200, frac in 0.05f64..0.95, seed: u64) {
        let mut r = rng_for(seed, 0);
        let x = standard_normal(vec![n, 3], &mut r).map(|v| 5.0 + 3.0 * v);
        let y = standard_normal(vec![n, 1], &mut r);
        let ds = Dataset::new("p", x, y).split(frac, seed).unwrap();
        let s = ds.split_info().unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!s.train.is_empty() && !s.test.is_empty());
        let xt = ds.train_x().unwrap();
        if s.train.len() >= 2 {
            for c in 0..3 {
                let col: Vec<f64> = (0..xt.rows()).map(|i| xt.get2(i, c)).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                prop_assert!(m.abs() < 1e-10);
                prop_assert!((sd - 1.0).abs() < 1e-10);
            }
        }
        prop_assert_eq!(ds.train_y().unwrap().rows() + ds.test_y().unwrap().rows(), n);
    }

    #[test]
    fn synthetic_designs_are_deterministic_and_in_domain(which in 0usize..5, n in 1usize..64, seed: u64) {
        let f = SyntheticFunction::ALL[which];
        let a = synth_generate(f, n, 0.0, seed);
        prop_assert_eq!(&a, &synth_generate(f, n, 0.0, seed));
        prop_assert_eq!(a.n_features(), f.input_dim());
        for i in 0..n {
            let row = a.features().row(i);
            for (v, (lo, hi)) in row.iter().zip(f.domain()) {
                prop_assert!(v >= lo && v <= hi);
            }
            prop_assert_eq!(a.targets().get2(i, 0), f.evaluate(row));
        }
    }
}
