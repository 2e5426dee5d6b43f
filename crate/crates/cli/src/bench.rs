//! Timing of the in-place transform across dimensions.

use std::time::Instant;

use whvi::fwht_inplace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    /// Fastest of the repetitions, in seconds per transform.
    pub seconds: f64,
}

/// Times `fwht_inplace` at `2^k` for each `k` in `log2_dims`. Each
/// repetition runs enough transforms to cover about `2^24` butterfly
/// operations per size, and the sizes are interleaved within a repetition so
/// background load hits all of them alike. The minimum over `reps` is
/// reported.
pub fn fwht_bench(log2_dims: &[u32], reps: usize) -> Vec<BenchRow> {
    const MIN_WORK: usize = 1 << 24;
    let mut bufs: Vec<Vec<f64>> = log2_dims
        .iter()
        .map(|&k| (0..1usize << k).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect())
        .collect();
    let mut best = vec![f64::INFINITY; log2_dims.len()];
    for _ in 0..reps.max(1) {
        for ((v, &k), best) in bufs.iter_mut().zip(log2_dims).zip(best.iter_mut()) {
            let inner = (MIN_WORK / (v.len() * k.max(1) as usize)).max(1);
            fwht_inplace(v, true).expect("power of two");
            let start = Instant::now();
            for _ in 0..inner {
                fwht_inplace(std::hint::black_box(&mut v[..]), true).expect("power of two");
            }
            *best = best.min(start.elapsed().as_secs_f64() / inner as f64);
        }
    }
    log2_dims
        .iter()
        .zip(best)
        .map(|(&k, seconds)| BenchRow { dim: 1 << k, seconds })
        .collect()
}

/// `time(2^hi) / time(2^lo)` from a bench over exactly those two sizes.
pub fn scaling_ratio(lo: u32, hi: u32, reps: usize) -> f64 {
    let rows = fwht_bench(&[lo, hi], reps);
    rows[1].seconds / rows[0].seconds
}
