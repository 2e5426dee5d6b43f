//! Closed-form simulator surrogates from the computer-experiments
//! literature, sampled on scrambled Sobol designs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFunction {
    /// 6-D Hartmann function on the unit cube.
    Hartmann6,
    /// Output transformerless push-pull circuit midpoint voltage (6-D).
    OtlCircuit,
    /// Piston cycle time (7-D).
    Piston,
    /// Borehole water flow rate (8-D).
    Borehole,
    /// Robot arm end-effector distance from origin (8-D).
    RobotArm,
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [1312.0, 1696.0, 5569.0, 124.0, 8283.0, 5886.0],
    [2329.0, 4135.0, 8307.0, 3736.0, 1004.0, 9991.0],
    [2348.0, 1451.0, 3522.0, 2883.0, 3047.0, 6650.0],
    [4047.0, 8828.0, 8732.0, 5743.0, 1091.0, 381.0],
];

impl SyntheticFunction {
    pub const ALL: [SyntheticFunction; 5] = [
        Self::Hartmann6,
        Self::OtlCircuit,
        Self::Piston,
        Self::Borehole,
        Self::RobotArm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hartmann6 => "hartmann6",
            Self::OtlCircuit => "otl-circuit",
            Self::Piston => "piston",
            Self::Borehole => "borehole",
            Self::RobotArm => "robot-arm",
        }
    }

    pub fn input_dim(self) -> usize {
        self.domain().len()
    }

    /// Per-input `(low, high)` bounds.
    pub fn domain(self) -> &'static [(f64, f64)] {
        match self {
            Self::Hartmann6 => &[(0.0, 1.0); 6],
            Self::OtlCircuit => &[
                (50.0, 150.0),
                (25.0, 70.0),
                (0.5, 3.0),
                (1.2, 2.5),
                (0.25, 1.2),
                (50.0, 300.0),
            ],
            Self::Piston => &[
                (30.0, 60.0),
                (0.005, 0.020),
                (0.002, 0.010),
                (1000.0, 5000.0),
                (90000.0, 110000.0),
                (290.0, 296.0),
                (340.0, 360.0),
            ],
            Self::Borehole => &[
                (0.05, 0.15),
                (100.0, 50000.0),
                (63070.0, 115600.0),
                (990.0, 1110.0),
                (63.1, 116.0),
                (700.0, 820.0),
                (1120.0, 1680.0),
                (9855.0, 12045.0),
            ],
            Self::RobotArm => &[
                (0.0, 2.0 * PI),
                (0.0, 2.0 * PI),
                (0.0, 2.0 * PI),
                (0.0, 2.0 * PI),
                (0.0, 1.0),
                (0.0, 1.0),
                (0.0, 1.0),
                (0.0, 1.0),
            ],
        }
    }

    pub fn evaluate(self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        match self {
            Self::Hartmann6 => -(0..4)
                .map(|i| {
                    let inner: f64 = (0..6)
                        .map(|j| {
                            let d = x[j] - 1e-4 * HARTMANN_P[i][j];
                            HARTMANN_A[i][j] * d * d
                        })
                        .sum();
                    HARTMANN_ALPHA[i] * (-inner).exp()
                })
                .sum::<f64>(),
            Self::OtlCircuit => {
                let [rb1, rb2, rf, rc1, rc2, beta] = [x[0], x[1], x[2], x[3], x[4], x[5]];
                let vb1 = 12.0 * rb2 / (rb1 + rb2);
                let b = beta * (rc2 + 9.0);
                (vb1 + 0.74) * b / (b + rf) + 11.35 * rf / (b + rf) + 0.74 * rf * b / ((b + rf) * rc1)
            }
            Self::Piston => {
                let [m, s, v0, k, p0, ta, t0] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
                let a = p0 * s + 19.62 * m - k * v0 / s;
                let v = s / (2.0 * k) * ((a * a + 4.0 * k * p0 * v0 * ta / t0).sqrt() - a);
                2.0 * PI * (m / (k + s * s * p0 * v0 * ta / (t0 * v * v))).sqrt()
            }
            Self::Borehole => {
                let [rw, r, tu, hu, tl, hl, l, kw] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]];
                let lr = (r / rw).ln();
                2.0 * PI * tu * (hu - hl) / (lr * (1.0 + 2.0 * l * tu / (lr * rw * rw * kw) + tu / tl))
            }
            Self::RobotArm => {
                let (mut u, mut v, mut angle) = (0.0, 0.0, 0.0);
                for i in 0..4 {
                    angle += x[i];
                    u += x[4 + i] * angle.cos();
                    v += x[4 + i] * angle.sin();
                }
                (u * u + v * v).sqrt()
            }
        }
    }
}

/// `n` points of an Owen-scrambled Sobol design over the function's domain,
/// with i.i.d. `N(0, noise_std²)` added to the responses.
pub fn synth_generate(function: SyntheticFunction, n: usize, noise_std: f64, seed: u64) -> Dataset {
    let dim = function.input_dim();
    let domain = function.domain();
    let scramble = (seed ^ (seed >> 32)) as u32;
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let start = xs.len();
        for (j, &(lo, hi)) in domain.iter().enumerate() {
            let u = f64::from(sobol_burley::sample(i as u32, j as u32, scramble));
            xs.push(lo + u * (hi - lo));
        }
        let y = function.evaluate(&xs[start..]);
        let e: f64 = noise.sample(StandardNormal);
        ys.push(y + noise_std * e);
    }
    Dataset::new(
        function.name(),
        Tensor::new(vec![n, dim], xs).expect("sized"),
        Tensor::new(vec![n, 1], ys).expect("sized"),
    )
}
