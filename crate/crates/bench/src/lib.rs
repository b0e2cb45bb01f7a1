//! Deterministic inputs shared by the benchmarks.

use blcast_core::synth::{self, SynthConfig};
use blcast_core::{Matrix, OhlcvFrame};

/// One noisy synthetic asset of `days` observations.
pub fn frame(days: usize) -> OhlcvFrame {
    let market = synth::generate(&SynthConfig {
        assets: 1,
        days,
        ..SynthConfig::default()
    })
    .expect("synthetic market");
    market.assets.into_iter().next().expect("one asset").frame
}

/// Symmetric positive definite `n x n` matrix with daily-return scale.
pub fn covariance(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let x = ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5;
            m[(i, j)] = x;
        }
    }
    let mut s = m.matmul(&m.transpose()).expect("square");
    for i in 0..n {
        s[(i, i)] += 0.1;
    }
    s.scale(1e-4)
}
