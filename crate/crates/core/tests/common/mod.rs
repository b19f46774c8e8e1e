#![allow(dead_code)]

pub mod oracles;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdistill::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Entries bounded away from zero, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

use tsdistill::config::RunConfig;

/// Small, fast configuration on a short synthetic series.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "synth_len=160",
        "lookback=8",
        "horizon=4",
        "width=16",
        "layers=2",
        "heads=2",
        "prompt_len=4",
        "vocab_size=64",
        "max_anchor_tokens=8",
        "epochs=2",
        "batch_size=8",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg
}
