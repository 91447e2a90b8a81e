//! Shared fixtures for the benchmarks: a desk-scale model and inputs sized
//! like the default synthetic dataset, plus a larger relatedness matrix for
//! the selection solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsar_core::encoder::{EncoderConfig, ModelParams};
use zsar_core::tensor::Tensor;

pub struct DeskModel {
    pub config: EncoderConfig,
    pub params: ModelParams,
    pub frames: Vec<Vec<f64>>,
    pub word_ids: Vec<usize>,
}

pub fn desk_model() -> DeskModel {
    let config = EncoderConfig::desk(16, 22, 6, 4, 20, 1);
    let params = ModelParams::init(&config).expect("valid desk config");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = (0..6)
        .map(|_| (0..16).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect();
    DeskModel {
        config,
        params,
        frames,
        word_ids: vec![3, 7, 11],
    }
}

/// Relatedness between `rows` unseen and `cols` seen classes, all positive.
pub fn relatedness(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dimensions")
}
