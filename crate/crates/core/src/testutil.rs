//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, MsvqModel};
use crate::entropy::attach_entropy_codes;
use crate::layout::{build_layout, compute_stats, AllocationPreset, BitMatrix, SubVectorLayout};
use crate::matrix::FeatureMatrix;
use crate::trainer::{train, variance_scaled_lambda, TrainConfig};

/// Random model: N sub-vectors of dim D, no sharing, given bit rows.
pub fn random_model(rng: &mut impl Rng, d: usize, rows: &[Vec<u8>]) -> MsvqModel {
    let n = rows.len();
    let m = n * d;
    let mut perm: Vec<usize> = (0..m).collect();
    for k in (1..m).rev() {
        perm.swap(k, rng.random_range(0..=k));
    }
    let bits = BitMatrix::from_rows(rows).unwrap();
    let layout = SubVectorLayout::from_parts(d, perm, (0..n).collect(), n, bits).unwrap();
    let t_max = layout.t_max();
    let codebooks = (0..n)
        .map(|g| {
            (0..t_max)
                .map(|t| {
                    let b = layout.group_bits(g, t);
                    let scale = 0.5f32.powi(t as i32);
                    let v = (0..(1usize << b) * d)
                        .map(|_| rng.random_range(-scale..scale))
                        .collect();
                    Codebook::new(d, b, v).unwrap()
                })
                .collect()
        })
        .collect();
    let means = (0..m).map(|_| rng.random_range(-0.1f32..0.1)).collect();
    MsvqModel::new(layout, means, codebooks, false, vec![]).unwrap()
}

/// Small trained model on clustered data; entropy-coded models carry their codes.
pub fn fitted_model(seed: u64, ec: bool) -> (MsvqModel, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, m) = (400, 8);
    let data: Vec<f32> = (0..rows * m)
        .map(|k| {
            let scale = 1.0 / (1 + k % m) as f32;
            rng.random_range(-1.0f32..1.0) * scale
        })
        .collect();
    let data = FeatureMatrix::new(rows, m, data).unwrap();
    let stats = compute_stats(&data).unwrap();
    let alloc = AllocationPreset::Custom(BitMatrix::from_rows(&vec![vec![4, 3]; 4]).unwrap());
    let layout = build_layout(&stats, 2, 2, 2, &alloc).unwrap();
    let mut config = TrainConfig {
        seed,
        max_iters: 20,
        ..TrainConfig::default()
    };
    if ec {
        config = config.entropy_constrained(variance_scaled_lambda(stats.mean_variance(), 2.0, 2));
    }
    let (model, _) = train(&data, &layout, &config).unwrap();
    let model = if ec { attach_entropy_codes(model, &data).unwrap() } else { model };
    (model, data)
}
