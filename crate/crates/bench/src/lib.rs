//! Shared fixtures for the benchmarks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uaf_core::dataset::Dataset;
use uaf_core::env::EnvConfig;
use uaf_core::report::ParetoPoint;
use uaf_core::train::{generate_dataset, TrainConfig};
use uaf_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// `n` points on a coarse grid so that ties and duplicates occur.
pub fn random_points(n: usize, seed: u64) -> Vec<ParetoPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ParetoPoint {
            label: format!("p{i}"),
            exec_time_min: rng.random_range(0..200) as f64 / 100.0,
            success_rate_pct: rng.random_range(0..=100) as f64,
        })
        .collect()
}

/// A small generated dataset under the system temp dir, reused across runs.
pub fn fixture_dataset(episodes: usize) -> Dataset {
    let root: PathBuf = std::env::temp_dir().join(format!("uaf-bench-{episodes}"));
    if root.join(uaf_core::dataset::MANIFEST_FILE).exists() {
        if let Ok(ds) = Dataset::open(&root) {
            if ds.len() == episodes {
                return ds;
            }
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(&EnvConfig::default(), episodes, 0, Path::new(&root)).expect("fixture dataset")
}

pub fn bench_train_config() -> TrainConfig {
    TrainConfig {
        total_steps: 1,
        ..TrainConfig::default()
    }
}
