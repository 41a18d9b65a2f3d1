//! The seeded synthetic benchmark used by the examples and regression tests.
//!
//! 1400 items in 5 clusters of 32-dimensional image and text features with
//! feature noise 0.6, split into 200 test queries, 200 validation queries and
//! a 1000-item retrieval set that doubles as the training set.

use crate::dataset::{gen_synthetic, make_split, PairedDataset, SplitFractions, SyntheticConfig, TrainSize};
use crate::error::Result;
use crate::loss::LossParams;
use crate::net::{HashNet, SgdConfig};
use crate::simgraph::GcParams;
use crate::trainer::{validation_map, TrainConfig};

pub const TEST_QUERIES: usize = 200;
pub const VAL_QUERIES: usize = 200;
pub const TRAIN_ITEMS: usize = 1000;
pub const FEATURE_NOISE: f64 = 0.6;
/// Weight of the consistency loss on this benchmark. At 1.0 the codes of all
/// items collapse onto one saturated vector within the first epoch.
pub const LAMBDA2: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: PairedDataset,
    pub val_queries: PairedDataset,
    pub test_queries: PairedDataset,
}

impl Benchmark {
    /// Generates and splits the benchmark data for `seed`.
    pub fn new(seed: u64, label_noise: f64) -> Result<Self> {
        Self::with_noise(seed, FEATURE_NOISE, label_noise)
    }

    pub fn with_noise(seed: u64, noise: f64, label_noise: f64) -> Result<Self> {
        let m = TEST_QUERIES + VAL_QUERIES + TRAIN_ITEMS;
        let ds = gen_synthetic(&SyntheticConfig {
            n_clusters: 5,
            per_cluster: m / 5,
            d_img: 32,
            d_txt: 32,
            noise,
            label_noise,
            seed,
        })?;
        let split = make_split(
            m,
            &SplitFractions {
                test_queries: TEST_QUERIES as f64 / m as f64,
                validation_queries: VAL_QUERIES as f64 / m as f64,
                train: TrainSize::All,
            },
            seed,
        )?;
        Ok(Self {
            train: ds.subset(&split.train)?,
            val_queries: ds.subset(&split.validation_query)?,
            test_queries: ds.subset(&split.test_query)?,
        })
    }

    /// Training settings of the benchmark: default SGD (50 epochs), 16 bits,
    /// 64 hidden units.
    pub fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            gc: GcParams::default(),
            loss: LossParams {
                lambda2: LAMBDA2,
                ..LossParams::default()
            },
            sgd: SgdConfig::default(),
            seed,
            bits: 16,
            hidden: 64,
            ..TrainConfig::default()
        }
    }

    /// Test-query MAP `(I2T, T2I)` against the training/retrieval set.
    pub fn test_map(&self, img: &HashNet, txt: &HashNet) -> Result<(f64, f64)> {
        validation_map(img, txt, &self.test_queries, &self.train)
    }
}
