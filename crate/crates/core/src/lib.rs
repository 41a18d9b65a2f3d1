//! Unsupervised cross-modal hashing driven by graph-neighbor coherence.
//!
//! The pipeline runs in five stages:
//!
//! * [`dataset`]: paired image/text feature matrices, the CMF file format,
//!   seeded splits and a clustered synthetic generator.
//! * [`simgraph`]: the fused cosine distance, the k-NN conditional
//!   probabilities and the coherence similarity that serves as training target.
//! * [`net`] and [`loss`]: two small hashing networks with hand-written
//!   backpropagation and the three similarity-preserving losses.
//! * [`trainer`]: the alternating real/binary optimization with validation
//!   based early stopping.
//! * [`retrieval`]: bit-packed codes, Hamming ranking and MAP evaluation.
//!
//! [`cli`] wires the stages into the `gchash` command.
//!
//! ```no_run
//! use gchash::dataset::{gen_synthetic, make_split, SplitFractions, SyntheticConfig, TrainSize};
//! use gchash::trainer::{train, TrainConfig};
//!
//! let ds = gen_synthetic(&SyntheticConfig::default()).unwrap();
//! let split = make_split(ds.m(), &SplitFractions {
//!     test_queries: 0.1,
//!     validation_queries: 0.1,
//!     train: TrainSize::All,
//! }, 0).unwrap();
//! let retrieval = ds.subset(&split.retrieval).unwrap();
//! let val = ds.subset(&split.validation_query).unwrap();
//! let cfg = TrainConfig { hidden: 64, bits: 16, ..TrainConfig::default() };
//! let model = train(&retrieval, &val, &retrieval, &cfg).unwrap();
//! println!("best epoch {}", model.report.best_epoch);
//! ```

pub mod benchmark;
mod binio;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod net;
pub mod retrieval;
pub mod simgraph;
pub mod trainer;

pub use error::{Error, Result};
