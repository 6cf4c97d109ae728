//! Fine-grained category discovery from coarse labels.
//!
//! An encoder is pretrained with coarse cross-entropy, then refined with a
//! neighborhood contrastive objective over a momentum-encoder queue. Two
//! objectives are available: DOWN (rank-weighted contrastive loss) and STAR
//! (DOWN modulated by bidirectional KL divergence between embeddings, with a
//! trainable base `B`). Fine labels are assigned by k-means over test
//! embeddings or by nearest centroid against a bank built from training
//! clusters.
//!
//! ```no_run
//! use star_core::{data, training, inference, metrics};
//!
//! let synth = data::generate_synthetic(&data::SyntheticSpec::standard(1))?;
//! let config = training::StarConfig { n_coarse: 3, n_fine: 9, ..Default::default() };
//! let fit = training::fit(&synth.train, &config)?;
//! let test = fit.best.encode_batch(&synth.test.features())?;
//! let pred = inference::clustering_inference(&test, 9, 0)?;
//! let acc = metrics::hungarian_accuracy(&pred, &synth.test.fine_labels().unwrap())?;
//! # Ok::<(), star_core::Error>(())
//! ```

pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod neighborhood;
pub mod objective;
pub mod seed;
pub mod training;
pub mod vecmath;

pub use data::{Dataset, DatasetManifest, LabeledSample, SyntheticSpec};
pub use encoder::{EncoderParams, MomentumParams, OptimizerState};
pub use error::{Error, Result};
pub use inference::{CentroidBank, ClusterModel};
pub use metrics::{ContingencyTable, EvalReport};
pub use neighborhood::{MomentumQueue, NeighborSet, QueueEntry};
pub use objective::{LossBreakdown, Objective};
pub use training::{EpochRecord, StarConfig, TrainState};
pub use vecmath::{ProbVector, UnitEmbedding};
