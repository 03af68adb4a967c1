//! Contrastive representation learning with a momentum memory bank and
//! online k-means pseudo-labels.
//!
//! Each training iteration combines two contrastive terms:
//!
//! - an intra-instance term: the current embedding of a sample against its own
//!   stored bank feature, with randomly drawn instances as negatives;
//! - an inter-instance term: a positive drawn from the same pseudo-class and
//!   negatives drawn from other pseudo-classes by one of four sampling strategies.
//!
//! Both terms use a cosine-margin NCE loss. Pseudo-labels come from mini-batch
//! k-means run over the bank and refreshed every iteration.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod trainer;
pub mod vector;

pub use bank::MemoryBank;
pub use clustering::ClusterState;
pub use encoder::{EncoderDims, EncoderParams};
pub use error::{Error, Result};
pub use loss::LossConfig;
pub use sampling::{SamplingConfig, Strategy};
