//! Alternating modality masking pruning for two-backbone fusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`sgd`]: dense tensors, a small reverse-mode
//!   autodiff graph and masked SGD.
//! - [`model`], [`checkpoint`]: the LiDAR / camera / fusion model with its
//!   parameter partitions, modality masks and binary checkpoint format.
//! - [`compact`]: physical removal of pruned channels and MAC counts.
//! - [`data`]: synthetic two-modality data with planted cross-modal
//!   redundancy.
//! - [`altermoma`]: contribution and redundancy indicators, score assembly,
//!   global thresholding, structured aggregation and the full pruning run.
//! - [`baselines`]: magnitude, IMP, SNIP, SynFlow and random scoring.
//! - [`oracle`]: brute-force checks of every first-order approximation.
//! - [`config`], [`experiment`], [`report`]: the reproducible experiment
//!   harness behind the `altermoma` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod altermoma;
pub mod baselines;
mod binio;
pub mod checkpoint;
pub mod compact;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod planted;
pub mod report;
pub mod rng;
pub mod sgd;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Feeds, Graph, NodeId};
pub use model::{ArchConfig, FusionModel, ModalityMasks, Parameter, Partition};
pub use tensor::Tensor;
