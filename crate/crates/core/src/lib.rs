//! Deep convolutional neuro-fuzzy inference.
//!
//! A small convolutional base extracts `N_V` features per image; a
//! log-domain ANFIS head with one rule per class turns them into logits.
//! Both parts train jointly with Adam. The trained head reads as a rule base,
//! and each rule's medoid sample, explained with guided backpropagation,
//! stands in for the whole rule.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod fuzzy;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use backbone::{Backbone, BackboneConfig, LayerSpec};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use fuzzy::FuzzyHeadParams;
pub use model::Dcnfis;
pub use tape::{BackwardMode, Tape, Var};
pub use tensor::{Real, Tensor};
