//! VirDA core: parameter-efficient unsupervised domain adaptation through
//! per-domain visual reprogramming layers on a frozen image-classification
//! backbone.
//!
//! The crate is organised around the training cascade: a [`reprogram::VrLayer`]
//! transforms inputs, a frozen [`backbone::FrozenBackbone`] extracts features,
//! and per-domain [`heads`] classify them. [`objectives`] hosts the inter- and
//! intra-domain losses, [`trainer`] drives optimisation and evaluation, and
//! [`artifacts`] persists the per-domain trainable state.

pub mod augment;
pub mod artifacts;
pub mod backbone;
pub mod data;
pub mod error;
pub mod heads;
pub mod layers;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod pareto;
pub mod reprogram;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use reprogram::{DomainId, VrConfig, VrLayer};
