//! Class unlearning without the retained data.
//!
//! The pipeline removes one class `c_f` from a trained classifier:
//!
//! 1. [`inversion`] synthesizes a proxy for the retained data from the
//!    model alone (cross-entropy toward retained labels, total-variation and
//!    ℓ2 image priors, batch-norm statistic matching).
//! 2. [`forgetting`] relabels the forget set, by default with each sample's
//!    largest wrong logit.
//! 3. [`projection`] builds per-layer uncentered activation covariances on
//!    the proxy set and [`navigation`] minimizes the forgetting loss with
//!    Adam steps projected onto their approximate null spaces, so layer
//!    outputs on the proxy data stay put.
//!
//! [`baselines`] and [`metrics`] reproduce the comparison methods and the
//! evaluation quantities; [`experiment`] wires everything to configs and
//! result directories.

pub mod baselines;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod forgetting;
pub mod inversion;
pub mod metrics;
pub mod navigation;
pub mod nn;
pub mod optim;
pub mod projection;

pub use error::{Error, Result};
