//! Multiple instance learning over ordered bags with guided attention.
//!
//! Modules, bottom-up: [`bagio`] (data model and bag files), [`synth`]
//! (shifted-mean generator and Bayes oracles), [`autodiff`] (reverse-mode
//! tape), [`models`] (pooling architectures), [`guidance`] (reference
//! distributions and divergences), [`metrics`], [`train`], [`ceilings`] and
//! [`experiment`] (config-driven runs used by the CLI).

pub mod autodiff;
pub mod bagio;
pub mod ceilings;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod synth;
pub mod train;

pub use bagio::{Bag, Dataset, Split};
pub use error::{Error, Result};
pub use guidance::{Divergence, GuidanceSpec};
pub use metrics::MetricsReport;
pub use models::{Model, ModelSpec, Pooling, Smooth};
pub use synth::SynthConfig;
pub use train::{TrainConfig, TrainHistory};
pub use experiment::ExperimentConfig;
