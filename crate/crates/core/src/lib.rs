pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod report;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
