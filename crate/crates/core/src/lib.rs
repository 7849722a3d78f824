//! Sound event localization and detection with the CST-former network.
//!
//! Pipeline: FoA audio ([`audio`]) → log-mel and intensity-vector features
//! ([`features`]) → CST-former ([`model`]) → multi-ACCDOA output, trained
//! with the ADPIT loss ([`loss`]) and scored with the SELD metrics ([`metrics`]).

pub mod audio;
pub mod cache;
pub mod error;
pub mod events;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod target;
pub mod train;

pub use error::{Result, SeldError};
