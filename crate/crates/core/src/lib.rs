//! Signal and noise geometry of neural-network training trajectories.
//!
//! The pipeline reads a canonical checkpoint store ([`store`]), optionally
//! compresses deltas with a streaming Gaussian sketch ([`sketch`]), builds
//! the N×N delta dot-product matrix once ([`gram`]), and derives rolling
//! window spectra and their observables ([`spectral`]). Those series are
//! then coupled to a loss curve ([`timeseries`]) and scanned for
//! distribution shifts ([`changepoint`]). [`synth`] plants known structure
//! for testing every stage.

pub mod changepoint;
pub mod error;
pub mod gram;
pub mod rng;
pub mod sketch;
pub mod spectral;
pub mod stats;
pub mod store;
pub mod sum;
pub mod synth;
pub mod timeseries;

pub use error::{Error, Result};
