//! Transfer operators and susceptibility functions for postcritically finite
//! unimodal interval maps.
//!
//! Pipeline: [`map_model`] (orbit, Markov partition, polarity) →
//! [`chart_atlas`] (singular charts, conjugated branches ψ_jk) →
//! [`transfer_operator`] (𝓛, 𝓛₀, spectrum, σ₀) → [`susceptibility`]
//! (pole decomposition of Y and the two evaluations of Ψ(λ)) →
//! [`report`] (configuration, artifacts, verification suite).

pub mod chart_atlas;
pub mod error;
pub mod map_model;
pub mod numerics;
pub mod report;
pub mod susceptibility;
pub mod transfer_operator;

pub use error::{Error, Result};
