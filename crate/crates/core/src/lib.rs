//! Emotion steering benchmark toolkit: steering-vector derivation, game
//! templates, drift metrics, statistics, IRT calibration and the gatekeeper
//! audit.

pub mod audit;
pub mod games;
pub mod irt;
pub mod metrics;
pub mod pipeline;
pub mod schema;
pub mod stats;
pub mod steering;
