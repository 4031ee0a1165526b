//! End-to-end motion forecasting on synthetic vectorized driving scenes.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), plain scene/prediction data types ([`scene`]), a query-based
//! interaction model ([`model`]), set-matching losses ([`matching`], [`loss`]),
//! end-to-end evaluation metrics ([`metrics`]), a deterministic synthetic scene
//! generator ([`synth`]), and a toy training loop ([`train`]).

pub mod geom;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;
