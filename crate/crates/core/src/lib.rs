//! Disentangled interaction representations for one-stage human-object
//! interaction (HOI) detection, at desk scale.
pub mod attention;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
