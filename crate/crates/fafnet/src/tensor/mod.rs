//! Minimal reverse-mode differentiable tensor engine: dense tensors,
//! named parameter storage, a Wengert tape with the operators the fusion
//! network needs, and finite-difference gradient verification.

pub mod conv;
pub mod data;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use data::{feature_map, FeatureMap, Real, TensorData};
pub use gradcheck::{finite_diff_check, sample_coords, Coord, GradCheckReport};
pub use params::{ParamEntry, ParamStore};
pub use tape::{Tape, TapeGrads, Var};
