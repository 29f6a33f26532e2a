//! Pair-ansatz orbital optimization for hydrogen clusters and a graph network
//! that predicts optimized orbitals from geometry.

pub mod chem;
pub mod datagen;
pub mod error;
pub mod features;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod orbital_opt;
pub mod pipeline;
pub mod spa;

pub use error::{Error, Result};
