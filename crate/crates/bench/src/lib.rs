//! Fixtures shared by the benchmarks.

use orbpred::chem::{Family, Geometry};
use orbpred::datagen::{min_weight_matching, sample_geometry, Matching};

/// A seeded random 3-D cluster and its pair structure.
pub fn cluster(n: usize, seed: u64) -> (Geometry, Matching) {
    let geom = sample_geometry(Family::Random3d, n, seed).expect("benchmark geometry");
    let matching = min_weight_matching(&geom).expect("benchmark matching");
    (geom, matching)
}
