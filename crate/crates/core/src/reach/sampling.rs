//! Latin hypercube sampling of the parameter box.

use super::ParamBox;
use crate::robot::ParamCoords;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws `n` points stratified per coordinate: each of the 12 axes is split
/// into `n` equal bins holding exactly one sample. Deterministic under
/// `seed`.
pub fn latin_hypercube(n: usize, bounds: &ParamBox, seed: u64) -> Vec<ParamCoords> {
    assert!(n >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![ParamCoords::zeros(); n];
    for j in 0..12 {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(&mut rng);
        let width = bounds.hi[j] - bounds.lo[j];
        for (i, &bin) in bins.iter().enumerate() {
            let u: f64 = rng.gen();
            out[i][j] = bounds.lo[j] + (bin as f64 + u) / n as f64 * width;
        }
    }
    out
}
