//! Timing helpers for the neighbor-search scaling check.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;

use crate::error::Result;
use crate::sparse::{Coord, CoordSet, NeighborTable};

/// Fraction of occupied voxels in the benchmark clouds.
pub const DENSITY: f64 = 0.1;

/// `n` distinct voxels drawn uniformly from a cube sized for [`DENSITY`].
pub fn random_cloud(n: usize, seed: u64) -> Vec<Coord> {
    let extent = ((n as f64 / DENSITY).cbrt().ceil() as i32).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = FxHashSet::default();
    while set.len() < n {
        set.insert([0, 1, 2].map(|_| rng.gen_range(0..extent)));
    }
    set.into_iter().collect()
}

/// Best of `repeats` wall times for building the window-`w` neighbor table
/// of an `n`-point cloud.
pub fn time_neighbor_table(n: usize, w: usize, repeats: usize, seed: u64) -> Result<Duration> {
    let set = CoordSet::new(random_cloud(n, seed), 1)?;
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let table = NeighborTable::build(&set, w)?;
        let dt = t.elapsed();
        std::hint::black_box(&table);
        best = best.min(dt);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clouds_have_the_requested_size() {
        let c = random_cloud(1000, 1);
        assert_eq!(c.len(), 1000);
        assert_eq!(c.iter().collect::<FxHashSet<_>>().len(), 1000);
    }
}
