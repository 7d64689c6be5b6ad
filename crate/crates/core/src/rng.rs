//! Seeding. Every stochastic cell draws from a `ChaCha8Rng` whose seed is
//! derived from a root seed and the cell coordinates with splitmix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StabRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for cell `cell` under `root`.
pub fn derive_seed(root: u64, cell: &[u64]) -> u64 {
    cell.iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_from_seed(seed: u64) -> StabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cell_rng(root: u64, cell: &[u64]) -> StabRng {
    rng_from_seed(derive_seed(root, cell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = cell_rng(3, &[4]).random();
        let b: u64 = cell_rng(3, &[4]).random();
        assert_eq!(a, b);
    }
}
