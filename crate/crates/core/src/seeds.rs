//! Seed hierarchy: every random draw is addressed by a path of integers
//! (root seed, step, iteration, chain, entity, ...) hashed into its own
//! generator, so draws do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(path))
}

pub fn standard_normals(path: &[u64], n: usize) -> Vec<f64> {
    let mut r = rng(path);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}
