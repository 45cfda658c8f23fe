use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a sequence of indices.
pub fn stream_seed(base: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(splitmix(base), |acc, &i| splitmix(acc ^ splitmix(i)))
}

/// Per-sample generator; results do not depend on processing order.
pub fn sample_rng(base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, &[index]))
}
