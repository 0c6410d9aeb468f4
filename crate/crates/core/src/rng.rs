use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer), so that
/// independent streams can be derived without sharing generator state.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in stream {
        h = mix(h ^ mix(s.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded_rng(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
