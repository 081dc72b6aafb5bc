use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for one scene: the seed picks the key and the scene index the
/// stream, so scenes can be processed in any order or in parallel.
pub(crate) fn scene_rng(seed: u64, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64);
    rng
}
