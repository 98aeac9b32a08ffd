//! Shared fixtures for the pipeline benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surfel_track_core::diagnostics::{random_fixture, PhotometricFixture};
use surfel_track_core::synth::{make_scene, Scene};

pub fn photometric_fixture(seed: u64) -> PhotometricFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_fixture(&mut rng)
}

pub fn bench_scene(seed: u64) -> Scene {
    make_scene("bending_sheet", seed).expect("preset exists")
}
