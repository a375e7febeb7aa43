//! Fixtures shared by the benchmarks.

use pseudoview::experiments::{synth_scene, SceneConfig, Viewpoint};
use pseudoview::{Rng, Tensor};

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// A rendered image and its labels at the default size.
pub fn scene_sample(seed: u64) -> (Tensor, Vec<u8>) {
    let s = synth_scene(seed, Viewpoint::IDENTITY, &SceneConfig::default()).expect("identity view renders");
    (s.image, s.labels)
}
