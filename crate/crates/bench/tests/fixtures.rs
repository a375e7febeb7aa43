use pseudoview_bench::{gaussian, scene_sample};

#[test]
fn fixtures_are_deterministic_and_shaped() {
    assert_eq!(gaussian(&[4, 3], 9), gaussian(&[4, 3], 9));
    let (image, labels) = scene_sample(1);
    assert_eq!(image.shape(), &[64, 64, 3]);
    assert_eq!(labels.len(), 64 * 64);
    assert_eq!(scene_sample(1).1, labels);
}
