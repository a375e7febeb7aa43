//! The codec alone learns to reconstruct a small set of structured feature maps.

use pseudoview::codec::{reconstruction_loss_graph, CodecConfig, PerspectiveCodec};
use pseudoview::model::SgdMomentum;
use pseudoview::numerics::{Graph, ParamStore};
use pseudoview::{Rng, Tensor};

const SIZE: usize = 8;
const CHANNELS: usize = 48;

/// Oriented gratings mixed into the channels with fixed random loadings.
fn toy_set(count: usize) -> Vec<Tensor> {
    let mut rng = Rng::new(11);
    let loadings: Vec<[f64; 2]> = (0..CHANNELS).map(|_| [rng.normal(), rng.normal()]).collect();
    (0..count)
        .map(|i| {
            let angle = std::f64::consts::PI * i as f64 / count as f64;
            let (s, c) = angle.sin_cos();
            let w = 2.0 * std::f64::consts::PI / 4.0;
            Tensor::from_fn(&[SIZE, SIZE, CHANNELS], |idx| {
                let (y, x, ch) = ((idx / CHANNELS) / SIZE, (idx / CHANNELS) % SIZE, idx % CHANNELS);
                let t = w * (x as f64 * c + y as f64 * s);
                loadings[ch][0] * t.cos() + loadings[ch][1] * t.sin()
            })
        })
        .collect()
}

fn relative_error(codec: &PerspectiveCodec, store: &ParamStore, f: &Tensor) -> f64 {
    let p = codec.encode_perspective(store, f).unwrap();
    let rec = codec.decode_perspective(store, &p.combined()).unwrap();
    rec.sub(f).unwrap().norm_l2() / f.norm_l2()
}

#[test]
fn reconstructs_toy_set() {
    let set = toy_set(6);
    let mut store = ParamStore::new();
    let codec =
        PerspectiveCodec::new(CodecConfig::default(), (SIZE, SIZE, CHANNELS), &mut store, &mut Rng::new(3), "codec").unwrap();
    let mut opt = SgdMomentum::new(&store, 0.9);
    let before: f64 = set.iter().map(|f| relative_error(&codec, &store, f)).fold(0.0, f64::max);
    let iters = 3000;
    for it in 0..iters {
        let f = &set[it % set.len()];
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let enc = codec.encode_graph(&mut g, &store, x).unwrap();
        let rec = codec.decode_graph(&mut g, &store, enc.combined).unwrap();
        let loss = reconstruction_loss_graph(&mut g, rec, x).unwrap();
        let mut grads = store.zeros_like();
        g.backward(loss).accumulate_into(&mut grads, 1.0);
        opt.step(&mut store, &grads, 0.01 * (1.0 - it as f64 / iters as f64));
    }
    let after: f64 = set.iter().map(|f| relative_error(&codec, &store, f)).fold(0.0, f64::max);
    assert!(after < 0.2, "worst relative error {before:.3} -> {after:.3}");
}
