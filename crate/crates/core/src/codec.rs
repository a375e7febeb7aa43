//! Perspective encoder and all-MLP reconstruction decoder.
//!
//! Encoder: 1x1 channel squeeze, contourlet texture, 2x2 average pooling,
//! then two 1x1 heads: a sigmoid point-ness map and an L2-normalised
//! descriptor map. The descriptor `p` is their channel concatenation on the
//! half-resolution grid. The decoder maps every cell of `p` through a small
//! MLP to a 2x2 patch of the input feature and reassembles the map.

use serde::{Deserialize, Serialize};

use crate::contourlet::Contourlet;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

const NORM_EPS: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Laplacian pyramid levels (0 passes the squeezed feature through).
    pub levels: usize,
    /// Directional tree depth.
    pub depth: usize,
    /// Channels kept by the squeeze before texture extraction.
    pub squeeze: usize,
    /// Descriptor length per cell.
    pub descriptor_dim: usize,
    /// Width of both decoder hidden layers.
    pub decoder_hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { levels: 2, depth: 3, squeeze: 2, descriptor_dim: 32, decoder_hidden: 16 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(config_err!("directional depth must be in 1..=4, got {}", self.depth));
        }
        if self.squeeze == 0 || self.descriptor_dim == 0 || self.decoder_hidden == 0 {
            return Err(config_err!("codec widths must be positive"));
        }
        Ok(())
    }
}

/// Point-ness map and unit descriptors on the encoder grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PerspectiveDescriptor {
    pub pointness: Tensor,
    pub descriptors: Tensor,
}

impl PerspectiveDescriptor {
    /// `H' x W' x (D + 1)`: point-ness first, then the descriptor.
    pub fn combined(&self) -> Tensor {
        let (h, w, d) = self.descriptors.hwc().expect("rank 3");
        let c = d + 1;
        Tensor::from_fn(&[h, w, c], |i| {
            let (cell, k) = (i / c, i % c);
            if k == 0 {
                self.pointness.data()[cell]
            } else {
                self.descriptors.data()[cell * d + k - 1]
            }
        })
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.combined().into_data()
    }
}

#[derive(Clone, Debug)]
pub struct PerspectiveCodec {
    cfg: CodecConfig,
    channels: usize,
    height: usize,
    width: usize,
    texture: Contourlet,
    squeeze_w: ParamId,
    squeeze_b: ParamId,
    sp_w: ParamId,
    sp_b: ParamId,
    sd_w: ParamId,
    sd_b: ParamId,
    dec: [(ParamId, ParamId); 3],
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub pointness: Var,
    pub descriptors: Var,
    /// `H' x W' x (D + 1)`.
    pub combined: Var,
}

impl PerspectiveCodec {
    /// Registers the codec parameters under `prefix` for `H x W x C` inputs.
    pub fn new(
        cfg: CodecConfig,
        (height, width, channels): (usize, usize, usize),
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if height % 2 != 0 || width % 2 != 0 {
            return Err(config_err!("codec input extents must be even, got {height}x{width}"));
        }
        let texture = Contourlet::new(cfg.levels, cfg.depth)?;
        texture.check_extent(height, width)?;
        let tex = texture.output_channels(cfg.squeeze);
        let d = cfg.descriptor_dim;
        let hid = cfg.decoder_hidden;
        let mut lin = |name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
            let w = store.normal(&format!("{prefix}.{name}.w"), &[i, o], (1.0 / i as f64).sqrt(), rng)?;
            let b = store.constant(&format!("{prefix}.{name}.b"), &[o], 0.0)?;
            Ok((w, b))
        };
        let (squeeze_w, squeeze_b) = lin("squeeze", channels, cfg.squeeze)?;
        let (sp_w, sp_b) = lin("point_head", tex, 1)?;
        let (sd_w, sd_b) = lin("desc_head", tex, d)?;
        let dec = [
            lin("decoder.0", d + 1, hid)?,
            lin("decoder.1", hid, hid)?,
            lin("decoder.2", hid, 4 * channels)?,
        ];
        Ok(Self {
            cfg,
            channels,
            height,
            width,
            texture,
            squeeze_w,
            squeeze_b,
            sp_w,
            sp_b,
            sd_w,
            sd_b,
            dec,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Shape of the combined descriptor map.
    pub fn descriptor_shape(&self) -> [usize; 3] {
        [self.height / 2, self.width / 2, self.cfg.descriptor_dim + 1]
    }

    /// Flattened descriptor length.
    pub fn descriptor_len(&self) -> usize {
        self.descriptor_shape().iter().product()
    }

    pub fn encoder_params(&self) -> [ParamId; 6] {
        [self.squeeze_w, self.squeeze_b, self.sp_w, self.sp_b, self.sd_w, self.sd_b]
    }

    pub fn decoder_params(&self) -> [ParamId; 6] {
        let [(a, b), (c, d), (e, f)] = self.dec;
        [a, b, c, d, e, f]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.height, self.width, self.channels] {
            return Err(shape_err!(
                "codec expects {}x{}x{}, got {shape:?}",
                self.height,
                self.width,
                self.channels
            ));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<EncodedVars> {
        self.check_input(g.value(f).shape())?;
        let (w, b) = (g.param(store, self.squeeze_w), g.param(store, self.squeeze_b));
        let squeezed = g.linear(f, w, Some(b))?;
        let tex = self.texture.texture_graph(g, squeezed)?;
        let pooled = g.avg_pool2(tex)?;
        let (w, b) = (g.param(store, self.sp_w), g.param(store, self.sp_b));
        let sp = g.linear(pooled, w, Some(b))?;
        let pointness = g.sigmoid(sp);
        let (w, b) = (g.param(store, self.sd_w), g.param(store, self.sd_b));
        let sd = g.linear(pooled, w, Some(b))?;
        let descriptors = g.l2_normalize_last(sd, NORM_EPS)?;
        let combined = g.concat_last(&[pointness, descriptors])?;
        Ok(EncodedVars { pointness, descriptors, combined })
    }

    /// Decodes a combined descriptor map (or its flattening) back to `H x W x C`.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, p: Var) -> Result<Var> {
        let shape = self.descriptor_shape();
        if g.value(p).len() != self.descriptor_len() {
            return Err(shape_err!(
                "descriptor of {} values, expected {}",
                g.value(p).len(),
                self.descriptor_len()
            ));
        }
        let mut x = if g.value(p).shape() == shape { p } else { g.reshape(p, &shape)? };
        for (i, &(w, b)) in self.dec.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            x = g.linear(x, w, Some(b))?;
            if i < 2 {
                x = g.gelu(x);
            }
        }
        g.depth_to_space(x, 2)
    }

    pub fn encode_perspective(&self, store: &ParamStore, f: &Tensor) -> Result<PerspectiveDescriptor> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let e = self.encode_graph(&mut g, store, fv)?;
        Ok(PerspectiveDescriptor {
            pointness: g.value(e.pointness).clone(),
            descriptors: g.value(e.descriptors).clone(),
        })
    }

    /// Accepts the combined map or any tensor with the same number of values.
    pub fn decode_perspective(&self, store: &ParamStore, p: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let out = self.decode_graph(&mut g, store, pv)?;
        Ok(g.value(out).clone())
    }

    /// `|D(p) - F|_2` over all elements.
    pub fn reconstruction_loss(&self, store: &ParamStore, f: &Tensor, p: &PerspectiveDescriptor) -> Result<f64> {
        reconstruction_distance(&self.decode_perspective(store, &p.combined())?, f)
    }
}

/// Euclidean norm of `reconstructed - target`.
pub fn reconstruction_distance(reconstructed: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(reconstructed.sub(target)?.norm_l2())
}

/// Graph version of [`reconstruction_distance`].
pub fn reconstruction_loss_graph(g: &mut Graph, reconstructed: Var, target: Var) -> Result<Var> {
    let d = g.sub(reconstructed, target)?;
    Ok(g.l2_norm(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_coords, relative_error};

    fn setup(seed: u64) -> (PerspectiveCodec, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let codec = PerspectiveCodec::new(CodecConfig::default(), (8, 8, 6), &mut store, &mut rng, "codec").unwrap();
        for id in codec.encoder_params().into_iter().chain(codec.decoder_params()) {
            if store.name(id).ends_with(".b") {
                let noise: Vec<f64> = (0..store.get(id).len()).map(|_| 0.1 * rng.normal()).collect();
                let t = Tensor::new(store.get(id).shape().to_vec(), noise).unwrap();
                *store.get_mut(id) = t;
            }
        }
        (codec, store)
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[8, 8, 6], |_| rng.normal())
    }

    #[test]
    fn encoder_contract() {
        let (codec, store) = setup(1);
        let p = codec.encode_perspective(&store, &input(2)).unwrap();
        assert_eq!(p.pointness.shape(), &[4, 4, 1]);
        assert_eq!(p.descriptors.shape(), &[4, 4, 32]);
        assert!(p.pointness.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for cell in p.descriptors.data().chunks(32) {
            let n: f64 = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.combined().shape(), &[4, 4, 33]);
        assert_eq!(p.flattened().len(), codec.descriptor_len());
        assert_eq!(p, codec.encode_perspective(&store, &input(2)).unwrap());
    }

    #[test]
    fn decoder_contract() {
        let (codec, store) = setup(3);
        let zero = Tensor::zeros(&[codec.descriptor_len()]);
        let out = codec.decode_perspective(&store, &zero).unwrap();
        assert_eq!(out.shape(), &[8, 8, 6]);
        assert!(out.is_finite());
        // Zero input: every cell sees the same bias response.
        let (w, b) = (store.get(codec.dec[2].0), store.get(codec.dec[2].1));
        let h0: Vec<f64> = store.get(codec.dec[0].1).data().iter().map(|&v| crate::numerics::kernels::gelu(v)).collect();
        let h1: Vec<f64> = (0..16)
            .map(|j| {
                let s: f64 = (0..16).map(|i| h0[i] * store.get(codec.dec[1].0).data()[i * 16 + j]).sum();
                crate::numerics::kernels::gelu(s + store.get(codec.dec[1].1).data()[j])
            })
            .collect();
        let cell: Vec<f64> = (0..24)
            .map(|j| (0..16).map(|i| h1[i] * w.data()[i * 24 + j]).sum::<f64>() + b.data()[j])
            .collect();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..6 {
                    let k = ((y % 2) * 2 + x % 2) * 6 + c;
                    assert!((out.data()[(y * 8 + x) * 6 + c] - cell[k]).abs() < 1e-12);
                }
            }
        }
        assert!(codec.decode_perspective(&store, &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn distance_cases() {
        let a = input(4);
        assert_eq!(reconstruction_distance(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[17] += 1.0;
        assert!((reconstruction_distance(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = input(5);
        let mut naive = 0.0;
        for i in 0..a.len() {
            naive += (c.data()[i] - a.data()[i]).powi(2);
        }
        assert!((reconstruction_distance(&c, &a).unwrap() - naive.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (codec, store) = setup(6);
        assert!(codec.encode_perspective(&store, &Tensor::zeros(&[8, 8, 5])).is_err());
        let mut s = ParamStore::new();
        let cfg = CodecConfig { levels: 3, ..CodecConfig::default() };
        assert!(PerspectiveCodec::new(cfg, (4, 4, 6), &mut s, &mut Rng::new(0), "c").is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let (codec, store) = setup(7);
        let f = input(8);
        let loss_with = |st: &ParamStore| -> Result<f64> {
            let p = codec.encode_perspective(st, &f)?;
            codec.reconstruction_loss(st, &f, &p)
        };
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let e = codec.encode_graph(&mut g, &store, fv).unwrap();
        let rec = codec.decode_graph(&mut g, &store, e.combined).unwrap();
        let l = reconstruction_loss_graph(&mut g, rec, fv).unwrap();
        assert!((g.value(l).item() - loss_with(&store).unwrap()).abs() < 1e-12);
        let grads = g.backward(l);
        let mut acc = store.zeros_like();
        grads.accumulate_into(&mut acc, 1.0);
        let mut rng = Rng::new(9);
        let mut checked = 0;
        for id in codec.encoder_params().into_iter().chain(codec.decoder_params()) {
            let t = store.get(id).clone();
            let coords: Vec<usize> = (0..4.min(t.len())).map(|_| rng.below(t.len())).collect();
            let num = finite_diff_coords(
                |x| {
                    let mut st = store.clone();
                    *st.get_mut(id) = x.clone();
                    loss_with(&st)
                },
                &t,
                1e-5,
                coords.iter().copied(),
            )
            .unwrap();
            for (&c, n) in coords.iter().zip(num) {
                let a = acc[id.index()].data()[c];
                assert!(relative_error(a, n, 1e-6) < 1e-4, "{} [{c}]: {a} vs {n}", store.name(id));
                checked += 1;
            }
        }
        assert!(checked >= 40);
    }
}
