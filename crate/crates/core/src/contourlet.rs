//! Contourlet texture extraction: a cascaded Laplacian pyramid whose
//! band-pass residuals are split into `2^z` orientation subbands by an
//! undecimated directional filter bank, with all levels stacked on the
//! finest grid.
//!
//! Pyramid and filter-bank boundaries use mirror reflection so constant
//! images produce exactly zero detail.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::resample::{apply_separable, reflect101, AxisMap};
use crate::numerics::{Graph, Tensor, Var};

/// Side length of every directional kernel.
pub const DFB_KERNEL: usize = 9;
pub const MAX_DFB_DEPTH: usize = 4;

/// One pyramid step: `(low, high)` with `low` at half resolution (rounded
/// up) and `high` the full-resolution residual.
pub fn lp_decompose(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, _) = x.hwc()?;
    if h < 2 || w < 2 {
        return Err(shape_err!("pyramid step needs extents >= 2, got {h}x{w}"));
    }
    let low = apply_separable(x, &AxisMap::pyramid_reduce(h), &AxisMap::pyramid_reduce(w))?;
    let predicted = expand(&low, h, w)?;
    let high = x.sub(&predicted)?;
    Ok((low, high))
}

/// Inverse of [`lp_decompose`]: `expand(low) + high`.
pub fn lp_reconstruct(low: &Tensor, high: &Tensor) -> Result<Tensor> {
    let (h, w, c) = high.hwc()?;
    let (lh, lw, lc) = low.hwc()?;
    if lh != h.div_ceil(2) || lw != w.div_ceil(2) || lc != c {
        return Err(shape_err!(
            "low {:?} is not one pyramid step below high {:?}",
            low.shape(),
            high.shape()
        ));
    }
    expand(low, h, w)?.add(high)
}

fn expand(low: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    apply_separable(low, &AxisMap::pyramid_expand(h), &AxisMap::pyramid_expand(w))
}

/// Binary-tree directional filter bank of depth `z`, realised without
/// decimation: every subband keeps the input grid.
///
/// Orientation is measured on the frequency plane with the angle folded to
/// `[-pi/4, 3pi/4)`. Each tree level halves the angular interval of its
/// parent; the `2^z` leaves are equal wedges in that order, so the first
/// half of the subbands holds frequencies dominated by the horizontal axis
/// (vertical detail) and the second half those dominated by the vertical
/// axis (horizontal detail).
#[derive(Clone, Debug)]
pub struct DirectionalFilterBank {
    depth: usize,
    kernels: Vec<Tensor>,
}

impl DirectionalFilterBank {
    pub fn new(depth: usize) -> Result<Self> {
        if !(1..=MAX_DFB_DEPTH).contains(&depth) {
            return Err(config_err!("directional tree depth must be in [1, {MAX_DFB_DEPTH}], got {depth}"));
        }
        let mut leaves = Vec::new();
        split_wedge(0.0, 1.0, depth, &mut leaves);
        let kernels = leaves
            .iter()
            .map(|&(lo, hi)| wedge_kernel(lo, hi))
            .collect();
        Ok(Self { depth, kernels })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn subband_count(&self) -> usize {
        1 << self.depth
    }

    /// `DFB_KERNEL x DFB_KERNEL` correlation kernel of subband `k`.
    pub fn kernel(&self, k: usize) -> &Tensor {
        &self.kernels[k]
    }

    /// Subbands of an `H x W x C` input, each `H x W x C`.
    pub fn decompose(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (h, w, c) = x.hwc()?;
        let stacked = self.apply(x)?;
        let n = self.subband_count();
        Ok((0..n)
            .map(|k| {
                Tensor::from_fn(&[h, w, c], |i| stacked.data()[(i / c) * n * c + k * c + i % c])
            })
            .collect())
    }

    /// All subbands stacked along channels, subband-major: `H x W x (2^z C)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, c) = x.hwc()?;
        let n = self.subband_count();
        let r = (DFB_KERNEL / 2) as isize;
        let rows: Vec<Vec<usize>> = (0..h)
            .map(|i| (0..DFB_KERNEL).map(|a| reflect101(i as isize + a as isize - r, h)).collect())
            .collect();
        let cols: Vec<Vec<usize>> = (0..w)
            .map(|j| (0..DFB_KERNEL).map(|b| reflect101(j as isize + b as isize - r, w)).collect())
            .collect();
        let xd = x.data();
        let mut out = vec![0.0; h * w * n * c];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * n * c;
                for (k, kern) in self.kernels.iter().enumerate() {
                    let kd = kern.data();
                    let o = &mut out[base + k * c..base + (k + 1) * c];
                    for (a, &ii) in rows[i].iter().enumerate() {
                        for (b, &jj) in cols[j].iter().enumerate() {
                            let kv = kd[a * DFB_KERNEL + b];
                            let px = &xd[(ii * w + jj) * c..][..c];
                            for (ov, xv) in o.iter_mut().zip(px) {
                                *ov += kv * xv;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![h, w, n * c], out))
    }

    /// Adjoint of [`DirectionalFilterBank::apply`].
    fn adjoint(&self, g: &Tensor, c: usize) -> Tensor {
        let (h, w, _) = g.hwc().expect("rank 3");
        let n = self.subband_count();
        let r = (DFB_KERNEL / 2) as isize;
        let gd = g.data();
        let mut dx = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * n * c;
                for (k, kern) in self.kernels.iter().enumerate() {
                    let kd = kern.data();
                    let gk = &gd[base + k * c..base + (k + 1) * c];
                    for a in 0..DFB_KERNEL {
                        let ii = reflect101(i as isize + a as isize - r, h);
                        for b in 0..DFB_KERNEL {
                            let jj = reflect101(j as isize + b as isize - r, w);
                            let kv = kd[a * DFB_KERNEL + b];
                            let d = &mut dx[(ii * w + jj) * c..][..c];
                            for (dv, gv) in d.iter_mut().zip(gk) {
                                *dv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![h, w, c], dx)
    }
}

/// Recursively halves the folded-angle interval `[lo, hi)` (in units of pi).
fn split_wedge(lo: f64, hi: f64, depth: usize, leaves: &mut Vec<(f64, f64)>) {
    if depth == 0 {
        leaves.push((lo, hi));
        return;
    }
    let mid = 0.5 * (lo + hi);
    split_wedge(lo, mid, depth - 1, leaves);
    split_wedge(mid, hi, depth - 1, leaves);
}

/// Folded orientation of frequency `(u, v)` (u along columns, v along rows)
/// in units of pi, in `[0, 1)`: `0` is the anti-diagonal, `1/4` the
/// horizontal frequency axis, `1/2` the diagonal and `3/4` the vertical axis.
fn folded_orientation(u: i32, v: i32) -> f64 {
    let (u, v) = if v < 0 || (v == 0 && u < 0) { (-u, -v) } else { (u, v) };
    // Lattice-aligned directions are resolved exactly.
    if v == 0 {
        return 0.25;
    }
    if u == v {
        return 0.5;
    }
    if u == 0 {
        return 0.75;
    }
    if u == -v {
        return 0.0;
    }
    let psi = (v as f64).atan2(u as f64) / PI; // (0, 1)
    (psi + 0.25).rem_euclid(1.0)
}

/// Ideal wedge mask on the `DFB_KERNEL^2` frequency lattice, inverted to a
/// real, even, zero-sum spatial kernel.
fn wedge_kernel(lo: f64, hi: f64) -> Tensor {
    let n = DFB_KERNEL as i32;
    let half = n / 2;
    let mut mask = Vec::new();
    for v in -half..=half {
        for u in -half..=half {
            if u == 0 && v == 0 {
                continue;
            }
            let t = folded_orientation(u, v);
            if t >= lo && t < hi {
                mask.push((u, v));
            }
        }
    }
    let mut k = Tensor::from_fn(&[DFB_KERNEL, DFB_KERNEL], |idx| {
        let (y, x) = ((idx / DFB_KERNEL) as i32 - half, (idx % DFB_KERNEL) as i32 - half);
        mask.iter()
            .map(|&(u, v)| (2.0 * PI * (u * x + v * y) as f64 / n as f64).cos())
            .sum::<f64>()
            / (n * n) as f64
    });
    let mean = k.sum() / k.len() as f64;
    for v in k.data_mut() {
        *v -= mean;
    }
    k
}

/// Standalone filter-bank call: `2^z` subbands of `high`.
pub fn dfb_decompose(high: &Tensor, z: usize) -> Result<Vec<Tensor>> {
    DirectionalFilterBank::new(z)?.decompose(high)
}

/// One pyramid level: the low-pass residual and its directional subbands.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub low_pass: Tensor,
    pub subbands: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ContourletPyramid {
    pub levels: Vec<PyramidLevel>,
    pub depth: usize,
}

/// Stacked multi-level texture, `H x W x (T 2^z C)`, channel order
/// `[level][subband][input channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureFeature {
    pub data: Tensor,
}

/// Reusable contourlet operator for fixed `(levels, depth)`.
#[derive(Clone, Debug)]
pub struct Contourlet {
    levels: usize,
    bank: DirectionalFilterBank,
}

impl Contourlet {
    pub fn new(levels: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            levels,
            bank: DirectionalFilterBank::new(depth)?,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn filter_bank(&self) -> &DirectionalFilterBank {
        &self.bank
    }

    /// Output channel count for `c` input channels.
    pub fn output_channels(&self, c: usize) -> usize {
        if self.levels == 0 {
            c
        } else {
            self.levels * self.bank.subband_count() * c
        }
    }

    /// Rejects inputs too small for the configured number of halvings.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let (mut h, mut w) = (h, w);
        for t in 0..self.levels {
            if h < 2 || w < 2 {
                return Err(config_err!(
                    "{} pyramid levels need more resolution: level {} input is {h}x{w}",
                    self.levels,
                    t + 1
                ));
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Ok(())
    }

    pub fn pyramid(&self, x: &Tensor) -> Result<ContourletPyramid> {
        let (h, w, _) = x.hwc()?;
        self.check_extent(h, w)?;
        let mut levels = Vec::with_capacity(self.levels);
        let mut low = x.clone();
        for _ in 0..self.levels {
            let (l, high) = lp_decompose(&low)?;
            levels.push(PyramidLevel {
                low_pass: l.clone(),
                subbands: self.bank.decompose(&high)?,
            });
            low = l;
        }
        Ok(ContourletPyramid {
            levels,
            depth: self.bank.depth(),
        })
    }

    pub fn texture(&self, x: &Tensor) -> Result<TextureFeature> {
        let (h, w, _) = x.hwc()?;
        self.check_extent(h, w)?;
        if self.levels == 0 {
            return Ok(TextureFeature { data: x.clone() });
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.texture_graph(&mut g, xv)?;
        Ok(TextureFeature {
            data: g.value(out).clone(),
        })
    }

    /// Differentiable texture extraction on a tape.
    pub fn texture_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).hwc()?;
        self.check_extent(h, w)?;
        if self.levels == 0 {
            return Ok(x);
        }
        let mut low = x;
        let mut parts = Vec::with_capacity(self.levels);
        let (mut lh, mut lw) = (h, w);
        for _ in 0..self.levels {
            let reduced = g.apply_axis(low, Rc::new(AxisMap::pyramid_reduce(lh)), 0)?;
            let reduced = g.apply_axis(reduced, Rc::new(AxisMap::pyramid_reduce(lw)), 1)?;
            let pred = g.apply_axis(reduced, Rc::new(AxisMap::pyramid_expand(lh)), 0)?;
            let pred = g.apply_axis(pred, Rc::new(AxisMap::pyramid_expand(lw)), 1)?;
            let high = g.sub(low, pred)?;
            let bands = self.bank.apply(g.value(high))?;
            let bank = self.bank.clone();
            let sub = g.custom(&[high], bands, move |gr, _, _| vec![bank.adjoint(gr, c)]);
            parts.push(g.resize_bilinear(sub, h, w)?);
            low = reduced;
            lh = lh.div_ceil(2);
            lw = lw.div_ceil(2);
        }
        g.concat_last(&parts)
    }
}

/// `T`-level texture of `f` with directional depth `z`; `T = 0` returns `f`.
pub fn contourlet_texture(f: &Tensor, levels: usize, z: usize) -> Result<TextureFeature> {
    Contourlet::new(levels, z)?.texture(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = Tensor::filled(&[13, 10, 2], 0.7);
        let (low, high) = lp_decompose(&x).unwrap();
        assert_eq!(low.shape(), &[7, 5, 2]);
        assert!(high.max_abs() < 1e-10);
        assert!(low.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn reconstruction_round_trip() {
        for (i, shape) in [[16, 16, 1], [9, 7, 3], [2, 2, 1]].iter().enumerate() {
            let x = random(shape, i as u64);
            let (low, high) = lp_decompose(&x).unwrap();
            let r = lp_reconstruct(&low, &high).unwrap();
            assert!(r.max_abs_diff(&x).unwrap() < 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(lp_decompose(&Tensor::zeros(&[1, 5, 1])).is_err());
        let x = random(&[8, 8, 1], 3);
        let (low, high) = lp_decompose(&x).unwrap();
        assert!(lp_reconstruct(&low, &Tensor::zeros(&[9, 8, 1])).is_err());
        assert!(lp_reconstruct(&Tensor::zeros(&[4, 4, 2]), &high).is_err());
        let _ = low;
    }

    #[test]
    fn zero_low_reconstructs_high() {
        let x = random(&[6, 6, 1], 4);
        let r = lp_reconstruct(&Tensor::zeros(&[3, 3, 1]), &x).unwrap();
        assert_eq!(r, x);
    }

    /// The two-step formula evaluated directly with scalar loops.
    fn naive_expand(low: &Tensor, h: usize, w: usize) -> Tensor {
        let (lh, lw, c) = low.hwc().unwrap();
        let wts = crate::numerics::resample::BINOMIAL5;
        // Zero-insert, then blur with gain 4 and mirror boundaries.
        let up = Tensor::from_fn(&[h, w, c], |idx| {
            let (i, j, ch) = (idx / (w * c), (idx / c) % w, idx % c);
            if i % 2 == 0 && j % 2 == 0 && i / 2 < lh && j / 2 < lw {
                low.data()[((i / 2) * lw + j / 2) * c + ch]
            } else {
                0.0
            }
        });
        Tensor::from_fn(&[h, w, c], |idx| {
            let (i, j, ch) = (idx / (w * c), (idx / c) % w, idx % c);
            let mut s = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    let ii = reflect101(i as isize + a as isize - 2, h);
                    let jj = reflect101(j as isize + b as isize - 2, w);
                    s += 4.0 * wts[a] * wts[b] * up.data()[(ii * w + jj) * c + ch];
                }
            }
            s
        })
    }

    #[test]
    fn reconstruct_matches_loop_formula() {
        let low = random(&[4, 5, 2], 8);
        let high = random(&[8, 9, 2], 9);
        let r = lp_reconstruct(&low, &high).unwrap();
        let e = naive_expand(&low, 8, 9).add(&high).unwrap();
        assert!(r.max_abs_diff(&e).unwrap() < 1e-14);
    }

    #[test]
    fn impulse_high_pass_matches_direct_formula() {
        let mut x = Tensor::zeros(&[9, 9, 1]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let (low, high) = lp_decompose(&x).unwrap();
        // Direct blur+decimate of the impulse.
        let wts = crate::numerics::resample::BINOMIAL5;
        let direct_low = Tensor::from_fn(&[5, 5, 1], |idx| {
            let (i, j) = (idx / 5, idx % 5);
            let mut s = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    let ii = reflect101(2 * i as isize + a as isize - 2, 9);
                    let jj = reflect101(2 * j as isize + b as isize - 2, 9);
                    s += wts[a] * wts[b] * x.data()[ii * 9 + jj];
                }
            }
            s
        });
        assert!(low.max_abs_diff(&direct_low).unwrap() < 1e-15);
        let direct_high = x.sub(&naive_expand(&direct_low, 9, 9)).unwrap();
        assert!(high.max_abs_diff(&direct_high).unwrap() < 1e-15);
    }

    #[test]
    fn subband_count_and_range() {
        for z in 1..=4 {
            assert_eq!(dfb_decompose(&random(&[8, 8, 1], 1), z).unwrap().len(), 1 << z);
        }
        assert!(dfb_decompose(&random(&[8, 8, 1], 1), 0).is_err());
        assert!(dfb_decompose(&random(&[8, 8, 1], 1), 5).is_err());
    }

    /// Fraction of subband energy in the second (horizontal-detail) half.
    fn horizontal_share(x: &Tensor, z: usize) -> f64 {
        let bands = dfb_decompose(x, z).unwrap();
        let e: Vec<f64> = bands.iter().map(Tensor::sum_sq).collect();
        let half = e.len() / 2;
        e[half..].iter().sum::<f64>() / e.iter().sum::<f64>()
    }

    #[test]
    fn orientation_selectivity() {
        for z in 1..=4 {
            for period in [3.0, 4.0, 5.5, 9.0] {
                let w = 2.0 * PI / period;
                // Intensity varying down the rows: horizontal stripes.
                let horiz = Tensor::from_fn(&[32, 32, 1], |i| (w * (i / 32) as f64).sin());
                let vert = Tensor::from_fn(&[32, 32, 1], |i| (w * (i % 32) as f64).sin());
                let hs = horizontal_share(&horiz, z);
                let vs = horizontal_share(&vert, z);
                assert!(hs > 0.8, "z={z} period={period}: horizontal share {hs}");
                assert!(vs < 0.2, "z={z} period={period}: vertical share {}", 1.0 - vs);
            }
        }
    }

    #[test]
    fn constant_input_rejected_by_every_subband() {
        for z in 1..=4 {
            for b in dfb_decompose(&Tensor::filled(&[12, 12, 2], 3.0), z).unwrap() {
                assert!(b.sum_sq() < 1e-10);
            }
        }
    }

    #[test]
    fn kernels_are_zero_mean_and_even() {
        let fb = DirectionalFilterBank::new(3).unwrap();
        for k in 0..8 {
            let kern = fb.kernel(k);
            assert!(kern.sum().abs() < 1e-15);
            let d = kern.data();
            for i in 0..d.len() {
                assert!((d[i] - d[d.len() - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn wedges_partition_the_lattice() {
        // Every non-DC lattice frequency lands in exactly one leaf, so the
        // kernels sum to a delta minus the box mean.
        let fb = DirectionalFilterBank::new(2).unwrap();
        let n = DFB_KERNEL * DFB_KERNEL;
        for idx in 0..n {
            let s: f64 = (0..4).map(|k| fb.kernel(k).data()[idx]).sum();
            let expected = if idx == n / 2 { 1.0 } else { 0.0 } - 1.0 / n as f64;
            assert!((s - expected).abs() < 1e-14, "idx {idx}: {s}");
        }
    }

    #[test]
    fn adjoint_is_transpose() {
        let fb = DirectionalFilterBank::new(2).unwrap();
        let x = random(&[5, 6, 2], 11);
        let y = random(&[5, 6, 8], 12);
        let lhs: f64 = fb.apply(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = fb.adjoint(&y, 2).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn texture_shapes_and_passthrough() {
        let x = random(&[32, 32, 1], 5);
        assert_eq!(contourlet_texture(&x, 0, 3).unwrap().data, x);
        let t = contourlet_texture(&x, 2, 3).unwrap();
        assert_eq!(t.data.shape(), &[32, 32, 16]);
        assert!(contourlet_texture(&random(&[4, 4, 1], 1), 3, 3).is_err());
        assert!(contourlet_texture(&random(&[8, 8, 1], 1), 3, 3).is_ok());
    }

    #[test]
    fn pyramid_extents_halve() {
        let c = Contourlet::new(3, 2).unwrap();
        let p = c.pyramid(&random(&[17, 12, 1], 2)).unwrap();
        let exts: Vec<_> = p.levels.iter().map(|l| l.low_pass.shape().to_vec()).collect();
        assert_eq!(exts, vec![vec![9, 6, 1], vec![5, 3, 1], vec![3, 2, 1]]);
        assert!(p.levels.iter().all(|l| l.subbands.len() == 4));
    }
}
