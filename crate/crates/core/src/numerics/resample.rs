//! Separable 1-D linear operators applied along one spatial axis of an
//! `H x W x C` tensor. Bilinear resizing and the Laplacian-pyramid
//! reduce/expand steps are all expressed this way, which makes their
//! adjoints (needed for backprop) exact transposes.

use super::Tensor;
use crate::error::{shape_err, Result};

/// 5-tap binomial low-pass used by the pyramid.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Dense `out x inp` matrix acting on one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    out: usize,
    inp: usize,
    m: Vec<f64>,
}

impl AxisMap {
    pub fn from_fn(out: usize, inp: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = vec![0.0; out * inp];
        for o in 0..out {
            for i in 0..inp {
                m[o * inp + i] = f(o, i);
            }
        }
        Self { out, inp, m }
    }

    pub fn out_len(&self) -> usize {
        self.out
    }

    pub fn in_len(&self) -> usize {
        self.inp
    }

    pub fn get(&self, o: usize, i: usize) -> f64 {
        self.m[o * self.inp + i]
    }

    pub fn transpose(&self) -> AxisMap {
        AxisMap::from_fn(self.inp, self.out, |o, i| self.get(i, o))
    }

    /// Half-pixel bilinear resampling from `inp` to `out` samples
    /// (source coordinates clamped to the valid range).
    pub fn bilinear(inp: usize, out: usize) -> Self {
        let scale = inp as f64 / out as f64;
        let mut map = AxisMap::from_fn(out, inp, |_, _| 0.0);
        for o in 0..out {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            let frac = src - i0 as f64;
            map.m[o * inp + i0] += 1.0 - frac;
            map.m[o * inp + i1] += frac;
        }
        map
    }

    /// Binomial blur followed by decimation by two; `ceil(n/2)` outputs.
    pub fn pyramid_reduce(n: usize) -> Self {
        let out = n.div_ceil(2);
        let mut map = AxisMap::from_fn(out, n, |_, _| 0.0);
        for o in 0..out {
            for (k, w) in BINOMIAL5.iter().enumerate() {
                let i = reflect101(2 * o as isize + k as isize - 2, n);
                map.m[o * n + i] += w;
            }
        }
        map
    }

    /// Zero-insertion upsampling to `n` samples followed by a gain-2
    /// binomial blur; the inverse-direction partner of [`pyramid_reduce`].
    ///
    /// [`pyramid_reduce`]: AxisMap::pyramid_reduce
    pub fn pyramid_expand(n: usize) -> Self {
        let low = n.div_ceil(2);
        let mut map = AxisMap::from_fn(n, low, |_, _| 0.0);
        for o in 0..n {
            for (k, w) in BINOMIAL5.iter().enumerate() {
                let u = reflect101(o as isize + k as isize - 2, n);
                if u % 2 == 0 {
                    map.m[o * low + u / 2] += 2.0 * w;
                }
            }
        }
        map
    }
}

/// Mirror index without repeating the edge sample (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Applies `map` along `axis` (0 = rows, 1 = columns) of an `H x W x C` tensor.
pub fn apply_axis(x: &Tensor, map: &AxisMap, axis: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let along = if axis == 0 { h } else { w };
    if axis > 1 || along != map.inp {
        return Err(shape_err!(
            "axis map expects {} samples on axis {axis}, tensor is {:?}",
            map.inp,
            x.shape()
        ));
    }
    let xd = x.data();
    if axis == 0 {
        let mut out = vec![0.0; map.out * w * c];
        let row = w * c;
        for o in 0..map.out {
            let orow = &mut out[o * row..(o + 1) * row];
            for i in 0..h {
                let m = map.get(o, i);
                if m == 0.0 {
                    continue;
                }
                for (ov, xv) in orow.iter_mut().zip(&xd[i * row..(i + 1) * row]) {
                    *ov += m * xv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![map.out, w, c], out))
    } else {
        let mut out = vec![0.0; h * map.out * c];
        for r in 0..h {
            for o in 0..map.out {
                let opix = &mut out[(r * map.out + o) * c..][..c];
                for i in 0..w {
                    let m = map.get(o, i);
                    if m == 0.0 {
                        continue;
                    }
                    for (ov, xv) in opix.iter_mut().zip(&xd[(r * w + i) * c..][..c]) {
                        *ov += m * xv;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![h, map.out, c], out))
    }
}

/// Separable 2-D application: rows then columns.
pub fn apply_separable(x: &Tensor, rows: &AxisMap, cols: &AxisMap) -> Result<Tensor> {
    apply_axis(&apply_axis(x, rows, 0)?, cols, 1)
}

/// Bilinear resize of an `H x W x C` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, _) = x.hwc()?;
    apply_separable(x, &AxisMap::bilinear(h, out_h), &AxisMap::bilinear(w, out_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-2, 2), 0);
        assert_eq!(reflect101(5, 1), 0);
    }

    #[test]
    fn pyramid_maps_preserve_constants() {
        for n in 2..12 {
            for map in [AxisMap::pyramid_reduce(n), AxisMap::pyramid_expand(n)] {
                for o in 0..map.out_len() {
                    let s: f64 = (0..map.in_len()).map(|i| map.get(o, i)).sum();
                    assert!((s - 1.0).abs() < 1e-15, "n={n} row {o} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let m = AxisMap::bilinear(7, 7);
        for o in 0..7 {
            for i in 0..7 {
                assert_eq!(m.get(o, i), if o == i { 1.0 } else { 0.0 });
            }
        }
        let up = AxisMap::bilinear(4, 16);
        for o in 0..16 {
            let s: f64 = (0..4).map(|i| up.get(o, i)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_axis_matches_loop() {
        let x = Tensor::from_fn(&[4, 3, 2], |i| (i as f64 * 0.37).sin());
        let m = AxisMap::pyramid_reduce(4);
        let y = apply_axis(&x, &m, 0).unwrap();
        for o in 0..2 {
            for j in 0..3 {
                for c in 0..2 {
                    let e: f64 = (0..4).map(|i| m.get(o, i) * x.data()[(i * 3 + j) * 2 + c]).sum();
                    assert!((y.data()[(o * 3 + j) * 2 + c] - e).abs() < 1e-15);
                }
            }
        }
        let m = AxisMap::bilinear(3, 5);
        let y = apply_axis(&x, &m, 1).unwrap();
        assert_eq!(y.shape(), &[4, 5, 2]);
    }
}
