//! Classic 2-D geometric augmentations applied jointly to image and labels
//! through an inverse homography about the image centre.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::SegSample;
use crate::error::{config_err, Error, Result};
use crate::model::IGNORE_LABEL;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    Rotate,
    Scale,
    PerspVertical,
    PerspHorizontal,
    /// Rotation followed by scaling.
    Combo,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::None,
        AugmentKind::Rotate,
        AugmentKind::Scale,
        AugmentKind::PerspVertical,
        AugmentKind::PerspHorizontal,
        AugmentKind::Combo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::None => "none",
            AugmentKind::Rotate => "rotate",
            AugmentKind::Scale => "scale",
            AugmentKind::PerspVertical => "persp_vertical",
            AugmentKind::PerspHorizontal => "persp_horizontal",
            AugmentKind::Combo => "combo",
        }
    }

    /// Draws transform parameters for this kind.
    pub fn sample(self, rng: &mut Rng) -> Augment {
        match self {
            AugmentKind::None => Augment::Identity,
            AugmentKind::Rotate => Augment::Rotate { degrees: rng.range(-30.0, 30.0) },
            AugmentKind::Scale => Augment::Scale { factor: rng.range(0.75, 1.0 / 0.75) },
            AugmentKind::PerspVertical => Augment::PerspVertical { tilt: rng.range(-0.35, 0.35) },
            AugmentKind::PerspHorizontal => Augment::PerspHorizontal { tilt: rng.range(-0.35, 0.35) },
            AugmentKind::Combo => Augment::Combo {
                degrees: rng.range(-30.0, 30.0),
                factor: rng.range(0.75, 1.0 / 0.75),
            },
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown augmentation {s:?}"))
    }
}

/// A concrete transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augment {
    Identity,
    Rotate { degrees: f64 },
    /// `factor > 1` magnifies.
    Scale { factor: f64 },
    /// Keystone along the vertical axis.
    PerspVertical { tilt: f64 },
    PerspHorizontal { tilt: f64 },
    Combo { degrees: f64, factor: f64 },
}

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Sine and cosine with exact values at multiples of 90 degrees.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

impl Augment {
    /// Forward homography in centred, half-extent-normalised coordinates.
    fn forward(&self) -> Mat3 {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rot = |d: f64| {
            let (s, c) = sin_cos_deg(d);
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        };
        let scale = |f: f64| [[f, 0.0, 0.0], [0.0, f, 0.0], [0.0, 0.0, 1.0]];
        match *self {
            Augment::Identity => id,
            Augment::Rotate { degrees } => rot(degrees),
            Augment::Scale { factor } => scale(factor),
            Augment::PerspVertical { tilt } => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, tilt, 1.0]],
            Augment::PerspHorizontal { tilt } => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [tilt, 0.0, 1.0]],
            Augment::Combo { degrees, factor } => mul(&scale(factor), &rot(degrees)),
        }
    }

    fn inverse(&self) -> Result<Mat3> {
        let m = self.forward();
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(config_err!("degenerate augmentation {self:?}"));
        }
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        Ok(inv)
    }
}

/// Applies `aug` to image (bilinear, zero outside) and labels (nearest,
/// ignore outside).
pub fn classic_augment(sample: &SegSample, aug: Augment) -> Result<SegSample> {
    if aug == Augment::Identity {
        return Ok(sample.clone());
    }
    let (h, w, c) = sample.image.hwc()?;
    if sample.labels.len() != h * w {
        return Err(Error::Data(format!("{} labels for a {h}x{w} image", sample.labels.len())));
    }
    let inv = aug.inverse()?;
    let (hx, hy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half = (w.max(h) as f64) / 2.0;
    let src = sample.image.data();
    let mut img = vec![0.0; h * w * c];
    let mut labels = vec![IGNORE_LABEL; h * w];
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 - hx) / half;
            let y = (i as f64 - hy) / half;
            let sx = inv[0][0] * x + inv[0][1] * y + inv[0][2];
            let sy = inv[1][0] * x + inv[1][1] * y + inv[1][2];
            let sw = inv[2][0] * x + inv[2][1] * y + inv[2][2];
            if sw <= 1e-9 {
                continue;
            }
            let (px, py) = (sx / sw * half + hx, sy / sw * half + hy);
            let (ni, nj) = (py.round(), px.round());
            if ni >= 0.0 && nj >= 0.0 && (ni as usize) < h && (nj as usize) < w {
                labels[i * w + j] = sample.labels[ni as usize * w + nj as usize];
            }
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let out = &mut img[(i * w + j) * c..(i * w + j + 1) * c];
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    let wgt = wy * wx;
                    if wgt == 0.0 || yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * c;
                    for k in 0..c {
                        out[k] += wgt * src[base + k];
                    }
                }
            }
        }
    }
    Ok(SegSample {
        image: Tensor::new(vec![h, w, c], img)?,
        labels,
        viewpoint: sample.viewpoint,
        scene_seed: sample.scene_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::scene::{synth_scene, SceneConfig, Viewpoint};

    fn sample() -> SegSample {
        synth_scene(3, Viewpoint { altitude: 1.2, yaw_deg: 10.0, pitch_deg: 12.0 }, &SceneConfig::default()).unwrap()
    }

    #[test]
    fn identities() {
        let s = sample();
        for aug in [Augment::Rotate { degrees: 0.0 }, Augment::Scale { factor: 1.0 }, Augment::Identity] {
            let a = classic_augment(&s, aug).unwrap();
            assert_eq!(a.labels, s.labels);
            assert!(a.image.max_abs_diff(&s.image).unwrap() < 1e-12);
        }
    }

    #[test]
    fn quarter_turns_compose() {
        let s = sample();
        let twice = classic_augment(&classic_augment(&s, Augment::Rotate { degrees: 90.0 }).unwrap(), Augment::Rotate { degrees: 90.0 }).unwrap();
        let half = classic_augment(&s, Augment::Rotate { degrees: 180.0 }).unwrap();
        assert_eq!(twice.labels, half.labels);
        assert!(twice.image.max_abs_diff(&half.image).unwrap() < 1e-12);
        // 180 degrees about the centre reverses the raster.
        let rev: Vec<u8> = s.labels.iter().rev().copied().collect();
        assert_eq!(half.labels, rev);
    }

    #[test]
    fn kinds_parse() {
        for k in AugmentKind::ALL {
            assert_eq!(k.name().parse::<AugmentKind>().unwrap(), k);
        }
        assert!(matches!("shear".parse::<AugmentKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn labels_stay_aligned_and_valid() {
        let s = sample();
        let mut rng = Rng::new(2);
        for k in AugmentKind::ALL {
            let a = classic_augment(&s, k.sample(&mut rng)).unwrap();
            assert!(a.labels.iter().all(|&l| l == IGNORE_LABEL || (l as usize) < 5));
            assert!(a.image.is_finite());
        }
        let shrunk = classic_augment(&s, Augment::Scale { factor: 0.5 }).unwrap();
        assert!(shrunk.labels.contains(&IGNORE_LABEL));
        assert_eq!(shrunk.labels[0], IGNORE_LABEL);
        assert_eq!(shrunk.image.data()[0], 0.0);
    }
}
