//! Flat synthetic worlds rendered through a tilted pinhole camera.
//!
//! World units: the identity view (`s = 1`, `theta = phi = 0`) sees the
//! square `[-1, 1]^2` of the ground plane, one pixel per `2 / size` units.
//! The camera sits at height `s`, is pitched forward by `phi` and placed so
//! its optical axis hits the world origin, then the rig is yawed by `theta`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{derive_seed, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    /// Altitude scale in `[0.5, 2]`.
    pub altitude: f64,
    /// Yaw in degrees, `[-45, 45]`.
    pub yaw_deg: f64,
    /// Pitch in degrees, `[0, 30]`.
    pub pitch_deg: f64,
}

impl Viewpoint {
    pub const IDENTITY: Viewpoint = Viewpoint { altitude: 1.0, yaw_deg: 0.0, pitch_deg: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.5..=2.0).contains(&self.altitude)
            && (-45.0..=45.0).contains(&self.yaw_deg)
            && (0.0..=30.0).contains(&self.pitch_deg);
        if !ok {
            return Err(config_err!(
                "viewpoint out of range: altitude {} (0.5..=2), yaw {} (-45..=45), pitch {} (0..=30)",
                self.altitude,
                self.yaw_deg,
                self.pitch_deg
            ));
        }
        Ok(())
    }

    /// Ground-plane point seen through normalized image coordinates
    /// `(u, v)` (right, up).
    pub fn ground_point(&self, u: f64, v: f64) -> (f64, f64) {
        let h = self.altitude;
        let (sp, cp) = self.pitch_deg.to_radians().sin_cos();
        let (sy, cy) = self.yaw_deg.to_radians().sin_cos();
        // Pitched ray and camera centre before yaw.
        let (dx, dy, dz) = (u, v * cp + sp, v * sp - cp);
        let (cx, cy0, cz) = (0.0, -h * sp / cp, h);
        let t = -cz / dz;
        let (px, py) = (cx + t * dx, cy0 + t * dy);
        (cy * px - sy * py, sy * px + cy * py)
    }
}

/// A labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `H x W x 3`, values roughly in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class ids, `255` = ignore.
    pub labels: Vec<u8>,
    pub viewpoint: Viewpoint,
    pub scene_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub classes: usize,
    /// Per-pixel Gaussian noise level.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { size: 64, classes: 5, noise: 0.03 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    base: [f64; 3],
    alt: [f64; 3],
    /// Stripe direction (unit) scaled by spatial frequency in cycles per unit.
    wave: [f64; 2],
}

#[derive(Clone, Debug)]
enum Shape {
    Sector { center: [f64; 2], radius: f64, from: f64, span: f64 },
    Polygon(Vec<[f64; 2]>),
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape::Sector { center, radius, from, span } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                if dx * dx + dy * dy > radius * radius {
                    return false;
                }
                let a = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                (a - from).rem_euclid(std::f64::consts::TAU) < *span
            }
            Shape::Polygon(v) => {
                // Convex, counter-clockwise.
                (0..v.len()).all(|i| {
                    let (a, b) = (v[i], v[(i + 1) % v.len()]);
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
                })
            }
        }
    }
}

/// Fixed semantic layout of one scene.
#[derive(Clone, Debug)]
pub struct Scene {
    classes: usize,
    styles: Vec<ClassStyle>,
    /// Painted in order; later shapes cover earlier ones.
    shapes: Vec<(u8, Shape)>,
}

/// Canonical class appearance; scenes jitter around it.
fn canonical_style(class: usize) -> ClassStyle {
    const BASE: [[f64; 3]; 8] = [
        [0.45, 0.42, 0.38],
        [0.20, 0.50, 0.22],
        [0.55, 0.55, 0.60],
        [0.65, 0.35, 0.25],
        [0.25, 0.35, 0.65],
        [0.70, 0.65, 0.30],
        [0.40, 0.25, 0.50],
        [0.30, 0.60, 0.60],
    ];
    const WAVE: [(f64, f64); 8] =
        [(0.0, 1.5), (0.0, 4.0), (90.0, 6.0), (45.0, 5.0), (135.0, 3.0), (20.0, 7.0), (110.0, 2.5), (70.0, 5.5)];
    let base = BASE[class % 8];
    let (deg, freq) = WAVE[class % 8];
    let (s, c) = deg.to_radians().sin_cos();
    ClassStyle {
        base,
        alt: base.map(|v| (v * 0.6 + 0.1).min(1.0)),
        wave: [c * freq, s * freq],
    }
}

impl Scene {
    pub fn generate(scene_seed: u64, classes: usize) -> Result<Self> {
        if !(2..=8).contains(&classes) {
            return Err(config_err!("scenes support 2..=8 classes, got {classes}"));
        }
        let mut rng = Rng::new(derive_seed(scene_seed, 0x5ce_4e));
        let styles = (0..classes)
            .map(|c| {
                let mut st = canonical_style(c);
                for ch in 0..3 {
                    let j = 0.06 * rng.normal();
                    st.base[ch] = (st.base[ch] + j).clamp(0.0, 1.0);
                    st.alt[ch] = (st.alt[ch] + j).clamp(0.0, 1.0);
                }
                let rot = 0.3 * rng.normal();
                let (s, c) = rot.sin_cos();
                st.wave = [c * st.wave[0] - s * st.wave[1], s * st.wave[0] + c * st.wave[1]];
                st
            })
            .collect();
        let mut shapes = Vec::new();
        // Scattered polygons of random foreground classes over a wide area.
        let extra = 6 + rng.below(6);
        for _ in 0..extra {
            let class = 1 + rng.below(classes - 1);
            let center = [rng.range(-2.5, 2.5), rng.range(-2.5, 2.5)];
            let r = rng.range(0.25, 0.7);
            let n = 3 + rng.below(4);
            let phase = rng.range(0.0, std::f64::consts::TAU);
            let verts = (0..n)
                .map(|k| {
                    let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
                    let rr = r * rng.range(0.7, 1.0);
                    [center[0] + rr * a.cos(), center[1] + rr * a.sin()]
                })
                .collect();
            shapes.push((class as u8, Shape::Polygon(verts)));
        }
        // A central rosette with one sector per foreground class keeps
        // every class in view from every allowed viewpoint.
        let center = [rng.range(-0.1, 0.1), rng.range(-0.1, 0.1)];
        let radius = rng.range(0.45, 0.6);
        let mut order: Vec<usize> = (1..classes).collect();
        rng.shuffle(&mut order);
        let start = rng.range(0.0, std::f64::consts::TAU);
        let span = std::f64::consts::TAU / (classes - 1) as f64;
        for (k, &class) in order.iter().enumerate() {
            let from = (start + k as f64 * span).rem_euclid(std::f64::consts::TAU);
            shapes.push((class as u8, Shape::Sector { center, radius, from, span }));
        }
        Ok(Self { classes, styles, shapes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_at(&self, p: [f64; 2]) -> u8 {
        self.shapes.iter().rev().find(|(_, s)| s.contains(p)).map_or(0, |(c, _)| *c)
    }

    pub fn color_at(&self, p: [f64; 2], class: u8) -> [f64; 3] {
        let st = &self.styles[class as usize];
        let phase = std::f64::consts::TAU * (st.wave[0] * p[0] + st.wave[1] * p[1]);
        let m = 0.5 + 0.5 * phase.sin();
        [0, 1, 2].map(|c| st.base[c] * (1.0 - m) + st.alt[c] * m)
    }

    /// Renders through `view`; `None` uses the untransformed raster grid.
    fn render_with(&self, cfg: &SceneConfig, map: impl Fn(f64, f64) -> (f64, f64), noise_seed: u64) -> (Tensor, Vec<u8>) {
        let n = cfg.size;
        let mut rng = Rng::new(noise_seed);
        let mut img = vec![0.0; n * n * 3];
        let mut labels = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                let u = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
                let v = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let (x, y) = map(u, v);
                let class = self.class_at([x, y]);
                labels[i * n + j] = class;
                let col = self.color_at([x, y], class);
                for c in 0..3 {
                    img[(i * n + j) * 3 + c] = col[c] + cfg.noise * rng.normal();
                }
            }
        }
        (Tensor::new(vec![n, n, 3], img).expect("finite render"), labels)
    }

    /// Identity-view raster: pixel centres map straight to `[-1, 1]^2`.
    pub fn raster(&self, cfg: &SceneConfig, noise_seed: u64) -> (Tensor, Vec<u8>) {
        self.render_with(cfg, |u, v| (u, v), noise_seed)
    }

    pub fn render(&self, cfg: &SceneConfig, view: &Viewpoint, noise_seed: u64) -> (Tensor, Vec<u8>) {
        self.render_with(cfg, |u, v| view.ground_point(u, v), noise_seed)
    }
}

fn noise_seed(scene_seed: u64, view: &Viewpoint) -> u64 {
    let mut s = derive_seed(scene_seed, 0x6e01_5e);
    for v in [view.altitude, view.yaw_deg, view.pitch_deg] {
        s = derive_seed(s, v.to_bits());
    }
    s
}

/// Renders scene `scene_seed` from `view`. Deterministic in both.
pub fn synth_scene(scene_seed: u64, view: Viewpoint, cfg: &SceneConfig) -> Result<SegSample> {
    view.validate()?;
    if cfg.size == 0 {
        return Err(config_err!("scene size must be positive"));
    }
    let scene = Scene::generate(scene_seed, cfg.classes)?;
    let (image, labels) = scene.render(cfg, &view, noise_seed(scene_seed, &view));
    Ok(SegSample { image, labels, viewpoint: view, scene_seed })
}

/// Identity-view raster of the same scene with the same noise draw as
/// `synth_scene(seed, Viewpoint::IDENTITY, cfg)`.
pub fn scene_raster(scene_seed: u64, cfg: &SceneConfig) -> Result<SegSample> {
    let scene = Scene::generate(scene_seed, cfg.classes)?;
    let view = Viewpoint::IDENTITY;
    let (image, labels) = scene.raster(cfg, noise_seed(scene_seed, &view));
    Ok(SegSample { image, labels, viewpoint: view, scene_seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRange {
    pub altitude: (f64, f64),
    pub yaw_deg: (f64, f64),
    pub pitch_deg: (f64, f64),
}

impl ViewRange {
    pub fn sample(&self, rng: &mut Rng) -> Viewpoint {
        let pick = |r: (f64, f64), rng: &mut Rng| if r.0 == r.1 { r.0 } else { rng.range(r.0, r.1) };
        Viewpoint {
            altitude: pick(self.altitude, rng),
            yaw_deg: pick(self.yaw_deg, rng),
            pitch_deg: pick(self.pitch_deg, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(labels: &[u8], k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &l in labels {
            h[l as usize] += 1;
        }
        h
    }

    #[test]
    fn identity_view_equals_raster() {
        let cfg = SceneConfig::default();
        for seed in 0..5 {
            let a = synth_scene(seed, Viewpoint::IDENTITY, &cfg).unwrap();
            let b = scene_raster(seed, &cfg).unwrap();
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn camera_geometry() {
        let v = Viewpoint { altitude: 1.0, yaw_deg: 0.0, pitch_deg: 20.0 };
        let (x, y) = v.ground_point(0.0, 0.0);
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
        // Far rows see more ground than near rows under forward pitch.
        let top = v.ground_point(0.0, 1.0).1 - v.ground_point(0.0, 0.9).1;
        let bottom = v.ground_point(0.0, -0.9).1 - v.ground_point(0.0, -1.0).1;
        assert!(top > bottom);
        let r = Viewpoint { altitude: 1.0, yaw_deg: 90.0_f64.min(45.0), pitch_deg: 0.0 };
        let (x, y) = r.ground_point(1.0, 0.0);
        assert!((x - 45f64.to_radians().cos()).abs() < 1e-12 && (y - 45f64.to_radians().sin()).abs() < 1e-12);
        let high = Viewpoint { altitude: 2.0, ..Viewpoint::IDENTITY };
        assert_eq!(high.ground_point(0.5, -0.25), (1.0, -0.5));
    }

    #[test]
    fn range_checks() {
        let cfg = SceneConfig::default();
        for v in [
            Viewpoint { altitude: 0.4, ..Viewpoint::IDENTITY },
            Viewpoint { yaw_deg: 180.0, ..Viewpoint::IDENTITY },
            Viewpoint { pitch_deg: 31.0, ..Viewpoint::IDENTITY },
        ] {
            assert!(synth_scene(0, v, &cfg).is_err());
        }
    }

    #[test]
    fn class_inventory_is_view_invariant() {
        let cfg = SceneConfig::default();
        let mut rng = Rng::new(9);
        let range = ViewRange { altitude: (0.5, 2.0), yaw_deg: (-45.0, 45.0), pitch_deg: (0.0, 30.0) };
        for seed in 0..6 {
            let mut views: Vec<Viewpoint> = (0..6).map(|_| range.sample(&mut rng)).collect();
            views.push(Viewpoint { altitude: 2.0, yaw_deg: 45.0, pitch_deg: 30.0 });
            views.push(Viewpoint { altitude: 0.5, yaw_deg: -45.0, pitch_deg: 30.0 });
            for v in views {
                let s = synth_scene(seed, v, &cfg).unwrap();
                let h = histogram(&s.labels, cfg.classes);
                assert!(h.iter().all(|&c| c > 0), "seed {seed} view {v:?}: {h:?}");
            }
        }
    }

    #[test]
    fn deterministic_render() {
        let cfg = SceneConfig::default();
        let v = Viewpoint { altitude: 1.3, yaw_deg: -12.0, pitch_deg: 25.0 };
        assert_eq!(synth_scene(4, v, &cfg).unwrap(), synth_scene(4, v, &cfg).unwrap());
    }
}
