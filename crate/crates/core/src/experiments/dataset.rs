//! Sample files and split generation.
//!
//! File layout (little-endian): magic `PVSAMPLE`, version `u32`,
//! height, width, channels (`u32` each), scene seed `u64`, viewpoint as three
//! `f64` (altitude, yaw, pitch), image `f64` values (row-major HWC), then one
//! `u8` label per pixel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{synth_scene, SceneConfig, SegSample, ViewRange, Viewpoint};
use crate::bank::ByteReader;
use crate::error::{config_err, Error, Result};
use crate::numerics::{derive_seed, Rng, Tensor};

const MAGIC: &[u8; 8] = b"PVSAMPLE";
const VERSION: u32 = 1;
pub const SAMPLE_EXTENSION: &str = "pvs";

pub fn encode_sample(s: &SegSample) -> Result<Vec<u8>> {
    let (h, w, c) = s.image.hwc()?;
    let mut out = Vec::with_capacity(64 + s.image.len() * 8 + s.labels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.scene_seed.to_le_bytes());
    for v in [s.viewpoint.altitude, s.viewpoint.yaw_deg, s.viewpoint.pitch_deg] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.labels);
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<SegSample> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(r.error_at(0, "bad sample magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error_at(8, &format!("unsupported sample version {version}")));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let scene_seed = r.u64()?;
    let viewpoint = Viewpoint { altitude: r.f64()?, yaw_deg: r.f64()?, pitch_deg: r.f64()? };
    let n = h.checked_mul(w).and_then(|hw| hw.checked_mul(c)).ok_or_else(|| r.error_at(12, "extent overflow"))?;
    if r.remaining() != n * 8 + h * w {
        return Err(r.error_at(r.offset(), &format!("expected {} payload bytes, found {}", n * 8 + h * w, r.remaining())));
    }
    let at = r.offset();
    let image = Tensor::new(vec![h, w, c], r.f64s(n)?).map_err(|e| r.error_at(at, &e.to_string()))?;
    let labels = r.take(h * w)?.to_vec();
    Ok(SegSample { image, labels, viewpoint, scene_seed })
}

pub fn write_sample(path: &Path, s: &SegSample) -> Result<()> {
    std::fs::write(path, encode_sample(s)?)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<SegSample> {
    decode_sample(&std::fs::read(path)?).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

/// Reads every sample file in `dir`, sorted by file name.
pub fn read_dir(dir: &Path) -> Result<Vec<SegSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SAMPLE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_sample(p)).collect()
}

/// Writes samples as `sample_00000.pvs`, ...; returns the paths.
pub fn write_dir(dir: &Path, samples: &[SegSample]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("sample_{i:05}.{SAMPLE_EXTENSION}"));
            write_sample(&p, s)?;
            Ok(p)
        })
        .collect()
}

/// Scenes and viewpoints of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// First scene seed; scenes use consecutive seeds.
    pub first_scene: u64,
    pub scenes: usize,
    pub views_per_scene: usize,
    pub views: ViewRange,
}

impl SplitConfig {
    /// Training viewpoints: shallow pitch.
    pub fn train_default() -> Self {
        Self {
            first_scene: 0,
            scenes: 24,
            views_per_scene: 4,
            views: ViewRange { altitude: (0.7, 1.4), yaw_deg: (-45.0, 45.0), pitch_deg: (0.0, 15.0) },
        }
    }

    /// Held-out viewpoints: steep pitch, disjoint scenes.
    pub fn test_default() -> Self {
        Self {
            first_scene: 1_000_000,
            scenes: 16,
            views_per_scene: 3,
            views: ViewRange { altitude: (0.7, 1.4), yaw_deg: (-45.0, 45.0), pitch_deg: (20.0, 30.0) },
        }
    }

    pub fn len(&self) -> usize {
        self.scenes * self.views_per_scene
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renders a split. Viewpoints are drawn from `seed`, so the same config
/// and seed always give the same samples.
pub fn generate_split(split: &SplitConfig, scene: &SceneConfig, seed: u64) -> Result<Vec<SegSample>> {
    if split.is_empty() {
        return Err(config_err!("split has no samples"));
    }
    let mut out = Vec::with_capacity(split.len());
    for k in 0..split.scenes {
        let scene_seed = split.first_scene + k as u64;
        let mut rng = Rng::new(derive_seed(seed, scene_seed));
        for _ in 0..split.views_per_scene {
            out.push(synth_scene(scene_seed, split.views.sample(&mut rng), scene)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_round_trip_and_truncation() {
        let s = synth_scene(1, Viewpoint { altitude: 0.9, yaw_deg: 3.0, pitch_deg: 7.5 }, &SceneConfig { size: 16, ..SceneConfig::default() })
            .unwrap();
        let bytes = encode_sample(&s).unwrap();
        assert_eq!(decode_sample(&bytes).unwrap(), s);
        for cut in [0, 5, 11, 30, bytes.len() - 1] {
            assert!(matches!(decode_sample(&bytes[..cut]), Err(Error::Parse { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sample(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let scene = SceneConfig { size: 16, ..SceneConfig::default() };
        let mut tr = SplitConfig::train_default();
        tr.scenes = 3;
        let a = generate_split(&tr, &scene, 7).unwrap();
        assert_eq!(a, generate_split(&tr, &scene, 7).unwrap());
        assert!(a.iter().all(|s| s.viewpoint.pitch_deg <= 15.0));
        let mut te = SplitConfig::test_default();
        te.scenes = 2;
        let b = generate_split(&te, &scene, 7).unwrap();
        assert!(b.iter().all(|s| s.viewpoint.pitch_deg >= 20.0));
        assert!(a.iter().all(|x| b.iter().all(|y| x.scene_seed != y.scene_seed)));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig { size: 8, ..SceneConfig::default() };
        let mut tr = SplitConfig::train_default();
        tr.scenes = 2;
        let samples = generate_split(&tr, &scene, 1).unwrap();
        write_dir(dir.path(), &samples).unwrap();
        assert_eq!(read_dir(dir.path()).unwrap(), samples);
    }
}
