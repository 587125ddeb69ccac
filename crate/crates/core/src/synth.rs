//! Seeded generator of echo-like image sequences with ground-truth masks.
//!
//! Each sequence shows an elliptical cavity (class 1) inside a wall ring of
//! constant thickness (class 2) on background (class 0). The cavity contracts
//! linearly from the first frame (largest) to the last (smallest), so the area
//! at the last frame is `(1 − contraction)` times the first. Images get depth
//! attenuation, multiplicative speckle `(1 + σ·g)` with `g` a clamped standard
//! normal, and square dropout patches centred on the wall that zero the signal.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::{numel, strides, Tensor};
use crate::tnsr;

pub const CLASSES: u8 = 3;
pub const BACKGROUND: u8 = 0;
pub const CAVITY: u8 = 1;
pub const WALL: u8 = 2;

pub const MIN_EXTENT: usize = 32;
pub const MAX_FRAMES: usize = 16;

const INTENSITY_BACKGROUND: f64 = 0.3;
const INTENSITY_WALL: f64 = 0.9;
const INTENSITY_CAVITY: f64 = 0.05;
const DEPTH_ATTENUATION: f64 = 0.4;
const NOISE_CLAMP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTier {
    Good,
    Medium,
    Poor,
}

impl QualityTier {
    pub const ALL: [QualityTier; 3] = [QualityTier::Good, QualityTier::Medium, QualityTier::Poor];

    pub fn preset(self) -> QualityPreset {
        match self {
            QualityTier::Good => QualityPreset { noise: 0.05, dropout_patches: 0 },
            QualityTier::Medium => QualityPreset { noise: 0.15, dropout_patches: 2 },
            QualityTier::Poor => QualityPreset { noise: 0.3, dropout_patches: 4 },
        }
    }
}

impl std::str::FromStr for QualityTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "good" => Ok(QualityTier::Good),
            "medium" => Ok(QualityTier::Medium),
            "poor" => Ok(QualityTier::Poor),
            _ => Err(Error::Config(format!("unknown quality tier {s:?}; expected good, medium or poor"))),
        }
    }
}

impl std::fmt::Display for QualityTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QualityTier::Good => "good",
            QualityTier::Medium => "medium",
            QualityTier::Poor => "poor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPreset {
    pub noise: f64,
    pub dropout_patches: usize,
}

pub fn quality_presets() -> Vec<(QualityTier, QualityPreset)> {
    QualityTier::ALL.into_iter().map(|t| (t, t.preset())).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    /// Patches per affected frame.
    pub count: usize,
    /// Side length in pixels; `None` uses a sixth of the smallest extent.
    pub size: Option<usize>,
    /// Affected frames; `None` means every frame outside the annotated set.
    pub frames: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub seed: u64,
    /// Spatial extents, two or three axes; axis 0 is depth.
    pub extents: Vec<usize>,
    pub frames: usize,
    /// Fractional cavity area loss from the first to the last frame.
    pub contraction: f64,
    pub noise: f64,
    pub dropout: DropoutSpec,
    pub tier: Option<QualityTier>,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: vec![64, 64],
            frames: 2,
            contraction: 0.35,
            noise: 0.0,
            dropout: DropoutSpec::default(),
            tier: None,
        }
    }
}

impl SequenceSpec {
    /// Sets noise and dropout count from a quality tier.
    pub fn with_tier(mut self, tier: QualityTier) -> Self {
        let p = tier.preset();
        self.noise = p.noise;
        self.dropout.count = p.dropout_patches;
        self.tier = Some(tier);
        self
    }

    pub fn annotated(&self) -> Vec<usize> {
        vec![0, self.frames - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.extents.len()) || self.extents.iter().any(|&e| e < MIN_EXTENT) {
            return Err(Error::Config(format!(
                "extents {:?} must have 2 or 3 axes of at least {MIN_EXTENT}",
                self.extents
            )));
        }
        if !(2..=MAX_FRAMES).contains(&self.frames) {
            return Err(Error::Config(format!("T must be in [2,{MAX_FRAMES}], got {}", self.frames)));
        }
        if !(0.0..1.0).contains(&self.contraction) {
            return Err(Error::Config(format!("contraction {} must be in [0,1)", self.contraction)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise level {} must be in [0,1]", self.noise)));
        }
        if let Some(frames) = &self.dropout.frames {
            if let Some(&bad) = frames.iter().find(|&&f| f >= self.frames) {
                return Err(Error::Config(format!("dropout frame {bad} out of range")));
            }
        }
        if self.dropout.size == Some(0) {
            return Err(Error::Config("dropout patch size must be positive".into()));
        }
        Ok(())
    }

    fn dropout_frames(&self) -> Vec<usize> {
        match &self.dropout.frames {
            Some(f) => f.clone(),
            None => {
                let ann = self.annotated();
                (0..self.frames).filter(|t| !ann.contains(t)).collect()
            }
        }
    }
}

/// Ellipse/ellipsoid geometry of one frame, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameGeometry {
    pub centre: Vec<f64>,
    pub cavity_axes: Vec<f64>,
    pub wall: f64,
}

impl FrameGeometry {
    fn inside(&self, p: &[f64], extra: f64) -> bool {
        p.iter()
            .zip(&self.centre)
            .zip(&self.cavity_axes)
            .map(|((&x, &c), &r)| ((x - c) / (r + extra)).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Labels of every pixel (row-major). Any pixel face-adjacent to the
    /// cavity is wall, so the cavity never touches background.
    pub fn labels(&self, extents: &[usize]) -> Vec<u8> {
        let n = numel(extents);
        let st = strides(extents);
        let coords = |flat: usize| -> Vec<f64> { st.iter().zip(extents).map(|(&s, &e)| ((flat / s) % e) as f64).collect() };
        let mut labels: Vec<u8> = (0..n)
            .map(|i| {
                let p = coords(i);
                if self.inside(&p, 0.0) {
                    CAVITY
                } else if self.inside(&p, self.wall) {
                    WALL
                } else {
                    BACKGROUND
                }
            })
            .collect();
        for i in 0..n {
            if labels[i] != CAVITY {
                continue;
            }
            for (a, &s) in st.iter().enumerate() {
                let pos = (i / s) % extents[a];
                if pos > 0 && labels[i - s] == BACKGROUND {
                    labels[i - s] = WALL;
                }
                if pos + 1 < extents[a] && labels[i + s] == BACKGROUND {
                    labels[i + s] = WALL;
                }
            }
        }
        labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub spec: SequenceSpec,
    /// One image per frame, shaped like the extents.
    pub frames: Vec<Tensor<f32>>,
    pub masks: Vec<SegmentationMask>,
    pub annotated: Vec<usize>,
    pub geometry: Vec<FrameGeometry>,
}

/// Noiseless intensity of a label at depth index `depth`.
pub fn clean_intensity(label: u8, depth: usize, depth_extent: usize) -> f64 {
    let base = match label {
        CAVITY => INTENSITY_CAVITY,
        WALL => INTENSITY_WALL,
        _ => INTENSITY_BACKGROUND,
    };
    base * (1.0 - DEPTH_ATTENUATION * depth as f64 / depth_extent as f64)
}

pub fn generate(spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = &spec.extents;
    let rank = ext.len();
    let n = numel(ext);
    let min_ext = *ext.iter().min().expect("validated") as f64;

    // First-frame geometry: axis 0 slightly elongated, wall at least two pixels.
    let wall = (0.06 * min_ext).max(2.0);
    let axes: Vec<f64> = (0..rank)
        .map(|a| {
            let frac = if a == 0 { rng.gen_range(0.22..0.27) } else { rng.gen_range(0.17..0.22) };
            frac * ext[a] as f64
        })
        .collect();
    let centre: Vec<f64> = (0..rank)
        .map(|a| {
            let e = ext[a] as f64;
            let jitter = (e / 2.0 - axes[a] - wall - 2.0).clamp(0.0, e / 16.0);
            (e - 1.0) / 2.0 + rng.gen_range(-1.0..=1.0) * jitter
        })
        .collect();

    let geometry: Vec<FrameGeometry> = (0..spec.frames)
        .map(|t| {
            let phase = t as f64 / (spec.frames - 1) as f64;
            let area = 1.0 - spec.contraction * phase;
            let scale = area.powf(1.0 / rank as f64);
            FrameGeometry {
                centre: centre.clone(),
                cavity_axes: axes.iter().map(|r| r * scale).collect(),
                wall,
            }
        })
        .collect();

    let depth_stride = strides(ext)[0];
    let patch = spec.dropout.size.unwrap_or(((min_ext / 6.0).round() as usize).max(1));
    let dropout_frames = spec.dropout_frames();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for (t, geo) in geometry.iter().enumerate() {
        let labels = geo.labels(ext);
        let mut img: Vec<f32> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let clean = clean_intensity(l, i / depth_stride, ext[0]);
                let g: f64 = rng.sample(StandardNormal);
                (clean * (1.0 + spec.noise * g.clamp(-NOISE_CLAMP, NOISE_CLAMP))).max(0.0) as f32
            })
            .collect();
        if dropout_frames.contains(&t) {
            let wall_px: Vec<usize> = (0..n).filter(|&i| labels[i] == WALL).collect();
            for _ in 0..spec.dropout.count {
                let centre = wall_px[rng.gen_range(0..wall_px.len())];
                zero_patch(&mut img, ext, centre, patch);
            }
        }
        frames.push(Tensor::new(ext.clone(), img)?);
        masks.push(SegmentationMask::new(ext.clone(), labels, vec![1.0; rank], CLASSES)?);
    }
    Ok(Sequence {
        spec: spec.clone(),
        frames,
        masks,
        annotated: spec.annotated(),
        geometry,
    })
}

fn zero_patch(img: &mut [f32], ext: &[usize], centre: usize, side: usize) {
    let st = strides(ext);
    let c: Vec<usize> = st.iter().zip(ext).map(|(&s, &e)| (centre / s) % e).collect();
    let lo: Vec<usize> = c.iter().map(|&x| x.saturating_sub(side / 2)).collect();
    let hi: Vec<usize> = lo.iter().zip(ext).map(|(&l, &e)| (l + side).min(e)).collect();
    let mut idx = lo.clone();
    loop {
        let flat: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        img[flat] = 0.0;
        let mut a = ext.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < hi[a] {
                break;
            }
            idx[a] = lo[a];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub spec: SequenceSpec,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub spacing: Vec<f64>,
    pub annotated: Vec<usize>,
}

impl Sequence {
    /// Writes `frame_<t>.tnsr`, `mask_<t>.tnsr` (with sidecars) and `sequence.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<SequenceManifest> {
        let mut manifest = SequenceManifest {
            spec: self.spec.clone(),
            frames: Vec::new(),
            masks: Vec::new(),
            spacing: self.masks[0].spacing().to_vec(),
            annotated: self.annotated.clone(),
        };
        for (t, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            let (fname, mname) = (format!("frame_{t}.tnsr"), format!("mask_{t}.tnsr"));
            tnsr::write_file(&dir.join(&fname), f)?;
            m.save(&dir.join(&mname))?;
            manifest.frames.push(fname);
            manifest.masks.push(mname);
        }
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        tnsr::write_atomic(&dir.join("sequence.json"), &json)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("sequence.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SequenceManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let mut frames = Vec::new();
        for f in &manifest.frames {
            let p = dir.join(f);
            let t = tnsr::read_file(&p)?.into_float().ok_or_else(|| Error::Format {
                path: p.clone(),
                msg: "frames must be floating point".into(),
            })?;
            frames.push(t);
        }
        let masks = manifest
            .masks
            .iter()
            .map(|m| SegmentationMask::load(&dir.join(m)))
            .collect::<Result<Vec<_>>>()?;
        if frames.len() != masks.len() || frames.is_empty() {
            return Err(Error::Format {
                path,
                msg: "frame and mask lists differ".into(),
            });
        }
        let geometry = Vec::new();
        Ok(Self {
            spec: manifest.spec,
            frames,
            masks,
            annotated: manifest.annotated,
            geometry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SequenceSpec {
        SequenceSpec {
            seed,
            frames: 4,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = spec(42).with_tier(QualityTier::Poor);
        let (a, b) = (generate(&s).unwrap(), generate(&s).unwrap());
        assert_eq!(a, b);
        let c = generate(&SequenceSpec { seed: 43, ..s }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn clean_images_threshold_to_masks() {
        let seq = generate(&spec(1)).unwrap();
        for (img, mask) in seq.frames.iter().zip(&seq.masks) {
            for (&v, &l) in img.data().iter().zip(mask.labels()) {
                let recovered = if v < 0.1 {
                    CAVITY
                } else if v < 0.4 {
                    BACKGROUND
                } else {
                    WALL
                };
                assert_eq!(recovered, l);
            }
        }
    }

    #[test]
    fn contraction_matches_ellipse_area() {
        for seed in 0..5 {
            let seq = generate(&SequenceSpec {
                seed,
                extents: vec![96, 96],
                ..spec(seed)
            })
            .unwrap();
            let ed = seq.masks[0].count(CAVITY) as f64;
            let es = seq.masks[3].count(CAVITY) as f64;
            assert!((es / ed - 0.65).abs() / 0.65 < 0.05, "ratio {}", es / ed);
        }
    }

    #[test]
    fn dropout_only_hits_unannotated_frames_by_default() {
        let s = SequenceSpec {
            dropout: DropoutSpec {
                count: 3,
                ..Default::default()
            },
            ..spec(2)
        };
        let seq = generate(&s).unwrap();
        let clean = generate(&SequenceSpec {
            dropout: DropoutSpec::default(),
            ..s.clone()
        })
        .unwrap();
        assert_eq!(seq.frames[0], clean.frames[0]);
        assert_eq!(seq.frames[3], clean.frames[3]);
        let zeros = |t: &Tensor<f32>| t.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros(&seq.frames[1]) > 0);
    }

    #[test]
    fn validation() {
        assert!(generate(&SequenceSpec { frames: 1, ..spec(0) }).is_err());
        assert!(generate(&SequenceSpec { extents: vec![16, 64], ..spec(0) }).is_err());
        assert!(generate(&SequenceSpec { frames: 17, ..spec(0) }).is_err());
    }

    #[test]
    fn presets_are_ordered() {
        let p = quality_presets();
        assert_eq!(p[0].1.noise, 0.05);
        assert!(p[0].1.noise < p[1].1.noise && p[1].1.noise < p[2].1.noise);
        assert_eq!(p[2].1.dropout_patches, 4);
    }

    #[test]
    fn three_dimensional_sequences() {
        let seq = generate(&SequenceSpec {
            extents: vec![32, 32, 32],
            ..spec(5)
        })
        .unwrap();
        assert_eq!(seq.frames[0].shape(), &[32, 32, 32]);
        assert!(seq.masks[0].count(CAVITY) > seq.masks[3].count(CAVITY));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&spec(7).with_tier(QualityTier::Medium)).unwrap();
        seq.save(dir.path()).unwrap();
        let back = Sequence::load(dir.path()).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.masks, seq.masks);
        assert_eq!(back.annotated, vec![0, 3]);
    }
}
