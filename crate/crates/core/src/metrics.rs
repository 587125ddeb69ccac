//! Overlap and surface-distance metrics on labelled masks with physical spacing.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};
use crate::tnsr::{self, AnyTensor};

/// A label volume (2D or 3D) with per-axis voxel size in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    shape: Vec<usize>,
    labels: Vec<u8>,
    spacing: Vec<f64>,
    classes: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    spacing: Vec<f64>,
    classes: u8,
}

impl SegmentationMask {
    pub fn new(shape: Vec<usize>, labels: Vec<u8>, spacing: Vec<f64>, classes: u8) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::invalid("mask", format!("rank must be 1..=3, got {shape:?}")));
        }
        if numel(&shape) != labels.len() {
            return Err(Error::shape("mask", &shape, &[labels.len()]));
        }
        if spacing.len() != shape.len() || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("mask", format!("spacing {spacing:?} must be positive, one per axis")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("mask", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            shape,
            labels,
            spacing,
            classes,
        })
    }

    /// Argmax over the class axis of `[C, spatial..]` scores.
    pub fn from_scores<T: Scalar>(scores: &Tensor<T>, spacing: Vec<f64>) -> Result<Self> {
        if scores.rank() < 2 {
            return Err(Error::invalid("mask", "scores need a class axis"));
        }
        let c = scores.shape()[0];
        let n = numel(&scores.shape()[1..]);
        let d = scores.data();
        let labels = (0..n)
            .map(|x| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * n + x] > d[best * n + x] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(scores.shape()[1..].to_vec(), labels, spacing, c as u8)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Writes the labels as a u8 TNSR record and a JSON sidecar `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        tnsr::write_atomic(path, &tnsr::encode_u8(&self.shape, &self.labels))?;
        let side = Sidecar {
            spacing: self.spacing.clone(),
            classes: self.classes,
        };
        let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
        tnsr::write_atomic(&sidecar_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (shape, labels) = match tnsr::read_file(path)? {
            AnyTensor::U8 { shape, data } => (shape, data),
            other => {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!("expected a u8 mask, found {:?}", other.dtype()),
                })
            }
        };
        let side_path = sidecar_path(path);
        let bytes = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: side_path,
            source: e,
        })?;
        Self::new(shape, labels, side.spacing, side.classes)
    }

    fn check_pair(&self, other: &Self, class: u8) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("metric", &self.shape, &other.shape));
        }
        if self.spacing != other.spacing {
            return Err(Error::invalid(
                "metric",
                format!("spacing {:?} differs from {:?}", self.spacing, other.spacing),
            ));
        }
        if class >= self.classes.max(other.classes) {
            return Err(Error::invalid("metric", format!("class {class} out of range")));
        }
        Ok(())
    }

    /// Physical coordinates of the class voxels with at least one face
    /// neighbour outside the class or outside the volume, in scan order.
    pub fn boundary(&self, class: u8) -> Vec<[f64; 3]> {
        let st = strides(&self.shape);
        let mut out = Vec::new();
        let mut idx = vec![0usize; self.shape.len()];
        for (flat, &l) in self.labels.iter().enumerate() {
            let mut rem = flat;
            for (a, &s) in st.iter().enumerate() {
                idx[a] = rem / s;
                rem %= s;
            }
            if l != class {
                continue;
            }
            let edge = idx.iter().enumerate().any(|(a, &i)| {
                i == 0
                    || i + 1 == self.shape[a]
                    || self.labels[flat - st[a]] != class
                    || self.labels[flat + st[a]] != class
            });
            if edge {
                let mut p = [0.0; 3];
                for (a, &i) in idx.iter().enumerate() {
                    p[a] = i as f64 * self.spacing[a];
                }
                out.push(p);
            }
        }
        out
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Squared Euclidean distance; every distance in this module goes through here.
#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Nearest-neighbour lookup over a fixed point set, sorted along the first axis
/// and pruned by the first-axis gap. Returns exactly the brute-force minimum.
struct NearestIndex {
    points: Vec<[f64; 3]>,
}

impl NearestIndex {
    fn new(mut points: Vec<[f64; 3]>) -> Self {
        points.sort_by(|a, b| a[0].total_cmp(&b[0]));
        Self { points }
    }

    fn nearest2(&self, q: &[f64; 3]) -> f64 {
        let pts = &self.points;
        let start = pts.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        for p in &pts[start..] {
            let gap = p[0] - q[0];
            if gap * gap > best {
                break;
            }
            best = best.min(dist2(q, p));
        }
        for p in pts[..start].iter().rev() {
            let gap = q[0] - p[0];
            if gap * gap > best {
                break;
            }
            best = best.min(dist2(q, p));
        }
        best
    }
}

/// Distance from every point of `from` to its nearest point of `to`, in `from` order.
fn directed(from: &[[f64; 3]], to: &NearestIndex) -> Vec<f64> {
    from.iter().map(|p| to.nearest2(p).sqrt()).collect()
}

fn boundaries(a: &SegmentationMask, b: &SegmentationMask, class: u8, metric: &'static str) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    a.check_pair(b, class)?;
    for (m, reason) in [(a, "the first mask has no voxels of this class"), (b, "the second mask has no voxels of this class")] {
        if m.count(class) == 0 {
            return Err(Error::UndefinedMetric { metric, class, reason });
        }
    }
    Ok((a.boundary(class), b.boundary(class)))
}

/// Dice similarity of one class; 1 when both masks lack it.
pub fn dsc(a: &SegmentationMask, b: &SegmentationMask, class: u8) -> Result<f64> {
    a.check_pair(b, class)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Symmetric Hausdorff distance between class boundaries, in mm.
pub fn hausdorff(a: &SegmentationMask, b: &SegmentationMask, class: u8) -> Result<f64> {
    let (ba, bb) = boundaries(a, b, class, "hausdorff")?;
    let ab = directed(&ba, &NearestIndex::new(bb.clone()));
    let ba_ = directed(&bb, &NearestIndex::new(ba));
    Ok(ab.into_iter().chain(ba_).fold(0.0, f64::max))
}

/// Mean of the two directed mean boundary distances, in mm.
pub fn masd(a: &SegmentationMask, b: &SegmentationMask, class: u8) -> Result<f64> {
    let (ba, bb) = boundaries(a, b, class, "masd")?;
    let ab = directed(&ba, &NearestIndex::new(bb.clone()));
    let ba_ = directed(&bb, &NearestIndex::new(ba));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&ab) + mean(&ba_)))
}

/// Metrics of one class; distance metrics are `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
}

/// Evaluates `pred` against `truth` for each listed class.
pub fn evaluate(pred: &SegmentationMask, truth: &SegmentationMask, classes: &[u8]) -> Result<MetricReport> {
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let dsc = dsc(pred, truth, class)?;
        let (hd, masd, undefined) = match (hausdorff(pred, truth, class), masd(pred, truth, class)) {
            (Ok(h), Ok(m)) => (Some(h), Some(m), None),
            (Err(e @ Error::UndefinedMetric { .. }), _) | (_, Err(e @ Error::UndefinedMetric { .. })) => {
                (None, None, Some(e.to_string()))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        out.push(ClassMetrics {
            class,
            dsc,
            hd_mm: hd,
            masd_mm: masd,
            undefined,
        });
    }
    Ok(MetricReport { classes: out })
}

/// Sorted `(value, i/n)` pairs; the last fraction is exactly 1.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

/// Mean of the defined values and how many were excluded.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}
