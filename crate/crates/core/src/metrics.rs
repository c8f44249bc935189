//! Evaluation: region extraction, overlap metrics, and surface distances.
//!
//! Regions follow the cascade hierarchy: complete tumor {2,3,4}, core {3,4},
//! enhancing {4}. Dice = 2TP/(FP+2TP+FN), PPV = TP/(FP+TP), Sensitivity =
//! TP/(TP+FN). When both masks are empty the overlap metrics are defined as
//! 1, when exactly one is empty as 0. Surface voxels are mask voxels with a
//! 6-neighbor outside the mask (volume borders count as outside); distances
//! are Euclidean in voxel units, scaled by the spacing when given.

use crate::error::{OmError, Result};
use crate::sampler::{is_complete_tumor, is_core, LabelVolume};

/// The three evaluation region masks of one label volume.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub dims: [usize; 3],
    pub complete: Vec<bool>,
    pub core: Vec<bool>,
    pub enhancing: Vec<bool>,
}

pub const REGION_NAMES: [&str; 3] = ["complete", "core", "enhancing"];

impl RegionMasks {
    pub fn from_labels(labels: &LabelVolume) -> RegionMasks {
        RegionMasks {
            dims: labels.dims,
            complete: labels.mask_where(is_complete_tumor),
            core: labels.mask_where(is_core),
            enhancing: labels.mask_where(|l| l == 4),
        }
    }

    pub fn get(&self, i: usize) -> &[bool] {
        match i {
            0 => &self.complete,
            1 => &self.core,
            _ => &self.enhancing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> ConfusionCounts {
        debug_assert_eq!(pred.len(), truth.len());
        let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn pred_empty(&self) -> bool {
        self.tp + self.fp == 0
    }

    fn truth_empty(&self) -> bool {
        self.tp + self.fn_ == 0
    }
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    if c.pred_empty() && c.truth_empty() {
        return 1.0;
    }
    if c.pred_empty() || c.truth_empty() {
        return 0.0;
    }
    2.0 * c.tp as f64 / (c.fp + 2 * c.tp + c.fn_) as f64
}

pub fn ppv(c: &ConfusionCounts) -> f64 {
    if c.pred_empty() && c.truth_empty() {
        return 1.0;
    }
    if c.pred_empty() || c.truth_empty() {
        return 0.0;
    }
    c.tp as f64 / (c.fp + c.tp) as f64
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    if c.pred_empty() && c.truth_empty() {
        return 1.0;
    }
    if c.pred_empty() || c.truth_empty() {
        return 0.0;
    }
    c.tp as f64 / (c.tp + c.fn_) as f64
}

/// Surface voxels: inside the mask with at least one 6-neighbor outside it
/// (or outside the volume).
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [w, h, l] = dims;
    let idx = |x: usize, y: usize, z: usize| x + w * (y + h * z);
    let mut out = Vec::new();
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x == w - 1
                    || y == h - 1
                    || z == l - 1
                    || !mask[idx(x - 1, y, z)]
                    || !mask[idx(x + 1, y, z)]
                    || !mask[idx(x, y - 1, z)]
                    || !mask[idx(x, y + 1, z)]
                    || !mask[idx(x, y, z - 1)]
                    || !mask[idx(x, y, z + 1)];
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Directed surface distances: for each surface voxel of `from`, the minimum
/// Euclidean distance to the surface of `to`.
pub fn surface_distances(
    from: &[bool],
    to: &[bool],
    dims: [usize; 3],
    spacing: [f32; 3],
) -> Result<Vec<f64>> {
    let sa = surface_voxels(from, dims);
    let sb = surface_voxels(to, dims);
    if sa.is_empty() || sb.is_empty() {
        return Err(OmError::UndefinedMetric(
            "surface distance on an empty mask".into(),
        ));
    }
    let sp = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    Ok(sa
        .iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in &sb {
                let mut d2 = 0f64;
                for k in 0..3 {
                    let d = (a[k] as f64 - b[k] as f64) * sp[k];
                    d2 += d * d;
                }
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect())
}

/// Symmetric Hausdorff distance: max of the two directed suprema.
pub fn hausdorff(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Result<f64> {
    let ab = surface_distances(a, b, dims, spacing)?;
    let ba = surface_distances(b, a, dims, spacing)?;
    Ok(directed_max(&ab).max(directed_max(&ba)))
}

/// Hausdorff95: max of the two directed 95th percentiles (nearest rank).
pub fn hausdorff95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Result<f64> {
    let ab = surface_distances(a, b, dims, spacing)?;
    let ba = surface_distances(b, a, dims, spacing)?;
    Ok(percentile95(&ab).max(percentile95(&ba)))
}

fn directed_max(d: &[f64]) -> f64 {
    d.iter().cloned().fold(0.0, f64::max)
}

fn percentile95(d: &[f64]) -> f64 {
    let mut sorted = d.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-region metric row. Surface distances are `None` when undefined
/// (either mask empty); the CLI reports those as a sentinel.
#[derive(Debug, Clone)]
pub struct RegionMetrics {
    pub region: &'static str,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub hausdorff: Option<f64>,
    pub hausdorff95: Option<f64>,
}

/// Evaluate a prediction against ground truth on all three regions.
pub fn evaluate(
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f32; 3],
) -> Result<Vec<RegionMetrics>> {
    if pred.dims != truth.dims {
        return Err(OmError::ShapeMismatch {
            op: "evaluate",
            lhs: pred.dims.to_vec(),
            rhs: truth.dims.to_vec(),
        });
    }
    let pm = RegionMasks::from_labels(pred);
    let tm = RegionMasks::from_labels(truth);
    let mut rows = Vec::with_capacity(3);
    for (i, &region) in REGION_NAMES.iter().enumerate() {
        let counts = ConfusionCounts::from_masks(pm.get(i), tm.get(i));
        rows.push(RegionMetrics {
            region,
            counts,
            dice: dice(&counts),
            ppv: ppv(&counts),
            sensitivity: sensitivity(&counts),
            hausdorff: hausdorff(pm.get(i), tm.get(i), pred.dims, spacing).ok(),
            hausdorff95: hausdorff95(pm.get(i), tm.get(i), pred.dims, spacing).ok(),
        });
    }
    Ok(rows)
}
