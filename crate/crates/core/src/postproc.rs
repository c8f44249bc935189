//! Two-step refinement of predicted label volumes.
//!
//! Step 1 removes small isolated tumor components: any 26-connected
//! component of the complete-tumor mask with volume below
//! `min(2000, 0.1 * V_max)` is relabeled to normal tissue. Step 2 targets
//! edema over-segmentation when little enhancing tumor was predicted:
//! per qualifying component, the edema voxels are 2-means-clustered on
//! their 4-modality intensities and the group with the lower mean T1c
//! intensity becomes necrotic/non-enhancing core. Step 2 only ever changes
//! edema voxels, so complete-tumor and enhancing masks are preserved
//! exactly.

use rand::rngs::StdRng;
use serde::Serialize;

use crate::error::{OmError, Result};
use crate::sampler::{is_complete_tumor, LabelVolume, Volume, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NCR_NET, LABEL_NORMAL, T1C};

/// One 26-connected component of the predicted complete-tumor mask.
#[derive(Debug, Clone)]
pub struct ConnectedComponent {
    pub id: usize,
    pub voxels: Vec<usize>,
    /// Complete-tumor voxels in this component (its size).
    pub vol_t: usize,
    /// Enhancing voxels in this component.
    pub vol_e: usize,
}

/// Label 26-connected regions of a binary mask.
pub fn connected_components_3d(mask: &[bool], dims: [usize; 3]) -> Vec<ConnectedComponent> {
    let [w, h, l] = dims;
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut voxels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(v) = stack.pop() {
            voxels.push(v);
            let (x, y, z) = (v % w, (v / w) % h, v / (w * h));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0 || ny < 0 || nz < 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                        if nx >= w || ny >= h || nz >= l {
                            continue;
                        }
                        let n = nx + w * (ny + h * nz);
                        if mask[n] && !visited[n] {
                            visited[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        components.push(ConnectedComponent {
            id: components.len(),
            vol_t: voxels.len(),
            vol_e: 0,
            voxels,
        });
    }
    components
}

fn tumor_components(labels: &LabelVolume) -> Vec<ConnectedComponent> {
    let mask = labels.mask_where(is_complete_tumor);
    let mut comps = connected_components_3d(&mask, labels.dims);
    for c in comps.iter_mut() {
        c.vol_e = c
            .voxels
            .iter()
            .filter(|&&v| labels.labels[v] == LABEL_ENHANCING)
            .count();
    }
    comps
}

#[derive(Debug, Clone, Serialize)]
pub struct Step1Report {
    pub v_max: usize,
    pub tau_vol: f64,
    pub components: usize,
    pub removed_components: usize,
    pub removed_voxels: usize,
}

/// Minimum retained component volume.
pub fn tau_vol(v_max: usize) -> f64 {
    (0.1 * v_max as f64).min(2000.0)
}

/// Step 1: relabel tumor components smaller than the volume threshold to
/// normal tissue. Never adds tumor voxels; with no tumor present it is the
/// identity.
pub fn remove_small_clusters(labels: &LabelVolume) -> (LabelVolume, Step1Report) {
    let comps = tumor_components(labels);
    let v_max = comps.iter().map(|c| c.vol_t).max().unwrap_or(0);
    let tau = tau_vol(v_max);
    let mut out = labels.clone();
    let mut removed_components = 0;
    let mut removed_voxels = 0;
    for c in &comps {
        if (c.vol_t as f64) < tau {
            removed_components += 1;
            removed_voxels += c.vol_t;
            for &v in &c.voxels {
                out.labels[v] = LABEL_NORMAL;
            }
        }
    }
    (
        out,
        Step1Report {
            v_max,
            tau_vol: tau,
            components: comps.len(),
            removed_components,
            removed_voxels,
        },
    )
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<u8>,
    pub centroids: [[f32; 4]; 2],
    /// All points identical: clustering carries no information.
    pub degenerate: bool,
}

/// Two-means clustering of 4-float intensity vectors with deterministic
/// initialization (the points with minimum and maximum T1c intensity).
/// Lloyd iterations run until assignments are stable or 100 rounds.
pub fn kmeans2(points: &[[f32; 4]], _rng: &mut StdRng) -> Result<KmeansResult> {
    if points.len() < 2 {
        return Err(OmError::InvalidArgument {
            op: "kmeans2",
            msg: format!("need at least 2 points, got {}", points.len()),
        });
    }
    let degenerate = points.windows(2).all(|w| w[0] == w[1]);
    let lo = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1[T1C].partial_cmp(&b.1[T1C]).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let hi = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1[T1C].partial_cmp(&b.1[T1C]).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let mut centroids = [points[lo], points[hi]];
    let mut assignments = vec![0u8; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let d0 = dist2(p, &centroids[0]);
            let d1 = dist2(p, &centroids[1]);
            let a = u8::from(d1 < d0);
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
        }
        for k in 0..2u8 {
            let members: Vec<&[f32; 4]> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = [0f64; 4];
            for p in &members {
                for m in 0..4 {
                    mean[m] += p[m] as f64;
                }
            }
            for m in 0..4 {
                centroids[k as usize][m] = (mean[m] / members.len() as f64) as f32;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KmeansResult { assignments, centroids, degenerate })
}

fn dist2(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    (0..4).map(|m| (a[m] as f64 - b[m] as f64).powi(2)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct Step2Report {
    pub vol_e: usize,
    pub vol_t: usize,
    pub global_triggered: bool,
    pub components_processed: usize,
    pub voxels_relabeled: usize,
}

/// Step 2: for each tumor component meeting all three volume conditions
/// (global `vol_e/vol_t < 0.1`, component `vol_e/vol_t < 0.05`, component
/// `vol_e < 1000`), cluster its edema voxels into two intensity groups and
/// relabel the lower-mean-T1c group to necrotic/non-enhancing core.
pub fn relabel_edema(
    labels: &LabelVolume,
    volume: &Volume,
    rng: &mut StdRng,
) -> Result<(LabelVolume, Step2Report)> {
    let voxels = labels.voxels();
    let vol_e = labels.labels.iter().filter(|&&l| l == LABEL_ENHANCING).count();
    let vol_t = labels.labels.iter().filter(|&&l| is_complete_tumor(l)).count();
    let mut report = Step2Report {
        vol_e,
        vol_t,
        global_triggered: false,
        components_processed: 0,
        voxels_relabeled: 0,
    };
    let mut out = labels.clone();
    if vol_t == 0 || (vol_e as f64) / (vol_t as f64) >= 0.1 {
        return Ok((out, report));
    }
    report.global_triggered = true;
    let intensities = volume.intensities.data();
    let modalities = volume.modalities();
    if modalities < 4 {
        return Err(OmError::InvalidArgument {
            op: "relabel_edema",
            msg: "need 4 modalities for intensity clustering".into(),
        });
    }
    for comp in tumor_components(labels) {
        let ratio = comp.vol_e as f64 / comp.vol_t as f64;
        if ratio >= 0.05 || comp.vol_e >= 1000 {
            continue;
        }
        let edema: Vec<usize> = comp
            .voxels
            .iter()
            .copied()
            .filter(|&v| labels.labels[v] == LABEL_EDEMA)
            .collect();
        if edema.len() < 2 {
            continue;
        }
        let points: Vec<[f32; 4]> = edema
            .iter()
            .map(|&v| {
                [
                    intensities[v],
                    intensities[voxels + v],
                    intensities[2 * voxels + v],
                    intensities[3 * voxels + v],
                ]
            })
            .collect();
        let km = kmeans2(&points, rng)?;
        if km.degenerate {
            continue;
        }
        // group with the lower mean T1c becomes core
        let mut sums = [0f64; 2];
        let mut counts = [0usize; 2];
        for (p, &a) in points.iter().zip(&km.assignments) {
            sums[a as usize] += p[T1C] as f64;
            counts[a as usize] += 1;
        }
        if counts[0] == 0 || counts[1] == 0 {
            continue;
        }
        let dark = u8::from(sums[1] / (counts[1] as f64) < sums[0] / (counts[0] as f64));
        for (&v, &a) in edema.iter().zip(&km.assignments) {
            if a == dark {
                out.labels[v] = LABEL_NCR_NET;
                report.voxels_relabeled += 1;
            }
        }
        report.components_processed += 1;
    }
    Ok((out, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct PostprocReport {
    pub step1: Option<Step1Report>,
    pub step2: Option<Step2Report>,
}

/// Run the enabled refinement steps in order.
pub fn postprocess(
    labels: &LabelVolume,
    volume: &Volume,
    enable_step1: bool,
    enable_step2: bool,
    rng: &mut StdRng,
) -> Result<(LabelVolume, PostprocReport)> {
    let mut current = labels.clone();
    let mut report = PostprocReport { step1: None, step2: None };
    if enable_step1 {
        let (next, r) = remove_small_clusters(&current);
        current = next;
        report.step1 = Some(r);
    }
    if enable_step2 {
        let (next, r) = relabel_edema(&current, volume, rng)?;
        current = next;
        report.step2 = Some(r);
    }
    Ok((current, report))
}
