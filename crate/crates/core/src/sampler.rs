//! Volumes, labels, preprocessing, and task-specific patch sampling.
//!
//! Label codes: 0 background, 1 normal tissue, 2 edema, 3 necrotic /
//! non-enhancing core, 4 enhancing tumor. The complete tumor is {2,3,4},
//! the core {3,4}. Task 1 samples anywhere in the brain, task 2 inside the
//! 5-voxel dilation of the ground-truth complete tumor, task 3 inside the
//! ground-truth core; the three regions are nested.

use rand::rngs::StdRng;
use rand::Rng;

use crate::error::{OmError, Result};
use crate::tensor::Tensor;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NORMAL: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_NCR_NET: u8 = 3;
pub const LABEL_ENHANCING: u8 = 4;

pub const MODALITIES: [&str; 4] = ["FLAIR", "T1", "T1c", "T2"];
/// Index of the T1c channel in the fixed modality order.
pub const T1C: usize = 2;

pub fn is_complete_tumor(label: u8) -> bool {
    matches!(label, LABEL_EDEMA | LABEL_NCR_NET | LABEL_ENHANCING)
}

pub fn is_core(label: u8) -> bool {
    matches!(label, LABEL_NCR_NET | LABEL_ENHANCING)
}

/// Four-modality intensity volume plus its brain mask.
#[derive(Debug, Clone)]
pub struct Volume {
    pub intensities: Tensor,
    pub brain_mask: Vec<bool>,
}

impl Volume {
    /// Wrap an intensity tensor, deriving the brain mask as "any modality
    /// nonzero" (inputs are skull-stripped, background is exactly zero).
    pub fn from_intensities(intensities: Tensor) -> Result<Volume> {
        let vd = intensities.as_volume()?;
        if vd.batched {
            return Err(OmError::InvalidArgument {
                op: "volume",
                msg: "expected a single 4D volume".into(),
            });
        }
        let voxels = vd.voxels();
        let data = intensities.data();
        let mut brain_mask = vec![false; voxels];
        for (v, m) in brain_mask.iter_mut().enumerate() {
            *m = (0..vd.channels).any(|c| data[voxels * c + v] != 0.0);
        }
        Ok(Volume { intensities, brain_mask })
    }

    pub fn with_mask(intensities: Tensor, brain_mask: Vec<bool>) -> Result<Volume> {
        let vd = intensities.as_volume()?;
        if brain_mask.len() != vd.voxels() {
            return Err(OmError::ShapeMismatch {
                op: "volume",
                lhs: intensities.shape().to_vec(),
                rhs: vec![brain_mask.len()],
            });
        }
        Ok(Volume { intensities, brain_mask })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.intensities.shape();
        [s[0], s[1], s[2]]
    }

    pub fn modalities(&self) -> usize {
        self.intensities.shape()[3]
    }
}

/// Voxelwise class labels of one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<LabelVolume> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(OmError::ShapeMismatch {
                op: "label_volume",
                lhs: dims.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > LABEL_ENHANCING) {
            return Err(OmError::LabelOutOfRange { label: bad, classes: 5 });
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// Boolean mask of voxels whose label satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(u8) -> bool) -> Vec<bool> {
        self.labels.iter().map(|&l| pred(l)).collect()
    }

    /// Tumor labels must lie inside the brain mask.
    pub fn check_consistent(&self, volume: &Volume) -> Result<()> {
        if self.dims != volume.dims() {
            return Err(OmError::ShapeMismatch {
                op: "label_volume",
                lhs: self.dims.to_vec(),
                rhs: volume.dims().to_vec(),
            });
        }
        for (v, &l) in self.labels.iter().enumerate() {
            if is_complete_tumor(l) && !volume.brain_mask[v] {
                return Err(OmError::InvalidArgument {
                    op: "label_volume",
                    msg: format!("tumor label {l} outside brain mask at voxel {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Standardize each modality to zero mean and unit variance over the brain
/// mask; non-brain voxels become zero.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    let vd = volume.intensities.as_volume()?;
    let voxels = vd.voxels();
    let brain: Vec<usize> = (0..voxels).filter(|&v| volume.brain_mask[v]).collect();
    if brain.is_empty() {
        return Err(OmError::InvalidArgument {
            op: "normalize",
            msg: "empty brain mask".into(),
        });
    }
    let mut out = vec![0f32; volume.intensities.len()];
    for c in 0..vd.channels {
        let plane = &volume.intensities.data()[voxels * c..voxels * (c + 1)];
        let mean = brain.iter().map(|&v| plane[v] as f64).sum::<f64>() / brain.len() as f64;
        let var = brain
            .iter()
            .map(|&v| (plane[v] as f64 - mean).powi(2))
            .sum::<f64>()
            / brain.len() as f64;
        if var == 0.0 {
            return Err(OmError::ZeroVariance { modality: c });
        }
        let std = var.sqrt();
        let oplane = &mut out[voxels * c..voxels * (c + 1)];
        for &v in &brain {
            oplane[v] = ((plane[v] as f64 - mean) / std) as f32;
        }
    }
    Ok(Volume {
        intensities: Tensor::new(volume.intensities.shape(), out)?,
        brain_mask: volume.brain_mask.clone(),
    })
}

/// A patch location within a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub corner: [usize; 3],
    pub extents: [usize; 3],
    pub task: usize,
}

/// Binary dilation with a cube (Chebyshev) structuring element, separable
/// into three 1D max filters. Monotone: output contains the input.
pub fn dilate_mask(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let [w, h, l] = dims;
    let idx = |x: usize, y: usize, z: usize| x + w * (y + h * z);
    let mut a = mask.to_vec();
    let mut b = vec![false; mask.len()];
    // x pass
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                b[idx(x, y, z)] = (lo..=hi).any(|i| a[idx(i, y, z)]);
            }
        }
    }
    // y pass
    for z in 0..l {
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                a[idx(x, y, z)] = (lo..=hi).any(|j| b[idx(x, j, z)]);
            }
        }
    }
    // z pass
    for z in 0..l {
        let lo = z.saturating_sub(radius);
        let hi = (z + radius).min(l - 1);
        for y in 0..h {
            for x in 0..w {
                b[idx(x, y, z)] = (lo..=hi).any(|k| a[idx(x, y, k)]);
            }
        }
    }
    b
}

/// Sampling region for a task: brain for task 1, dilated ground-truth
/// complete tumor for task 2, ground-truth core for task 3.
pub fn task_region(volume: &Volume, labels: &LabelVolume, task: usize) -> Vec<bool> {
    match task {
        0 => volume.brain_mask.clone(),
        1 => dilate_mask(
            &labels.mask_where(is_complete_tumor),
            labels.dims,
            DILATION_RADIUS,
        ),
        _ => labels.mask_where(is_core),
    }
}

/// Coarse-mask dilation radius in voxels.
pub const DILATION_RADIUS: usize = 5;

/// Draw patch centers uniformly from the task's region; corners are clamped
/// so every patch lies fully inside the volume. An empty region yields an
/// empty list (logged, not an error): low-grade cases may have no core.
pub fn sample_patches(
    volume: &Volume,
    labels: &LabelVolume,
    task: usize,
    count: usize,
    extents: [usize; 3],
    rng: &mut StdRng,
) -> Result<Vec<PatchSpec>> {
    let dims = volume.dims();
    for a in 0..3 {
        if extents[a] > dims[a] {
            return Err(OmError::InvalidArgument {
                op: "sample_patches",
                msg: format!("patch {:?} larger than volume {:?}", extents, dims),
            });
        }
    }
    let region = task_region(volume, labels, task);
    let centers: Vec<usize> = (0..region.len()).filter(|&v| region[v]).collect();
    if centers.is_empty() {
        eprintln!("warning: empty sampling region for task {}, no patches sampled", task + 1);
        return Ok(Vec::new());
    }
    let [w, h, _] = dims;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = centers[rng.gen_range(0..centers.len())];
        let center = [v % w, (v / w) % h, v / (w * h)];
        let mut corner = [0usize; 3];
        for a in 0..3 {
            let half = extents[a] / 2;
            corner[a] = center[a].saturating_sub(half).min(dims[a] - extents[a]);
        }
        out.push(PatchSpec { corner, extents, task });
    }
    Ok(out)
}

/// Whether a patch can also feed a harder task's loss: at least 40% complete
/// tumor for task 2, at least 50% core for task 3 (inclusive thresholds,
/// exact integer arithmetic).
pub fn transfer_predicate(labels_in_patch: &[u8], target_task: usize) -> bool {
    let n = labels_in_patch.len();
    if n == 0 {
        return false;
    }
    match target_task {
        1 => {
            let hits = labels_in_patch.iter().filter(|&&l| is_complete_tumor(l)).count();
            5 * hits >= 2 * n
        }
        2 => {
            let hits = labels_in_patch.iter().filter(|&&l| is_core(l)).count();
            2 * hits >= n
        }
        _ => false,
    }
}

/// Task-3 is binary (enhancing vs everything else); tasks 1 and 2 keep the
/// five-class labels.
pub fn remap_labels(labels: &[u8], target_task: usize) -> Vec<u8> {
    if target_task == 2 {
        labels
            .iter()
            .map(|&l| u8::from(l == LABEL_ENHANCING))
            .collect()
    } else {
        labels.to_vec()
    }
}

/// Copy a patch of intensities, channel-planar.
pub fn extract_patch(volume: &Volume, spec: &PatchSpec) -> Tensor {
    let [w, h, _] = volume.dims();
    let [pw, ph, pl] = spec.extents;
    let channels = volume.modalities();
    let voxels_in = volume.dims()[0] * volume.dims()[1] * volume.dims()[2];
    let src = volume.intensities.data();
    let mut data = vec![0f32; pw * ph * pl * channels];
    for c in 0..channels {
        for z in 0..pl {
            for y in 0..ph {
                let srow = voxels_in * c
                    + (spec.corner[0]
                        + w * (spec.corner[1] + y + h * (spec.corner[2] + z)));
                let drow = pw * (y + ph * (z + pl * c));
                data[drow..drow + pw].copy_from_slice(&src[srow..srow + pw]);
            }
        }
    }
    Tensor::new(&[pw, ph, pl, channels], data).expect("patch shape")
}

/// Copy a patch of labels, x fastest.
pub fn extract_labels(labels: &LabelVolume, spec: &PatchSpec) -> Vec<u8> {
    let [w, h, _] = labels.dims;
    let [pw, ph, pl] = spec.extents;
    let mut out = vec![0u8; pw * ph * pl];
    for z in 0..pl {
        for y in 0..ph {
            let srow = spec.corner[0] + w * (spec.corner[1] + y + h * (spec.corner[2] + z));
            let drow = pw * (y + ph * z);
            out[drow..drow + pw].copy_from_slice(&labels.labels[srow..srow + pw]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn flat_volume(dims: [usize; 3], brain: impl Fn(usize) -> bool, val: impl Fn(usize, usize) -> f32) -> Volume {
        let voxels = dims[0] * dims[1] * dims[2];
        let mut data = vec![0f32; voxels * 4];
        let mut mask = vec![false; voxels];
        for v in 0..voxels {
            if brain(v) {
                mask[v] = true;
                for c in 0..4 {
                    data[voxels * c + v] = val(v, c);
                }
            }
        }
        Volume::with_mask(
            Tensor::new(&[dims[0], dims[1], dims[2], 4], data).unwrap(),
            mask,
        )
        .unwrap()
    }

    #[test]
    fn normalize_rejects_constant_modality() {
        let vol = flat_volume([4, 4, 2], |v| v < 16, |_, _| 3.0);
        assert!(matches!(
            normalize(&vol),
            Err(OmError::ZeroVariance { modality: 0 })
        ));
    }

    #[test]
    fn normalize_is_idempotent() {
        let vol = flat_volume([4, 4, 2], |v| v % 3 != 0, |v, c| (v * (c + 1)) as f32 * 0.1);
        let once = normalize(&vol).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.intensities.data().iter().zip(twice.intensities.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_two_value_brain_maps_to_plus_minus_one() {
        // equal counts of 0 and 2 inside the brain -> mean 1, std 1
        let vol = flat_volume([4, 4, 1], |_| true, |v, _| if v % 2 == 0 { 0.0 } else { 2.0 });
        let norm = normalize(&vol).unwrap();
        let voxels = 16;
        for c in 0..4 {
            for v in 0..voxels {
                let expect = if v % 2 == 0 { -1.0 } else { 1.0 };
                assert!((norm.intensities.data()[voxels * c + v] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalized_stats_are_standard_over_brain() {
        let vol = flat_volume([6, 5, 4], |v| v % 7 != 0, |v, c| ((v * 31 + c * 17) % 23) as f32);
        let norm = normalize(&vol).unwrap();
        let voxels = 120;
        let brain: Vec<usize> = (0..voxels).filter(|&v| norm.brain_mask[v]).collect();
        for c in 0..4 {
            let plane = &norm.intensities.data()[voxels * c..voxels * (c + 1)];
            let mean: f64 = brain.iter().map(|&v| plane[v] as f64).sum::<f64>() / brain.len() as f64;
            let var: f64 = brain.iter().map(|&v| (plane[v] as f64 - mean).powi(2)).sum::<f64>()
                / brain.len() as f64;
            assert!(mean.abs() < 1e-3, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn dilate_empty_stays_empty_and_single_voxel_becomes_cube() {
        let dims = [13, 13, 13];
        let n = 13 * 13 * 13;
        assert!(!dilate_mask(&vec![false; n], dims, 5).iter().any(|&b| b));

        let mut mask = vec![false; n];
        mask[6 + 13 * (6 + 13 * 6)] = true;
        let d = dilate_mask(&mask, dims, 5);
        let count = d.iter().filter(|&&b| b).count();
        assert_eq!(count, 11 * 11 * 11);
        // verify it is exactly the Chebyshev ball
        for z in 0..13usize {
            for y in 0..13usize {
                for x in 0..13usize {
                    let inside = x.abs_diff(6) <= 5 && y.abs_diff(6) <= 5 && z.abs_diff(6) <= 5;
                    assert_eq!(d[x + 13 * (y + 13 * z)], inside);
                }
            }
        }
    }

    #[test]
    fn dilation_is_monotone() {
        let dims = [8, 8, 4];
        let n = 256;
        let mut rng = StdRng::seed_from_u64(31);
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
        let d2 = dilate_mask(&mask, dims, 2);
        let d3 = dilate_mask(&dilate_mask(&mask, dims, 2), dims, 3);
        // dilate(dilate(m,2),3) contains dilate(m, max(2,3))
        let d_max = dilate_mask(&mask, dims, 3);
        for v in 0..n {
            assert!(!mask[v] || d2[v]);
            if d_max[v] {
                assert!(d3[v]);
            }
        }
    }

    #[test]
    fn transfer_thresholds_are_inclusive_and_exact() {
        // 10 voxels: 4 tumor = exactly 0.4 -> true for task 2
        let mut p = vec![LABEL_NORMAL; 10];
        for l in p.iter_mut().take(4) {
            *l = LABEL_EDEMA;
        }
        assert!(transfer_predicate(&p, 1));
        // 39% -> false: 39 of 100
        let mut p = vec![LABEL_NORMAL; 100];
        for l in p.iter_mut().take(39) {
            *l = LABEL_EDEMA;
        }
        assert!(!transfer_predicate(&p, 1));
        // all tumor -> true
        assert!(transfer_predicate(&vec![LABEL_ENHANCING; 64], 1));
        // exactly half core -> true for task 3
        let mut p = vec![LABEL_EDEMA; 8];
        for l in p.iter_mut().take(4) {
            *l = LABEL_NCR_NET;
        }
        assert!(transfer_predicate(&p, 2));
        p[3] = LABEL_EDEMA; // 3 of 8 -> false
        assert!(!transfer_predicate(&p, 2));
    }

    #[test]
    fn transfer_predicate_matches_counting_oracle() {
        let mut rng = StdRng::seed_from_u64(32);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=64usize);
            let patch: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=4u8)).collect();
            for task in [1usize, 2] {
                let hits = patch
                    .iter()
                    .filter(|&&l| if task == 1 { is_complete_tumor(l) } else { is_core(l) })
                    .count();
                let threshold = if task == 1 { 0.4 } else { 0.5 };
                let expect = hits as f64 / n as f64 >= threshold;
                assert_eq!(transfer_predicate(&patch, task), expect, "n={n} task={task}");
            }
        }
    }

    #[test]
    fn remap_is_identity_for_tasks_1_2_and_binary_for_task_3() {
        let labels = vec![0u8, 1, 2, 3, 4];
        assert_eq!(remap_labels(&labels, 0), labels);
        assert_eq!(remap_labels(&labels, 1), labels);
        assert_eq!(remap_labels(&labels, 2), vec![0, 0, 0, 0, 1]);
        assert_eq!(remap_labels(&vec![LABEL_ENHANCING; 6], 2), vec![1; 6]);
        assert_eq!(remap_labels(&[LABEL_EDEMA], 2), vec![0]);
    }

    fn toy_case() -> (Volume, LabelVolume) {
        let dims = [16, 16, 8];
        let voxels = 16 * 16 * 8;
        let vol = flat_volume(dims, |_| true, |v, c| ((v + c) % 13) as f32 + 1.0);
        let mut labels = vec![LABEL_NORMAL; voxels];
        // a small tumor block with core inside
        for z in 2..6 {
            for y in 4..10 {
                for x in 4..10 {
                    labels[x + 16 * (y + 16 * z)] = LABEL_EDEMA;
                }
            }
        }
        for z in 3..5 {
            for y in 6..8 {
                for x in 6..8 {
                    labels[x + 16 * (y + 16 * z)] = LABEL_NCR_NET;
                }
            }
        }
        (vol, LabelVolume::new(dims, labels).unwrap())
    }

    #[test]
    fn task1_centers_lie_in_brain() {
        let (vol, labels) = toy_case();
        let mut rng = StdRng::seed_from_u64(33);
        let patches =
            sample_patches(&vol, &labels, 0, 50, [8, 8, 4], &mut rng).unwrap();
        assert_eq!(patches.len(), 50);
        for p in &patches {
            for a in 0..3 {
                assert!(p.corner[a] + p.extents[a] <= vol.dims()[a]);
            }
        }
    }

    #[test]
    fn task_regions_are_nested() {
        let (vol, labels) = toy_case();
        let r1 = task_region(&vol, &labels, 0);
        let r2_gt = labels.mask_where(is_complete_tumor);
        let r2 = task_region(&vol, &labels, 1);
        let r3 = task_region(&vol, &labels, 2);
        for v in 0..r1.len() {
            if r3[v] {
                assert!(r2_gt[v], "core outside ground-truth tumor");
            }
            if r2_gt[v] {
                assert!(r2[v], "tumor outside dilated region");
            }
        }
    }

    #[test]
    fn empty_core_region_yields_empty_list() {
        let (vol, _) = toy_case();
        let labels = LabelVolume::new([16, 16, 8], vec![LABEL_NORMAL; 16 * 16 * 8]).unwrap();
        let mut rng = StdRng::seed_from_u64(34);
        let patches = sample_patches(&vol, &labels, 2, 10, [8, 8, 4], &mut rng).unwrap();
        assert!(patches.is_empty());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let (vol, labels) = toy_case();
        let a = sample_patches(&vol, &labels, 1, 20, [8, 8, 4], &mut StdRng::seed_from_u64(35))
            .unwrap();
        let b = sample_patches(&vol, &labels, 1, 20, [8, 8, 4], &mut StdRng::seed_from_u64(35))
            .unwrap();
        assert_eq!(a, b);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            /// Dilation is monotone: the output contains the input, and a
            /// larger radius contains a smaller one.
            #[test]
            fn dilation_monotone(
                mask in proptest::collection::vec(proptest::bool::weighted(0.15), 6 * 5 * 4),
                r1 in 0usize..3,
                r2 in 0usize..3,
            ) {
                let dims = [6, 5, 4];
                let (lo, hi) = (r1.min(r2), r1.max(r2));
                let dl = dilate_mask(&mask, dims, lo);
                let dh = dilate_mask(&mask, dims, hi);
                for v in 0..mask.len() {
                    prop_assert!(!mask[v] || dl[v]);
                    prop_assert!(!dl[v] || dh[v]);
                }
            }

            /// The transfer predicates agree with a direct voxel count.
            #[test]
            fn predicate_matches_count(
                patch in proptest::collection::vec(0u8..5, 1..128)
            ) {
                let n = patch.len() as f64;
                let tumor = patch.iter().filter(|&&l| l >= 2).count() as f64;
                let core = patch.iter().filter(|&&l| l >= 3).count() as f64;
                prop_assert_eq!(transfer_predicate(&patch, 1), tumor / n >= 0.4);
                prop_assert_eq!(transfer_predicate(&patch, 2), core / n >= 0.5);
            }
        }
    }

    #[test]
    fn extract_round_trips_against_direct_indexing() {
        let (vol, labels) = toy_case();
        let spec = PatchSpec { corner: [3, 2, 1], extents: [5, 4, 3], task: 0 };
        let patch = extract_patch(&vol, &spec);
        let lab = extract_labels(&labels, &spec);
        let [w, h, _] = vol.dims();
        let voxels = w * h * 8;
        for c in 0..4 {
            for z in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let src = vol.intensities.data()[voxels * c
                            + (3 + x)
                            + w * ((2 + y) + h * (1 + z))];
                        assert_eq!(patch.at(&[x, y, z, c]), src);
                    }
                }
            }
        }
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let src = labels.labels[(3 + x) + w * ((2 + y) + h * (1 + z))];
                    assert_eq!(lab[x + 5 * (y + 4 * z)], src);
                }
            }
        }
    }
}
