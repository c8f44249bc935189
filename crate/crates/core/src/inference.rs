//! Overlap-tile prediction and cascade fusion.
//!
//! The volume is tiled by patch-sized windows on a stride equal to the
//! central region; only each patch's central-region predictions are kept and
//! stitched, so every voxel is written exactly once. Fusion applies the
//! cascade rule: task 1 decides normal-vs-background outside the dilated
//! coarse tumor mask, task 2 labels everything inside it, and task 3 settles
//! enhancing-vs-necrotic within the task-2 core.

use rayon::prelude::*;

use crate::backbone::OmNet;
use crate::error::{OmError, Result};
use crate::sampler::{dilate_mask, LabelVolume, Volume, DILATION_RADIUS};
use crate::tensor::{Graph, Tensor};

/// One tile: clamped patch corner plus the half-open region of the volume
/// this tile owns in the stitched output.
#[derive(Debug, Clone, Copy)]
pub struct Tile {
    pub corner: [usize; 3],
    pub own_lo: [usize; 3],
    pub own_hi: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct TilePlan {
    pub volume_dims: [usize; 3],
    pub patch: [usize; 3],
    pub central: [usize; 3],
    /// Central-region offset inside the patch.
    pub offset: [usize; 3],
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    /// Default geometry: 32x32x16 patches with a 20x20x5 central region,
    /// stride equal to the central region. The z margin (16-5)/2 is
    /// fractional; the offset floors to 5, leaving the extra voxel on the
    /// far side.
    pub fn new(volume_dims: [usize; 3], patch: [usize; 3], central: [usize; 3]) -> Result<TilePlan> {
        for a in 0..3 {
            if patch[a] > volume_dims[a] {
                return Err(OmError::InvalidArgument {
                    op: "tile_plan",
                    msg: format!("volume {:?} smaller than patch {:?}", volume_dims, patch),
                });
            }
            if central[a] == 0 || central[a] > patch[a] {
                return Err(OmError::InvalidArgument {
                    op: "tile_plan",
                    msg: format!("central region {:?} incompatible with patch {:?}", central, patch),
                });
            }
        }
        let offset = [
            (patch[0] - central[0]) / 2,
            (patch[1] - central[1]) / 2,
            (patch[2] - central[2]) / 2,
        ];
        let grid = [
            volume_dims[0].div_ceil(central[0]),
            volume_dims[1].div_ceil(central[1]),
            volume_dims[2].div_ceil(central[2]),
        ];
        let mut tiles = Vec::with_capacity(grid[0] * grid[1] * grid[2]);
        for kz in 0..grid[2] {
            for ky in 0..grid[1] {
                for kx in 0..grid[0] {
                    let k = [kx, ky, kz];
                    let mut tile = Tile {
                        corner: [0; 3],
                        own_lo: [0; 3],
                        own_hi: [0; 3],
                    };
                    for a in 0..3 {
                        tile.own_lo[a] = k[a] * central[a];
                        tile.own_hi[a] = (tile.own_lo[a] + central[a]).min(volume_dims[a]);
                        let want = tile.own_lo[a] as isize - offset[a] as isize;
                        tile.corner[a] =
                            want.clamp(0, (volume_dims[a] - patch[a]) as isize) as usize;
                        // owned region must sit inside the patch window
                        if tile.own_lo[a] < tile.corner[a]
                            || tile.own_hi[a] > tile.corner[a] + patch[a]
                        {
                            return Err(OmError::InvalidArgument {
                                op: "tile_plan",
                                msg: format!(
                                    "tile {:?} cannot own {:?}..{:?} on axis {a}",
                                    k, tile.own_lo, tile.own_hi
                                ),
                            });
                        }
                    }
                    tiles.push(tile);
                }
            }
        }
        Ok(TilePlan { volume_dims, patch, central, offset, tiles })
    }

    /// Times each voxel is written during stitching; identically 1 by
    /// construction, kept as an explicit check for tests.
    pub fn coverage(&self) -> Vec<u32> {
        let [w, h, l] = self.volume_dims;
        let mut cov = vec![0u32; w * h * l];
        for t in &self.tiles {
            for z in t.own_lo[2]..t.own_hi[2] {
                for y in t.own_lo[1]..t.own_hi[1] {
                    for x in t.own_lo[0]..t.own_hi[0] {
                        cov[x + w * (y + h * z)] += 1;
                    }
                }
            }
        }
        cov
    }
}

/// Softmax probabilities of every task head for one patch, in task order.
pub fn predict_patch(model: &OmNet, patch: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g);
    let x = g.input(patch.clone());
    let feats = model.forward_features(&mut g, &bind, x)?;
    let logits = model.forward_all_tasks(&mut g, &bind, feats)?;
    logits
        .into_iter()
        .map(|l| {
            let p = g.softmax_channels(l)?;
            Ok(g.value(p).clone())
        })
        .collect()
}

/// Overlap-tile inference: stitched per-voxel class probabilities for every
/// head of the model. Tiles run in parallel; each owned region has exactly
/// one writer.
pub fn overlap_tile_predict(
    model: &OmNet,
    volume: &Volume,
    plan: &TilePlan,
) -> Result<Vec<Tensor>> {
    if plan.volume_dims != volume.dims() {
        return Err(OmError::ShapeMismatch {
            op: "overlap_tile_predict",
            lhs: plan.volume_dims.to_vec(),
            rhs: volume.dims().to_vec(),
        });
    }
    let tile_probs: Vec<Result<Vec<Tensor>>> = plan
        .tiles
        .par_iter()
        .map(|tile| {
            let spec = crate::sampler::PatchSpec {
                corner: tile.corner,
                extents: plan.patch,
                task: 0,
            };
            let patch = crate::sampler::extract_patch(volume, &spec);
            predict_patch(model, &patch)
        })
        .collect();

    let [w, h, l] = plan.volume_dims;
    let classes: Vec<usize> = model
        .heads
        .iter()
        .map(|hd| model.config.num_classes_per_task[hd.task])
        .collect();
    let mut outputs: Vec<Tensor> = classes
        .iter()
        .map(|&c| Tensor::zeros(&[w, h, l, c]))
        .collect();
    let voxels = w * h * l;
    let patch_voxels = plan.patch[0] * plan.patch[1] * plan.patch[2];
    for (tile, probs) in plan.tiles.iter().zip(tile_probs) {
        let probs = probs?;
        for (t, prob) in probs.iter().enumerate() {
            let out = outputs[t].data_mut();
            for c in 0..classes[t] {
                for z in tile.own_lo[2]..tile.own_hi[2] {
                    for y in tile.own_lo[1]..tile.own_hi[1] {
                        let px = tile.own_lo[0] - tile.corner[0];
                        let py = y - tile.corner[1];
                        let pz = z - tile.corner[2];
                        let src = patch_voxels * c
                            + px
                            + plan.patch[0] * (py + plan.patch[1] * pz);
                        let dst = voxels * c + tile.own_lo[0] + w * (y + h * z);
                        let n = tile.own_hi[0] - tile.own_lo[0];
                        out[dst..dst + n].copy_from_slice(&prob.data()[src..src + n]);
                    }
                }
            }
        }
    }
    Ok(outputs)
}

/// Stitch backbone feature maps over the whole volume, central regions only.
pub fn overlap_tile_features(model: &OmNet, volume: &Volume, plan: &TilePlan) -> Result<Tensor> {
    let feats: Vec<Result<Tensor>> = plan
        .tiles
        .par_iter()
        .map(|tile| {
            let spec = crate::sampler::PatchSpec {
                corner: tile.corner,
                extents: plan.patch,
                task: 0,
            };
            let patch = crate::sampler::extract_patch(volume, &spec);
            let mut g = Graph::new();
            let bind = model.params.bind(&mut g);
            let x = g.input(patch);
            let f = model.forward_features(&mut g, &bind, x)?;
            Ok(g.value(f).clone())
        })
        .collect();
    let [w, h, l] = plan.volume_dims;
    let channels = model.config.base_channels;
    let voxels = w * h * l;
    let patch_voxels = plan.patch.iter().product::<usize>();
    let mut out = Tensor::zeros(&[w, h, l, channels]);
    for (tile, f) in plan.tiles.iter().zip(feats) {
        let f = f?;
        for c in 0..channels {
            for z in tile.own_lo[2]..tile.own_hi[2] {
                for y in tile.own_lo[1]..tile.own_hi[1] {
                    let src = patch_voxels * c
                        + (tile.own_lo[0] - tile.corner[0])
                        + plan.patch[0]
                            * ((y - tile.corner[1]) + plan.patch[1] * (z - tile.corner[2]));
                    let dst = voxels * c + tile.own_lo[0] + w * (y + h * z);
                    let n = tile.own_hi[0] - tile.own_lo[0];
                    out.data_mut()[dst..dst + n].copy_from_slice(&f.data()[src..src + n]);
                }
            }
        }
    }
    Ok(out)
}

/// Coarse tumor mask: summed tumor-class probability above one half.
pub fn coarse_mask(task1_probs: &Tensor) -> Result<Vec<bool>> {
    let vd = task1_probs.as_volume()?;
    if vd.channels != 5 {
        return Err(OmError::InvalidArgument {
            op: "coarse_mask",
            msg: format!("expected 5-class probabilities, got {}", vd.channels),
        });
    }
    let voxels = vd.voxels();
    let d = task1_probs.data();
    Ok((0..voxels)
        .map(|v| {
            let tumor: f32 = (2..5).map(|c| d[voxels * c + v]).sum();
            tumor > 0.5
        })
        .collect())
}

fn argmax_over(d: &[f32], voxels: usize, v: usize, classes: &[usize]) -> usize {
    let mut best = classes[0];
    let mut best_p = d[voxels * classes[0] + v];
    for &c in &classes[1..] {
        let p = d[voxels * c + v];
        if p > best_p {
            best_p = p;
            best = c;
        }
    }
    best
}

/// Fuse the three task probability volumes into final labels.
///
/// Outside the dilated coarse mask, task 1 picks background vs normal;
/// inside it task 2 labels all five classes; where task 2 predicts core,
/// task 3 decides enhancing (its class 1) vs necrotic.
pub fn fuse_cascade(
    task1_probs: &Tensor,
    task2_probs: &Tensor,
    task3_probs: &Tensor,
    dilation_radius: usize,
) -> Result<LabelVolume> {
    let d1 = task1_probs.as_volume()?;
    let d2 = task2_probs.as_volume()?;
    let d3 = task3_probs.as_volume()?;
    if d1.spatial != d2.spatial || d1.spatial != d3.spatial {
        return Err(OmError::ShapeMismatch {
            op: "fuse_cascade",
            lhs: task1_probs.shape().to_vec(),
            rhs: task2_probs.shape().to_vec(),
        });
    }
    if d2.channels != 5 || d3.channels != 2 {
        return Err(OmError::InvalidArgument {
            op: "fuse_cascade",
            msg: format!(
                "expected 5/2 classes for tasks 2/3, got {}/{}",
                d2.channels, d3.channels
            ),
        });
    }
    let dims = d1.spatial;
    let voxels = d1.voxels();
    let coarse = coarse_mask(task1_probs)?;
    let roi = dilate_mask(&coarse, dims, dilation_radius);
    let (p1, p2, p3) = (task1_probs.data(), task2_probs.data(), task3_probs.data());
    let mut labels = vec![0u8; voxels];
    for v in 0..voxels {
        labels[v] = if !roi[v] {
            argmax_over(p1, voxels, v, &[0, 1]) as u8
        } else {
            let c2 = argmax_over(p2, voxels, v, &[0, 1, 2, 3, 4]);
            if c2 == 3 || c2 == 4 {
                if argmax_over(p3, voxels, v, &[0, 1]) == 1 {
                    4
                } else {
                    3
                }
            } else {
                c2 as u8
            }
        };
    }
    LabelVolume::new(dims, labels)
}

/// The whole inference pipeline on one (already normalized) volume.
pub fn predict_volume(model: &OmNet, volume: &Volume, plan: &TilePlan) -> Result<LabelVolume> {
    let probs = overlap_tile_predict(model, volume, plan)?;
    if probs.len() != 3 {
        return Err(OmError::InvalidArgument {
            op: "predict_volume",
            msg: format!("cascade fusion needs 3 task outputs, model has {}", probs.len()),
        });
    }
    fuse_cascade(&probs[0], &probs[1], &probs[2], DILATION_RADIUS)
}
