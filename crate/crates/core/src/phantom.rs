//! Synthetic phantom volumes: a brain ellipsoid containing nested tumor
//! ellipsoids (edema > core > enhancing), with class-conditional Gaussian
//! intensities per modality. Deterministic per seed, learnable by
//! construction (class means separated well beyond the noise level).

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{OmError, Result};
use crate::sampler::{LabelVolume, Volume};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f32; 3],
    pub radii: [f32; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f32; 3]) -> bool {
        let mut s = 0f32;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }

    fn fits_within(&self, extents: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.center[a] - self.radii[a] >= 0.0
                && self.center[a] + self.radii[a] <= extents[a] as f32
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub brain: Ellipsoid,
    pub edema: Ellipsoid,
    pub core: Ellipsoid,
    /// Absent for low-grade-like cases with no enhancing tumor.
    pub enhancing: Option<Ellipsoid>,
    /// Mean intensity per class (rows: background, normal, edema, core,
    /// enhancing) and modality (FLAIR, T1, T1c, T2).
    pub class_means: [[f32; 4]; 5],
    pub noise_sigma: f32,
    pub seed: u64,
}

/// Class-mean table with clear T1c contrast: enhancing bright, necrotic
/// core dark, so the intensity-clustering refinement has signal to use.
pub const DEFAULT_CLASS_MEANS: [[f32; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [80.0, 100.0, 90.0, 70.0],
    [160.0, 70.0, 110.0, 150.0],
    [120.0, 50.0, 55.0, 170.0],
    [140.0, 120.0, 200.0, 120.0],
];

impl PhantomSpec {
    /// Randomized nested geometry inside the given extents. The tumor
    /// ellipsoids share a center so nesting holds by construction;
    /// `with_enhancing` toggles the innermost region.
    pub fn random(extents: [usize; 3], seed: u64, with_enhancing: bool) -> PhantomSpec {
        let mut rng = StdRng::seed_from_u64(seed);
        let e = [extents[0] as f32, extents[1] as f32, extents[2] as f32];
        let brain = Ellipsoid {
            center: [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0],
            radii: [e[0] * 0.42, e[1] * 0.42, e[2] * 0.42],
        };
        // tumor center inside the brain, biased away from the boundary
        let mut tc = [0f32; 3];
        for a in 0..3 {
            let span = brain.radii[a] * 0.25;
            tc[a] = brain.center[a] + rng.gen_range(-span..span);
        }
        let edema_r = [
            rng.gen_range(0.20..0.27) * e[0],
            rng.gen_range(0.20..0.27) * e[1],
            rng.gen_range(0.20..0.27) * e[2],
        ];
        // generous inner regions keep the rarer classes learnable within a
        // desk-scale step budget
        let core_r = [edema_r[0] * 0.75, edema_r[1] * 0.75, edema_r[2] * 0.75];
        let enh_r = [core_r[0] * 0.72, core_r[1] * 0.72, core_r[2] * 0.72];
        PhantomSpec {
            extents,
            brain,
            edema: Ellipsoid { center: tc, radii: edema_r },
            core: Ellipsoid { center: tc, radii: core_r },
            enhancing: with_enhancing.then_some(Ellipsoid { center: tc, radii: enh_r }),
            class_means: DEFAULT_CLASS_MEANS,
            noise_sigma: 12.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.brain.fits_within(self.extents) {
            return Err(OmError::Config(format!(
                "brain ellipsoid exceeds volume bounds {:?}",
                self.extents
            )));
        }
        // means must sit at least two sigmas apart between any two classes
        for i in 0..5 {
            for j in (i + 1)..5 {
                let d2: f32 = (0..4)
                    .map(|m| (self.class_means[i][m] - self.class_means[j][m]).powi(2))
                    .sum();
                if d2.sqrt() < 2.0 * self.noise_sigma {
                    return Err(OmError::Config(format!(
                        "class means {i} and {j} closer than 2 sigma"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rasterize the spec into an intensity volume and its label volume.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [w, h, l] = spec.extents;
    let voxels = w * h * l;
    let mut labels = vec![0u8; voxels];
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f32 + 0.5, y as f32 + 0.5, z as f32 + 0.5];
                let v = x + w * (y + h * z);
                labels[v] = if !spec.brain.contains(p) {
                    0
                } else if spec.enhancing.map(|e| e.contains(p)).unwrap_or(false) {
                    4
                } else if spec.core.contains(p) {
                    3
                } else if spec.edema.contains(p) {
                    2
                } else {
                    1
                };
            }
        }
    }
    let mut rng = StdRng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = vec![0f32; voxels * 4];
    for c in 0..4 {
        for v in 0..voxels {
            let class = labels[v] as usize;
            if class == 0 {
                continue;
            }
            let noise: f32 = if spec.noise_sigma > 0.0 {
                gaussian(&mut rng) * spec.noise_sigma
            } else {
                0.0
            };
            data[voxels * c + v] = spec.class_means[class][c] + noise;
        }
    }
    let brain_mask: Vec<bool> = labels.iter().map(|&lb| lb != 0).collect();
    let volume = Volume::with_mask(
        Tensor::new(&[w, h, l, 4], data)?,
        brain_mask,
    )?;
    let labels = LabelVolume::new(spec.extents, labels)?;
    labels.check_consistent(&volume)?;
    Ok((volume, labels))
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut StdRng) -> f32 {
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// A reproducible phantom dataset: `count` cases, `lgg_fraction` of them
/// without an enhancing region.
pub fn generate_dataset(
    extents: [usize; 3],
    count: usize,
    lgg_fraction: f32,
    seed: u64,
) -> Result<Vec<(Volume, LabelVolume)>> {
    let lgg_every = if lgg_fraction <= 0.0 {
        usize::MAX
    } else {
        ((1.0 / lgg_fraction).round() as usize).max(1)
    };
    (0..count)
        .map(|i| {
            let with_enh = lgg_every == usize::MAX || (i + 1) % lgg_every != 0;
            generate(&PhantomSpec::random(extents, seed.wrapping_add(i as u64), with_enh))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{is_complete_tumor, is_core};

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let spec = PhantomSpec::random([32, 32, 16], 7, true);
        let (va, la) = generate(&spec).unwrap();
        let (vb, lb) = generate(&spec).unwrap();
        assert_eq!(va.intensities.data(), vb.intensities.data());
        assert_eq!(la.labels, lb.labels);
    }

    #[test]
    fn zero_noise_gives_piecewise_constant_intensities() {
        let mut spec = PhantomSpec::random([32, 32, 16], 8, true);
        spec.noise_sigma = 0.0;
        let (vol, labels) = generate(&spec).unwrap();
        let voxels = 32 * 32 * 16;
        for v in 0..voxels {
            let class = labels.labels[v] as usize;
            for c in 0..4 {
                assert_eq!(
                    vol.intensities.data()[voxels * c + v],
                    spec.class_means[class][c]
                );
            }
        }
    }

    #[test]
    fn label_nesting_holds_for_100_random_specs() {
        for seed in 0..100u64 {
            let spec = PhantomSpec::random([24, 24, 12], seed, seed % 4 != 0);
            let (_, labels) = generate(&spec).unwrap();
            for &l in &labels.labels {
                assert!(l <= 4);
            }
            // enhancing inside core inside complete: the label encoding makes
            // this equivalent to checking region masks are nested
            let complete = labels.mask_where(is_complete_tumor);
            let core = labels.mask_where(is_core);
            let enh = labels.mask_where(|l| l == 4);
            for v in 0..labels.voxels() {
                assert!(!enh[v] || core[v]);
                assert!(!core[v] || complete[v]);
            }
        }
    }

    #[test]
    fn present_classes_are_non_degenerate() {
        let spec = PhantomSpec::random([64, 64, 32], 3, true);
        let (_, labels) = generate(&spec).unwrap();
        for class in 1..=4u8 {
            let count = labels.labels.iter().filter(|&&l| l == class).count();
            assert!(count >= 50, "class {class} has only {count} voxels");
        }
    }

    #[test]
    fn lgg_cases_have_no_enhancing_voxels() {
        let spec = PhantomSpec::random([32, 32, 16], 11, false);
        let (_, labels) = generate(&spec).unwrap();
        assert!(labels.labels.iter().all(|&l| l != 4));
        // core still present
        assert!(labels.labels.iter().any(|&l| l == 3));
    }

    #[test]
    fn dataset_mixes_lgg_fraction() {
        let cases = generate_dataset([24, 24, 12], 8, 0.25, 42).unwrap();
        let lgg = cases
            .iter()
            .filter(|(_, l)| l.labels.iter().all(|&v| v != 4))
            .count();
        assert_eq!(lgg, 2);
    }
}
