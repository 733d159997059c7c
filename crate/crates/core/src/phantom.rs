//! Synthetic hydrocephalus phantoms standing in for the clinical cohort:
//! a canonical mirror-symmetric labeled brain, random smooth deformations,
//! and a radial ventricle-dilation control mimicking CSF accumulation.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::volume::{
    flip_labels, read_mvol, write_mvol_labels, write_mvol_volume, FlipAxes, LabelMap, RoiId,
    Volume3,
};
use crate::warp::{warp_labels, warp_volume, DisplacementField};

/// Knobs of the synthetic cohort.
#[derive(Debug, Clone, Copy)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Radial ventricle dilation factor, drawn uniformly per subject.
    pub ventricle_scale: (f32, f32),
    /// Per-component uniform bound, in voxels, of the low-res deformation.
    pub deform_amplitude: f32,
    /// Control-grid extent per axis for the random deformation.
    pub deform_grid: usize,
    /// Additive gaussian noise, as a fraction of the intensity range.
    pub noise_sigma: f32,
    pub n_subjects: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> PhantomConfig {
        PhantomConfig {
            dims: (32, 32, 32),
            ventricle_scale: (1.0, 2.5),
            deform_amplitude: 2.0,
            deform_grid: 4,
            noise_sigma: 0.02,
            n_subjects: 21,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(CoreError::argument("n_subjects must be at least 1"));
        }
        if self.deform_amplitude < 0.0 {
            return Err(CoreError::argument("deform_amplitude must be >= 0"));
        }
        if self.ventricle_scale.0 < 1.0 || self.ventricle_scale.1 < self.ventricle_scale.0 {
            return Err(CoreError::argument(
                "ventricle_scale must satisfy 1 <= lo <= hi",
            ));
        }
        if self.deform_grid < 2 {
            return Err(CoreError::argument("deform_grid must be at least 2"));
        }
        Ok(())
    }
}

/// Fractional ROI centers (of the voxel-center coordinate (i + 0.5)/n),
/// left-right mirror symmetric about x = 0.5.
const ROI_CENTERS: [(RoiId, [f32; 3]); 17] = [
    (RoiId::Ir, [0.30, 0.50, 0.50]),
    (RoiId::Il, [0.70, 0.50, 0.50]),
    (RoiId::Tr, [0.38, 0.45, 0.42]),
    (RoiId::Tl, [0.62, 0.45, 0.42]),
    (RoiId::Icra, [0.32, 0.35, 0.45]),
    (RoiId::Icrp, [0.32, 0.62, 0.45]),
    (RoiId::Icla, [0.68, 0.35, 0.45]),
    (RoiId::Iclp, [0.68, 0.62, 0.45]),
    (RoiId::Cra, [0.42, 0.30, 0.62]),
    (RoiId::Crp, [0.42, 0.68, 0.62]),
    (RoiId::Cla, [0.58, 0.30, 0.62]),
    (RoiId::Clp, [0.58, 0.68, 0.62]),
    (RoiId::Mcr, [0.40, 0.20, 0.52]),
    (RoiId::Mcl, [0.60, 0.20, 0.52]),
    (RoiId::Ipl, [0.72, 0.70, 0.60]),
    (RoiId::Ipr, [0.28, 0.70, 0.60]),
    (RoiId::B, [0.50, 0.55, 0.22]),
];

const ROI_RADIUS: f32 = 0.055;
const BRAINSTEM_RADIUS: f32 = 0.075;
const VENTRICLE_RADIUS: f32 = 0.08;
const BRAIN_SEMI_AXES: [f32; 3] = [0.42, 0.45, 0.42];

/// Ventricle centroid (voxel coordinates) and radius (voxels).
pub fn ventricle_geometry(dims: (usize, usize, usize)) -> ((f32, f32, f32), f32) {
    let c = (
        dims.0 as f32 / 2.0 - 0.5,
        dims.1 as f32 / 2.0 - 0.5,
        dims.2 as f32 / 2.0 - 0.5,
    );
    let r = VENTRICLE_RADIUS * dims.0.min(dims.1).min(dims.2) as f32;
    (c, r)
}

/// Per-tissue (T1, FA, ADC) intensities. CSF is dark in T1, bright in ADC;
/// each ROI gets a distinct shade per channel.
fn tissue_intensity(label: u8, in_brain: bool, in_ventricle: bool) -> [f32; 3] {
    if label > 0 {
        let c = label as f32;
        [0.55 + 0.02 * c, 0.25 + 0.02 * c, 0.40 + 0.015 * c]
    } else if in_ventricle {
        [0.15, 0.05, 0.90]
    } else if in_brain {
        [0.50, 0.30, 0.35]
    } else {
        [0.0, 0.0, 0.0]
    }
}

/// Deterministic canonical subject: 17 mirror-symmetric ellipsoidal ROIs
/// inside an ellipsoidal brain with a central dark ventricle cavity.
pub fn make_base_atlas(dims: (usize, usize, usize)) -> Result<(Volume3, LabelMap)> {
    if dims.0 < 24 || dims.1 < 24 || dims.2 < 24 {
        return Err(CoreError::argument(format!(
            "base atlas needs at least 24 voxels per axis, got {:?}",
            dims
        )));
    }
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let mut labels = vec![0u8; n];
    let mut voxels = vec![0.0f32; 3 * n];
    for z in 0..nz {
        let zc = (z as f32 + 0.5) / nz as f32;
        for y in 0..ny {
            let yc = (y as f32 + 0.5) / ny as f32;
            for x in 0..nx {
                let xc = (x as f32 + 0.5) / nx as f32;
                let i = (z * ny + y) * nx + x;
                let e = |a: f32| ((xc - 0.5) / a).powi(2);
                let brain = e(BRAIN_SEMI_AXES[0])
                    + ((yc - 0.5) / BRAIN_SEMI_AXES[1]).powi(2)
                    + ((zc - 0.5) / BRAIN_SEMI_AXES[2]).powi(2)
                    <= 1.0;
                let vent = (xc - 0.5).powi(2) + (yc - 0.5).powi(2) + (zc - 0.5).powi(2)
                    <= VENTRICLE_RADIUS * VENTRICLE_RADIUS;
                let mut label = 0u8;
                if brain && !vent {
                    for (roi, c) in ROI_CENTERS {
                        let r = if roi == RoiId::B {
                            BRAINSTEM_RADIUS
                        } else {
                            ROI_RADIUS
                        };
                        let d2 = (xc - c[0]).powi(2) + (yc - c[1]).powi(2) + (zc - c[2]).powi(2);
                        if d2 <= r * r {
                            label = roi.code();
                            break;
                        }
                    }
                }
                labels[i] = label;
                let base = tissue_intensity(label, brain, vent);
                // smooth bias field, independent of x so the layout's
                // mirror symmetry carries over to intensities
                let bias = if brain {
                    0.05 * (yc - 0.5) + 0.03 * (zc - 0.5)
                } else {
                    0.0
                };
                for ch in 0..3 {
                    voxels[ch * n + i] = base[ch] + bias;
                }
            }
        }
    }
    Ok((
        Volume3::new(dims, (1.0, 1.0, 1.0), 3, voxels)?,
        LabelMap::new(dims, labels)?,
    ))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller on two uniform draws
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Random low-res control grid upsampled trilinearly to a dense field.
fn random_smooth_field(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize, usize),
    grid: usize,
    amplitude: f32,
) -> Vec<f32> {
    let g3 = grid * grid * grid;
    let mut coarse = vec![0.0f32; 3 * g3];
    for v in coarse.iter_mut() {
        *v = if amplitude > 0.0 {
            rng.gen_range(-amplitude..amplitude)
        } else {
            0.0
        };
    }
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let gdims = (grid, grid, grid);
    let mut out = vec![0.0f32; 3 * n];
    for comp in 0..3 {
        let plane = &coarse[comp * g3..(comp + 1) * g3];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = (
                        (x as f32 + 0.5) * grid as f32 / nx as f32 - 0.5,
                        (y as f32 + 0.5) * grid as f32 / ny as f32 - 0.5,
                        (z as f32 + 0.5) * grid as f32 / nz as f32 - 0.5,
                    );
                    out[comp * n + (z * ny + y) * nx + x] =
                        crate::volume::trilinear_sample_raw(plane, gdims, p);
                }
            }
        }
    }
    out
}

/// Radial push-out around the ventricle centroid: full strength inside the
/// ventricle, linear falloff to zero at twice its radius. Backward-warp
/// convention, so the inward sampling offset enlarges the cavity.
fn ventricle_field(dims: (usize, usize, usize), scale: f32) -> Vec<f32> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let ((cx, cy, cz), radius) = ventricle_geometry(dims);
    let strength = 1.0 - 1.0 / scale;
    let mut out = vec![0.0f32; 3 * n];
    if strength == 0.0 {
        return out;
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = (x as f32 - cx, y as f32 - cy, z as f32 - cz);
                let r = (d.0 * d.0 + d.1 * d.1 + d.2 * d.2).sqrt();
                let falloff = if r <= radius {
                    1.0
                } else if r < 2.0 * radius {
                    1.0 - (r - radius) / radius
                } else {
                    0.0
                };
                let a = -strength * falloff;
                let i = (z * ny + y) * nx + x;
                out[i] = a * d.0;
                out[n + i] = a * d.1;
                out[2 * n + i] = a * d.2;
            }
        }
    }
    out
}

/// One synthetic subject: the base warped by (random smooth field +
/// ventricle dilation) plus per-channel gaussian noise. Returns the exact
/// ground-truth field used.
pub fn synthesize_subject(
    base: &(Volume3, LabelMap),
    cfg: &PhantomConfig,
    subject_seed: u64,
) -> Result<(Volume3, LabelMap, DisplacementField)> {
    cfg.validate()?;
    let dims = base.0.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let mut field = random_smooth_field(&mut rng, dims, cfg.deform_grid, cfg.deform_amplitude);
    let scale = if cfg.ventricle_scale.1 > cfg.ventricle_scale.0 {
        rng.gen_range(cfg.ventricle_scale.0..cfg.ventricle_scale.1)
    } else {
        cfg.ventricle_scale.0
    };
    for (dst, src) in field.iter_mut().zip(ventricle_field(dims, scale)) {
        *dst += src;
    }
    let phi = DisplacementField::new(dims, field)?;
    let mut image = warp_volume(&base.0, &phi);
    let labels = warp_labels(&base.1, &phi);
    if cfg.noise_sigma > 0.0 {
        let mut voxels = image.voxels().to_vec();
        for v in voxels.iter_mut() {
            *v += cfg.noise_sigma * gaussian(&mut rng);
        }
        image = image.with_voxels(voxels)?;
    }
    Ok((image, labels, phi))
}

/// One generated subject with its provenance.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub index: usize,
    pub seed: u64,
    pub ventricle_scale: f32,
    pub image: Volume3,
    pub labels: LabelMap,
    pub gt_field: DisplacementField,
}

fn subject_seed(cfg: &PhantomConfig, index: usize, attempt: u64) -> u64 {
    cfg.seed
        .wrapping_add(index as u64)
        .wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Generates the cohort from one base atlas; subject seeds derive as
/// seed + index. A subject that loses any of the 17 ROI labels is redrawn
/// with a derived seed, at most 5 times.
pub fn make_dataset(cfg: &PhantomConfig) -> Result<Vec<PhantomSubject>> {
    cfg.validate()?;
    let base = make_base_atlas(cfg.dims)?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for index in 0..cfg.n_subjects {
        let mut found = None;
        for attempt in 0..=5u64 {
            let seed = subject_seed(cfg, index, attempt);
            let (image, labels, phi) = synthesize_subject(&base, cfg, seed)?;
            let hist = labels.histogram();
            if hist[1..].iter().all(|&c| c > 0) {
                // recover the scale draw for the manifest
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let _ = random_smooth_field(
                    &mut rng,
                    cfg.dims,
                    cfg.deform_grid,
                    cfg.deform_amplitude,
                );
                let scale = if cfg.ventricle_scale.1 > cfg.ventricle_scale.0 {
                    rng.gen_range(cfg.ventricle_scale.0..cfg.ventricle_scale.1)
                } else {
                    cfg.ventricle_scale.0
                };
                found = Some(PhantomSubject {
                    index,
                    seed,
                    ventricle_scale: scale,
                    image,
                    labels,
                    gt_field: phi,
                });
                break;
            }
        }
        subjects.push(found.ok_or_else(|| {
            CoreError::Degenerate(format!(
                "subject {} lost ROI labels after 5 regeneration attempts",
                index
            ))
        })?);
    }
    Ok(subjects)
}

fn content_hash(s: &PhantomSubject) -> String {
    let mut h = Sha256::new();
    for v in s.image.voxels() {
        h.update(v.to_le_bytes());
    }
    h.update(s.labels.labels());
    for v in s.gt_field.vectors() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Writes `subj_<idx>_{img,lab,gtfield}.mvol` plus `manifest.txt` (one
/// line per subject: index, seed, ventricle scale, amplitude, hash).
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &PhantomConfig, subjects: &[PhantomSubject]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in subjects {
        write_mvol_volume(&s.image, dir.join(format!("subj_{}_img.mvol", s.index)))?;
        write_mvol_labels(&s.labels, dir.join(format!("subj_{}_lab.mvol", s.index)))?;
        write_mvol_volume(
            &s.gt_field.to_volume(),
            dir.join(format!("subj_{}_gtfield.mvol", s.index)),
        )?;
        writeln!(
            manifest,
            "{} {} {} {} {}",
            s.index,
            s.seed,
            s.ventricle_scale,
            cfg.deform_amplitude,
            content_hash(s)
        )
        .expect("string writes cannot fail");
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads the images and labels of a written dataset back, ordered by index.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(Volume3, LabelMap)>> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        let index: usize = line
            .split_whitespace()
            .next()
            .ok_or_else(|| CoreError::format(0, "empty manifest line"))?
            .parse()
            .map_err(|_| CoreError::format(0, "bad subject index in manifest"))?;
        let img = read_mvol(dir.join(format!("subj_{}_img.mvol", index)))?.into_volume()?;
        let lab = read_mvol(dir.join(format!("subj_{}_lab.mvol", index)))?.into_labels()?;
        out.push((img, lab));
    }
    Ok(out)
}

/// Checks the base layout's mirror symmetry: x-flip with pair swap is the
/// identity on labels.
pub fn is_mirror_symmetric(labels: &LabelMap) -> bool {
    flip_labels(labels, FlipAxes::new(true, false, false)).labels() == labels.labels()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_atlas_is_deterministic_and_complete() {
        let (a_img, a_lab) = make_base_atlas((32, 32, 32)).unwrap();
        let (b_img, b_lab) = make_base_atlas((32, 32, 32)).unwrap();
        assert_eq!(a_img.voxels(), b_img.voxels());
        assert_eq!(a_lab.labels(), b_lab.labels());
        let hist = a_lab.histogram();
        for code in 1..=17 {
            assert!(hist[code] > 0, "label {} missing from the base atlas", code);
        }
    }

    #[test]
    fn base_atlas_rejects_tiny_grids() {
        assert!(matches!(
            make_base_atlas((16, 32, 32)),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn base_layout_is_mirror_symmetric() {
        let (_, lab) = make_base_atlas((32, 32, 32)).unwrap();
        assert!(is_mirror_symmetric(&lab));
    }

    fn identity_cfg() -> PhantomConfig {
        PhantomConfig {
            deform_amplitude: 0.0,
            ventricle_scale: (1.0, 1.0),
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn identity_configuration_reproduces_the_base() {
        let base = make_base_atlas((32, 32, 32)).unwrap();
        let (img, lab, phi) = synthesize_subject(&base, &identity_cfg(), 5).unwrap();
        assert_eq!(lab.labels(), base.1.labels());
        assert!(phi.vectors().iter().all(|&v| v == 0.0));
        for (a, b) in img.voxels().iter().zip(base.0.voxels()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn subjects_are_seed_deterministic() {
        let base = make_base_atlas((32, 32, 32)).unwrap();
        let cfg = PhantomConfig::default();
        let (a_img, a_lab, a_phi) = synthesize_subject(&base, &cfg, 9).unwrap();
        let (b_img, b_lab, b_phi) = synthesize_subject(&base, &cfg, 9).unwrap();
        assert_eq!(a_img.voxels(), b_img.voxels());
        assert_eq!(a_lab.labels(), b_lab.labels());
        assert_eq!(a_phi.vectors(), b_phi.vectors());
    }

    #[test]
    fn amplitude_two_field_statistics() {
        let base = make_base_atlas((32, 32, 32)).unwrap();
        let cfg = PhantomConfig {
            deform_amplitude: 2.0,
            ventricle_scale: (1.0, 1.0),
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        let (_, _, phi) = synthesize_subject(&base, &cfg, 3).unwrap();
        let mean = phi.mean_magnitude();
        assert!(mean > 0.0);
        assert!(mean <= 2.0 * 3.0f32.sqrt(), "mean magnitude {}", mean);
    }

    #[test]
    fn ground_truth_field_reproduces_prenoise_intensities() {
        let base = make_base_atlas((32, 32, 32)).unwrap();
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        let (img, _, phi) = synthesize_subject(&base, &cfg, 12).unwrap();
        let rewarped = warp_volume(&base.0, &phi);
        let max = img
            .voxels()
            .iter()
            .zip(rewarped.voxels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "max abs diff {}", max);
    }

    #[test]
    fn ventricle_dilation_enlarges_the_cavity() {
        let dims = (32, 32, 32);
        let base = make_base_atlas(dims).unwrap();
        let count_csf = |img: &Volume3| {
            // CSF is the only tissue bright in ADC (channel 2)
            img.channel(2).iter().filter(|&&v| v > 0.7).count()
        };
        let cfg = |s: f32| PhantomConfig {
            deform_amplitude: 0.0,
            ventricle_scale: (s, s),
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        let (small, _, _) = synthesize_subject(&base, &cfg(1.0), 1).unwrap();
        let (large, _, _) = synthesize_subject(&base, &cfg(2.0), 1).unwrap();
        assert!(
            count_csf(&large) > count_csf(&small) * 2,
            "csf {} vs {}",
            count_csf(&large),
            count_csf(&small)
        );
    }

    #[test]
    fn dataset_generation_retains_all_rois_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            n_subjects: 6,
            seed: 11,
            ..PhantomConfig::default()
        };
        let subjects = make_dataset(&cfg).unwrap();
        assert_eq!(subjects.len(), 6);
        for s in &subjects {
            let hist = s.labels.histogram();
            assert!(hist[1..].iter().all(|&c| c > 0));
        }
        assert_ne!(
            subjects[0].gt_field.vectors(),
            subjects[1].gt_field.vectors()
        );
        write_dataset(dir.path(), &cfg, &subjects).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        for (s, (img, lab)) in subjects.iter().zip(&loaded) {
            assert_eq!(s.image.voxels(), img.voxels());
            assert_eq!(s.labels.labels(), lab.labels());
        }
    }

    #[test]
    fn regeneration_with_the_same_seed_matches_manifest_hashes() {
        let cfg = PhantomConfig {
            n_subjects: 3,
            seed: 77,
            ..PhantomConfig::default()
        };
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(content_hash(x), content_hash(y));
        }
    }
}
