//! Hard attention: propagate atlas labels to a query through deformable
//! registration and fuse them by majority vote into a consensus map plus
//! 18 soft vote-fraction channels for the network.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::register::{register_direct, RegConfig};
use crate::volume::{LabelMap, Volume3, NUM_CLASSES};
use crate::warp::warp_labels;

/// Library of (image, labels) pairs whose propagations act as independent
/// classifiers.
#[derive(Debug, Clone)]
pub struct AtlasSet {
    entries: Vec<(Volume3, LabelMap)>,
}

impl AtlasSet {
    pub fn new(entries: Vec<(Volume3, LabelMap)>) -> Result<AtlasSet> {
        if entries.is_empty() {
            return Err(CoreError::argument("atlas set must be nonempty"));
        }
        for (image, labels) in &entries {
            if image.dims() != labels.dims() {
                return Err(CoreError::argument(format!(
                    "atlas image dims {:?} do not match label dims {:?}",
                    image.dims(),
                    labels.dims()
                )));
            }
        }
        Ok(AtlasSet { entries })
    }

    pub fn entries(&self) -> &[(Volume3, LabelMap)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-voxel vote fractions over the 18 classes (background + 17 ROIs),
/// stored channel-major like [`Volume3`].
#[derive(Debug, Clone)]
pub struct AtlasPrior {
    dims: (usize, usize, usize),
    channels: Vec<f32>,
}

impl AtlasPrior {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Vote fractions of class `c` (0 = background, 1..=17 = ROI codes).
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.num_voxels();
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn channels(&self) -> &[f32] {
        &self.channels
    }

    pub fn to_volume(&self, spacing: (f32, f32, f32)) -> Volume3 {
        Volume3::new(self.dims, spacing, NUM_CLASSES, self.channels.clone())
            .expect("prior buffer always matches its dims")
    }

    pub fn from_volume(vol: &Volume3) -> Result<AtlasPrior> {
        if vol.channels() != NUM_CLASSES {
            return Err(CoreError::argument(format!(
                "prior volume needs {} channels, got {}",
                NUM_CLASSES,
                vol.channels()
            )));
        }
        let prior = AtlasPrior {
            dims: vol.dims(),
            channels: vol.voxels().to_vec(),
        };
        prior.check_simplex()?;
        Ok(prior)
    }

    fn check_simplex(&self) -> Result<()> {
        let n = self.num_voxels();
        for i in 0..n {
            let mut sum = 0.0f32;
            for c in 0..NUM_CLASSES {
                let v = self.channels[c * n + i];
                if v < 0.0 {
                    return Err(CoreError::argument("prior has a negative vote fraction"));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::argument(format!(
                    "prior voxel {} sums to {} (expected 1)",
                    i, sum
                )));
            }
        }
        Ok(())
    }

    /// Mirrors the prior about the x axis, swapping lateral ROI channels so
    /// the result describes the flipped anatomy.
    pub fn flip_x(&self) -> AtlasPrior {
        let (nx, ny, nz) = self.dims;
        let n = self.num_voxels();
        let mut out = vec![0.0f32; self.channels.len()];
        for c in 0..NUM_CLASSES {
            let src_c = if c == 0 {
                0
            } else {
                crate::volume::RoiId::flip_code(c as u8) as usize
            };
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        out[c * n + (z * ny + y) * nx + x] =
                            self.channels[src_c * n + (z * ny + y) * nx + (nx - 1 - x)];
                    }
                }
            }
        }
        AtlasPrior {
            dims: self.dims,
            channels: out,
        }
    }
}

/// Registers the atlas image (moving) to the query (fixed) and carries the
/// atlas labels through the resulting field.
pub fn propagate(
    atlas_entry: &(Volume3, LabelMap),
    query_image: &Volume3,
    reg: &RegConfig,
) -> Result<LabelMap> {
    let (image, labels) = atlas_entry;
    if image.dims() != query_image.dims() {
        return Err(CoreError::argument(format!(
            "atlas grid {:?} does not match query grid {:?}",
            image.dims(),
            query_image.dims()
        )));
    }
    // registration runs on the anatomical (T1) channel only
    let fixed = query_image.extract_channel(0)?;
    let moving = image.extract_channel(0)?;
    let field = register_direct(&fixed, &moving, reg)?;
    Ok(warp_labels(labels, &field))
}

/// Propagates every atlas in parallel; output order matches atlas order.
pub fn propagate_all(
    atlases: &AtlasSet,
    query_image: &Volume3,
    reg: &RegConfig,
) -> Result<Vec<LabelMap>> {
    atlases
        .entries()
        .par_iter()
        .map(|entry| propagate(entry, query_image, reg))
        .collect()
}

/// Majority-vote fusion: per voxel the prior channel c holds
/// votes(c)/K and the consensus label is the argmax count, ties broken
/// toward the lowest code.
pub fn fuse_majority(props: &[LabelMap]) -> Result<(LabelMap, AtlasPrior)> {
    let first = props
        .first()
        .ok_or_else(|| CoreError::argument("fuse_majority: empty propagation list"))?;
    let dims = first.dims();
    for p in props {
        if p.dims() != dims {
            return Err(CoreError::argument(format!(
                "fuse_majority: dims differ ({:?} vs {:?})",
                p.dims(),
                dims
            )));
        }
    }
    let n = first.num_voxels();
    let k = props.len() as f32;
    let mut channels = vec![0.0f32; NUM_CLASSES * n];
    let mut consensus = vec![0u8; n];
    for i in 0..n {
        let mut counts = [0u32; NUM_CLASSES];
        for p in props {
            counts[p.labels()[i] as usize] += 1;
        }
        let mut best = 0usize;
        for c in 1..NUM_CLASSES {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        consensus[i] = best as u8;
        for c in 0..NUM_CLASSES {
            channels[c * n + i] = counts[c] as f32 / k;
        }
    }
    let label = LabelMap::new(dims, consensus)?;
    Ok((label, AtlasPrior { dims, channels }))
}

/// Stacks network input channels: the 3 modalities alone, or with the 18
/// prior channels appended when hard attention is on.
pub fn build_network_input(
    modalities: &Volume3,
    prior: &AtlasPrior,
    use_hard: bool,
) -> Result<Volume3> {
    if modalities.channels() != 3 {
        return Err(CoreError::argument(format!(
            "expected 3 modality channels, got {}",
            modalities.channels()
        )));
    }
    if !use_hard {
        return Ok(modalities.clone());
    }
    if prior.dims() != modalities.dims() {
        return Err(CoreError::argument(format!(
            "prior grid {:?} does not match modalities {:?}",
            prior.dims(),
            modalities.dims()
        )));
    }
    let mut voxels = Vec::with_capacity((3 + NUM_CLASSES) * modalities.num_voxels());
    voxels.extend_from_slice(modalities.voxels());
    voxels.extend_from_slice(prior.channels());
    Volume3::new(
        modalities.dims(),
        modalities.spacing(),
        3 + NUM_CLASSES,
        voxels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice;
    use crate::register::RegConfig;
    use crate::warp::{warp_volume, DisplacementField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(dims: (usize, usize, usize), seed: u64) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        LabelMap::new(dims, (0..n).map(|_| rng.gen_range(0..18u8)).collect()).unwrap()
    }

    #[test]
    fn single_input_fuses_to_itself_with_one_hot_prior() {
        let lab = random_labels((4, 4, 4), 1);
        let (consensus, prior) = fuse_majority(std::slice::from_ref(&lab)).unwrap();
        assert_eq!(consensus.labels(), lab.labels());
        for (i, &l) in lab.labels().iter().enumerate() {
            for c in 0..NUM_CLASSES {
                let expect = if c == l as usize { 1.0 } else { 0.0 };
                assert_eq!(prior.channel(c)[i], expect);
            }
        }
    }

    #[test]
    fn counting_and_tie_break_match_spec_examples() {
        let dims = (1, 1, 1);
        let mk = |l: u8| LabelMap::new(dims, vec![l]).unwrap();
        // votes [1, 1, 2] -> label 1, P(1) = 2/3, P(2) = 1/3
        let (lab, prior) = fuse_majority(&[mk(1), mk(1), mk(2)]).unwrap();
        assert_eq!(lab.labels(), &[1]);
        assert!((prior.channel(1)[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((prior.channel(2)[0] - 1.0 / 3.0).abs() < 1e-7);
        // votes [1, 2] -> tie -> lowest code
        let (lab, _) = fuse_majority(&[mk(1), mk(2)]).unwrap();
        assert_eq!(lab.labels(), &[1]);
        let (lab, _) = fuse_majority(&[mk(2), mk(1)]).unwrap();
        assert_eq!(lab.labels(), &[1], "permutation changed the tie break");
    }

    #[test]
    fn eighteen_distinct_maps_give_a_uniform_prior() {
        let dims = (2, 1, 1);
        let maps: Vec<LabelMap> = (0..18u8)
            .map(|l| LabelMap::new(dims, vec![l, l]).unwrap())
            .collect();
        let (_, prior) = fuse_majority(&maps).unwrap();
        for c in 0..NUM_CLASSES {
            for i in 0..2 {
                assert!((prior.channel(c)[i] - 1.0 / 18.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn consensus_matches_brute_force_recount() {
        let dims = (5, 4, 3);
        let props: Vec<LabelMap> = (0..7).map(|s| random_labels(dims, s)).collect();
        let (consensus, prior) = fuse_majority(&props).unwrap();
        let n = consensus.num_voxels();
        for i in 0..n {
            let mut counts = [0u32; NUM_CLASSES];
            for p in &props {
                counts[p.labels()[i] as usize] += 1;
            }
            let winner = consensus.labels()[i] as usize;
            let max = *counts.iter().max().unwrap();
            assert_eq!(counts[winner], max);
            // lowest code among the maximal counts
            assert!(counts[..winner].iter().all(|&c| c < max));
            let mut sum = 0.0;
            for c in 0..NUM_CLASSES {
                assert!((prior.channel(c)[i] - counts[c] as f32 / 7.0).abs() < 1e-7);
                sum += prior.channel(c)[i];
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let dims = (4, 4, 4);
        let mut props: Vec<LabelMap> = (0..5).map(|s| random_labels(dims, 10 + s)).collect();
        let (a_lab, a_prior) = fuse_majority(&props).unwrap();
        props.reverse();
        props.swap(0, 2);
        let (b_lab, b_prior) = fuse_majority(&props).unwrap();
        assert_eq!(a_lab.labels(), b_lab.labels());
        assert_eq!(a_prior.channels(), b_prior.channels());
    }

    fn blob_with_labels(dims: (usize, usize, usize)) -> (Volume3, LabelMap) {
        let (nx, ny, nz) = dims;
        let mut img = Vec::new();
        let mut lab = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let dx = (x as f32 - nx as f32 / 2.0) / (nx as f32 / 3.0);
                    let dy = (y as f32 - ny as f32 / 2.0) / (ny as f32 / 3.0);
                    let dz = (z as f32 - nz as f32 / 2.0) / (nz as f32 / 3.0);
                    let r2 = dx * dx + dy * dy + dz * dz;
                    img.push((-r2).exp());
                    lab.push(if r2 < 0.4 {
                        1
                    } else if r2 < 1.0 {
                        2
                    } else {
                        0
                    });
                }
            }
        }
        (
            Volume3::new(dims, (1.0, 1.0, 1.0), 1, img).unwrap(),
            LabelMap::new(dims, lab).unwrap(),
        )
    }

    fn quick_reg() -> RegConfig {
        RegConfig {
            levels: 2,
            iters_per_level: 40,
            lambda_smooth: 5e-4,
            ..RegConfig::default()
        }
    }

    #[test]
    fn self_propagation_reproduces_atlas_labels() {
        let (img, lab) = blob_with_labels((16, 16, 16));
        let out = propagate(&(img.clone(), lab.clone()), &img, &quick_reg()).unwrap();
        for code in [1u8, 2] {
            let d = dice(&out, &lab, code);
            assert!(d >= 0.95, "dice for code {} is {}", code, d);
        }
    }

    #[test]
    fn propagation_beats_the_unregistered_atlas() {
        let dims = (16, 16, 16);
        let (img, lab) = blob_with_labels(dims);
        // deform the atlas by a smooth synthetic field to make the query
        let n = dims.0 * dims.1 * dims.2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vecs = vec![0.0f32; 3 * n];
        let (cx, cy, cz) = (8.0f32, 8.0, 8.0);
        for i in 0..n {
            let x = (i % 16) as f32;
            let y = ((i / 16) % 16) as f32;
            let z = (i / 256) as f32;
            let fall = (-((x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2)) / 40.0).exp();
            vecs[i] = 1.5 * fall + rng.gen_range(-0.05..0.05);
            vecs[n + i] = -1.0 * fall;
            vecs[2 * n + i] = 0.8 * fall;
        }
        let gt = DisplacementField::new(dims, vecs).unwrap();
        let query_img = warp_volume(&img, &gt);
        let query_lab = warp_labels(&lab, &gt);
        let prop = propagate(&(img, lab.clone()), &query_img, &quick_reg()).unwrap();
        let fg = |m: &LabelMap| {
            LabelMap::new(
                m.dims(),
                m.labels().iter().map(|&l| (l > 0) as u8).collect(),
            )
            .unwrap()
        };
        let registered = dice(&fg(&prop), &fg(&query_lab), 1);
        let unregistered = dice(&fg(&lab), &fg(&query_lab), 1);
        assert!(
            registered > unregistered,
            "registered {} vs unregistered {}",
            registered,
            unregistered
        );
    }

    #[test]
    fn propagated_codes_are_a_subset_of_the_atlas_codes() {
        let (img, lab) = blob_with_labels((8, 8, 8));
        let out = propagate(&(img.clone(), lab.clone()), &img, &quick_reg()).unwrap();
        let atlas_codes: std::collections::HashSet<u8> = lab.labels().iter().copied().collect();
        assert!(out.labels().iter().all(|l| atlas_codes.contains(l)));
    }

    #[test]
    fn network_input_stacking() {
        let dims = (3, 2, 2);
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let modalities = Volume3::new(
            dims,
            (1.0, 1.0, 1.0),
            3,
            (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let (_, prior) = fuse_majority(&[random_labels(dims, 2), random_labels(dims, 4)]).unwrap();
        let soft = build_network_input(&modalities, &prior, false).unwrap();
        assert_eq!(soft.channels(), 3);
        assert_eq!(soft.voxels(), modalities.voxels());
        let hard = build_network_input(&modalities, &prior, true).unwrap();
        assert_eq!(hard.channels(), 21);
        assert_eq!(&hard.voxels()[..3 * n], modalities.voxels());
        for i in 0..n {
            let sum: f32 = (3..21).map(|c| hard.channel(c)[i]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_flip_swaps_lateral_channels_and_mirrors_x() {
        let dims = (2, 1, 1);
        // voxel 0 votes IR (code 1), voxel 1 votes IL (code 2)
        let lab = LabelMap::new(dims, vec![1, 2]).unwrap();
        let (_, prior) = fuse_majority(std::slice::from_ref(&lab)).unwrap();
        let flipped = prior.flip_x();
        // after mirroring, voxel 0 shows the old voxel 1 with codes swapped:
        // IL -> IR
        assert_eq!(flipped.channel(1)[0], 1.0);
        assert_eq!(flipped.channel(2)[1], 1.0);
        flipped.check_simplex().unwrap();
    }
}
