//! Dense displacement fields and the spatial transformer that warps volumes
//! and label maps, plus the gradient-smoothness regularizer used by the
//! registration optimizer.
//!
//! Fields use backward-warping semantics: the output at voxel `x` samples
//! the moving image at `x + u(x)`, with `u` in voxel units.

use crate::error::{CoreError, Result};
use crate::volume::{nearest_label, trilinear_sample, LabelMap, Volume3};

/// Per-voxel 3-vector field on the fixed-image grid, components stored
/// channel-major (all x, then all y, then all z), x fastest within each.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: (usize, usize, usize),
    vectors: Vec<f32>,
}

impl DisplacementField {
    pub fn new(dims: (usize, usize, usize), vectors: Vec<f32>) -> Result<DisplacementField> {
        let n = dims.0 * dims.1 * dims.2;
        if n == 0 {
            return Err(CoreError::argument("dims must all be >= 1"));
        }
        if vectors.len() != 3 * n {
            return Err(CoreError::argument(format!(
                "vector buffer length {} does not match 3 x {} voxels",
                vectors.len(),
                n
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(
                "displacement field contains non-finite components".into(),
            ));
        }
        Ok(DisplacementField { dims, vectors })
    }

    /// All-zero field: warping with it is the identity.
    pub fn identity(dims: (usize, usize, usize)) -> DisplacementField {
        DisplacementField {
            dims,
            vectors: vec![0.0; 3 * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// One component plane (0 = x, 1 = y, 2 = z).
    pub fn component(&self, c: usize) -> &[f32] {
        let n = self.num_voxels();
        &self.vectors[c * n..(c + 1) * n]
    }

    /// Displacement vector at an integer grid point.
    pub fn at(&self, x: usize, y: usize, z: usize) -> (f32, f32, f32) {
        let (nx, ny, _) = self.dims;
        let n = self.num_voxels();
        let i = (z * ny + y) * nx + x;
        (
            self.vectors[i],
            self.vectors[n + i],
            self.vectors[2 * n + i],
        )
    }

    pub fn mean_magnitude(&self) -> f32 {
        let n = self.num_voxels();
        let mut acc = 0.0f64;
        for i in 0..n {
            let ux = self.vectors[i] as f64;
            let uy = self.vectors[n + i] as f64;
            let uz = self.vectors[2 * n + i] as f64;
            acc += (ux * ux + uy * uy + uz * uz).sqrt();
        }
        (acc / n as f64) as f32
    }

    /// Views the field as a 3-channel volume for MVOL serialization.
    pub fn to_volume(&self) -> Volume3 {
        Volume3::new(self.dims, (1.0, 1.0, 1.0), 3, self.vectors.clone())
            .expect("field invariants imply a valid volume")
    }

    pub fn from_volume(vol: &Volume3) -> Result<DisplacementField> {
        if vol.channels() != 3 {
            return Err(CoreError::argument(format!(
                "a displacement field needs 3 channels, volume has {}",
                vol.channels()
            )));
        }
        DisplacementField::new(vol.dims(), vol.voxels().to_vec())
    }
}

/// Warps a moving volume onto the field's grid: `out(x) = m(x + u(x))`
/// per channel, trilinear, border-clamped.
pub fn warp_volume(moving: &Volume3, phi: &DisplacementField) -> Volume3 {
    let (nx, ny, nz) = phi.dims();
    let n = phi.num_voxels();
    let mut voxels = vec![0.0f32; moving.channels() * n];
    for c in 0..moving.channels() {
        let out = &mut voxels[c * n..(c + 1) * n];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (ux, uy, uz) = phi.at(x, y, z);
                    out[(z * ny + y) * nx + x] = trilinear_sample(
                        moving,
                        c,
                        (x as f32 + ux, y as f32 + uy, z as f32 + uz),
                    );
                }
            }
        }
    }
    Volume3::new(phi.dims(), moving.spacing(), moving.channels(), voxels)
        .expect("warp of finite inputs stays finite")
}

/// Warps a label map by nearest-neighbor lookup at the displaced position;
/// never emits a label code absent from the input.
pub fn warp_labels(labels: &LabelMap, phi: &DisplacementField) -> LabelMap {
    let (nx, ny, nz) = phi.dims();
    let mut out = LabelMap::zeros(phi.dims());
    let buf = out.labels_mut();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (ux, uy, uz) = phi.at(x, y, z);
                buf[(z * ny + y) * nx + x] = nearest_label(
                    labels,
                    (x as f32 + ux, y as f32 + uy, z as f32 + uz),
                );
            }
        }
    }
    out
}

/// Sum of squared forward differences of every component along x, y and z,
/// with its exact analytic gradient. Operates on f64 slices so the
/// registration optimizer can run in double precision.
///
/// Layout of `field`: 3 component planes of `dims` voxels each, x fastest.
pub fn smoothness_energy_raw(field: &[f64], dims: (usize, usize, usize)) -> (f64, Vec<f64>) {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    debug_assert_eq!(field.len(), 3 * n);
    let mut energy = 0.0f64;
    let mut grad = vec![0.0f64; 3 * n];
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    for comp in 0..3 {
        let base = comp * n;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = base + idx(x, y, z);
                    let v = field[i];
                    if x + 1 < nx {
                        let j = base + idx(x + 1, y, z);
                        let d = field[j] - v;
                        energy += d * d;
                        grad[j] += 2.0 * d;
                        grad[i] -= 2.0 * d;
                    }
                    if y + 1 < ny {
                        let j = base + idx(x, y + 1, z);
                        let d = field[j] - v;
                        energy += d * d;
                        grad[j] += 2.0 * d;
                        grad[i] -= 2.0 * d;
                    }
                    if z + 1 < nz {
                        let j = base + idx(x, y, z + 1);
                        let d = field[j] - v;
                        energy += d * d;
                        grad[j] += 2.0 * d;
                        grad[i] -= 2.0 * d;
                    }
                }
            }
        }
    }
    (energy, grad)
}

/// [`smoothness_energy_raw`] on a `DisplacementField`.
pub fn smoothness_energy(phi: &DisplacementField) -> (f64, Vec<f64>) {
    let field: Vec<f64> = phi.vectors().iter().map(|&v| v as f64).collect();
    smoothness_energy_raw(&field, phi.dims())
}

/// Composition of two fields on the same grid:
/// `result(x) = inner(x) + outer(x + inner(x))` with trilinear lookup of
/// the outer field's components.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if outer.dims() != inner.dims() {
        return Err(CoreError::argument(format!(
            "compose: dims {:?} vs {:?}",
            outer.dims(),
            inner.dims()
        )));
    }
    let (nx, ny, nz) = inner.dims();
    let n = inner.num_voxels();
    let outer_vol = outer.to_volume();
    let mut vectors = vec![0.0f32; 3 * n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (ix, iy, iz) = inner.at(x, y, z);
                let p = (x as f32 + ix, y as f32 + iy, z as f32 + iz);
                let i = (z * ny + y) * nx + x;
                vectors[i] = ix + trilinear_sample(&outer_vol, 0, p);
                vectors[n + i] = iy + trilinear_sample(&outer_vol, 1, p);
                vectors[2 * n + i] = iz + trilinear_sample(&outer_vol, 2, p);
            }
        }
    }
    DisplacementField::new(inner.dims(), vectors)
}

/// Constant-shift field, handy for tests and phantoms.
pub fn constant_field(dims: (usize, usize, usize), shift: (f32, f32, f32)) -> DisplacementField {
    let n = dims.0 * dims.1 * dims.2;
    let mut vectors = vec![0.0f32; 3 * n];
    vectors[..n].fill(shift.0);
    vectors[n..2 * n].fill(shift.1);
    vectors[2 * n..].fill(shift.2);
    DisplacementField { dims, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume3;
    use rand::{Rng, SeedableRng};

    fn ramp(dims: (usize, usize, usize)) -> Volume3 {
        let n = dims.0 * dims.1 * dims.2;
        Volume3::new(dims, (1.0, 1.0, 1.0), 1, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn identity_field_is_zero() {
        let phi = DisplacementField::identity((4, 4, 4));
        assert_eq!(phi.vectors().len(), 3 * 64);
        assert!(phi.vectors().iter().all(|&v| v == 0.0));
        let (e, g) = smoothness_energy(&phi);
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_with_identity_is_exact() {
        let vol = ramp((3, 4, 2));
        let phi = DisplacementField::identity((3, 4, 2));
        assert_eq!(warp_volume(&vol, &phi), vol);
    }

    #[test]
    fn warp_constant_shift_matches_index_shift_oracle() {
        let dims = (5, 4, 3);
        let vol = ramp(dims);
        let phi = constant_field(dims, (1.0, 0.0, 0.0));
        let out = warp_volume(&vol, &phi);
        // oracle: out(x,y,z) = in(min(x+1, nx-1), y, z)
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let sx = (x + 1).min(dims.0 - 1);
                    assert_eq!(out.at(0, x, y, z), vol.at(0, sx, y, z));
                }
            }
        }
    }

    #[test]
    fn warp_constant_volume_is_unchanged_by_any_field() {
        let dims = (4, 4, 4);
        let vol = Volume3::new(dims, (1.0, 1.0, 1.0), 1, vec![3.5; 64]).unwrap();
        let phi = constant_field(dims, (0.5, 0.5, 0.5));
        let out = warp_volume(&vol, &phi);
        assert!(out.voxels().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn warp_labels_identity_and_shift() {
        let dims = (4, 2, 2);
        let mut lab = LabelMap::zeros(dims);
        lab.labels_mut()[1] = 7;
        let id = DisplacementField::identity(dims);
        assert_eq!(warp_labels(&lab, &id), lab);
        let phi = constant_field(dims, (1.0, 0.0, 0.0));
        let out = warp_labels(&lab, &phi);
        assert_eq!(out.at(0, 0, 0), 7); // out(0) = in(0+1)
        assert_eq!(out.at(1, 0, 0), 0);
    }

    #[test]
    fn warp_labels_never_invents_codes() {
        let dims = (6, 6, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut lab = LabelMap::zeros(dims);
        for l in lab.labels_mut() {
            *l = [0u8, 3, 9][rng.gen_range(0..3)];
        }
        let n = 6 * 6 * 6;
        let vectors: Vec<f32> = (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let phi = DisplacementField::new(dims, vectors).unwrap();
        let out = warp_labels(&lab, &phi);
        for &l in out.labels() {
            assert!(l == 0 || l == 3 || l == 9);
        }
    }

    #[test]
    fn smoothness_single_step_energy() {
        let dims = (2, 1, 1);
        let h = 3.0f32;
        let phi = DisplacementField::new(dims, vec![0.0, h, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (e, _) = smoothness_energy(&phi);
        assert!((e - (h as f64).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_iff_constant() {
        let phi = constant_field((3, 3, 3), (2.0, -1.0, 0.5));
        let (e, g) = smoothness_energy(&phi);
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let dims = (3, 3, 2);
        let n = 18;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let field: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grad) = smoothness_energy_raw(&field, dims);
        let h = 1e-5;
        for i in 0..3 * n {
            let mut plus = field.clone();
            plus[i] += h;
            let mut minus = field.clone();
            minus[i] -= h;
            let (ep, _) = smoothness_energy_raw(&plus, dims);
            let (em, _) = smoothness_energy_raw(&minus, dims);
            let fd = (ep - em) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "component {}: analytic {} vs fd {}",
                i,
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn compose_with_identity_on_either_side() {
        let dims = (4, 3, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let vectors: Vec<f32> = (0..3 * n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let phi = DisplacementField::new(dims, vectors).unwrap();
        let id = DisplacementField::identity(dims);
        assert_eq!(compose(&id, &phi).unwrap(), phi);
        assert_eq!(compose(&phi, &id).unwrap(), phi);
    }

    #[test]
    fn compose_constant_shifts_add() {
        let dims = (4, 4, 4);
        let a = constant_field(dims, (0.25, 0.0, -0.5));
        let b = constant_field(dims, (0.5, 1.0, 0.25));
        let c = compose(&a, &b).unwrap();
        for &(x, y, z) in &[(0usize, 0usize, 0usize), (2, 3, 1)] {
            let (ux, uy, uz) = c.at(x, y, z);
            assert!((ux - 0.75).abs() < 1e-6);
            assert!((uy - 1.0).abs() < 1e-6);
            assert!((uz + 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_dim_mismatch() {
        let a = DisplacementField::identity((2, 2, 2));
        let b = DisplacementField::identity((3, 3, 3));
        assert!(matches!(compose(&a, &b), Err(CoreError::Argument(_))));
    }

    #[test]
    fn field_round_trips_through_volume_view() {
        let dims = (3, 2, 2);
        let n = 12;
        let vectors: Vec<f32> = (0..3 * n).map(|i| i as f32 * 0.1).collect();
        let phi = DisplacementField::new(dims, vectors).unwrap();
        let back = DisplacementField::from_volume(&phi.to_volume()).unwrap();
        assert_eq!(back, phi);
    }
}
