//! 3D volumes, label maps and their preprocessing: isotropic resampling,
//! per-channel max normalization, trilinear sampling, flip augmentation and
//! the MVOL container plus NIfTI-1 import.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};

/// Number of foreground ROI label codes; valid labels are `0..=NUM_ROIS`.
pub const NUM_ROIS: u8 = 17;

/// The 17 consciousness-related ROIs, codes 1..=17; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RoiId {
    Ir = 1,
    Il = 2,
    Tr = 3,
    Tl = 4,
    Icra = 5,
    Icrp = 6,
    Icla = 7,
    Iclp = 8,
    Cra = 9,
    Crp = 10,
    Cla = 11,
    Clp = 12,
    Mcr = 13,
    Mcl = 14,
    Ipl = 15,
    Ipr = 16,
    B = 17,
}

/// Background plus the 17 ROI codes.
pub const NUM_CLASSES: usize = 18;

impl RoiId {
    pub const ALL: [RoiId; 17] = [
        RoiId::Ir,
        RoiId::Il,
        RoiId::Tr,
        RoiId::Tl,
        RoiId::Icra,
        RoiId::Icrp,
        RoiId::Icla,
        RoiId::Iclp,
        RoiId::Cra,
        RoiId::Crp,
        RoiId::Cla,
        RoiId::Clp,
        RoiId::Mcr,
        RoiId::Mcl,
        RoiId::Ipl,
        RoiId::Ipr,
        RoiId::B,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<RoiId> {
        if (1..=NUM_ROIS).contains(&code) {
            Some(Self::ALL[code as usize - 1])
        } else {
            None
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            RoiId::Ir => "IR",
            RoiId::Il => "IL",
            RoiId::Tr => "TR",
            RoiId::Tl => "TL",
            RoiId::Icra => "ICRA",
            RoiId::Icrp => "ICRP",
            RoiId::Icla => "ICLA",
            RoiId::Iclp => "ICLP",
            RoiId::Cra => "CRA",
            RoiId::Crp => "CRP",
            RoiId::Cla => "CLA",
            RoiId::Clp => "CLP",
            RoiId::Mcr => "MCR",
            RoiId::Mcl => "MCL",
            RoiId::Ipl => "IPL",
            RoiId::Ipr => "IPR",
            RoiId::B => "B",
        }
    }

    pub fn from_abbrev(s: &str) -> Option<RoiId> {
        Self::ALL.iter().copied().find(|r| r.abbrev() == s)
    }

    /// The contralateral partner of a lateralized ROI; `None` for the
    /// midline brainstem.
    pub fn mirror(self) -> Option<RoiId> {
        match self {
            RoiId::Ir => Some(RoiId::Il),
            RoiId::Il => Some(RoiId::Ir),
            RoiId::Tr => Some(RoiId::Tl),
            RoiId::Tl => Some(RoiId::Tr),
            RoiId::Icra => Some(RoiId::Icla),
            RoiId::Icla => Some(RoiId::Icra),
            RoiId::Icrp => Some(RoiId::Iclp),
            RoiId::Iclp => Some(RoiId::Icrp),
            RoiId::Cra => Some(RoiId::Cla),
            RoiId::Cla => Some(RoiId::Cra),
            RoiId::Crp => Some(RoiId::Clp),
            RoiId::Clp => Some(RoiId::Crp),
            RoiId::Mcr => Some(RoiId::Mcl),
            RoiId::Mcl => Some(RoiId::Mcr),
            RoiId::Ipr => Some(RoiId::Ipl),
            RoiId::Ipl => Some(RoiId::Ipr),
            RoiId::B => None,
        }
    }

    /// Label code after a left-right flip: lateralized codes swap within
    /// their pair, brainstem and background stay put.
    pub fn flip_code(code: u8) -> u8 {
        match RoiId::from_code(code) {
            Some(roi) => roi.mirror().map(|m| m.code()).unwrap_or(code),
            None => code,
        }
    }
}

/// Multi-channel 3D scalar grid with physical spacing.
///
/// Samples are stored channel-major, x fastest within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    channels: usize,
    voxels: Vec<f32>,
}

impl Volume3 {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        channels: usize,
        voxels: Vec<f32>,
    ) -> Result<Volume3> {
        if channels == 0 {
            return Err(CoreError::argument("channel count must be >= 1"));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(CoreError::argument(format!(
                "spacing must be strictly positive, got {:?}",
                spacing
            )));
        }
        let n = dims.0 * dims.1 * dims.2;
        if n == 0 {
            return Err(CoreError::argument("dims must all be >= 1"));
        }
        if voxels.len() != channels * n {
            return Err(CoreError::argument(format!(
                "voxel buffer length {} does not match {} channels x {} voxels",
                voxels.len(),
                channels,
                n
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(
                "volume contains non-finite samples".into(),
            ));
        }
        Ok(Volume3 {
            dims,
            spacing,
            channels,
            voxels,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32), channels: usize) -> Volume3 {
        Volume3 {
            dims,
            spacing,
            channels,
            voxels: vec![0.0; channels * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// One channel's samples, x fastest.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.num_voxels();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        let (nx, ny, _) = self.dims;
        self.voxels[c * self.num_voxels() + (z * ny + y) * nx + x]
    }

    /// Copies one channel out as a single-channel volume.
    pub fn extract_channel(&self, c: usize) -> Result<Volume3> {
        if c >= self.channels {
            return Err(CoreError::argument(format!(
                "channel {} out of range (have {})",
                c, self.channels
            )));
        }
        Volume3::new(self.dims, self.spacing, 1, self.channel(c).to_vec())
    }

    /// Replaces the sample buffer, keeping geometry. Length must match.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Volume3> {
        Volume3::new(self.dims, self.spacing, self.channels, voxels)
    }

    /// Stacks the channels of several same-grid volumes into one volume.
    pub fn stack(parts: &[&Volume3]) -> Result<Volume3> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::argument("stack of zero volumes"))?;
        let mut voxels = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(CoreError::argument("stack: volume dims differ"));
            }
            channels += p.channels;
            voxels.extend_from_slice(&p.voxels);
        }
        Volume3::new(first.dims, first.spacing, channels, voxels)
    }
}

/// Per-voxel ROI labels: 0 background, 1..=17 the ROI codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: (usize, usize, usize),
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u8>) -> Result<LabelMap> {
        let n = dims.0 * dims.1 * dims.2;
        if n == 0 {
            return Err(CoreError::argument("dims must all be >= 1"));
        }
        if labels.len() != n {
            return Err(CoreError::argument(format!(
                "label buffer length {} does not match {} voxels",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > NUM_ROIS) {
            return Err(CoreError::argument(format!(
                "label code {} out of range 0..={}",
                bad, NUM_ROIS
            )));
        }
        Ok(LabelMap { dims, labels })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> LabelMap {
        LabelMap {
            dims,
            labels: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        let (nx, ny, _) = self.dims;
        self.labels[(z * ny + y) * nx + x]
    }

    /// Counts voxels per label code, index = code.
    pub fn histogram(&self) -> [usize; 18] {
        let mut h = [0usize; 18];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

fn linear_index(dims: (usize, usize, usize), x: usize, y: usize, z: usize) -> usize {
    (z * dims.1 + y) * dims.0 + x
}

/// Trilinear sample of one channel at a continuous voxel coordinate.
///
/// Coordinates outside the grid clamp to the border voxel, so a warp never
/// introduces synthetic zeros at the edge of the anatomy.
pub fn trilinear_sample(vol: &Volume3, channel: usize, point: (f32, f32, f32)) -> f32 {
    let data = vol.channel(channel);
    trilinear_sample_raw(data, vol.dims, point)
}

/// Same kernel over a bare channel slice; shared with the displacement-field
/// code which stores components outside a `Volume3`.
pub fn trilinear_sample_raw(
    data: &[f32],
    dims: (usize, usize, usize),
    point: (f32, f32, f32),
) -> f32 {
    let (nx, ny, nz) = dims;
    let cx = point.0.clamp(0.0, (nx - 1) as f32);
    let cy = point.1.clamp(0.0, (ny - 1) as f32);
    let cz = point.2.clamp(0.0, (nz - 1) as f32);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let z0 = cz.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = cx - x0 as f32;
    let fy = cy - y0 as f32;
    let fz = cz - z0 as f32;

    let v = |x: usize, y: usize, z: usize| data[linear_index(dims, x, y, z)];
    let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
    let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
    let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
    let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Nearest-neighbor label lookup at a continuous voxel coordinate, clamped.
pub fn nearest_label(labels: &LabelMap, point: (f32, f32, f32)) -> u8 {
    let (nx, ny, nz) = labels.dims();
    let x = point.0.round().clamp(0.0, (nx - 1) as f32) as usize;
    let y = point.1.round().clamp(0.0, (ny - 1) as f32) as usize;
    let z = point.2.round().clamp(0.0, (nz - 1) as f32) as usize;
    labels.at(x, y, z)
}

/// Resamples to an isotropic grid of `target` millimeters per voxel using
/// trilinear interpolation in physical coordinates.
pub fn resample_isotropic(vol: &Volume3, target: f32) -> Result<Volume3> {
    if !(target > 0.0) {
        return Err(CoreError::argument(format!(
            "target spacing must be > 0, got {}",
            target
        )));
    }
    let (nx, ny, nz) = vol.dims();
    let (sx, sy, sz) = vol.spacing();
    if (sx, sy, sz) == (target, target, target) {
        return Ok(vol.clone());
    }
    let out_dim = |n: usize, s: f32| -> usize {
        (((n as f64) * (s as f64) / (target as f64)).round() as usize).max(1)
    };
    let (ox, oy, oz) = (out_dim(nx, sx), out_dim(ny, sy), out_dim(nz, sz));
    let on = ox * oy * oz;
    let mut voxels = vec![0.0f32; vol.channels() * on];
    for c in 0..vol.channels() {
        let out = &mut voxels[c * on..(c + 1) * on];
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let p = (
                        x as f32 * target / sx,
                        y as f32 * target / sy,
                        z as f32 * target / sz,
                    );
                    out[(z * oy + y) * ox + x] = trilinear_sample(vol, c, p);
                }
            }
        }
    }
    Volume3::new((ox, oy, oz), (target, target, target), vol.channels(), voxels)
}

/// Divides each channel by its own maximum so every channel peaks at 1.0.
pub fn normalize_max(vol: &Volume3) -> Result<Volume3> {
    let n = vol.num_voxels();
    let mut voxels = vol.voxels().to_vec();
    for c in 0..vol.channels() {
        let ch = &mut voxels[c * n..(c + 1) * n];
        let max = ch.iter().cloned().fold(f32::MIN, f32::max);
        if max <= 0.0 {
            return Err(CoreError::Degenerate(format!(
                "channel {} has maximum {} <= 0, cannot normalize",
                c, max
            )));
        }
        for v in ch.iter_mut() {
            *v /= max;
        }
    }
    vol.with_voxels(voxels)
}

/// Axes selectable for flip augmentation; x is the left-right axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipAxes {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl FlipAxes {
    pub fn none() -> FlipAxes {
        FlipAxes::default()
    }

    pub fn new(x: bool, y: bool, z: bool) -> FlipAxes {
        FlipAxes { x, y, z }
    }
}

fn flipped_coord(i: usize, n: usize, flip: bool) -> usize {
    if flip {
        n - 1 - i
    } else {
        i
    }
}

/// Mirrors a volume and its label map along the chosen axes. Left-right
/// flips also swap lateralized label codes so the anatomy stays consistent.
pub fn flip_augment(
    vol: &Volume3,
    labels: &LabelMap,
    axes: FlipAxes,
) -> Result<(Volume3, LabelMap)> {
    if vol.dims() != labels.dims() {
        return Err(CoreError::argument(format!(
            "volume dims {:?} do not match label dims {:?}",
            vol.dims(),
            labels.dims()
        )));
    }
    let out_vol = flip_volume(vol, axes);
    let out_lab = flip_labels(labels, axes);
    Ok((out_vol, out_lab))
}

/// Mirrors just a volume along the chosen axes (no label semantics).
pub fn flip_volume(vol: &Volume3, axes: FlipAxes) -> Volume3 {
    let (nx, ny, nz) = vol.dims();
    let n = vol.num_voxels();
    let mut voxels = vec![0.0f32; vol.voxels().len()];
    for c in 0..vol.channels() {
        let src = vol.channel(c);
        let dst = &mut voxels[c * n..(c + 1) * n];
        for z in 0..nz {
            let sz = flipped_coord(z, nz, axes.z);
            for y in 0..ny {
                let sy = flipped_coord(y, ny, axes.y);
                for x in 0..nx {
                    let sx = flipped_coord(x, nx, axes.x);
                    dst[(z * ny + y) * nx + x] = src[(sz * ny + sy) * nx + sx];
                }
            }
        }
    }
    Volume3 {
        dims: vol.dims,
        spacing: vol.spacing,
        channels: vol.channels,
        voxels,
    }
}

/// Mirrors a label map; x flips swap lateralized pair codes.
pub fn flip_labels(labels: &LabelMap, axes: FlipAxes) -> LabelMap {
    let (nx, ny, nz) = labels.dims();
    let mut out = vec![0u8; labels.labels().len()];
    for z in 0..nz {
        let sz = flipped_coord(z, nz, axes.z);
        for y in 0..ny {
            let sy = flipped_coord(y, ny, axes.y);
            for x in 0..nx {
                let sx = flipped_coord(x, nx, axes.x);
                let mut l = labels.at(sx, sy, sz);
                if axes.x {
                    l = RoiId::flip_code(l);
                }
                out[(z * ny + y) * nx + x] = l;
            }
        }
    }
    LabelMap {
        dims: labels.dims,
        labels: out,
    }
}

// ---------------------------------------------------------------------------
// MVOL container
// ---------------------------------------------------------------------------

const MVOL_MAGIC: &[u8; 4] = b"MVOL";
const MVOL_VERSION: u32 = 1;

/// Either payload kind the MVOL container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum MvolPayload {
    Volume(Volume3),
    Labels(LabelMap),
}

impl MvolPayload {
    pub fn into_volume(self) -> Result<Volume3> {
        match self {
            MvolPayload::Volume(v) => Ok(v),
            MvolPayload::Labels(_) => Err(CoreError::argument(
                "expected a volume MVOL, found a label map",
            )),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            MvolPayload::Labels(l) => Ok(l),
            MvolPayload::Volume(_) => Err(CoreError::argument(
                "expected a label MVOL, found a volume",
            )),
        }
    }
}

pub fn write_mvol_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MVOL_MAGIC)?;
    f.write_u32::<LittleEndian>(MVOL_VERSION)?;
    f.write_u8(0)?; // kind: volume
    f.write_u8(0)?; // dtype: f32
    f.write_u32::<LittleEndian>(vol.channels() as u32)?;
    let (nx, ny, nz) = vol.dims();
    for d in [nx, ny, nz] {
        f.write_u32::<LittleEndian>(d as u32)?;
    }
    let (sx, sy, sz) = vol.spacing();
    for s in [sx, sy, sz] {
        f.write_f32::<LittleEndian>(s)?;
    }
    for &v in vol.voxels() {
        f.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn write_mvol_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MVOL_MAGIC)?;
    f.write_u32::<LittleEndian>(MVOL_VERSION)?;
    f.write_u8(1)?; // kind: labels
    f.write_u8(1)?; // dtype: u8
    f.write_u32::<LittleEndian>(1)?;
    let (nx, ny, nz) = labels.dims();
    for d in [nx, ny, nz] {
        f.write_u32::<LittleEndian>(d as u32)?;
    }
    for _ in 0..3 {
        f.write_f32::<LittleEndian>(1.0)?;
    }
    f.write_all(labels.labels())?;
    Ok(())
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolPayload> {
    let bytes = std::fs::read(path)?;
    read_mvol_bytes(&bytes)
}

pub fn read_mvol_bytes(bytes: &[u8]) -> Result<MvolPayload> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::format(0, "file shorter than MVOL header"))?;
    if &magic != MVOL_MAGIC {
        return Err(CoreError::format(
            0,
            format!("bad magic {:?}, expected \"MVOL\"", magic),
        ));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| CoreError::format(4, "truncated header"))?;
    if version != MVOL_VERSION {
        return Err(CoreError::format(4, format!("unsupported version {}", version)));
    }
    let kind = r.read_u8().map_err(|_| CoreError::format(8, "truncated header"))?;
    let dtype = r.read_u8().map_err(|_| CoreError::format(9, "truncated header"))?;
    let channels = r
        .read_u32::<LittleEndian>()
        .map_err(|_| CoreError::format(10, "truncated header"))? as usize;
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| CoreError::format(14 + 4 * i as u64, "truncated header"))?
            as usize;
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = r
            .read_f32::<LittleEndian>()
            .map_err(|_| CoreError::format(26 + 4 * i as u64, "truncated header"))?;
    }
    let payload_offset = 38u64;
    let n = dims[0] * dims[1] * dims[2];
    let body = &bytes[payload_offset as usize..];
    match (kind, dtype) {
        (0, 0) => {
            let expected = channels * n * 4;
            if body.len() != expected {
                return Err(CoreError::format(
                    payload_offset,
                    format!("payload is {} bytes, expected {}", body.len(), expected),
                ));
            }
            let voxels: Vec<f32> = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(MvolPayload::Volume(Volume3::new(
                (dims[0], dims[1], dims[2]),
                (spacing[0], spacing[1], spacing[2]),
                channels,
                voxels,
            )?))
        }
        (1, 1) => {
            let expected = n;
            if body.len() != expected {
                return Err(CoreError::format(
                    payload_offset,
                    format!("payload is {} bytes, expected {}", body.len(), expected),
                ));
            }
            Ok(MvolPayload::Labels(LabelMap::new(
                (dims[0], dims[1], dims[2]),
                body.to_vec(),
            )?))
        }
        _ => Err(CoreError::format(
            8,
            format!("unknown kind/dtype combination ({}, {})", kind, dtype),
        )),
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1 import
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;

/// Imports an uncompressed single-file NIfTI-1 volume.
///
/// Supported datatypes: uint8 (2), int16 (4), float32 (16). Values are
/// scaled by `scl_slope`/`scl_inter` when `scl_slope != 0`. Orientation
/// metadata beyond `pixdim` is ignored.
pub fn import_nifti(path: impl AsRef<Path>) -> Result<Volume3> {
    let bytes = std::fs::read(path)?;
    import_nifti_bytes(&bytes)
}

pub fn import_nifti_bytes(bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(CoreError::format(
            0,
            format!("file is {} bytes, NIfTI-1 header needs {}", bytes.len(), NIFTI_HEADER_LEN),
        ));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(CoreError::format(
            344,
            "missing NIfTI-1 magic \"n+1\\0\" (only single-file .nii supported)",
        ));
    }
    let rd_i16 = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let rd_f32 = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };

    let ndim = rd_i16(40);
    if ndim != 3 && ndim != 4 {
        return Err(CoreError::format(
            40,
            format!("dim[0] = {}, only 3D or single-frame 4D supported", ndim),
        ));
    }
    let nx = rd_i16(42) as usize;
    let ny = rd_i16(44) as usize;
    let nz = rd_i16(46) as usize;
    let nt = if ndim == 4 { rd_i16(48) as usize } else { 1 };
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(CoreError::format(42, "zero spatial extent"));
    }
    let datatype = rd_i16(70);
    let bitpix = rd_i16(72);
    let sx = rd_f32(80);
    let sy = rd_f32(84);
    let sz = rd_f32(88);
    let vox_offset = rd_f32(108) as usize;
    let scl_slope = rd_f32(112);
    let scl_inter = rd_f32(116);

    let n = nx * ny * nz * nt;
    let bytes_per = match datatype {
        2 => 1,  // uint8
        4 => 2,  // int16
        16 => 4, // float32
        other => {
            return Err(CoreError::format(
                70,
                format!("unsupported NIfTI datatype code {}", other),
            ))
        }
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(CoreError::format(
            72,
            format!("bitpix {} inconsistent with datatype {}", bitpix, datatype),
        ));
    }
    let body = bytes
        .get(vox_offset..vox_offset + n * bytes_per)
        .ok_or_else(|| {
            CoreError::format(
                vox_offset as u64,
                format!(
                    "payload needs {} bytes at offset {}, file has {}",
                    n * bytes_per,
                    vox_offset,
                    bytes.len()
                ),
            )
        })?;

    let mut voxels: Vec<f32> = match datatype {
        2 => body.iter().map(|&b| b as f32).collect(),
        4 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        16 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => unreachable!(),
    };
    if scl_slope != 0.0 {
        for v in voxels.iter_mut() {
            *v = *v * scl_slope + scl_inter;
        }
    }
    let fix = |s: f32| if s > 0.0 { s } else { 1.0 };
    Volume3::new((nx, ny, nz), (fix(sx), fix(sy), fix(sz)), nt, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: (usize, usize, usize)) -> Volume3 {
        let n = dims.0 * dims.1 * dims.2;
        let voxels = (0..n).map(|i| i as f32).collect();
        Volume3::new(dims, (1.0, 1.0, 1.0), 1, voxels).unwrap()
    }

    #[test]
    fn roi_codes_are_bijective() {
        for roi in RoiId::ALL {
            assert_eq!(RoiId::from_code(roi.code()), Some(roi));
            assert_eq!(RoiId::from_abbrev(roi.abbrev()), Some(roi));
        }
        assert_eq!(RoiId::from_code(0), None);
        assert_eq!(RoiId::from_code(18), None);
    }

    #[test]
    fn mirror_pairs_are_involutions() {
        for roi in RoiId::ALL {
            if let Some(m) = roi.mirror() {
                assert_eq!(m.mirror(), Some(roi));
                assert_ne!(m, roi);
            } else {
                assert_eq!(roi, RoiId::B);
            }
        }
    }

    #[test]
    fn trilinear_exact_at_grid_points() {
        let vol = ramp_volume((3, 4, 5));
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    let s = trilinear_sample(&vol, 0, (x as f32, y as f32, z as f32));
                    assert_eq!(s, vol.at(0, x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_edge_midpoint() {
        let vol = Volume3::new((2, 1, 1), (1.0, 1.0, 1.0), 1, vec![0.0, 8.0]).unwrap();
        assert_eq!(trilinear_sample(&vol, 0, (0.5, 0.0, 0.0)), 4.0);
    }

    #[test]
    fn trilinear_clamps_to_border() {
        let vol = ramp_volume((3, 3, 3));
        assert_eq!(
            trilinear_sample(&vol, 0, (-5.0, 0.0, 0.0)),
            vol.at(0, 0, 0, 0)
        );
        assert_eq!(
            trilinear_sample(&vol, 0, (10.0, 10.0, 10.0)),
            vol.at(0, 2, 2, 2)
        );
    }

    #[test]
    fn trilinear_bounded_by_neighbors() {
        let vol = ramp_volume((4, 4, 4));
        let s = trilinear_sample(&vol, 0, (1.3, 2.7, 0.4));
        let mut lo = f32::MAX;
        let mut hi = f32::MIN;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let v = vol.at(0, 1 + dx, 2 + dy, 0 + dz);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        assert!(s >= lo && s <= hi);
    }

    #[test]
    fn resample_identity_when_already_isotropic() {
        let vol = ramp_volume((3, 4, 5));
        let out = resample_isotropic(&vol, 1.0).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn resample_doubles_along_coarse_axis() {
        // 2x1x1at spacing (2,1,1), values [0, 10] -> 4 output samples at
        // input coords 0, 0.5, 1, 1.5 (clamped): [0, 5, 10, 10].
        let vol = Volume3::new((2, 1, 1), (2.0, 1.0, 1.0), 1, vec![0.0, 10.0]).unwrap();
        let out = resample_isotropic(&vol, 1.0).unwrap();
        assert_eq!(out.dims(), (4, 1, 1));
        assert_eq!(out.spacing(), (1.0, 1.0, 1.0));
        assert_eq!(out.voxels(), &[0.0, 5.0, 10.0, 10.0]);
    }

    #[test]
    fn resample_rejects_nonpositive_target() {
        let vol = ramp_volume((2, 2, 2));
        assert!(matches!(
            resample_isotropic(&vol, 0.0),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn normalize_divides_each_channel_by_its_max() {
        let vol = Volume3::new(
            (3, 1, 1),
            (1.0, 1.0, 1.0),
            2,
            vec![50.0, 100.0, 200.0, 1.0, 4.0, 2.0],
        )
        .unwrap();
        let out = normalize_max(&vol).unwrap();
        assert_eq!(out.channel(0), &[0.25, 0.5, 1.0]);
        assert_eq!(out.channel(1), &[0.25, 1.0, 0.5]);
    }

    #[test]
    fn normalize_rejects_nonpositive_channel() {
        let vol = Volume3::new((2, 1, 1), (1.0, 1.0, 1.0), 1, vec![0.0, 0.0]).unwrap();
        match normalize_max(&vol) {
            Err(CoreError::Degenerate(msg)) => assert!(msg.contains("channel 0")),
            other => panic!("expected degenerate error, got {:?}", other),
        }
    }

    #[test]
    fn flip_empty_axes_is_identity() {
        let vol = ramp_volume((3, 3, 3));
        let lab = LabelMap::new((3, 3, 3), vec![1; 27]).unwrap();
        let (v, l) = flip_augment(&vol, &lab, FlipAxes::none()).unwrap();
        assert_eq!(v, vol);
        assert_eq!(l, lab);
    }

    #[test]
    fn flip_x_is_involution() {
        let vol = ramp_volume((4, 3, 2));
        let mut labels = vec![0u8; 24];
        labels[3] = RoiId::Icra.code();
        labels[10] = RoiId::B.code();
        let lab = LabelMap::new((4, 3, 2), labels).unwrap();
        let axes = FlipAxes::new(true, false, false);
        let (v1, l1) = flip_augment(&vol, &lab, axes).unwrap();
        let (v2, l2) = flip_augment(&v1, &l1, axes).unwrap();
        assert_eq!(v2, vol);
        assert_eq!(l2, lab);
    }

    #[test]
    fn flip_x_swaps_lateral_pairs() {
        let mut labels = vec![0u8; 8];
        labels[0] = RoiId::Ir.code();
        let lab = LabelMap::new((2, 2, 2), labels).unwrap();
        let out = flip_labels(&lab, FlipAxes::new(true, false, false));
        let hist = out.histogram();
        assert_eq!(hist[RoiId::Il.code() as usize], 1);
        assert_eq!(hist[RoiId::Ir.code() as usize], 0);
        assert_eq!(out.at(1, 0, 0), RoiId::Il.code());
    }

    #[test]
    fn flip_dim_mismatch_is_an_error() {
        let vol = ramp_volume((2, 2, 2));
        let lab = LabelMap::zeros((3, 3, 3));
        assert!(matches!(
            flip_augment(&vol, &lab, FlipAxes::none()),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn mvol_round_trip_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let vol = Volume3::new(
            (2, 3, 2),
            (1.0, 0.5, 2.0),
            2,
            (0..24).map(|i| i as f32 * 0.25).collect(),
        )
        .unwrap();
        write_mvol_volume(&vol, &path).unwrap();
        let back = read_mvol(&path).unwrap().into_volume().unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn mvol_round_trip_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mvol");
        let lab = LabelMap::new((2, 2, 2), vec![0, 1, 17, 3, 0, 5, 6, 7]).unwrap();
        write_mvol_labels(&lab, &path).unwrap();
        let back = read_mvol(&path).unwrap().into_labels().unwrap();
        assert_eq!(back, lab);
    }

    #[test]
    fn mvol_bad_magic() {
        let mut bytes = vec![0u8; 64];
        bytes[..4].copy_from_slice(b"XVOL");
        match read_mvol_bytes(&bytes) {
            Err(CoreError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {:?}", other),
        }
    }

    #[test]
    fn mvol_truncated_payload_reports_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mvol");
        let vol = ramp_volume((2, 2, 2));
        write_mvol_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        match read_mvol_bytes(&bytes) {
            Err(CoreError::Format { message, .. }) => {
                assert!(message.contains("expected 32"), "message: {}", message);
            }
            other => panic!("expected format error, got {:?}", other),
        }
    }

    fn minimal_nifti(datatype: i16, bitpix: i16, body: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; NIFTI_HEADER_LEN];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes()); // dim[0]
        h[42..44].copy_from_slice(&2i16.to_le_bytes());
        h[44..46].copy_from_slice(&2i16.to_le_bytes());
        h[46..48].copy_from_slice(&2i16.to_le_bytes());
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[80..84].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim[1..3]
        h[84..88].copy_from_slice(&1.0f32.to_le_bytes());
        h[88..92].copy_from_slice(&1.0f32.to_le_bytes());
        h[108..112].copy_from_slice(&(NIFTI_HEADER_LEN as f32).to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(body);
        h
    }

    #[test]
    fn nifti_minimal_float32_volume() {
        let values: [f32; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut body = Vec::new();
        for v in values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = minimal_nifti(16, 32, &body);
        let vol = import_nifti_bytes(&bytes).unwrap();
        assert_eq!(vol.dims(), (2, 2, 2));
        assert_eq!(vol.voxels(), &values);
    }

    #[test]
    fn nifti_applies_scl_slope() {
        let mut body = Vec::new();
        for v in [1i16, 2, 3, 4, 5, 6, 7, 8] {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let mut bytes = minimal_nifti(4, 16, &body);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes()); // scl_slope
        bytes[116..120].copy_from_slice(&0.5f32.to_le_bytes()); // scl_inter
        let vol = import_nifti_bytes(&bytes).unwrap();
        assert_eq!(vol.voxels()[0], 2.5);
        assert_eq!(vol.voxels()[7], 16.5);
    }

    #[test]
    fn nifti_rejects_bad_magic() {
        let bytes = minimal_nifti(16, 32, &[0u8; 32]);
        let mut bad = bytes.clone();
        bad[344] = b'x';
        match import_nifti_bytes(&bad) {
            Err(CoreError::Format { offset: 344, .. }) => {}
            other => panic!("expected format error at 344, got {:?}", other),
        }
    }

    #[test]
    fn nifti_rejects_float64() {
        let bytes = minimal_nifti(64, 64, &[0u8; 64]);
        match import_nifti_bytes(&bytes) {
            Err(CoreError::Format { offset: 70, message }) => {
                assert!(message.contains("64"));
            }
            other => panic!("expected unsupported datatype, got {:?}", other),
        }
    }
}
