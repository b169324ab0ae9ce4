//! Synthetic abdominal phantom volumes and the PGPV raw volume format.
//!
//! Phantoms are ellipsoid "organs" over a noisy constant background: a few
//! distractor structures plus one or more small target blobs standing in
//! for adrenal glands. Target size is capped at a configurable fraction of
//! the volume so the small-organ regime is preserved.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const PGPV_MAGIC: [u8; 4] = *b"PGPV";
pub const PGPV_VERSION: u32 = 1;

/// 3-d scalar field, C-order with z slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize), // (nz, ny, nx)
    pub spacing: (f32, f32, f32),    // mm per voxel (z, y, x)
    pub voxels: Vec<f32>,
}

/// Binary labels aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub voxels: Vec<u8>,
}

/// One axial plane of image data, row-major (ny, nx).
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<f32>,
}

/// One axial plane of mask data.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSlice {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<u8>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), voxels: Vec<f32>) -> Self {
        assert_eq!(voxels.len(), dims.0 * dims.1 * dims.2, "voxel count");
        Volume { dims, spacing, voxels }
    }

    pub fn constant(dims: (usize, usize, usize), spacing: (f32, f32, f32), value: f32) -> Self {
        Volume { dims, spacing, voxels: vec![value; dims.0 * dims.1 * dims.2] }
    }

    pub fn slice_axial(&self, z: usize) -> Result<Slice2D> {
        let (nz, ny, nx) = self.dims;
        if z >= nz {
            return Err(Error::IndexOutOfRange { index: z, len: nz });
        }
        let plane = ny * nx;
        Ok(Slice2D { ny, nx, data: self.voxels[z * plane..(z + 1) * plane].to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_volume(&VolumeData::Image(self.clone()), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_volume(path)? {
            VolumeData::Image(v) => Ok(v),
            VolumeData::Mask(_) => Err(Error::DtypeMismatch(1)),
        }
    }
}

impl MaskVolume {
    pub fn empty(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        MaskVolume { dims, spacing, voxels: vec![0; dims.0 * dims.1 * dims.2] }
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice_axial(&self, z: usize) -> Result<MaskSlice> {
        let (nz, ny, nx) = self.dims;
        if z >= nz {
            return Err(Error::IndexOutOfRange { index: z, len: nz });
        }
        let plane = ny * nx;
        Ok(MaskSlice { ny, nx, data: self.voxels[z * plane..(z + 1) * plane].to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_volume(&VolumeData::Mask(self.clone()), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_volume(path)? {
            VolumeData::Mask(m) => Ok(m),
            VolumeData::Image(_) => Err(Error::DtypeMismatch(0)),
        }
    }
}

/// Either payload dtype of the PGPV container.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Image(Volume),
    Mask(MaskVolume),
}

/// Per-organ sampling ranges: fractional center position per axis, ellipsoid
/// radii in voxels per axis, and an additive intensity offset band.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganRange {
    pub center_frac: ((f64, f64), (f64, f64), (f64, f64)),
    pub radii: ((f64, f64), (f64, f64), (f64, f64)),
    pub intensity_offset: (f32, f32),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    #[serde(default = "default_spacing")]
    pub spacing: (f32, f32, f32),
    /// Background intensity band in HU-like units; one constant level is
    /// drawn per volume.
    pub background: (f32, f32),
    /// Number of distractor organs.
    pub organ_count: usize,
    pub organ: OrganRange,
    /// Number of target blobs (the mask foreground).
    #[serde(default = "default_one")]
    pub target_count: usize,
    pub target: OrganRange,
    /// Upper bound on foreground voxels as a fraction of the volume.
    pub target_fraction_max: f64,
    pub noise_std: f32,
    pub seed: u64,
}

fn default_spacing() -> (f32, f32, f32) {
    (3.0, 1.0, 1.0)
}

fn default_one() -> usize {
    1
}

impl PhantomSpec {
    /// A small-but-learnable default: dark-ish background, darker
    /// distractors, brighter compact targets.
    pub fn default_with_seed(seed: u64) -> Self {
        PhantomSpec {
            dims: (32, 128, 128),
            spacing: default_spacing(),
            background: (0.0, 40.0),
            organ_count: 3,
            organ: OrganRange {
                center_frac: ((0.2, 0.8), (0.15, 0.85), (0.15, 0.85)),
                radii: ((3.0, 6.0), (8.0, 16.0), (8.0, 16.0)),
                intensity_offset: (-90.0, -40.0),
            },
            target_count: 1,
            target: OrganRange {
                center_frac: ((0.3, 0.7), (0.25, 0.75), (0.25, 0.75)),
                radii: ((2.0, 4.0), (3.0, 7.0), (3.0, 7.0)),
                intensity_offset: (70.0, 140.0),
            },
            target_fraction_max: 0.01,
            noise_std: 10.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (nz, ny, nx) = self.dims;
        if nz < 16 || ny < 64 || nx < 64 {
            return Err(Error::DimsTooSmall(self.dims));
        }
        if self.target_fraction_max <= 0.0 || self.target_fraction_max > 0.01 {
            return Err(Error::InvalidArgument(format!(
                "target_fraction_max must be in (0, 0.01], got {}",
                self.target_fraction_max
            )));
        }
        if self.target_count > 0 {
            let total = (nz * ny * nx) as f64;
            let (rz, ry, rx) = self.target.radii;
            let min_vol = 4.0 / 3.0 * std::f64::consts::PI * rz.0 * ry.0 * rx.0;
            let min_fraction = min_vol / total;
            if min_fraction > self.target_fraction_max {
                return Err(Error::InfeasibleTargetFraction {
                    bound: self.target_fraction_max,
                    min_fraction,
                });
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: (f64, f64, f64), // (z, y, x) in voxels
    radii: (f64, f64, f64),
    offset: f32,
}

fn sample_ellipsoid(range: &OrganRange, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Ellipsoid {
    let u = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        if hi > lo { rng.gen_range(lo..hi) } else { lo }
    };
    let cz = u(range.center_frac.0 .0, range.center_frac.0 .1, rng) * dims.0 as f64;
    let cy = u(range.center_frac.1 .0, range.center_frac.1 .1, rng) * dims.1 as f64;
    let cx = u(range.center_frac.2 .0, range.center_frac.2 .1, rng) * dims.2 as f64;
    let rz = u(range.radii.0 .0, range.radii.0 .1, rng);
    let ry = u(range.radii.1 .0, range.radii.1 .1, rng);
    let rx = u(range.radii.2 .0, range.radii.2 .1, rng);
    let off = if range.intensity_offset.1 > range.intensity_offset.0 {
        rng.gen_range(range.intensity_offset.0..range.intensity_offset.1)
    } else {
        range.intensity_offset.0
    };
    Ellipsoid { center: (cz, cy, cx), radii: (rz, ry, rx), offset: off }
}

fn ellipsoid_voxels(e: &Ellipsoid, dims: (usize, usize, usize)) -> Vec<usize> {
    let (nz, ny, nx) = dims;
    let (cz, cy, cx) = e.center;
    let (rz, ry, rx) = e.radii;
    let z0 = ((cz - rz).floor().max(0.0)) as usize;
    let z1 = ((cz + rz).ceil().min(nz as f64 - 1.0)) as usize;
    let y0 = ((cy - ry).floor().max(0.0)) as usize;
    let y1 = ((cy + ry).ceil().min(ny as f64 - 1.0)) as usize;
    let x0 = ((cx - rx).floor().max(0.0)) as usize;
    let x1 = ((cx + rx).ceil().min(nx as f64 - 1.0)) as usize;
    let mut out = Vec::new();
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dz = (z as f64 - cz) / rz;
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    out.push((z * ny + y) * nx + x);
                }
            }
        }
    }
    out
}

/// Deterministic phantom generation: identical spec (including seed) yields
/// bit-identical volumes. The mask marks exactly the target blob voxels.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let total = dims.0 * dims.1 * dims.2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let base = if spec.background.1 > spec.background.0 {
        rng.gen_range(spec.background.0..spec.background.1)
    } else {
        spec.background.0
    };
    let mut voxels = vec![base; total];
    let mut mask = vec![0u8; total];

    for _ in 0..spec.organ_count {
        let e = sample_ellipsoid(&spec.organ, dims, &mut rng);
        for idx in ellipsoid_voxels(&e, dims) {
            voxels[idx] += e.offset;
        }
    }

    let budget = (spec.target_fraction_max * total as f64).floor() as usize;
    let mut placed = 0usize;
    for _ in 0..spec.target_count {
        let mut chosen = None;
        for _ in 0..64 {
            let e = sample_ellipsoid(&spec.target, dims, &mut rng);
            let vox = ellipsoid_voxels(&e, dims);
            if placed + vox.len() <= budget {
                chosen = Some((e, vox));
                break;
            }
        }
        let (e, vox) = match chosen {
            Some(c) => c,
            None => {
                // Fall back to the smallest admissible blob; feasibility of
                // the minimum radii was checked in validate().
                let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
                let mut range = spec.target.clone();
                range.radii = (
                    (range.radii.0 .0, range.radii.0 .0),
                    (range.radii.1 .0, range.radii.1 .0),
                    (range.radii.2 .0, range.radii.2 .0),
                );
                let e = sample_ellipsoid(&range, dims, &mut r);
                let vox = ellipsoid_voxels(&e, dims);
                (e, vox)
            }
        };
        placed += vox.len();
        for idx in vox {
            voxels[idx] += e.offset;
            mask[idx] = 1;
        }
    }

    if spec.noise_std > 0.0 {
        for v in voxels.iter_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += n * spec.noise_std;
        }
    }

    Ok((
        Volume { dims, spacing: spec.spacing, voxels },
        MaskVolume { dims, spacing: spec.spacing, voxels: mask },
    ))
}

/// Clamp to the window then map affinely so `w_min` lands on -1 and `w_max`
/// on +1. Defaults (-200, 300) approximate an abdominal soft-tissue window.
pub fn normalize_intensity(v: &Volume, w_min: f32, w_max: f32) -> Result<Volume> {
    if w_min >= w_max {
        return Err(Error::InvalidArgument(format!(
            "window min {w_min} must be below max {w_max}"
        )));
    }
    let half = (w_max - w_min) / 2.0;
    let mid = (w_max + w_min) / 2.0;
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (x.clamp(w_min, w_max) - mid) / half)
        .collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, voxels })
}

pub const DEFAULT_WINDOW: (f32, f32) = (-200.0, 300.0);

fn write_header(
    out: &mut Vec<u8>,
    dtype: u8,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
) {
    out.extend_from_slice(&PGPV_MAGIC);
    out.extend_from_slice(&PGPV_VERSION.to_le_bytes());
    out.push(dtype);
    for d in [dims.0, dims.1, dims.2] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn save_volume(v: &VolumeData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    match v {
        VolumeData::Image(img) => {
            write_header(&mut buf, 0, img.dims, img.spacing);
            for x in &img.voxels {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::Mask(m) => {
            write_header(&mut buf, 1, m.dims, m.spacing);
            buf.extend_from_slice(&m.voxels);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeData> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_volume(&bytes)
}

pub fn parse_volume(bytes: &[u8]) -> Result<VolumeData> {
    const HEADER: usize = 4 + 4 + 1 + 12 + 12;
    if bytes.len() < HEADER {
        return Err(Error::Truncated { need: HEADER, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != PGPV_MAGIC {
        return Err(Error::BadMagic { expected: PGPV_MAGIC, got: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PGPV_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = bytes[8];
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().unwrap()) as usize;
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(bytes[21 + 4 * i..25 + 4 * i].try_into().unwrap());
    }
    let n = dims[0] * dims[1] * dims[2];
    let payload = &bytes[HEADER..];
    let dims = (dims[0], dims[1], dims[2]);
    let spacing = (spacing[0], spacing[1], spacing[2]);
    match dtype {
        0 => {
            if payload.len() != n * 4 {
                return Err(Error::Truncated { need: n * 4, got: payload.len() });
            }
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(VolumeData::Image(Volume { dims, spacing, voxels }))
        }
        1 => {
            if payload.len() != n {
                return Err(Error::Truncated { need: n, got: payload.len() });
            }
            if let Some(&bad) = payload.iter().find(|&&v| v > 1) {
                return Err(Error::InvalidArgument(format!("non-binary mask value {bad}")));
            }
            Ok(VolumeData::Mask(MaskVolume { dims, spacing, voxels: payload.to_vec() }))
        }
        other => Err(Error::DtypeMismatch(other)),
    }
}
