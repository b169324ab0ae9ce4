//! Prompt-driven region localization: toy deterministic text/image
//! embedders, cosine similarity maps over a slice grid, greedy NMS ROI
//! selection, and aligned image/mask patch extraction.
//!
//! The toy embedders stand in for a pretrained VLM behind the
//! [`TextEmbedder`] / [`ImageEmbedder`] adapter traits; swapping in a real
//! encoder never changes the downstream plumbing.

use crate::error::{Error, Result};
use crate::phantom::{MaskSlice, Slice2D};
use std::io::{Read, Write};
use std::path::Path;

pub const PGPP_MAGIC: [u8; 4] = *b"PGPP";
pub const PGPP_VERSION: u32 = 1;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_CELL: usize = 32;
pub const DEFAULT_STRIDE: usize = 16;
pub const DEFAULT_PATCH: usize = 64;

/// Unit-norm embedding, f32.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    fn normalized(mut v: Vec<f32>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        EmbeddingVector(v)
    }
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector>;
}

pub trait ImageEmbedder {
    fn dim(&self) -> usize;
    /// Embed one `cell`-sized square window of a slice, row-major.
    fn embed_cell(&self, cell: &[f32], side: usize) -> EmbeddingVector;
}

/// Deterministic hash-based embedder: character trigrams for text,
/// histogram/gradient descriptors for image cells, both bucketed into `dim`
/// components and L2-normalized.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    pub dim: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        ToyEmbedder { dim: DEFAULT_EMBED_DIM }
    }
}

const HASH_SEED: u64 = 0x9e3779b97f4a7c15;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ToyEmbedder {
    fn bucket(&self, h: u64) -> (usize, f32) {
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl TextEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let chars: Vec<char> = prompt.chars().collect();
        let mut acc = vec![0f32; self.dim];
        // Pad so one- and two-char prompts still produce trigrams.
        let padded: Vec<char> =
            std::iter::once('^').chain(chars).chain(std::iter::once('$')).collect();
        for win in padded.windows(3.min(padded.len())) {
            let s: String = win.iter().collect();
            let (b, sign) = self.bucket(fnv1a(HASH_SEED, s.as_bytes()));
            acc[b] += sign;
        }
        Ok(EmbeddingVector::normalized(acc))
    }
}

impl ImageEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_cell(&self, cell: &[f32], side: usize) -> EmbeddingVector {
        assert_eq!(cell.len(), side * side);
        const INT_BINS: usize = 16;
        const ORI_BINS: usize = 8;
        let mut descriptor = vec![0f32; INT_BINS + ORI_BINS];
        let n = cell.len() as f32;
        for &v in cell {
            let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0 - 1e-6);
            descriptor[(t * INT_BINS as f32) as usize] += 1.0 / n;
        }
        for y in 1..side - 1 {
            for x in 1..side - 1 {
                let gy = cell[(y + 1) * side + x] - cell[(y - 1) * side + x];
                let gx = cell[y * side + x + 1] - cell[y * side + x - 1];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 1e-8 {
                    let ang = gy.atan2(gx); // (-pi, pi]
                    let t = ((ang + std::f32::consts::PI)
                        / (2.0 * std::f32::consts::PI))
                        .clamp(0.0, 1.0 - 1e-6);
                    descriptor[INT_BINS + (t * ORI_BINS as f32) as usize] += mag / n;
                }
            }
        }
        let mut acc = vec![0f32; self.dim];
        for (k, &v) in descriptor.iter().enumerate() {
            let (b, sign) = self.bucket(fnv1a(HASH_SEED ^ 0xa5a5, &(k as u32).to_le_bytes()));
            acc[b] += sign * v;
        }
        EmbeddingVector::normalized(acc)
    }
}

/// Grid of cell embeddings covering a slice.
#[derive(Clone, Debug)]
pub struct EmbeddingGrid {
    pub gy: usize,
    pub gx: usize,
    pub cell: usize,
    pub stride: usize,
    pub vectors: Vec<EmbeddingVector>, // row-major
}

pub fn embed_image_grid(
    slice: &Slice2D,
    cell: usize,
    stride: usize,
    embedder: &dyn ImageEmbedder,
) -> Result<EmbeddingGrid> {
    if cell > slice.ny || cell > slice.nx {
        return Err(Error::InvalidArgument(format!(
            "cell {cell} exceeds slice dims ({}, {})",
            slice.ny, slice.nx
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let gy = (slice.ny - cell) / stride + 1;
    let gx = (slice.nx - cell) / stride + 1;
    let mut vectors = Vec::with_capacity(gy * gx);
    let mut window = vec![0f32; cell * cell];
    for iy in 0..gy {
        for ix in 0..gx {
            let (oy, ox) = (iy * stride, ix * stride);
            for y in 0..cell {
                let src = (oy + y) * slice.nx + ox;
                window[y * cell..(y + 1) * cell]
                    .copy_from_slice(&slice.data[src..src + cell]);
            }
            vectors.push(embedder.embed_cell(&window, cell));
        }
    }
    Ok(EmbeddingGrid { gy, gx, cell, stride, vectors })
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch { expected: vec![a.dim()], got: vec![b.dim()] });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::InvalidArgument("zero vector in cosine similarity".into()));
    }
    let dot: f32 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-cell cosine similarity against a text embedding.
#[derive(Clone, Debug)]
pub struct SimilarityMap {
    pub gy: usize,
    pub gx: usize,
    pub cell: usize,
    pub stride: usize,
    pub values: Vec<f32>,
}

pub fn similarity_map(text: &EmbeddingVector, grid: &EmbeddingGrid) -> Result<SimilarityMap> {
    let mut values = Vec::with_capacity(grid.vectors.len());
    for v in &grid.vectors {
        values.push(cosine_similarity(text, v)?);
    }
    Ok(SimilarityMap { gy: grid.gy, gx: grid.gx, cell: grid.cell, stride: grid.stride, values })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    /// Center in slice pixels (y, x).
    pub center: (usize, usize),
    pub score: f32,
}

/// Greedy descending-score selection with non-maximum suppression; ties
/// break by (row, col) order. Scale-invariant: only the ordering of scores
/// matters above the threshold.
pub fn select_roi(map: &SimilarityMap, k: usize, threshold: f32, nms_radius: f64) -> Vec<Roi> {
    assert!(k >= 1, "k must be >= 1");
    let mut candidates: Vec<(usize, usize, f32)> = Vec::new();
    for iy in 0..map.gy {
        for ix in 0..map.gx {
            let s = map.values[iy * map.gx + ix];
            if s >= threshold {
                candidates.push((iy, ix, s));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut out: Vec<Roi> = Vec::new();
    for (iy, ix, s) in candidates {
        let center = (iy * map.stride + map.cell / 2, ix * map.stride + map.cell / 2);
        let suppressed = out.iter().any(|r| {
            let dy = r.center.0 as f64 - center.0 as f64;
            let dx = r.center.1 as f64 - center.1 as f64;
            (dy * dy + dx * dx).sqrt() <= nms_radius
        });
        if !suppressed {
            out.push(Roi { center, score: s });
            if out.len() == k {
                break;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PatchSource {
    pub volume: u32,
    pub z: usize,
    /// Effective crop center after border clamping (y, x).
    pub center: (usize, usize),
}

/// Aligned image/mask patch with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub ps: usize,
    pub image: Vec<f32>, // ps*ps in [-1, 1]
    pub mask: Vec<u8>,   // ps*ps binary
    pub source: PatchSource,
    pub provenance: Provenance,
}

impl PatchPair {
    pub fn mask_sum(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(&PGPP_MAGIC);
        buf.extend_from_slice(&PGPP_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.ps as u32).to_le_bytes());
        buf.push(match self.provenance {
            Provenance::Real => 0,
            Provenance::Synthetic => 1,
        });
        for v in &self.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.mask);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 4 + 1;
        if bytes.len() < HEADER {
            return Err(Error::Truncated { need: HEADER, got: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != PGPP_MAGIC {
            return Err(Error::BadMagic { expected: PGPP_MAGIC, got: magic });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PGPP_VERSION {
            return Err(Error::BadVersion(version));
        }
        let ps = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let provenance = match bytes[12] {
            0 => Provenance::Real,
            1 => Provenance::Synthetic,
            other => return Err(Error::DtypeMismatch(other)),
        };
        let n = ps * ps;
        let need = HEADER + n * 4 + n;
        if bytes.len() != need {
            return Err(Error::Truncated { need, got: bytes.len() });
        }
        let image = bytes[HEADER..HEADER + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = bytes[HEADER + n * 4..].to_vec();
        Ok(PatchPair {
            ps,
            image,
            mask,
            source: PatchSource::default(),
            provenance,
        })
    }
}

/// Crop a ps-by-ps window centered on each ROI from aligned image and mask
/// slices. Centers near a border are clamped inward so the crop stays fully
/// inside; the recorded source center is the effective one.
pub fn extract_patches(
    img: &Slice2D,
    mask: &MaskSlice,
    rois: &[Roi],
    ps: usize,
    volume: u32,
    z: usize,
) -> Result<Vec<PatchPair>> {
    if ps % 2 != 0 {
        return Err(Error::InvalidArgument(format!("patch size {ps} must be even")));
    }
    if ps > img.ny || ps > img.nx {
        return Err(Error::InvalidArgument(format!(
            "patch size {ps} exceeds slice dims ({}, {})",
            img.ny, img.nx
        )));
    }
    assert_eq!((img.ny, img.nx), (mask.ny, mask.nx), "image/mask slice dims");
    let half = ps / 2;
    let mut out = Vec::with_capacity(rois.len());
    for roi in rois {
        let cy = roi.center.0.clamp(half, img.ny - half);
        let cx = roi.center.1.clamp(half, img.nx - half);
        let (oy, ox) = (cy - half, cx - half);
        let mut pimg = Vec::with_capacity(ps * ps);
        let mut pmask = Vec::with_capacity(ps * ps);
        for y in 0..ps {
            let row = (oy + y) * img.nx + ox;
            pimg.extend_from_slice(&img.data[row..row + ps]);
            pmask.extend_from_slice(&mask.data[row..row + ps]);
        }
        out.push(PatchPair {
            ps,
            image: pimg,
            mask: pmask,
            source: PatchSource { volume, z, center: (cy, cx) },
            provenance: Provenance::Real,
        });
    }
    Ok(out)
}
