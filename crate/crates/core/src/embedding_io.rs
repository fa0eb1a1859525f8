//! Binary patch-embedding formats and synthetic corpora.
//!
//! Two little-endian container formats are supported:
//!
//! * `DIVT`: one image, `N × d` scalars row-major after a 28-byte header.
//! * `DIVL`: `L` layers of the same image, each an `N × d` block, after a
//!   32-byte header.
//!
//! Payloads are `f32` or `f64` on disk. In memory everything is `f64`; the
//! on-disk dtype is remembered so a save reproduces the loaded bytes exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, FormatError, Result};
use crate::fsutil::atomic_write;
use crate::matrix::{dot, norm, Matrix};

pub const PATCH_SET_MAGIC: [u8; 4] = *b"DIVT";
pub const LAYERWISE_MAGIC: [u8; 4] = *b"DIVL";
pub const FORMAT_VERSION: u32 = 1;
pub const PATCH_SET_HEADER_LEN: usize = 28;
pub const LAYERWISE_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self, FormatError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One image's patch embeddings together with its patch-grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    id: String,
    grid_h: usize,
    grid_w: usize,
    dtype: Dtype,
    data: Matrix,
}

impl PatchSet {
    /// Builds an `f64` patch set, checking shape and finiteness.
    pub fn new(id: impl Into<String>, grid_h: usize, grid_w: usize, data: Matrix) -> Result<Self> {
        let n = data.rows();
        let d = data.cols();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "patch set needs N >= 1 and d >= 1, got N = {n}, d = {d}"
            )));
        }
        if grid_h.checked_mul(grid_w) != Some(n) {
            return Err(Error::InvalidInput(format!(
                "grid {grid_h}x{grid_w} does not cover N = {n} patches"
            )));
        }
        if let Some((row, col)) = first_non_finite(&data) {
            return Err(Error::InvalidInput(format!("non-finite value at row {row}, col {col}")));
        }
        Ok(Self {
            id: id.into(),
            grid_h,
            grid_w,
            dtype: Dtype::F64,
            data,
        })
    }

    pub fn from_rows(id: impl Into<String>, grid_h: usize, grid_w: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::InvalidInput("ragged patch rows".into()));
        }
        Self::new(id, grid_h, grid_w, Matrix::from_rows(rows))
    }

    /// Re-tags the storage dtype. Converting to `F32` rounds every value to
    /// the nearest `f32` so that saving stays lossless.
    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        if dtype == Dtype::F32 {
            for v in self.data.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_patches(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Mutable access for perturbation experiments. Callers are responsible
    /// for keeping values finite.
    pub fn data_mut(&mut self) -> &mut Matrix {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }
}

fn first_non_finite(m: &Matrix) -> Option<(usize, usize)> {
    let pos = m.as_slice().iter().position(|v| !v.is_finite())?;
    Some((pos / m.cols(), pos % m.cols()))
}

/// Several transformer layers' patch embeddings for the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseEmbeddings {
    id: String,
    layers: Vec<PatchSet>,
}

impl LayerwiseEmbeddings {
    pub fn new(id: impl Into<String>, layers: Vec<PatchSet>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidInput("layerwise embeddings need at least one layer".into()))?;
        let shape = (first.n_patches(), first.dim(), first.grid(), first.dtype());
        for (l, layer) in layers.iter().enumerate() {
            if (layer.n_patches(), layer.dim(), layer.grid(), layer.dtype()) != shape {
                return Err(Error::ShapeMismatch(format!("layer {l} shape differs from layer 0")));
            }
        }
        Ok(Self { id: id.into(), layers })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[PatchSet] {
        &self.layers
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }
}

fn check_magic(bytes: &[u8], expected: [u8; 4], header_len: usize) -> Result<(), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != expected {
        return Err(FormatError::BadMagic { found, expected });
    }
    if bytes.len() < header_len {
        return Err(FormatError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn dim(v: u32, name: &str) -> Result<usize, FormatError> {
    if v == 0 {
        return Err(FormatError::InvalidHeader(format!("{name} must be positive")));
    }
    Ok(v as usize)
}

fn payload_len(header: usize, blocks: &[usize], dtype: Dtype) -> Result<usize, FormatError> {
    blocks
        .iter()
        .try_fold(dtype.size(), |acc, &b| acc.checked_mul(b))
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| FormatError::InvalidHeader("payload size overflows".into()))
}

fn check_len(bytes: &[u8], expected: usize) -> Result<(), FormatError> {
    match bytes.len() {
        n if n < expected => Err(FormatError::Truncated { expected, actual: n }),
        n if n > expected => Err(FormatError::TrailingBytes { expected, actual: n }),
        _ => Ok(()),
    }
}

fn decode_block(bytes: &[u8], dtype: Dtype, rows: usize, cols: usize, layer: usize) -> Result<Matrix, FormatError> {
    let mut data = Vec::with_capacity(rows * cols);
    match dtype {
        Dtype::F32 => data.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        ),
        Dtype::F64 => data.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            layer,
            row: pos / cols,
            col: pos % cols,
        });
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

fn encode_block(out: &mut Vec<u8>, m: &Matrix, dtype: Dtype) {
    match dtype {
        Dtype::F32 => {
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn u32_field(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{name} = {v} does not fit in u32")))
}

/// Decodes a `DIVT` buffer. The patch set id is left empty.
pub fn decode_patch_set(bytes: &[u8]) -> Result<PatchSet, FormatError> {
    check_magic(bytes, PATCH_SET_MAGIC, PATCH_SET_HEADER_LEN)?;
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(r.u32())?;
    let n = dim(r.u32(), "N")?;
    let d = dim(r.u32(), "d")?;
    let grid_h = dim(r.u32(), "grid_h")?;
    let grid_w = dim(r.u32(), "grid_w")?;
    if grid_h.checked_mul(grid_w) != Some(n) {
        return Err(FormatError::InvalidHeader(format!(
            "grid {grid_h}x{grid_w} does not match N = {n}"
        )));
    }
    check_len(bytes, payload_len(PATCH_SET_HEADER_LEN, &[n, d], dtype)?)?;
    let data = decode_block(&bytes[PATCH_SET_HEADER_LEN..], dtype, n, d, 0)?;
    Ok(PatchSet {
        id: String::new(),
        grid_h,
        grid_w,
        dtype,
        data,
    })
}

pub fn encode_patch_set(ps: &PatchSet) -> Result<Vec<u8>> {
    let n = ps.n_patches();
    let d = ps.dim();
    let mut out = Vec::with_capacity(PATCH_SET_HEADER_LEN + n * d * ps.dtype.size());
    out.extend_from_slice(&PATCH_SET_MAGIC);
    for (v, name) in [
        (FORMAT_VERSION as usize, "version"),
        (ps.dtype.code() as usize, "dtype"),
        (n, "N"),
        (d, "d"),
        (ps.grid_h, "grid_h"),
        (ps.grid_w, "grid_w"),
    ] {
        out.extend_from_slice(&u32_field(v, name)?.to_le_bytes());
    }
    encode_block(&mut out, &ps.data, ps.dtype);
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a `DIVT` file; the patch set id is the file stem.
pub fn load_patch_set(path: impl AsRef<Path>) -> Result<PatchSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ps = decode_patch_set(&bytes).map_err(|e| Error::format(path, e))?;
    Ok(ps.with_id(file_stem(path)))
}

pub fn save_patch_set(ps: &PatchSet, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_patch_set(ps)?)
}

pub fn decode_layerwise(bytes: &[u8]) -> Result<LayerwiseEmbeddings, FormatError> {
    check_magic(bytes, LAYERWISE_MAGIC, LAYERWISE_HEADER_LEN)?;
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(r.u32())?;
    let l = dim(r.u32(), "L")?;
    let n = dim(r.u32(), "N")?;
    let d = dim(r.u32(), "d")?;
    let grid_h = dim(r.u32(), "grid_h")?;
    let grid_w = dim(r.u32(), "grid_w")?;
    if grid_h.checked_mul(grid_w) != Some(n) {
        return Err(FormatError::InvalidHeader(format!(
            "grid {grid_h}x{grid_w} does not match N = {n}"
        )));
    }
    check_len(bytes, payload_len(LAYERWISE_HEADER_LEN, &[l, n, d], dtype)?)?;
    let block = n * d * dtype.size();
    let layers = (0..l)
        .map(|layer| {
            let start = LAYERWISE_HEADER_LEN + layer * block;
            let data = decode_block(&bytes[start..start + block], dtype, n, d, layer)?;
            Ok(PatchSet {
                id: String::new(),
                grid_h,
                grid_w,
                dtype,
                data,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    Ok(LayerwiseEmbeddings {
        id: String::new(),
        layers,
    })
}

pub fn encode_layerwise(le: &LayerwiseEmbeddings) -> Result<Vec<u8>> {
    let first = &le.layers[0];
    let mut out = Vec::new();
    out.extend_from_slice(&LAYERWISE_MAGIC);
    for (v, name) in [
        (FORMAT_VERSION as usize, "version"),
        (first.dtype.code() as usize, "dtype"),
        (le.layers.len(), "L"),
        (first.n_patches(), "N"),
        (first.dim(), "d"),
        (first.grid_h, "grid_h"),
        (first.grid_w, "grid_w"),
    ] {
        out.extend_from_slice(&u32_field(v, name)?.to_le_bytes());
    }
    for layer in &le.layers {
        encode_block(&mut out, &layer.data, first.dtype);
    }
    Ok(out)
}

pub fn load_layerwise(path: impl AsRef<Path>) -> Result<LayerwiseEmbeddings> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut le = decode_layerwise(&bytes).map_err(|e| Error::format(path, e))?;
    le.id = file_stem(path);
    Ok(le)
}

pub fn save_layerwise(le: &LayerwiseEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_layerwise(le)?)
}

/// Parameters of a synthetic image with planted cluster structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_true_clusters: usize,
    pub n_patches: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Standard deviation of the isotropic Gaussian noise added per coordinate.
    pub within_cluster_noise: f64,
    pub seed: u64,
    /// When set, anchors are rejection-sampled so that every pair has cosine
    /// similarity at most this value.
    pub max_anchor_similarity: Option<f64>,
    /// Euclidean norm of every generated row.
    pub row_norm: f64,
}

impl SynthSpec {
    /// Uses the most square grid that tiles `n_patches`.
    pub fn new(n_true_clusters: usize, n_patches: usize, dim: usize, noise: f64, seed: u64) -> Self {
        let (grid_h, grid_w) = square_grid(n_patches);
        Self {
            n_true_clusters,
            n_patches,
            dim,
            grid_h,
            grid_w,
            within_cluster_noise: noise,
            seed,
            max_anchor_similarity: None,
            row_norm: 1.0,
        }
    }

    pub fn with_row_norm(mut self, norm: f64) -> Self {
        self.row_norm = norm;
        self
    }

    pub fn with_max_anchor_similarity(mut self, max: f64) -> Self {
        self.max_anchor_similarity = Some(max);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_patches == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter("synthetic N and d must be positive".into()));
        }
        if self.n_true_clusters == 0 || self.n_true_clusters > self.n_patches {
            return Err(Error::InvalidParameter(format!(
                "n_true_clusters must be in 1..={}, got {}",
                self.n_patches, self.n_true_clusters
            )));
        }
        if !(self.within_cluster_noise >= 0.0 && self.within_cluster_noise.is_finite()) {
            return Err(Error::InvalidParameter("noise must be finite and >= 0".into()));
        }
        if !(self.row_norm > 0.0 && self.row_norm.is_finite()) {
            return Err(Error::InvalidParameter("row norm must be finite and > 0".into()));
        }
        if self.grid_h * self.grid_w != self.n_patches {
            return Err(Error::InvalidParameter(format!(
                "grid {}x{} does not cover N = {}",
                self.grid_h, self.grid_w, self.n_patches
            )));
        }
        Ok(())
    }
}

/// Factorizes `n` as `h × w` with `h ≤ w` and `h` as large as possible.
pub fn square_grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

/// A synthetic patch set together with the generator's cluster labels.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub patches: PatchSet,
    pub labels: Vec<usize>,
}

const MAX_ANCHOR_ATTEMPTS: usize = 100_000;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_anchors(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(spec.n_true_clusters);
    let mut attempts = 0;
    while anchors.len() < spec.n_true_clusters {
        let cand = unit_gaussian(rng, spec.dim);
        let ok = match spec.max_anchor_similarity {
            Some(max) => anchors.iter().all(|a| dot(a, &cand) <= max),
            None => true,
        };
        if ok {
            anchors.push(cand);
        } else {
            attempts += 1;
            if attempts > MAX_ANCHOR_ATTEMPTS {
                return Err(Error::InvalidParameter(format!(
                    "could not place {} anchors in d = {} with pairwise similarity <= {:?}",
                    spec.n_true_clusters, spec.dim, spec.max_anchor_similarity
                )));
            }
        }
    }
    Ok(anchors)
}

/// Generates `n_true_clusters` random unit anchors, assigns patches to them
/// round-robin, perturbs each patch with Gaussian noise and re-normalizes to
/// `row_norm`.
pub fn synth_clustered(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchors = sample_anchors(&mut rng, spec)?;
    let mut data = Matrix::zeros(spec.n_patches, spec.dim);
    let mut labels = Vec::with_capacity(spec.n_patches);
    for i in 0..spec.n_patches {
        let label = i % spec.n_true_clusters;
        labels.push(label);
        let row = data.row_mut(i);
        row.copy_from_slice(&anchors[label]);
        if spec.within_cluster_noise > 0.0 {
            for v in row.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += spec.within_cluster_noise * g;
            }
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        if spec.row_norm != 1.0 {
            row.iter_mut().for_each(|v| *v *= spec.row_norm);
        }
    }
    let patches = PatchSet::new(format!("synth-{}", spec.seed), spec.grid_h, spec.grid_w, data)?;
    Ok(SynthSample { patches, labels })
}

/// Layer-stacked synthetic image whose rows drift from per-patch random
/// directions towards their cluster anchors with depth: layer `l` of `L`
/// holds `anchor · (l/L) + noise · (1 − l/L)`, re-normalized.
pub fn synth_layerwise(spec: &SynthSpec, n_layers: usize) -> Result<LayerwiseEmbeddings> {
    spec.validate()?;
    if n_layers == 0 {
        return Err(Error::InvalidParameter("n_layers must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchors = sample_anchors(&mut rng, spec)?;
    let noise: Vec<Vec<f64>> = (0..spec.n_patches).map(|_| unit_gaussian(&mut rng, spec.dim)).collect();
    let layers = (0..n_layers)
        .map(|l| {
            let w = l as f64 / n_layers as f64;
            let mut data = Matrix::zeros(spec.n_patches, spec.dim);
            for i in 0..spec.n_patches {
                let anchor = &anchors[i % spec.n_true_clusters];
                let row = data.row_mut(i);
                for ((v, a), z) in row.iter_mut().zip(anchor).zip(&noise[i]) {
                    *v = a * w + z * (1.0 - w);
                }
                let n = norm(row);
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            PatchSet::new(format!("synth-{}-l{l}", spec.seed), spec.grid_h, spec.grid_w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    LayerwiseEmbeddings::new(format!("synth-{}", spec.seed), layers)
}
