//! The structured target space: a patch grid, one CLS vector and a small set of
//! register vectors sharing one feature dimension.
//!
//! Downstream token order is always `[CLS, registers.., patches row-major]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GAPE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub h: usize,
    pub w: usize,
    pub d_img: usize,
    pub n_reg: usize,
    /// Number of soft tokens, i.e. conditioning rows.
    pub s: usize,
    pub d_cond: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self { h: 8, w: 8, d_img: 64, n_reg: 4, s: 16, d_cond: 128 }
    }
}

impl SpaceConfig {
    pub fn n_patches(&self) -> usize {
        self.h * self.w
    }

    /// Length of the token stream `[CLS, registers, patches]`.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_reg + self.n_patches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d_img == 0 || self.s == 0 || self.d_cond == 0 {
            return Err(Error::Config(format!(
                "h, w, d_img, s and d_cond must all be at least 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// One point of the target space. Also used for noise samples, interpolants
/// and velocities, which share the exact same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbedding {
    /// `[h, w, d_img]`
    pub patches: Array3<f32>,
    /// `[d_img]`
    pub cls: Array1<f32>,
    /// `[n_reg, d_img]`
    pub registers: Array2<f32>,
}

impl TargetEmbedding {
    pub fn zeros(cfg: &SpaceConfig) -> Self {
        Self {
            patches: Array3::zeros((cfg.h, cfg.w, cfg.d_img)),
            cls: Array1::zeros(cfg.d_img),
            registers: Array2::zeros((cfg.n_reg, cfg.d_img)),
        }
    }

    pub fn d_img(&self) -> usize {
        self.cls.len()
    }

    /// `(h, w, d_img, n_reg)` as stored.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (h, w, _) = self.patches.dim();
        (h, w, self.cls.len(), self.registers.nrows())
    }

    pub fn same_shape(&self, other: &TargetEmbedding) -> bool {
        self.patches.dim() == other.patches.dim()
            && self.cls.dim() == other.cls.dim()
            && self.registers.dim() == other.registers.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Every value in storage order: patches, cls, registers.
    pub fn values(&self) -> impl Iterator<Item = &f32> {
        self.patches.iter().chain(self.cls.iter()).chain(self.registers.iter())
    }

    /// Inverse of [`values`](Self::values) for `(h, w, d_img, n_reg)`.
    pub fn from_values(dims: (usize, usize, usize, usize), vals: impl IntoIterator<Item = f32>) -> Result<Self> {
        let (h, w, d, n_reg) = dims;
        let vals: Vec<f32> = vals.into_iter().collect();
        let (np, nc) = (h * w * d, d);
        if vals.len() != np + nc + n_reg * d {
            return Err(Error::shape(format!("{} values do not fill dims {dims:?}", vals.len())));
        }
        Ok(Self {
            patches: Array3::from_shape_vec((h, w, d), vals[..np].to_vec()).expect("sized"),
            cls: Array1::from_vec(vals[np..np + nc].to_vec()),
            registers: Array2::from_shape_vec((n_reg, d), vals[np + nc..].to_vec()).expect("sized"),
        })
    }

    /// Assembles from row-major patch rows `[h*w, d_img]`.
    pub fn from_rows(h: usize, w: usize, patch_rows: Array2<f32>, cls: Array1<f32>, registers: Array2<f32>) -> Result<Self> {
        let d = patch_rows.ncols();
        if patch_rows.nrows() != h * w || cls.len() != d || registers.ncols() != d {
            return Err(Error::shape(format!(
                "patch rows {:?}, cls {}, registers {:?} do not form a {h}x{w} embedding",
                patch_rows.dim(),
                cls.len(),
                registers.dim()
            )));
        }
        let patches = patch_rows.as_standard_layout().into_owned().into_shape_with_order((h, w, d)).expect("sized");
        Ok(Self { patches, cls, registers })
    }

    pub fn num_values(&self) -> usize {
        self.patches.len() + self.cls.len() + self.registers.len()
    }

    /// Elementwise `f(self, other)` over all three components.
    pub fn zip_map(&self, other: &TargetEmbedding, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "component shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Self {
            patches: Zip::from(&self.patches).and(&other.patches).map_collect(|&a, &b| f(a, b)),
            cls: Zip::from(&self.cls).and(&other.cls).map_collect(|&a, &b| f(a, b)),
            registers: Zip::from(&self.registers)
                .and(&other.registers)
                .map_collect(|&a, &b| f(a, b)),
        })
    }

    /// Mean over the grid of the patch vectors, `[d_img]`.
    pub fn pooled_patches(&self) -> Array1<f32> {
        let (h, w, d) = self.patches.dim();
        let flat = self.patches.view().into_shape_with_order((h * w, d)).expect("contiguous");
        let mut acc = Array1::<f64>::zeros(d);
        for row in flat.rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += f64::from(v);
            }
        }
        acc.mapv(|v| (v / (h * w) as f64) as f32)
    }

    /// Patch grid flattened row-major to `[h*w, d_img]`.
    pub fn patch_rows(&self) -> Array2<f32> {
        let (h, w, d) = self.patches.dim();
        self.patches.to_owned().into_shape_with_order((h * w, d)).expect("contiguous")
    }

    fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_f32s(w, self.patches.iter())?;
        binio::write_f32s(w, self.cls.iter())?;
        binio::write_f32s(w, self.registers.iter())
    }

    fn read_record<R: Read>(r: &mut R, cfg: &SpaceConfig) -> Result<Self> {
        let patches = binio::read_f32s(r, cfg.n_patches() * cfg.d_img)?;
        let cls = binio::read_f32s(r, cfg.d_img)?;
        let registers = binio::read_f32s(r, cfg.n_reg * cfg.d_img)?;
        Ok(Self {
            patches: Array3::from_shape_vec((cfg.h, cfg.w, cfg.d_img), patches).expect("sized"),
            cls: Array1::from_vec(cls),
            registers: Array2::from_shape_vec((cfg.n_reg, cfg.d_img), registers).expect("sized"),
        })
    }
}

/// Latents read at the soft-token positions of the prompt encoder, `[s, d_cond]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    pub latents: Array2<f32>,
}

impl ConditioningSequence {
    pub fn validate(&self, cfg: &SpaceConfig) -> Result<()> {
        if self.latents.dim() != (cfg.s, cfg.d_cond) {
            return Err(Error::shape(format!(
                "conditioning is {:?}, expected ({}, {})",
                self.latents.dim(),
                cfg.s,
                cfg.d_cond
            )));
        }
        if !self.latents.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conditioning latents".into()));
        }
        Ok(())
    }
}

/// Checks that `e` has the shapes implied by `cfg` and holds only finite values.
pub fn validate(e: &TargetEmbedding, cfg: &SpaceConfig) -> Result<()> {
    if e.patches.dim() != (cfg.h, cfg.w, cfg.d_img) {
        return Err(Error::shape(format!(
            "patches are {:?}, expected ({}, {}, {})",
            e.patches.dim(),
            cfg.h,
            cfg.w,
            cfg.d_img
        )));
    }
    if e.cls.len() != cfg.d_img {
        return Err(Error::shape(format!("cls has length {}, expected {}", e.cls.len(), cfg.d_img)));
    }
    if e.registers.dim() != (cfg.n_reg, cfg.d_img) {
        return Err(Error::shape(format!(
            "registers are {:?}, expected ({}, {})",
            e.registers.dim(),
            cfg.n_reg,
            cfg.d_img
        )));
    }
    if let Some(pos) = e.values().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("value at flat index {pos}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingManifest {
    count: usize,
    h: usize,
    w: usize,
    d_img: usize,
    n_reg: usize,
}

/// The shape shared by a homogeneous batch, as a partial `SpaceConfig`.
fn batch_shape(batch: &[TargetEmbedding]) -> Result<(usize, usize, usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::shape("empty batch"))?;
    let dims = first.dims();
    for (i, e) in batch.iter().enumerate().skip(1) {
        if e.dims() != dims {
            return Err(Error::shape(format!(
                "record {i} has dims {:?}, record 0 has {:?}",
                e.dims(),
                dims
            )));
        }
    }
    Ok(dims)
}

pub(crate) fn write_embedding_record<W: Write>(w: &mut W, e: &TargetEmbedding) -> Result<()> {
    e.write_record(w)
}

pub(crate) fn read_embedding_record<R: Read>(r: &mut R, cfg: &SpaceConfig) -> Result<TargetEmbedding> {
    TargetEmbedding::read_record(r, cfg)
}

pub fn write_embedding_file(path: impl AsRef<Path>, batch: &[TargetEmbedding]) -> Result<()> {
    let (h, w, d_img, n_reg) = batch_shape(batch)?;
    let manifest = EmbeddingManifest { count: batch.len(), h, w, d_img, n_reg };
    let mut out = BufWriter::new(File::create(path)?);
    binio::write_header(&mut out, EMBEDDING_MAGIC, EMBEDDING_VERSION, &manifest)?;
    for e in batch {
        e.write_record(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Vec<TargetEmbedding>> {
    let mut r = BufReader::new(File::open(path)?);
    let m: EmbeddingManifest = binio::read_header(&mut r, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
    if m.count == 0 || m.h == 0 || m.w == 0 || m.d_img == 0 {
        return Err(Error::format(format!("manifest describes an empty batch: {m:?}")));
    }
    let cfg = SpaceConfig { h: m.h, w: m.w, d_img: m.d_img, n_reg: m.n_reg, s: 1, d_cond: 1 };
    let batch = (0..m.count)
        .map(|_| TargetEmbedding::read_record(&mut r, &cfg))
        .collect::<Result<Vec<_>>>()?;
    binio::expect_eof(&mut r)?;
    Ok(batch)
}
