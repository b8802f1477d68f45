//! Procedural scenes and the frozen teachers derived from them.
//!
//! A [`Scene`] is a handful of coloured shapes on the patch grid. From it we
//! derive deterministically both a prompt (token ids fed through the frozen
//! [`FrozenPromptEncoder`]) and a ground-truth [`TargetEmbedding`] (via the
//! frozen [`FrozenTargetEncoder`]). Only the prompt encoder's soft tokens are
//! ever trained.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::binio;
use crate::embedspace::{self, ConditioningSequence, SpaceConfig, TargetEmbedding};
use crate::error::{Error, Result};

pub const DEFAULT_GLOBAL_SEED: u64 = 0xD1CE;

pub const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
];

pub const MAX_OBJECTS: usize = 4;
pub const MAX_SIZE: usize = 3;
pub const VOCAB_SIZE: usize = 64;
pub const MAX_PROMPT_LEN: usize = 48;
/// Largest grid side that the row/column token ranges can address.
pub const MAX_GRID_SIDE: usize = 16;

// Vocabulary layout.
pub const TOK_PAD: u32 = 0;
pub const TOK_BOS: u32 = 1;
pub const TOK_EOS: u32 = 2;
pub const TOK_SEP: u32 = 3;
const TOK_SHAPE: u32 = 4;
const TOK_COLOR: u32 = 7;
const TOK_SIZE: u32 = 15;
const TOK_ROW: u32 = 18;
const TOK_COL: u32 = TOK_ROW + MAX_GRID_SIDE as u32;

/// SplitMix64 step, used to derive independent sub-seeds from one global seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Whether cell `(dr, dc)` of a `size`-sided bounding box is covered.
    fn covers(self, size: usize, dr: usize, dc: usize) -> bool {
        match self {
            Shape::Square => true,
            // Inscribed disk at cell resolution: only boxes of side 3+ lose their corners.
            Shape::Circle => !(size >= 3 && (dr == 0 || dr == size - 1) && (dc == 0 || dc == size - 1)),
            // Lower-left triangle including the diagonal.
            Shape::Triangle => dc <= dr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: usize,
    /// Top-left cell of the bounding box.
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Cluttered scenes with one to four objects anywhere on the grid.
    Pretrain,
    /// A single object centred on the grid.
    Finetune,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Pretrain => "pretrain",
            Flavor::Finetune => "finetune",
        })
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Flavor::Pretrain),
            "finetune" => Ok(Flavor::Finetune),
            other => Err(Error::Config(format!("unknown flavor {other:?} (pretrain|finetune)"))),
        }
    }
}

/// Rejects grids whose positions cannot be spelled with the prompt vocabulary.
pub fn check_space(cfg: &SpaceConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.h > MAX_GRID_SIDE || cfg.w > MAX_GRID_SIDE {
        return Err(Error::Config(format!(
            "synthetic scenes support grids up to {MAX_GRID_SIDE}x{MAX_GRID_SIDE}, got {}x{}",
            cfg.h, cfg.w
        )));
    }
    Ok(())
}

/// A pretrain-flavoured scene.
pub fn gen_scene(seed: u64, cfg: &SpaceConfig) -> Scene {
    gen_scene_flavored(seed, Flavor::Pretrain, cfg)
}

pub fn gen_scene_flavored(seed: u64, flavor: Flavor, cfg: &SpaceConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = |rng: &mut ChaCha8Rng| {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = rng.random_range(0..PALETTE.len());
        let size = rng.random_range(1..=MAX_SIZE);
        (shape, color, size)
    };
    let objects = match flavor {
        Flavor::Pretrain => {
            let n = rng.random_range(1..=MAX_OBJECTS);
            (0..n)
                .map(|_| {
                    let (shape, color, size) = object(&mut rng);
                    let row = rng.random_range(0..cfg.h);
                    let col = rng.random_range(0..cfg.w);
                    SceneObject { shape, color, row, col, size }
                })
                .collect()
        }
        Flavor::Finetune => {
            let (shape, color, size) = object(&mut rng);
            let row = cfg.h.saturating_sub(size) / 2;
            let col = cfg.w.saturating_sub(size) / 2;
            vec![SceneObject { shape, color, row, col, size }]
        }
    };
    Scene { objects, seed }
}

/// RGB grid `[h, w, 3]`; later objects paint over earlier ones.
pub fn rasterize(sc: &Scene, cfg: &SpaceConfig) -> Array3<f32> {
    let mut rgb = Array3::<f32>::zeros((cfg.h, cfg.w, 3));
    for o in &sc.objects {
        for dr in 0..o.size {
            for dc in 0..o.size {
                let (r, c) = (o.row + dr, o.col + dc);
                if r < cfg.h && c < cfg.w && o.shape.covers(o.size, dr, dc) {
                    for (k, &v) in PALETTE[o.color].iter().enumerate() {
                        rgb[[r, c, k]] = v;
                    }
                }
            }
        }
    }
    rgb
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    pub tokens: Vec<u32>,
}

/// `BOS (shape color size row col) [SEP ...] EOS`.
pub fn scene_to_prompt(sc: &Scene) -> PromptTokens {
    let mut tokens = vec![TOK_BOS];
    for (i, o) in sc.objects.iter().enumerate() {
        if i > 0 {
            tokens.push(TOK_SEP);
        }
        debug_assert!(o.row < MAX_GRID_SIDE && o.col < MAX_GRID_SIDE);
        tokens.extend([
            TOK_SHAPE + o.shape as u32,
            TOK_COLOR + o.color as u32,
            TOK_SIZE + (o.size - 1) as u32,
            TOK_ROW + o.row as u32,
            TOK_COL + o.col as u32,
        ]);
    }
    tokens.push(TOK_EOS);
    PromptTokens { tokens }
}

impl PromptTokens {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::Range(format!("prompt length {} not in 1..={MAX_PROMPT_LEN}", self.tokens.len())));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Range(format!("token id {t} outside vocabulary of {VOCAB_SIZE}")));
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f32, _>(StandardNormal) * std)
}

/// Number of pooled statistics fed to each register affine.
pub const N_STATS: usize = 8;
const CALIBRATION_SCENES: usize = 512;

/// Deterministic stand-in for a pretrained image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargetEncoder {
    cfg: SpaceConfig,
    /// `[3, d_img]`
    patch_w: Array2<f32>,
    patch_b: Array1<f32>,
    /// `[h, w, d_img]`
    poscode: Array3<f32>,
    /// `[N_STATS, d_img]`, applied to the standardised statistics.
    cls_w: Array2<f32>,
    /// `[h * w * 3, d_img]`, a full-image projection that separates scenes
    /// whose pooled statistics coincide.
    cls_img_w: Array2<f32>,
    cls_img_mean: Array1<f32>,
    cls_img_std: Array1<f32>,
    cls_b: Array1<f32>,
    /// One `[N_STATS, d_img]` map per register.
    reg_w: Vec<Array2<f32>>,
    reg_b: Array2<f32>,
    /// Standardisation of the pooled statistics, fixed at construction.
    stat_mean: [f32; N_STATS],
    stat_std: [f32; N_STATS],
}

impl FrozenTargetEncoder {
    pub fn new(cfg: &SpaceConfig, global_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_img;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(global_seed, 0x7A46));
        let patch_w = normal_matrix(&mut rng, 3, d, 1.0 / 3f32.sqrt());
        let patch_b = normal_matrix(&mut rng, 1, d, 0.1).row(0).to_owned();
        let poscode = Array3::from_shape_fn((cfg.h, cfg.w, d), |_| rng.sample::<f32, _>(StandardNormal) * POSCODE_STD);
        let cls_w = normal_matrix(&mut rng, N_STATS, d, 1.0 / (N_STATS as f32).sqrt());
        let cls_img_w = normal_matrix(&mut rng, cfg.h * cfg.w * 3, d, 1.0);
        let cls_b = normal_matrix(&mut rng, 1, d, 0.1).row(0).to_owned();
        let reg_w = (0..cfg.n_reg)
            .map(|_| normal_matrix(&mut rng, N_STATS, d, 1.0 / (N_STATS as f32).sqrt()))
            .collect();
        let reg_b = normal_matrix(&mut rng, cfg.n_reg, d, 0.1);

        let cal_seed = derive_seed(global_seed, 0xCA1B);
        let mut stats = Array2::<f32>::zeros((CALIBRATION_SCENES, N_STATS));
        let mut proj = Array2::<f32>::zeros((CALIBRATION_SCENES, d));
        for i in 0..CALIBRATION_SCENES {
            let sc = gen_scene(derive_seed(cal_seed, i as u64), cfg);
            let rgb = rasterize(&sc, cfg);
            stats.row_mut(i).assign(&Array1::from_vec(pooled_stats(&sc, &rgb).to_vec()));
            proj.row_mut(i).assign(&image_projection(&rgb, &cls_img_w));
        }
        let (mean, std) = column_moments(&stats);
        let stat_mean = std::array::from_fn(|k| mean[k]);
        let stat_std = std::array::from_fn(|k| std[k]);
        let (cls_img_mean, cls_img_std) = column_moments(&proj);
        Ok(Self {
            cfg: *cfg,
            patch_w,
            patch_b,
            poscode,
            cls_w,
            cls_img_w,
            cls_img_mean,
            cls_img_std,
            cls_b,
            reg_w,
            reg_b,
            stat_mean,
            stat_std,
        })
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.cfg
    }

    pub fn encode_target(&self, sc: &Scene) -> TargetEmbedding {
        let cfg = &self.cfg;
        let rgb = rasterize(sc, cfg);
        let mut patches = self.poscode.clone();
        for i in 0..cfg.h {
            for j in 0..cfg.w {
                let c = rgb.slice(s![i, j, ..]);
                let mut cell = patches.slice_mut(s![i, j, ..]);
                cell += &self.patch_b;
                cell += &c.dot(&self.patch_w);
            }
        }
        let st = pooled_stats(sc, &rgb);
        let z: Vec<f32> = (0..N_STATS).map(|k| (st[k] - self.stat_mean[k]) / self.stat_std[k]).collect();
        let z = Array1::from_vec(z);
        let img = (image_projection(&rgb, &self.cls_img_w) - &self.cls_img_mean) / &self.cls_img_std;
        let cls = z.dot(&self.cls_w) + img * CLS_IMAGE_WEIGHT + &self.cls_b;
        let mut registers = self.reg_b.clone();
        for (r, w) in self.reg_w.iter().enumerate() {
            let mut row = registers.row_mut(r);
            row += &z.dot(w);
        }
        TargetEmbedding { patches, cls, registers }
    }
}

const CLS_IMAGE_WEIGHT: f32 = 0.5;
const POSCODE_STD: f32 = 0.1;

fn image_projection(rgb: &Array3<f32>, w: &Array2<f32>) -> Array1<f32> {
    let flat = rgb.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    ndarray::ArrayView1::from(flat).dot(w)
}

/// Per-column mean and standard deviation (floored) in f64.
fn column_moments(x: &Array2<f32>) -> (Array1<f32>, Array1<f32>) {
    let n = x.nrows() as f64;
    let mut mean = Array1::<f32>::zeros(x.ncols());
    let mut std = Array1::<f32>::zeros(x.ncols());
    for (k, col) in x.columns().into_iter().enumerate() {
        let m = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = col.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / n;
        mean[k] = m as f32;
        std[k] = var.sqrt().max(1e-3) as f32;
    }
    (mean, std)
}

/// `[mean rgb, max rgb, occupancy fraction, object count / 4]`.
fn pooled_stats(sc: &Scene, rgb: &Array3<f32>) -> [f32; N_STATS] {
    let (h, w, _) = rgb.dim();
    let cells = (h * w) as f32;
    let mut out = [0f32; N_STATS];
    let mut occupied = 0usize;
    for i in 0..h {
        for j in 0..w {
            let c = rgb.slice(s![i, j, ..]);
            if c.iter().any(|&v| v != 0.0) {
                occupied += 1;
            }
            for k in 0..3 {
                out[k] += c[k];
                out[3 + k] = out[3 + k].max(c[k]);
            }
        }
    }
    for v in &mut out[..3] {
        *v /= cells;
    }
    out[6] = occupied as f32 / cells;
    out[7] = sc.objects.len() as f32 / MAX_OBJECTS as f32;
    out
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    w1: Array2<f32>,
    w2: Array2<f32>,
}

/// Frozen stand-in for a decoder-only language backbone, with `s` trainable
/// soft tokens appended to every prompt. Attention is causal, so soft-token
/// states read the whole prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPromptEncoder {
    d_cond: usize,
    n_heads: usize,
    /// `[VOCAB_SIZE, d_cond]`
    token_embedding: Array2<f32>,
    /// Sinusoidal, `[MAX_PROMPT_LEN + s, d_cond]`.
    position: Array2<f32>,
    blocks: Vec<EncoderBlock>,
    /// `[s, d_cond]`, the only trainable part.
    pub soft_tokens: Array2<f32>,
}

pub const PROMPT_ENCODER_BLOCKS: usize = 2;
const PROMPT_MLP_RATIO: usize = 2;
const LN_EPS: f64 = 1e-6;

impl FrozenPromptEncoder {
    pub fn new(cfg: &SpaceConfig, global_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_cond;
        let n_heads = [4, 2, 1].into_iter().find(|h| d % h == 0).unwrap_or(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(global_seed, 0x50E7));
        let token_embedding = normal_matrix(&mut rng, VOCAB_SIZE, d, 1.0);
        let position = sinusoidal_positions(MAX_PROMPT_LEN + cfg.s, d);
        let std_in = 1.0 / (d as f32).sqrt();
        let std_hidden = 1.0 / ((PROMPT_MLP_RATIO * d) as f32).sqrt();
        let blocks = (0..PROMPT_ENCODER_BLOCKS)
            .map(|_| EncoderBlock {
                wq: normal_matrix(&mut rng, d, d, std_in),
                wk: normal_matrix(&mut rng, d, d, std_in),
                wv: normal_matrix(&mut rng, d, d, std_in),
                wo: normal_matrix(&mut rng, d, d, std_in),
                w1: normal_matrix(&mut rng, d, PROMPT_MLP_RATIO * d, std_in),
                w2: normal_matrix(&mut rng, PROMPT_MLP_RATIO * d, d, std_hidden),
            })
            .collect();
        let soft_tokens = normal_matrix(&mut rng, cfg.s, d, 1.0);
        Ok(Self { d_cond: d, n_heads, token_embedding, position, blocks, soft_tokens })
    }

    pub fn n_soft(&self) -> usize {
        self.soft_tokens.nrows()
    }

    pub fn d_cond(&self) -> usize {
        self.d_cond
    }

    /// All weights except the soft tokens, in a fixed order. Used to assert
    /// that training leaves them untouched.
    pub fn frozen_weights(&self) -> Vec<&Array2<f32>> {
        let mut out = vec![&self.token_embedding, &self.position];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]);
        }
        out
    }

    /// Builds the encoder for a batch of prompts on `tape`. `soft` is the
    /// `[s, d_cond]` soft-token node (a param when training). Returns the
    /// stacked conditioning `[B * s, d_cond]`.
    pub fn encode_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, prompts: &[&PromptTokens], soft: Var) -> Var {
        let s = self.n_soft();
        let d = self.d_cond;
        let mut parts = Vec::with_capacity(prompts.len() * 2);
        let mut groups = Vec::with_capacity(prompts.len());
        let mut row = 0;
        for p in prompts {
            let l = p.tokens.len();
            let mut emb = Array2::<T>::zeros((l, d));
            for (r, &t) in p.tokens.iter().enumerate() {
                let e = self.token_embedding.row(t as usize);
                let pe = self.position.row(r);
                for c in 0..d {
                    emb[[r, c]] = T::lit(f64::from(e[c] + pe[c]));
                }
            }
            let soft_pos = self.position.slice(s![l..l + s, ..]).mapv(|v| T::lit(f64::from(v)));
            parts.push(tape.constant(emb));
            let sp = tape.constant(soft_pos);
            parts.push(tape.add(soft, sp));
            groups.push((row, l + s));
            row += l + s;
        }
        let groups = Arc::new(groups);
        let mut x = tape.concat_rows(&parts);
        let cast = |a: &Array2<f32>| a.mapv(|v| T::lit(f64::from(v)));
        for b in &self.blocks {
            let h = tape.layer_norm(x, T::lit(LN_EPS));
            let (wq, wk, wv, wo) =
                (tape.constant(cast(&b.wq)), tape.constant(cast(&b.wk)), tape.constant(cast(&b.wv)), tape.constant(cast(&b.wo)));
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let a = tape.attention(q, k, v, groups.clone(), groups.clone(), self.n_heads, true);
            let a = tape.matmul(a, wo);
            x = tape.add(x, a);
            let h = tape.layer_norm(x, T::lit(LN_EPS));
            let (w1, w2) = (tape.constant(cast(&b.w1)), tape.constant(cast(&b.w2)));
            let m = tape.matmul(h, w1);
            let m = tape.gelu(m);
            let m = tape.matmul(m, w2);
            x = tape.add(x, m);
        }
        let x = tape.layer_norm(x, T::lit(LN_EPS));
        let outs: Vec<Var> = groups.iter().map(|&(start, len)| tape.slice_rows(x, start + len - s, s)).collect();
        tape.concat_rows(&outs)
    }
}

fn sinusoidal_positions(n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |(p, c)| {
        let k = (c / 2) as f64;
        let freq = (-(10_000f64.ln()) * 2.0 * k / d as f64).exp();
        let a = p as f64 * freq;
        (if c % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

/// Hidden states at the soft-token positions for one prompt.
pub fn encode_prompt(p: &PromptTokens, enc: &FrozenPromptEncoder) -> ConditioningSequence {
    let mut tape = Tape::<f32>::new();
    let soft = tape.constant(enc.soft_tokens.clone());
    let out = enc.encode_on_tape(&mut tape, &[p], soft);
    ConditioningSequence { latents: tape.value(out).clone() }
}

pub const DATASET_MAGIC: &[u8; 4] = b"GAPD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub tokens: PromptTokens,
    pub target: TargetEmbedding,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cfg: SpaceConfig,
    pub flavor: Flavor,
    pub teacher_seed: u64,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    n: usize,
    cfg: SpaceConfig,
    flavor: Flavor,
    teacher_seed: u64,
}

impl Dataset {
    /// `n` records whose scene seeds are drawn from `seed`.
    pub fn generate(n: usize, seed: u64, flavor: Flavor, cfg: &SpaceConfig, teacher_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Range("dataset must contain at least one record".into()));
        }
        check_space(cfg)?;
        let teacher = FrozenTargetEncoder::new(cfg, teacher_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| {
                let scene_seed = rng.next_u64();
                let sc = gen_scene_flavored(scene_seed, flavor, cfg);
                DatasetRecord { tokens: scene_to_prompt(&sc), target: teacher.encode_target(&sc), scene_seed }
            })
            .collect();
        Ok(Self { cfg: *cfg, flavor, teacher_seed, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = DatasetManifest { n: self.records.len(), cfg: self.cfg, flavor: self.flavor, teacher_seed: self.teacher_seed };
        let mut out = BufWriter::new(File::create(path)?);
        binio::write_header(&mut out, DATASET_MAGIC, DATASET_VERSION, &manifest)?;
        for r in &self.records {
            embedspace::validate(&r.target, &self.cfg)?;
            let len = u32::try_from(r.tokens.tokens.len()).map_err(|_| Error::format("prompt too long"))?;
            out.write_all(&len.to_le_bytes())?;
            for t in &r.tokens.tokens {
                out.write_all(&t.to_le_bytes())?;
            }
            embedspace::write_embedding_record(&mut out, &r.target)?;
            out.write_all(&r.scene_seed.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let m: DatasetManifest = binio::read_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
        m.cfg.validate().map_err(|e| Error::format(e.to_string()))?;
        let mut records = Vec::with_capacity(m.n.min(1 << 20));
        for _ in 0..m.n {
            let len = binio::read_u32(&mut r)? as usize;
            if len > MAX_PROMPT_LEN {
                return Err(Error::format(format!("prompt length {len} exceeds {MAX_PROMPT_LEN}")));
            }
            let tokens = (0..len).map(|_| binio::read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let target = embedspace::read_embedding_record(&mut r, &m.cfg)?;
            let scene_seed = binio::read_u64(&mut r)?;
            records.push(DatasetRecord { tokens: PromptTokens { tokens }, target, scene_seed });
        }
        binio::expect_eof(&mut r)?;
        Ok(Self { cfg: m.cfg, flavor: m.flavor, teacher_seed: m.teacher_seed, records })
    }
}

/// Generates a dataset and writes it to `path`.
pub fn gen_dataset(
    n: usize,
    seed: u64,
    flavor: Flavor,
    cfg: &SpaceConfig,
    teacher_seed: u64,
    path: impl AsRef<Path>,
) -> Result<Dataset> {
    let ds = Dataset::generate(n, seed, flavor, cfg, teacher_seed)?;
    ds.write(path)?;
    Ok(ds)
}
