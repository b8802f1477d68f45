//! Conditional diffusion transformer predicting velocities for all three
//! components of the target space at once.
//!
//! Token stream per sample is `[CLS, registers.., patches row-major]`, one
//! token per grid cell. Every block runs modulated self-attention over the
//! whole stream (2D RoPE on patches), cross-attention into the conditioning
//! sequence, then a modulated feed-forward, all with timestep-driven
//! scale/shift/gate. A batch is stacked row-wise on one tape with attention
//! groups keeping samples apart.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::embedspace::{ConditioningSequence, SpaceConfig, TargetEmbedding};
use crate::error::{Error, Result};
use crate::hybridpos::{add_global_pos, GlobalPosEmbeddings, RopeTable, DEFAULT_ROPE_BASE};
use crate::rectflow::VelocityModel;
use crate::synthworld::{derive_seed, FrozenPromptEncoder, PromptTokens};

pub const TIME_FREQ_DIM: usize = 64;
const TIME_SCALE: f64 = 1000.0;
const TIME_MAX_PERIOD: f64 = 10_000.0;
const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-6;
/// Modulation chunks per block: shift/scale/gate for attention, cross-attention and MLP.
const BLOCK_MOD: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_cond: usize,
    pub space: SpaceConfig,
}

impl DitConfig {
    pub fn for_space(space: SpaceConfig) -> Self {
        Self { d_model: 128, n_blocks: 4, n_heads: 4, d_cond: space.d_cond, space }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 {
            return Err(Error::Config(format!("d_model, n_heads and n_blocks must be positive ({self:?})")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::OddHeadDim(self.head_dim()));
        }
        if self.d_cond != self.space.d_cond {
            return Err(Error::Config(format!("d_cond {} disagrees with space d_cond {}", self.d_cond, self.space.d_cond)));
        }
        Ok(())
    }
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::for_space(SpaceConfig::default())
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    cq: usize,
    ck: usize,
    cv: usize,
    co: usize,
    mlp1: Lin,
    mlp2: Lin,
    modulation: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_in: Lin,
    cls_in: Lin,
    reg_in: Lin,
    global_pos: usize,
    time1: Lin,
    time2: Lin,
    blocks: Vec<BlockLayout>,
    final_mod: Lin,
    patch_out: Lin,
    cls_out: Lin,
    reg_out: Lin,
}

/// All trainable DiT weights as named `[rows, cols]` tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct DitParams {
    cfg: DitConfig,
    names: Vec<String>,
    tensors: Vec<Array2<f32>>,
    layout: Layout,
}

impl PartialEq for DitParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.names == other.names && self.tensors == other.tensors
    }
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Array2<f32>>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Array2<f32>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let std = 1.0 / (rows as f32).sqrt();
        let rng = &mut *self.rng;
        let t = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f32, _>(StandardNormal) * std);
        self.push(name, t)
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Lin {
        let w = self.weight(format!("{name}.w"), rows, cols);
        let b = self.push(format!("{name}.b"), Array2::zeros((1, cols)));
        Lin { w, b }
    }

    fn zero_linear(&mut self, name: &str, rows: usize, cols: usize) -> Lin {
        let w = self.push(format!("{name}.w"), Array2::zeros((rows, cols)));
        let b = self.push(format!("{name}.b"), Array2::zeros((1, cols)));
        Lin { w, b }
    }
}

impl DitParams {
    pub fn init(cfg: &DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, di, dc) = (cfg.d_model, cfg.space.d_img, cfg.d_cond);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD17));
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng: &mut rng };
        let patch_in = b.linear("dit.patch_in", di, d);
        let cls_in = b.linear("dit.cls_in", di, d);
        let reg_in = b.linear("dit.reg_in", di, d);
        let table = GlobalPosEmbeddings::init(cfg.space.n_reg, d, b.rng).table;
        let global_pos = b.push("dit.global_pos".into(), table);
        let time1 = b.linear("dit.time.mlp1", TIME_FREQ_DIM, d);
        let time2 = b.linear("dit.time.mlp2", d, d);
        let blocks = (0..cfg.n_blocks)
            .map(|k| {
                let p = format!("dit.block{k}");
                BlockLayout {
                    q: b.weight(format!("{p}.selfattn.wq"), d, d),
                    k: b.weight(format!("{p}.selfattn.wk"), d, d),
                    v: b.weight(format!("{p}.selfattn.wv"), d, d),
                    o: b.weight(format!("{p}.selfattn.wo"), d, d),
                    cq: b.weight(format!("{p}.crossattn.wq"), d, d),
                    ck: b.weight(format!("{p}.crossattn.wk"), dc, d),
                    cv: b.weight(format!("{p}.crossattn.wv"), dc, d),
                    co: b.weight(format!("{p}.crossattn.wo"), d, d),
                    mlp1: b.linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d),
                    mlp2: b.linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d),
                    modulation: b.linear(&format!("{p}.modulation"), d, BLOCK_MOD * d),
                }
            })
            .collect();
        let final_mod = b.linear("dit.final.modulation", d, 2 * d);
        let patch_out = b.zero_linear("dit.patch_out", d, di);
        let cls_out = b.zero_linear("dit.cls_out", d, di);
        let reg_out = b.zero_linear("dit.reg_out", d, di);
        let layout = Layout { patch_in, cls_in, reg_in, global_pos, time1, time2, blocks, final_mod, patch_out, cls_out, reg_out };
        let Builder { names, tensors, .. } = b;
        Ok(Self { cfg: *cfg, names, tensors, layout })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f32>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn global_pos(&self) -> GlobalPosEmbeddings {
        GlobalPosEmbeddings { table: self.tensors[self.layout.global_pos].clone() }
    }

    /// Names of the zero-initialised output heads.
    pub fn head_names(&self) -> Vec<&str> {
        let l = &self.layout;
        [l.patch_out, l.cls_out, l.reg_out].iter().flat_map(|h| [h.w, h.b]).map(|i| self.names[i].as_str()).collect()
    }

    /// Replaces every tensor from `named`, which must cover exactly this layout.
    pub fn load_named(&mut self, named: &HashMap<String, Array2<f32>>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(Error::format(format!("expected {} dit tensors, got {}", self.names.len(), named.len())));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = named.get(name).ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
            if src.dim() != t.dim() {
                return Err(Error::format(format!("tensor {name} has shape {:?}, expected {:?}", src.dim(), t.dim())));
            }
            t.assign(src);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Puts every tensor on `tape`, as params when `trainable`.
    pub fn to_tape<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let v = t.mapv(|x| T::lit(f64::from(x)));
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }
}

/// Sinusoidal features of `t * 1000`, `[TIME_FREQ_DIM]`.
pub fn timestep_features(t: f64) -> Array1<f64> {
    let half = TIME_FREQ_DIM / 2;
    let x = t * TIME_SCALE;
    Array1::from_shape_fn(TIME_FREQ_DIM, |i| {
        let k = i % half;
        let freq = (-(TIME_MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        if i < half {
            (x * freq).cos()
        } else {
            (x * freq).sin()
        }
    })
}

/// Timestep embedding `[d_model]`: sinusoidal features through a two-layer SiLU MLP.
pub fn timestep_embed(t: f64, p: &DitParams) -> Array1<f32> {
    let mut tape = Tape::<f32>::new();
    let vars = p.to_tape(&mut tape, false);
    let e = time_embedding_on_tape(&mut tape, &vars, &p.layout, &[t]);
    tape.value(e).row(0).to_owned()
}

fn time_embedding_on_tape<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], l: &Layout, ts: &[f64]) -> Var {
    let mut feats = Array2::<T>::zeros((ts.len(), TIME_FREQ_DIM));
    for (mut row, &t) in feats.rows_mut().into_iter().zip(ts) {
        row.assign(&timestep_features(t).mapv(T::lit));
    }
    let f = tape.constant(feats);
    let h = tape.linear(f, vars[l.time1.w], vars[l.time1.b]);
    let h = tape.silu(h);
    tape.linear(h, vars[l.time2.w], vars[l.time2.b])
}

/// Token stream for one sample, `[1 + n_reg + h*w, d_model]`.
pub fn embed_inputs(x_t: &TargetEmbedding, p: &DitParams) -> Result<Array2<f32>> {
    check_triple(x_t, &p.cfg.space)?;
    let l = &p.layout;
    let t = &p.tensors;
    let lin = |x: ArrayView2<f32>, lin: Lin| x.dot(&t[lin.w]) + &t[lin.b];
    let cls = lin(x_t.cls.view().insert_axis(ndarray::Axis(0)), l.cls_in);
    let reg = lin(x_t.registers.view(), l.reg_in);
    let globals = ndarray::concatenate![ndarray::Axis(0), cls, reg];
    let globals = add_global_pos(globals.view(), &p.global_pos())?;
    let patches = lin(x_t.patch_rows().view(), l.patch_in);
    Ok(ndarray::concatenate![ndarray::Axis(0), globals, patches])
}

fn check_triple(x: &TargetEmbedding, space: &SpaceConfig) -> Result<()> {
    let want = (space.h, space.w, space.d_img, space.n_reg);
    if x.dims() != want || !x.same_shape(&TargetEmbedding::zeros(space)) {
        return Err(Error::shape(format!("noisy triple has dims {:?}, model expects {want:?}", x.dims())));
    }
    Ok(())
}

/// Velocity nodes for a stacked batch.
#[derive(Debug, Clone, Copy)]
pub struct VelocityVars {
    /// `[B * h * w, d_img]`
    pub patches: Var,
    /// `[B, d_img]`
    pub cls: Var,
    /// `[B * n_reg, d_img]`
    pub registers: Var,
}

/// Stacks a batch of triples into the three row-major input matrices.
pub fn stack_inputs<T: Scalar>(xs: &[&TargetEmbedding]) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (h, w, d, n_reg) = xs[0].dims();
    let mut patches = Array2::<T>::zeros((xs.len() * h * w, d));
    let mut cls = Array2::<T>::zeros((xs.len(), d));
    let mut regs = Array2::<T>::zeros((xs.len() * n_reg, d));
    for (b, x) in xs.iter().enumerate() {
        for (dst, &src) in patches.slice_mut(ndarray::s![b * h * w..(b + 1) * h * w, ..]).iter_mut().zip(x.patches.iter()) {
            *dst = T::lit(f64::from(src));
        }
        cls.row_mut(b).assign(&x.cls.mapv(|v| T::lit(f64::from(v))));
        regs.slice_mut(ndarray::s![b * n_reg..(b + 1) * n_reg, ..]).assign(&x.registers.mapv(|v| T::lit(f64::from(v))));
    }
    (patches, cls, regs)
}

impl DitParams {
    /// Batched forward pass on `tape`. `vars` come from [`to_tape`](Self::to_tape),
    /// `cond` is the stacked conditioning `[B * s, d_cond]`.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        xs: &[&TargetEmbedding],
        ts: &[f64],
        cond: Var,
    ) -> Result<VelocityVars> {
        let cfg = &self.cfg;
        let sp = &cfg.space;
        let bsz = xs.len();
        if bsz == 0 || ts.len() != bsz {
            return Err(Error::shape(format!("{bsz} inputs with {} times", ts.len())));
        }
        for x in xs {
            check_triple(x, sp)?;
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Range(format!("t = {t} outside [0, 1]")));
        }
        let s = tape.value(cond).nrows() / bsz;
        if tape.value(cond).dim() != (bsz * sp.s, cfg.d_cond) || s == 0 {
            return Err(Error::shape(format!(
                "conditioning is {:?}, expected {:?}",
                tape.value(cond).dim(),
                (bsz * sp.s, cfg.d_cond)
            )));
        }
        let l = &self.layout;
        let (d, n_g, n_p) = (cfg.d_model, 1 + sp.n_reg, sp.n_patches());
        let n_tok = n_g + n_p;

        let (xp, xc, xr) = stack_inputs::<T>(xs);
        let (xp, xc, xr) = (tape.constant(xp), tape.constant(xc), tape.constant(xr));
        let hp = tape.linear(xp, vars[l.patch_in.w], vars[l.patch_in.b]);
        let hc = tape.linear(xc, vars[l.cls_in.w], vars[l.cls_in.b]);
        let hr = tape.linear(xr, vars[l.reg_in.w], vars[l.reg_in.b]);
        let mut parts = Vec::with_capacity(3 * bsz);
        for b in 0..bsz {
            parts.push(tape.slice_rows(hc, b, 1));
            if sp.n_reg > 0 {
                parts.push(tape.slice_rows(hr, b * sp.n_reg, sp.n_reg));
            }
        }
        let globals = tape.concat_rows(&parts);
        let globals = tape.add_tiled(globals, vars[l.global_pos]);
        let mut parts = Vec::with_capacity(2 * bsz);
        for b in 0..bsz {
            parts.push(tape.slice_rows(globals, b * n_g, n_g));
            parts.push(tape.slice_rows(hp, b * n_p, n_p));
        }
        let mut x = tape.concat_rows(&parts);

        let temb = time_embedding_on_tape(tape, vars, l, ts);
        let c_act = tape.silu(temb);

        let groups = Arc::new((0..bsz).map(|b| (b * n_tok, n_tok)).collect::<Vec<_>>());
        let cond_groups = Arc::new((0..bsz).map(|b| (b * sp.s, sp.s)).collect::<Vec<_>>());
        let positions: Vec<Option<(usize, usize)>> = (0..bsz)
            .flat_map(|_| {
                std::iter::repeat_n(None, n_g).chain((0..sp.h).flat_map(|i| (0..sp.w).map(move |j| Some((i, j)))))
            })
            .collect();
        let rope = RopeTable::new(cfg.head_dim(), sp.h.max(sp.w), DEFAULT_ROPE_BASE)?.rotary_rows_arc::<T>(&positions)?;
        let eps = T::lit(LN_EPS);

        for blk in &l.blocks {
            let m = tape.linear(c_act, vars[blk.modulation.w], vars[blk.modulation.b]);
            let chunk: Vec<Var> = (0..BLOCK_MOD).map(|i| tape.slice_cols(m, i * d, d)).collect();

            let h = tape.layer_norm(x, eps);
            let h = tape.modulate(h, chunk[1], chunk[0], n_tok);
            let q = tape.matmul(h, vars[blk.q]);
            let k = tape.matmul(h, vars[blk.k]);
            let v = tape.matmul(h, vars[blk.v]);
            let q = tape.rope(q, rope.clone(), cfg.head_dim());
            let k = tape.rope(k, rope.clone(), cfg.head_dim());
            let a = tape.attention(q, k, v, groups.clone(), groups.clone(), cfg.n_heads, false);
            let a = tape.matmul(a, vars[blk.o]);
            x = tape.gated_residual(x, a, chunk[2], n_tok);

            let h = tape.layer_norm(x, eps);
            let h = tape.modulate(h, chunk[4], chunk[3], n_tok);
            let q = tape.matmul(h, vars[blk.cq]);
            let k = tape.matmul(cond, vars[blk.ck]);
            let v = tape.matmul(cond, vars[blk.cv]);
            let a = tape.attention(q, k, v, groups.clone(), cond_groups.clone(), cfg.n_heads, false);
            let a = tape.matmul(a, vars[blk.co]);
            x = tape.gated_residual(x, a, chunk[5], n_tok);

            let h = tape.layer_norm(x, eps);
            let h = tape.modulate(h, chunk[7], chunk[6], n_tok);
            let h = tape.linear(h, vars[blk.mlp1.w], vars[blk.mlp1.b]);
            let h = tape.gelu(h);
            let h = tape.linear(h, vars[blk.mlp2.w], vars[blk.mlp2.b]);
            x = tape.gated_residual(x, h, chunk[8], n_tok);
        }

        let fm = tape.linear(c_act, vars[l.final_mod.w], vars[l.final_mod.b]);
        let (shift, scale) = (tape.slice_cols(fm, 0, d), tape.slice_cols(fm, d, d));
        let h = tape.layer_norm(x, eps);
        let h = tape.modulate(h, scale, shift, n_tok);

        let pick = |tape: &mut Tape<T>, off: usize, len: usize| {
            let rows: Vec<Var> = (0..bsz).map(|b| tape.slice_rows(h, b * n_tok + off, len)).collect();
            tape.concat_rows(&rows)
        };
        let hc = pick(tape, 0, 1);
        let hp = pick(tape, n_g, n_p);
        let cls = tape.linear(hc, vars[l.cls_out.w], vars[l.cls_out.b]);
        let patches = tape.linear(hp, vars[l.patch_out.w], vars[l.patch_out.b]);
        let registers = if sp.n_reg > 0 {
            let hr = pick(tape, 1, sp.n_reg);
            tape.linear(hr, vars[l.reg_out.w], vars[l.reg_out.b])
        } else {
            tape.constant(Array2::zeros((0, sp.d_img)))
        };
        Ok(VelocityVars { patches, cls, registers })
    }

    /// Splits stacked velocity values back into one triple per sample.
    pub fn unstack<T: Scalar>(&self, tape: &Tape<T>, v: &VelocityVars, bsz: usize) -> Result<Vec<TargetEmbedding>> {
        let sp = &self.cfg.space;
        let (n_p, n_r) = (sp.n_patches(), sp.n_reg);
        let to32 = |a: ndarray::ArrayView2<T>| a.mapv(|x| x.to_f32().unwrap_or(f32::NAN));
        let (p, c, r) = (tape.value(v.patches), tape.value(v.cls), tape.value(v.registers));
        (0..bsz)
            .map(|b| {
                TargetEmbedding::from_rows(
                    sp.h,
                    sp.w,
                    to32(p.slice(ndarray::s![b * n_p..(b + 1) * n_p, ..])),
                    to32(c.slice(ndarray::s![b..b + 1, ..])).row(0).to_owned(),
                    to32(r.slice(ndarray::s![b * n_r..(b + 1) * n_r, ..])),
                )
            })
            .collect()
    }

    /// Velocities for a batch of noisy triples with their conditionings.
    pub fn forward_batch(&self, xs: &[&TargetEmbedding], ts: &[f64], cs: &[&ConditioningSequence]) -> Result<Vec<TargetEmbedding>> {
        if cs.len() != xs.len() {
            return Err(Error::shape(format!("{} inputs with {} conditionings", xs.len(), cs.len())));
        }
        for c in cs {
            c.validate(&self.cfg.space)?;
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.to_tape(&mut tape, false);
        let conds: Vec<Var> = cs.iter().map(|c| tape.constant(c.latents.clone())).collect();
        let cond = tape.concat_rows(&conds);
        let v = self.forward_on_tape(&mut tape, &vars, xs, ts, cond)?;
        let out = self.unstack(&tape, &v, xs.len())?;
        if out.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("velocity prediction".into()));
        }
        Ok(out)
    }
}

/// One velocity prediction.
pub fn forward(x_t: &TargetEmbedding, t: f64, c: &ConditioningSequence, p: &DitParams) -> Result<TargetEmbedding> {
    Ok(p.forward_batch(&[x_t], &[t], &[c])?.remove(0))
}

impl VelocityModel for DitParams {
    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.cfg.space;
        (s.h, s.w, s.d_img, s.n_reg)
    }

    fn velocity(&self, x: &TargetEmbedding, t: f64, c: &ConditioningSequence) -> Result<TargetEmbedding> {
        forward(x, t, c, self)
    }

    fn velocity_batch(&self, xs: &[TargetEmbedding], t: f64, cs: &[&ConditioningSequence]) -> Result<Vec<TargetEmbedding>> {
        let refs: Vec<&TargetEmbedding> = xs.iter().collect();
        self.forward_batch(&refs, &vec![t; xs.len()], cs)
    }
}

pub const SOFT_TOKENS_NAME: &str = "prompt.soft_tokens";

/// Frozen prompt encoder with its trainable soft tokens, plus the DiT.
#[derive(Debug, Clone, PartialEq)]
pub struct Aligner {
    pub encoder: FrozenPromptEncoder,
    pub dit: DitParams,
    /// Source of the frozen weights, which are rebuilt rather than stored.
    pub global_seed: u64,
}

impl Aligner {
    /// Fresh model; every frozen and initial weight derives from `global_seed`.
    pub fn new(cfg: &DitConfig, global_seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: FrozenPromptEncoder::new(&cfg.space, global_seed)?,
            dit: DitParams::init(cfg, global_seed)?,
            global_seed,
        })
    }

    pub fn config(&self) -> &DitConfig {
        self.dit.config()
    }

    /// Trainable tensors in canonical order: soft tokens, then DiT tensors.
    pub fn trainable(&self) -> Vec<(&str, &Array2<f32>)> {
        std::iter::once((SOFT_TOKENS_NAME, &self.encoder.soft_tokens))
            .chain(self.dit.names.iter().map(String::as_str).zip(self.dit.tensors.iter()))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f32>> {
        std::iter::once(&mut self.encoder.soft_tokens).chain(self.dit.tensors.iter_mut()).collect()
    }

    pub fn encode(&self, p: &PromptTokens) -> ConditioningSequence {
        crate::synthworld::encode_prompt(p, &self.encoder)
    }

    /// Encodes each prompt and integrates the DiT velocity field from noise.
    pub fn generate(&self, prompts: &[&PromptTokens], steps: usize, rng: &mut impl Rng) -> Result<Vec<TargetEmbedding>> {
        let cs: Vec<ConditioningSequence> = prompts.iter().map(|p| self.encode(p)).collect();
        let refs: Vec<&ConditioningSequence> = cs.iter().collect();
        crate::rectflow::sample_batch(&self.dit, &refs, steps, rng)
    }

    /// Puts the trainable tensors on `tape` (same order as [`trainable`](Self::trainable)).
    pub fn params_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Vec<Var>) {
        let soft = self.encoder.soft_tokens.mapv(|x| T::lit(f64::from(x)));
        let soft = if trainable { tape.param(soft) } else { tape.constant(soft) };
        (soft, self.dit.to_tape(tape, trainable))
    }

    /// Prompt encoding and DiT forward for a batch on one tape.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        soft: Var,
        dit_vars: &[Var],
        prompts: &[&PromptTokens],
        xs: &[&TargetEmbedding],
        ts: &[f64],
    ) -> Result<VelocityVars> {
        for p in prompts {
            p.validate()?;
        }
        let cond = self.encoder.encode_on_tape(tape, prompts, soft);
        self.dit.forward_on_tape(tape, dit_vars, xs, ts, cond)
    }
}
