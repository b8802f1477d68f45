//! Training: AdamW with a cosine schedule over the weighted flow loss, the
//! two-stage curriculum, checkpoint archives and a finite-difference gradient
//! check.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignerdit::{stack_inputs, Aligner, DitConfig, SOFT_TOKENS_NAME};
use crate::autograd::{Scalar, Tape, Var};
use crate::binio;
use crate::embedspace::TargetEmbedding;
use crate::error::{Error, Result};
use crate::rectflow::{make_flow_sample, sample_t, velocity_target, ComponentLosses, FlowSample, LossWeights};
use crate::synthworld::{Dataset, DatasetRecord, PromptTokens, DEFAULT_GLOBAL_SEED};

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Range(format!("step {step} outside 0..={total} (total must be positive)")));
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total {
        return Ok(lr_min);
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

/// Moment estimates for every trainable tensor, in trainable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    pub m: Vec<Array2<f32>>,
    #[serde(skip)]
    pub v: Vec<Array2<f32>>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array2<f32>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|p| (Array2::zeros(p.dim()), Array2::zeros(p.dim()))).unzip();
        Self { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v }
    }
}

/// One AdamW update: bias-corrected moments, decay applied to the weights
/// directly rather than through the gradient.
pub fn optimizer_step(
    params: &mut [&mut Array2<f32>],
    grads: &[Array2<f32>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = (0..params.len()).find(|&i| params[i].dim() != grads[i].dim() || params[i].dim() != state.m[i].dim()) {
        return Err(Error::shape(format!("tensor {i}: param {:?} vs grad {:?}", params[i].dim(), grads[i].dim())));
    }
    if lr < 0.0 {
        return Err(Error::Range(format!("negative learning rate {lr}")));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        ndarray::Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = f64::from(g);
            let mn = b1 * f64::from(*m) + (1.0 - b1) * g;
            let vn = b2 * f64::from(*v) + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *p = (f64::from(*p) * decay - lr * update) as f32;
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage {other:?} (pretrain|finetune)"))),
        }
    }
}

/// Transformer size used when pretraining from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = DitConfig::default();
        Self { d_model: d.d_model, n_blocks: d.n_blocks, n_heads: d.n_heads }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Starting point; mandatory for finetuning.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelShape,
    /// Seeds the frozen encoders and the initial weights of a fresh model.
    pub global_seed: u64,
    pub log_every: usize,
    pub trace: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: Stage, dataset: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        let (lr_max, lr_min) = match stage {
            Stage::Pretrain => (1e-3, 1e-5),
            Stage::Finetune => (5.6e-4, 0.0),
        };
        Self {
            stage,
            steps: 2000,
            batch_size: 8,
            lr_max,
            lr_min,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            seed: 0,
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
            init_checkpoint: None,
            model: ModelShape::default(),
            global_seed: DEFAULT_GLOBAL_SEED,
            log_every: 100,
            trace: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!("need lr_max >= lr_min >= 0, got {} and {}", self.lr_max, self.lr_min)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be nonnegative", self.weight_decay)));
        }
        self.weights.validate()?;
        if self.stage == Stage::Finetune && self.init_checkpoint.is_none() {
            return Err(Error::Config("finetuning requires an initial checkpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub components: ComponentLosses,
}

pub const TRACE_HEADER: &str = "step,loss,lr,loss_patch,loss_cls,loss_reg";

impl TraceRow {
    pub fn csv(&self) -> String {
        let c = &self.components;
        format!("{},{},{},{},{},{}", self.step, self.loss, self.lr, c.patch, c.cls, c.reg)
    }
}

/// Loss nodes for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub patch: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Builds the weighted flow loss of a batch on `tape`.
pub fn batch_loss_on_tape<T: Scalar>(
    aligner: &Aligner,
    tape: &mut Tape<T>,
    soft: Var,
    dit_vars: &[Var],
    prompts: &[&PromptTokens],
    samples: &[&FlowSample],
    w: &LossWeights,
) -> Result<LossVars> {
    let xs: Vec<&TargetEmbedding> = samples.iter().map(|f| &f.xt).collect();
    let ts: Vec<f64> = samples.iter().map(|f| f.t).collect();
    let v = aligner.forward_on_tape(tape, soft, dit_vars, prompts, &xs, &ts)?;
    let targets: Vec<TargetEmbedding> = samples.iter().map(|f| velocity_target(f)).collect();
    let refs: Vec<&TargetEmbedding> = targets.iter().collect();
    let (up, uc, ur) = stack_inputs::<T>(&refs);
    let patch = tape.sq_err_mean(v.patches, up);
    let cls = tape.sq_err_mean(v.cls, uc);
    let reg = tape.sq_err_mean(v.registers, ur);
    let total =
        tape.weighted_sum(&[(patch, T::lit(w.lambda_p)), (cls, T::lit(w.lambda_cls)), (reg, T::lit(w.lambda_reg))]);
    Ok(LossVars { total, patch, cls, reg })
}

/// Loss of a zero predictor averaged over noise: `sum_k lambda_k * (mean(x1_k^2) + 1)`.
pub fn zero_predictor_loss(records: &[DatasetRecord], w: &LossWeights) -> f64 {
    let mean_sq = |f: &dyn Fn(&TargetEmbedding) -> Vec<f32>| {
        let (mut s, mut n) = (0.0, 0usize);
        for r in records {
            for v in f(&r.target) {
                s += f64::from(v).powi(2);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64 + 1.0
        }
    };
    let p = mean_sq(&|e| e.patches.iter().copied().collect());
    let c = mean_sq(&|e| e.cls.to_vec());
    let r = mean_sq(&|e| e.registers.iter().copied().collect());
    let r = if records.first().is_some_and(|x| x.target.registers.is_empty()) { 0.0 } else { r };
    w.lambda_p * p + w.lambda_cls * c + w.lambda_reg * r
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub aligner: Aligner,
    pub checkpoint: CheckpointArchive,
    pub trace: Vec<TraceRow>,
    /// Dataset indices drawn for the first step.
    pub first_batch: Vec<usize>,
}

fn load_start(cfg: &TrainConfig, ds: &Dataset) -> Result<(Aligner, u64)> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let ck = CheckpointArchive::load(path)?;
            Ok((ck.to_aligner()?, ck.meta.step))
        }
        None => {
            let m = cfg.model;
            let dit = DitConfig { d_model: m.d_model, n_blocks: m.n_blocks, n_heads: m.n_heads, d_cond: ds.cfg.d_cond, space: ds.cfg };
            Ok((Aligner::new(&dit, cfg.global_seed)?, 0))
        }
    }
}

/// Runs one training stage. Deterministic for a fixed config. On a non-finite
/// loss the last good weights are written to `cfg.checkpoint` before failing.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::read(&cfg.dataset)?;
    let (mut aligner, start_step) = load_start(cfg, &ds)?;
    if aligner.config().space != ds.cfg {
        return Err(Error::Config(format!(
            "dataset space {:?} does not match model space {:?}",
            ds.cfg,
            aligner.config().space
        )));
    }
    let mut opt = AdamState::new(aligner.trainable().into_iter().map(|(_, t)| t));
    let mut trace_out = match &cfg.trace {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            writeln!(f, "{TRACE_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut first_batch = Vec::new();
    for step in 1..=cfg.steps {
        let lr = cosine_lr(step - 1, cfg.steps, cfg.lr_max, cfg.lr_min)?;
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..ds.len());
            if step == 1 {
                first_batch.push(idx);
            }
            let r = &ds.records[idx];
            let t = sample_t(&mut rng);
            samples.push(make_flow_sample(&r.target, t, &mut rng)?);
            prompts.push(&r.tokens);
        }
        let sample_refs: Vec<&FlowSample> = samples.iter().collect();

        let mut tape = Tape::<f32>::new();
        let (soft, dit_vars) = aligner.params_on_tape(&mut tape, true);
        let lv = batch_loss_on_tape(&aligner, &mut tape, soft, &dit_vars, &prompts, &sample_refs, &cfg.weights)?;
        let loss = f64::from(tape.scalar(lv.total));
        let comps = ComponentLosses {
            patch: f64::from(tape.scalar(lv.patch)),
            cls: f64::from(tape.scalar(lv.cls)),
            reg: f64::from(tape.scalar(lv.reg)),
        };
        let mut grads = tape.backward(lv.total);
        let grads: Vec<Array2<f32>> = std::iter::once(soft)
            .chain(dit_vars.iter().copied())
            .map(|v| grads.take(v).unwrap_or_else(|| Array2::zeros(tape.value(v).dim())))
            .collect();
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            let last_good = start_step + step as u64 - 1;
            CheckpointArchive::from_aligner(&aligner, last_good, Some(cfg.clone()), Some(opt)).save(&cfg.checkpoint)?;
            log::error!("non-finite loss at step {step}; saved step {last_good} to {}", cfg.checkpoint.display());
            return Err(Error::Diverged { step, last_good_step: last_good as usize });
        }
        optimizer_step(&mut aligner.trainable_mut(), &grads, &mut opt, lr, cfg.weight_decay)?;

        let row = TraceRow { step, loss, lr, components: comps };
        if let Some(f) = trace_out.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!("step {step}/{} loss {loss:.5} lr {lr:.3e}", cfg.steps);
        }
        trace.push(row);
    }
    if let Some(mut f) = trace_out {
        f.flush()?;
    }
    let checkpoint = CheckpointArchive::from_aligner(&aligner, start_step + cfg.steps as u64, Some(cfg.clone()), Some(opt));
    checkpoint.save(&cfg.checkpoint)?;
    Ok(TrainOutcome { aligner, checkpoint, trace, first_batch })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dit: DitConfig,
    pub global_seed: u64,
    pub step: u64,
    pub train: Option<TrainConfig>,
}

/// Every trainable tensor by name, optional optimizer moments, and enough
/// metadata to rebuild the frozen parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArchive {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Array2<f32>)>,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    state: AdamState,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    meta: CheckpointMeta,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    payload_bytes: u64,
}

impl CheckpointArchive {
    pub fn from_aligner(a: &Aligner, step: u64, train: Option<TrainConfig>, optimizer: Option<AdamState>) -> Self {
        Self {
            meta: CheckpointMeta { dit: *a.config(), global_seed: a.global_seed, step, train },
            params: a.trainable().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
        }
    }

    pub fn to_aligner(&self) -> Result<Aligner> {
        let mut a = Aligner::new(&self.meta.dit, self.meta.global_seed)?;
        let mut named: HashMap<String, Array2<f32>> = self.params.iter().cloned().collect();
        if named.len() != self.params.len() {
            return Err(Error::format("duplicate tensor names"));
        }
        let soft = named.remove(SOFT_TOKENS_NAME).ok_or_else(|| Error::format("missing soft tokens"))?;
        if soft.dim() != a.encoder.soft_tokens.dim() {
            return Err(Error::format(format!("soft tokens have shape {:?}", soft.dim())));
        }
        a.encoder.soft_tokens = soft;
        a.dit.load_named(&named)?;
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut offset = 0u64;
        let mut params = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            params.push(TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()], offset });
            offset += 4 * t.len() as u64;
        }
        let blob = offset;
        let optimizer = match &self.optimizer {
            Some(s) => {
                if s.m.len() != self.params.len() || s.m.iter().zip(&self.params).any(|(m, (_, p))| m.dim() != p.dim()) {
                    return Err(Error::shape("optimizer moments do not match parameters"));
                }
                offset += 2 * blob;
                Some(OptimizerEntry { state: s.clone(), m_offset: blob, v_offset: 2 * blob })
            }
            None => None,
        };
        let manifest = CheckpointManifest { meta: self.meta.clone(), params, optimizer, payload_bytes: offset };
        let mut out = BufWriter::new(File::create(path)?);
        binio::write_header(&mut out, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &manifest)?;
        for (_, t) in &self.params {
            binio::write_f32s(&mut out, t.iter())?;
        }
        if let Some(s) = &self.optimizer {
            for m in &s.m {
                binio::write_f32s(&mut out, m.iter())?;
            }
            for v in &s.v {
                binio::write_f32s(&mut out, v.iter())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let m: CheckpointManifest = binio::read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut expected = 0u64;
        for e in &m.params {
            if e.offset != expected {
                return Err(Error::format(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
            }
            expected += 4 * (e.shape[0] as u64) * (e.shape[1] as u64);
        }
        let blob = expected;
        if let Some(o) = &m.optimizer {
            if o.m_offset != blob || o.v_offset != 2 * blob {
                return Err(Error::format("optimizer blobs are not contiguous"));
            }
            expected += 2 * blob;
        }
        if m.payload_bytes != expected {
            return Err(Error::format(format!("payload is {} bytes, entries need {expected}", m.payload_bytes)));
        }
        let read_all = |r: &mut BufReader<File>| -> Result<Vec<Array2<f32>>> {
            m.params
                .iter()
                .map(|e| {
                    let v = binio::read_f32s(r, e.shape[0] * e.shape[1])?;
                    Ok(Array2::from_shape_vec((e.shape[0], e.shape[1]), v).expect("sized"))
                })
                .collect()
        };
        let tensors = read_all(&mut r)?;
        let optimizer = match m.optimizer {
            Some(o) => {
                let mm = read_all(&mut r)?;
                let vv = read_all(&mut r)?;
                Some(AdamState { m: mm, v: vv, ..o.state })
            }
            None => None,
        };
        binio::expect_eof(&mut r)?;
        let params = m.params.into_iter().map(|e| e.name).zip(tensors).collect();
        Ok(Self { meta: m.meta, params, optimizer })
    }

    /// Reads just the header and returns the stored metadata.
    pub fn peek_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
        let mut r = BufReader::new(File::open(path)?);
        let m: CheckpointManifest = binio::read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        Ok(m.meta)
    }
}

/// Prompts and flow samples for a gradient check.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub prompts: Vec<PromptTokens>,
    pub samples: Vec<FlowSample>,
    pub weights: LossWeights,
}

impl GradFixture {
    pub fn from_records(records: &[DatasetRecord], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let t = sample_t(&mut rng);
            samples.push(make_flow_sample(&r.target, t, &mut rng)?);
        }
        Ok(Self { prompts: records.iter().map(|r| r.tokens.clone()).collect(), samples, weights: LossWeights::default() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tol: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error floor, so entries whose true gradient is numerically zero
/// compare on absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-8;

fn fixture_loss(a: &Aligner, values: &[Array2<f64>], fx: &GradFixture, grads: bool) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let prompts: Vec<&PromptTokens> = fx.prompts.iter().collect();
    let samples: Vec<&FlowSample> = fx.samples.iter().collect();
    let lv = batch_loss_on_tape(a, &mut tape, vars[0], &vars[1..], &prompts, &samples, &fx.weights)?;
    let loss = tape.scalar(lv.total);
    if !grads {
        return Ok((loss, Vec::new()));
    }
    let mut g = tape.backward(lv.total);
    Ok((loss, vars.iter().map(|&v| g.take(v).unwrap_or_else(|| Array2::zeros(tape.value(v).dim()))).collect()))
}

/// Analytic gradients of the fixture loss against central differences, in
/// f64, for `n_params` trainable scalars drawn uniformly at random.
pub fn grad_check(a: &Aligner, fx: &GradFixture, n_params: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let trainable = a.trainable();
    let values: Vec<Array2<f64>> = trainable.iter().map(|(_, t)| t.mapv(f64::from)).collect();
    let (_, analytic) = fixture_loss(a, &values, fx, true)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None, tol, passed: true };
    for _ in 0..n_params {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let mut perturbed = values.clone();
        let base = values[ti].as_slice().expect("standard layout")[flat];
        perturbed[ti].as_slice_mut().expect("standard layout")[flat] = base + GRAD_CHECK_STEP;
        let (up, _) = fixture_loss(a, &perturbed, fx, false)?;
        perturbed[ti].as_slice_mut().expect("standard layout")[flat] = base - GRAD_CHECK_STEP;
        let (down, _) = fixture_loss(a, &perturbed, fx, false)?;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let an = analytic[ti].as_slice().expect("standard layout")[flat];
        let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((trainable[ti].0.to_string(), flat, an, numeric));
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Gives the zero-initialised output heads small random weights so that
/// gradients reach the rest of the network.
pub fn perturb_heads(a: &mut Aligner, std: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = a.dit.head_names().into_iter().map(String::from).collect();
    for n in names {
        if let Some(t) = a.dit.get_mut(&n) {
            t.mapv_inplace(|_| rng.sample::<f32, _>(StandardNormal) * std);
        }
    }
}
