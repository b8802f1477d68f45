//! Alignment metrics per token, retrieval recall, Fréchet distance and
//! kernel distance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::embedspace::TargetEmbedding;
use crate::error::{Error, Result};

pub const METRIC_EPS: f64 = 1e-8;

fn check_same(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("generated {:?} vs ground truth {:?}", a.dim(), b.dim())));
    }
    if a.shape()[0] == 0 {
        return Err(Error::shape("empty batch"));
    }
    Ok(())
}

fn dot(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn norm(a: ArrayView1<f32>) -> f64 {
    dot(a, a).sqrt()
}

/// Mean over `fn(gen_token, gt_token)` for `[B, N, D]` batches.
fn token_mean(gen: ArrayView3<f32>, gt: ArrayView3<f32>, f: impl Fn(ArrayView1<f32>, ArrayView1<f32>) -> f64) -> Result<f64> {
    check_same(&gen, &gt)?;
    let (b, n, _) = gen.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..n {
            acc += f(gen.slice(ndarray::s![i, j, ..]), gt.slice(ndarray::s![i, j, ..]));
        }
    }
    Ok(acc / (b * n) as f64)
}

/// Mean token cosine, `x̂·x / max(|x̂||x|, eps)`.
pub fn cosine_metric(gen: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<f64> {
    token_mean(gen, gt, |a, b| dot(a, b) / (norm(a) * norm(b)).max(METRIC_EPS))
}

/// Mean squared error per element.
pub fn mse_metric(gen: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<f64> {
    let d = gen.shape()[2].max(1) as f64;
    token_mean(gen, gt, |a, b| a.iter().zip(b.iter()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / d)
}

/// Mean token norm ratio, `|x̂| / (|x| + eps)`.
pub fn norm_ratio(gen: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<f64> {
    token_mean(gen, gt, |a, b| norm(a) / (norm(b) + METRIC_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Patch,
    Cls,
    Reg,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Patch, Component::Cls, Component::Reg];

    pub fn name(self) -> &'static str {
        match self {
            Component::Patch => "patch",
            Component::Cls => "cls",
            Component::Reg => "reg",
        }
    }
}

/// One component of a batch as `[B, N, D]` tokens.
pub fn component_tokens(batch: &[TargetEmbedding], c: Component) -> Result<Array3<f32>> {
    let first = batch.first().ok_or_else(|| Error::shape("empty batch"))?;
    let (h, w, d, n_reg) = first.dims();
    let n = match c {
        Component::Patch => h * w,
        Component::Cls => 1,
        Component::Reg => n_reg,
    };
    let mut out = Array3::<f32>::zeros((batch.len(), n, d));
    for (i, e) in batch.iter().enumerate() {
        if e.dims() != first.dims() {
            return Err(Error::shape(format!("batch mixes dims {:?} and {:?}", first.dims(), e.dims())));
        }
        let mut dst = out.index_axis_mut(Axis(0), i);
        match c {
            Component::Patch => dst.assign(&e.patch_rows()),
            Component::Cls => dst.row_mut(0).assign(&e.cls),
            Component::Reg => dst.assign(&e.registers),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentScores {
    pub cosine: f64,
    pub mse: f64,
    pub norm_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub patch: ComponentScores,
    pub cls: ComponentScores,
    pub reg: Option<ComponentScores>,
    pub count: usize,
}

impl AlignmentReport {
    pub fn get(&self, c: Component) -> Option<&ComponentScores> {
        match c {
            Component::Patch => Some(&self.patch),
            Component::Cls => Some(&self.cls),
            Component::Reg => self.reg.as_ref(),
        }
    }
}

pub fn alignment_report(gen: &[TargetEmbedding], gt: &[TargetEmbedding]) -> Result<AlignmentReport> {
    if gen.len() != gt.len() {
        return Err(Error::shape(format!("{} generated vs {} ground-truth embeddings", gen.len(), gt.len())));
    }
    let score = |c| -> Result<ComponentScores> {
        let (a, b) = (component_tokens(gen, c)?, component_tokens(gt, c)?);
        Ok(ComponentScores {
            cosine: cosine_metric(a.view(), b.view())?,
            mse: mse_metric(a.view(), b.view())?,
            norm_ratio: norm_ratio(a.view(), b.view())?,
        })
    };
    let has_reg = gt.first().is_some_and(|e| e.registers.nrows() > 0);
    Ok(AlignmentReport {
        patch: score(Component::Patch)?,
        cls: score(Component::Cls)?,
        reg: if has_reg { Some(score(Component::Reg)?) } else { None },
        count: gen.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Cls,
    PooledPatch,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Cls => "cls",
            QueryMode::PooledPatch => "pooled_patch",
        })
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(QueryMode::Cls),
            "pooled_patch" | "pooled-patch" => Ok(QueryMode::PooledPatch),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?} (cls|pooled_patch)"))),
        }
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub mode: QueryMode,
    /// `(k, recall %)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

fn descriptor(e: &TargetEmbedding, mode: QueryMode) -> Array1<f32> {
    match mode {
        QueryMode::Cls => e.cls.clone(),
        QueryMode::PooledPatch => e.pooled_patches(),
    }
}

fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(METRIC_EPS)
}

/// Zero-based rank of the true entry when the database is sorted by cosine
/// descending, ties going to the lower index.
pub fn rank_of_truth(query: ArrayView1<f32>, database: ArrayView2<f32>, truth: usize) -> usize {
    let s_true = cosine(query, database.row(truth));
    database
        .rows()
        .into_iter()
        .enumerate()
        .filter(|&(j, row)| {
            let s = cosine(query, row);
            s > s_true || (s == s_true && j < truth)
        })
        .count()
}

/// Recall@k of `queries[i]` finding `database[truth[i]]`.
pub fn retrieval(
    queries: &[TargetEmbedding],
    database: &[TargetEmbedding],
    truth: &[usize],
    mode: QueryMode,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if database.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if let Some(i) = (0..queries.len()).find(|&i| truth.get(i).is_none_or(|&t| t >= database.len())) {
        return Err(Error::MissingGroundTruth(i));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > database.len()) {
        return Err(Error::Range(format!("k = {k} not in 1..={}", database.len())));
    }
    let d = database[0].d_img();
    let mut db = Array2::<f32>::zeros((database.len(), d));
    for (j, e) in database.iter().enumerate() {
        if e.d_img() != d {
            return Err(Error::shape("database mixes feature sizes"));
        }
        db.row_mut(j).assign(&descriptor(e, mode));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, &t) in queries.iter().zip(truth) {
        if q.d_img() != d {
            return Err(Error::shape(format!("query feature size {} vs database {d}", q.d_img())));
        }
        let r = rank_of_truth(descriptor(q, mode).view(), db.view(), t);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if r < k {
                *h += 1;
            }
        }
    }
    let n = queries.len().max(1) as f64;
    Ok(RetrievalReport {
        mode,
        recall: ks.iter().zip(&hits).map(|(&k, &h)| (k, 100.0 * h as f64 / n)).collect(),
        queries: queries.len(),
    })
}

fn moments(x: ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mu;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    (DVector::from_iterator(d, mu.iter().copied()), DMatrix::from_fn(d, d, |i, j| cov[[i, j]]))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` of Gaussians fitted to
/// `[n, d]` feature sets. The trace of the product root is taken as
/// `Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, which has the same eigenvalues and is
/// symmetric, so both roots come from clamped symmetric eigendecompositions.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_features(&a, &b)?;
    let (mu_a, s_a) = moments(a);
    let (mu_b, s_b) = moments(b);
    let ra = sym_sqrt(&s_a);
    let inner = &ra * &s_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = (mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

fn check_features(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 samples per set, got {} and {}", a.nrows(), b.nrows())));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::shape(format!("feature sizes {} and {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

/// Unbiased squared MMD with kernel `(x.y / d + 1)^3`, times 100. Within-set
/// terms average off-diagonal pairs; for equal set sizes the cross term also
/// drops its diagonal, so a set compared with itself scores exactly zero.
pub fn kernel_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_features(&a, &b)?;
    let d = a.ncols() as f64;
    let kern = |x: ArrayView2<f64>, y: ArrayView2<f64>| x.dot(&y.t()).mapv(|v| (v / d + 1.0).powi(3));
    let (m, n) = (a.nrows() as f64, b.nrows() as f64);
    let off_diag_mean = |k: &Array2<f64>| (k.sum() - k.diag().sum()) / (k.nrows() as f64 * (k.nrows() as f64 - 1.0));
    let kxx = off_diag_mean(&kern(a, a));
    let kyy = off_diag_mean(&kern(b, b));
    let k_ab = kern(a, b);
    let kxy = if a.nrows() == b.nrows() { off_diag_mean(&k_ab) } else { k_ab.sum() / (m * n) };
    Ok(100.0 * (kxx + kyy - 2.0 * kxy))
}

/// One feature row per embedding for distribution metrics.
pub fn features(batch: &[TargetEmbedding], mode: QueryMode) -> Array2<f64> {
    let d = batch.first().map_or(0, |e| e.d_img());
    let mut out = Array2::<f64>::zeros((batch.len(), d));
    for (mut row, e) in out.rows_mut().into_iter().zip(batch) {
        row.assign(&descriptor(e, mode).mapv(f64::from));
    }
    out
}
