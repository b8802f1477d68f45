//! Hybrid positional treatment of the token stream.
//!
//! Patch tokens get 2D rotary embeddings inside attention: the first half of
//! each head rotates with the row index and the second half with the column
//! index. CLS and register tokens get the identity rotation there and are told
//! apart by learnable additive embeddings at the input projection instead.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{RotaryRows, Scalar};
use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Precomputed per-axis rotation angles for one head size.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    head_dim: usize,
    base: f64,
    max_pos: usize,
    /// `[max_pos, head_dim / 4]`, angle `theta_m * pos`.
    angles: Array2<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_pos: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::OddHeadDim(head_dim));
        }
        let quarter = head_dim / 4;
        let half = (head_dim / 2) as f64;
        let angles = Array2::from_shape_fn((max_pos, quarter), |(p, m)| {
            let theta = base.powf(-2.0 * m as f64 / half);
            theta * p as f64
        });
        Ok(Self { head_dim, base, max_pos, angles })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    fn check_pos(&self, (i, j): (usize, usize)) -> Result<()> {
        if i >= self.max_pos || j >= self.max_pos {
            return Err(Error::Range(format!(
                "position ({i}, {j}) outside rotary table of size {}",
                self.max_pos
            )));
        }
        Ok(())
    }

    /// Per-row cos/sin over `head_dim / 2` consecutive pairs; `None` rows get
    /// the identity rotation.
    pub fn rotary_rows<T: Scalar>(&self, positions: &[Option<(usize, usize)>]) -> Result<RotaryRows<T>> {
        let pairs = self.head_dim / 2;
        let quarter = self.head_dim / 4;
        let mut cos = Array2::<T>::ones((positions.len(), pairs));
        let mut sin = Array2::<T>::zeros((positions.len(), pairs));
        for (r, pos) in positions.iter().enumerate() {
            let Some((i, j)) = *pos else { continue };
            self.check_pos((i, j))?;
            for p in 0..pairs {
                let a = if p < quarter { self.angles[[i, p]] } else { self.angles[[j, p - quarter]] };
                cos[[r, p]] = T::lit(a.cos());
                sin[[r, p]] = T::lit(a.sin());
            }
        }
        Ok(RotaryRows { cos, sin })
    }

    /// Shared handle suitable for [`crate::autograd::Tape::rope`].
    pub fn rotary_rows_arc<T: Scalar>(&self, positions: &[Option<(usize, usize)>]) -> Result<Arc<RotaryRows<T>>> {
        self.rotary_rows(positions).map(Arc::new)
    }
}

/// Rotates one head vector for grid position `(i, j)`.
pub fn rope2d_apply<T: Scalar>(x: ArrayView1<T>, pos: (usize, usize), table: &RopeTable) -> Result<Array1<T>> {
    if x.len() != table.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "head vector has length {}, table expects {}",
            x.len(),
            table.head_dim
        )));
    }
    table.check_pos(pos)?;
    let half = table.head_dim / 2;
    let mut out = x.to_owned();
    for (axis, p) in [pos.0, pos.1].into_iter().enumerate() {
        for m in 0..table.head_dim / 4 {
            let a = table.angles[[p, m]];
            let (c, s) = (T::lit(a.cos()), T::lit(a.sin()));
            let k = axis * half + 2 * m;
            let (u, v) = (x[k], x[k + 1]);
            out[k] = u * c - v * s;
            out[k + 1] = u * s + v * c;
        }
    }
    Ok(out)
}

/// Rotation used for CLS and register tokens.
pub fn identity_rotary<T: Clone>(x: ArrayView1<T>) -> Array1<T> {
    x.to_owned()
}

/// Learnable additive embeddings for the `1 + n_reg` global tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPosEmbeddings {
    /// `[1 + n_reg, d_model]`
    pub table: Array2<f32>,
}

impl GlobalPosEmbeddings {
    pub const INIT_STD: f32 = 0.02;

    pub fn init<R: Rng>(n_reg: usize, d_model: usize, rng: &mut R) -> Self {
        let table = Array2::from_shape_fn((1 + n_reg, d_model), |_| {
            rng.sample::<f32, _>(StandardNormal) * Self::INIT_STD
        });
        Self { table }
    }
}

/// `tokens + g.table` for the global tokens of one sample.
pub fn add_global_pos(tokens: ArrayView2<f32>, g: &GlobalPosEmbeddings) -> Result<Array2<f32>> {
    if tokens.dim() != g.table.dim() {
        return Err(Error::ShapeMismatch(format!(
            "global tokens are {:?}, position table is {:?}",
            tokens.dim(),
            g.table.dim()
        )));
    }
    Ok(&tokens + &g.table)
}
