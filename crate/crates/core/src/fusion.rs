//! Vision-language cross-modal attention.
//!
//! Pixels of a visual stage act as queries, tokens as keys and values:
//!
//! ```text
//! V_Q = V W_Q + b_Q        (HW x C')
//! T_K = T W_K + b_K        (L x C')
//! T_V = T W_V + b_V        (L x C')
//! A   = V_Q T_K^T          (HW x L), padded key columns zeroed
//! O   = A T_V              (HW x C')
//! V'  = V + (O W_O + b_O)  reshaped back to (H, W, C)
//! ```
//!
//! By default `A` is the raw bilinear correlation with no softmax and no
//! `1/sqrt(C')` scaling. `softmax_norm` switches to the scaled, row-normalised
//! variant over real tokens.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::{Affine, Initializer};
use crate::tensor::{Real, Tensor};

/// Additive score for padded keys before a softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionStageParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    /// Output projection back to the visual width; zero at construction.
    pub out: Affine,
}

impl FusionStageParams {
    pub fn new<R: Real>(init: &mut Initializer<'_, R>, name: &str, visual_dim: usize, text_dim: usize, fusion_dim: usize) -> Result<Self> {
        Ok(FusionStageParams {
            query: Affine::linear(init, &alloc::format!("{name}.query"), visual_dim, fusion_dim)?,
            key: Affine::linear(init, &alloc::format!("{name}.key"), text_dim, fusion_dim)?,
            value: Affine::linear(init, &alloc::format!("{name}.value"), text_dim, fusion_dim)?,
            out: Affine::linear_zero(init, &alloc::format!("{name}.out"), fusion_dim, visual_dim)?,
        })
    }
}

/// Every intermediate of one fusion stage, as graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionState {
    pub v_q: NodeId,
    pub t_k: NodeId,
    pub t_v: NodeId,
    pub a: NodeId,
    pub o: NodeId,
    pub fused: NodeId,
}

/// `x W + b` on a rank-2 node.
pub fn linear<R: Real>(g: &mut Graph<'_, R>, x: NodeId, p: Affine) -> Result<NodeId> {
    let w = g.param(p.w);
    let b = g.param(p.b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Flattens `(H, W, C)` to `(HW, C)`.
pub fn flatten_pixels<R: Real>(g: &mut Graph<'_, R>, v: NodeId) -> Result<NodeId> {
    let (h, w, c) = g.value(v).dims3("flatten_pixels")?;
    g.reshape(v, &[h * w, c])
}

pub fn project_qkv<R: Real>(g: &mut Graph<'_, R>, v: NodeId, t: NodeId, p: &FusionStageParams) -> Result<(NodeId, NodeId, NodeId)> {
    let flat = flatten_pixels(g, v)?;
    g.value(t).dims2("project_qkv")?;
    let v_q = linear(g, flat, p.query)?;
    let t_k = linear(g, t, p.key)?;
    let t_v = linear(g, t, p.value)?;
    Ok((v_q, t_k, t_v))
}

fn column_mask<R: Real>(rows: usize, key_mask: &[bool], on: f64, off: f64) -> Result<Tensor<R>> {
    let row: Vec<R> = key_mask.iter().map(|&m| R::from_f64(if m { on } else { off })).collect();
    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(&[rows, key_mask.len()], data)
}

/// Pixel-token correlation `V_Q T_K^T` with padded columns set to zero.
pub fn correlation<R: Real>(g: &mut Graph<'_, R>, v_q: NodeId, t_k: NodeId, key_mask: &[bool], softmax_norm: bool) -> Result<NodeId> {
    let (hw, c) = g.value(v_q).dims2("correlation")?;
    let (l, _) = g.value(t_k).dims2("correlation")?;
    if key_mask.len() != l {
        return Err(Error::ShapeMismatch {
            op: "correlation",
            left: g.shape(t_k).to_vec(),
            right: alloc::vec![key_mask.len()],
        });
    }
    let kt = g.transpose(t_k)?;
    let scores = g.matmul(v_q, kt)?;
    let keep = g.constant(column_mask(hw, key_mask, 1.0, 0.0)?)?;
    if !softmax_norm {
        return g.mul(scores, keep);
    }
    let scaled = g.scale(scores, 1.0 / libm::sqrt(c as f64))?;
    let bias = g.constant(column_mask(hw, key_mask, 0.0, MASKED_SCORE)?)?;
    let biased = g.add(scaled, bias)?;
    let probs = g.softmax_rows(biased)?;
    g.mul(probs, keep)
}

/// `O = A T_V`.
pub fn attend<R: Real>(g: &mut Graph<'_, R>, a: NodeId, t_v: NodeId) -> Result<NodeId> {
    g.matmul(a, t_v)
}

/// Full stage: projections, correlation, attention and the residual update.
pub fn fuse_stage<R: Real>(
    g: &mut Graph<'_, R>,
    v: NodeId,
    t: NodeId,
    key_mask: &[bool],
    p: &FusionStageParams,
    softmax_norm: bool,
) -> Result<FusionState> {
    let shape = g.shape(v).to_vec();
    let (v_q, t_k, t_v) = project_qkv(g, v, t, p)?;
    let a = correlation(g, v_q, t_k, key_mask, softmax_norm)?;
    let o = attend(g, a, t_v)?;
    let update = linear(g, o, p.out)?;
    let update = g.reshape(update, &shape)?;
    let fused = g.add(v, update)?;
    Ok(FusionState {
        v_q,
        t_k,
        t_v,
        a,
        o,
        fused,
    })
}
