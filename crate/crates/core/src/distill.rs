//! Relational distillation losses.
//!
//! * vision-language relation: MSE between teacher and student pixel-token
//!   correlation matrices, averaged over real token columns;
//! * channel relation: MSE between channel Gram matrices `D^T D` of the
//!   teacher and student decoder maps;
//! * total: `L_d = L_seg + lambda1 * L_VL + lambda2 * L_C`.
//!
//! Teacher tensors enter the student's graph as constants, so no gradient can
//! reach teacher parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::segmenter::{seg_loss, ModelOutputs, RelationTargets};
use crate::tensor::{Real, Tensor};

/// Epsilon inside the column norm when Grams are normalised.
pub const GRAM_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    pub lambda1: f64,
    pub lambda2: f64,
    /// L2-normalise decoder channels before forming the Gram matrix.
    pub gram_normalize: bool,
    /// Divide the correlation loss by all `HW x L` entries, padding included.
    pub count_padded: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            lambda1: 0.5,
            lambda2: 0.5,
            gram_normalize: false,
            count_padded: false,
        }
    }
}

/// Scalar loss terms of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_vl: f64,
    pub l_c: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub l_d: f64,
}

impl LossBundle {
    pub fn new(l_seg: f64, l_vl: f64, l_c: f64, lambda1: f64, lambda2: f64) -> Self {
        LossBundle {
            l_seg,
            l_vl,
            l_c,
            lambda1,
            lambda2,
            l_d: l_seg + lambda1 * l_vl + lambda2 * l_c,
        }
    }

    /// Element-wise sum, used to average over batches.
    pub fn accumulate(&mut self, other: &LossBundle) {
        self.l_seg += other.l_seg;
        self.l_vl += other.l_vl;
        self.l_c += other.l_c;
        self.l_d += other.l_d;
        self.lambda1 = other.lambda1;
        self.lambda2 = other.lambda2;
    }

    pub fn scaled(&self, s: f64) -> LossBundle {
        LossBundle {
            l_seg: self.l_seg * s,
            l_vl: self.l_vl * s,
            l_c: self.l_c * s,
            l_d: self.l_d * s,
            ..*self
        }
    }
}

/// `sum_{i, j real} (A_t - A_s)^2 / (HW * L_real)`.
///
/// Padded columns are zero in both matrices. With `count_padded` the
/// denominator uses every column instead.
pub fn vl_relation_loss<R: Real>(
    g: &mut Graph<'_, R>,
    a_t: &Tensor<R>,
    a_s: NodeId,
    key_mask: &[bool],
    count_padded: bool,
) -> Result<NodeId> {
    if a_t.shape() != g.shape(a_s) {
        return Err(Error::ShapeMismatch {
            op: "vl_relation_loss",
            left: a_t.shape().to_vec(),
            right: g.shape(a_s).to_vec(),
        });
    }
    let (_, l) = a_t.dims2("vl_relation_loss")?;
    if key_mask.len() != l {
        return Err(Error::ShapeMismatch {
            op: "vl_relation_loss",
            left: a_t.shape().to_vec(),
            right: alloc::vec![key_mask.len()],
        });
    }
    let real = key_mask.iter().filter(|&&m| m).count();
    if real == 0 && !count_padded {
        return Err(Error::EmptyMask);
    }
    let teacher = g.constant(a_t.clone())?;
    let mse = g.mse_mean(a_s, teacher)?;
    if count_padded {
        Ok(mse)
    } else {
        g.scale(mse, l as f64 / real as f64)
    }
}

/// `reshape(D)^T reshape(D)` for an `(H, W, C)` map, optionally with unit
/// channel columns.
pub fn channel_gram<R: Real>(g: &mut Graph<'_, R>, d: NodeId, normalize: bool) -> Result<NodeId> {
    let (h, w, c) = g.value(d).dims3("channel_gram")?;
    let mut flat = g.reshape(d, &[h * w, c])?;
    if normalize {
        flat = g.normalize_columns(flat, GRAM_NORM_EPS)?;
    }
    let ft = g.transpose(flat)?;
    g.matmul(ft, flat)
}

/// Mean squared difference of two `C x C` Gram matrices.
pub fn channel_relation_loss<R: Real>(g: &mut Graph<'_, R>, gram_t: NodeId, gram_s: NodeId) -> Result<NodeId> {
    let (c1, c2) = g.value(gram_t).dims2("channel_relation_loss")?;
    if c1 != c2 {
        return Err(Error::ShapeMismatch {
            op: "channel_relation_loss",
            left: g.shape(gram_t).to_vec(),
            right: g.shape(gram_s).to_vec(),
        });
    }
    g.mse_mean(gram_t, gram_s)
}

/// Node handles for the terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossNodes {
    pub l_seg: NodeId,
    pub l_vl: Option<NodeId>,
    pub l_c: Option<NodeId>,
    /// The node to differentiate.
    pub objective: NodeId,
}

/// Student objective against optional teacher targets.
///
/// Without a teacher the objective is `L_seg` alone. Relation terms whose
/// weight is zero are still evaluated for reporting but left out of the
/// differentiated objective.
pub fn total_loss<R: Real>(
    g: &mut Graph<'_, R>,
    student: &ModelOutputs,
    teacher: Option<&RelationTargets<R>>,
    gt_mask: &[bool],
    opts: &DistillOptions,
) -> Result<(LossNodes, LossBundle)> {
    if opts.lambda1 < 0.0 || opts.lambda2 < 0.0 {
        return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
    }
    let l_seg = seg_loss(g, student.logits, gt_mask)?;
    let seg_value = g.value(l_seg).item().to_f64();
    let Some(teacher) = teacher else {
        let bundle = LossBundle::new(seg_value, 0.0, 0.0, opts.lambda1, opts.lambda2);
        return Ok((
            LossNodes {
                l_seg,
                l_vl: None,
                l_c: None,
                objective: l_seg,
            },
            bundle,
        ));
    };

    let mut vl_terms = [l_seg; 3];
    for (k, term) in vl_terms.iter_mut().enumerate() {
        *term = vl_relation_loss(g, &teacher.a_stages[k], student.a_stages[k], &student.key_mask, opts.count_padded)?;
    }
    let l_vl = mean3(g, vl_terms)?;

    let mut c_terms = [l_seg; 3];
    for (k, term) in c_terms.iter_mut().enumerate() {
        let t_shape = teacher.d_levels[k].shape();
        let s_shape = g.shape(student.d_levels[k]);
        if t_shape != s_shape {
            return Err(Error::IncompatibleTeacher(alloc::format!(
                "decoder level {} shapes differ: {t_shape:?} vs {s_shape:?}",
                k + 3
            )));
        }
        let d_t = g.constant(teacher.d_levels[k].clone())?;
        let gram_t = channel_gram(g, d_t, opts.gram_normalize)?;
        let gram_s = channel_gram(g, student.d_levels[k], opts.gram_normalize)?;
        *term = channel_relation_loss(g, gram_t, gram_s)?;
    }
    let l_c = mean3(g, c_terms)?;

    let mut objective = l_seg;
    if opts.lambda1 != 0.0 {
        let weighted = g.scale(l_vl, opts.lambda1)?;
        objective = g.add(objective, weighted)?;
    }
    if opts.lambda2 != 0.0 {
        let weighted = g.scale(l_c, opts.lambda2)?;
        objective = g.add(objective, weighted)?;
    }
    let bundle = LossBundle::new(
        seg_value,
        g.value(l_vl).item().to_f64(),
        g.value(l_c).item().to_f64(),
        opts.lambda1,
        opts.lambda2,
    );
    Ok((
        LossNodes {
            l_seg,
            l_vl: Some(l_vl),
            l_c: Some(l_c),
            objective,
        },
        bundle,
    ))
}

fn mean3<R: Real>(g: &mut Graph<'_, R>, terms: [NodeId; 3]) -> Result<NodeId> {
    let s = g.add(terms[0], terms[1])?;
    let s = g.add(s, terms[2])?;
    g.scale(s, 1.0 / 3.0)
}
