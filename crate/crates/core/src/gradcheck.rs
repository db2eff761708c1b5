//! Central-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{ReferringSample, Vocabulary, MAX_TEXT_LEN, PAD};
use crate::distill::{total_loss, DistillOptions};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::segmenter::{EncoderConfig, ModelOptions, Segmenter};
use crate::tensor::{Real, Tensor};

/// Magnitude below which errors are measured in absolute rather than
/// relative terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|g_a - g_n| / max(|g_a|, |g_n|, REL_FLOOR)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval<R: Real, F>(params: &ParamStore<R>, f: &mut F) -> Result<(f64, Option<crate::graph::Gradients<R>>)>
where
    F: FnMut(&mut Graph<'_, R>) -> Result<NodeId>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    let v = g.value(loss).item().to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((v, Some(g.backward(loss)?)))
}

fn probe<R: Real, F>(params: &ParamStore<R>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_, R>) -> Result<NodeId>,
{
    let mut g = Graph::inference(params);
    let loss = f(&mut g)?;
    let v = g.value(loss).item().to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares the analytic gradient of `f` against `(f(x+eps) - f(x-eps)) / 2eps`
/// for every coordinate of every parameter in `params`.
///
/// `f` builds the scalar loss on the graph it is handed. Parameter values are
/// restored before returning.
pub fn grad_check<R: Real, F>(params: &mut ParamStore<R>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, R>) -> Result<NodeId>,
{
    let (_, grads) = eval(params, &mut f)?;
    let grads = grads.expect("tracked evaluation");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for p in 0..params.len() {
        let id = ParamId(p);
        let n = params.value(id).len();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = R::from_f64(orig.to_f64() + eps);
            let up = probe(params, &mut f);
            params.get_mut(id).value.data_mut()[i] = R::from_f64(orig.to_f64() - eps);
            let down = probe(params, &mut f);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i].to_f64());
            let rel = (analytic - numeric).abs() / REL_FLOOR.max(analytic.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Side length of the image used by [`distill_objective_check`].
pub const CHECK_CANVAS: usize = 8;
/// Real tokens in the expression used by [`distill_objective_check`].
pub const CHECK_TOKENS: usize = 4;

/// Overwrites every parameter with a uniform draw from `[-scale, scale]`, so
/// that zero-initialised paths are exercised.
pub fn randomize<R: Real>(params: &mut ParamStore<R>, seed: u64, scale: f64) {
    let mut rng = CounterRng::keyed(seed, 0x6772_6164);
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v = R::from_f64(rng.uniform(-scale, scale));
        }
    }
}

/// Random 8x8 sample with a 4-token expression and a non-empty mask.
pub fn check_sample(seed: u64) -> ReferringSample {
    let mut rng = CounterRng::keyed(seed, 0x7361_6d70);
    let c = CHECK_CANVAS;
    let image: Vec<f32> = (0..c * c * 3).map(|_| rng.next_f64() as f32).collect();
    let mut token_ids = [PAD; MAX_TEXT_LEN];
    for id in token_ids.iter_mut().take(CHECK_TOKENS) {
        *id = 1 + rng.below(Vocabulary.len() - 1) as u16;
    }
    let mut mask: Vec<bool> = (0..c * c).map(|_| rng.next_f64() < 0.3).collect();
    mask[rng.below(c * c)] = true;
    ReferringSample {
        image: Tensor::new(&[c, c, 3], image).expect("image shape"),
        token_ids,
        real_len: CHECK_TOKENS as u8,
        mask,
    }
}

/// Gradient check of the complete distillation objective of a
/// [`EncoderConfig::tiny`] student against a tiny teacher, in `f64`.
pub fn distill_objective_check(seed: u64, eps: f64, opts: &DistillOptions, options: ModelOptions) -> Result<GradCheckReport> {
    let cfg = EncoderConfig::tiny();
    let mut teacher = Segmenter::<f64>::new(cfg.clone(), options, seed ^ 0x7465)?;
    randomize(&mut teacher.params, seed ^ 0x7465, 0.5);
    let mut student = Segmenter::<f64>::new(cfg, options, seed)?;
    randomize(&mut student.params, seed, 0.5);
    let sample = check_sample(seed);
    let targets = teacher.relation_targets(&sample)?;
    let mut params = core::mem::take(&mut student.params);
    let report = grad_check(&mut params, eps, |g| {
        let out = student.forward(g, &sample)?;
        let (nodes, _) = total_loss(g, &out, Some(&targets), &sample.mask, opts)?;
        Ok(nodes.objective)
    });
    student.params = params;
    report
}
