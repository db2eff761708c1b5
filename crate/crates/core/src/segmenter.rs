//! Teacher/student referring segmenter.
//!
//! Both roles share one architecture: a five-stage residual conv encoder, a
//! token embedding plus self-attention text encoder, cross-modal fusion on
//! stages 3-5, an FPN decoder and an upsampling head producing one logit per
//! pixel. Teacher and student differ only in [`EncoderConfig`] widths and
//! depths; stride schedule, fusion width and decoder width are shared so the
//! correlation and channel Gram matrices line up for distillation.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{ReferringSample, Vocabulary, MAX_TEXT_LEN, PAD};
use crate::error::{Error, Result};
use crate::fusion::{fuse_stage, linear, FusionStageParams, FusionState, MASKED_SCORE};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::init::{Affine, Initializer};
use crate::tensor::{Real, Tensor};

pub const NUM_STAGES: usize = 5;
/// Visual stages that receive language fusion (0-based: stages 3, 4, 5).
pub const FUSED_STAGES: [usize; 3] = [2, 3, 4];
pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channels `C_1..C_5`.
    pub visual_widths: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    pub text_layers: usize,
    /// Token hidden size `D`.
    pub text_dim: usize,
    /// Shared projection width `C'`.
    pub fusion_dim: usize,
    /// Decoder channels `C_d`.
    pub decoder_width: usize,
    /// Entry-conv stride per stage; 2 everywhere by default.
    pub stage_strides: [usize; NUM_STAGES],
}

impl EncoderConfig {
    pub fn teacher() -> Self {
        EncoderConfig {
            visual_widths: [16, 32, 64, 96, 128],
            blocks_per_stage: 2,
            text_layers: 4,
            text_dim: 96,
            fusion_dim: 64,
            decoder_width: 64,
            stage_strides: [2; NUM_STAGES],
        }
    }

    pub fn student() -> Self {
        EncoderConfig {
            visual_widths: [8, 16, 32, 48, 64],
            blocks_per_stage: 1,
            text_layers: 2,
            text_dim: 48,
            fusion_dim: 64,
            decoder_width: 64,
            stage_strides: [2; NUM_STAGES],
        }
    }

    /// Smallest sensible network, used for finite-difference checks on 8x8 inputs.
    pub fn tiny() -> Self {
        EncoderConfig {
            visual_widths: [2, 2, 3, 3, 4],
            blocks_per_stage: 1,
            text_layers: 1,
            text_dim: 4,
            fusion_dim: 3,
            decoder_width: 3,
            stage_strides: [2, 2, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.visual_widths.iter().all(|&w| w > 0) && self.text_dim > 0 && self.fusion_dim > 0 && self.decoder_width > 0;
        if !positive {
            return Err(Error::InvalidConfig("widths must be positive".into()));
        }
        if self.stage_strides.iter().any(|&s| !matches!(s, 1 | 2)) {
            return Err(Error::InvalidConfig("stage strides must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Total downsampling factor of the encoder.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Spatial extent of every stage for a square input of side `input`.
    pub fn stage_sizes(&self, input: usize) -> [usize; NUM_STAGES] {
        let mut size = input;
        core::array::from_fn(|i| {
            size = size.div_ceil(self.stage_strides[i]);
            size
        })
    }

    /// Channel count of head step `k` (counting upsamplings from stage 3).
    pub fn head_width(&self, k: usize) -> usize {
        (self.decoder_width >> (k + 2)).max(self.decoder_width.min(8))
    }

    /// Checks the teacher/student alignment needed by the relational losses.
    pub fn compatible_with(&self, other: &EncoderConfig) -> Result<()> {
        if self.stage_strides != other.stage_strides {
            return Err(Error::IncompatibleTeacher("stride schedules differ".into()));
        }
        if self.decoder_width != other.decoder_width {
            return Err(Error::IncompatibleTeacher(format!(
                "decoder widths differ ({} vs {})",
                self.decoder_width, other.decoder_width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelOptions {
    /// Scaled softmax over real tokens instead of the raw correlation.
    pub softmax_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResidualBlock {
    conv1: Affine,
    conv2: Affine,
    gain: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct VisualStage {
    entry: Affine,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TextLayer {
    query: Affine,
    key: Affine,
    value: Affine,
    out: Affine,
    attn_gain: ParamId,
    ff1: Affine,
    ff2: Affine,
    ff_gain: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    stages: Vec<VisualStage>,
    embed: ParamId,
    text: Vec<TextLayer>,
    fusion: [FusionStageParams; 3],
    lateral: [Affine; 3],
    smooth: [Affine; 3],
    head: Vec<Affine>,
    logit: Affine,
}

/// Output stages `V_1..V_5` of the visual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualFeatures {
    pub stages: [NodeId; NUM_STAGES],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextFeatures {
    /// `L x D` token features.
    pub t: NodeId,
    pub key_mask: Vec<bool>,
}

/// Everything the losses need from one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelOutputs {
    pub fusion: [FusionState; 3],
    /// Correlation matrices of stages 3, 4, 5.
    pub a_stages: [NodeId; 3],
    /// Decoder maps at stage 3, 4, 5 resolution, `C_d` channels each.
    pub d_levels: [NodeId; 3],
    /// `(H0, W0, 1)` segmentation logits.
    pub logits: NodeId,
    pub key_mask: Vec<bool>,
}

/// Detached copies of the tensors the relational losses compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTargets<R> {
    pub a_stages: [Tensor<R>; 3],
    pub d_levels: [Tensor<R>; 3],
}

impl ModelOutputs {
    pub fn detach<R: Real>(&self, g: &Graph<'_, R>) -> RelationTargets<R> {
        RelationTargets {
            a_stages: self.a_stages.map(|id| g.value(id).clone()),
            d_levels: self.d_levels.map(|id| g.value(id).clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter<R: Real> {
    pub cfg: EncoderConfig,
    pub options: ModelOptions,
    pub params: ParamStore<R>,
    layout: Layout,
}

impl<R: Real> Segmenter<R> {
    pub fn new(cfg: EncoderConfig, options: ModelOptions, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let layout = {
            let mut init = Initializer::new(&mut params, seed);
            build_layout(&cfg, &mut init)?
        };
        Ok(Segmenter {
            cfg,
            options,
            params,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn fusion_params(&self) -> &[FusionStageParams; 3] {
        &self.layout.fusion
    }

    pub fn visual_encode(&self, g: &mut Graph<'_, R>, image: &Tensor<R>) -> Result<VisualFeatures> {
        let (h, w, c) = image.dims3("visual_encode")?;
        let stride = self.cfg.total_stride();
        if c != 3 || h % stride != 0 || w % stride != 0 {
            return Err(Error::ShapeMismatch {
                op: "visual_encode",
                left: image.shape().to_vec(),
                right: alloc::vec![stride, stride, 3],
            });
        }
        let centered = image.map(|v| v - R::from_f64(0.5));
        let mut x = g.constant(centered)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (stage, &s) in self.layout.stages.iter().zip(&self.cfg.stage_strides) {
            x = conv(g, x, stage.entry, s)?;
            x = g.relu(x)?;
            for block in &stage.blocks {
                let mut y = conv(g, x, block.conv1, 1)?;
                y = g.relu(y)?;
                y = conv(g, y, block.conv2, 1)?;
                let gain = g.param(block.gain);
                y = g.mul_channels(y, gain)?;
                y = g.add(x, y)?;
                x = g.relu(y)?;
            }
            stages.push(x);
        }
        Ok(VisualFeatures {
            stages: stages.try_into().expect("five stages"),
        })
    }

    pub fn text_encode(&self, g: &mut Graph<'_, R>, token_ids: &[u16]) -> Result<TextFeatures> {
        if token_ids.len() > MAX_TEXT_LEN {
            return Err(Error::TextTooLong {
                len: token_ids.len(),
                max: MAX_TEXT_LEN,
            });
        }
        let vocab = Vocabulary.len();
        let mut ids = [PAD as usize; MAX_TEXT_LEN];
        for (slot, &id) in ids.iter_mut().zip(token_ids) {
            if id as usize >= vocab {
                return Err(Error::UnknownTokenId(id));
            }
            *slot = id as usize;
        }
        let key_mask: Vec<bool> = ids.iter().map(|&id| id != PAD as usize).collect();
        let embed = g.param(self.layout.embed);
        let mut t = g.gather_rows(embed, &ids)?;
        if self.layout.text.is_empty() {
            return Ok(TextFeatures { t, key_mask });
        }
        let bias_row: Vec<f64> = key_mask.iter().map(|&m| if m { 0.0 } else { MASKED_SCORE }).collect();
        let bias_data: Vec<f64> = (0..MAX_TEXT_LEN).flat_map(|_| bias_row.iter().copied()).collect();
        let bias = Tensor::<R>::from_f64(&[MAX_TEXT_LEN, MAX_TEXT_LEN], &bias_data)?;
        let inv_sqrt_d = 1.0 / libm::sqrt(self.cfg.text_dim as f64);
        for layer in &self.layout.text {
            let q = linear(g, t, layer.query)?;
            let k = linear(g, t, layer.key)?;
            let v = linear(g, t, layer.value)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_d)?;
            let bias = g.constant(bias.clone())?;
            let scores = g.add(scores, bias)?;
            let attn = g.softmax_rows(scores)?;
            let mixed = g.matmul(attn, v)?;
            let mixed = linear(g, mixed, layer.out)?;
            let gain = g.param(layer.attn_gain);
            let mixed = g.mul_channels(mixed, gain)?;
            t = g.add(t, mixed)?;
            let hidden = linear(g, t, layer.ff1)?;
            let hidden = g.relu(hidden)?;
            let ff = linear(g, hidden, layer.ff2)?;
            let gain = g.param(layer.ff_gain);
            let ff = g.mul_channels(ff, gain)?;
            t = g.add(t, ff)?;
        }
        Ok(TextFeatures { t, key_mask })
    }

    /// FPN over the fused stages 3-5, then the upsampling head.
    ///
    /// Returns the decoder maps `[D_3, D_4, D_5]` and the logits.
    pub fn decode_fpn(&self, g: &mut Graph<'_, R>, fused: &[NodeId; 3], out_size: usize) -> Result<([NodeId; 3], NodeId)> {
        let mut d_levels = [fused[0]; 3];
        let mut above: Option<NodeId> = None;
        for level in (0..3).rev() {
            let mut p = conv(g, fused[level], self.layout.lateral[level], 1)?;
            if let Some(up) = above {
                let up = match_resolution(g, up, g.shape(p)[0])?;
                p = g.add(p, up)?;
            }
            let d = conv(g, p, self.layout.smooth[level], 1)?;
            let d = g.relu(d)?;
            d_levels[level] = d;
            above = Some(d);
        }
        let mut x = d_levels[0];
        for step in &self.layout.head {
            if g.shape(x)[0] >= out_size {
                break;
            }
            x = g.upsample_nearest2x(x)?;
            x = conv(g, x, *step, 1)?;
            x = g.relu(x)?;
        }
        if g.shape(x)[0] != out_size {
            return Err(Error::ShapeMismatch {
                op: "decode_fpn",
                left: g.shape(x).to_vec(),
                right: alloc::vec![out_size, out_size],
            });
        }
        let logits = conv(g, x, self.layout.logit, 1)?;
        Ok((d_levels, logits))
    }

    /// Full forward pass for one image and token sequence.
    pub fn forward_parts(&self, g: &mut Graph<'_, R>, image: &Tensor<R>, token_ids: &[u16]) -> Result<ModelOutputs> {
        let visual = self.visual_encode(g, image)?;
        let text = self.text_encode(g, token_ids)?;
        let mut fusion = Vec::with_capacity(3);
        for (k, &stage) in FUSED_STAGES.iter().enumerate() {
            fusion.push(fuse_stage(
                g,
                visual.stages[stage],
                text.t,
                &text.key_mask,
                &self.layout.fusion[k],
                self.options.softmax_norm,
            )?);
        }
        let fusion: [FusionState; 3] = fusion.try_into().expect("three fused stages");
        let fused = fusion.map(|f| f.fused);
        let (d_levels, logits) = self.decode_fpn(g, &fused, image.shape()[0])?;
        Ok(ModelOutputs {
            a_stages: fusion.map(|f| f.a),
            fusion,
            d_levels,
            logits,
            key_mask: text.key_mask,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_, R>, sample: &ReferringSample) -> Result<ModelOutputs> {
        self.forward_parts(g, &sample.image_as(), &sample.token_ids)
    }

    /// Teacher-side targets from an untracked pass.
    pub fn relation_targets(&self, sample: &ReferringSample) -> Result<RelationTargets<R>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, sample)?;
        Ok(out.detach(&g))
    }

    /// Logits from an untracked pass.
    pub fn predict(&self, sample: &ReferringSample) -> Result<Tensor<R>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, sample)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Mean per-pixel binary cross-entropy of `(H, W, 1)` logits against a
/// row-major binary mask.
pub fn seg_loss<R: Real>(g: &mut Graph<'_, R>, logits: NodeId, mask: &[bool]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.iter().product::<usize>() != mask.len() || shape.last() != Some(&1) {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            left: shape,
            right: alloc::vec![mask.len()],
        });
    }
    let target = mask.iter().map(|&m| if m { R::ONE } else { R::ZERO }).collect();
    let target = Tensor::new(&shape, target)?;
    g.bce_with_logits(logits, &target)
}

fn conv<R: Real>(g: &mut Graph<'_, R>, x: NodeId, p: Affine, stride: usize) -> Result<NodeId> {
    let w = g.param(p.w);
    let b = g.param(p.b);
    let y = g.conv2d(x, w, stride)?;
    g.add_bias(y, b)
}

/// Brings a coarser map up to side `size` (identity or nearest 2x).
fn match_resolution<R: Real>(g: &mut Graph<'_, R>, x: NodeId, size: usize) -> Result<NodeId> {
    let have = g.shape(x)[0];
    if have == size {
        Ok(x)
    } else if 2 * have == size {
        g.upsample_nearest2x(x)
    } else {
        Err(Error::ShapeMismatch {
            op: "fpn_top_down",
            left: g.shape(x).to_vec(),
            right: alloc::vec![size, size],
        })
    }
}

fn build_layout<R: Real>(cfg: &EncoderConfig, init: &mut Initializer<'_, R>) -> Result<Layout> {
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut c_in = 3;
    for (i, &c) in cfg.visual_widths.iter().enumerate() {
        let entry = Affine::conv(init, &format!("visual.stage{}.entry", i + 1), 3, c_in, c)?;
        let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
        for b in 0..cfg.blocks_per_stage {
            let name = format!("visual.stage{}.block{b}", i + 1);
            blocks.push(ResidualBlock {
                conv1: Affine::conv(init, &format!("{name}.conv1"), 3, c, c)?,
                conv2: Affine::conv(init, &format!("{name}.conv2"), 3, c, c)?,
                gain: init.zeros(&format!("{name}.gain"), &[c])?,
            });
        }
        stages.push(VisualStage { entry, blocks });
        c_in = c;
    }

    let d = cfg.text_dim;
    let embed = init.normal("text.embed", &[Vocabulary.len(), d], EMBED_STD)?;
    let mut text = Vec::with_capacity(cfg.text_layers);
    for l in 0..cfg.text_layers {
        let name = format!("text.layer{l}");
        text.push(TextLayer {
            query: Affine::linear(init, &format!("{name}.query"), d, d)?,
            key: Affine::linear(init, &format!("{name}.key"), d, d)?,
            value: Affine::linear(init, &format!("{name}.value"), d, d)?,
            out: Affine::linear(init, &format!("{name}.out"), d, d)?,
            attn_gain: init.zeros(&format!("{name}.attn_gain"), &[d])?,
            ff1: Affine::linear(init, &format!("{name}.ff1"), d, 2 * d)?,
            ff2: Affine::linear(init, &format!("{name}.ff2"), 2 * d, d)?,
            ff_gain: init.zeros(&format!("{name}.ff_gain"), &[d])?,
        });
    }

    let mut fusion = Vec::with_capacity(3);
    for &s in &FUSED_STAGES {
        fusion.push(FusionStageParams::new(
            init,
            &format!("fusion.stage{}", s + 1),
            cfg.visual_widths[s],
            d,
            cfg.fusion_dim,
        )?);
    }

    let cd = cfg.decoder_width;
    let mut lateral = Vec::with_capacity(3);
    let mut smooth = Vec::with_capacity(3);
    for &s in &FUSED_STAGES {
        lateral.push(Affine::conv(
            init,
            &format!("decoder.lateral{}", s + 1),
            1,
            cfg.visual_widths[s],
            cd,
        )?);
        smooth.push(Affine::conv(init, &format!("decoder.smooth{}", s + 1), 3, cd, cd)?);
    }

    // One head step per factor of two between stage 3 and the input.
    let steps = cfg.stage_strides[..FUSED_STAGES[0] + 1].iter().filter(|&&s| s == 2).count();
    let mut head = Vec::with_capacity(steps);
    let mut c = cd;
    for k in 0..steps {
        let out = cfg.head_width(k);
        head.push(Affine::conv(init, &format!("head.up{k}"), 3, c, out)?);
        c = out;
    }
    let logit = Affine::conv(init, "head.logit", 1, c, 1)?;

    Ok(Layout {
        stages,
        embed,
        text,
        fusion: fusion.try_into().expect("three fusion stages"),
        lateral: lateral.try_into().expect("three laterals"),
        smooth: smooth.try_into().expect("three smoothers"),
        head,
        logit,
    })
}
