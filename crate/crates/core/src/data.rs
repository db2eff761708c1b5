//! Synthetic referring-segmentation scenes.
//!
//! A scene holds two to four non-overlapping coloured shapes on a grey canvas.
//! One of them is the target, described by a templated expression
//! `the <color> <shape> [at the <position>]`. With `appearance_only` the
//! position clause is dropped and scenes are drawn until colour and shape alone
//! single out the target.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::Runner;
use crate::kernels::sigmoid;
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor};

/// Expressions are padded to this many tokens.
pub const MAX_TEXT_LEN: usize = 20;
pub const PAD: u16 = 0;
pub const BACKGROUND: f32 = 0.5;
pub const MAX_ATTEMPTS: usize = 1000;
pub const CANVAS_SIZES: [usize; 3] = [48, 64, 96];

const TOKENS: [&str; 18] = [
    "<pad>", "the", "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "left", "right", "top", "bottom", "center",
    "on", "side", "at",
];

/// The fixed token inventory. Id 0 is padding.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn len(&self) -> usize {
        TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &'static [&'static str] {
        &TOKENS
    }

    pub fn id(&self, token: &str) -> Option<u16> {
        TOKENS.iter().position(|t| *t == token).map(|i| i as u16)
    }

    pub fn token(&self, id: u16) -> Option<&'static str> {
        TOKENS.get(id as usize).copied()
    }

    /// Pads `words` to [`MAX_TEXT_LEN`] ids; returns the ids and the real length.
    pub fn encode(&self, words: &[&str]) -> Result<([u16; MAX_TEXT_LEN], usize)> {
        if words.len() > MAX_TEXT_LEN {
            return Err(Error::TextTooLong {
                len: words.len(),
                max: MAX_TEXT_LEN,
            });
        }
        let mut ids = [PAD; MAX_TEXT_LEN];
        for (slot, w) in ids.iter_mut().zip(words) {
            *slot = self
                .id(w)
                .ok_or_else(|| Error::InvalidConfig(alloc::format!("word `{w}` is not in the vocabulary")))?;
        }
        Ok((ids, words.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.15, 0.3, 0.9],
            Color::Yellow => [0.9, 0.85, 0.15],
        }
    }
}

/// Cell of a 3x3 grid over the canvas, as `(row, col)` with 0 = top/left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn words(self) -> &'static [&'static str] {
        match (self.row, self.col) {
            (0, 0) => &["top", "left"],
            (0, 1) => &["top"],
            (0, _) => &["top", "right"],
            (1, 0) => &["left", "side"],
            (1, 1) => &["center"],
            (1, _) => &["right", "side"],
            (_, 0) => &["bottom", "left"],
            (_, 1) => &["bottom"],
            (_, _) => &["bottom", "right"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    /// Centre in canvas coordinates; pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.
    pub center: (u32, u32),
    /// Circumradius in pixels; every shape lies strictly inside this circle.
    pub size: u32,
}

impl SceneObject {
    pub fn cell(&self, canvas: usize) -> Cell {
        let bin = |v: u32| ((v as usize * 3) / canvas).min(2) as u8;
        Cell {
            row: bin(self.center.1),
            col: bin(self.center.0),
        }
    }

    /// Hard membership test at a pixel centre.
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let dx = px as f64 + 0.5 - self.center.0 as f64;
        let dy = py as f64 + 0.5 - self.center.1 as f64;
        let r = self.size as f64;
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy < r * r,
            ShapeKind::Square => {
                let h = r * core::f64::consts::FRAC_1_SQRT_2;
                dx.abs() < h && dy.abs() < h
            }
            ShapeKind::Triangle => {
                // Upward equilateral triangle inscribed in the circumcircle.
                let s3 = libm::sqrt(3.0);
                let apex = (0.0, -r);
                let left = (-r * s3 / 2.0, r / 2.0);
                let right = (r * s3 / 2.0, r / 2.0);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e1, e2, e3) = (edge(apex, right), edge(right, left), edge(left, apex));
                e1 > 0.0 && e2 > 0.0 && e3 > 0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

impl SceneSpec {
    /// True when the target's description (appearance, plus cell unless
    /// `appearance_only`) matches no other object.
    pub fn target_is_unique(&self, appearance_only: bool) -> bool {
        let t = &self.objects[self.target];
        let tc = t.cell(self.canvas);
        !self
            .objects
            .iter()
            .enumerate()
            .any(|(i, o)| i != self.target && o.shape == t.shape && o.color == t.color && (appearance_only || o.cell(self.canvas) == tc))
    }

    pub fn target_object(&self) -> &SceneObject {
        &self.objects[self.target]
    }
}

fn size_range(canvas: usize) -> (u32, u32) {
    ((canvas / 10) as u32, (canvas / 6) as u32)
}

/// Draws a valid scene from `seed`, rejection-sampling placements and target
/// choices. Fails after [`MAX_ATTEMPTS`] rejections.
pub fn generate_scene(seed: u64, canvas: usize, appearance_only: bool) -> Result<SceneSpec> {
    if !CANVAS_SIZES.contains(&canvas) {
        return Err(Error::InvalidConfig(alloc::format!(
            "canvas must be one of {CANVAS_SIZES:?}, got {canvas}"
        )));
    }
    let mut rng = CounterRng::new(seed);
    let (lo, hi) = size_range(canvas);
    let mut rejections = 0;
    while rejections < MAX_ATTEMPTS {
        let count = 2 + rng.below(3);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        while objects.len() < count && rejections < MAX_ATTEMPTS {
            let size = lo + rng.below((hi - lo + 1) as usize) as u32;
            let span = canvas as u32 - 2 * size;
            let center = (
                size + rng.below(span as usize + 1) as u32,
                size + rng.below(span as usize + 1) as u32,
            );
            let candidate = SceneObject {
                shape: ShapeKind::ALL[rng.below(3)],
                color: Color::ALL[rng.below(4)],
                center,
                size,
            };
            let clear = objects.iter().all(|o| {
                let dx = o.center.0 as i64 - center.0 as i64;
                let dy = o.center.1 as i64 - center.1 as i64;
                let reach = (o.size + size) as i64;
                dx * dx + dy * dy >= reach * reach
            });
            if clear {
                objects.push(candidate);
            } else {
                rejections += 1;
            }
        }
        if objects.len() < count {
            break;
        }
        let scene = SceneSpec {
            canvas,
            target: rng.below(count),
            objects,
        };
        if scene.target_is_unique(appearance_only) {
            return Ok(scene);
        }
        rejections += 1;
    }
    Err(Error::GenerationExhausted { attempts: MAX_ATTEMPTS })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    /// `(canvas, canvas, 3)` RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    /// One row-major pixel mask per object.
    pub masks: Vec<Vec<bool>>,
}

/// Hard rasterisation on a grey background; later objects paint over earlier
/// ones, so masks always partition the painted pixels.
pub fn render(scene: &SceneSpec) -> Rendered {
    let c = scene.canvas;
    let mut image = vec![BACKGROUND; c * c * 3];
    let mut owner: Vec<Option<usize>> = vec![None; c * c];
    for (k, obj) in scene.objects.iter().enumerate() {
        let r = obj.size as usize + 1;
        let (cx, cy) = (obj.center.0 as usize, obj.center.1 as usize);
        for y in cy.saturating_sub(r)..(cy + r).min(c) {
            for x in cx.saturating_sub(r)..(cx + r).min(c) {
                if obj.contains(x, y) {
                    owner[y * c + x] = Some(k);
                    image[(y * c + x) * 3..][..3].copy_from_slice(&obj.color.rgb());
                }
            }
        }
    }
    let masks = (0..scene.objects.len())
        .map(|k| owner.iter().map(|o| *o == Some(k)).collect())
        .collect();
    Rendered {
        image: Tensor::new(&[c, c, 3], image).expect("canvas shape"),
        masks,
    }
}

/// Template expression for the scene's target.
pub fn make_expression(scene: &SceneSpec, appearance_only: bool) -> Result<Vec<&'static str>> {
    if !scene.target_is_unique(appearance_only) {
        return Err(Error::NotUnique);
    }
    let t = scene.target_object();
    let mut words = vec!["the", t.color.word(), t.shape.word()];
    if !appearance_only {
        words.extend_from_slice(&["at", "the"]);
        words.extend_from_slice(t.cell(scene.canvas).words());
    }
    Ok(words)
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferringSample {
    pub image: Tensor<f32>,
    pub token_ids: [u16; MAX_TEXT_LEN],
    pub real_len: u8,
    /// Row-major target mask over the canvas.
    pub mask: Vec<bool>,
}

impl ReferringSample {
    pub fn canvas(&self) -> usize {
        self.image.shape()[0]
    }

    /// `true` for real tokens, `false` for padding.
    pub fn key_mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| t != PAD).collect()
    }

    /// Image as the model consumes it.
    pub fn image_as<R: Real>(&self) -> Tensor<R> {
        self.image.cast()
    }

    /// Target as a `(H, W, 1)` tensor of zeros and ones.
    pub fn mask_tensor<R: Real>(&self) -> Tensor<R> {
        let c = self.canvas();
        let data = self.mask.iter().map(|&m| if m { R::ONE } else { R::ZERO }).collect();
        Tensor::new(&[c, c, 1], data).expect("mask shape")
    }
}

/// Scene seed for sample `index` of a dataset drawn with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    CounterRng::keyed(seed, index).next_u64()
}

pub fn generate_sample(seed: u64, index: u64, canvas: usize, appearance_only: bool) -> Result<(SceneSpec, ReferringSample)> {
    let scene = generate_scene(sample_seed(seed, index), canvas, appearance_only)?;
    let rendered = render(&scene);
    let words = make_expression(&scene, appearance_only)?;
    let (token_ids, real_len) = Vocabulary.encode(&words)?;
    let mask = rendered.masks[scene.target].clone();
    let sample = ReferringSample {
        image: rendered.image,
        token_ids,
        real_len: real_len as u8,
        mask,
    };
    Ok((scene, sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub canvas: usize,
    pub appearance_only: bool,
}

/// Samples `0..count`; each depends only on `(seed, index)`.
pub fn generate_dataset(spec: &DatasetSpec, runner: &impl Runner) -> Result<Vec<ReferringSample>> {
    runner
        .map(spec.count, |i| {
            generate_sample(spec.seed, i as u64, spec.canvas, spec.appearance_only).map(|(_, s)| s)
        })
        .into_iter()
        .collect()
}

/// Binarises logits at probability 0.5.
pub fn predict_mask<R: Real>(logits: &Tensor<R>) -> Vec<bool> {
    logits.data().iter().map(|&x| sigmoid(x) > R::from_f64(0.5)).collect()
}

/// `|P ∩ G| / |P ∪ G|`, or 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-sample IoU.
pub fn miou(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            left: vec![preds.len()],
            right: vec![gts.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += iou(p, g)?;
    }
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_a_bijection_with_pad_zero() {
        let v = Vocabulary;
        assert_eq!(v.id("<pad>"), Some(PAD));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u16));
            assert_eq!(v.token(i as u16), Some(*t));
        }
        assert_eq!(v.token(18), None);
    }

    #[test]
    fn top_left_red_circle_expression() {
        let scene = SceneSpec {
            canvas: 64,
            objects: vec![
                SceneObject {
                    shape: ShapeKind::Circle,
                    color: Color::Red,
                    center: (10, 10),
                    size: 7,
                },
                SceneObject {
                    shape: ShapeKind::Square,
                    color: Color::Blue,
                    center: (50, 50),
                    size: 7,
                },
            ],
            target: 0,
        };
        assert_eq!(
            make_expression(&scene, false).unwrap(),
            ["the", "red", "circle", "at", "the", "top", "left"]
        );
    }

    #[test]
    fn appearance_only_drops_location() {
        let mut objects = vec![SceneObject {
            shape: ShapeKind::Square,
            color: Color::Red,
            center: (32, 32),
            size: 6,
        }];
        for (i, cx) in [10u32, 54].into_iter().enumerate() {
            objects.push(SceneObject {
                shape: ShapeKind::Circle,
                color: Color::Blue,
                center: (cx, 10 + 40 * i as u32),
                size: 6,
            });
        }
        let scene = SceneSpec {
            canvas: 64,
            objects,
            target: 0,
        };
        assert_eq!(make_expression(&scene, true).unwrap(), ["the", "red", "square"]);
        let ambiguous = SceneSpec { target: 1, ..scene };
        assert_eq!(make_expression(&ambiguous, true), Err(Error::NotUnique));
    }

    #[test]
    fn empty_canvas_is_background() {
        let scene = SceneSpec {
            canvas: 48,
            objects: vec![SceneObject {
                shape: ShapeKind::Triangle,
                color: Color::Green,
                center: (8, 8),
                size: 5,
            }],
            target: 0,
        };
        let r = render(&scene);
        let far = (40 * 48 + 40) * 3;
        assert_eq!(&r.image.data()[far..far + 3], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn miou_partial_overlap() {
        let p = vec![true, true, false, false];
        let g = vec![true, true, true, false];
        let m = miou(&[p], &[g]).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(miou(&[vec![false; 3]], &[vec![false; 3]]).unwrap(), 1.0);
        assert_eq!(miou(&[vec![true, false]], &[vec![false, true]]).unwrap(), 0.0);
    }

    #[test]
    fn bad_canvas_rejected() {
        assert!(matches!(generate_scene(0, 50, false), Err(Error::InvalidConfig(_))));
    }
}
