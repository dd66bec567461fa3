//! Synthetic video: coloured rectangles drifting over a noise background,
//! with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Detection, TruthBox};
use crate::error::{Error, Result};
use crate::lpn::ForegroundMaskSet;
use crate::tensor::Tensor;

/// Smallest object side accepted by [`SequenceSpec::validate`].
pub const MIN_OBJECT_SIDE: f32 = 8.0;
/// Objects are drawn on one RGB channel each.
pub const MAX_CLASSES: usize = 3;

fn one() -> f32 {
    1.0
}

fn default_noise() -> f32 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Box at frame 0.
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Centre displacement per frame, `[dx, dy]` pixels.
    #[serde(default)]
    pub velocity: [f32; 2],
    /// Per-frame scale factor applied to width and height.
    #[serde(default = "one")]
    pub growth: f32,
    #[serde(default = "one")]
    pub intensity: f32,
    #[serde(default)]
    pub class_id: usize,
}

impl ObjectSpec {
    pub fn box_at(&self, frame: usize) -> BBox {
        let t = frame as f32;
        let (cx, cy) = self.bbox.center();
        let (cx, cy) = (cx + self.velocity[0] * t, cy + self.velocity[1] * t);
        let g = self.growth.powi(frame as i32);
        let (hw, hh) = (self.bbox.width() * g * 0.5, self.bbox.height() * g * 0.5);
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Background pixels are uniform in `[0, noise]`.
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return bad("num_frames, height and width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        let (w, h) = (self.width as f32, self.height as f32);
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= MAX_CLASSES {
                return bad(format!("object {i}: class {} >= {MAX_CLASSES}", o.class_id));
            }
            if !(o.intensity > 0.0 && o.intensity <= 1.0) {
                return bad(format!("object {i}: intensity {} outside (0, 1]", o.intensity));
            }
            if !(o.growth > 0.0) || !o.velocity.iter().all(|v| v.is_finite()) {
                return bad(format!("object {i}: growth must be positive and velocity finite"));
            }
            for t in 0..self.num_frames {
                let b = o.box_at(t);
                if b.width() < MIN_OBJECT_SIDE || b.height() < MIN_OBJECT_SIDE {
                    return bad(format!("object {i} is smaller than {MIN_OBJECT_SIDE} px at frame {t}"));
                }
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                    return bad(format!("object {i} leaves the image at frame {t}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<Vec<TruthBox>>,
}

impl GroundTruth {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &[TruthBox] {
        self.frames.get(t).map_or(&[], Vec::as_slice)
    }
}

/// Frame `t` alone. Pixels whose centre lies in an object box take the
/// object's intensity on its class channel.
pub fn render_frame(spec: &SequenceSpec, t: usize) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(t as u64);
    let mut img = Tensor::from_fn(&[3, h, w], |_| {
        if spec.noise > 0.0 {
            rng.gen::<f32>() * spec.noise
        } else {
            0.0
        }
    });
    for o in &spec.objects {
        let b = o.box_at(t);
        let xa = (b.x1 - 0.5).ceil().max(0.0) as usize;
        let xb = ((b.x2 - 0.5).floor() as usize).min(w - 1);
        let ya = (b.y1 - 0.5).ceil().max(0.0) as usize;
        let yb = ((b.y2 - 0.5).floor() as usize).min(h - 1);
        let plane = img.channel_mut(o.class_id);
        for y in ya..=yb {
            for x in xa..=xb {
                let p = &mut plane[y * w + x];
                *p = p.max(o.intensity);
            }
        }
    }
    img
}

pub fn truth_at(spec: &SequenceSpec, t: usize) -> Vec<TruthBox> {
    spec.objects
        .iter()
        .map(|o| TruthBox {
            bbox: o.box_at(t),
            class_id: o.class_id,
        })
        .collect()
}

/// Renders every frame; same spec gives bitwise-identical output.
pub fn generate(spec: &SequenceSpec) -> Result<(Vec<Tensor>, GroundTruth)> {
    spec.validate()?;
    let frames = (0..spec.num_frames).map(|t| render_frame(spec, t)).collect();
    let truth = GroundTruth {
        frames: (0..spec.num_frames).map(|t| truth_at(spec, t)).collect(),
    };
    Ok((frames, truth))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMatches {
    pub frame_index: usize,
    /// `(detection index, truth index, iou)`
    pub pairs: Vec<(usize, usize, f32)>,
    pub detections: usize,
    pub truths: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f32,
    pub precision: f32,
    pub true_positives: usize,
    pub detections: usize,
    pub truths: usize,
    pub frames: Vec<FrameMatches>,
}

/// Greedy one-to-one matching per frame: detections in descending score
/// order each take the unmatched same-class truth box of highest IoU, if
/// that IoU reaches `iou_threshold`. Recall with no truth and precision with
/// no detections are 1.
pub fn evaluate(dets: &[Vec<Detection>], truth: &GroundTruth, iou_threshold: f32) -> EvalReport {
    let n = dets.len().max(truth.num_frames());
    let mut report = EvalReport::default();
    for t in 0..n {
        let fd = dets.get(t).map_or(&[][..], Vec::as_slice);
        let ft = truth.frame(t);
        let mut order: Vec<usize> = (0..fd.len()).collect();
        order.sort_by(|&a, &b| fd[b].score.total_cmp(&fd[a].score));
        let mut taken = vec![false; ft.len()];
        let mut pairs = Vec::new();
        for i in order {
            let best = ft
                .iter()
                .enumerate()
                .filter(|(j, g)| !taken[*j] && g.class_id == fd[i].class_id)
                .map(|(j, g)| (j, fd[i].bbox.iou(&g.bbox)))
                .filter(|&(_, iou)| iou >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, iou)) = best {
                taken[j] = true;
                pairs.push((i, j, iou));
            }
        }
        report.true_positives += pairs.len();
        report.detections += fd.len();
        report.truths += ft.len();
        report.frames.push(FrameMatches {
            frame_index: t,
            pairs,
            detections: fd.len(),
            truths: ft.len(),
        });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f32 / den as f32 };
    report.recall = ratio(report.true_positives, report.truths);
    report.precision = ratio(report.true_positives, report.detections);
    report
}

/// Fraction of truth-box centres whose cell is set at the finest level that
/// has any foreground (level skipping may leave the finer ones empty).
/// 1 when there is no truth.
pub fn mask_coverage(truth: &[TruthBox], masks: &ForegroundMaskSet) -> f32 {
    if truth.is_empty() {
        return 1.0;
    }
    let Some(level) = (0..masks.masks.len()).find(|&l| masks.level_count(l) > 0) else {
        return 0.0;
    };
    let s = masks.strides[level] as f32;
    let shape = masks.masks[level].shape();
    let (h, w) = (shape[1], shape[2]);
    let covered = truth
        .iter()
        .filter(|g| {
            let (cx, cy) = g.bbox.center();
            let x = ((cx / s).floor().max(0.0) as usize).min(w - 1);
            let y = ((cy / s).floor().max(0.0) as usize).min(h - 1);
            masks.is_set(level, x, y)
        })
        .count();
    covered as f32 / truth.len() as f32
}
