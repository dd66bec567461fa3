//! Per-level head outputs and their decoding into boxes.

use super::config::DecodeStyle;
use crate::bbox::{BBox, Detection};
use crate::tensor::Tensor;

/// Raw head output for one level.
///
/// * `cls`: `[num_classes, H, W]` classification logits
/// * `reg`: `[4, H, W]` log-distances `ln(d / stride)` to the left, top, right, bottom sides
/// * `ctr`: `[1, H, W]` centerness logits
#[derive(Clone, Debug, PartialEq)]
pub struct RawMaps {
    pub cls: Tensor,
    pub reg: Tensor,
    pub ctr: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub level_index: usize,
    pub stride: usize,
    pub maps: RawMaps,
}

/// Where a level sits in the image; what decoding needs besides the maps.
#[derive(Clone, Copy, Debug)]
pub struct DecodeParams {
    pub level_index: usize,
    pub stride: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub score_threshold: f32,
    pub style: DecodeStyle,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_level(maps: &RawMaps, params: &DecodeParams) -> Vec<Detection> {
    match params.style {
        DecodeStyle::CenterDistance => decode_center_distance(maps, params),
        DecodeStyle::HeatmapPeak => decode_heatmap_peaks(maps, params),
    }
}

/// Best class and combined score `sqrt(σ(cls) · σ(ctr))` per location.
fn score_map(maps: &RawMaps) -> (Vec<f32>, Vec<usize>) {
    let (nc, h, w) = maps.cls.dims3().expect("cls map is rank 3");
    let plane = h * w;
    let cls = maps.cls.data();
    let ctr = maps.ctr.data();
    let mut scores = vec![0.0f32; plane];
    let mut classes = vec![0usize; plane];
    for p in 0..plane {
        let mut best = 0;
        for c in 1..nc {
            if cls[c * plane + p] > cls[best * plane + p] {
                best = c;
            }
        }
        classes[p] = best;
        scores[p] = (sigmoid(cls[best * plane + p]) * sigmoid(ctr[p])).sqrt();
    }
    (scores, classes)
}

fn box_at(maps: &RawMaps, p: usize, x: usize, y: usize, params: &DecodeParams) -> Option<BBox> {
    let (_, h, w) = maps.reg.dims3().expect("reg map is rank 3");
    let plane = h * w;
    let reg = maps.reg.data();
    let s = params.stride as f32;
    let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
    let dist = |k: usize| reg[k * plane + p].exp() * s;
    let b = BBox::new(cx - dist(0), cy - dist(1), cx + dist(2), cy + dist(3))
        .clamp(params.image_width as f32, params.image_height as f32);
    b.is_valid().then_some(b)
}

fn decode_center_distance(maps: &RawMaps, params: &DecodeParams) -> Vec<Detection> {
    let (_, h, w) = maps.cls.dims3().expect("cls map is rank 3");
    let (scores, classes) = score_map(maps);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if scores[p] <= params.score_threshold {
                continue;
            }
            if let Some(bbox) = box_at(maps, p, x, y, params) {
                out.push(Detection {
                    bbox,
                    score: scores[p],
                    class_id: classes[p],
                    level_index: params.level_index,
                });
            }
        }
    }
    out
}

fn decode_heatmap_peaks(maps: &RawMaps, params: &DecodeParams) -> Vec<Detection> {
    let (_, h, w) = maps.cls.dims3().expect("cls map is rank 3");
    let (scores, classes) = score_map(maps);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = scores[p];
            if s <= params.score_threshold {
                continue;
            }
            let mut peak = true;
            'nb: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if scores[ny * w + nx] > s {
                        peak = false;
                        break 'nb;
                    }
                }
            }
            if !peak {
                continue;
            }
            if let Some(bbox) = box_at(maps, p, x, y, params) {
                out.push(Detection {
                    bbox,
                    score: s,
                    class_id: classes[p],
                    level_index: params.level_index,
                });
            }
        }
    }
    out
}

const ANALYTIC_LOGIT: f32 = 20.0;
const FULL_COVER: f32 = 1.0 - 1e-4;

/// Head readout used by analytic weights.
///
/// `features[k]` holds the fraction of each cell covered by class-`k`
/// rectangles. For a fully covered cell, the runs of non-zero cells along
/// its row and column locate the box sides to sub-cell precision: a side
/// falls inside the first/last cell of the run at the covered fraction of
/// that cell. The location fires only if the recovered box's longer side
/// lies in this level's `(lo, hi]` size range, and its centerness is the
/// usual `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`.
///
/// The recovered sides are exact when the rectangle spans at least one
/// fully covered cell in each direction and does not touch another
/// rectangle of the same class.
pub fn analytic_readout(features: &Tensor, num_classes: usize, stride: usize, size_range: (f32, f32)) -> RawMaps {
    let (_, h, w) = features.dims3().expect("features are rank 3");
    let plane = h * w;
    let s = stride as f32;
    let mut cls = Tensor::full(&[num_classes, h, w], -ANALYTIC_LOGIT);
    let mut reg = Tensor::zeros(&[4, h, w]);
    let mut ctr = Tensor::full(&[1, h, w], -ANALYTIC_LOGIT);
    for k in 0..num_classes {
        let occ = features.channel(k);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if occ[p] < FULL_COVER {
                    continue;
                }
                let mut a = x;
                while a > 0 && occ[y * w + a - 1] > 0.0 {
                    a -= 1;
                }
                let mut b = x;
                while b + 1 < w && occ[y * w + b + 1] > 0.0 {
                    b += 1;
                }
                let mut t = y;
                while t > 0 && occ[(t - 1) * w + x] > 0.0 {
                    t -= 1;
                }
                let mut u = y;
                while u + 1 < h && occ[(u + 1) * w + x] > 0.0 {
                    u += 1;
                }
                let x1 = s * (a as f32 + 1.0 - occ[y * w + a].min(1.0));
                let x2 = s * (b as f32 + occ[y * w + b].min(1.0));
                let y1 = s * (t as f32 + 1.0 - occ[t * w + x].min(1.0));
                let y2 = s * (u as f32 + occ[u * w + x].min(1.0));
                let max_side = (x2 - x1).max(y2 - y1);
                if !(max_side > size_range.0 && max_side <= size_range.1) {
                    continue;
                }
                let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                let d = [cx - x1, cy - y1, x2 - cx, y2 - cy];
                let centerness = ((d[0].min(d[2]) / d[0].max(d[2])) * (d[1].min(d[3]) / d[1].max(d[3]))).sqrt();
                let c = centerness.clamp(1e-6, 1.0 - 1e-6);
                cls.data_mut()[k * plane + p] = ANALYTIC_LOGIT;
                ctr.data_mut()[p] = (c / (1.0 - c)).ln();
                for (side, dist) in d.iter().enumerate() {
                    reg.data_mut()[side * plane + p] = (dist / s).ln();
                }
            }
        }
    }
    RawMaps { cls, reg, ctr }
}
