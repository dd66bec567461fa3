use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes the analytic weights can tell apart; each is carried by one RGB channel.
pub const ANALYTIC_MAX_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// He-uniform random weights from a seed. Used for mechanism and cost checks.
    SeededRandom,
    /// Hand-built weights whose heads fire on bright synthetic rectangles.
    Analytic,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded-random" | "seeded" | "random" => Ok(Self::SeededRandom),
            "analytic" => Ok(Self::Analytic),
            _ => Err(Error::Config(format!("unknown weight mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SeededRandom => "seeded-random",
            Self::Analytic => "analytic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeStyle {
    /// FCOS-style: every location above threshold regresses distances to the four box sides.
    CenterDistance,
    /// CenterNet-style: only 3×3 local maxima of the score map emit boxes.
    HeatmapPeak,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FcosLike,
    CenternetLike,
    YoloxLike,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcos-like" | "fcos" => Ok(Self::FcosLike),
            "centernet-like" | "centernet" => Ok(Self::CenternetLike),
            "yolox-like" | "yolox" => Ok(Self::YoloxLike),
            _ => Err(Error::Config(format!("unknown detector preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Down-sampling ratio of each pyramid level, finest first.
    pub strides: Vec<usize>,
    /// Channel count of every neck and head feature map.
    pub channels: usize,
    /// 3×3 convolutions per head branch.
    pub head_depth: usize,
    pub num_classes: usize,
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub top_k: usize,
    pub weight_mode: WeightMode,
    pub decode_style: DecodeStyle,
}

/// Emission floor for candidates.
pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.05;
pub const DEFAULT_NMS_IOU: f32 = 0.6;
/// Detections kept per frame.
pub const DEFAULT_TOP_K: usize = 100;

impl DetectorConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::FcosLike => Self {
                input_height: 600,
                input_width: 1000,
                strides: vec![8, 16, 32, 64, 128],
                channels: 32,
                head_depth: 4,
                num_classes: 3,
                score_threshold: DEFAULT_SCORE_THRESHOLD,
                nms_iou: DEFAULT_NMS_IOU,
                top_k: DEFAULT_TOP_K,
                weight_mode: WeightMode::SeededRandom,
                decode_style: DecodeStyle::CenterDistance,
            },
            Preset::CenternetLike => Self {
                input_height: 512,
                input_width: 512,
                strides: vec![4],
                channels: 32,
                head_depth: 1,
                num_classes: 3,
                score_threshold: DEFAULT_SCORE_THRESHOLD,
                nms_iou: DEFAULT_NMS_IOU,
                top_k: DEFAULT_TOP_K,
                weight_mode: WeightMode::SeededRandom,
                decode_style: DecodeStyle::HeatmapPeak,
            },
            Preset::YoloxLike => Self {
                input_height: 640,
                input_width: 640,
                strides: vec![8, 16, 32],
                channels: 32,
                head_depth: 2,
                num_classes: 3,
                score_threshold: DEFAULT_SCORE_THRESHOLD,
                nms_iou: DEFAULT_NMS_IOU,
                top_k: DEFAULT_TOP_K,
                weight_mode: WeightMode::SeededRandom,
                decode_style: DecodeStyle::CenterDistance,
            },
        }
    }

    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn with_weight_mode(mut self, mode: WeightMode) -> Self {
        self.weight_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_height == 0 || self.input_width == 0 {
            return fail("input size must be positive".into());
        }
        if self.strides.is_empty() {
            return fail("at least one stride is required".into());
        }
        for &s in &self.strides {
            if s < 2 || !s.is_power_of_two() {
                return fail(format!("stride {s} is not a power of two >= 2"));
            }
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("strides {:?} are not strictly increasing", self.strides));
        }
        if self.channels < MIN_WIDTH {
            return fail(format!("channels must be at least {MIN_WIDTH}"));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.weight_mode == WeightMode::Analytic && self.num_classes > ANALYTIC_MAX_CLASSES {
            return fail(format!(
                "analytic weights support at most {ANALYTIC_MAX_CLASSES} classes"
            ));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return fail(format!("score_threshold {} outside [0, 1]", self.score_threshold));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return fail(format!("nms_iou {} outside (0, 1)", self.nms_iou));
        }
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().expect("validated config has strides")
    }

    /// Spatial size of the level with stride `s`: every halving rounds up.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        let s = self.strides[level];
        (self.input_height.div_ceil(s), self.input_width.div_ceil(s))
    }

    pub fn location_count(&self) -> usize {
        (0..self.num_levels())
            .map(|l| {
                let (h, w) = self.level_dims(l);
                h * w
            })
            .sum()
    }

    /// Channel width of the backbone map at `stride` (the stem is stride 1).
    pub fn backbone_width(&self, stride: usize) -> usize {
        (self.channels * stride / 16).clamp(MIN_WIDTH, self.channels)
    }

    /// Object-size range `(lo, hi]` (longer box side, pixels) owned by each level.
    ///
    /// | level          | owns max side in        |
    /// |----------------|-------------------------|
    /// | finest         | `(0, 8·s_0]`            |
    /// | l (interior)   | `(8·s_{l-1}, 8·s_l]`    |
    /// | coarsest       | `(8·s_{L-2}, ∞)`        |
    ///
    /// For consecutive power-of-two strides this is the FCOS partition
    /// (64 / 128 / 256 / 512 for strides 8..128).
    pub fn level_size_ranges(&self) -> Vec<(f32, f32)> {
        let n = self.num_levels();
        (0..n)
            .map(|l| {
                let lo = if l == 0 { 0.0 } else { 8.0 * self.strides[l - 1] as f32 };
                let hi = if l + 1 == n {
                    f32::INFINITY
                } else {
                    8.0 * self.strides[l] as f32
                };
                (lo, hi)
            })
            .collect()
    }

    /// Level whose size range contains `max_side`.
    pub fn level_for_size(&self, max_side: f32) -> usize {
        self.level_size_ranges()
            .iter()
            .position(|&(lo, hi)| max_side > lo && max_side <= hi)
            .unwrap_or(0)
    }
}

pub(crate) const MIN_WIDTH: usize = 4;
