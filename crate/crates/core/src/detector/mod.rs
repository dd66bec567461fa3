//! One-stage detector skeleton: backbone, FPN-style neck, shared decoupled
//! heads, per-level decoding and NMS.
//!
//! Backbone stages are `avg_pool2 → conv3×3 → ReLU`, so the map at stride
//! `s` is `ceil(H / s) × ceil(W / s)`, the same size a stack of 3×3,
//! stride-2, padding-1 convolutions would give.

pub mod config;
pub mod decode;
pub mod nms;
pub mod weights;

use std::time::{Duration, Instant};

pub use config::{DecodeStyle, DetectorConfig, Preset, WeightMode};
pub use decode::{analytic_readout, decode_level, DecodeParams, LevelOutput, RawMaps};
pub use nms::nms;
pub use weights::{ConvLayer, DetectorWeights};

use crate::bbox::Detection;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub stride: usize,
    /// `[C, H_l, W_l]`
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGeometry {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

impl FeaturePyramid {
    pub fn geometry(&self) -> Vec<LevelGeometry> {
        self.levels
            .iter()
            .map(|l| {
                let s = l.features.shape();
                LevelGeometry {
                    stride: l.stride,
                    height: s[1],
                    width: s[2],
                }
            })
            .collect()
    }

    pub fn location_count(&self) -> usize {
        self.geometry().iter().map(LevelGeometry::area).sum()
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.features.shape()[0])
    }

    pub fn bitwise_eq(&self, other: &FeaturePyramid) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.stride == b.stride && a.features.bitwise_eq(&b.features))
    }
}

/// Wall-time of each detector part for one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub backbone: Duration,
    pub neck: Duration,
    pub attention: Duration,
    /// Per level; `None` for levels whose head was skipped. Includes decoding.
    pub heads: Vec<Option<Duration>>,
    pub post: Duration,
    /// Multiply-accumulates reported by the aggregation hook.
    pub attention_macs: u64,
}

impl FrameTiming {
    pub fn head_total(&self) -> Duration {
        self.heads.iter().flatten().sum()
    }

    pub fn total(&self) -> Duration {
        self.backbone + self.neck + self.attention + self.head_total() + self.post
    }
}

/// Feature enhancement run between the neck and the heads.
pub trait AggregationHook {
    /// Rewrites `pyramid` in place for the given active levels and returns
    /// the multiply-accumulate count it spent.
    fn apply(&mut self, pyramid: &mut FeaturePyramid, active_levels: &[usize]) -> Result<u64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    /// Final detections after NMS and top-k.
    pub detections: Vec<Detection>,
    /// Every decoded candidate before NMS, level order then row-major.
    pub candidates: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    weights: DetectorWeights,
}

impl Detector {
    pub fn new(config: DetectorConfig, weights: DetectorWeights) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Self { config, weights })
    }

    /// Config plus freshly generated weights.
    pub fn from_seed(config: DetectorConfig, seed: u64) -> Result<Self> {
        let weights = DetectorWeights::generate(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn weights(&self) -> &DetectorWeights {
        &self.weights
    }

    pub fn all_levels(&self) -> Vec<usize> {
        (0..self.config.num_levels()).collect()
    }

    pub fn build_pyramid(&self, image: &Tensor, frame_index: usize) -> Result<FeaturePyramid> {
        self.build_pyramid_timed(image, frame_index, &mut FrameTiming::default())
    }

    pub fn build_pyramid_timed(
        &self,
        image: &Tensor,
        frame_index: usize,
        timing: &mut FrameTiming,
    ) -> Result<FeaturePyramid> {
        let cfg = &self.config;
        let (c, h, w) = image.dims3()?;
        if c != 3 || h != cfg.input_height || w != cfg.input_width {
            return Err(Error::Config(format!(
                "image is {c}x{h}x{w}, detector expects 3x{}x{}",
                cfg.input_height, cfg.input_width
            )));
        }

        let t0 = Instant::now();
        let mut x = apply_conv(image, &self.weights.stem)?;
        match self.weights.mode {
            WeightMode::SeededRandom => tensor::relu_inplace(&mut x),
            WeightMode::Analytic => tensor::clamp01_inplace(&mut x),
        }
        let mut backbone = Vec::with_capacity(cfg.num_levels());
        let mut stride = 1;
        for stage in &self.weights.stages {
            stride *= 2;
            x = apply_conv(&tensor::avg_pool2(&x)?, stage)?;
            tensor::relu_inplace(&mut x);
            if cfg.strides.contains(&stride) {
                backbone.push(x.clone());
            }
        }
        timing.backbone = t0.elapsed();

        let t1 = Instant::now();
        let n = cfg.num_levels();
        let mut levels: Vec<Option<Tensor>> = vec![None; n];
        for l in (0..n).rev() {
            let mut p = apply_conv(&backbone[l], &self.weights.laterals[l])?;
            if l + 1 < n {
                let coarser = levels[l + 1].as_ref().expect("coarser level built first");
                let (_, ph, pw) = p.dims3()?;
                let up = tensor::upsample_nearest(coarser, cfg.strides[l + 1] / cfg.strides[l], ph, pw)?;
                tensor::add_inplace(&mut p, &apply_conv(&up, &self.weights.top_down[l])?)?;
            }
            levels[l] = Some(p);
        }
        timing.neck = t1.elapsed();

        Ok(FeaturePyramid {
            levels: levels
                .into_iter()
                .zip(&cfg.strides)
                .map(|(f, &stride)| PyramidLevel {
                    stride,
                    features: f.expect("every level built"),
                })
                .collect(),
            frame_index,
        })
    }

    fn check_levels(&self, active_levels: &[usize]) -> Result<()> {
        if let Some(&bad) = active_levels.iter().find(|&&l| l >= self.config.num_levels()) {
            return Err(Error::Config(format!(
                "active level {bad} outside 0..{}",
                self.config.num_levels()
            )));
        }
        Ok(())
    }

    /// Raw maps of one level.
    pub fn run_head(&self, features: &Tensor, level: usize) -> Result<RawMaps> {
        let cfg = &self.config;
        let tower = |layers: &[ConvLayer]| -> Result<Tensor> {
            let mut x = features.clone();
            for layer in layers {
                x = apply_conv(&x, layer)?;
                tensor::relu_inplace(&mut x);
            }
            Ok(x)
        };
        let cls_feat = tower(&self.weights.cls_tower)?;
        let reg_feat = tower(&self.weights.reg_tower)?;
        match self.weights.mode {
            WeightMode::SeededRandom => Ok(RawMaps {
                cls: apply_conv(&cls_feat, &self.weights.cls_out)?,
                reg: apply_conv(&reg_feat, &self.weights.reg_out)?,
                ctr: apply_conv(&reg_feat, &self.weights.ctr_out)?,
            }),
            WeightMode::Analytic => Ok(analytic_readout(
                &cls_feat,
                cfg.num_classes,
                cfg.strides[level],
                cfg.level_size_ranges()[level],
            )),
        }
    }

    /// Heads for `active_levels` only; skipped levels cost nothing.
    pub fn run_heads(&self, pyramid: &FeaturePyramid, active_levels: &[usize]) -> Result<Vec<LevelOutput>> {
        self.check_levels(active_levels)?;
        active_levels
            .iter()
            .map(|&l| {
                Ok(LevelOutput {
                    level_index: l,
                    stride: self.config.strides[l],
                    maps: self.run_head(&pyramid.levels[l].features, l)?,
                })
            })
            .collect()
    }

    pub fn decode_params(&self, level: usize) -> DecodeParams {
        DecodeParams {
            level_index: level,
            stride: self.config.strides[level],
            image_width: self.config.input_width,
            image_height: self.config.input_height,
            score_threshold: self.config.score_threshold,
            style: self.config.decode_style,
        }
    }

    pub fn decode(&self, output: &LevelOutput) -> Vec<Detection> {
        decode_level(&output.maps, &self.decode_params(output.level_index))
    }

    /// Heads plus decoding for `active_levels`, in ascending level order.
    pub fn candidates(
        &self,
        pyramid: &FeaturePyramid,
        active_levels: &[usize],
        timing: &mut FrameTiming,
    ) -> Result<Vec<Detection>> {
        self.check_levels(active_levels)?;
        let mut levels = active_levels.to_vec();
        levels.sort_unstable();
        levels.dedup();
        timing.heads = vec![None; self.config.num_levels()];
        let mut out = Vec::new();
        for l in levels {
            let t = Instant::now();
            let maps = self.run_head(&pyramid.levels[l].features, l)?;
            out.extend(decode_level(&maps, &self.decode_params(l)));
            timing.heads[l] = Some(t.elapsed());
        }
        Ok(out)
    }

    pub fn finalize(&self, candidates: &[Detection]) -> Vec<Detection> {
        nms(candidates, self.config.nms_iou, self.config.top_k)
    }

    /// build_pyramid → hook → heads on `active_levels` → decode → NMS.
    pub fn detect_frame(
        &self,
        image: &Tensor,
        frame_index: usize,
        active_levels: &[usize],
        hook: Option<&mut dyn AggregationHook>,
    ) -> Result<FrameOutput> {
        self.detect_frame_timed(image, frame_index, active_levels, hook)
            .map(|(out, _)| out)
    }

    pub fn detect_frame_timed(
        &self,
        image: &Tensor,
        frame_index: usize,
        active_levels: &[usize],
        hook: Option<&mut dyn AggregationHook>,
    ) -> Result<(FrameOutput, FrameTiming)> {
        self.check_levels(active_levels)?;
        let mut timing = FrameTiming::default();
        let mut pyramid = self.build_pyramid_timed(image, frame_index, &mut timing)?;
        self.detect_pyramid(&mut pyramid, active_levels, hook, &mut timing)
            .map(|out| (out, timing))
    }

    /// Everything after the neck, on an already built pyramid.
    pub fn detect_pyramid(
        &self,
        pyramid: &mut FeaturePyramid,
        active_levels: &[usize],
        hook: Option<&mut dyn AggregationHook>,
        timing: &mut FrameTiming,
    ) -> Result<FrameOutput> {
        if let Some(hook) = hook {
            let t = Instant::now();
            timing.attention_macs = hook.apply(pyramid, active_levels)?;
            timing.attention = t.elapsed();
        }
        let candidates = self.candidates(pyramid, active_levels, timing)?;
        let t = Instant::now();
        let detections = self.finalize(&candidates);
        timing.post = t.elapsed();
        Ok(FrameOutput { detections, candidates })
    }
}

fn apply_conv(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let k = layer.kernel();
    let mut y = tensor::conv2d(x, &layer.weight, 1, k / 2)?;
    tensor::add_channel_bias(&mut y, &layer.bias)?;
    Ok(y)
}
