//! Frame-by-frame video detection: the plain detector, whole-frame
//! attention, mask-guided attention, and mask-guided attention with level
//! skipping.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, OpCount};
use crate::bbox::{Detection, TruthBox};
use crate::detector::{AggregationHook, Detector, FrameTiming, WeightMode};
use crate::error::{Error, Result};
use crate::lpn::{self, AggregationMode, ForegroundMaskSet, LpnHook, ReferenceBank, ReferenceEntry, ValidatedBoxes};
use crate::spn::{FramePlan, ScheduleRecord, SkipSchedule};
use crate::synth::{self, GroundTruth};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Single-frame detection.
    Baseline,
    /// Every cell attends to every reference cell.
    Naive,
    /// Mask-guided partial attention.
    Lpn,
    /// Mask-guided attention plus level skipping.
    LpnSpn,
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "naive" => Ok(Self::Naive),
            "lpn" => Ok(Self::Lpn),
            "lpn_spn" | "lpn-spn" => Ok(Self::LpnSpn),
            _ => Err(Error::Config(format!(
                "unknown pipeline '{s}' (expected baseline, naive, lpn or lpn_spn)"
            ))),
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Naive => "naive",
            Self::Lpn => "lpn",
            Self::LpnSpn => "lpn_spn",
        })
    }
}

/// Where the location prior for the next frame comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Detections,
    /// The current frame's ground truth, as during training.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub ratio: f32,
    pub interval: usize,
    pub references: usize,
    pub seed: u64,
    pub mask_source: MaskSource,
    /// Keep each frame's masks in its [`FrameResult`].
    pub keep_masks: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kind: PipelineKind::LpnSpn,
            ratio: lpn::DEFAULT_RATIO,
            interval: crate::spn::DEFAULT_INTERVAL,
            references: lpn::DEFAULT_REFERENCES,
            seed: 0,
            mask_source: MaskSource::Detections,
            keep_masks: false,
        }
    }
}

impl PipelineConfig {
    pub fn new(kind: PipelineKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return Err(Error::Config(format!("ratio r must be positive, got {}", self.ratio)));
        }
        if self.references == 0 || self.references > lpn::MAX_REFERENCES {
            return Err(Error::Config(format!(
                "reference count {} outside 1..={}",
                self.references,
                lpn::MAX_REFERENCES
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
    /// Pre-NMS candidates from the levels that ran.
    pub candidates: Vec<Detection>,
    pub plan: FramePlan,
    pub attention: OpCount,
    pub mask_cells: usize,
    /// Aggregation skipped: no prior boxes or no reference keys.
    pub aggregation_skipped: bool,
    /// Share of truth centres inside this frame's masks, when truth is known.
    pub coverage: Option<f32>,
    pub masks: Option<ForegroundMaskSet>,
    pub timing: FrameTiming,
}

pub struct VideoPipeline<'d> {
    detector: &'d Detector,
    config: PipelineConfig,
    params: AttentionParams,
    bank: ReferenceBank,
    schedule: SkipSchedule,
    prior: ValidatedBoxes,
    rng: ChaCha8Rng,
    next_frame: usize,
    trace: Vec<ScheduleRecord>,
}

impl<'d> VideoPipeline<'d> {
    pub fn new(detector: &'d Detector, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dc = detector.config();
        let params = match detector.weights().mode {
            // keep the class channels the analytic readout depends on intact
            WeightMode::Analytic => AttentionParams::seeded_protecting(dc.channels, dc.num_classes, config.seed),
            WeightMode::SeededRandom => AttentionParams::seeded(dc.channels, config.seed),
        };
        let interval = if config.kind == PipelineKind::LpnSpn {
            config.interval
        } else {
            0
        };
        Ok(Self {
            detector,
            params,
            bank: ReferenceBank::new(config.references)?,
            schedule: SkipSchedule::new(interval, dc.num_levels()),
            prior: ValidatedBoxes::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_ba4c),
            next_frame: 0,
            trace: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn bank(&self) -> &ReferenceBank {
        &self.bank
    }

    pub fn schedule(&self) -> &SkipSchedule {
        &self.schedule
    }

    pub fn trace(&self) -> &[ScheduleRecord] {
        &self.trace
    }

    pub fn attention_params(&self) -> &AttentionParams {
        &self.params
    }

    /// Boxes guiding the next frame's masks.
    pub fn prior(&self) -> &ValidatedBoxes {
        &self.prior
    }

    /// What the next frame would produce with every level running, without
    /// advancing any state.
    pub fn preview_all_levels(&self, image: &Tensor) -> Result<crate::detector::FrameOutput> {
        let frame_index = self.next_frame;
        let all = self.detector.all_levels();
        let mut timing = FrameTiming::default();
        let mut pyramid = self.detector.build_pyramid_timed(image, frame_index, &mut timing)?;
        if self.config.kind == PipelineKind::Baseline {
            return self.detector.detect_pyramid(&mut pyramid, &all, None, &mut timing);
        }
        let mode = if self.config.kind == PipelineKind::Naive {
            AggregationMode::Full
        } else {
            AggregationMode::Partial
        };
        let dc = self.detector.config();
        let mut hook = LpnHook::new(
            mode,
            &self.prior,
            &self.bank,
            &self.params,
            self.config.ratio,
            dc.input_width,
            dc.input_height,
        );
        self.detector.detect_pyramid(
            &mut pyramid,
            &all,
            Some(&mut hook as &mut dyn AggregationHook),
            &mut timing,
        )
    }

    /// Runs the next frame. `truth` is this frame's ground truth, used for
    /// coverage and, with [`MaskSource::GroundTruth`], as the next prior.
    pub fn process_frame(&mut self, image: &Tensor, truth: Option<&[TruthBox]>) -> Result<FrameResult> {
        let frame_index = self.next_frame;
        let plan = self.schedule.plan_frame();
        let record = self.schedule.record(frame_index, &plan);
        log::debug!(
            "schedule frame={} full={} levels={:?} fallback={}",
            record.frame_index,
            record.full,
            record.levels,
            record.fallback_all
        );
        self.trace.push(record);

        let mut timing = FrameTiming::default();
        let raw = self.detector.build_pyramid_timed(image, frame_index, &mut timing)?;
        let kind = self.config.kind;
        let (output, masks, count) = if kind == PipelineKind::Baseline {
            let mut pyramid = raw;
            let out = self
                .detector
                .detect_pyramid(&mut pyramid, &plan.levels, None, &mut timing)?;
            (out, None, OpCount::default())
        } else {
            let mode = if kind == PipelineKind::Naive {
                AggregationMode::Full
            } else {
                AggregationMode::Partial
            };
            let dc = self.detector.config();
            let mut hook = LpnHook::new(
                mode,
                &self.prior,
                &self.bank,
                &self.params,
                self.config.ratio,
                dc.input_width,
                dc.input_height,
            );
            let mut pyramid = raw.clone();
            let out = self.detector.detect_pyramid(
                &mut pyramid,
                &plan.levels,
                Some(&mut hook as &mut dyn AggregationHook),
                &mut timing,
            )?;
            let masks = hook.last_masks.take();
            let count = hook.last_count;
            let prior = match (self.config.mask_source, truth) {
                (MaskSource::GroundTruth, Some(t)) => ValidatedBoxes::from_truth(t, frame_index),
                _ => lpn::validate(&out.detections, frame_index),
            };
            self.bank.offer(
                ReferenceEntry {
                    frame_index,
                    pyramid: raw,
                    boxes: prior.clone(),
                },
                &mut self.rng,
            );
            self.prior = prior;
            (out, masks, count)
        };
        self.schedule.update(&output.candidates, plan.full);
        self.next_frame += 1;

        let aggregation_skipped = kind != PipelineKind::Baseline && count.total() == 0;
        let coverage = match (truth, &masks) {
            (Some(t), Some(m)) if !m.skipped => Some(synth::mask_coverage(t, m)),
            _ => None,
        };
        Ok(FrameResult {
            frame_index,
            detections: output.detections,
            candidates: output.candidates,
            plan,
            attention: count,
            mask_cells: masks.as_ref().map_or(0, ForegroundMaskSet::count),
            aggregation_skipped,
            coverage,
            masks: if self.config.keep_masks { masks } else { None },
            timing,
        })
    }
}

/// Everything one pass over a sequence produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub frames: Vec<FrameResult>,
    pub trace: Vec<ScheduleRecord>,
    pub elapsed: Duration,
}

impl RunOutput {
    pub fn detections(&self) -> Vec<Vec<Detection>> {
        self.frames.iter().map(|f| f.detections.clone()).collect()
    }

    pub fn attention(&self) -> OpCount {
        self.frames.iter().map(|f| f.attention).sum()
    }

    pub fn full_frames(&self) -> Vec<usize> {
        self.frames
            .iter()
            .filter(|f| f.plan.full)
            .map(|f| f.frame_index)
            .collect()
    }

    pub fn frames_per_second(&self) -> f64 {
        self.frames.len() as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

pub fn run_sequence(
    detector: &Detector,
    config: &PipelineConfig,
    frames: &[Tensor],
    truth: Option<&GroundTruth>,
) -> Result<RunOutput> {
    let mut pipe = VideoPipeline::new(detector, config.clone())?;
    let start = Instant::now();
    let mut out = Vec::with_capacity(frames.len());
    for (t, img) in frames.iter().enumerate() {
        out.push(pipe.process_frame(img, truth.map(|g| g.frame(t)))?);
    }
    let elapsed = start.elapsed();
    Ok(RunOutput {
        frames: out,
        trace: pipe.trace,
        elapsed,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Baseline wall time over this setting's wall time, median over runs.
    pub throughput_ratio: f64,
    pub recall: f32,
    pub precision: f32,
    pub attention_macs: u64,
    pub full_frames: usize,
}

/// Which knob a sweep turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Ratio,
    Interval,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" | "ratio" => Ok(Self::Ratio),
            "T" | "t" | "interval" => Ok(Self::Interval),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter '{s}' (expected r or T)"
            ))),
        }
    }
}

fn apply_value(base: &PipelineConfig, param: SweepParam, value: f64) -> Result<PipelineConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::Ratio => cfg.ratio = value as f32,
        SweepParam::Interval => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "interval T must be a non-negative integer, got {value}"
                )));
            }
            cfg.interval = value as usize;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `base` at each value of `param`. Every round times one baseline
/// pass and then one pass per value, so each ratio compares runs made under
/// the same conditions; the reported ratio is the median over rounds.
pub fn sweep(
    detector: &Detector,
    base: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
    frames: &[Tensor],
    truth: Option<&GroundTruth>,
    runs: usize,
) -> Result<Vec<SweepRow>> {
    if runs == 0 {
        return Err(Error::Config("sweep needs at least one run".into()));
    }
    let configs: Vec<PipelineConfig> = values
        .iter()
        .map(|&v| apply_value(base, param, v))
        .collect::<Result<_>>()?;
    let baseline = PipelineConfig::new(PipelineKind::Baseline);
    let mut ratios = vec![Vec::with_capacity(runs); values.len()];
    let mut last: Vec<Option<RunOutput>> = vec![None; values.len()];
    for round in 0..runs {
        let b = run_sequence(detector, &baseline, frames, None)?.elapsed.as_secs_f64();
        // alternate the order so slow drift within a round does not favour one end
        let mut order: Vec<usize> = (0..configs.len()).collect();
        if round % 2 == 1 {
            order.reverse();
        }
        for i in order {
            let cfg = &configs[i];
            let r = run_sequence(detector, cfg, frames, truth)?;
            ratios[i].push(b / r.elapsed.as_secs_f64().max(1e-9));
            last[i] = Some(r);
        }
    }
    Ok(values
        .iter()
        .zip(ratios.iter_mut().zip(last))
        .map(|(&value, (rs, out))| {
            let out = out.expect("at least one run");
            let (recall, precision) = truth.map_or((f32::NAN, f32::NAN), |g| {
                let e = synth::evaluate(&out.detections(), g, 0.5);
                (e.recall, e.precision)
            });
            SweepRow {
                value,
                throughput_ratio: median(rs),
                recall,
                precision,
                attention_macs: out.attention().total(),
                full_frames: out.full_frames().len(),
            }
        })
        .collect())
}
