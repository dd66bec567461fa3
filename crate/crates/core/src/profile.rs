//! Location counts, attention cost scaling and per-part runtime dissection.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, KeySet, OpCount, QuerySet};
use crate::detector::weights::stage_strides;
use crate::detector::{AggregationHook, Detector, DetectorConfig, FrameTiming, WeightMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parts faster than this are reported with a timer-resolution warning.
pub const MIN_RELIABLE_PART: Duration = Duration::from_micros(10);
pub const MIN_REPETITIONS: usize = 3;
pub const DEFAULT_REPETITIONS: usize = 5;

/// Total locations over all levels, `Σ ceil(H/s)·ceil(W/s)`. A stride
/// larger than the input still contributes one cell per axis.
pub fn nq_for_config(input_height: usize, input_width: usize, strides: &[usize]) -> Result<usize> {
    if input_height == 0 || input_width == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    if strides.is_empty() || strides.contains(&0) {
        return Err(Error::Config("strides must be non-empty and positive".into()));
    }
    Ok(strides
        .iter()
        .map(|&s| input_height.div_ceil(s) * input_width.div_ceil(s))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub part: String,
    pub layer: String,
    pub macs: u64,
    /// Input, output and weight bytes live while the layer runs.
    pub bytes: u64,
}

fn conv_cost(part: &str, layer: String, h: usize, w: usize, c_out: usize, c_in: usize, k: usize) -> LayerCost {
    let (h, w, c_out, c_in, k) = (h as u64, w as u64, c_out as u64, c_in as u64, k as u64);
    LayerCost {
        part: part.into(),
        layer,
        macs: h * w * c_out * c_in * k * k,
        bytes: 4 * (h * w * (c_in + c_out) + c_out * c_in * k * k + c_out),
    }
}

pub fn head_part(level: usize) -> String {
    format!("head-level-{level}")
}

/// Closed-form per-layer costs of one full frame, attention excluded.
pub fn layer_costs(config: &DetectorConfig) -> Vec<LayerCost> {
    let (h, w) = (config.input_height, config.input_width);
    let c = config.channels;
    let mut out = vec![conv_cost(
        "backbone",
        "stem".into(),
        h,
        w,
        config.backbone_width(1),
        3,
        1,
    )];
    for s in stage_strides(config) {
        out.push(conv_cost(
            "backbone",
            format!("stage-s{s}"),
            h.div_ceil(s),
            w.div_ceil(s),
            config.backbone_width(s),
            config.backbone_width(s / 2),
            3,
        ));
    }
    for (l, &s) in config.strides.iter().enumerate() {
        let (lh, lw) = config.level_dims(l);
        out.push(conv_cost(
            "neck",
            format!("lateral-{l}"),
            lh,
            lw,
            c,
            config.backbone_width(s),
            1,
        ));
        if l + 1 < config.num_levels() {
            out.push(conv_cost("neck", format!("top-down-{l}"), lh, lw, c, c, 1));
        }
    }
    for l in 0..config.num_levels() {
        let (lh, lw) = config.level_dims(l);
        let part = head_part(l);
        for tower in ["cls", "reg"] {
            for d in 0..config.head_depth {
                out.push(conv_cost(&part, format!("{tower}-tower-{d}"), lh, lw, c, c, 3));
            }
        }
        // analytic weights replace the output convs with a direct readout
        if config.weight_mode == WeightMode::SeededRandom {
            out.push(conv_cost(&part, "cls-out".into(), lh, lw, config.num_classes, c, 3));
            out.push(conv_cost(&part, "reg-out".into(), lh, lw, 4, c, 3));
            out.push(conv_cost(&part, "ctr-out".into(), lh, lw, 1, c, 3));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartCost {
    pub part: String,
    pub wall_ms: f64,
    pub macs: u64,
    pub peak_bytes: u64,
    /// Share of total wall time.
    pub ratio: f64,
    /// Share of total MACs.
    pub mac_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub parts: Vec<PartCost>,
    pub total_ms: f64,
    pub total_macs: u64,
    pub repetitions: usize,
    pub warnings: Vec<String>,
}

impl CostReport {
    pub fn part(&self, name: &str) -> Option<&PartCost> {
        self.parts.iter().find(|p| p.part == name)
    }

    fn heads(&self) -> impl Iterator<Item = &PartCost> {
        self.parts.iter().filter(|p| p.part.starts_with("head-level-"))
    }

    pub fn head_ms(&self) -> f64 {
        self.heads().map(|p| p.wall_ms).sum()
    }

    /// Head time over frame time.
    pub fn head_share(&self) -> f64 {
        self.head_ms() / self.total_ms.max(f64::MIN_POSITIVE)
    }

    /// Level-0 head time over total head time.
    pub fn finest_head_share(&self) -> f64 {
        self.part(&head_part(0)).map_or(0.0, |p| p.wall_ms) / self.head_ms().max(f64::MIN_POSITIVE)
    }

    /// Columns `part,wall_ms,macs,ratio`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["part", "wall_ms", "macs", "ratio"])?;
        for p in &self.parts {
            w.write_record([
                p.part.clone(),
                format!("{:.6}", p.wall_ms),
                p.macs.to_string(),
                format!("{:.6}", p.ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

fn median_duration(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times one frame `repetitions` times after a warm-up run and reports the
/// per-part medians. Heads appear only for `active_levels`; attention only
/// when `hook` is given.
pub fn profile_frame(
    detector: &Detector,
    image: &Tensor,
    repetitions: usize,
    active_levels: &[usize],
    mut hook: Option<&mut dyn AggregationHook>,
) -> Result<CostReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!(
            "profiling needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let mut runs: Vec<FrameTiming> = Vec::with_capacity(repetitions);
    for i in 0..=repetitions {
        let h = hook.as_mut().map(|h| &mut **h as &mut dyn AggregationHook);
        let (_, timing) = detector.detect_frame_timed(image, 0, active_levels, h)?;
        if i > 0 {
            runs.push(timing);
        }
    }
    let config = detector.config();
    let layers = layer_costs(config);
    let macs_of = |name: &str| layers.iter().filter(|l| l.part == name).map(|l| l.macs).sum::<u64>();
    let peak_of = |name: &str| {
        layers
            .iter()
            .filter(|l| l.part == name)
            .map(|l| l.bytes)
            .max()
            .unwrap_or(0)
    };

    let med = |f: &dyn Fn(&FrameTiming) -> Duration| median_duration(runs.iter().map(f).collect());
    let mut parts: Vec<(String, Duration, u64, u64)> = vec![
        (
            "backbone".into(),
            med(&|t| t.backbone),
            macs_of("backbone"),
            peak_of("backbone"),
        ),
        ("neck".into(), med(&|t| t.neck), macs_of("neck"), peak_of("neck")),
    ];
    if hook.is_some() {
        let macs = runs[0].attention_macs;
        // the similarity matrices hold at most macs / (2C) weights
        let peak = 4 * macs / (2 * config.channels as u64).max(1);
        parts.push(("attention".into(), med(&|t| t.attention), macs, peak));
    }
    let mut levels = active_levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    for l in levels {
        let name = head_part(l);
        let d = med(&|t| t.heads[l].unwrap_or_default());
        let (m, p) = (macs_of(&name), peak_of(&name));
        parts.push((name, d, m, p));
    }
    parts.push(("post".into(), med(&|t| t.post), 0, 0));

    let total: Duration = parts.iter().map(|p| p.1).sum();
    let total_ms = total.as_secs_f64() * 1e3;
    let total_macs: u64 = parts.iter().map(|p| p.2).sum();
    let mut warnings = Vec::new();
    for (name, d, _, _) in &parts {
        if *d < MIN_RELIABLE_PART {
            let msg = format!("part {name} took {d:?}, below timer resolution; its share is unreliable");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(CostReport {
        parts: parts
            .into_iter()
            .map(|(part, d, macs, peak_bytes)| {
                let ms = d.as_secs_f64() * 1e3;
                PartCost {
                    part,
                    wall_ms: ms,
                    macs,
                    peak_bytes,
                    ratio: if total_ms > 0.0 { ms / total_ms } else { 0.0 },
                    mac_ratio: if total_macs > 0 {
                        macs as f64 / total_macs as f64
                    } else {
                        0.0
                    },
                }
            })
            .collect(),
        total_ms,
        total_macs,
        repetitions,
        warnings,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need two points to fit");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// How many keys go with `n_q` queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRule {
    EqualToQueries,
    Fixed(usize),
}

impl KeyRule {
    pub fn keys_for(self, n_q: usize) -> usize {
        match self {
            Self::EqualToQueries => n_q,
            Self::Fixed(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_q: usize,
    pub n_k: usize,
    pub count: OpCount,
    /// Median wall time, when measured.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSweep {
    pub channels: usize,
    pub points: Vec<SweepPoint>,
    /// Fitted exponent of the quadratic MAC terms against `n_q`.
    pub mac_exponent: f64,
    /// Fitted exponent of the measured wall time, when measured.
    pub wall_exponent: Option<f64>,
}

fn check_sweep(n_q: &[usize]) -> Result<()> {
    let lo = n_q.iter().copied().min().unwrap_or(0);
    let hi = n_q.iter().copied().max().unwrap_or(0);
    if n_q.len() < 3 || lo == 0 || hi < 4 * lo {
        return Err(Error::Config(
            "attention sweep needs at least 3 positive N_q values spanning 4x".into(),
        ));
    }
    Ok(())
}

/// Closed-form attention MACs over `n_q` values.
pub fn attention_cost_sweep(n_q: &[usize], channels: usize, keys: KeyRule) -> Result<AttentionSweep> {
    check_sweep(n_q)?;
    let points: Vec<SweepPoint> = n_q
        .iter()
        .map(|&q| {
            let k = keys.keys_for(q);
            SweepPoint {
                n_q: q,
                n_k: k,
                count: attention::attention_op_count(q, k, channels),
                wall_ms: None,
            }
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.n_q as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.count.quadratic() as f64).collect();
    Ok(AttentionSweep {
        channels,
        mac_exponent: fit_exponent(&xs, &ys),
        points,
        wall_exponent: None,
    })
}

/// As [`attention_cost_sweep`], also timing [`attention::aggregate`] on
/// seeded inputs (median of `repetitions` after one warm-up).
pub fn measured_attention_sweep(
    n_q: &[usize],
    channels: usize,
    keys: KeyRule,
    repetitions: usize,
    seed: u64,
) -> Result<AttentionSweep> {
    let mut sweep = attention_cost_sweep(n_q, channels, keys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::seeded(channels, seed);
    for p in &mut sweep.points {
        let q = QuerySet::from_features(Tensor::random_uniform(&[p.n_q, channels], -1.0, 1.0, &mut rng));
        let k = KeySet::from_features(Tensor::random_uniform(&[p.n_k, channels], -1.0, 1.0, &mut rng));
        let mut times = Vec::with_capacity(repetitions);
        for i in 0..=repetitions.max(1) {
            let t = Instant::now();
            let out = attention::aggregate(&q, &k, &params)?;
            let d = t.elapsed();
            std::hint::black_box(out);
            if i > 0 {
                times.push(d);
            }
        }
        p.wall_ms = Some(median_duration(times).as_secs_f64() * 1e3);
    }
    let xs: Vec<f64> = sweep.points.iter().map(|p| p.n_q as f64).collect();
    let ys: Vec<f64> = sweep
        .points
        .iter()
        .map(|p| p.wall_ms.unwrap_or(0.0).max(1e-9))
        .collect();
    sweep.wall_exponent = Some(fit_exponent(&xs, &ys));
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DecodeStyle, Preset};

    #[test]
    fn location_counts() {
        assert_eq!(nq_for_config(512, 512, &[4]).unwrap(), 16_384);
        assert_eq!(nq_for_config(640, 640, &[8, 16, 32]).unwrap(), 8_400);
        assert_eq!(nq_for_config(600, 1000, &[8, 16, 32, 64, 128]).unwrap(), 12_577);
        assert_eq!(nq_for_config(10, 10, &[64]).unwrap(), 1);
        assert!(nq_for_config(0, 10, &[8]).is_err());
        assert!(nq_for_config(10, 10, &[]).is_err());
    }

    #[test]
    fn location_count_matches_pyramid() {
        let cfg = DetectorConfig::preset(Preset::YoloxLike).with_input_size(100, 72);
        let det = Detector::from_seed(cfg.clone(), 0).unwrap();
        let p = det.build_pyramid(&Tensor::zeros(&[3, 100, 72]), 0).unwrap();
        assert_eq!(nq_for_config(100, 72, &cfg.strides).unwrap(), p.location_count());
    }

    #[test]
    fn layer_model_matches_weights() {
        let cfg = DetectorConfig::preset(Preset::FcosLike).with_input_size(96, 160);
        let det = Detector::from_seed(cfg.clone(), 0).unwrap();
        let wts = det.weights();
        let hw = |s: usize| (96usize.div_ceil(s) * 160usize.div_ceil(s)) as u64;
        let conv = |l: &crate::detector::ConvLayer, s: usize| {
            hw(s) * (l.out_channels() * l.in_channels() * l.kernel() * l.kernel()) as u64
        };
        let mut backbone = conv(&wts.stem, 1);
        for (i, st) in wts.stages.iter().enumerate() {
            backbone += conv(st, 2 << i);
        }
        let layers = layer_costs(&cfg);
        let sum = |p: &str| layers.iter().filter(|l| l.part == p).map(|l| l.macs).sum::<u64>();
        assert_eq!(sum("backbone"), backbone);
        let head0: u64 = wts
            .cls_tower
            .iter()
            .chain(&wts.reg_tower)
            .chain([&wts.cls_out, &wts.reg_out, &wts.ctr_out])
            .map(|l| conv(l, 8))
            .sum();
        assert_eq!(sum("head-level-0"), head0);
    }

    #[test]
    fn report_ratios_sum_to_one() {
        let cfg = DetectorConfig {
            decode_style: DecodeStyle::CenterDistance,
            ..DetectorConfig::preset(Preset::YoloxLike).with_input_size(64, 64)
        };
        let det = Detector::from_seed(cfg, 0).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.3);
        let r = profile_frame(&det, &img, 3, &det.all_levels(), None).unwrap();
        let s: f64 = r.parts.iter().map(|p| p.ratio).sum();
        assert!((s - 1.0).abs() < 0.01);
        assert!(r.parts.iter().all(|p| p.wall_ms >= 0.0));
        assert_eq!(r.heads().count(), 3);
        assert!(profile_frame(&det, &img, 2, &det.all_levels(), None).is_err());

        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("part,wall_ms,macs,ratio\n"));
        assert_eq!(text.lines().count(), r.parts.len() + 1);
    }

    #[test]
    fn single_level_preset_has_one_head() {
        let cfg = DetectorConfig::preset(Preset::CenternetLike).with_input_size(64, 64);
        let det = Detector::from_seed(cfg, 0).unwrap();
        let r = profile_frame(&det, &Tensor::zeros(&[3, 64, 64]), 3, &det.all_levels(), None).unwrap();
        assert_eq!(r.heads().count(), 1);
    }

    #[test]
    fn counted_sweep_is_quadratic() {
        let s = attention_cost_sweep(&[256, 512, 1024], 64, KeyRule::EqualToQueries).unwrap();
        assert!((s.mac_exponent - 2.0).abs() < 1e-9);
        let lin = attention_cost_sweep(&[256, 512, 1024], 64, KeyRule::Fixed(300)).unwrap();
        assert!((lin.mac_exponent - 1.0).abs() < 1e-9);
        assert_eq!(lin.points[1].count.similarity, 2 * lin.points[0].count.similarity);
        assert!(attention_cost_sweep(&[256, 512], 64, KeyRule::EqualToQueries).is_err());
        assert!(attention_cost_sweep(&[256, 300, 512], 64, KeyRule::EqualToQueries).is_err());
    }

    #[test]
    fn quadratic_term_ratio_between_query_counts() {
        let a = attention::attention_op_count(300, 300, 256).quadratic() as f64;
        let b = attention::attention_op_count(8_400, 8_400, 256).quadratic() as f64;
        assert!(((b / a) - 784.0).abs() < 1.0);
    }

    #[test]
    fn fit_recovers_power() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((fit_exponent(&xs, &ys) - 1.7).abs() < 1e-12);
    }
}
