use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vodet_core::attention::OpCount;
use vodet_core::detector::{AggregationHook, DetectorConfig, Preset, WeightMode};
use vodet_core::io::{mask_rle, read_detections, write_detections, write_mask_pbm, write_ppm, write_truth};
use vodet_core::lpn::{AggregationMode, LpnHook};
use vodet_core::pipeline::{self, PipelineKind, SweepParam, VideoPipeline};
use vodet_core::profile::{self, AttentionSweep, CostReport, KeyRule};
use vodet_core::synth;
use vodet_core::Tensor;

use crate::check;
use crate::config::{frame_name, load_sequence, Overrides, RunConfig};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskFormat {
    Rle,
    Pbm,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

pub fn generate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let spec = load_sequence(spec_path)?;
    let (frames, truth) = synth::generate(&spec)?;
    fs::create_dir_all(out)?;
    for (t, img) in frames.iter().enumerate() {
        let mut f = create(&out.join(frame_name(t)))?;
        write_ppm(img, &mut f)?;
        f.flush()?;
    }
    let mut f = create(&out.join("truth.csv"))?;
    write_truth(&truth, &mut f)?;
    f.flush()?;
    println!(
        "wrote {} frames of {}x{} to {}",
        frames.len(),
        spec.width,
        spec.height,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Metrics {
    pipeline: PipelineKind,
    preset: Preset,
    weights: WeightMode,
    r: f32,
    #[serde(rename = "T")]
    interval: usize,
    refs: usize,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    nq: usize,
    detections: usize,
    full_frames: Vec<usize>,
    attention: OpCount,
    attention_macs: u64,
    /// Mean masked fraction of all cells over frames that aggregated.
    mean_mask_fraction: Option<f64>,
    skipped_aggregations: usize,
    /// Mean share of truth centres inside the mask.
    mean_center_coverage: Option<f64>,
    recall: Option<f32>,
    precision: Option<f32>,
    true_positives: Option<usize>,
    wall_seconds: f64,
    frames_per_second: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

pub fn detect(o: &Overrides, dump: Option<MaskFormat>) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let out = cfg.output_dir()?.to_path_buf();
    let (frames, truth) = cfg.load_frames()?;
    let (_, h, w) = frames[0].dims3()?;
    let det = cfg.detector(h, w)?;
    let mut pc = cfg.pipeline_config();
    pc.keep_masks = dump.is_some();
    let nq = profile::nq_for_config(h, w, &det.config().strides)?;

    let run = pipeline::run_sequence(&det, &pc, &frames, truth.as_ref())?;
    let dets = run.detections();
    fs::create_dir_all(&out)?;
    let det_path = out.join("detections.csv");
    {
        let mut f = create(&det_path)?;
        write_detections(&dets, &mut f)?;
        f.flush()?;
    }
    {
        let mut f = create(&out.join("schedule.jsonl"))?;
        for rec in &run.trace {
            serde_json::to_writer(&mut f, rec)?;
            writeln!(f)?;
        }
        f.flush()?;
    }
    match dump {
        Some(MaskFormat::Rle) => {
            let mut f = create(&out.join("masks.txt"))?;
            for fr in &run.frames {
                match &fr.masks {
                    Some(m) if !m.skipped => write!(f, "frame {}\n{}", fr.frame_index, mask_rle(m))?,
                    _ => writeln!(f, "frame {} none", fr.frame_index)?,
                }
            }
            f.flush()?;
        }
        Some(MaskFormat::Pbm) => {
            let dir = out.join("masks");
            fs::create_dir_all(&dir)?;
            for fr in &run.frames {
                let Some(m) = fr.masks.as_ref().filter(|m| !m.skipped) else {
                    continue;
                };
                for (l, mask) in m.masks.iter().enumerate() {
                    let mut f = create(&dir.join(format!("frame_{:05}_level_{l}.pbm", fr.frame_index)))?;
                    write_mask_pbm(mask, &mut f)?;
                    f.flush()?;
                }
            }
        }
        None => {}
    }

    let eval = truth.as_ref().map(|g| synth::evaluate(&dets, g, 0.5));
    let attention = run.attention();
    let metrics = Metrics {
        pipeline: cfg.pipeline,
        preset: cfg.preset,
        weights: cfg.weights,
        r: cfg.r,
        interval: cfg.interval,
        refs: cfg.refs,
        seed: cfg.seed,
        frames: frames.len(),
        height: h,
        width: w,
        nq,
        detections: dets.iter().map(Vec::len).sum(),
        full_frames: run.full_frames(),
        attention,
        attention_macs: attention.total(),
        mean_mask_fraction: mean(
            run.frames
                .iter()
                .filter(|f| cfg.pipeline != PipelineKind::Baseline && !f.aggregation_skipped)
                .map(|f| f.mask_cells as f64 / nq as f64),
        ),
        skipped_aggregations: run.frames.iter().filter(|f| f.aggregation_skipped).count(),
        mean_center_coverage: mean(run.frames.iter().filter_map(|f| f.coverage.map(f64::from))),
        recall: eval.as_ref().map(|e| e.recall),
        precision: eval.as_ref().map(|e| e.precision),
        true_positives: eval.as_ref().map(|e| e.true_positives),
        wall_seconds: run.elapsed.as_secs_f64(),
        frames_per_second: run.frames_per_second(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;

    let reread = read_detections(File::open(&det_path)?, frames.len())?;
    check::detect_run(&det, &pc, &run, &reread)?;

    println!(
        "{} on {} frames: {} detections, {} full frames, {} attention MACs, {:.2} frames/s",
        cfg.pipeline,
        frames.len(),
        metrics.detections,
        metrics.full_frames.len(),
        metrics.attention_macs,
        metrics.frames_per_second
    );
    if let Some(e) = &eval {
        println!("recall {:.3} precision {:.3}", e.recall, e.precision);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProfileSummary {
    preset: Preset,
    pipeline: PipelineKind,
    height: usize,
    width: usize,
    nq: usize,
    head_share: f64,
    finest_head_share: f64,
    /// Partial-frame head time over full-frame head time.
    partial_head_ratio: Option<f64>,
    partial_levels: Option<Vec<usize>>,
}

fn print_report(title: &str, r: &CostReport) {
    println!("{title} ({} repetitions, {:.3} ms)", r.repetitions, r.total_ms);
    println!("  {:<14} {:>10} {:>14} {:>7}", "part", "wall_ms", "macs", "share");
    for p in &r.parts {
        println!(
            "  {:<14} {:>10.3} {:>14} {:>6.1}%",
            p.part,
            p.wall_ms,
            p.macs,
            100.0 * p.ratio
        );
    }
}

fn save_report(out: &Path, stem: &str, r: &CostReport) -> Result<(), CliError> {
    let mut f = create(&out.join(format!("{stem}.csv")))?;
    r.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(&out.join(format!("{stem}.json")))?;
    r.write_json(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn profile(o: &Overrides, repetitions: usize, nq_sweep: &[usize], channels: usize) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let out = cfg.output_dir()?.to_path_buf();
    let frames = if cfg.input.is_some() || cfg.sequence.is_some() {
        cfg.load_frames()?.0
    } else {
        let dc = DetectorConfig::preset(cfg.preset);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        vec![Tensor::random_uniform(
            &[3, dc.input_height, dc.input_width],
            0.0,
            1.0,
            &mut rng,
        )]
    };
    let (_, h, w) = frames[0].dims3()?;
    let det = cfg.detector(h, w)?;
    let nq = profile::nq_for_config(h, w, &det.config().strides)?;
    let all = det.all_levels();
    fs::create_dir_all(&out)?;

    let (full, partial) = if cfg.pipeline == PipelineKind::Baseline {
        (profile::profile_frame(&det, &frames[0], repetitions, &all, None)?, None)
    } else {
        // fill the reference bank and prior from the frames before the profiled one
        let mut pipe = VideoPipeline::new(&det, cfg.pipeline_config())?;
        let target = frames.len().min(3) - 1;
        for img in &frames[..target] {
            pipe.process_frame(img, None)?;
        }
        let img = &frames[target];
        let mode = if cfg.pipeline == PipelineKind::Naive {
            AggregationMode::Full
        } else {
            AggregationMode::Partial
        };
        let hook = || LpnHook::new(mode, pipe.prior(), pipe.bank(), pipe.attention_params(), cfg.r, w, h);
        let mut hf = hook();
        let full = profile::profile_frame(&det, img, repetitions, &all, Some(&mut hf as &mut dyn AggregationHook))?;
        let plan = pipe.schedule().plan_frame();
        let partial = if cfg.pipeline == PipelineKind::LpnSpn && !plan.full {
            let mut hp = hook();
            let r = profile::profile_frame(
                &det,
                img,
                repetitions,
                &plan.levels,
                Some(&mut hp as &mut dyn AggregationHook),
            )?;
            Some((plan.levels, r))
        } else {
            None
        };
        (full, partial)
    };

    print_report("full frame", &full);
    save_report(&out, "profile", &full)?;
    if let Some((levels, r)) = &partial {
        print_report(&format!("partial frame, levels {levels:?}"), r);
        save_report(&out, "profile_partial", r)?;
    }
    let summary = ProfileSummary {
        preset: cfg.preset,
        pipeline: cfg.pipeline,
        height: h,
        width: w,
        nq,
        head_share: full.head_share(),
        finest_head_share: full.finest_head_share(),
        partial_head_ratio: partial
            .as_ref()
            .map(|(_, r)| r.head_ms() / full.head_ms().max(f64::MIN_POSITIVE)),
        partial_levels: partial.as_ref().map(|(l, _)| l.clone()),
    };
    println!(
        "N_q {nq}; heads take {:.1}% of the frame, the finest level {:.1}% of the heads",
        100.0 * summary.head_share,
        100.0 * summary.finest_head_share
    );
    write_json(&out.join("summary.json"), &summary)?;

    if !nq_sweep.is_empty() {
        let sweep: AttentionSweep =
            profile::measured_attention_sweep(nq_sweep, channels, KeyRule::EqualToQueries, repetitions, cfg.seed)?;
        for p in &sweep.points {
            println!(
                "  N_q {:>6} N_k {:>6}: {:>14} MACs {:>10.3} ms",
                p.n_q,
                p.n_k,
                p.count.total(),
                p.wall_ms.unwrap_or(f64::NAN)
            );
        }
        println!(
            "attention exponent: counted {:.3}, measured {:.3}",
            sweep.mac_exponent,
            sweep.wall_exponent.unwrap_or(f64::NAN)
        );
        write_json(&out.join("attention_sweep.json"), &sweep)?;
    }
    Ok(())
}

pub fn sweep(o: &Overrides, param: SweepParam, values: &[f64], runs: usize) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let out = cfg.output_dir()?.to_path_buf();
    let (frames, truth) = cfg.load_frames()?;
    let (_, h, w) = frames[0].dims3()?;
    let det = cfg.detector(h, w)?;
    let rows = pipeline::sweep(
        &det,
        &cfg.pipeline_config(),
        param,
        values,
        &frames,
        truth.as_ref(),
        runs,
    )?;
    let name = match param {
        SweepParam::Ratio => "r",
        SweepParam::Interval => "T",
    };
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_writer(create(&out.join(format!("sweep_{name}.csv")))?);
    w.write_record([
        "value",
        "throughput_ratio",
        "recall",
        "precision",
        "attention_macs",
        "full_frames",
    ])?;
    println!(
        "{:>8} {:>10} {:>8} {:>10} {:>14} {:>6}",
        name, "vs base", "recall", "precision", "attn MACs", "full"
    );
    for r in &rows {
        w.write_record([
            r.value.to_string(),
            format!("{:.4}", r.throughput_ratio),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.precision),
            r.attention_macs.to_string(),
            r.full_frames.to_string(),
        ])?;
        println!(
            "{:>8} {:>10.3} {:>8.3} {:>10.3} {:>14} {:>6}",
            r.value, r.throughput_ratio, r.recall, r.precision, r.attention_macs, r.full_frames
        );
    }
    w.flush()?;
    Ok(())
}
