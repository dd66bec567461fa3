//! Self-checks run after a pipeline; any violation exits with code 3.

use vodet_core::detector::Detector;
use vodet_core::pipeline::{PipelineConfig, PipelineKind, RunOutput};
use vodet_core::profile::nq_for_config;
use vodet_core::Detection;

use crate::CliError;

const EDGE_TOLERANCE: f32 = 1e-3;

pub fn detect_run(
    det: &Detector,
    pc: &PipelineConfig,
    run: &RunOutput,
    reread: &[Vec<Detection>],
) -> Result<(), CliError> {
    let dc = det.config();
    let (w, h) = (dc.input_width as f32, dc.input_height as f32);
    let mut problems = Vec::new();

    let nq = nq_for_config(dc.input_height, dc.input_width, &dc.strides)?;
    if nq != dc.location_count() {
        problems.push(format!(
            "N_q {nq} but the pyramid has {} locations",
            dc.location_count()
        ));
    }

    let period = if pc.kind == PipelineKind::LpnSpn {
        pc.interval + 1
    } else {
        1
    };
    for (t, rec) in run.trace.iter().enumerate() {
        if rec.frame_index != t {
            problems.push(format!("trace record {t} is for frame {}", rec.frame_index));
        }
        if rec.full != (t % period == 0) {
            problems.push(format!("frame {t}: full={} off the period of {period}", rec.full));
        }
        if rec.levels.is_empty() || rec.levels.iter().any(|&l| l >= dc.num_levels()) {
            problems.push(format!("frame {t}: bad level set {:?}", rec.levels));
        }
    }

    for f in &run.frames {
        let t = f.frame_index;
        if f.detections.len() > dc.top_k {
            problems.push(format!(
                "frame {t}: {} detections over the cap {}",
                f.detections.len(),
                dc.top_k
            ));
        }
        if f.mask_cells > nq {
            problems.push(format!("frame {t}: {} mask cells of {nq}", f.mask_cells));
        }
        if pc.kind == PipelineKind::Baseline && f.attention.total() != 0 {
            problems.push(format!("frame {t}: baseline ran attention"));
        }
        for d in &f.detections {
            let b = d.bbox;
            let finite = [b.x1, b.y1, b.x2, b.y2, d.score].iter().all(|v| v.is_finite());
            let inside = b.x1 >= -EDGE_TOLERANCE
                && b.y1 >= -EDGE_TOLERANCE
                && b.x2 <= w + EDGE_TOLERANCE
                && b.y2 <= h + EDGE_TOLERANCE
                && b.x1 <= b.x2
                && b.y1 <= b.y2;
            if !finite || !inside || !(0.0..=1.0).contains(&d.score) || d.class_id >= dc.num_classes {
                problems.push(format!("frame {t}: malformed detection {d:?}"));
            } else if !f.plan.levels.contains(&d.level_index) {
                problems.push(format!("frame {t}: detection from skipped level {}", d.level_index));
            }
        }
    }

    if reread != run.detections().as_slice() {
        problems.push("detections file does not read back to the same detections".into());
    }

    if problems.is_empty() {
        Ok(())
    } else {
        for p in &problems {
            log::error!("{p}");
        }
        Err(CliError::Invariant(format!(
            "{} problem(s), first: {}",
            problems.len(),
            problems[0]
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vodet_core::detector::{DetectorConfig, Preset, WeightMode};
    use vodet_core::pipeline::run_sequence;
    use vodet_core::synth::{generate, ObjectSpec, SequenceSpec};
    use vodet_core::BBox;

    fn run() -> (Detector, PipelineConfig, RunOutput) {
        let spec = SequenceSpec {
            num_frames: 5,
            height: 64,
            width: 96,
            noise: 0.1,
            seed: 1,
            objects: vec![ObjectSpec {
                bbox: BBox::new(10.0, 10.0, 50.0, 40.0),
                velocity: [1.0, 0.0],
                growth: 1.0,
                intensity: 1.0,
                class_id: 0,
            }],
        };
        let (frames, truth) = generate(&spec).unwrap();
        let dc = DetectorConfig::preset(Preset::YoloxLike)
            .with_input_size(64, 96)
            .with_weight_mode(WeightMode::Analytic);
        let det = Detector::from_seed(dc, 0).unwrap();
        let mut pc = PipelineConfig::new(PipelineKind::LpnSpn);
        pc.interval = 1;
        let out = run_sequence(&det, &pc, &frames, Some(&truth)).unwrap();
        (det, pc, out)
    }

    #[test]
    fn clean_run_passes() {
        let (det, pc, out) = run();
        detect_run(&det, &pc, &out, &out.detections()).unwrap();
    }

    #[test]
    fn broken_runs_are_invariant_errors() {
        let (det, pc, out) = run();

        let mut off_period = out.clone();
        off_period.trace[1].full = true;
        let e = detect_run(&det, &pc, &off_period, &out.detections()).unwrap_err();
        assert!(matches!(e, CliError::Invariant(_)));

        let mut lost = out.detections();
        lost[0].clear();
        assert!(matches!(
            detect_run(&det, &pc, &out, &lost),
            Err(CliError::Invariant(_))
        ));

        let mut bad = out.clone();
        bad.frames[0].detections[0].score = 2.0;
        assert!(matches!(
            detect_run(&det, &pc, &bad, &bad.detections()),
            Err(CliError::Invariant(_))
        ));
    }
}
