//! On-disk formats: 16-bit PPM frames, CSV ground truth and detections,
//! and mask dumps.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Detection, TruthBox};
use crate::error::{Error, Result};
use crate::lpn::ForegroundMaskSet;
use crate::synth::GroundTruth;
use crate::tensor::Tensor;

const PPM_MAX: u16 = u16::MAX;

/// Writes a `[3, H, W]` image in `[0, 1]` as binary PPM with 16-bit samples.
pub fn write_ppm<W: Write>(image: &Tensor, mut out: W) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Format(format!("PPM needs 3 channels, got {c}")));
    }
    write!(out, "P6\n{w} {h}\n{PPM_MAX}\n")?;
    let plane = h * w;
    let data = image.data();
    let mut buf = Vec::with_capacity(plane * 6);
    for p in 0..plane {
        for ch in 0..3 {
            let v = (data[ch * plane + p].clamp(0.0, 1.0) * PPM_MAX as f32).round() as u16;
            buf.extend_from_slice(&v.to_be_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PPM header".into()))
}

/// Reads a binary PPM with 8- or 16-bit samples into `[3, H, W]` in `[0, 1]`.
pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    if header_token(&mut r)? != "P6" {
        return Err(bad("expected magic P6"));
    }
    let mut num = || -> Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| bad("malformed header number"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || max == 0 || max > PPM_MAX as usize {
        return Err(bad("invalid size or maxval"));
    }
    let bytes = if max > 255 { 2 } else { 1 };
    let plane = w * h;
    let mut raw = vec![0u8; plane * 3 * bytes];
    r.read_exact(&mut raw)?;
    let mut data = vec![0.0f32; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            let i = (p * 3 + ch) * bytes;
            let v = if bytes == 2 {
                u16::from_be_bytes([raw[i], raw[i + 1]]) as f32
            } else {
                raw[i] as f32
            };
            data[ch * plane + p] = v / max as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    frame_index: usize,
    class_id: usize,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

/// One record per box: `frame_index,class_id,x1,y1,x2,y2`.
pub fn write_truth<W: Write>(truth: &GroundTruth, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (t, boxes) in truth.frames.iter().enumerate() {
        for g in boxes {
            w.serialize(TruthRecord {
                frame_index: t,
                class_id: g.class_id,
                x1: g.bbox.x1,
                y1: g.bbox.y1,
                x2: g.bbox.x2,
                y2: g.bbox.y2,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads truth written by [`write_truth`]; `num_frames` pads trailing
/// frames without boxes.
pub fn read_truth<R: Read>(input: R, num_frames: usize) -> Result<GroundTruth> {
    let mut frames: Vec<Vec<TruthBox>> = vec![Vec::new(); num_frames];
    for rec in csv::Reader::from_reader(input).deserialize() {
        let r: TruthRecord = rec?;
        if r.frame_index >= frames.len() {
            frames.resize(r.frame_index + 1, Vec::new());
        }
        frames[r.frame_index].push(TruthBox {
            bbox: BBox::new(r.x1, r.y1, r.x2, r.y2),
            class_id: r.class_id,
        });
    }
    Ok(GroundTruth { frames })
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    frame: usize,
    class: usize,
    score: f32,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
    level: usize,
}

/// One record per detection: `frame,class,score,x1,y1,x2,y2,level`.
pub fn write_detections<W: Write>(dets: &[Vec<Detection>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (t, frame) in dets.iter().enumerate() {
        for d in frame {
            w.serialize(DetectionRecord {
                frame: t,
                class: d.class_id,
                score: d.score,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
                level: d.level_index,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections<R: Read>(input: R, num_frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); num_frames];
    for rec in csv::Reader::from_reader(input).deserialize() {
        let r: DetectionRecord = rec?;
        if r.frame >= frames.len() {
            frames.resize(r.frame + 1, Vec::new());
        }
        frames[r.frame].push(Detection {
            bbox: BBox::new(r.x1, r.y1, r.x2, r.y2),
            score: r.score,
            class_id: r.class,
            level_index: r.level,
        });
    }
    Ok(frames)
}

/// Run-length text: one line per level,
/// `level <l> stride <s> <h>x<w>: <zeros> <ones> <zeros> ...` in row-major
/// order, starting with a (possibly empty) run of zeros.
pub fn mask_rle(masks: &ForegroundMaskSet) -> String {
    let mut out = String::new();
    for (l, m) in masks.masks.iter().enumerate() {
        let (h, w) = (m.shape()[1], m.shape()[2]);
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0usize;
        for &v in m.data() {
            let bit = v != 0.0;
            if bit != cur {
                runs.push(len);
                cur = bit;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "level {l} stride {} {h}x{w}: {}\n",
            masks.strides[l],
            runs.join(" ")
        ));
    }
    out
}

/// Plain PBM (`P1`) bitmap of one level's mask; 1 is foreground.
pub fn write_mask_pbm<W: Write>(mask: &Tensor, mut out: W) -> Result<()> {
    let (_, h, w) = mask.dims3()?;
    writeln!(out, "P1\n{w} {h}")?;
    for row in mask.data().chunks(w) {
        let line: Vec<&str> = row.iter().map(|&v| if v != 0.0 { "1" } else { "0" }).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
