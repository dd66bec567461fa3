//! Detector parameters: generation from a seed, analytic construction, and a
//! flat binary file format.
//!
//! File layout: one line of JSON (the header), a `\n`, then every tensor's
//! values as little-endian `f32` in header order.

use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, WeightMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "vodet-weights";
const FORMAT_VERSION: u32 = 1;

/// Gain and threshold of the analytic stem: `clamp01(8 · (I − 0.5))`, so any
/// channel value ≤ 0.5 maps to 0 and ≥ 0.625 maps to exactly 1.
pub const ANALYTIC_STEM_GAIN: f32 = 8.0;
pub const ANALYTIC_STEM_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, k, k]`, applied with stride 1 and padding `k / 2`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: vec![0.0; c_out],
        }
    }

    fn he_uniform(c_out: usize, c_in: usize, k: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * k * k) as f32;
        let bound = (gain / fan_in).sqrt();
        Self {
            weight: Tensor::random_uniform(&[c_out, c_in, k, k], -bound, bound, rng),
            bias: vec![0.0; c_out],
        }
    }

    /// Passes channels `0..n` straight through via the centre tap.
    fn identity_prefix(c_out: usize, c_in: usize, k: usize, n: usize) -> Self {
        let mut layer = Self::zeros(c_out, c_in, k);
        let centre = (k / 2) * k + k / 2;
        let data = layer.weight.data_mut();
        for c in 0..n.min(c_out).min(c_in) {
            data[(c * c_in + c) * k * k + centre] = 1.0;
        }
        layer
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    pub mode: WeightMode,
    pub seed: u64,
    /// 1×1 conv on the RGB image.
    pub stem: ConvLayer,
    /// One 3×3 conv per 2× down-sampling step, up to the coarsest stride.
    pub stages: Vec<ConvLayer>,
    /// 1×1 conv per level taking the backbone map to `channels`.
    pub laterals: Vec<ConvLayer>,
    /// 1×1 conv applied to the upsampled coarser level, one per level except the coarsest.
    pub top_down: Vec<ConvLayer>,
    pub cls_tower: Vec<ConvLayer>,
    pub reg_tower: Vec<ConvLayer>,
    pub cls_out: ConvLayer,
    pub reg_out: ConvLayer,
    pub ctr_out: ConvLayer,
}

impl DetectorWeights {
    /// Weights for `config` in its configured mode.
    pub fn generate(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(match config.weight_mode {
            WeightMode::SeededRandom => Self::seeded(config, seed),
            WeightMode::Analytic => Self::analytic(config, seed),
        })
    }

    fn seeded(config: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let stem = ConvLayer::he_uniform(config.backbone_width(1), 3, 1, 6.0, &mut rng);
        let stages = stage_strides(config)
            .map(|s| ConvLayer::he_uniform(config.backbone_width(s), config.backbone_width(s / 2), 3, 6.0, &mut rng))
            .collect();
        let laterals = config
            .strides
            .iter()
            .map(|&s| ConvLayer::he_uniform(c, config.backbone_width(s), 1, 6.0, &mut rng))
            .collect();
        let top_down = (1..config.num_levels())
            .map(|_| ConvLayer::he_uniform(c, c, 1, 3.0, &mut rng))
            .collect();
        let cls_tower = (0..config.head_depth)
            .map(|_| ConvLayer::he_uniform(c, c, 3, 6.0, &mut rng))
            .collect();
        let reg_tower = (0..config.head_depth)
            .map(|_| ConvLayer::he_uniform(c, c, 3, 6.0, &mut rng))
            .collect();
        let cls_out = ConvLayer::he_uniform(config.num_classes, c, 3, 3.0, &mut rng);
        let reg_out = ConvLayer::he_uniform(4, c, 3, 1.0, &mut rng);
        let ctr_out = ConvLayer::he_uniform(1, c, 3, 3.0, &mut rng);
        Self {
            mode: WeightMode::SeededRandom,
            seed,
            stem,
            stages,
            laterals,
            top_down,
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
            ctr_out,
        }
    }

    /// Class `k` lives on channel `k` everywhere: the stem binarises RGB
    /// channel `k`, every later conv copies it through its centre tap, and
    /// top-down merges add zero. Each level's channel `k` therefore holds the
    /// exact fraction of every cell covered by class-`k` rectangles.
    fn analytic(config: &DetectorConfig, seed: u64) -> Self {
        let (c, n) = (config.channels, config.num_classes);
        let mut stem = ConvLayer::zeros(config.backbone_width(1), 3, 1);
        for k in 0..n {
            stem.weight.data_mut()[k * 3 + k] = ANALYTIC_STEM_GAIN;
            stem.bias[k] = -ANALYTIC_STEM_GAIN * ANALYTIC_STEM_THRESHOLD;
        }
        let stages = stage_strides(config)
            .map(|s| ConvLayer::identity_prefix(config.backbone_width(s), config.backbone_width(s / 2), 3, n))
            .collect();
        let laterals = config
            .strides
            .iter()
            .map(|&s| ConvLayer::identity_prefix(c, config.backbone_width(s), 1, n))
            .collect();
        let top_down = (1..config.num_levels()).map(|_| ConvLayer::zeros(c, c, 1)).collect();
        let tower = || {
            (0..config.head_depth)
                .map(|_| ConvLayer::identity_prefix(c, c, 3, n))
                .collect::<Vec<_>>()
        };
        Self {
            mode: WeightMode::Analytic,
            seed,
            stem,
            stages,
            laterals,
            top_down,
            cls_tower: tower(),
            reg_tower: tower(),
            cls_out: ConvLayer::zeros(n, c, 3),
            reg_out: ConvLayer::zeros(4, c, 3),
            ctr_out: ConvLayer::zeros(1, c, 3),
        }
    }

    fn layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        out.extend(self.stages.iter().enumerate().map(|(i, l)| (format!("stage{i}"), l)));
        out.extend(
            self.laterals
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("lateral{i}"), l)),
        );
        out.extend(
            self.top_down
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("top_down{i}"), l)),
        );
        out.extend(
            self.cls_tower
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("cls_tower{i}"), l)),
        );
        out.extend(
            self.reg_tower
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("reg_tower{i}"), l)),
        );
        out.push(("cls_out".into(), &self.cls_out));
        out.push(("reg_out".into(), &self.reg_out));
        out.push(("ctr_out".into(), &self.ctr_out));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out = vec![&mut self.stem];
        out.extend(self.stages.iter_mut());
        out.extend(self.laterals.iter_mut());
        out.extend(self.top_down.iter_mut());
        out.extend(self.cls_tower.iter_mut());
        out.extend(self.reg_tower.iter_mut());
        out.push(&mut self.cls_out);
        out.push(&mut self.reg_out);
        out.push(&mut self.ctr_out);
        out
    }

    /// Checks every layer shape against what `config` needs.
    pub fn check_against(&self, config: &DetectorConfig) -> Result<()> {
        let expected = Self::analytic(config, 0);
        if self.mode != config.weight_mode {
            return Err(Error::Config(format!(
                "weights are {} but config asks for {}",
                self.mode, config.weight_mode
            )));
        }
        let want = expected.layers();
        let have = self.layers();
        if want.len() != have.len() {
            return Err(Error::Config(format!(
                "weights have {} layers, config needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.weight.shape() != h.weight.shape() || w.bias.len() != h.bias.len() {
                return Err(Error::Config(format!(
                    "layer {name}: expected {:?}, found {:?}",
                    w.weight.shape(),
                    h.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.weight.len() + l.bias.len()).sum()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, layer) in self.layers() {
            tensors.push(TensorEntry {
                name: format!("{name}.weight"),
                shape: layer.weight.shape().to_vec(),
            });
            tensors.push(TensorEntry {
                name: format!("{name}.bias"),
                shape: vec![layer.bias.len()],
            });
        }
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            mode: self.mode,
            seed: self.seed,
            tensors,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (_, layer) in self.layers() {
            for v in layer.weight.data().iter().chain(&layer.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads weights written by [`write_to`](Self::write_to) and checks them against `config`.
    pub fn read_from<R: BufRead>(mut input: R, config: &DetectorConfig) -> Result<Self> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weights format {} v{}",
                header.format, header.version
            )));
        }
        let mut cfg = config.clone();
        cfg.weight_mode = header.mode;
        let mut weights = Self::analytic(&cfg, header.seed);
        weights.mode = header.mode;
        {
            let layers = weights.layers_mut();
            if header.tensors.len() != 2 * layers.len() {
                return Err(Error::Format(format!(
                    "header lists {} tensors, config needs {}",
                    header.tensors.len(),
                    2 * layers.len()
                )));
            }
            for (layer, pair) in layers.into_iter().zip(header.tensors.chunks(2)) {
                if pair[0].shape != layer.weight.shape() || pair[1].shape != [layer.bias.len()] {
                    return Err(Error::Format(format!(
                        "tensor {} has shape {:?}, config needs {:?}",
                        pair[0].name,
                        pair[0].shape,
                        layer.weight.shape()
                    )));
                }
                read_f32s(&mut input, layer.weight.data_mut())?;
                read_f32s(&mut input, &mut layer.bias)?;
            }
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        weights.check_against(&cfg)?;
        Ok(weights)
    }
}

fn read_f32s<R: Read>(input: &mut R, dst: &mut [f32]) -> Result<()> {
    let mut buf = [0u8; 4];
    for v in dst {
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(())
}

/// Strides produced by backbone stages: 2, 4, … up to the coarsest level.
pub(crate) fn stage_strides(config: &DetectorConfig) -> impl Iterator<Item = usize> {
    let max = config.max_stride();
    (1..=max.trailing_zeros()).map(|p| 1usize << p)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    mode: WeightMode,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
