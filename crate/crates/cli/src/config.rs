use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vodet_core::detector::{Detector, DetectorConfig, DetectorWeights, Preset, WeightMode};
use vodet_core::io::{read_ppm, read_truth};
use vodet_core::lpn::{DEFAULT_RATIO, DEFAULT_REFERENCES};
use vodet_core::pipeline::{MaskSource, PipelineConfig, PipelineKind};
use vodet_core::spn::DEFAULT_INTERVAL;
use vodet_core::synth::{self, GroundTruth, SequenceSpec};
use vodet_core::Tensor;

use crate::CliError;

fn default_pipeline() -> PipelineKind {
    PipelineKind::LpnSpn
}

fn default_preset() -> Preset {
    Preset::FcosLike
}

fn default_ratio() -> f32 {
    DEFAULT_RATIO
}

fn default_interval() -> usize {
    DEFAULT_INTERVAL
}

fn default_refs() -> usize {
    DEFAULT_REFERENCES
}

fn default_weights() -> WeightMode {
    WeightMode::Analytic
}

/// The run file. Relative paths are taken from the file's directory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_pipeline")]
    pub pipeline: PipelineKind,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_ratio")]
    pub r: f32,
    #[serde(default = "default_interval", rename = "T")]
    pub interval: usize,
    #[serde(default = "default_refs", alias = "reference_count")]
    pub refs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_weights")]
    pub weights: WeightMode,
    /// Weights saved earlier; otherwise they are built from `seed`.
    pub weights_file: Option<PathBuf>,
    #[serde(default)]
    pub mask_source: MaskSource,
    pub score_threshold: Option<f32>,
    /// Directory of `frame_*.ppm` with an optional `truth.csv`.
    pub input: Option<PathBuf>,
    /// Sequence spec to synthesize frames from.
    pub sequence: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// Command-line values that replace their run-file counterparts.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Run file (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// baseline, naive, lpn or lpn_spn.
    #[arg(long)]
    pub pipeline: Option<PipelineKind>,
    /// fcos-like, centernet-like or yolox-like.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Box adjustment ratio r.
    #[arg(long = "ratio-r")]
    pub ratio_r: Option<f32>,
    /// Frames between full detections, T.
    #[arg(long = "interval-t")]
    pub interval_t: Option<usize>,
    /// Reference frames kept for aggregation.
    #[arg(long)]
    pub refs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// analytic or seeded-random.
    #[arg(long)]
    pub weights: Option<WeightMode>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.weights_file,
            &mut cfg.input,
            &mut cfg.sequence,
            &mut cfg.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = o.pipeline {
            cfg.pipeline = v;
        }
        if let Some(v) = o.preset {
            cfg.preset = v;
        }
        if let Some(v) = o.ratio_r {
            cfg.r = v;
        }
        if let Some(v) = o.interval_t {
            cfg.interval = v;
        }
        if let Some(v) = o.refs {
            cfg.refs = v;
        }
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.weights {
            cfg.weights = v;
        }
        if let Some(v) = &o.input {
            cfg.input = Some(v.clone());
            cfg.sequence = None;
        }
        if let Some(v) = &o.sequence {
            cfg.sequence = Some(v.clone());
            cfg.input = None;
        }
        if let Some(v) = &o.output {
            cfg.output = Some(v.clone());
        }
        cfg.pipeline_config().validate()?;
        Ok(cfg)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            kind: self.pipeline,
            ratio: self.r,
            interval: self.interval,
            references: self.refs,
            seed: self.seed,
            mask_source: self.mask_source,
            keep_masks: false,
        }
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("no output path (set `output` or pass --output)".into()))
    }

    /// Frames and, when known, their truth.
    pub fn load_frames(&self) -> Result<(Vec<Tensor>, Option<GroundTruth>), CliError> {
        match (&self.input, &self.sequence) {
            (Some(dir), _) => read_frame_dir(dir),
            (None, Some(spec)) => {
                let spec = load_sequence(spec)?;
                let (frames, truth) = synth::generate(&spec)?;
                Ok((frames, Some(truth)))
            }
            (None, None) => Err(CliError::Config("no input (set `input` or `sequence`)".into())),
        }
    }

    /// A detector for frames of the given size.
    pub fn detector(&self, height: usize, width: usize) -> Result<Detector, CliError> {
        let mut dc = DetectorConfig::preset(self.preset)
            .with_input_size(height, width)
            .with_weight_mode(self.weights);
        if let Some(s) = self.score_threshold {
            dc.score_threshold = s;
        }
        dc.validate()?;
        let det = match &self.weights_file {
            Some(path) => {
                let f = fs::File::open(path)
                    .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
                let weights = DetectorWeights::read_from(BufReader::new(f), &dc)?;
                Detector::new(dc, weights)?
            }
            None => Detector::from_seed(dc, self.seed)?,
        };
        Ok(det)
    }
}

pub fn load_sequence(path: &Path) -> Result<SequenceSpec, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: SequenceSpec = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.ppm")
}

fn read_frame_dir(dir: &Path) -> Result<(Vec<Tensor>, Option<GroundTruth>), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("frame_") && name.ends_with(".ppm")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no frame_*.ppm files in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = read_ppm(BufReader::new(fs::File::open(p)?))?;
        if let Some(first) = frames.first() {
            let first: &Tensor = first;
            if first.shape() != img.shape() {
                return Err(CliError::Config(format!(
                    "{} differs in size from the first frame",
                    p.display()
                )));
            }
        }
        frames.push(img);
    }
    let truth_path = dir.join("truth.csv");
    let truth = if truth_path.exists() {
        Some(read_truth(fs::File::open(truth_path)?, frames.len())?)
    } else {
        None
    };
    Ok((frames, truth))
}
