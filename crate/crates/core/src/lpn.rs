//! Location prior: foreground masks from the previous frame's confident
//! boxes, and attention aggregation restricted to the masked cells.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, KeyOrigin, KeySet, OpCount, QueryCoord, QuerySet};
use crate::bbox::{BBox, Detection, TruthBox};
use crate::detector::{AggregationHook, FeaturePyramid, LevelGeometry};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Boxes must score strictly above this to guide the next frame.
pub const VALIDATION_SCORE: f32 = 0.5;
/// Adjustment ratio used unless configured otherwise.
pub const DEFAULT_RATIO: f32 = 0.8;
/// Reference frames kept at desk scale.
pub const DEFAULT_REFERENCES: usize = 2;
/// Upper bound on reference frames.
pub const MAX_REFERENCES: usize = 14;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidatedBoxes {
    pub boxes: Vec<Detection>,
    pub source_frame: usize,
}

impl ValidatedBoxes {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Ground-truth boxes standing in for detections (score 1).
    pub fn from_truth(boxes: &[TruthBox], source_frame: usize) -> Self {
        Self {
            boxes: boxes
                .iter()
                .map(|t| Detection {
                    bbox: t.bbox,
                    score: 1.0,
                    class_id: t.class_id,
                    level_index: 0,
                })
                .collect(),
            source_frame,
        }
    }
}

/// Detections scoring strictly above [`VALIDATION_SCORE`], order preserved.
pub fn validate(dets: &[Detection], source_frame: usize) -> ValidatedBoxes {
    ValidatedBoxes {
        boxes: dets.iter().filter(|d| d.score > VALIDATION_SCORE).copied().collect(),
        source_frame,
    }
}

/// Scales width and height by `ratio` about the centre, then clamps to the
/// image. `None` if nothing is left.
pub fn adjust_box(b: &BBox, ratio: f32, image_width: usize, image_height: usize) -> Option<BBox> {
    assert!(ratio > 0.0, "adjustment ratio must be positive");
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() * ratio * 0.5, b.height() * ratio * 0.5);
    let out = BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).clamp(image_width as f32, image_height as f32);
    out.is_valid().then_some(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMaskSet {
    /// One `[1, H_l, W_l]` mask of 0/1 values per level.
    pub masks: Vec<Tensor>,
    pub strides: Vec<usize>,
    pub ratio: f32,
    pub source_frame: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// No usable box: aggregation is skipped for this frame.
    pub skipped: bool,
}

impl ForegroundMaskSet {
    pub fn count(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    pub fn level_count(&self, level: usize) -> usize {
        self.masks[level].data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn total_cells(&self) -> usize {
        self.masks.iter().map(Tensor::len).sum()
    }

    pub fn coverage(&self) -> f32 {
        self.count() as f32 / self.total_cells().max(1) as f32
    }

    pub fn is_set(&self, level: usize, x: usize, y: usize) -> bool {
        let w = self.masks[level].shape()[2];
        self.masks[level].data()[y * w + x] != 0.0
    }

    /// Masks with every cell set; the naive whole-frame adaptation.
    pub fn all_ones(geometry: &[LevelGeometry], image_width: usize, image_height: usize) -> Self {
        Self {
            masks: geometry
                .iter()
                .map(|g| Tensor::full(&[1, g.height, g.width], 1.0))
                .collect(),
            strides: geometry.iter().map(|g| g.stride).collect(),
            ratio: 1.0,
            source_frame: 0,
            image_width,
            image_height,
            skipped: false,
        }
    }
}

/// Per-level masks: cell `(x, y)` at stride `s` is set iff its pixel centre
/// `((x + 0.5)·s, (y + 0.5)·s)` lies inside any adjusted box. Levels not in
/// `levels` (when given) stay zero.
pub fn build_masks(
    vboxes: &ValidatedBoxes,
    geometry: &[LevelGeometry],
    ratio: f32,
    image_width: usize,
    image_height: usize,
    levels: Option<&[usize]>,
) -> ForegroundMaskSet {
    let adjusted: Vec<BBox> = vboxes
        .boxes
        .iter()
        .filter_map(|d| adjust_box(&d.bbox, ratio, image_width, image_height))
        .collect();
    let masks = geometry
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let mut m = Tensor::zeros(&[1, g.height, g.width]);
            if levels.is_some_and(|ls| !ls.contains(&l)) {
                return m;
            }
            let s = g.stride as f32;
            for b in &adjusted {
                // candidate cells, one wider than needed on each side so
                // rounding never drops a cell; `contains` decides
                let xa = ((b.x1 / s - 0.5).ceil() - 1.0).max(0.0) as usize;
                let xb = (b.x2 / s - 0.5).floor() + 1.0;
                let ya = ((b.y1 / s - 0.5).ceil() - 1.0).max(0.0) as usize;
                let yb = (b.y2 / s - 0.5).floor() + 1.0;
                if xb < 0.0 || yb < 0.0 {
                    continue;
                }
                let xb = (xb as usize).min(g.width - 1);
                let yb = (yb as usize).min(g.height - 1);
                for y in ya..=yb {
                    for x in xa..=xb {
                        let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                        if b.contains(cx, cy) {
                            m.data_mut()[y * g.width + x] = 1.0;
                        }
                    }
                }
            }
            m
        })
        .collect();
    ForegroundMaskSet {
        masks,
        strides: geometry.iter().map(|g| g.stride).collect(),
        ratio,
        source_frame: vboxes.source_frame,
        image_width,
        image_height,
        skipped: adjusted.is_empty(),
    }
}

fn check_geometry(pyramid: &FeaturePyramid, masks: &ForegroundMaskSet) -> Result<()> {
    let geo = pyramid.geometry();
    if geo.len() != masks.masks.len() {
        return shape_err(format!(
            "pyramid has {} levels, mask set has {}",
            geo.len(),
            masks.masks.len()
        ));
    }
    for (l, (g, m)) in geo.iter().zip(&masks.masks).enumerate() {
        if m.shape() != [1, g.height, g.width] {
            return shape_err(format!(
                "level {l}: mask {:?} does not match features {}x{}",
                m.shape(),
                g.height,
                g.width
            ));
        }
    }
    Ok(())
}

fn gather(features: &Tensor, cells: &[(usize, usize)]) -> Tensor {
    let (c, _, w) = features.dims3().expect("features are rank 3");
    let plane = features.shape()[1] * w;
    let src = features.data();
    let mut data = Vec::with_capacity(cells.len() * c);
    for &(x, y) in cells {
        let p = y * w + x;
        data.extend((0..c).map(|ch| src[ch * plane + p]));
    }
    Tensor::new(vec![cells.len(), c], data).expect("sized by construction")
}

fn mask_cells(mask: &Tensor) -> Vec<(usize, usize)> {
    let w = mask.shape()[2];
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(p, _)| (p % w, p / w))
        .collect()
}

/// Queries at one level: features of its mask-1 cells, row-major.
pub fn select_level_queries(pyramid: &FeaturePyramid, masks: &ForegroundMaskSet, level: usize) -> QuerySet {
    let cells = mask_cells(&masks.masks[level]);
    QuerySet {
        features: gather(&pyramid.levels[level].features, &cells),
        coords: cells
            .iter()
            .map(|&(x, y)| QueryCoord {
                level_index: level,
                x,
                y,
            })
            .collect(),
    }
}

/// Features of all mask-1 cells across levels, level order then row-major.
pub fn select_queries(pyramid: &FeaturePyramid, masks: &ForegroundMaskSet) -> Result<QuerySet> {
    check_geometry(pyramid, masks)?;
    let parts: Vec<QuerySet> = (0..masks.masks.len())
        .map(|l| select_level_queries(pyramid, masks, l))
        .collect();
    let c = pyramid.channels();
    let n: usize = parts.iter().map(QuerySet::len).sum();
    let mut data = Vec::with_capacity(n * c);
    let mut coords = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.features.data());
        coords.extend(p.coords);
    }
    Ok(QuerySet {
        features: Tensor::new(vec![n, c], data)?,
        coords,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEntry {
    pub frame_index: usize,
    /// Features before any aggregation.
    pub pyramid: FeaturePyramid,
    pub boxes: ValidatedBoxes,
}

/// Past frames used as attention keys. Holds a uniform random sample of at
/// most `capacity` of the frames offered so far (reservoir sampling).
#[derive(Clone, Debug)]
pub struct ReferenceBank {
    entries: Vec<ReferenceEntry>,
    capacity: usize,
    offered: usize,
}

impl ReferenceBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity > MAX_REFERENCES {
            return Err(Error::Config(format!(
                "reference capacity {capacity} outside 1..={MAX_REFERENCES}"
            )));
        }
        Ok(Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            offered: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    /// Offers a processed frame; it is kept with probability `capacity / offered`.
    pub fn offer(&mut self, entry: ReferenceEntry, rng: &mut ChaCha8Rng) {
        if let Some(slot) = self.entries.iter_mut().find(|e| e.frame_index == entry.frame_index) {
            *slot = entry;
            return;
        }
        self.offered += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let j = rng.gen_range(0..self.offered);
            if j < self.capacity {
                self.entries[j] = entry;
            }
        }
    }

    /// Inserts unconditionally, evicting the oldest entry when full.
    pub fn push(&mut self, entry: ReferenceEntry) {
        self.entries.retain(|e| e.frame_index != entry.frame_index);
        if self.entries.len() == self.capacity {
            let oldest = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.frame_index)
                .map(|(i, _)| i)
                .expect("bank is full");
            self.entries.remove(oldest);
        }
        self.offered += 1;
        self.entries.push(entry);
    }
}

/// Per-level key sets gathered from the bank.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelKeys {
    pub levels: Vec<KeySet>,
}

impl LevelKeys {
    pub fn total(&self) -> usize {
        self.levels.iter().map(KeySet::len).sum()
    }
}

/// For every reference frame, the cells of each level inside its adjusted
/// validated boxes. `None` when no reference contributes a single key.
pub fn build_keys(
    bank: &ReferenceBank,
    ratio: f32,
    image_width: usize,
    image_height: usize,
    levels: Option<&[usize]>,
) -> Option<LevelKeys> {
    let first = bank.entries.first()?;
    let geometry = first.pyramid.geometry();
    let c = first.pyramid.channels();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); geometry.len()];
    let mut prov: Vec<Vec<KeyOrigin>> = vec![Vec::new(); geometry.len()];
    for entry in &bank.entries {
        let masks = build_masks(&entry.boxes, &geometry, ratio, image_width, image_height, levels);
        if masks.skipped {
            continue;
        }
        for l in 0..geometry.len() {
            let cells = mask_cells(&masks.masks[l]);
            rows[l].extend_from_slice(gather(&entry.pyramid.levels[l].features, &cells).data());
            prov[l].extend(cells.iter().map(|&(x, y)| KeyOrigin {
                frame_index: entry.frame_index,
                level_index: l,
                x,
                y,
            }));
        }
    }
    if prov.iter().all(Vec::is_empty) {
        return None;
    }
    Some(LevelKeys {
        levels: rows
            .into_iter()
            .zip(prov)
            .map(|(data, provenance)| KeySet {
                features: Tensor::new(vec![provenance.len(), c], data).expect("sized by construction"),
                provenance,
            })
            .collect(),
    })
}

/// Every cell of every reference frame, ignoring boxes.
pub fn all_keys(bank: &ReferenceBank) -> Option<LevelKeys> {
    let first = bank.entries.first()?;
    let geometry = first.pyramid.geometry();
    let masks = ForegroundMaskSet::all_ones(&geometry, 0, 0);
    let c = first.pyramid.channels();
    let levels = (0..geometry.len())
        .map(|l| {
            let cells = mask_cells(&masks.masks[l]);
            let mut data = Vec::new();
            let mut provenance = Vec::new();
            for e in &bank.entries {
                data.extend_from_slice(gather(&e.pyramid.levels[l].features, &cells).data());
                provenance.extend(cells.iter().map(|&(x, y)| KeyOrigin {
                    frame_index: e.frame_index,
                    level_index: l,
                    x,
                    y,
                }));
            }
            KeySet {
                features: Tensor::new(vec![provenance.len(), c], data).expect("sized by construction"),
                provenance,
            }
        })
        .collect();
    Some(LevelKeys { levels })
}

/// Replaces mask-1 cells with their attention output against same-level
/// keys and leaves every other cell untouched. Returns the MACs spent;
/// nothing is touched when the masks or keys signal a skip.
pub fn aggregate_with_keys(
    pyramid: &mut FeaturePyramid,
    masks: &ForegroundMaskSet,
    keys: Option<&LevelKeys>,
    params: &AttentionParams,
) -> Result<OpCount> {
    check_geometry(pyramid, masks)?;
    let Some(keys) = keys else {
        return Ok(OpCount::default());
    };
    if masks.skipped {
        return Ok(OpCount::default());
    }
    let c = pyramid.channels();
    let mut count = OpCount::default();
    for l in 0..pyramid.levels.len() {
        let queries = select_level_queries(pyramid, masks, l);
        let level_keys = &keys.levels[l];
        if queries.is_empty() || level_keys.is_empty() {
            continue;
        }
        let Some(enhanced) = attention::aggregate(&queries, level_keys, params)? else {
            continue;
        };
        count = count + attention::attention_op_count(queries.len(), level_keys.len(), c);
        let features = &mut pyramid.levels[l].features;
        let (_, h, w) = features.dims3()?;
        let plane = h * w;
        let dst = features.data_mut();
        for (i, q) in queries.coords.iter().enumerate() {
            let p = q.y * w + q.x;
            for (ch, &v) in enhanced.row(i).iter().enumerate() {
                dst[ch * plane + p] = v;
            }
        }
    }
    Ok(count)
}

/// Partial aggregation of `pyramid` using keys from `bank`, with the same
/// adjustment ratio the masks were built with.
pub fn partial_aggregate(
    pyramid: &mut FeaturePyramid,
    masks: &ForegroundMaskSet,
    bank: &ReferenceBank,
    params: &AttentionParams,
    levels: Option<&[usize]>,
) -> Result<OpCount> {
    if masks.skipped {
        check_geometry(pyramid, masks)?;
        return Ok(OpCount::default());
    }
    let keys = build_keys(bank, masks.ratio, masks.image_width, masks.image_height, levels);
    aggregate_with_keys(pyramid, masks, keys.as_ref(), params)
}

/// The whole-frame adaptation: every cell is a query and every reference
/// cell is a key.
pub fn full_aggregate(pyramid: &mut FeaturePyramid, bank: &ReferenceBank, params: &AttentionParams) -> Result<OpCount> {
    let geometry = pyramid.geometry();
    let masks = ForegroundMaskSet::all_ones(&geometry, 0, 0);
    let keys = all_keys(bank);
    aggregate_with_keys(pyramid, &masks, keys.as_ref(), params)
}

/// What the LPN hook aggregates against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    /// Mask-guided partial aggregation.
    Partial,
    /// All cells against all reference cells.
    Full,
}

/// Aggregation hook for one frame.
pub struct LpnHook<'a> {
    pub mode: AggregationMode,
    pub prior: &'a ValidatedBoxes,
    pub bank: &'a ReferenceBank,
    pub params: &'a AttentionParams,
    pub ratio: f32,
    pub image_width: usize,
    pub image_height: usize,
    /// Masks built for the last frame, kept for export.
    pub last_masks: Option<ForegroundMaskSet>,
    pub last_count: OpCount,
}

impl<'a> LpnHook<'a> {
    pub fn new(
        mode: AggregationMode,
        prior: &'a ValidatedBoxes,
        bank: &'a ReferenceBank,
        params: &'a AttentionParams,
        ratio: f32,
        image_width: usize,
        image_height: usize,
    ) -> Self {
        Self {
            mode,
            prior,
            bank,
            params,
            ratio,
            image_width,
            image_height,
            last_masks: None,
            last_count: OpCount::default(),
        }
    }
}

impl AggregationHook for LpnHook<'_> {
    fn apply(&mut self, pyramid: &mut FeaturePyramid, active_levels: &[usize]) -> Result<u64> {
        let geometry = pyramid.geometry();
        let count = match self.mode {
            AggregationMode::Full => {
                // Naive adaptation ignores priors but still respects skipped levels.
                let mut masks = ForegroundMaskSet::all_ones(&geometry, self.image_width, self.image_height);
                for (l, m) in masks.masks.iter_mut().enumerate() {
                    if !active_levels.contains(&l) {
                        m.data_mut().fill(0.0);
                    }
                }
                let keys = all_keys(self.bank);
                let c = aggregate_with_keys(pyramid, &masks, keys.as_ref(), self.params)?;
                self.last_masks = Some(masks);
                c
            }
            AggregationMode::Partial => {
                let masks = build_masks(
                    self.prior,
                    &geometry,
                    self.ratio,
                    self.image_width,
                    self.image_height,
                    Some(active_levels),
                );
                let c = partial_aggregate(pyramid, &masks, self.bank, self.params, Some(active_levels))?;
                self.last_masks = Some(masks);
                c
            }
        };
        self.last_count = count;
        Ok(count.total())
    }
}
