//! Size prior: run only the pyramid levels that produced confident boxes at
//! the last full frame, for the next `interval` frames.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bbox::Detection;
use crate::lpn::VALIDATION_SCORE;

/// Partial frames between full detections unless configured otherwise.
pub const DEFAULT_INTERVAL: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipSchedule {
    interval: usize,
    num_levels: usize,
    active_levels: BTreeSet<usize>,
    frames_since_full: usize,
    fallback_all: bool,
    primed: bool,
}

/// What the next frame should run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub full: bool,
    pub levels: Vec<usize>,
}

/// One line of the schedule audit trail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub frame_index: usize,
    pub full: bool,
    pub levels: Vec<usize>,
    pub fallback_all: bool,
}

impl SkipSchedule {
    pub fn new(interval: usize, num_levels: usize) -> Self {
        assert!(num_levels > 0, "schedule needs at least one level");
        Self {
            interval,
            num_levels,
            active_levels: BTreeSet::new(),
            frames_since_full: 0,
            fallback_all: true,
            primed: false,
        }
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn active_levels(&self) -> &BTreeSet<usize> {
        &self.active_levels
    }

    pub fn frames_since_full(&self) -> usize {
        self.frames_since_full
    }

    pub fn fallback_all(&self) -> bool {
        self.fallback_all
    }

    fn all_levels(&self) -> Vec<usize> {
        (0..self.num_levels).collect()
    }

    pub fn next_is_full(&self) -> bool {
        !self.primed || self.frames_since_full == self.interval
    }

    pub fn plan_frame(&self) -> FramePlan {
        let full = self.next_is_full();
        let levels = if full || self.fallback_all {
            self.all_levels()
        } else {
            self.active_levels.iter().copied().collect()
        };
        FramePlan { full, levels }
    }

    /// Records the frame just processed. On a full frame the active set
    /// becomes the levels of `detections` scoring above the validation
    /// threshold; partial frames leave it alone.
    pub fn update(&mut self, detections: &[Detection], was_full: bool) {
        if was_full {
            self.active_levels = detections
                .iter()
                .filter(|d| d.score > VALIDATION_SCORE)
                .map(|d| d.level_index)
                .filter(|&l| l < self.num_levels)
                .collect();
            self.fallback_all = self.active_levels.is_empty();
            self.frames_since_full = 0;
            self.primed = true;
        } else {
            self.frames_since_full = (self.frames_since_full + 1).min(self.interval);
        }
    }

    pub fn record(&self, frame_index: usize, plan: &FramePlan) -> ScheduleRecord {
        ScheduleRecord {
            frame_index,
            full: plan.full,
            levels: plan.levels.clone(),
            fallback_all: self.fallback_all && !plan.full,
        }
    }
}
