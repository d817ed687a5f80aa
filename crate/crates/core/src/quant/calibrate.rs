use std::collections::BTreeMap;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Site};
use crate::tensor::Tensor;

/// Observed activation range at one site; always contains 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibRange {
    pub min_seen: f32,
    pub max_seen: f32,
}

impl Default for CalibRange {
    fn default() -> Self {
        CalibRange { min_seen: 0.0, max_seen: 0.0 }
    }
}

impl CalibRange {
    pub fn widen(&mut self, t: &Tensor<f32>) {
        let (lo, hi) = t.min_max();
        self.min_seen = self.min_seen.min(lo);
        self.max_seen = self.max_seen.max(hi);
    }

    pub fn contains(&self, other: &CalibRange) -> bool {
        self.min_seen <= other.min_seen && other.max_seen <= self.max_seen
    }
}

/// Per-site ranges, keyed in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibRanges {
    pub ranges: BTreeMap<Site, CalibRange>,
}

impl CalibRanges {
    pub fn observe(&mut self, site: Site, t: &Tensor<f32>) {
        self.ranges.entry(site).or_default().widen(t);
    }

    pub fn get(&self, site: Site) -> Option<&CalibRange> {
        self.ranges.get(&site)
    }
}

/// Runs the float model over every sample image and records min/max per site.
pub fn calibrate(model: &ModelGraph, samples: &[Sample]) -> Result<CalibRanges> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    calibrate_images(model, &images)
}

pub fn calibrate_images(model: &ModelGraph, images: &[&Tensor<f32>]) -> Result<CalibRanges> {
    if images.is_empty() {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    if !model.is_folded() {
        return Err(Error::invalid("calibration expects a batchnorm-folded model"));
    }
    let mut ranges = CalibRanges::default();
    for img in images {
        model.forward_observed(img, &mut |site, t| ranges.observe(site, t))?;
    }
    Ok(ranges)
}
