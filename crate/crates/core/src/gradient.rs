//! Flat gradient vectors with a named segmentation map.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layout, SegmentKind};
use crate::util::{dot, norm};

/// A named slice of a [`GradientVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradSegment {
    pub name: String,
    pub kind: SegmentKind,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
    segments: Vec<GradSegment>,
    norm: f64,
}

impl GradientVector {
    /// Builds a vector from values and a segmentation that must tile it exactly.
    pub fn new(values: Vec<f64>, segments: Vec<GradSegment>) -> Result<Self> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.range.start != cursor || seg.range.end < seg.range.start {
                return Err(Error::Domain(format!(
                    "segment `{}` does not start at offset {cursor}",
                    seg.name
                )));
            }
            cursor = seg.range.end;
        }
        if cursor != values.len() {
            return Err(Error::Domain(format!(
                "segments cover {cursor} entries but the vector has {}",
                values.len()
            )));
        }
        let norm = norm(&values);
        Ok(Self { values, segments, norm })
    }

    /// A single-segment vector, for synthetic experiments.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        let seg = GradSegment {
            name: "all".into(),
            kind: SegmentKind::Base,
            range: 0..n,
        };
        Self::new(values, vec![seg]).expect("one segment always tiles")
    }

    /// Collects the trainable segments of a full-length parameter-shaped buffer.
    pub fn gather(layout: &Layout, full: &[f64]) -> Self {
        let mut values = Vec::with_capacity(layout.trainable_len());
        let mut segments = Vec::new();
        for seg in layout.trainable() {
            let start = values.len();
            values.extend_from_slice(&full[seg.range()]);
            segments.push(GradSegment {
                name: seg.name.clone(),
                kind: seg.kind,
                range: start..values.len(),
            });
        }
        let norm = norm(&values);
        Self { values, segments, norm }
    }

    pub fn zeros_for(layout: &Layout) -> Self {
        Self::gather(layout, &vec![0.0; layout.total_len()])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segments(&self) -> &[GradSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Cached L2 norm.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range.clone()])
    }

    pub fn same_segmentation(&self, other: &Self) -> bool {
        self.segments == other.segments
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.same_segmentation(other) {
            Ok(())
        } else {
            Err(Error::Domain("gradient segmentation maps differ".into()))
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(dot(&self.values, &other.values))
    }

    /// Keeps only the segments accepted by `keep`, re-packed contiguously.
    pub fn restrict(&self, keep: impl Fn(&GradSegment) -> bool) -> Self {
        let mut values = Vec::new();
        let mut segments = Vec::new();
        for seg in self.segments.iter().filter(|s| keep(s)) {
            let start = values.len();
            values.extend_from_slice(&self.values[seg.range.clone()]);
            segments.push(GradSegment {
                name: seg.name.clone(),
                kind: seg.kind,
                range: start..values.len(),
            });
        }
        let norm = norm(&values);
        Self { values, segments, norm }
    }

    /// The shared-parameter view: adapter factors only, heads excluded.
    pub fn shared(&self) -> Self {
        self.restrict(|s| s.kind.is_adapter())
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
        self.norm *= k.abs();
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.scale(k);
        out
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Self, k: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
        self.norm = norm(&self.values);
        Ok(())
    }

    /// Applies `f` to every value and refreshes the norm cache.
    pub fn map_in_place(&mut self, f: impl Fn(usize, f64) -> f64) {
        for (i, v) in self.values.iter_mut().enumerate() {
            *v = f(i, *v);
        }
        self.norm = norm(&self.values);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
