use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment table; offsets partition `0..len` exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    /// Builds a contiguous layout from `(name, shape)` pairs in order.
    pub fn new<S: Into<String>>(parts: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect();
        Self {
            segments,
            len: offset,
        }
    }

    /// Validates an externally supplied segment table (e.g. from a checkpoint).
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut offset = 0;
        for seg in &segments {
            if seg.offset != offset {
                return Err(Error::Layout(format!(
                    "segment `{}` starts at {} but the previous one ends at {}",
                    seg.name, seg.offset, offset
                )));
            }
            offset += seg.len();
        }
        Ok(Self {
            segments,
            len: offset,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_of(&self, index: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&index))
    }
}

/// Flat, ordered view of every trainable parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::Layout(format!(
                "layout covers {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Single unnamed segment; handy for scalar toy objectives.
    pub fn from_slice(name: &str, values: &[f32]) -> Self {
        let layout = Arc::new(Layout::new([(name, vec![values.len()])]));
        Self {
            layout,
            values: values.to_vec(),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f32]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f32] {
        &self.values[seg.range()]
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "{} segments / {} values vs {} segments / {} values",
                self.layout.segments().len(),
                self.len(),
                other.layout.segments().len(),
                other.len()
            )))
        }
    }

    /// Name of the first segment holding a non-finite value.
    pub fn first_non_finite_segment(&self) -> Option<&str> {
        self.layout
            .segments()
            .iter()
            .find(|s| self.values[s.range()].iter().any(|v| !v.is_finite()))
            .map(|s| s.name.as_str())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn rms(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.norm() / (self.values.len() as f64).sqrt()
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| (a * v as f64) as f32).collect(),
        }
    }

    /// `self + a * x`, evaluated per element in f64.
    pub fn add_scaled(&self, a: f64, x: &ParamVector) -> Result<ParamVector> {
        param_axpy(a, x, self)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// `a * x + y` elementwise; `x` and `y` must share a layout.
pub fn param_axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.ensure_same_layout(y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xv, &yv)| (a * xv as f64 + yv as f64) as f32)
        .collect();
    Ok(ParamVector {
        layout: y.layout.clone(),
        values,
    })
}

/// f64 vector over a parameter layout, used by averagers and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamAccumulator {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamAccumulator {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_params(p: &ParamVector) -> Self {
        Self {
            layout: p.layout.clone(),
            values: p.values.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::Layout(format!(
                "layout covers {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn ensure_matches(&self, p: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &p.layout) || *self.layout == *p.layout {
            Ok(())
        } else {
            Err(Error::Layout("accumulator layout differs from live parameters".into()))
        }
    }

    /// Rounds to the 32-bit parameter representation.
    pub fn to_params(&self) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}
