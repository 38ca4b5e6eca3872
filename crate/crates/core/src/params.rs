//! Flat parameter vectors partitioned into layer spans.
//!
//! Every model in the simulator (global model, local models, projected
//! targets, trajectory endpoints) is a [`ParamVector`]: one contiguous
//! `Vec<f64>` plus a [`LayerMap`] describing which slice belongs to which
//! layer. Per-layer quantities are slices of the vector, never structural
//! traversals.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered spans that tile `0..total` without gaps or overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpan>", into = "Vec<LayerSpan>")]
pub struct LayerMap {
    spans: Arc<[LayerSpan]>,
}

impl LayerMap {
    pub fn new(spans: Vec<LayerSpan>) -> Result<Self> {
        let mut next = 0;
        for (i, s) in spans.iter().enumerate() {
            if s.offset != next {
                return Err(FedError::InvalidLayerMap(format!(
                    "span {i} starts at {} but previous span ends at {next}",
                    s.offset
                )));
            }
            if s.len == 0 {
                return Err(FedError::InvalidLayerMap(format!("span {i} is empty")));
            }
            next += s.len;
        }
        Ok(LayerMap {
            spans: spans.into(),
        })
    }

    /// A single span covering `len` values.
    pub fn single(len: usize) -> Self {
        LayerMap {
            spans: vec![LayerSpan {
                layer: 0,
                offset: 0,
                len,
            }]
            .into(),
        }
    }

    /// Builds contiguous spans from a list of lengths, numbering layers in order.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut offset = 0;
        let spans = lengths
            .iter()
            .enumerate()
            .map(|(layer, &len)| {
                let s = LayerSpan { layer, offset, len };
                offset += len;
                s
            })
            .collect();
        Self::new(spans)
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn num_layers(&self) -> usize {
        self.spans.len()
    }

    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.offset + s.len)
    }
}

impl TryFrom<Vec<LayerSpan>> for LayerMap {
    type Error = FedError;

    fn try_from(spans: Vec<LayerSpan>) -> Result<Self> {
        LayerMap::new(spans)
    }
}

impl From<LayerMap> for Vec<LayerSpan> {
    fn from(map: LayerMap) -> Self {
        map.spans.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layers: LayerMap,
}

impl ParamVector {
    /// Validates that the layer map covers `values` exactly and that every
    /// value is finite.
    pub fn new(values: Vec<f64>, layers: LayerMap) -> Result<Self> {
        if layers.total_len() != values.len() {
            return Err(FedError::DimensionMismatch {
                what: "parameter vector vs layer map",
                expected: layers.total_len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("parameter vector"));
        }
        Ok(ParamVector { values, layers })
    }

    /// Single-layer vector, mostly for tests and toy models.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let layers = LayerMap::single(values.len());
        Self::new(values, layers)
    }

    /// Skips validation; callers guarantee the length matches the map.
    pub(crate) fn from_parts_unchecked(values: Vec<f64>, layers: LayerMap) -> Self {
        debug_assert_eq!(values.len(), layers.total_len());
        ParamVector { values, layers }
    }

    pub fn zeros(layers: LayerMap) -> Self {
        ParamVector {
            values: vec![0.0; layers.total_len()],
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer_map(&self) -> &LayerMap {
        &self.layers
    }

    pub fn layer(&self, j: usize) -> &[f64] {
        &self.values[self.layers.spans()[j].range()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layers != other.layers {
            return Err(FedError::LayerMapMismatch);
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self - other`, keeping `self`'s layer map.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Self::from_parts_unchecked(values, self.layers.clone())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// Squared distance restricted to layer `j`.
    pub fn layer_dist_sq(&self, other: &ParamVector, j: usize) -> f64 {
        let r = self.layers.spans()[j].range();
        self.values[r.clone()]
            .iter()
            .zip(&other.values[r])
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_map_rejects_gaps_and_empty_spans() {
        let gap = vec![
            LayerSpan { layer: 0, offset: 0, len: 2 },
            LayerSpan { layer: 1, offset: 3, len: 1 },
        ];
        assert!(LayerMap::new(gap).is_err());
        let empty = vec![LayerSpan { layer: 0, offset: 0, len: 0 }];
        assert!(LayerMap::new(empty).is_err());
        let ok = LayerMap::from_lengths(&[2, 3]).unwrap();
        assert_eq!(ok.total_len(), 5);
        assert_eq!(ok.spans()[1].range(), 2..5);
    }

    #[test]
    fn param_vector_validates_length_and_finiteness() {
        let map = LayerMap::from_lengths(&[2, 1]).unwrap();
        assert!(ParamVector::new(vec![1.0, 2.0], map.clone()).is_err());
        assert!(ParamVector::new(vec![1.0, f64::NAN, 0.0], map.clone()).is_err());
        let p = ParamVector::new(vec![1.0, 2.0, 3.0], map).unwrap();
        assert_eq!(p.layer(1), &[3.0]);
    }

    #[test]
    fn layer_map_serde_round_trip_validates() {
        let map = LayerMap::from_lengths(&[4, 2]).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        let back: LayerMap = serde_json::from_str(&json).unwrap();
        assert_eq!(map, back);
        let bad = r#"[{"layer":0,"offset":1,"len":2}]"#;
        assert!(serde_json::from_str::<LayerMap>(bad).is_err());
    }
}
