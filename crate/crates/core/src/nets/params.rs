use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Named parameter tensors of one function family, in insertion order.
///
/// The insertion order defines the flattened layout, so two sets built by the
/// same network spec flatten to vectors with matching coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, ArrayD<f64>>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::ParameterMismatch(format!(
                "duplicate tensor name `{name}`"
            )));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ParameterMismatch(format!("missing tensor `{name}`")))
    }

    pub(crate) fn require_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::ParameterMismatch(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self {
            tensors,
            version: 0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in self.tensors.values() {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Overwrites every tensor from a flat vector in layout order.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_elements();
        if values.len() != expected {
            return Err(Error::shape("unflatten", &[expected], &[values.len()]));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            for (dst, src) in t.iter_mut().zip(&values[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// True when both sets hold the same names with the same shapes, in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParameterSet, context: &str) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        let a: Vec<_> = self.names().collect();
        let b: Vec<_> = other.names().collect();
        Err(Error::ParameterMismatch(format!(
            "{context}: layouts differ ({a:?} vs {b:?})"
        )))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (dst, src) in self.tensors.values_mut().zip(other.tensors.values()) {
            dst.scaled_add(scale, src);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Maximum absolute elementwise difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.tensors.values().zip(other.tensors.values()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    /// Copies `other` into `self` with every name prefixed.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone())?;
        }
        Ok(())
    }

    pub(crate) fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(
            "a",
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        p.insert(
            "b",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![5.0, 6.0, 7.0]).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample_set();
        assert!(p.insert("a", ParameterSet::zeros(&[1])).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = ParameterSet::new();
        let bad = ArrayD::from_elem(IxDyn(&[2]), f64::NAN);
        assert!(matches!(p.insert("x", bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn flatten_in_layout_order() {
        assert_eq!(
            sample_set().flatten(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
        );
    }

    #[test]
    fn unflatten_wrong_length() {
        let mut p = sample_set();
        assert!(matches!(p.unflatten(&[1.0; 6]), Err(Error::Shape { .. })));
    }

    #[test]
    fn add_scaled_requires_matching_layout() {
        let mut p = sample_set();
        let mut q = ParameterSet::new();
        q.insert("a", ParameterSet::zeros(&[2, 2])).unwrap();
        assert!(p.add_scaled(&q, 1.0).is_err());
        let other = sample_set();
        p.add_scaled(&other, -1.0).unwrap();
        assert_eq!(p.sum_squares(), 0.0);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(v in proptest::collection::vec(-1e6f64..1e6, 7)) {
            let mut p = sample_set();
            p.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }
    }
}
