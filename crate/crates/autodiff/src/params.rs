//! Named parameter collections addressable as one flat vector.

use std::collections::HashSet;

use crate::error::DiffError;
use crate::tensor::Tensor;

/// An ordered list of uniquely named tensors.
///
/// The flat view concatenates every tensor's data in insertion order, so
/// `unflatten(flatten())` reproduces the original exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, DiffError> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(DiffError::DuplicateName(name.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters across all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this one's names and shapes from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self, DiffError> {
        if flat.len() != self.total_len() {
            return Err(DiffError::Shape {
                op: "unflatten",
                detail: format!("expected {} values, got {}", self.total_len(), flat.len()),
            });
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let chunk = flat[offset..offset + n].to_vec();
                offset += n;
                (name.clone(), Tensor::from_parts(t.shape().to_vec(), chunk))
            })
            .collect();
        Ok(Self { entries })
    }

    /// Same names and shapes, every value replaced by the given tensors.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self, DiffError> {
        if tensors.len() != self.entries.len() {
            return Err(DiffError::Shape {
                op: "with_tensors",
                detail: format!("expected {} tensors, got {}", self.entries.len(), tensors.len()),
            });
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((name, old), new) in self.entries.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(DiffError::Shape {
                    op: "with_tensors",
                    detail: format!("`{name}`: {:?} vs {:?}", old.shape(), new.shape()),
                });
            }
            entries.push((name.clone(), new));
        }
        Ok(Self { entries })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// `self + scale * other`, elementwise. Both must share a layout.
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> Result<Self, DiffError> {
        self.check_layout(other, "add_scaled")?;
        Ok(Self {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|((n, a), (_, b))| (n.clone(), a.zip_map(b, |x, y| x + scale * y)))
                .collect(),
        })
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * scale)))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Largest absolute difference over all scalars.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64, DiffError> {
        self.check_layout(other, "max_abs_diff")?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .filter_map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    fn check_layout(&self, other: &ParamVector, op: &'static str) -> Result<(), DiffError> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(DiffError::Shape {
                op,
                detail: "parameter layouts differ".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        ParamVector::new(vec![
            ("w".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b".into(), Tensor::vector(vec![-0.5])),
        ])
        .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = ParamVector::new(vec![
            ("a".into(), Tensor::scalar(1.0)),
            ("a".into(), Tensor::scalar(2.0)),
        ])
        .unwrap_err();
        assert_eq!(err, DiffError::DuplicateName("a".into()));
    }

    #[test]
    fn flatten_roundtrip() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, -0.5]);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn add_scaled_checks_layout() {
        let p = sample();
        let q = p.add_scaled(&p, -1.0).unwrap();
        assert_eq!(q.norm(), 0.0);
        let other = ParamVector::new(vec![("w".into(), Tensor::scalar(0.0))]).unwrap();
        assert!(p.add_scaled(&other, 1.0).is_err());
    }
}
