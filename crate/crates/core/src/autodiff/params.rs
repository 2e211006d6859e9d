use ndarray::Array2;

use crate::error::{Error, Result};

/// Named parameter arrays with a fixed order.
///
/// The order is the insertion order; it defines the flattened layout used by
/// checkpoints and by finite-difference checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values().map(|v| v.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.values() {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Rebuild a parameter set with this one's names and shapes from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::contract(format!(
                "flat vector has {} entries, layout needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, v) in &self.entries {
            let n = v.len();
            let arr = Array2::from_shape_vec(v.dim(), flat[offset..offset + n].to_vec())
                .expect("layout shape");
            entries.push((name.clone(), arr));
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, v1), (n2, v2))| n1 == n2 && v1.dim() == v2.dim())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::contract("parameter layouts differ"));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.scaled_add(alpha, b);
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Norm-wise relative difference `|a - b| / max(|a|, |b|)`; 0 when both vanish.
pub fn relative_error(a: &ParamSet, b: &ParamSet) -> f64 {
    let fa = a.flatten();
    let fb = b.flatten();
    assert_eq!(fa.len(), fb.len(), "relative_error: layouts differ");
    let diff = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0]]).unwrap();
        assert!(matches!(
            p.insert("w", array![[2.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0, 2.0]]).unwrap();
        assert!(p.unflatten(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(
            shapes in prop::collection::vec((1usize..4, 1usize..4), 1..5),
            seed in any::<u64>(),
        ) {
            let mut p = ParamSet::new();
            let mut k = seed;
            for (i, (r, c)) in shapes.iter().enumerate() {
                let arr = Array2::from_shape_fn((*r, *c), |_| {
                    k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                });
                p.insert(format!("p{i}"), arr).unwrap();
            }
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
