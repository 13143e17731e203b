use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Sparse non-negative term-weight vector with a cached Euclidean norm.
///
/// Zero (and non-finite or negative) weights are never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, T>", into = "BTreeMap<String, T>")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct SparseVector<T: Scalar> {
    weights: BTreeMap<String, T>,
    norm: T,
}

impl<T: Scalar> Default for SparseVector<T> {
    fn default() -> Self {
        SparseVector {
            weights: BTreeMap::new(),
            norm: T::zero(),
        }
    }
}

impl<T: Scalar> From<BTreeMap<String, T>> for SparseVector<T> {
    fn from(map: BTreeMap<String, T>) -> Self {
        SparseVector::from_weights(map)
    }
}

impl<T: Scalar> From<SparseVector<T>> for BTreeMap<String, T> {
    fn from(v: SparseVector<T>) -> Self {
        v.weights
    }
}

fn keep<T: Scalar>(w: T) -> bool {
    w.is_finite() && w > T::zero()
}

impl<T: Scalar> SparseVector<T> {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds a vector, summing repeated terms.
    pub fn from_weights<I, S>(weights: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
    {
        let mut map: BTreeMap<String, T> = BTreeMap::new();
        for (term, w) in weights {
            *map.entry(term.into()).or_insert_with(T::zero) += w;
        }
        map.retain(|_, w| keep(*w));
        let norm = norm_of(&map);
        SparseVector { weights: map, norm }
    }

    /// Every term weighted 1.
    pub fn indicator<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for t in terms {
            map.insert(t.into(), T::one());
        }
        let norm = norm_of(&map);
        SparseVector { weights: map, norm }
    }

    pub fn get(&self, term: &str) -> T {
        self.weights.get(term).copied().unwrap_or_else(T::zero)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.weights.contains_key(term)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm(&self) -> T {
        self.norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, T)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    pub fn dot(&self, other: &SparseVector<T>) -> T {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .weights
            .iter()
            .filter_map(|(k, w)| large.weights.get(k).map(|v| *w * *v))
            .sum()
    }

    /// Cosine similarity in `[0, 1]`; zero when either vector is zero.
    pub fn cosine(&self, other: &SparseVector<T>) -> T {
        if self.norm == T::zero() || other.norm == T::zero() {
            return T::zero();
        }
        let c = self.dot(other) / (self.norm * other.norm);
        c.max(T::zero()).min(T::one())
    }

    pub fn scaled(&self, k: T) -> SparseVector<T> {
        SparseVector::from_weights(self.weights.iter().map(|(t, w)| (t.clone(), *w * k)))
    }

    /// Unit-norm copy; the zero vector stays zero.
    pub fn normalized(&self) -> SparseVector<T> {
        if self.norm == T::zero() {
            return self.clone();
        }
        self.scaled(T::one() / self.norm)
    }

    /// Weighted mean of `(vector, weight)` pairs. Zero when the weights sum to zero.
    pub fn weighted_mean<'a, I>(items: I) -> SparseVector<T>
    where
        I: IntoIterator<Item = (&'a SparseVector<T>, T)>,
        T: 'a,
    {
        let mut acc: BTreeMap<String, T> = BTreeMap::new();
        let mut total = T::zero();
        for (v, w) in items {
            total += w;
            for (t, x) in &v.weights {
                *acc.entry(t.clone()).or_insert_with(T::zero) += *x * w;
            }
        }
        if total <= T::zero() {
            return SparseVector::zero();
        }
        SparseVector::from_weights(acc.into_iter().map(|(t, x)| (t, x / total)))
    }

    /// Highest-weighted `k` terms, ties broken by term.
    pub fn top_terms(&self, k: usize) -> Vec<(String, T)> {
        let mut all: Vec<(String, T)> = self.weights.iter().map(|(t, w)| (t.clone(), *w)).collect();
        all.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        all.truncate(k);
        all
    }
}

fn norm_of<T: Scalar>(map: &BTreeMap<String, T>) -> T {
    map.values().map(|w| *w * *w).sum::<T>().sqrt()
}

/// Cosine similarity of two term vectors.
pub fn cosine<T: Scalar>(a: &SparseVector<T>, b: &SparseVector<T>) -> T {
    a.cosine(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type V = SparseVector<f64>;

    #[test]
    fn identical_and_disjoint() {
        let a = V::from_weights([("fire", 2.0), ("nyc", 1.0)]);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
        let b = V::from_weights([("rain", 1.0)]);
        assert_eq!(a.cosine(&b), 0.0);
    }

    #[test]
    fn half_overlap() {
        let a = V::from_weights([("fire", 1.0), ("nyc", 1.0)]);
        let b = V::from_weights([("fire", 1.0)]);
        assert!((a.cosine(&b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_vector() {
        let z = V::zero();
        let a = V::indicator(["x"]);
        assert_eq!(z.cosine(&a), 0.0);
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn drops_zero_weights() {
        let a = V::from_weights([("a", 0.0), ("b", 1.0), ("c", -1.0)]);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn works_in_f32() {
        let a = SparseVector::<f32>::from_weights([("fire", 1.0f32), ("nyc", 1.0)]);
        let b = SparseVector::<f32>::indicator(["fire"]);
        assert!((a.cosine(&b) - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn serde_round_trip_restores_norm() {
        let a = V::from_weights([("fire", 3.0), ("nyc", 4.0)]);
        let s = serde_json::to_string(&a).unwrap();
        let b: V = serde_json::from_str(&s).unwrap();
        assert_eq!(b.norm(), 5.0);
        assert_eq!(a, b);
    }

    fn arb_vec() -> impl Strategy<Value = V> {
        prop::collection::btree_map("[a-e]", 0.01f64..10.0, 0..5).prop_map(V::from)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in arb_vec(), b in arb_vec()) {
            let ab = a.cosine(&b);
            prop_assert!((ab - b.cosine(&a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert!((a.cosine(&a) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_scale_invariant(a in arb_vec(), b in arb_vec(), k in 0.01f64..100.0) {
            prop_assert!((a.scaled(k).cosine(&b) - a.cosine(&b)).abs() < 1e-9);
        }

        #[test]
        fn norm_is_cached_correctly(a in arb_vec()) {
            let direct: f64 = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            prop_assert!((a.norm() - direct).abs() < 1e-9);
        }
    }
}
