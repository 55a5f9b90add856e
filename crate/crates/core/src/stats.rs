//! Small descriptive statistics helpers.

use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile of sorted data (the `numpy.quantile`
/// default). `q` in `[0, 1]`; `sorted` must be non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub mean: f64,
    pub q75: f64,
    pub max: f64,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        v.sort_by(f64::total_cmp);
        Some(LengthStats {
            min: v[0],
            q25: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q75: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quartiles_of_small_sets() {
        let s = LengthStats::from_lengths(&[4, 1, 3, 2]).unwrap();
        assert_eq!((s.min, s.q25, s.median, s.mean, s.q75, s.max), (1.0, 1.75, 2.5, 2.5, 3.25, 4.0));
        let s = LengthStats::from_lengths(&[7]).unwrap();
        assert_eq!((s.min, s.median, s.max), (7.0, 7.0, 7.0));
        assert!(LengthStats::from_lengths(&[]).is_none());
    }

    proptest! {
        #[test]
        fn quantiles_are_ordered(lens in proptest::collection::vec(0usize..100, 1..50)) {
            let s = LengthStats::from_lengths(&lens).unwrap();
            prop_assert!(s.min <= s.q25 && s.q25 <= s.median && s.median <= s.q75 && s.q75 <= s.max);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
        }
    }
}
