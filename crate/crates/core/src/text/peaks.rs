use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Entries whose mean decays below this are forgotten.
const FORGET_BELOW: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ewm {
    pub mean: f64,
    pub variance: f64,
}

/// Exponentially weighted per-keyword count history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordBaseline {
    entries: BTreeMap<String, Ewm>,
    half_life: f64,
}

impl KeywordBaseline {
    /// `half_life` is measured in windows and must be positive.
    pub fn new(half_life: f64) -> Self {
        assert!(half_life > 0.0, "half_life must be positive");
        KeywordBaseline {
            entries: BTreeMap::new(),
            half_life,
        }
    }

    pub fn with_means<I, S>(half_life: f64, means: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut b = Self::new(half_life);
        for (k, m) in means {
            b.entries.insert(
                k.into(),
                Ewm {
                    mean: m.max(0.0),
                    variance: 0.0,
                },
            );
        }
        b
    }

    /// Weight given to the newest window.
    pub fn alpha(&self) -> f64 {
        1.0 - 0.5f64.powf(1.0 / self.half_life)
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    pub fn mean(&self, keyword: &str) -> f64 {
        self.entries.get(keyword).map_or(0.0, |e| e.mean)
    }

    pub fn get(&self, keyword: &str) -> Option<Ewm> {
        self.entries.get(keyword).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Folds one window of counts in. Keywords absent from the window count as zero.
    pub fn update(&mut self, window_counts: &BTreeMap<String, u64>) {
        let alpha = self.alpha();
        for k in window_counts.keys() {
            self.entries.entry(k.clone()).or_default();
        }
        self.entries.retain(|k, e| {
            let x = window_counts.get(k).copied().unwrap_or(0) as f64;
            let diff = x - e.mean;
            let incr = alpha * diff;
            e.mean += incr;
            e.variance = ((1.0 - alpha) * (e.variance + diff * incr)).max(0.0);
            e.mean >= FORGET_BELOW
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakParams {
    pub min_count: u64,
    pub ratio_threshold: f64,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams {
            min_count: 10,
            ratio_threshold: 3.0,
        }
    }
}

impl PeakParams {
    pub fn is_valid(&self) -> bool {
        self.min_count >= 1 && self.ratio_threshold > 1.0
    }
}

/// Ratio of a window count to its baseline mean, floored at one.
pub fn peak_ratio(count: u64, mean: f64) -> f64 {
    count as f64 / mean.max(1.0)
}

/// Keywords whose window count is both large and well above their history.
///
/// Returned highest score first (ties by keyword). The baseline absorbs the
/// window afterwards.
pub fn detect_peaks(
    window_counts: &BTreeMap<String, u64>,
    baseline: &mut KeywordBaseline,
    params: &PeakParams,
) -> Vec<(String, f64)> {
    let mut peaks: Vec<(String, f64)> = window_counts
        .iter()
        .filter(|(_, &c)| c >= params.min_count)
        .filter_map(|(k, &c)| {
            let ratio = peak_ratio(c, baseline.mean(k));
            (ratio >= params.ratio_threshold).then(|| (k.clone(), ratio))
        })
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    baseline.update(window_counts);
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn broadway_spike() {
        let mut b = KeywordBaseline::with_means(4.0, [("broadway", 5.0)]);
        let params = PeakParams {
            min_count: 10,
            ratio_threshold: 3.0,
        };
        let peaks = detect_peaks(&counts(&[("broadway", 50)]), &mut b, &params);
        assert_eq!(peaks, vec![("broadway".to_string(), 10.0)]);
    }

    #[test]
    fn spike_against_recomputed_history() {
        let history = [4u64, 6, 5, 5, 7, 3];
        let half_life = 3.0;
        let mut b = KeywordBaseline::new(half_life);
        for &h in &history {
            b.update(&counts(&[("broadway", h)]));
        }
        // Closed form of the recursion started from zero.
        let alpha = 1.0 - 0.5f64.powf(1.0 / half_life);
        let n = history.len();
        let oracle: f64 = history
            .iter()
            .enumerate()
            .map(|(i, &x)| alpha * (1.0 - alpha).powi((n - 1 - i) as i32) * x as f64)
            .sum();
        assert!((b.mean("broadway") - oracle).abs() < 1e-12);
        let params = PeakParams::default();
        let peaks = detect_peaks(&counts(&[("broadway", 50)]), &mut b, &params);
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0].1 - 50.0 / oracle.max(1.0)).abs() < 1e-12);
    }

    #[test]
    fn below_min_count_or_stable() {
        let params = PeakParams::default();
        let mut b = KeywordBaseline::new(4.0);
        assert!(detect_peaks(&counts(&[("quiet", 2)]), &mut b, &params).is_empty());
        let mut b = KeywordBaseline::with_means(4.0, [("coffee", 40.0)]);
        assert!(detect_peaks(&counts(&[("coffee", 42)]), &mut b, &params).is_empty());
    }

    #[test]
    fn absent_keywords_decay_and_are_forgotten() {
        let mut b = KeywordBaseline::with_means(1.0, [("old", 1.0)]);
        b.update(&BTreeMap::new());
        assert!((b.mean("old") - 0.5).abs() < 1e-12);
        for _ in 0..20 {
            b.update(&BTreeMap::new());
        }
        assert!(b.is_empty());
    }

    proptest::proptest! {
        #[test]
        fn flagging_is_monotone_in_count(mean in 0.0f64..100.0, c in 1u64..500, extra in 1u64..500) {
            let params = PeakParams { min_count: 5, ratio_threshold: 2.5 };
            let mut b1 = KeywordBaseline::with_means(4.0, [("k", mean)]);
            let mut b2 = b1.clone();
            let lo = detect_peaks(&counts(&[("k", c)]), &mut b1, &params);
            let hi = detect_peaks(&counts(&[("k", c + extra)]), &mut b2, &params);
            if !lo.is_empty() {
                proptest::prop_assert!(!hi.is_empty());
            }
        }
    }
}
