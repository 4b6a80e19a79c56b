//! Box-plot statistics and smoothing.

use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile (type 7) of ascending `sorted` data.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme data within 1.5 IQR of the quartiles, never inside the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl BoxStats {
    /// `None` for empty input or any non-finite value.
    pub fn from_samples(samples: &[f64]) -> Option<BoxStats> {
        if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&s, 0.25)?, quantile(&s, 0.5)?, quantile(&s, 0.75)?);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(s[0]).min(q1);
        let whisker_high = s.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(s[s.len() - 1]).max(q3);
        Some(BoxStats {
            count: s.len(),
            median,
            q1,
            q3,
            whisker_low,
            whisker_high,
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

/// Trailing moving average; the first `window - 1` entries average the
/// available prefix.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_samples() {
        let b = BoxStats::from_samples(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 5.0));
        assert_eq!(b.mean, 3.0);
    }

    #[test]
    fn outlier_excluded_from_whisker() {
        let b = BoxStats::from_samples(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.whisker_high, 4.0);
        assert_eq!(b.max, 100.0);
    }

    #[test]
    fn interpolates_between_order_statistics() {
        assert_eq!(quantile(&[0.0, 10.0], 0.25), Some(2.5));
        assert_eq!(quantile(&[7.0], 0.9), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
        assert!(BoxStats::from_samples(&[1.0, f64::NAN]).is_none());
    }

    #[test]
    fn moving_average_prefix() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 10), vec![1.0, 1.5, 2.0]);
        assert!(moving_average(&[], 3).is_empty());
    }
}
