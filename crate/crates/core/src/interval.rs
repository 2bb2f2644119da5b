//! Interval arithmetic on the normalized timeline `[0, 1]`.
//!
//! Intervals are closed, continuous and carry no frame-rate semantics: a
//! duration is simply `end - start`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A closed interval `[start, end]` with `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    start: f64,
    end: f64,
}

impl TimeInterval {
    /// Validating constructor. Inverted or out-of-range endpoints are rejected;
    /// use [`clamp_interval`] to normalize raw model output instead.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite interval endpoints ({start}, {end})"
            )));
        }
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
            return Err(Error::invalid(format!(
                "interval ({start}, {end}) leaves [0, 1]"
            )));
        }
        if start > end {
            return Err(Error::invalid(format!(
                "inverted interval ({start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    /// The whole timeline.
    pub const FULL: TimeInterval = TimeInterval {
        start: 0.0,
        end: 1.0,
    };

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// True when `other` lies inside `self`.
    pub fn contains(&self, other: &TimeInterval) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl Serialize for TimeInterval {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TimeInterval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [s, e] = <[f64; 2]>::deserialize(deserializer)?;
        TimeInterval::new(s, e).map_err(serde::de::Error::custom)
    }
}

/// Temporal intersection over union.
///
/// Two identical zero-length intervals score 1; any other pair with a
/// zero-length hull scores 0.
pub fn tiou(pred: &TimeInterval, gt: &TimeInterval) -> f64 {
    let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
    let hull = pred.end.max(gt.end) - pred.start.min(gt.start);
    if hull <= 0.0 {
        return if pred == gt { 1.0 } else { 0.0 };
    }
    (inter / hull).clamp(0.0, 1.0)
}

/// Widens both boundaries by `alpha` times the duration, clamped to `[0, 1]`.
pub fn relax(gt: &TimeInterval, alpha: f64) -> Result<TimeInterval> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!(
            "relaxation fraction must be >= 0, got {alpha}"
        )));
    }
    let margin = alpha * gt.duration();
    Ok(TimeInterval {
        start: (gt.start - margin).max(0.0),
        end: (gt.end + margin).min(1.0),
    })
}

/// Result of [`clamp_interval`]; `swapped` marks inverted raw output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedInterval {
    pub interval: TimeInterval,
    pub swapped: bool,
}

/// Clamps raw endpoints into `[0, 1]` and swaps them if they end up inverted.
pub fn clamp_interval(raw_start: f64, raw_end: f64) -> Result<ClampedInterval> {
    if !raw_start.is_finite() || !raw_end.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite raw endpoints ({raw_start}, {raw_end})"
        )));
    }
    let s = raw_start.clamp(0.0, 1.0);
    let e = raw_end.clamp(0.0, 1.0);
    let swapped = e < s;
    let (start, end) = if swapped { (e, s) } else { (s, e) };
    Ok(ClampedInterval {
        interval: TimeInterval { start, end },
        swapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::new(s, e).unwrap()
    }

    #[test]
    fn tiou_examples() {
        assert!((tiou(&iv(0.2, 0.6), &iv(0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou(&iv(0.1, 0.9), &iv(0.1, 0.9)), 1.0);
        assert_eq!(tiou(&iv(0.0, 0.1), &iv(0.5, 0.6)), 0.0);
    }

    #[test]
    fn tiou_degenerate_points() {
        assert_eq!(tiou(&iv(0.3, 0.3), &iv(0.3, 0.3)), 1.0);
        assert_eq!(tiou(&iv(0.3, 0.3), &iv(0.5, 0.5)), 0.0);
        assert_eq!(tiou(&iv(0.3, 0.3), &iv(0.2, 0.5)), 0.0);
    }

    #[test]
    fn relax_examples() {
        let r = relax(&iv(0.3, 0.5), 0.1).unwrap();
        assert!((r.start() - 0.28).abs() < 1e-12);
        assert!((r.end() - 0.52).abs() < 1e-12);
        assert_eq!(relax(&iv(0.0, 1.0), 0.1).unwrap(), iv(0.0, 1.0));
        assert_eq!(relax(&iv(0.5, 0.5), 0.1).unwrap(), iv(0.5, 0.5));
        assert!(relax(&iv(0.3, 0.5), -0.1).is_err());
    }

    #[test]
    fn clamp_examples() {
        let c = clamp_interval(-0.1, 0.5).unwrap();
        assert_eq!((c.interval, c.swapped), (iv(0.0, 0.5), false));
        let c = clamp_interval(0.7, 0.4).unwrap();
        assert_eq!((c.interval, c.swapped), (iv(0.4, 0.7), true));
        let c = clamp_interval(0.2, 1.3).unwrap();
        assert_eq!((c.interval, c.swapped), (iv(0.2, 1.0), false));
        assert!(clamp_interval(f64::NAN, 0.5).is_err());
        assert!(clamp_interval(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(TimeInterval::new(0.6, 0.4).is_err());
        assert!(TimeInterval::new(-0.1, 0.4).is_err());
        assert!(TimeInterval::new(0.1, 1.1).is_err());
    }

    fn interval() -> impl Strategy<Value = TimeInterval> {
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| iv(a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn tiou_symmetric_and_bounded(a in interval(), b in interval()) {
            let x = tiou(&a, &b);
            prop_assert_eq!(x, tiou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn relaxation_beats_any_larger_superset(a in interval(), alpha in 0.0f64..1.0,
                                                 grow_l in 0.001f64..0.5, grow_r in 0.001f64..0.5) {
            let r = relax(&a, alpha).unwrap();
            let bigger = iv((r.start() - grow_l).max(0.0), (r.end() + grow_r).min(1.0));
            prop_assume!(bigger != r);
            prop_assert!(tiou(&a, &r) >= tiou(&a, &bigger));
        }

        #[test]
        fn relax_twice_contains_once(a in interval(), alpha in 0.0f64..1.0) {
            let once = relax(&a, alpha).unwrap();
            let twice = relax(&once, alpha).unwrap();
            prop_assert!(twice.contains(&once));
            prop_assert!(once.contains(&a));
        }

        #[test]
        fn clamp_always_valid(s in -2.0f64..2.0, e in -2.0f64..2.0) {
            let c = clamp_interval(s, e).unwrap();
            prop_assert!(TimeInterval::new(c.interval.start(), c.interval.end()).is_ok());
        }
    }
}
