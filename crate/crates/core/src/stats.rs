//! Two-state classification of scalar series, dwell times and the
//! exponential (Poisson process) fit.
//!
//! Everything here depends on the series only through order statistics, so
//! results are unchanged under any strictly increasing relabeling of values.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series needs at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("sample interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("degenerate series: lower and upper percentiles coincide at {0}")]
    Degenerate(f64),
    #[error("need at least {need} switches, got {got}")]
    TooFewSwitches { need: usize, got: usize },
    #[error("need at least {need} dwell times, got {got}")]
    TooFewDwells { need: usize, got: usize },
    #[error("percentiles must satisfy 0 < lower < upper < 100")]
    BadPercentiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    interval: f64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, interval: f64) -> Result<Self, StatsError> {
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(StatsError::BadInterval(interval));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(Self { values, interval })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Model time between consecutive samples.
    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, StatsError> {
        Self::new(self.values.iter().map(|&v| f(v)).collect(), self.interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<Label>,
    pub lower: f64,
    pub upper: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Hysteresis labeling at the 40th/60th percentiles.
pub fn classify_states(series: &TimeSeries) -> Result<Classification, StatsError> {
    classify_states_with(series, 40.0, 60.0)
}

/// Values at or above the upper percentile are high, at or below the lower
/// percentile low, and anything between keeps the previous label. Leading
/// points between the thresholds take the first decided label.
pub fn classify_states_with(series: &TimeSeries, lower_pct: f64, upper_pct: f64) -> Result<Classification, StatsError> {
    if !(0.0 < lower_pct && lower_pct < upper_pct && upper_pct < 100.0) {
        return Err(StatsError::BadPercentiles);
    }
    let v = series.values();
    if v.len() < 10 {
        return Err(StatsError::TooShort { need: 10, got: v.len() });
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = nearest_rank(&sorted, lower_pct);
    let upper = nearest_rank(&sorted, upper_pct);
    if lower >= upper {
        return Err(StatsError::Degenerate(lower));
    }
    let decide = |x: f64| {
        if x >= upper {
            Some(Label::High)
        } else if x <= lower {
            Some(Label::Low)
        } else {
            None
        }
    };
    let first = v.iter().find_map(|&x| decide(x)).expect("some value reaches a percentile");
    let mut prev = first;
    let labels = v
        .iter()
        .map(|&x| {
            prev = decide(x).unwrap_or(prev);
            prev
        })
        .collect();
    Ok(Classification { labels, lower, upper })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingStats {
    /// Number of label changes.
    pub switches: usize,
    /// Complete dwell durations in model time; the censored first and last
    /// dwells are excluded, so there are `switches - 1` of them.
    pub dwell_times: Vec<f64>,
    pub mean: f64,
}

pub fn switching_times(labels: &[Label], interval: f64) -> Result<SwitchingStats, StatsError> {
    if !(interval > 0.0) {
        return Err(StatsError::BadInterval(interval));
    }
    let changes: Vec<usize> = (1..labels.len()).filter(|&i| labels[i] != labels[i - 1]).collect();
    if changes.len() < 2 {
        return Err(StatsError::TooFewSwitches {
            need: 2,
            got: changes.len(),
        });
    }
    let dwell_times: Vec<f64> = changes.windows(2).map(|w| (w[1] - w[0]) as f64 * interval).collect();
    let mean = dwell_times.iter().sum::<f64>() / dwell_times.len() as f64;
    Ok(SwitchingStats {
        switches: changes.len(),
        dwell_times,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonFit {
    /// Slope of the fit through the origin.
    pub tau0: f64,
    /// Centered coefficient of determination, clamped at zero.
    pub r_squared: f64,
    /// `(−ln(1 − P_c), τ_(i))` points of the fit, in ascending order.
    pub points: Vec<(f64, f64)>,
}

impl PoissonFit {
    pub fn is_poisson(&self, min_r_squared: f64) -> bool {
        self.r_squared > min_r_squared
    }
}

/// Least-squares fit of sorted dwell times against the exponential
/// quantiles `−ln(1 − i/(n + 1))` through the origin.
pub fn poisson_fit(dwell_times: &[f64]) -> Result<PoissonFit, StatsError> {
    let n = dwell_times.len();
    if n < 20 {
        return Err(StatsError::TooFewDwells { need: 20, got: n });
    }
    let mut y = dwell_times.to_vec();
    y.sort_by(f64::total_cmp);
    let x: Vec<f64> = (1..=n).map(|i| -(1.0 - i as f64 / (n + 1) as f64).ln()).collect();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let tau0 = sxy / sxx;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|b| (b - mean).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - tau0 * a).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).max(0.0) } else { 0.0 };
    Ok(PoissonFit {
        tau0,
        r_squared,
        points: x.into_iter().zip(y).collect(),
    })
}

/// Classification, dwell statistics and fit of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub classification: Classification,
    pub switching: SwitchingStats,
    pub fit: PoissonFit,
}

pub fn summarize(series: &TimeSeries) -> Result<SeriesSummary, StatsError> {
    summarize_with(series, 40.0, 60.0)
}

pub fn summarize_with(series: &TimeSeries, lower_pct: f64, upper_pct: f64) -> Result<SeriesSummary, StatsError> {
    let classification = classify_states_with(series, lower_pct, upper_pct)?;
    let switching = switching_times(&classification.labels, series.interval())?;
    let fit = poisson_fit(&switching.dwell_times)?;
    Ok(SeriesSummary {
        classification,
        switching,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use Label::*;

    fn ts(v: Vec<f64>) -> TimeSeries {
        TimeSeries::new(v, 1.0).unwrap()
    }

    #[test]
    fn square_wave() {
        let v: Vec<f64> = (0..12).map(|i| if i % 4 < 2 { -1.0 } else { 1.0 }).collect();
        let c = classify_states(&ts(v)).unwrap();
        assert_eq!(&c.labels[..4], &[Low, Low, High, High]);
        for (i, l) in c.labels.iter().enumerate() {
            assert_eq!(*l, if i % 4 < 2 { Low } else { High });
        }
    }

    #[test]
    fn dead_band_start_backfills() {
        // Three dead-band points first, then nine high and eight low values;
        // the percentiles are -1 (40th) and 1 (60th).
        let mut v = vec![0.5, 0.4, 0.6];
        v.extend((1..=9).map(f64::from));
        v.extend((1..=8).map(|i| -f64::from(i)));
        let c = classify_states(&ts(v)).unwrap();
        assert_eq!((c.lower, c.upper), (-1.0, 1.0));
        assert_eq!(&c.labels[..4], &[High, High, High, High]);
        assert_eq!(c.labels[12], Low);
    }

    #[test]
    fn ramp_switches_once() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = classify_states(&ts(v)).unwrap();
        assert_eq!((c.lower, c.upper), (40.0, 60.0));
        assert!(c.labels[..59].iter().all(|&l| l == Low));
        assert!(c.labels[59..].iter().all(|&l| l == High));
        let flips = c.labels.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(flips, 1);
    }

    #[test]
    fn degenerate_series_is_rejected() {
        assert!(matches!(classify_states(&ts(vec![1.0; 20])), Err(StatsError::Degenerate(_))));
    }

    #[test]
    fn boundary_dwells_are_censored() {
        let s = switching_times(&[Low, Low, High, High, Low], 1.0).unwrap();
        assert_eq!(s.switches, 2);
        assert_eq!(s.dwell_times, vec![2.0]);
        assert!(switching_times(&[Low, High, High], 1.0).is_err());
    }

    #[test]
    fn exponential_sample_fit() {
        let mut r = RngStream::new(2024, 0);
        let d: Vec<f64> = (0..10_000).map(|_| -100.0 * (1.0 - r.uniform()).ln()).collect();
        let f = poisson_fit(&d).unwrap();
        assert!((f.tau0 - 100.0).abs() < 3.0, "tau0 = {}", f.tau0);
        assert!(f.r_squared > 0.98);
    }

    #[test]
    fn constant_dwells_are_not_poisson() {
        let f = poisson_fit(&[50.0; 40]).unwrap();
        assert_eq!(f.r_squared, 0.0);
        assert!(!f.is_poisson(0.95));
    }

    proptest! {
        #[test]
        fn classification_commutes_with_monotone_maps(
            v in prop::collection::vec(-10.0f64..10.0, 10..200),
            a in 0.1f64..5.0,
        ) {
            let s = ts(v);
            let m = s.map(|x| (a * x).exp() + x * x * x).unwrap();
            match (classify_states(&s), classify_states(&m)) {
                (Ok(c1), Ok(c2)) => prop_assert_eq!(c1.labels, c2.labels),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "only one side failed"),
            }
        }

        #[test]
        fn fit_is_scale_equivariant(d in prop::collection::vec(0.1f64..500.0, 20..100), e in -8i32..8, c in 0.01f64..100.0) {
            let f = poisson_fit(&d).unwrap();
            let pow2 = 2f64.powi(e);
            let g = poisson_fit(&d.iter().map(|x| x * pow2).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(g.tau0, f.tau0 * pow2);
            let h = poisson_fit(&d.iter().map(|x| x * c).collect::<Vec<_>>()).unwrap();
            prop_assert!((h.tau0 - f.tau0 * c).abs() <= 1e-12 * f.tau0 * c);
        }

        #[test]
        fn dwell_count_is_switches_minus_one(bits in prop::collection::vec(any::<bool>(), 3..300)) {
            let labels: Vec<Label> = bits.iter().map(|&b| if b { High } else { Low }).collect();
            if let Ok(s) = switching_times(&labels, 0.2) {
                prop_assert_eq!(s.dwell_times.len(), s.switches - 1);
            }
        }
    }
}
