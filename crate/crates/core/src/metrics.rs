//! Threshold recall metrics over pose errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::PoseError;

pub const DEFAULT_THRESHOLDS_M: [f64; 3] = [1.0, 3.0, 5.0];
pub const DEFAULT_THRESHOLDS_DEG: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    /// Planar translation error.
    Distance,
    Lateral,
    Longitudinal,
    Azimuth,
    /// Lateral below the i-th meter threshold and azimuth below the i-th
    /// degree threshold; the row's threshold is the meter value.
    Combined,
}

impl MetricFamily {
    pub const ALL: [MetricFamily; 5] = [
        MetricFamily::Distance,
        MetricFamily::Lateral,
        MetricFamily::Longitudinal,
        MetricFamily::Azimuth,
        MetricFamily::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricFamily::Distance => "distance",
            MetricFamily::Lateral => "lateral",
            MetricFamily::Longitudinal => "longitudinal",
            MetricFamily::Azimuth => "azimuth",
            MetricFamily::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        MetricFamily::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// One recall value in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub family: MetricFamily,
    pub threshold: f64,
    pub value_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub recalls: Vec<Recall>,
}

impl MetricsReport {
    pub fn get(&self, family: MetricFamily, threshold: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|r| r.family == family && r.threshold == threshold)
            .map(|r| r.value_percent)
    }

    /// Checks range, threshold monotonicity and that each combined recall
    /// is bounded by its lateral and azimuth components.
    pub fn check(&self) -> Result<()> {
        for r in &self.recalls {
            if !(0.0..=100.0).contains(&r.value_percent) {
                return Err(Error::InvalidArgument(format!(
                    "recall out of range: {r:?}"
                )));
            }
        }
        for f in MetricFamily::ALL {
            let mut rows: Vec<&Recall> = self.recalls.iter().filter(|r| r.family == f).collect();
            rows.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
            if rows
                .windows(2)
                .any(|w| w[0].value_percent > w[1].value_percent)
            {
                return Err(Error::InvalidArgument(format!(
                    "{} recall is not monotone in threshold",
                    f.name()
                )));
            }
        }
        let combined = self
            .recalls
            .iter()
            .filter(|r| r.family == MetricFamily::Combined);
        let azimuth: Vec<&Recall> = self
            .recalls
            .iter()
            .filter(|r| r.family == MetricFamily::Azimuth)
            .collect();
        let lateral: Vec<&Recall> = self
            .recalls
            .iter()
            .filter(|r| r.family == MetricFamily::Lateral)
            .collect();
        for (i, c) in combined.enumerate() {
            let bound = lateral[i].value_percent.min(azimuth[i].value_percent);
            if c.value_percent > bound {
                return Err(Error::InvalidArgument(format!(
                    "combined recall {} exceeds its components ({bound})",
                    c.value_percent
                )));
            }
        }
        Ok(())
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Recall of every family at the given thresholds. A sample counts when its
/// error is strictly below the threshold.
pub fn compute_metrics_with(
    errors: &[PoseError],
    thresholds_m: &[f64],
    thresholds_deg: &[f64],
) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument(
            "metrics of an empty error list".into(),
        ));
    }
    if thresholds_m.len() != thresholds_deg.len() {
        return Err(Error::InvalidArgument(format!(
            "combined metrics pair meter and degree thresholds, got {} and {}",
            thresholds_m.len(),
            thresholds_deg.len()
        )));
    }
    let n = errors.len();
    let count = |pred: &dyn Fn(&PoseError) -> bool| errors.iter().filter(|e| pred(e)).count();
    let mut recalls = Vec::new();
    let mut push = |family, threshold, hits| {
        recalls.push(Recall {
            family,
            threshold,
            value_percent: percent(hits, n),
        })
    };
    for &d in thresholds_m {
        push(
            MetricFamily::Distance,
            d,
            count(&|e| e.lateral_m.hypot(e.longitudinal_m) < d),
        );
    }
    for &d in thresholds_m {
        push(MetricFamily::Lateral, d, count(&|e| e.lateral_m < d));
    }
    for &d in thresholds_m {
        push(
            MetricFamily::Longitudinal,
            d,
            count(&|e| e.longitudinal_m < d),
        );
    }
    for &a in thresholds_deg {
        push(MetricFamily::Azimuth, a, count(&|e| e.yaw_deg < a));
    }
    for (&d, &a) in thresholds_m.iter().zip(thresholds_deg) {
        push(
            MetricFamily::Combined,
            d,
            count(&|e| e.lateral_m < d && e.yaw_deg < a),
        );
    }
    Ok(MetricsReport { n, recalls })
}

pub fn compute_metrics(errors: &[PoseError]) -> Result<MetricsReport> {
    compute_metrics_with(errors, &DEFAULT_THRESHOLDS_M, &DEFAULT_THRESHOLDS_DEG)
}
