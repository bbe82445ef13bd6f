//! Dataset splitting, ROC computation, and operating-point reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MeasurementSeries;

/// Block counts per split. Blocks are consecutive and non-overlapping;
/// anomaly-free splits carry no injected corruption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub block_len: usize,
    pub train: usize,
    pub val: usize,
    pub test_clean: usize,
    pub test_anomaly: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { block_len: 80, train: 600, val: 400, test_clean: 500, test_anomaly: 500 }
    }
}

impl SplitSpec {
    pub fn total_blocks(&self) -> usize {
        self.train + self.val + self.test_clean + self.test_anomaly
    }

    /// Raw samples needed per channel, including the whitening lead-in.
    pub fn required_len(&self, lead_in: usize) -> usize {
        lead_in + self.total_blocks() * self.block_len
    }
}

/// Block start indices on the residual axis (raw index = lead_in + start).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub lead_in: usize,
    pub block_len: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test_clean: Vec<usize>,
    pub test_anomaly: Vec<usize>,
}

impl Splits {
    /// Raw-sample range covered by the anomaly blocks, for the injectors.
    pub fn anomaly_raw_range(&self) -> (usize, usize) {
        match (self.test_anomaly.first(), self.test_anomaly.last()) {
            (Some(&first), Some(&last)) => {
                (self.lead_in + first, self.lead_in + last + self.block_len)
            }
            _ => (0, 0),
        }
    }
}

/// Deterministic consecutive partition: train, then validation, then clean
/// test, then anomaly test. The anomaly region comes last so injected
/// corruption cannot bleed through the whitener memory into clean blocks.
pub fn split(series: &MeasurementSeries, spec: &SplitSpec, lead_in: usize) -> Result<Splits> {
    if spec.block_len == 0 {
        return Err(Error::Config("block length must be >= 1".into()));
    }
    let needed = spec.required_len(lead_in);
    if series.len() < needed {
        return Err(Error::TooShort { needed, got: series.len() });
    }
    let b = spec.block_len;
    let mut cursor = 0usize;
    let mut take = |count: usize| -> Vec<usize> {
        let starts: Vec<usize> = (0..count).map(|i| cursor + i * b).collect();
        cursor += count * b;
        starts
    };
    Ok(Splits {
        lead_in,
        block_len: b,
        train: take(spec.train),
        val: take(spec.val),
        test_clean: take(spec.test_clean),
        test_anomaly: take(spec.test_anomaly),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points swept over every distinct score, sorted by FPR, with the
/// trapezoidal area underneath (ties earn half credit, so identical score
/// distributions land at exactly 0.5).
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Build the curve from per-block scores of each class. `reject_low` gives
/// the anomalous direction of the score.
pub fn roc(clean: &[f64], anomaly: &[f64], reject_low: bool) -> Result<RocCurve> {
    if clean.is_empty() || anomaly.is_empty() {
        return Err(Error::Data("ROC needs scores from both classes".into()));
    }
    // Work in "higher = more anomalous" space.
    let flip = |s: f64| if reject_low { -s } else { s };
    let mut clean_l: Vec<f64> = clean.iter().map(|&s| flip(s)).collect();
    let mut anomaly_l: Vec<f64> = anomaly.iter().map(|&s| flip(s)).collect();
    clean_l.sort_by(|a, b| a.partial_cmp(b).unwrap());
    anomaly_l.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = clean_l.iter().chain(anomaly_l.iter()).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let frac_at_or_above = |sorted: &[f64], t: f64| -> f64 {
        (sorted.len() - sorted.partition_point(|&v| v < t)) as f64 / sorted.len() as f64
    };

    let mut points = vec![RocPoint {
        threshold: if reject_low { f64::NEG_INFINITY } else { f64::INFINITY },
        fpr: 0.0,
        tpr: 0.0,
    }];
    for t in thresholds {
        points.push(RocPoint {
            threshold: flip(t),
            fpr: frac_at_or_above(&clean_l, t),
            tpr: frac_at_or_above(&anomaly_l, t),
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[0].tpr + pair[1].tpr) * 0.5;
    }
    Ok(RocCurve { points, auc })
}

/// Conservative step readout: the best true-positive rate among operating
/// points whose false-positive rate does not exceed the budget. No
/// interpolation credit.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_budget: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_budget)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// The operating point behind `tpr_at_fpr`, for threshold reporting.
pub fn operating_point(curve: &RocCurve, fpr_budget: f64) -> RocPoint {
    let mut best = curve.points[0];
    for p in &curve.points {
        if p.fpr <= fpr_budget && (p.tpr > best.tpr || (p.tpr == best.tpr && p.fpr < best.fpr)) {
            best = *p;
        }
    }
    best
}
