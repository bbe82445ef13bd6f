//! Decorrelation and uniformization fitted on anomaly-free data.
//!
//! A linear least-squares one-step predictor whitens each channel, and a
//! per-component empirical CDF maps values into (0,1). Pipeline order is
//! fixed: whiten, then the trained generator, then the ECDF, then
//! stratification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Mat};

/// One-step linear least-squares predictor. Residuals of `whiten` are the
/// decorrelated inputs for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Whitener {
    pub order: usize,
    /// coeffs[i] multiplies z_{t-1-i}.
    pub coeffs: Vec<f64>,
    pub intercept: f64,
}

/// Fit prediction coefficients by ridge-regularized normal equations on the
/// centered series; the intercept absorbs the mean, so a constant series
/// yields an intercept-only predictor.
pub fn fit_whitener(series: &[f64], order: usize) -> Result<Whitener> {
    if order == 0 {
        return Err(Error::Config("whitener order must be >= 1".into()));
    }
    if series.len() <= 10 * order {
        return Err(Error::TooShort { needed: 10 * order + 1, got: series.len() });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("whitener input contains non-finite samples".into()));
    }
    let p = order;
    let rows = series.len() - p;

    let mut mean_x = vec![0.0; p];
    let mut mean_y = 0.0;
    for t in p..series.len() {
        mean_y += series[t];
        for i in 0..p {
            mean_x[i] += series[t - 1 - i];
        }
    }
    mean_y /= rows as f64;
    for m in &mut mean_x {
        *m /= rows as f64;
    }

    let mut gram = Mat::zeros(p, p);
    let mut rhs = vec![0.0; p];
    let mut x = vec![0.0; p];
    for t in p..series.len() {
        for i in 0..p {
            x[i] = series[t - 1 - i] - mean_x[i];
        }
        let y = series[t] - mean_y;
        for i in 0..p {
            rhs[i] += x[i] * y;
            for j in i..p {
                let v = gram.get(i, j) + x[i] * x[j];
                gram.set(i, j, v);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram.set(i, j, gram.get(j, i));
        }
    }
    let scale = (0..p).map(|i| gram.get(i, i)).fold(0.0_f64, f64::max).max(1.0);
    for i in 0..p {
        gram.set(i, i, gram.get(i, i) + 1e-8 * scale);
    }
    let coeffs = solve_spd(&gram, &rhs)
        .map_err(|e| Error::Numeric(format!("whitener normal equations failed: {}", e)))?;
    let intercept = mean_y - coeffs.iter().zip(&mean_x).map(|(c, m)| c * m).sum::<f64>();
    Ok(Whitener { order: p, coeffs, intercept })
}

/// Residual series: residual_t = z_t - (intercept + Σ coeffs_i z_{t-1-i}).
/// Output is `series.len() - order` long.
pub fn whiten(w: &Whitener, series: &[f64]) -> Result<Vec<f64>> {
    let p = w.order;
    if series.len() <= p {
        return Err(Error::TooShort { needed: p + 1, got: series.len() });
    }
    let mut out = Vec::with_capacity(series.len() - p);
    for t in p..series.len() {
        let mut pred = w.intercept;
        for (i, c) in w.coeffs.iter().enumerate() {
            pred += c * series[t - 1 - i];
        }
        out.push(series[t] - pred);
    }
    Ok(out)
}

impl Whitener {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: Whitener = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if w.coeffs.len() != w.order {
            return Err(Error::Data("whitener coefficient count does not match order".into()));
        }
        Ok(w)
    }
}

/// Empirical CDF of anomaly-free reference samples for one component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcdfModel {
    /// Reference samples, sorted ascending, n >= 2.
    pub sorted: Vec<f64>,
}

pub fn fit_ecdf(samples: &[f64]) -> Result<EcdfModel> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "ECDF needs at least 2 reference samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("ECDF reference contains non-finite samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(EcdfModel { sorted })
}

/// Map a value into (0,1) by rank against the reference.
///
/// At a reference point x_r the value is exactly r/(n+1); between adjacent
/// distinct reference points the rank is interpolated linearly so distinct
/// inputs keep distinct images (rank quantization would otherwise create
/// artificial bin collisions downstream). Outside the reference range the
/// output clamps to 1/(n+1) and n/(n+1), never exactly 0 or 1.
pub fn apply_ecdf(m: &EcdfModel, v: f64) -> f64 {
    let n = m.sorted.len();
    let denom = (n + 1) as f64;
    if v <= m.sorted[0] {
        return 1.0 / denom;
    }
    if v >= m.sorted[n - 1] {
        return n as f64 / denom;
    }
    // Number of reference samples <= v; 1 <= r <= n-1 here.
    let r = m.sorted.partition_point(|&x| x <= v);
    let lo = m.sorted[r - 1];
    let hi = m.sorted[r];
    let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (r as f64 + frac) / denom
}
