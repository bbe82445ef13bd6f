//! Linearized grid measurement simulator, corruption injectors, and the
//! classical weighted-least-squares residual detector.
//!
//! The measurement model is z_t = H s_t + w_t with a full-column-rank H, so
//! an additive corruption lying in the column space of H (z' = z + w·HΔ)
//! shifts the estimated state by exactly w·Δ while leaving every residual,
//! and therefore the J statistic, unchanged. That invariance is what makes
//! such attacks unobservable to post-estimation detection.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Mat};
use crate::occupancy::{Label, Verdict};
use crate::series::MeasurementSeries;

/// Linearized measurement system: z = H s + w, w ~ N(0, diag(σ²)).
#[derive(Debug, Clone)]
pub struct GridModel {
    /// m×n measurement matrix, m >= n, rank n.
    pub h: Mat,
    /// Per-measurement noise standard deviations, all positive.
    pub sigma: Vec<f64>,
    pub channels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    channels: Vec<String>,
}

impl GridModel {
    pub fn new(h: Mat, sigma: Vec<f64>, channels: Vec<String>) -> Result<Self> {
        let model = GridModel { h, sigma, channels };
        model.validate()?;
        Ok(model)
    }

    pub fn measurements(&self) -> usize {
        self.h.rows()
    }

    pub fn states(&self) -> usize {
        self.h.cols()
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = (self.h.rows(), self.h.cols());
        if m < n {
            return Err(Error::Config(format!("need m >= n, got m = {}, n = {}", m, n)));
        }
        if self.sigma.len() != m {
            return Err(Error::Config(format!(
                "sigma has {} entries for {} measurements",
                self.sigma.len(),
                m
            )));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("all noise stds must be > 0".into()));
        }
        if self.channels.len() != m {
            return Err(Error::Config(format!(
                "{} channel labels for {} measurements",
                self.channels.len(),
                m
            )));
        }
        // Observability: HᵀH must be positive definite.
        let gram = normal_matrix(&self.h, &vec![1.0; m], &(0..m).collect::<Vec<_>>());
        solve_spd(&gram, &vec![0.0; n])
            .map_err(|_| Error::Unobservable("H is rank deficient".into()))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = GridJson {
            h: self.h.to_nested(),
            sigma: self.sigma.clone(),
            channels: self.channels.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json: GridJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        GridModel::new(Mat::from_rows(json.h)?, json.sigma, json.channels)
    }

    /// Four-bus network with a slack-referenced angle state (n = 3) and ten
    /// channels: five line flows, one redundant flow meter, four injections.
    pub fn bus4() -> Self {
        let lines = [(0usize, 1usize), (0, 2), (1, 2), (1, 3), (2, 3)];
        let mut rows = Vec::new();
        let mut channels = Vec::new();
        let mut sigma = Vec::new();
        for &(a, b) in &lines {
            rows.push(flow_row(4, a, b));
            channels.push(format!("f_{}_{}", a + 1, b + 1));
            sigma.push(0.05);
        }
        rows.push(flow_row(4, 1, 2));
        channels.push("f_2_3_b".to_string());
        sigma.push(0.05);
        for bus in 0..4 {
            rows.push(injection_row(4, bus, &lines));
            channels.push(format!("p_{}", bus + 1));
            sigma.push(0.08);
        }
        GridModel::new(Mat::from_rows(rows).unwrap(), sigma, channels).unwrap()
    }

    /// Ring-with-chords stand-in for a larger transmission system: 30 buses,
    /// 37 lines, 67 channels, 29 states.
    pub fn bus30() -> Self {
        let buses = 30;
        let mut lines: Vec<(usize, usize)> = (0..buses).map(|i| (i, (i + 1) % buses)).collect();
        for start in [0usize, 4, 8, 12, 16, 20, 24] {
            lines.push((start, (start + 7) % buses));
        }
        let mut rows = Vec::new();
        let mut channels = Vec::new();
        let mut sigma = Vec::new();
        for &(a, b) in &lines {
            rows.push(flow_row(buses, a, b));
            channels.push(format!("f_{}_{}", a + 1, b + 1));
            sigma.push(0.05);
        }
        for bus in 0..buses {
            rows.push(injection_row(buses, bus, &lines));
            channels.push(format!("p_{}", bus + 1));
            sigma.push(0.08);
        }
        GridModel::new(Mat::from_rows(rows).unwrap(), sigma, channels).unwrap()
    }
}

/// Row for the flow on line (a,b): θ_a − θ_b with bus 0 as the angle
/// reference, states are θ_1..θ_{buses-1}.
fn flow_row(buses: usize, a: usize, b: usize) -> Vec<f64> {
    let mut row = vec![0.0; buses - 1];
    if a > 0 {
        row[a - 1] += 1.0;
    }
    if b > 0 {
        row[b - 1] -= 1.0;
    }
    row
}

fn injection_row(buses: usize, bus: usize, lines: &[(usize, usize)]) -> Vec<f64> {
    let mut row = vec![0.0; buses - 1];
    for &(a, b) in lines {
        if a == bus {
            for (i, v) in flow_row(buses, a, b).iter().enumerate() {
                row[i] += v;
            }
        } else if b == bus {
            for (i, v) in flow_row(buses, b, a).iter().enumerate() {
                row[i] += v;
            }
        }
    }
    row
}

/// Quasi-static state evolution: each state follows a slow AR(1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateDynamics {
    pub phi: f64,
    pub innovation_std: f64,
    /// Fixed initial state; when absent the stationary distribution is used.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub init: Option<Vec<f64>>,
}

impl Default for StateDynamics {
    fn default() -> Self {
        // Innovation scaled for unit stationary variance at phi = 0.999.
        StateDynamics { phi: 0.999, innovation_std: (1.0_f64 - 0.999 * 0.999).sqrt(), init: None }
    }
}

/// Simulate T samples of z_t = H s_t + w_t.
pub fn simulate(
    model: &GridModel,
    t_len: usize,
    dynamics: &StateDynamics,
    rng: &mut ChaCha8Rng,
) -> Result<MeasurementSeries> {
    if t_len == 0 {
        return Err(Error::Config("need T >= 1".into()));
    }
    let n = model.states();
    let mut state: Vec<f64> = match &dynamics.init {
        Some(init) => {
            if init.len() != n {
                return Err(Error::Shape(format!(
                    "initial state has {} entries, model has {} states",
                    init.len(),
                    n
                )));
            }
            init.clone()
        }
        None => {
            let stationary = if dynamics.phi.abs() < 1.0 {
                dynamics.innovation_std / (1.0 - dynamics.phi * dynamics.phi).sqrt()
            } else {
                0.0
            };
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    stationary * z
                })
                .collect()
        }
    };
    let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(t_len); model.measurements()];
    for _ in 0..t_len {
        for s in &mut state {
            let e: f64 = StandardNormal.sample(rng);
            *s = dynamics.phi * *s + dynamics.innovation_std * e;
        }
        let clean = model.h.matvec(&state);
        for (c, (&z, &s)) in clean.iter().zip(&model.sigma).enumerate() {
            let w: f64 = StandardNormal.sample(rng);
            data[c].push(z + s * w);
        }
    }
    MeasurementSeries::new(data, 50.0)
}

/// Gaussian mixture: (weight, mean, std) components, weights summing to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<GmmComponent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl Gmm {
    pub fn new(components: Vec<(f64, f64, f64)>) -> Result<Self> {
        let components: Vec<GmmComponent> = components
            .into_iter()
            .map(|(weight, mean, std)| GmmComponent { weight, mean, std })
            .collect();
        let gmm = Gmm { components };
        gmm.validate()?;
        Ok(gmm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if self.components.iter().any(|c| c.weight < 0.0 || c.std < 0.0) {
            return Err(Error::Config("mixture weights and stds must be nonnegative".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {}, expected 1", total)));
        }
        Ok(())
    }

    /// Symmetric two-component mixture at ±offset with the given std.
    pub fn symmetric_pair(offset: f64, std: f64) -> Self {
        Gmm::new(vec![(0.5, -offset, std), (0.5, offset, std)]).unwrap()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut pick: f64 = rng.random();
        for c in &self.components {
            if pick < c.weight {
                let z: f64 = StandardNormal.sample(rng);
                return c.mean + c.std * z;
            }
            pick -= c.weight;
        }
        let last = self.components.last().unwrap();
        let z: f64 = StandardNormal.sample(rng);
        last.mean + last.std * z
    }
}

/// Add i.i.d. mixture noise to the listed channels over a window; everything
/// else is untouched. Channel lists must be non-empty and duplicate-free.
pub fn inject_bad(
    series: &MeasurementSeries,
    channels: &[usize],
    gmm: &Gmm,
    t_start: usize,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MeasurementSeries> {
    if channels.is_empty() {
        return Err(Error::Config("no channels to corrupt".into()));
    }
    let mut seen = vec![false; series.channels()];
    for &c in channels {
        if c >= series.channels() {
            return Err(Error::Config(format!(
                "channel {} out of range ({} channels)",
                c,
                series.channels()
            )));
        }
        if seen[c] {
            return Err(Error::Config(format!("channel {} listed twice", c)));
        }
        seen[c] = true;
    }
    if t_start + t_len > series.len() {
        return Err(Error::Config(format!(
            "window [{}, {}) exceeds series length {}",
            t_start,
            t_start + t_len,
            series.len()
        )));
    }
    gmm.validate()?;
    let mut out = series.clone();
    for t in t_start..t_start + t_len {
        for &c in channels {
            out.data[c][t] += gmm.sample(rng);
        }
    }
    Ok(out)
}

/// Column-space attack: direction Δ in state space, scalar magnitude process
/// w_t drawn i.i.d. from the mixture. The corrupted channels are exactly the
/// support of H·Δ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPlan {
    pub delta: Vec<f64>,
    pub magnitude: Gmm,
}

impl AttackPlan {
    pub fn validate(&self, model: &GridModel) -> Result<()> {
        if self.delta.len() != model.states() {
            return Err(Error::Shape(format!(
                "attack direction has {} entries, model has {} states",
                self.delta.len(),
                model.states()
            )));
        }
        if self.delta.iter().all(|&d| d == 0.0) {
            return Err(Error::Config("attack direction is zero: nothing to inject".into()));
        }
        self.magnitude.validate()
    }

    /// Channels carrying the attack: support of H·Δ.
    pub fn support(&self, model: &GridModel) -> Vec<usize> {
        model
            .h
            .matvec(&self.delta)
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 1e-12)
            .map(|(i, _)| i)
            .collect()
    }
}

/// z'_t = z_t + w_t · (HΔ) over the window. Residual-based statistics are
/// invariant to this corruption while the implied state shifts by w_t·Δ.
pub fn unobservable_attack(
    model: &GridModel,
    plan: &AttackPlan,
    series: &MeasurementSeries,
    t_start: usize,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MeasurementSeries> {
    plan.validate(model)?;
    if series.channels() != model.measurements() {
        return Err(Error::Shape(format!(
            "series has {} channels, model has {} measurements",
            series.channels(),
            model.measurements()
        )));
    }
    if t_start + t_len > series.len() {
        return Err(Error::Config(format!(
            "window [{}, {}) exceeds series length {}",
            t_start,
            t_start + t_len,
            series.len()
        )));
    }
    let direction = model.h.matvec(&plan.delta);
    let mut out = series.clone();
    for t in t_start..t_start + t_len {
        let w = plan.magnitude.sample(rng);
        for (c, d) in direction.iter().enumerate() {
            out.data[c][t] += w * d;
        }
    }
    Ok(out)
}

/// HᵀWH restricted to the active measurement rows, W = diag(1/σ²).
fn normal_matrix(h: &Mat, sigma: &[f64], active: &[usize]) -> Mat {
    let n = h.cols();
    let mut gram = Mat::zeros(n, n);
    for &row in active {
        let w = 1.0 / (sigma[row] * sigma[row]);
        let hr = h.row(row);
        for i in 0..n {
            let s = w * hr[i];
            if s == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = gram.get(i, j) + s * hr[j];
                gram.set(i, j, v);
            }
        }
    }
    gram
}

fn wls_active(model: &GridModel, z: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    if z.len() != model.measurements() {
        return Err(Error::Shape(format!(
            "measurement vector has {} entries, model expects {}",
            z.len(),
            model.measurements()
        )));
    }
    let gram = normal_matrix(&model.h, &model.sigma, active);
    let mut rhs = vec![0.0; model.states()];
    for &row in active {
        let w = z[row] / (model.sigma[row] * model.sigma[row]);
        for (r, hv) in rhs.iter_mut().zip(model.h.row(row)) {
            *r += w * hv;
        }
    }
    solve_spd(&gram, &rhs)
}

/// Weighted least-squares state estimate x̂ = argmin Σ (z − Hx)ᵢ²/σᵢ².
pub fn wls(model: &GridModel, z: &[f64]) -> Result<Vec<f64>> {
    let active: Vec<usize> = (0..model.measurements()).collect();
    wls_active(model, z, &active)
}

/// Weighted residual sum of squares J(x̂) = Σᵢ (z − Hx̂)ᵢ²/σᵢ².
pub fn jx(model: &GridModel, z: &[f64], x_hat: &[f64]) -> f64 {
    let predicted = model.h.matvec(x_hat);
    z.iter()
        .zip(&predicted)
        .zip(&model.sigma)
        .map(|((zi, pi), si)| {
            let r = (zi - pi) / si;
            r * r
        })
        .sum()
}

/// Outcome of the recursive residual test over one block.
#[derive(Debug, Clone)]
pub struct JxOutcome {
    pub verdict: Verdict,
    /// Channels removed, in removal order.
    pub removed: Vec<usize>,
    /// Removal exhausted observability before the block passed.
    pub unobservable: bool,
    /// Block J statistic before any removal; the natural sweep score.
    pub initial_j: f64,
}

/// Residual test on a block of consecutive measurement vectors at size alpha.
///
/// J summed over the block is compared against the chi-square quantile with
/// (active measurements − states)·block-length degrees of freedom. On
/// failure the channel with the largest total residue is removed and the
/// block is refitted, until the test passes or the system loses
/// observability. Anomaly whenever any channel had to be removed.
pub fn jx_detect(model: &GridModel, block: &[Vec<f64>], alpha: f64) -> Result<JxOutcome> {
    if block.is_empty() {
        return Err(Error::Data("empty measurement block".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {}", alpha)));
    }
    let m = model.measurements();
    let n = model.states();
    for z in block {
        if z.len() != m {
            return Err(Error::Shape(format!(
                "block row has {} entries, model expects {}",
                z.len(),
                m
            )));
        }
    }
    let mut active: Vec<usize> = (0..m).collect();
    let mut removed: Vec<usize> = Vec::new();
    let mut initial_j = f64::NAN;
    let mut threshold_used = f64::NAN;
    loop {
        if active.len() <= n {
            // No redundancy left to test against.
            return Ok(JxOutcome {
                verdict: Verdict {
                    label: Label::Anomaly,
                    score: initial_j,
                    threshold: Some(threshold_used),
                },
                removed,
                unobservable: true,
                initial_j,
            });
        }
        let mut total_j = 0.0;
        let mut per_channel = vec![0.0; m];
        let mut rank_ok = true;
        for z in block {
            let x_hat = match wls_active(model, z, &active) {
                Ok(x) => x,
                Err(Error::Unobservable(_)) => {
                    rank_ok = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            let predicted = model.h.matvec(&x_hat);
            for &c in &active {
                let r = (z[c] - predicted[c]) / model.sigma[c];
                let r2 = r * r;
                per_channel[c] += r2;
                total_j += r2;
            }
        }
        if !rank_ok {
            return Ok(JxOutcome {
                verdict: Verdict {
                    label: Label::Anomaly,
                    score: initial_j,
                    threshold: Some(threshold_used),
                },
                removed,
                unobservable: true,
                initial_j,
            });
        }
        let df = ((active.len() - n) * block.len()) as f64;
        let tau = chi_square_quantile(df, 1.0 - alpha)?;
        if initial_j.is_nan() {
            initial_j = total_j;
            threshold_used = tau;
        }
        if total_j <= tau {
            let label = if removed.is_empty() { Label::AnomalyFree } else { Label::Anomaly };
            return Ok(JxOutcome {
                verdict: Verdict { label, score: initial_j, threshold: Some(threshold_used) },
                removed,
                unobservable: false,
                initial_j,
            });
        }
        let worst = *active
            .iter()
            .max_by(|&&a, &&b| per_channel[a].partial_cmp(&per_channel[b]).unwrap())
            .unwrap();
        active.retain(|&c| c != worst);
        removed.push(worst);
    }
}

// ---- chi-square quantile -------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEFFS[0];
        for (i, c) in COEFFS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Regularized lower incomplete gamma P(a, x).
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series expansion.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut term = sum;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x) = 1 − P(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        1.0 - h * (-x + a * x.ln() - ln_gamma(a)).exp()
    }
}

/// Chi-square quantile via Newton iterations on P(df/2, x/2), seeded with the
/// Wilson–Hilferty approximation.
pub fn chi_square_quantile(df: f64, p: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::Config(format!("degrees of freedom must be > 0, got {}", df)));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability must be in (0,1), got {}", p)));
    }
    let a = df / 2.0;
    // Wilson–Hilferty start.
    let z = normal_quantile(p);
    let t = 1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt();
    let mut x = (df * t * t * t).max(1e-8);
    for _ in 0..60 {
        let f = gamma_p(a, x / 2.0) - p;
        // Chi-square density at x.
        let ln_pdf = (a - 1.0) * (x / 2.0).ln() - x / 2.0 - ln_gamma(a) - 2.0_f64.ln();
        let pdf = ln_pdf.exp();
        if pdf <= 0.0 {
            break;
        }
        let step = f / pdf;
        x -= step;
        if x <= 0.0 {
            x = 1e-8;
        }
        if step.abs() < 1e-12 * x.max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Acklam's rational approximation to the standard normal quantile.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}
