//! Occupancy statistics and the coincidence uniformity tests.
//!
//! Values in (0,1) are stratified into K equal bins; the coincidence
//! statistic K_i counts the bins holding exactly i samples. Uniformity makes
//! singleton bins most likely, so the tests reject when the occupancy pattern
//! drifts from that profile:
//!
//! * K1: reject when the singleton count is abnormally low. Its null
//!   distribution is evaluated exactly in big-integer rationals, because the
//!   alternating series cancels catastrophically in floating point at the
//!   default (N=50, K=2500).
//! * K0: reject when the empty-bin count is abnormally high; Monte Carlo null.
//! * VC: a linear combination Σ cᵢKᵢ, coefficients fitted as a Fisher
//!   discriminant against a pinned contaminated alternative; Monte Carlo null.
//! * OC-SVM: a nonlinear combination of (K_0..K_r) scored by a one-class
//!   model trained on anomaly-free coincidence vectors; Monte Carlo null.

use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Mat};
use crate::ocsvm::{self, OcSvmModel};
use crate::seed;

/// Bin counts of one stratified block plus the derived coincidence profile.
#[derive(Debug, Clone)]
pub struct OccupancyProfile {
    /// K, the number of bins.
    pub bins: usize,
    /// N, the number of samples.
    pub samples: usize,
    /// counts[b] = samples landing in bin b; sums to N.
    pub counts: Vec<u32>,
    /// coincidences[i] = number of bins holding exactly i samples, up to the
    /// maximum observed multiplicity; sums to K.
    pub coincidences: Vec<u32>,
}

impl OccupancyProfile {
    /// K_i, zero beyond the observed maximum multiplicity.
    pub fn k(&self, i: usize) -> u32 {
        self.coincidences.get(i).copied().unwrap_or(0)
    }

    /// (K_0, ..., K_r) as a feature vector.
    pub fn feature_vector(&self, r: usize) -> Vec<f64> {
        (0..=r).map(|i| self.k(i) as f64).collect()
    }
}

/// K-level uniform quantization of values in the open unit interval.
pub fn stratify(u: &[f64], k_bins: usize) -> Result<OccupancyProfile> {
    if k_bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {}", k_bins)));
    }
    if u.is_empty() {
        return Err(Error::Data("cannot stratify an empty block".into()));
    }
    let mut counts = vec![0u32; k_bins];
    for &v in u {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Data(format!("value {} outside the open interval (0,1)", v)));
        }
        let idx = ((v * k_bins as f64) as usize).min(k_bins - 1);
        counts[idx] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap() as usize;
    let mut coincidences = vec![0u32; max_count + 1];
    for &c in &counts {
        coincidences[c as usize] += 1;
    }
    Ok(OccupancyProfile { bins: k_bins, samples: u.len(), counts, coincidences })
}

fn big_binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for i in 0..k.min(n - k) {
        num *= n - i;
        den *= i + 1;
    }
    num / den
}

/// N·(N−1)···(N−j+1)
fn falling_factorial(n: usize, j: usize) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..j {
        acc *= n - i;
    }
    acc
}

/// Exact Pr(K1 = k) for N uniform samples over K bins, as a rational:
///
///   P_k = Σ_{j=k}^{min(N,K)} (−1)^{j+k} C(j,k) C(K,j) N!/(N−j)! (K−j)^{N−j} / K^N
pub fn vonmises_pk_exact(n: usize, k_bins: usize, k: usize) -> Result<BigRational> {
    if n == 0 || k_bins == 0 {
        return Err(Error::Config("need N >= 1 and K >= 1".into()));
    }
    if k > n.min(k_bins) {
        return Err(Error::Config(format!(
            "k = {} exceeds min(N,K) = {}",
            k,
            n.min(k_bins)
        )));
    }
    let mut numerator = BigInt::zero();
    for j in k..=n.min(k_bins) {
        let mut term = big_binomial(j, k) * big_binomial(k_bins, j) * falling_factorial(n, j);
        term *= BigInt::from(k_bins - j).pow((n - j) as u32);
        if (j + k) % 2 == 0 {
            numerator += term;
        } else {
            numerator -= term;
        }
    }
    let denominator = BigInt::from(k_bins).pow(n as u32);
    Ok(BigRational::new(numerator, denominator))
}

/// `vonmises_pk_exact` rounded to floating point at the very end.
pub fn vonmises_pk(n: usize, k_bins: usize, k: usize) -> Result<f64> {
    Ok(vonmises_pk_exact(n, k_bins, k)?.to_f64().unwrap_or(0.0))
}

/// Threshold decision for the K1 test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum K1Threshold {
    /// Reject (declare anomaly) when K1 <= this value.
    RejectAtOrBelow(usize),
    /// Even Pr(K1 = 0) exceeds alpha: the test never rejects, size is still
    /// controlled.
    NeverReject,
}

/// Largest k with Pr(K1 <= k; H0) <= alpha, evaluated in exact arithmetic, so
/// the realized size never exceeds alpha. Rejecting at any smaller k would
/// control size too but waste power.
pub fn threshold(n: usize, k_bins: usize, alpha: f64) -> Result<K1Threshold> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {}", alpha)));
    }
    let alpha = BigRational::from_float(alpha)
        .ok_or_else(|| Error::Config("alpha is not finite".into()))?;
    let mut cdf = BigRational::zero();
    let mut best: Option<usize> = None;
    for k in 0..=n.min(k_bins) {
        cdf += vonmises_pk_exact(n, k_bins, k)?;
        if cdf <= alpha {
            best = Some(k);
        } else {
            break;
        }
    }
    Ok(match best {
        Some(k) => K1Threshold::RejectAtOrBelow(k),
        None => K1Threshold::NeverReject,
    })
}

/// Binary decision with the score that produced it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Verdict {
    pub label: Label,
    pub score: f64,
    /// Score-space threshold actually used; None when the spec never rejects.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Anomaly,
    AnomalyFree,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Anomaly => write!(f, "anomaly"),
            Label::AnomalyFree => write!(f, "anomaly_free"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    K0,
    K1,
    Vc,
    Ocsvm,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k0" => Ok(Variant::K0),
            "k1" => Ok(Variant::K1),
            "vc" => Ok(Variant::Vc),
            "ocsvm" => Ok(Variant::Ocsvm),
            other => Err(Error::Config(format!(
                "unknown test variant {:?} (expected k0, k1, vc, or ocsvm)",
                other
            ))),
        }
    }
}

/// A calibrated coincidence test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSpec {
    pub variant: Variant,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    /// None encodes the never-reject sentinel.
    pub threshold: Option<f64>,
    /// Rejection direction: anomaly when the score is at or below (true) or
    /// at or above (false) the threshold.
    pub reject_low: bool,
    /// Highest coincidence order used by the VC and OC-SVM variants.
    pub r: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coeffs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub combiner: Option<OcSvmModel>,
}

pub const DEFAULT_R: usize = 15;

fn validate_nk_alpha(n: usize, k_bins: usize, alpha: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("block size N must be >= 1".into()));
    }
    if k_bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {}", k_bins)));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {}", alpha)));
    }
    Ok(())
}

impl TestSpec {
    /// K1 test with the exact rational-arithmetic threshold.
    pub fn k1(n: usize, k_bins: usize, alpha: f64) -> Result<Self> {
        validate_nk_alpha(n, k_bins, alpha)?;
        let threshold = match threshold(n, k_bins, alpha)? {
            K1Threshold::RejectAtOrBelow(t) => Some(t as f64),
            K1Threshold::NeverReject => None,
        };
        Ok(TestSpec {
            variant: Variant::K1,
            n,
            k: k_bins,
            alpha,
            threshold,
            reject_low: true,
            r: DEFAULT_R,
            coeffs: None,
            combiner: None,
        })
    }

    /// K0 test; null distribution and upper-tail threshold by Monte Carlo.
    pub fn k0(n: usize, k_bins: usize, alpha: f64, trials: usize, mc_seed: u64) -> Result<Self> {
        validate_nk_alpha(n, k_bins, alpha)?;
        let null = null_mc(n, k_bins, |p| p.k(0) as f64, trials, mc_seed)?;
        Ok(TestSpec {
            variant: Variant::K0,
            n,
            k: k_bins,
            alpha,
            threshold: null.upper_threshold(alpha),
            reject_low: false,
            r: DEFAULT_R,
            coeffs: None,
            combiner: None,
        })
    }

    /// VC linear-combination test for the given coefficients (c_0..c_r).
    /// Orientation comes from where the pinned contaminated alternative puts
    /// the score mass; the threshold is Monte Carlo at size alpha.
    pub fn vc(
        n: usize,
        k_bins: usize,
        alpha: f64,
        coeffs: Vec<f64>,
        trials: usize,
        mc_seed: u64,
    ) -> Result<Self> {
        validate_nk_alpha(n, k_bins, alpha)?;
        if coeffs.is_empty() {
            return Err(Error::Config("VC test needs coefficients c_0..c_r".into()));
        }
        if coeffs.len() > n + 1 {
            return Err(Error::Config(format!(
                "VC order r = {} exceeds N = {}",
                coeffs.len() - 1,
                n
            )));
        }
        let r = coeffs.len() - 1;
        let score = |p: &OccupancyProfile| vc_score(p, &coeffs, r);

        let null = null_mc(n, k_bins, score, trials, mc_seed)?;
        let null_mean = null.mean();
        let alt_trials = 2000.max(trials / 10);
        let mut rng = seed::rng(mc_seed.wrapping_add(0x5EED), seed::stream::CALIBRATE);
        let mut alt_mean = 0.0;
        for _ in 0..alt_trials {
            let block = contaminated_block(n, &mut rng);
            alt_mean += score(&stratify(&block, k_bins)?);
        }
        alt_mean /= alt_trials as f64;
        let reject_low = alt_mean < null_mean;
        let threshold = if reject_low {
            null.lower_threshold(alpha)
        } else {
            null.upper_threshold(alpha)
        };
        Ok(TestSpec {
            variant: Variant::Vc,
            n,
            k: k_bins,
            alpha,
            threshold,
            reject_low,
            r,
            coeffs: Some(coeffs),
            combiner: None,
        })
    }

    /// OC-SVM coincidence combiner test; decision values reject low, with the
    /// threshold calibrated by Monte Carlo under the uniform null.
    pub fn ocsvm(
        n: usize,
        k_bins: usize,
        alpha: f64,
        combiner: OcSvmModel,
        r: usize,
        trials: usize,
        mc_seed: u64,
    ) -> Result<Self> {
        validate_nk_alpha(n, k_bins, alpha)?;
        let null = null_mc(
            n,
            k_bins,
            |p| ocsvm::score(&combiner, &p.feature_vector(r)).unwrap_or(f64::NEG_INFINITY),
            trials,
            mc_seed,
        )?;
        Ok(TestSpec {
            variant: Variant::Ocsvm,
            n,
            k: k_bins,
            alpha,
            threshold: null.lower_threshold(alpha),
            reject_low: true,
            r,
            coeffs: None,
            combiner: Some(combiner),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn check_profile(&self, profile: &OccupancyProfile, expected: Variant) -> Result<()> {
        if self.variant != expected {
            return Err(Error::Config(format!(
                "test spec is for {:?}, not {:?}",
                self.variant, expected
            )));
        }
        if profile.samples != self.n {
            return Err(Error::Shape(format!(
                "profile has N = {}, spec expects N = {}",
                profile.samples, self.n
            )));
        }
        if profile.bins != self.k {
            return Err(Error::Shape(format!(
                "profile has K = {}, spec expects K = {}",
                profile.bins, self.k
            )));
        }
        Ok(())
    }

    fn decide(&self, score: f64) -> Verdict {
        let label = match self.threshold {
            None => Label::AnomalyFree,
            Some(t) => {
                let reject = if self.reject_low { score <= t } else { score >= t };
                if reject {
                    Label::Anomaly
                } else {
                    Label::AnomalyFree
                }
            }
        };
        Verdict { label, score, threshold: self.threshold }
    }
}

fn vc_score(profile: &OccupancyProfile, coeffs: &[f64], r: usize) -> f64 {
    coeffs.iter().enumerate().take(r + 1).map(|(i, c)| c * profile.k(i) as f64).sum()
}

/// Paninski-style singleton test: anomaly when K1 is at or below the
/// exact-arithmetic threshold.
pub fn k1_test(profile: &OccupancyProfile, spec: &TestSpec) -> Result<Verdict> {
    spec.check_profile(profile, Variant::K1)?;
    Ok(spec.decide(profile.k(1) as f64))
}

/// David-style empty-bin test: anomaly when K0 is at or above the Monte
/// Carlo threshold.
pub fn k0_test(profile: &OccupancyProfile, spec: &TestSpec) -> Result<Verdict> {
    spec.check_profile(profile, Variant::K0)?;
    Ok(spec.decide(profile.k(0) as f64))
}

/// Linear combination Σ cᵢ Kᵢ thresholded one-sided per the spec orientation.
pub fn vc_test(profile: &OccupancyProfile, spec: &TestSpec) -> Result<Verdict> {
    spec.check_profile(profile, Variant::Vc)?;
    let coeffs = spec
        .coeffs
        .as_ref()
        .ok_or_else(|| Error::Config("VC spec is missing its coefficients".into()))?;
    Ok(spec.decide(vc_score(profile, coeffs, spec.r)))
}

/// Nonlinear combination of (K_0..K_r) through the trained one-class model.
pub fn ocsvm_coincidence_test(profile: &OccupancyProfile, spec: &TestSpec) -> Result<Verdict> {
    spec.check_profile(profile, Variant::Ocsvm)?;
    let combiner = spec
        .combiner
        .as_ref()
        .ok_or_else(|| Error::Config("OC-SVM spec has no trained combiner".into()))?;
    let score = ocsvm::score(combiner, &profile.feature_vector(spec.r))?;
    Ok(spec.decide(score))
}

/// Dispatch on the spec's variant.
pub fn run_test(profile: &OccupancyProfile, spec: &TestSpec) -> Result<Verdict> {
    match spec.variant {
        Variant::K0 => k0_test(profile, spec),
        Variant::K1 => k1_test(profile, spec),
        Variant::Vc => vc_test(profile, spec),
        Variant::Ocsvm => ocsvm_coincidence_test(profile, spec),
    }
}

/// Empirical null of a statistic over i.i.d. uniform blocks.
#[derive(Debug, Clone)]
pub struct NullDistribution {
    /// Statistic values, sorted ascending.
    pub sorted: Vec<f64>,
}

/// Monte Carlo null: stratify `trials` i.i.d. uniform blocks and score each.
/// Deterministic from the seed.
pub fn null_mc(
    n: usize,
    k_bins: usize,
    statistic: impl Fn(&OccupancyProfile) -> f64,
    trials: usize,
    mc_seed: u64,
) -> Result<NullDistribution> {
    if trials < 1000 {
        return Err(Error::Config(format!(
            "Monte Carlo calibration needs >= 1000 trials, got {}",
            trials
        )));
    }
    let mut rng = seed::rng(mc_seed, seed::stream::CALIBRATE);
    let mut values = Vec::with_capacity(trials);
    let mut block = vec![0.0; n];
    for _ in 0..trials {
        for v in &mut block {
            *v = rand::Rng::sample(&mut rng, rand::distr::Open01);
        }
        values.push(statistic(&stratify(&block, k_bins)?));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(NullDistribution { sorted: values })
}

impl NullDistribution {
    pub fn trials(&self) -> usize {
        self.sorted.len()
    }

    /// Pr(S <= x) under the empirical null.
    pub fn lower_tail(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Pr(S >= x) under the empirical null.
    pub fn upper_tail(&self, x: f64) -> f64 {
        (self.sorted.len() - self.sorted.partition_point(|&v| v < x)) as f64
            / self.sorted.len() as f64
    }

    /// Empirical p-quantile (order statistic, nondecreasing in p).
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.sorted[idx]
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    /// Largest observed value t with Pr(S <= t) <= alpha; None when even the
    /// minimum is too likely (reject-nothing).
    pub fn lower_threshold(&self, alpha: f64) -> Option<f64> {
        let n = self.sorted.len() as f64;
        let mut best = None;
        let mut i = 0;
        while i < self.sorted.len() {
            let v = self.sorted[i];
            let cum = self.sorted.partition_point(|&x| x <= v);
            if cum as f64 / n <= alpha {
                best = Some(v);
                i = cum;
            } else {
                break;
            }
        }
        best
    }

    /// Smallest observed value t with Pr(S >= t) <= alpha.
    pub fn upper_threshold(&self, alpha: f64) -> Option<f64> {
        let n = self.sorted.len() as f64;
        let mut best = None;
        let mut i = self.sorted.len();
        while i > 0 {
            let v = self.sorted[i - 1];
            let first = self.sorted.partition_point(|&x| x < v);
            if (self.sorted.len() - first) as f64 / n <= alpha {
                best = Some(v);
                i = first;
            } else {
                break;
            }
        }
        best
    }

    /// Distinct values with their empirical probabilities.
    pub fn empirical_pmf(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &v in &self.sorted {
            match out.last_mut() {
                Some((val, cnt)) if *val == v => *cnt += 1.0,
                _ => out.push((v, 1.0)),
            }
        }
        for (_, c) in &mut out {
            *c /= n;
        }
        out
    }
}

/// Sample from the pinned contaminated alternative: uniform with probability
/// 0.7, otherwise a two-component Gaussian mixture on (0,1) centered at 0.25
/// and 0.75 (rejection-sampled into the open interval). The component std
/// 0.02 concentrates enough mass to raise the pairwise collision rate by
/// ~50% over uniform at any bin count.
fn contaminated_block(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.3 {
                loop {
                    let center = if rng.random::<f64>() < 0.5 { 0.25 } else { 0.75 };
                    let z: f64 = StandardNormal.sample(rng);
                    let x = center + 0.02 * z;
                    if x > 0.0 && x < 1.0 {
                        return x;
                    }
                }
            } else {
                rng.sample(rand::distr::Open01)
            }
        })
        .collect()
}

/// Fisher-discriminant coefficients separating uniform-null coincidence
/// vectors from the pinned contaminated alternative. Deterministic from the
/// seed; scale-normalized to unit length. The orientation puts anomaly-free
/// mass on the high side (fewer singletons and more empties score lower).
pub fn fit_vc_coefficients(n: usize, k_bins: usize, r: usize, fit_seed: u64) -> Result<Vec<f64>> {
    if r == 0 || r > n {
        return Err(Error::Config(format!("need 1 <= r <= N, got r = {}, N = {}", r, n)));
    }
    if k_bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {}", k_bins)));
    }
    let trials = 4000;
    let dim = r + 1;
    let mut rng = seed::rng(fit_seed, seed::stream::VC_FIT);

    let mut null_feats = Vec::with_capacity(trials);
    let mut alt_feats = Vec::with_capacity(trials);
    let mut block = vec![0.0; n];
    for _ in 0..trials {
        for v in &mut block {
            *v = rand::Rng::sample(&mut rng, rand::distr::Open01);
        }
        null_feats.push(stratify(&block, k_bins)?.feature_vector(r));
        let alt = contaminated_block(n, &mut rng);
        alt_feats.push(stratify(&alt, k_bins)?.feature_vector(r));
    }

    let mean = |feats: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for f in feats {
            for (mi, fi) in m.iter_mut().zip(f) {
                *mi += fi;
            }
        }
        m.iter().map(|v| v / feats.len() as f64).collect()
    };
    let mu0 = mean(&null_feats);
    let mu1 = mean(&alt_feats);

    let mut pooled = Mat::zeros(dim, dim);
    for (feats, mu) in [(&null_feats, &mu0), (&alt_feats, &mu1)] {
        for f in feats.iter() {
            for i in 0..dim {
                for j in 0..dim {
                    let v = pooled.get(i, j) + (f[i] - mu[i]) * (f[j] - mu[j]);
                    pooled.set(i, j, v);
                }
            }
        }
    }
    let denom = (2 * trials - 2) as f64;
    for v in pooled.data_mut() {
        *v /= denom;
    }
    // The occupancy identities make low coincidence orders nearly collinear
    // (e.g. K0 is close to an affine function of K1 when multiplicities stay
    // small), so the raw pooled covariance has near-null directions that a
    // plain Fisher solve would amplify into Monte Carlo noise. Shrink toward
    // the spherical covariance before inverting.
    let avg_var = (0..dim).map(|i| pooled.get(i, i)).sum::<f64>() / dim as f64;
    let shrink = 0.05;
    for i in 0..dim {
        for j in 0..dim {
            let v = (1.0 - shrink) * pooled.get(i, j)
                + if i == j { shrink * avg_var } else { 0.0 };
            pooled.set(i, j, v);
        }
    }

    let diff: Vec<f64> = mu0.iter().zip(&mu1).map(|(a, b)| a - b).collect();
    let w = match solve_spd(&pooled, &diff) {
        Ok(w) => w,
        Err(_) => {
            for i in 0..dim {
                pooled.set(i, i, pooled.get(i, i) + 1e-6);
            }
            solve_spd(&pooled, &diff)
                .map_err(|e| Error::Numeric(format!("VC coefficient fit failed: {}", e)))?
        }
    };
    let norm = crate::linalg::norm2(&w);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric("VC coefficient fit produced a degenerate direction".into()));
    }
    Ok(w.iter().map(|v| v / norm).collect())
}

/// One-class combiner trained on coincidence vectors of i.i.d.-uniform
/// (anomaly-free) blocks.
pub fn fit_coincidence_combiner(
    n: usize,
    k_bins: usize,
    r: usize,
    nu: f64,
    train_blocks: usize,
    fit_seed: u64,
) -> Result<OcSvmModel> {
    let mut rng = seed::rng(fit_seed, seed::stream::OCSVM);
    let mut feats = Vec::with_capacity(train_blocks);
    let mut block = vec![0.0; n];
    for _ in 0..train_blocks {
        for v in &mut block {
            *v = rand::Rng::sample(&mut rng, rand::distr::Open01);
        }
        feats.push(stratify(&block, k_bins)?.feature_vector(r));
    }
    ocsvm::fit(&feats, nu, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // Independent oracle: enumerate every one of the K^N equiprobable bin
    // assignments and tally the exact K1 distribution.
    fn enumerate_k1_pmf(n: usize, k_bins: usize) -> Vec<BigRational> {
        let mut hist = vec![BigInt::zero(); n.min(k_bins) + 1];
        let mut counts = vec![0u32; k_bins];
        let mut singles = 0usize;
        fn recurse(
            depth: usize,
            n: usize,
            k_bins: usize,
            counts: &mut [u32],
            singles: &mut usize,
            hist: &mut [BigInt],
        ) {
            if depth == n {
                hist[*singles] += 1;
                return;
            }
            for b in 0..k_bins {
                counts[b] += 1;
                match counts[b] {
                    1 => *singles += 1,
                    2 => *singles -= 1,
                    _ => {}
                }
                recurse(depth + 1, n, k_bins, counts, singles, hist);
                match counts[b] {
                    1 => *singles -= 1,
                    2 => *singles += 1,
                    _ => {}
                }
                counts[b] -= 1;
            }
        }
        recurse(0, n, k_bins, &mut counts, &mut singles, &mut hist);
        let total = BigInt::from(k_bins).pow(n as u32);
        hist.into_iter().map(|h| BigRational::new(h, total.clone())).collect()
    }

    #[test]
    fn stratify_small_example() {
        let p = stratify(&[0.1, 0.6, 0.65], 2).unwrap();
        assert_eq!(p.counts, vec![1, 2]);
        assert_eq!(p.k(0), 0);
        assert_eq!(p.k(1), 1);
        assert_eq!(p.k(2), 1);
    }

    #[test]
    fn stratify_degenerate_single_bin() {
        let u = vec![0.05; 7];
        let p = stratify(&u, 10).unwrap();
        assert_eq!(p.k(1), 0);
        assert_eq!(p.k(0), 9);
        assert_eq!(p.k(7), 1);
    }

    #[test]
    fn stratify_rejects_boundary_values() {
        assert!(stratify(&[0.0, 0.5], 4).is_err());
        assert!(stratify(&[0.5, 1.0], 4).is_err());
        assert!(stratify(&[0.5], 1).is_err());
        assert!(stratify(&[], 4).is_err());
    }

    #[test]
    fn stratify_monte_carlo_singleton_mean() {
        // E[K1] = N (1 - 1/K)^{N-1}; for N=50, K=2500 that is 49.0297...
        let n = 50;
        let k_bins = 2500;
        let exact = n as f64 * (1.0 - 1.0 / k_bins as f64).powi(n as i32 - 1);
        let mut rng = seed::rng(17, 400);
        let trials = 10_000;
        let mut mean = 0.0;
        let mut block = vec![0.0; n];
        for _ in 0..trials {
            for v in &mut block {
                *v = rng.sample(rand::distr::Open01);
            }
            mean += stratify(&block, k_bins).unwrap().k(1) as f64;
        }
        mean /= trials as f64;
        assert!((mean - exact).abs() < 0.1, "MC mean {} vs exact {}", mean, exact);
    }

    #[test]
    fn vonmises_two_by_two() {
        let p0 = vonmises_pk(2, 2, 0).unwrap();
        let p1 = vonmises_pk(2, 2, 1).unwrap();
        let p2 = vonmises_pk(2, 2, 2).unwrap();
        assert_eq!(p0, 0.5);
        assert_eq!(p1, 0.0);
        assert_eq!(p2, 0.5);
    }

    #[test]
    fn vonmises_single_sample() {
        for k_bins in [2, 5, 100] {
            assert_eq!(vonmises_pk(1, k_bins, 1).unwrap(), 1.0);
            assert_eq!(vonmises_pk(1, k_bins, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn vonmises_pmf_sums_to_one() {
        for (n, k_bins) in [(5, 10), (10, 7), (50, 2500)] {
            let sum: f64 =
                (0..=n.min(k_bins)).map(|k| vonmises_pk(n, k_bins, k).unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-12, "N={} K={} sum={}", n, k_bins, sum);
        }
    }

    #[test]
    fn vonmises_exact_sum_is_exactly_one() {
        for (n, k_bins) in [(5, 10), (10, 7), (6, 6)] {
            let mut sum = BigRational::zero();
            for k in 0..=n.min(k_bins) {
                sum += vonmises_pk_exact(n, k_bins, k).unwrap();
            }
            assert!(sum.is_one());
        }
    }

    #[test]
    fn vonmises_matches_enumeration() {
        for (n, k_bins) in [(2, 2), (3, 4), (5, 3), (4, 6), (6, 2), (7, 5)] {
            let pmf = enumerate_k1_pmf(n, k_bins);
            for (k, expected) in pmf.iter().enumerate() {
                let got = vonmises_pk_exact(n, k_bins, k).unwrap();
                assert_eq!(&got, expected, "N={} K={} k={}", n, k_bins, k);
            }
        }
    }

    #[test]
    fn vonmises_rejects_invalid_k() {
        assert!(vonmises_pk(2, 2, 3).is_err());
        assert!(vonmises_pk(5, 3, 4).is_err());
    }

    #[test]
    fn threshold_never_rejects_at_small_alpha() {
        // Pr(K1 <= 0) = 0.5 for N=K=2, above any small alpha.
        assert_eq!(threshold(2, 2, 0.05).unwrap(), K1Threshold::NeverReject);
    }

    #[test]
    fn threshold_takes_largest_qualifying_k() {
        // cdf(0) = cdf(1) = 0.5 <= 0.6, cdf(2) = 1 > 0.6.
        assert_eq!(threshold(2, 2, 0.6).unwrap(), K1Threshold::RejectAtOrBelow(1));
    }

    #[test]
    fn threshold_monotone_in_alpha() {
        let mut prev = -1i64;
        for alpha in [0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let t = match threshold(10, 20, alpha).unwrap() {
                K1Threshold::NeverReject => -1,
                K1Threshold::RejectAtOrBelow(k) => k as i64,
            };
            assert!(t >= prev, "threshold dropped from {} to {} at alpha {}", prev, t, alpha);
            prev = t;
        }
    }

    #[test]
    fn k1_size_controlled_under_null() {
        let exact = match threshold(10, 20, 0.05).unwrap() {
            K1Threshold::RejectAtOrBelow(t) => t,
            K1Threshold::NeverReject => return,
        };
        let mut cdf = BigRational::zero();
        for k in 0..=exact {
            cdf += vonmises_pk_exact(10, 20, k).unwrap();
        }
        assert!(cdf <= BigRational::from_float(0.05).unwrap());
    }

    #[test]
    fn k1_test_all_distinct_bins_pass() {
        let spec = TestSpec::k1(8, 64, 0.05).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64 + 0.5) / 8.0 - 1e-6).collect();
        let p = stratify(&u, 64).unwrap();
        assert_eq!(p.k(1), 8);
        let v = k1_test(&p, &spec).unwrap();
        assert_eq!(v.label, Label::AnomalyFree);
        assert_eq!(v.score, 8.0);
    }

    #[test]
    fn k1_test_all_coincident_reject() {
        let spec = TestSpec::k1(8, 64, 0.05).unwrap();
        assert!(spec.threshold.is_some(), "threshold should be achievable here");
        let p = stratify(&[0.5; 8], 64).unwrap();
        let v = k1_test(&p, &spec).unwrap();
        assert_eq!(v.label, Label::Anomaly);
        assert_eq!(v.score, 0.0);
    }

    #[test]
    fn k1_test_rejects_mismatched_n() {
        let spec = TestSpec::k1(8, 64, 0.05).unwrap();
        let p = stratify(&[0.5; 9], 64).unwrap();
        assert!(k1_test(&p, &spec).is_err());
    }

    #[test]
    fn k1_false_positive_rate_within_bound() {
        let n = 50;
        let k_bins = 2500;
        let alpha = 0.05;
        let spec = TestSpec::k1(n, k_bins, alpha).unwrap();
        let trials = 2000;
        let mut rng = seed::rng(23, 401);
        let mut rejects = 0;
        let mut block = vec![0.0; n];
        for _ in 0..trials {
            for v in &mut block {
                *v = rng.sample(rand::distr::Open01);
            }
            let p = stratify(&block, k_bins).unwrap();
            if k1_test(&p, &spec).unwrap().label == Label::Anomaly {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / trials as f64;
        let margin = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate <= alpha + margin, "rate {} margin {}", rate, margin);
    }

    #[test]
    fn k0_test_trivial_cases() {
        let spec = TestSpec::k0(50, 25, 0.05, 20_000, 7).unwrap();
        // All bins occupied: N >= K, K0 = 0.
        let u: Vec<f64> = (0..50).map(|i| ((i % 25) as f64 + 0.5) / 25.0).collect();
        let p = stratify(&u, 25).unwrap();
        assert_eq!(p.k(0), 0);
        assert_eq!(k0_test(&p, &spec).unwrap().label, Label::AnomalyFree);

        let spec_big = TestSpec::k0(50, 2500, 0.05, 20_000, 8).unwrap();
        let p = stratify(&[0.5; 50], 2500).unwrap();
        assert_eq!(p.k(0), 2499);
        assert_eq!(k0_test(&p, &spec_big).unwrap().label, Label::Anomaly);
    }

    #[test]
    fn k0_calibrated_false_positive_rate() {
        let n = 30;
        let k_bins = 900;
        let alpha = 0.05;
        let spec = TestSpec::k0(n, k_bins, alpha, 50_000, 9).unwrap();
        let mut rng = seed::rng(31, 402);
        let trials = 4000;
        let mut rejects = 0;
        let mut block = vec![0.0; n];
        for _ in 0..trials {
            for v in &mut block {
                *v = rng.sample(rand::distr::Open01);
            }
            let p = stratify(&block, k_bins).unwrap();
            if k0_test(&p, &spec).unwrap().label == Label::Anomaly {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / trials as f64;
        let margin = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate <= alpha + margin, "rate {} margin {}", rate, margin);
    }

    #[test]
    fn vc_basis_vector_reproduces_k1_and_k0() {
        let n = 20;
        let k_bins = 400;
        let alpha = 0.1;
        // Same thresholds wired in, so verdicts must agree exactly.
        let k1_spec = TestSpec::k1(n, k_bins, alpha).unwrap();
        let mut e1 = vec![0.0; 3];
        e1[1] = 1.0;
        let mut vc_as_k1 = TestSpec::vc(n, k_bins, alpha, e1, 20_000, 11).unwrap();
        assert!(vc_as_k1.reject_low);
        vc_as_k1.threshold = k1_spec.threshold;
        let k0_spec = TestSpec::k0(n, k_bins, alpha, 20_000, 12).unwrap();
        let mut e0 = vec![0.0; 3];
        e0[0] = 1.0;
        let mut vc_as_k0 = TestSpec::vc(n, k_bins, alpha, e0, 20_000, 13).unwrap();
        assert!(!vc_as_k0.reject_low);
        vc_as_k0.threshold = k0_spec.threshold;

        let mut rng = seed::rng(37, 403);
        let mut block = vec![0.0; n];
        for _ in 0..500 {
            for v in &mut block {
                // Mix of clean and clumped blocks.
                *v = if rng.random::<f64>() < 0.5 {
                    rng.sample(rand::distr::Open01)
                } else {
                    0.4 + 0.01 * rng.random::<f64>()
                };
            }
            let p = stratify(&block, k_bins).unwrap();
            assert_eq!(
                vc_test(&p, &vc_as_k1).unwrap().label,
                k1_test(&p, &k1_spec).unwrap().label
            );
            assert_eq!(
                vc_test(&p, &vc_as_k0).unwrap().label,
                k0_test(&p, &k0_spec).unwrap().label
            );
        }
    }

    #[test]
    fn vc_missing_coefficients_rejected() {
        let spec = TestSpec::k1(10, 100, 0.05).unwrap();
        let p = stratify(&[0.5; 10], 100).unwrap();
        assert!(vc_test(&p, &spec).is_err());
    }

    #[test]
    fn vc_coefficients_sign_structure() {
        let c = fit_vc_coefficients(20, 400, 1, 5).unwrap();
        assert_eq!(c.len(), 2);
        // Orient so c0 >= 0; then more empties must push toward anomaly,
        // i.e. fewer singletons, so c1 <= 0 in that orientation.
        let (c0, c1) = if c[0] >= 0.0 { (c[0], c[1]) } else { (-c[0], -c[1]) };
        assert!(c0 >= 0.0);
        assert!(c1 <= 0.0, "c = {:?}", c);
    }

    #[test]
    fn vc_coefficients_deterministic() {
        let a = fit_vc_coefficients(15, 225, 5, 42).unwrap();
        let b = fit_vc_coefficients(15, 225, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vc_scale_free_after_recalibration() {
        let n = 20;
        let k_bins = 400;
        let coeffs = fit_vc_coefficients(n, k_bins, 4, 42).unwrap();
        let doubled: Vec<f64> = coeffs.iter().map(|c| 2.0 * c).collect();
        let a = TestSpec::vc(n, k_bins, 0.05, coeffs, 20_000, 14).unwrap();
        let b = TestSpec::vc(n, k_bins, 0.05, doubled, 20_000, 14).unwrap();
        let mut rng = seed::rng(41, 404);
        let mut block = vec![0.0; n];
        for _ in 0..300 {
            for v in &mut block {
                *v = if rng.random::<f64>() < 0.7 {
                    rng.sample(rand::distr::Open01)
                } else {
                    0.2 + 0.02 * rng.random::<f64>()
                };
            }
            let p = stratify(&block, k_bins).unwrap();
            assert_eq!(vc_test(&p, &a).unwrap().label, vc_test(&p, &b).unwrap().label);
        }
    }

    #[test]
    fn ocsvm_combiner_memorizes_repeated_vector() {
        // Degenerate training: identical coincidence vectors stay inside.
        let n = 10;
        let k_bins = 100;
        let u: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let feats: Vec<Vec<f64>> =
            (0..20).map(|_| stratify(&u, k_bins).unwrap().feature_vector(5)).collect();
        let model = ocsvm::fit(&feats, 0.2, None).unwrap();
        let spec = TestSpec {
            variant: Variant::Ocsvm,
            n,
            k: k_bins,
            alpha: 0.05,
            threshold: Some(-1e-6),
            reject_low: true,
            r: 5,
            coeffs: None,
            combiner: Some(model),
        };
        let p = stratify(&u, k_bins).unwrap();
        assert_eq!(ocsvm_coincidence_test(&p, &spec).unwrap().label, Label::AnomalyFree);
    }

    #[test]
    fn ocsvm_all_coincident_scores_below_null_median() {
        let n = 20;
        let k_bins = 400;
        let r = 8;
        let combiner = fit_coincidence_combiner(n, k_bins, r, 0.1, 200, 15).unwrap();
        let null = null_mc(
            n,
            k_bins,
            |p| ocsvm::score(&combiner, &p.feature_vector(r)).unwrap(),
            5000,
            16,
        )
        .unwrap();
        let median = null.quantile(0.5);
        let clumped = stratify(&[0.5; 20], k_bins).unwrap();
        let s = ocsvm::score(&combiner, &clumped.feature_vector(r)).unwrap();
        assert!(s < median, "clumped score {} vs null median {}", s, median);
    }

    #[test]
    fn ocsvm_calibrated_false_positive_rate() {
        let n = 20;
        let k_bins = 400;
        let alpha = 0.05;
        let combiner = fit_coincidence_combiner(n, k_bins, 8, 0.1, 200, 17).unwrap();
        let spec = TestSpec::ocsvm(n, k_bins, alpha, combiner, 8, 20_000, 18).unwrap();
        let mut rng = seed::rng(43, 405);
        let trials = 3000;
        let mut rejects = 0;
        let mut block = vec![0.0; n];
        for _ in 0..trials {
            for v in &mut block {
                *v = rng.sample(rand::distr::Open01);
            }
            let p = stratify(&block, k_bins).unwrap();
            if ocsvm_coincidence_test(&p, &spec).unwrap().label == Label::Anomaly {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / trials as f64;
        let margin = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate <= alpha + margin, "rate {} margin {}", rate, margin);
    }

    #[test]
    fn ocsvm_untrained_combiner_rejected() {
        let spec = TestSpec {
            variant: Variant::Ocsvm,
            n: 10,
            k: 100,
            alpha: 0.05,
            threshold: Some(0.0),
            reject_low: true,
            r: 5,
            coeffs: None,
            combiner: None,
        };
        let p = stratify(&[0.5; 10], 100).unwrap();
        assert!(ocsvm_coincidence_test(&p, &spec).is_err());
    }

    #[test]
    fn null_mc_matches_exact_k1_pmf() {
        let n = 10;
        let k_bins = 20;
        let null = null_mc(n, k_bins, |p| p.k(1) as f64, 100_000, 19).unwrap();
        let mut tv = 0.0;
        let pmf = null.empirical_pmf();
        for k in 0..=n {
            let exact = vonmises_pk(n, k_bins, k).unwrap();
            let emp = pmf
                .iter()
                .find(|(v, _)| *v == k as f64)
                .map(|(_, p)| *p)
                .unwrap_or(0.0);
            tv += (exact - emp).abs();
        }
        assert!(tv / 2.0 < 0.02, "total variation {}", tv / 2.0);
    }

    #[test]
    fn null_mc_k0_two_by_two() {
        let null = null_mc(2, 2, |p| p.k(0) as f64, 50_000, 20).unwrap();
        let pmf = null.empirical_pmf();
        for (value, expected) in [(0.0, 0.5), (1.0, 0.5)] {
            let emp = pmf.iter().find(|(v, _)| *v == value).map(|(_, p)| *p).unwrap();
            assert!((emp - expected).abs() < 0.01, "K0={} p={}", value, emp);
        }
    }

    #[test]
    fn null_mc_rejects_few_trials() {
        assert!(null_mc(5, 10, |p| p.k(1) as f64, 10, 0).is_err());
    }

    #[test]
    fn quantiles_monotone() {
        let null = null_mc(10, 100, |p| p.k(1) as f64, 5000, 21).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=20 {
            let q = null.quantile(i as f64 / 20.0);
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = TestSpec::k1(50, 2500, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        spec.save(&path).unwrap();
        let back = TestSpec::load(&path).unwrap();
        assert_eq!(back.variant, Variant::K1);
        assert_eq!(back.n, 50);
        assert_eq!(back.k, 2500);
        assert_eq!(back.threshold, spec.threshold);
        // Field names on the wire follow the documented schema.
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"N\""));
        assert!(text.contains("\"K\""));
        assert!(text.contains("\"variant\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn occupancy_identities(
            values in proptest::collection::vec(0.000001f64..0.999999, 1..60),
            k_bins in 2usize..120,
        ) {
            let p = stratify(&values, k_bins).unwrap();
            let total: u32 = p.counts.iter().sum();
            prop_assert_eq!(total as usize, values.len());
            let bins: u32 = p.coincidences.iter().sum();
            prop_assert_eq!(bins as usize, k_bins);
            let weighted: usize = p
                .coincidences
                .iter()
                .enumerate()
                .map(|(i, &c)| i * c as usize)
                .sum();
            prop_assert_eq!(weighted, values.len());
        }
    }
}
