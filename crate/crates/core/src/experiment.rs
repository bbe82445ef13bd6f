//! End-to-end experiment orchestration: simulate a grid, corrupt the anomaly
//! split, train the per-channel transforms, score every requested detector on
//! bit-identical test blocks, and emit ROC reports.
//!
//! Per-channel verdicts aggregate by OR: the system score for a block is the
//! most anomalous channel score (minimum for reject-low statistics, maximum
//! for reject-high ones), which sweeps to exactly the OR rule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, RocCurve, SplitSpec, Splits};
use crate::gan::{self, TrainConfig};
use crate::gridsim::{self, AttackPlan, Gmm, GridModel, StateDynamics};
use crate::nn::MlpParams;
use crate::ocsvm::{self, OcSvmModel};
use crate::preprocess::{self, EcdfModel, Whitener};
use crate::seed;
use crate::series::MeasurementSeries;

pub const DETECTORS: &[&str] =
    &["icagan_k1", "icagan_k0", "icagan_vc", "icagan_ocsvm", "jx", "ocsvm_raw"];

/// Full experiment description; serializable as the CLI config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Grid fixture path, or builtin:bus4 / builtin:bus30.
    pub grid: String,
    /// 1 = natural mixture corruption, 2 = unobservable column-space attack.
    pub case: u8,
    pub detectors: Vec<String>,
    pub seed: u64,
    pub alpha: f64,
    pub split: SplitSpec,
    pub whitener_order: usize,
    pub components: usize,
    /// Bin count; defaults to components².
    pub k_bins: Option<usize>,
    /// Highest coincidence order for the VC and combiner variants.
    pub r: usize,
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub batch: usize,
    pub disc_iters: usize,
    pub gan_alpha: f64,
    pub lambda: f64,
    pub early_stop: bool,
    pub eval_every: usize,
    pub patience: usize,
    /// Case-1 channels; defaults to an even spread of 4 (small systems) or 6.
    pub corrupt_channels: Option<Vec<usize>>,
    /// Mixture offset and std in units of the channel noise std.
    pub gmm_offset_sigmas: f64,
    pub gmm_std_sigmas: f64,
    /// Case-2 state-space direction; defaults to all-ones scaled to unit
    /// peak channel deflection.
    pub attack_delta: Option<Vec<f64>>,
    pub ocsvm_nu: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Desk-scale defaults: 250 training blocks of 80 samples per channel
        // and a reduced 80->32->32->50 generator keep a full run in minutes.
        ExperimentConfig {
            grid: "builtin:bus4".into(),
            case: 1,
            detectors: vec!["icagan_k1".into(), "jx".into()],
            seed: 1,
            alpha: 0.05,
            split: SplitSpec {
                block_len: 80,
                train: 250,
                val: 100,
                test_clean: 200,
                test_anomaly: 200,
            },
            whitener_order: 4,
            components: 50,
            k_bins: None,
            r: 15,
            hidden: vec![32, 32],
            iters: 600,
            batch: 100,
            disc_iters: 10,
            gan_alpha: 0.0001,
            lambda: 0.1,
            early_stop: true,
            eval_every: 50,
            patience: 10,
            corrupt_channels: None,
            gmm_offset_sigmas: 5.0,
            gmm_std_sigmas: 1.0,
            attack_delta: None,
            ocsvm_nu: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(Error::Config("experiment needs at least one detector".into()));
        }
        for d in &self.detectors {
            if !DETECTORS.contains(&d.as_str()) {
                return Err(Error::Config(format!(
                    "unknown detector {:?} (available: {})",
                    d,
                    DETECTORS.join(", ")
                )));
            }
        }
        if self.case != 1 && self.case != 2 {
            return Err(Error::Config(format!("case must be 1 or 2, got {}", self.case)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.components > self.split.block_len {
            return Err(Error::Config(format!(
                "components ({}) cannot exceed the block length ({})",
                self.components, self.split.block_len
            )));
        }
        if self.split.test_clean == 0 || self.split.test_anomaly == 0 {
            return Err(Error::Config("both test splits need at least one block".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.k_bins.unwrap_or(self.components * self.components)
    }

    pub fn load_grid(&self) -> Result<GridModel> {
        match self.grid.as_str() {
            "builtin:bus4" => Ok(GridModel::bus4()),
            "builtin:bus30" => Ok(GridModel::bus30()),
            path => GridModel::load(Path::new(path)),
        }
    }

    fn train_config(&self, channel: usize) -> TrainConfig {
        TrainConfig {
            alpha: self.gan_alpha,
            lambda: self.lambda,
            batch: self.batch,
            disc_iters: self.disc_iters,
            window: self.split.block_len,
            components: self.components,
            iters: self.iters,
            hidden: self.hidden.clone(),
            seed: self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(channel as u64 + 1)),
            eval_every: self.eval_every,
            patience: self.patience,
            early_stop: self.early_stop,
        }
    }

    fn needs_gan(&self) -> bool {
        self.detectors.iter().any(|d| d.starts_with("icagan"))
    }
}

/// Per-channel trained artifacts.
pub struct ChannelPipeline {
    pub whitener: Whitener,
    pub generator: Option<MlpParams>,
    pub discriminator: Option<MlpParams>,
    pub ecdfs: Option<Vec<EcdfModel>>,
    pub raw_ocsvm: Option<OcSvmModel>,
    pub combiner: Option<OcSvmModel>,
}

/// Everything trained on the anomaly-free portion of one simulated series.
/// Build once, then evaluate any corruption case against it.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub model: GridModel,
    pub clean: MeasurementSeries,
    pub splits: Splits,
    pub channels: Vec<ChannelPipeline>,
    pub residual_clean: Vec<Vec<f64>>,
    pub vc_coeffs: Option<Vec<f64>>,
}

/// Scores for one detector over the shared test blocks.
#[derive(Debug, Clone)]
pub struct DetectorScores {
    pub clean: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub reject_low: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorSummary {
    pub auc: f64,
    pub tpr_at_005: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSummary {
    pub detectors: BTreeMap<String, DetectorSummary>,
}

impl Pipeline {
    pub fn build(config: ExperimentConfig) -> Result<Pipeline> {
        config.validate()?;
        let model = config.load_grid()?;
        let t_len = config.split.required_len(config.whitener_order);
        let mut sim_rng = seed::rng(config.seed, seed::stream::SIMULATE);
        let clean = gridsim::simulate(&model, t_len, &StateDynamics::default(), &mut sim_rng)?;
        let splits = eval::split(&clean, &config.split, config.whitener_order)?;

        let b = splits.block_len;
        let train_res_len = config.split.train * b;
        let val_res_len = config.split.val * b;

        let mut channels = Vec::with_capacity(model.measurements());
        let mut residual_clean = Vec::with_capacity(model.measurements());
        for c in 0..model.measurements() {
            let raw = clean.channel(c);
            let train_raw = &raw[..config.whitener_order + train_res_len];
            let whitener = preprocess::fit_whitener(train_raw, config.whitener_order)?;
            let res = preprocess::whiten(&whitener, raw)?;

            let mut channel = ChannelPipeline {
                whitener,
                generator: None,
                discriminator: None,
                ecdfs: None,
                raw_ocsvm: None,
                combiner: None,
            };
            if config.needs_gan() {
                let tc = config.train_config(c);
                let train_slice = &res[..train_res_len];
                let val_slice = &res[train_res_len..train_res_len + val_res_len];
                let outcome = gan::train(train_slice, Some(val_slice), &tc)?;
                // Per-component ECDF references from the training blocks.
                let mut reference = vec![Vec::with_capacity(config.split.train); config.components];
                for &start in &splits.train {
                    let out = crate::nn::forward_value(
                        &outcome.generator,
                        &res[start..start + b],
                    )?;
                    for (r, v) in reference.iter_mut().zip(out) {
                        r.push(v);
                    }
                }
                let ecdfs: Vec<EcdfModel> =
                    reference.iter().map(|r| preprocess::fit_ecdf(r)).collect::<Result<_>>()?;
                if config.detectors.iter().any(|d| d == "icagan_ocsvm") {
                    let feats: Vec<Vec<f64>> = splits
                        .val
                        .iter()
                        .map(|&start| {
                            uniform_features(
                                &outcome.generator,
                                &ecdfs,
                                &res[start..start + b],
                                config.bins(),
                                config.r,
                            )
                        })
                        .collect::<Result<_>>()?;
                    channel.combiner = Some(ocsvm::fit(&feats, config.ocsvm_nu, None)?);
                }
                channel.generator = Some(outcome.generator);
                channel.discriminator = Some(outcome.discriminator);
                channel.ecdfs = Some(ecdfs);
            }
            if config.detectors.iter().any(|d| d == "ocsvm_raw") {
                let windows: Vec<Vec<f64>> = splits
                    .train
                    .iter()
                    .map(|&start| {
                        let from = splits.lead_in + start;
                        raw[from..from + b].to_vec()
                    })
                    .collect();
                channel.raw_ocsvm = Some(ocsvm::fit(&windows, config.ocsvm_nu, None)?);
            }
            channels.push(channel);
            residual_clean.push(res);
        }

        let vc_coeffs = if config.detectors.iter().any(|d| d == "icagan_vc") {
            Some(crate::occupancy::fit_vc_coefficients(
                config.components,
                config.bins(),
                config.r.min(config.components),
                config.seed,
            )?)
        } else {
            None
        };

        Ok(Pipeline { config, model, clean, splits, channels, residual_clean, vc_coeffs })
    }

    /// Corrupted copy of the clean series for the configured case, touching
    /// only the anomaly test region.
    pub fn corrupted_series(&self) -> Result<MeasurementSeries> {
        let (start, end) = self.splits.anomaly_raw_range();
        let len = end - start;
        match self.config.case {
            1 => {
                let channels = match &self.config.corrupt_channels {
                    Some(c) => c.clone(),
                    None => default_corrupt_channels(self.model.measurements()),
                };
                let mut rng = seed::rng(self.config.seed, seed::stream::INJECT);
                let mut out = self.clean.clone();
                for &c in &channels {
                    if c >= self.model.measurements() {
                        return Err(Error::Config(format!(
                            "corrupt channel {} out of range",
                            c
                        )));
                    }
                    let s = self.model.sigma[c];
                    let gmm = Gmm::symmetric_pair(
                        self.config.gmm_offset_sigmas * s,
                        self.config.gmm_std_sigmas * s,
                    );
                    out = gridsim::inject_bad(&out, &[c], &gmm, start, len, &mut rng)?;
                }
                Ok(out)
            }
            2 => {
                let delta = match &self.config.attack_delta {
                    Some(d) => d.clone(),
                    None => {
                        let ones = vec![1.0; self.model.states()];
                        let reach = self.model.h.matvec(&ones);
                        let peak =
                            reach.iter().map(|v| v.abs()).fold(0.0_f64, f64::max).max(1e-12);
                        ones.iter().map(|v| v / peak).collect()
                    }
                };
                let sigma_bar =
                    self.model.sigma.iter().sum::<f64>() / self.model.sigma.len() as f64;
                let plan = AttackPlan {
                    delta,
                    magnitude: Gmm::symmetric_pair(
                        self.config.gmm_offset_sigmas * sigma_bar,
                        self.config.gmm_std_sigmas * sigma_bar,
                    ),
                };
                let mut rng = seed::rng(self.config.seed, seed::stream::ATTACK);
                gridsim::unobservable_attack(&self.model, &plan, &self.clean, start, len, &mut rng)
            }
            other => Err(Error::Config(format!("case must be 1 or 2, got {}", other))),
        }
    }

    /// Score every configured detector on the shared clean/anomaly blocks.
    pub fn evaluate(&self) -> Result<BTreeMap<String, DetectorScores>> {
        let corrupted = self.corrupted_series()?;
        let b = self.splits.block_len;
        let m = self.model.measurements();

        // Whiten the corrupted series (same whiteners; only the anomaly
        // region differs from the clean residuals).
        let residual_corr: Vec<Vec<f64>> = (0..m)
            .map(|c| preprocess::whiten(&self.channels[c].whitener, corrupted.channel(c)))
            .collect::<Result<_>>()?;

        // Coincidence features per channel per test block.
        let features = if self.config.needs_gan() {
            let mut clean_feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
            let mut anomaly_feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
            for c in 0..m {
                let channel = &self.channels[c];
                let (gen, ecdfs) = (
                    channel.generator.as_ref().expect("generator trained"),
                    channel.ecdfs.as_ref().expect("ecdfs fitted"),
                );
                let feats = |res: &[f64], starts: &[usize]| -> Result<Vec<Vec<f64>>> {
                    starts
                        .iter()
                        .map(|&s| {
                            uniform_features(
                                gen,
                                ecdfs,
                                &res[s..s + b],
                                self.config.bins(),
                                self.config.r,
                            )
                        })
                        .collect()
                };
                clean_feats.push(feats(&self.residual_clean[c], &self.splits.test_clean)?);
                anomaly_feats.push(feats(&residual_corr[c], &self.splits.test_anomaly)?);
            }
            Some((clean_feats, anomaly_feats))
        } else {
            None
        };

        let mut out = BTreeMap::new();
        for name in &self.config.detectors {
            let scores = match name.as_str() {
                "icagan_k1" => {
                    let (cf, af) = features.as_ref().unwrap();
                    DetectorScores {
                        clean: aggregate(cf, |f| f[1], true),
                        anomaly: aggregate(af, |f| f[1], true),
                        reject_low: true,
                    }
                }
                "icagan_k0" => {
                    let (cf, af) = features.as_ref().unwrap();
                    DetectorScores {
                        clean: aggregate(cf, |f| f[0], false),
                        anomaly: aggregate(af, |f| f[0], false),
                        reject_low: false,
                    }
                }
                "icagan_vc" => {
                    let (cf, af) = features.as_ref().unwrap();
                    let coeffs = self.vc_coeffs.as_ref().expect("VC coefficients fitted");
                    let score =
                        |f: &Vec<f64>| f.iter().zip(coeffs).map(|(a, c)| a * c).sum::<f64>();
                    DetectorScores {
                        clean: aggregate(cf, &score, true),
                        anomaly: aggregate(af, &score, true),
                        reject_low: true,
                    }
                }
                "icagan_ocsvm" => {
                    let (cf, af) = features.as_ref().unwrap();
                    let mut clean = Vec::new();
                    let mut anomaly = Vec::new();
                    for (feats, sink) in [(cf, &mut clean), (af, &mut anomaly)] {
                        for block in 0..feats[0].len() {
                            let mut worst = f64::INFINITY;
                            for c in 0..m {
                                let combiner =
                                    self.channels[c].combiner.as_ref().expect("combiner");
                                worst =
                                    worst.min(ocsvm::score(combiner, &feats[c][block])?);
                            }
                            sink.push(worst);
                        }
                    }
                    DetectorScores { clean, anomaly, reject_low: true }
                }
                "jx" => {
                    let score_blocks = |series: &MeasurementSeries,
                                        starts: &[usize]|
                     -> Result<Vec<f64>> {
                        starts
                            .iter()
                            .map(|&s| {
                                let from = self.splits.lead_in + s;
                                let mut total = 0.0;
                                for t in from..from + b {
                                    let z = series.sample(t);
                                    let x = gridsim::wls(&self.model, &z)?;
                                    total += gridsim::jx(&self.model, &z, &x);
                                }
                                Ok(total)
                            })
                            .collect()
                    };
                    DetectorScores {
                        clean: score_blocks(&self.clean, &self.splits.test_clean)?,
                        anomaly: score_blocks(&corrupted, &self.splits.test_anomaly)?,
                        reject_low: false,
                    }
                }
                "ocsvm_raw" => {
                    let score_blocks = |series: &MeasurementSeries,
                                        starts: &[usize]|
                     -> Result<Vec<f64>> {
                        starts
                            .iter()
                            .map(|&s| {
                                let from = self.splits.lead_in + s;
                                let mut worst = f64::INFINITY;
                                for c in 0..m {
                                    let model =
                                        self.channels[c].raw_ocsvm.as_ref().expect("ocsvm");
                                    let window = &series.channel(c)[from..from + b];
                                    worst = worst.min(ocsvm::score(model, window)?);
                                }
                                Ok(worst)
                            })
                            .collect()
                    };
                    DetectorScores {
                        clean: score_blocks(&self.clean, &self.splits.test_clean)?,
                        anomaly: score_blocks(&corrupted, &self.splits.test_anomaly)?,
                        reject_low: true,
                    }
                }
                other => return Err(Error::Config(format!("unknown detector {:?}", other))),
            };
            out.insert(name.clone(), scores);
        }
        Ok(out)
    }

    pub fn roc_curves(&self) -> Result<BTreeMap<String, RocCurve>> {
        let scores = self.evaluate()?;
        let mut out = BTreeMap::new();
        for (name, s) in scores {
            out.insert(name, eval::roc(&s.clean, &s.anomaly, s.reject_low)?);
        }
        Ok(out)
    }
}

/// Evenly spread default corruption support: 4 channels on small systems,
/// 6 on larger ones.
pub fn default_corrupt_channels(m: usize) -> Vec<usize> {
    let count = if m <= 20 { 4.min(m) } else { 6 };
    (0..count).map(|i| i * m / count).collect()
}

fn uniform_features(
    generator: &MlpParams,
    ecdfs: &[EcdfModel],
    residual_window: &[f64],
    k_bins: usize,
    r: usize,
) -> Result<Vec<f64>> {
    let out = crate::nn::forward_value(generator, residual_window)?;
    let u: Vec<f64> =
        out.iter().zip(ecdfs).map(|(&v, e)| preprocess::apply_ecdf(e, v)).collect();
    Ok(crate::occupancy::stratify(&u, k_bins)?.feature_vector(r))
}

/// Per-block OR aggregation: keep the most anomalous channel score.
fn aggregate(
    features: &[Vec<Vec<f64>>],
    score: impl Fn(&Vec<f64>) -> f64,
    reject_low: bool,
) -> Vec<f64> {
    let blocks = features[0].len();
    (0..blocks)
        .map(|blk| {
            let per_channel = features.iter().map(|ch| score(&ch[blk]));
            if reject_low {
                per_channel.fold(f64::INFINITY, f64::min)
            } else {
                per_channel.fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// Run the experiment and write summary.json, roc_<detector>.csv, and the
/// resolved config into `out_dir`. Returns the summary.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let pipeline = Pipeline::build(config.clone())
        .map_err(|e| stage_error("pipeline build", config.seed, e))?;
    let curves =
        pipeline.roc_curves().map_err(|e| stage_error("detector scoring", config.seed, e))?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config_resolved.json"),
        serde_json::to_string_pretty(&pipeline.config)?,
    )?;
    let mut summary = ExperimentSummary { detectors: BTreeMap::new() };
    for (name, curve) in &curves {
        let mut csv = std::io::BufWriter::new(std::fs::File::create(
            out_dir.join(format!("roc_{}.csv", name)),
        )?);
        writeln!(csv, "threshold,fpr,tpr")?;
        for p in &curve.points {
            writeln!(csv, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        csv.flush()?;
        let op = eval::operating_point(curve, 0.05);
        summary.detectors.insert(
            name.clone(),
            DetectorSummary { auc: curve.auc, tpr_at_005: op.tpr, threshold: op.threshold },
        );
    }
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn stage_error(stage: &str, seed_value: u64, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => {
            Error::Numeric(format!("stage {} (seed {}): {}", stage, seed_value, msg))
        }
        other => Error::Data(format!("stage {} (seed {}): {}", stage, seed_value, other)),
    }
}
