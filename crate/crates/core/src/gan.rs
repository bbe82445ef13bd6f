//! Adversarially trained independent-component generator.
//!
//! The generator maps an M-sample whitened measurement window to N components
//! that a discriminator cannot tell apart from i.i.d. uniform(0,1) vectors.
//! Training follows the 1-Wasserstein objective with a gradient penalty on
//! the discriminator: per discriminator row,
//!
//!   L = f(Ũ) − f(U) + λ(‖∇_Û f(Û)‖₂ − 1)²,  Û = εU + (1−ε)Ũ, Ũ = g(Z),
//!
//! with ε drawn uniform per row, c discriminator batches per generator batch,
//! and Adam updates throughout. Everything is deterministic from the seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, backward, forward, forward_value, gradient_penalty_grads, AdamState, Gradients,
    MlpParams,
};
use crate::occupancy::{self, TestSpec};
use crate::preprocess::{self, EcdfModel, Whitener};
use crate::seed;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Adam learning rate.
    pub alpha: f64,
    /// Gradient-penalty coefficient.
    pub lambda: f64,
    /// Batch size b.
    pub batch: usize,
    /// Discriminator iterations per generator iteration, c.
    pub disc_iters: usize,
    /// Window length M in samples.
    pub window: usize,
    /// Component count N.
    pub components: usize,
    /// Outer training iterations.
    pub iters: usize,
    /// Hidden layer widths, shared by generator and discriminator.
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Validation cadence for the uniformity pass rate, in outer iterations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping early.
    pub patience: usize,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.0001,
            lambda: 0.1,
            batch: 100,
            disc_iters: 10,
            window: 80,
            components: 50,
            iters: 5000,
            hidden: vec![100, 100, 100],
            seed: 0,
            eval_every: 50,
            patience: 10,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch < 1 || self.disc_iters < 1 || self.window < 1 {
            return Err(Error::Config("batch, disc_iters, and window must be >= 1".into()));
        }
        if self.components < 1 || self.components > self.window {
            return Err(Error::Config(format!(
                "need 1 <= N <= M, got N = {}, M = {}",
                self.components, self.window
            )));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Default bin count for the downstream uniformity test: K = N².
    pub fn default_bins(&self) -> usize {
        self.components * self.components
    }
}

/// Trained generator together with the whitener it expects upstream.
#[derive(Debug, Clone)]
pub struct IcaGenerator {
    pub whitener: Whitener,
    pub net: MlpParams,
}

impl IcaGenerator {
    /// Deterministic forward pass of one whitened M-window to N components.
    pub fn transform(&self, window: &[f64]) -> Result<Vec<f64>> {
        forward_value(&self.net, window)
    }
}

/// Fresh generator (M -> hidden -> N) and discriminator (N -> hidden -> 1)
/// nets, reproducible from the seed.
pub fn init(config: &TrainConfig, init_seed: u64) -> Result<(MlpParams, MlpParams)> {
    config.validate()?;
    let mut rng = seed::rng(init_seed, seed::stream::TRAIN);
    let mut gen_widths = vec![config.window];
    gen_widths.extend_from_slice(&config.hidden);
    gen_widths.push(config.components);
    let generator = MlpParams::init(&gen_widths, &mut rng)?;
    let mut disc_widths = vec![config.components];
    disc_widths.extend_from_slice(&config.hidden);
    disc_widths.push(1);
    let discriminator = MlpParams::init(&disc_widths, &mut rng)?;
    Ok((generator, discriminator))
}

/// Discriminator loss and its parameter gradients, averaged over the batch.
/// Gradients touch the discriminator only.
pub fn disc_loss(
    generator: &MlpParams,
    disc: &MlpParams,
    z_batch: &[Vec<f64>],
    u_batch: &[Vec<f64>],
    eps_batch: &[f64],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    if z_batch.is_empty() {
        return Err(Error::Data("empty discriminator batch".into()));
    }
    if z_batch.len() != u_batch.len() || z_batch.len() != eps_batch.len() {
        return Err(Error::Shape(format!(
            "batch pieces disagree: {} windows, {} uniforms, {} mixing draws",
            z_batch.len(),
            u_batch.len(),
            eps_batch.len()
        )));
    }
    if eps_batch.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
        return Err(Error::Data("mixing coefficients must lie in [0,1]".into()));
    }
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(disc);
    for ((z, u), &eps) in z_batch.iter().zip(u_batch).zip(eps_batch) {
        let u_tilde = forward_value(generator, z)?;
        let (f_tilde, cache_tilde) = forward(disc, &u_tilde)?;
        let (f_real, cache_real) = forward(disc, u)?;
        let u_hat: Vec<f64> =
            u.iter().zip(&u_tilde).map(|(a, b)| eps * a + (1.0 - eps) * b).collect();
        let (penalty, pen_grads) = gradient_penalty_grads(disc, &u_hat, lambda)?;
        total += f_tilde[0] - f_real[0] + penalty;
        grads.accumulate(&backward(disc, &cache_tilde, &[1.0])?, 1.0);
        grads.accumulate(&backward(disc, &cache_real, &[-1.0])?, 1.0);
        grads.accumulate(&pen_grads, 1.0);
    }
    let scale = 1.0 / z_batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Generator loss −mean f(g(Z)) and its gradients with respect to the
/// generator only.
pub fn gen_loss(
    generator: &MlpParams,
    disc: &MlpParams,
    z_batch: &[Vec<f64>],
) -> Result<(f64, Gradients)> {
    if z_batch.is_empty() {
        return Err(Error::Data("empty generator batch".into()));
    }
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(generator);
    for z in z_batch {
        let (u_tilde, gen_cache) = forward(generator, z)?;
        let (f, disc_cache) = forward(disc, &u_tilde)?;
        total -= f[0];
        let through = backward(disc, &disc_cache, &[-1.0])?;
        let upstream = through.input.expect("input gradient requested");
        grads.accumulate(&backward(generator, &gen_cache, &upstream)?, 1.0);
    }
    let scale = 1.0 / z_batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Per-iteration training trace plus the final parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean discriminator loss of the c batches in each outer iteration.
    pub disc_loss: Vec<f64>,
    /// Mean Wasserstein gap f(Ũ) − f(U) (penalty excluded) per iteration.
    pub disc_gap: Vec<f64>,
    pub gen_loss: Vec<f64>,
    /// (iteration, validation pass rate) at each evaluation point.
    pub val_pass_rate: Vec<(usize, f64)>,
    pub iterations_run: usize,
    /// Wall-clock seconds; informational only, never serialized.
    pub wall_secs: f64,
}

/// Trained parameter values plus the report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: MlpParams,
    pub discriminator: MlpParams,
    pub report: TrainReport,
}

fn sample_window(residuals: &[f64], window: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let start = rng.random_range(0..=(residuals.len() - window));
    residuals[start..start + window].to_vec()
}

fn sample_uniform_vec(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand::distr::Open01)).collect()
}

/// Fraction of validation windows whose transformed components pass the K1
/// uniformity test at alpha = 0.05, with the per-component ECDFs refitted on
/// the training windows under the current generator.
pub fn validation_pass_rate(
    generator: &MlpParams,
    train_residuals: &[f64],
    val_residuals: &[f64],
    config: &TrainConfig,
    spec: &TestSpec,
) -> Result<f64> {
    let m = config.window;
    let n = config.components;
    let train_windows = train_residuals.len() / m;
    let val_windows = val_residuals.len() / m;
    if train_windows < 2 || val_windows < 1 {
        return Err(Error::TooShort { needed: 2 * m, got: train_residuals.len() });
    }
    let mut reference = vec![Vec::with_capacity(train_windows); n];
    for w in 0..train_windows {
        let out = forward_value(generator, &train_residuals[w * m..(w + 1) * m])?;
        for (component, value) in reference.iter_mut().zip(out) {
            component.push(value);
        }
    }
    let ecdfs: Vec<EcdfModel> =
        reference.iter().map(|r| preprocess::fit_ecdf(r)).collect::<Result<_>>()?;
    let mut passed = 0;
    for w in 0..val_windows {
        let out = forward_value(generator, &val_residuals[w * m..(w + 1) * m])?;
        let u: Vec<f64> =
            out.iter().zip(&ecdfs).map(|(&v, e)| preprocess::apply_ecdf(e, v)).collect();
        let profile = occupancy::stratify(&u, spec.k)?;
        if occupancy::k1_test(&profile, spec)?.label == occupancy::Label::AnomalyFree {
            passed += 1;
        }
    }
    Ok(passed as f64 / val_windows as f64)
}

/// Train on a whitened residual sequence. When validation residuals are given
/// and early stopping is enabled, training halts once the validation pass
/// rate stops improving and the best-validation parameters are returned.
pub fn train(
    train_residuals: &[f64],
    val_residuals: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_residuals.len() < config.window + config.batch {
        return Err(Error::TooShort {
            needed: config.window + config.batch,
            got: train_residuals.len(),
        });
    }
    let started = std::time::Instant::now();
    let (mut generator, mut disc) = init(config, config.seed)?;
    let mut gen_adam = AdamState::new(&generator);
    let mut disc_adam = AdamState::new(&disc);
    let mut rng = seed::rng(config.seed, seed::stream::TRAIN.wrapping_add(0x100));

    let val_spec = match val_residuals {
        Some(_) => Some(TestSpec::k1(config.components, config.default_bins(), 0.05)?),
        None => None,
    };

    let mut report = TrainReport {
        disc_loss: Vec::with_capacity(config.iters),
        disc_gap: Vec::with_capacity(config.iters),
        gen_loss: Vec::with_capacity(config.iters),
        val_pass_rate: Vec::new(),
        iterations_run: 0,
        wall_secs: 0.0,
    };
    let mut best: Option<(f64, MlpParams, MlpParams)> = None;
    let mut stale_evals = 0usize;

    for iter in 0..config.iters {
        let mut iter_disc_loss = 0.0;
        let mut iter_gap = 0.0;
        for _ in 0..config.disc_iters {
            let z_batch: Vec<Vec<f64>> = (0..config.batch)
                .map(|_| sample_window(train_residuals, config.window, &mut rng))
                .collect();
            let u_batch: Vec<Vec<f64>> = (0..config.batch)
                .map(|_| sample_uniform_vec(config.components, &mut rng))
                .collect();
            let eps_batch: Vec<f64> =
                (0..config.batch).map(|_| rng.sample(rand::distr::Open01)).collect();
            let (loss, grads) =
                disc_loss(&generator, &disc, &z_batch, &u_batch, &eps_batch, config.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "discriminator loss diverged at iteration {} (seed {})",
                    iter, config.seed
                )));
            }
            // Wasserstein gap without the penalty part, for diagnostics.
            let gap: f64 = {
                let mut g = 0.0;
                for (z, u) in z_batch.iter().zip(&u_batch) {
                    let u_tilde = forward_value(&generator, z)?;
                    g += forward_value(&disc, &u_tilde)?[0] - forward_value(&disc, u)?[0];
                }
                g / config.batch as f64
            };
            iter_disc_loss += loss;
            iter_gap += gap;
            let (d, s) = adam_step(disc, &grads, disc_adam, config.alpha)?;
            disc = d;
            disc_adam = s;
        }
        let z_batch: Vec<Vec<f64>> = (0..config.batch)
            .map(|_| sample_window(train_residuals, config.window, &mut rng))
            .collect();
        let (g_loss, g_grads) = gen_loss(&generator, &disc, &z_batch)?;
        if !g_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "generator loss diverged at iteration {} (seed {})",
                iter, config.seed
            )));
        }
        let (g, s) = adam_step(generator, &g_grads, gen_adam, config.alpha)?;
        generator = g;
        gen_adam = s;

        report.disc_loss.push(iter_disc_loss / config.disc_iters as f64);
        report.disc_gap.push(iter_gap / config.disc_iters as f64);
        report.gen_loss.push(g_loss);
        report.iterations_run = iter + 1;

        if let (Some(val), Some(spec)) = (val_residuals, &val_spec) {
            let last = iter + 1 == config.iters;
            if (iter + 1) % config.eval_every == 0 || last {
                let rate =
                    validation_pass_rate(&generator, train_residuals, val, config, spec)?;
                report.val_pass_rate.push((iter + 1, rate));
                let improved = best.as_ref().is_none_or(|(b, _, _)| rate > b + 1e-3);
                if improved {
                    best = Some((rate, generator.clone(), disc.clone()));
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                }
                if config.early_stop && stale_evals >= config.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, g, d)) = best {
        generator = g;
        disc = d;
    }
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { generator, discriminator: disc, report })
}
