//! Feed-forward network numerics: forward pass, reverse-mode gradients,
//! input gradients, gradient-penalty differentiation, and Adam updates.
//!
//! Everything is 64-bit and purely functional: parameter values are immutable
//! once built and updates return fresh values, so any of these operations can
//! run concurrently on shared params.
//!
//! The penalty term needs the gradient of an input-gradient norm with respect
//! to the parameters. Rather than a general higher-order tape, the input
//! gradient is treated as an explicit network with the relu masks held
//! constant, which is exact almost everywhere for relu.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative at z; relu takes the 0 subgradient at the kink.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out×in weight matrix.
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Parameters of a feed-forward network. Consecutive layer dimensions chain;
/// hidden layers are relu and the final layer is linear.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Fresh network over the given widths (input, hidden..., output) with
    /// uniform init on ±√(6/(in+out)) and zero biases.
    pub fn init(widths: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("need at least input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weights = Mat::zeros(fan_out, fan_in);
            for w in weights.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
            let activation = if l + 1 == widths.len() - 1 {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(Layer { weights, bias: vec![0.0; fan_out], activation });
        }
        Ok(MlpParams { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    /// Structural checks: dimension chaining and bias lengths.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.rows() {
                return Err(Error::Shape(format!(
                    "layer {}: bias length {} does not match {} rows",
                    i,
                    layer.bias.len(),
                    layer.weights.rows()
                )));
            }
            if i > 0 && self.layers[i - 1].weights.rows() != layer.weights.cols() {
                return Err(Error::Shape(format!(
                    "layer {}: input width {} does not chain with previous output {}",
                    i,
                    layer.weights.cols(),
                    self.layers[i - 1].weights.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = CheckpointJson {
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    weights: l.weights.to_nested(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let json: CheckpointJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut layers = Vec::with_capacity(json.layers.len());
        for l in json.layers {
            layers.push(Layer {
                weights: Mat::from_rows(l.weights)?,
                bias: l.bias,
                activation: l.activation,
            });
        }
        let params = MlpParams { layers };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

/// Every pre- and post-activation of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// pre[l] = W_l a_{l-1} + b_l
    pub pre: Vec<Vec<f64>>,
    /// post[l] = act(pre[l])
    pub post: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn matches(&self, params: &MlpParams) -> bool {
        self.pre.len() == params.layers.len()
            && self.input.len() == params.input_width()
            && self
                .pre
                .iter()
                .zip(&params.layers)
                .all(|(z, l)| z.len() == l.weights.rows())
    }
}

/// Per-parameter partials, shapes mirroring `MlpParams`, plus the gradient
/// with respect to the network input when requested.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub input: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Mat,
    pub d_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weights: Mat::zeros(l.weights.rows(), l.weights.cols()),
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: None,
        }
    }

    /// self += scale · other (parameter partials only).
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.d_weights.data_mut().iter_mut().zip(b.d_weights.data()) {
                *x += scale * y;
            }
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.d_weights.data_mut() {
                *x *= s;
            }
            for x in &mut l.d_bias {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.d_weights.data().iter().all(|x| x.is_finite())
                && l.d_bias.iter().all(|x| x.is_finite())
        })
    }
}

/// Forward pass; the cache holds everything backprop needs.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != params.input_width() {
        return Err(Error::Shape(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.input_width()
        )));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut a: Vec<f64> = x.to_vec();
    for layer in &params.layers {
        let mut z = layer.weights.matvec(&a);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        a = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre.push(z);
        post.push(a.clone());
    }
    let cache = ForwardCache { input: x.to_vec(), pre, post };
    Ok((a, cache))
}

/// Forward pass without retaining a cache, for evaluation-only call sites.
pub fn forward_value(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_width() {
        return Err(Error::Shape(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.input_width()
        )));
    }
    let mut a: Vec<f64> = x.to_vec();
    for layer in &params.layers {
        let mut z = layer.weights.matvec(&a);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi = layer.activation.apply(*zi + bi);
        }
        a = z;
    }
    Ok(a)
}

/// Backward deltas for the given upstream vector: deltas[l] = ∂(uᵀy)/∂pre[l].
fn compute_deltas(params: &MlpParams, cache: &ForwardCache, upstream: &[f64]) -> Vec<Vec<f64>> {
    let n_layers = params.layers.len();
    let mut deltas = vec![Vec::new(); n_layers];
    let last = n_layers - 1;
    deltas[last] = cache.pre[last]
        .iter()
        .zip(upstream)
        .map(|(&z, &u)| u * params.layers[last].activation.slope(z))
        .collect();
    for l in (0..last).rev() {
        let back = params.layers[l + 1].weights.tr_matvec(&deltas[l + 1]);
        deltas[l] = cache.pre[l]
            .iter()
            .zip(&back)
            .map(|(&z, &g)| g * params.layers[l].activation.slope(z))
            .collect();
    }
    deltas
}

/// Reverse-mode gradients of upstreamᵀ·output with respect to every
/// parameter and to the input.
pub fn backward(params: &MlpParams, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
    if !cache.matches(params) {
        return Err(Error::Shape("cache does not match network shapes".into()));
    }
    if upstream.len() != params.output_width() {
        return Err(Error::Shape(format!(
            "upstream has {} entries, network output is {}",
            upstream.len(),
            params.output_width()
        )));
    }
    let deltas = compute_deltas(params, cache, upstream);
    let mut grads = Gradients::zeros_like(params);
    for (l, layer_grads) in grads.layers.iter_mut().enumerate() {
        let below: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        layer_grads.d_weights.add_outer(&deltas[l], below, 1.0);
        layer_grads.d_bias.copy_from_slice(&deltas[l]);
    }
    grads.input = Some(params.layers[0].weights.tr_matvec(&deltas[0]));
    Ok(grads)
}

/// Gradient-penalty value λ(‖∇_x f(x̂)‖₂ − 1)² for a scalar-output network,
/// with its gradients with respect to the network parameters.
///
/// When the input gradient vanishes, the norm's gradient is taken as 0 and
/// the penalty is λ.
pub fn gradient_penalty_grads(
    disc: &MlpParams,
    x_hat: &[f64],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    if disc.output_width() != 1 {
        return Err(Error::Shape(format!(
            "gradient penalty needs a scalar-output network, output is {}",
            disc.output_width()
        )));
    }
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradient penalty input is not finite".into()));
    }
    let (_, cache) = forward(disc, x_hat)?;
    let deltas = compute_deltas(disc, &cache, &[1.0]);
    let g = disc.layers[0].weights.tr_matvec(&deltas[0]);
    let n = norm2(&g);
    let penalty = lambda * (n - 1.0) * (n - 1.0);
    let mut grads = Gradients::zeros_like(disc);
    if n == 0.0 || lambda == 0.0 {
        return Ok((penalty, grads));
    }

    // d penalty / d g = v; then d(vᵀg)/dW_l = δ_l q_{l-1}ᵀ with masks frozen,
    // where q is v pushed forward through the bias-free masked layers.
    // Biases only enter through the frozen masks, so their partials are 0.
    let coeff = 2.0 * lambda * (n - 1.0) / n;
    let v: Vec<f64> = g.iter().map(|&gi| coeff * gi).collect();

    let mut q = v;
    for (l, layer_grads) in grads.layers.iter_mut().enumerate() {
        layer_grads.d_weights.add_outer(&deltas[l], &q, 1.0);
        if l + 1 < disc.layers.len() {
            let wq = disc.layers[l].weights.matvec(&q);
            q = cache.pre[l]
                .iter()
                .zip(&wq)
                .map(|(&z, &w)| w * disc.layers[l].activation.slope(z))
                .collect();
        }
    }
    Ok((penalty, grads))
}

/// Adam accumulators; shapes mirror the parameter shapes exactly.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<LayerGrads>,
    pub v: Vec<LayerGrads>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zero = || Gradients::zeros_like(params).layers;
        AdamState { m: zero(), v: zero(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction. Consumes and returns the values so
/// training replaces parameters instead of mutating shared state. A
/// non-finite gradient rejects the update and leaves both inputs unchanged.
pub fn adam_step(
    params: MlpParams,
    grads: &Gradients,
    state: AdamState,
    alpha: f64,
) -> Result<(MlpParams, AdamState)> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("learning rate must be >= 0, got {}", alpha)));
    }
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.d_weights.rows() != p.weights.rows() || g.d_weights.cols() != p.weights.cols())
    {
        return Err(Error::Shape("gradient shapes do not mirror parameter shapes".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient: update rejected".into()));
    }
    let mut params = params;
    let mut state = state;
    state.step += 1;
    let knobs = AdamKnobs {
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        alpha,
        bc1: 1.0 - state.beta1.powi(state.step as i32),
        bc2: 1.0 - state.beta2.powi(state.step as i32),
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        update_slice(
            layer.weights.data_mut(),
            grads.layers[l].d_weights.data(),
            state.m[l].d_weights.data_mut(),
            state.v[l].d_weights.data_mut(),
            &knobs,
        );
        update_slice(
            &mut layer.bias,
            &grads.layers[l].d_bias,
            &mut state.m[l].d_bias,
            &mut state.v[l].d_bias,
            &knobs,
        );
    }
    Ok((params, state))
}

struct AdamKnobs {
    beta1: f64,
    beta2: f64,
    eps: f64,
    alpha: f64,
    bc1: f64,
    bc2: f64,
}

fn update_slice(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], k: &AdamKnobs) {
    for i in 0..p.len() {
        m[i] = k.beta1 * m[i] + (1.0 - k.beta1) * g[i];
        v[i] = k.beta2 * v[i] + (1.0 - k.beta2) * g[i] * g[i];
        let m_hat = m[i] / k.bc1;
        let v_hat = v[i] / k.bc2;
        p[i] -= k.alpha * m_hat / (v_hat.sqrt() + k.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::seed;
    use rand::Rng;

    fn single_layer(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> MlpParams {
        MlpParams {
            layers: vec![Layer { weights: Mat::from_rows(weights).unwrap(), bias, activation }],
        }
    }

    fn random_net(widths: &[usize], master: u64) -> MlpParams {
        let mut rng = seed::rng(master, 99);
        MlpParams::init(widths, &mut rng).unwrap()
    }

    /// Input chosen so no relu pre-activation sits within `margin` of zero,
    /// keeping finite differences away from kinks.
    fn kink_free_input(params: &MlpParams, margin: f64, master: u64) -> Vec<f64> {
        let mut rng = seed::rng(master, 100);
        loop {
            let x: Vec<f64> =
                (0..params.input_width()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, cache) = forward(params, &x).unwrap();
            let clear = params
                .layers
                .iter()
                .zip(&cache.pre)
                .all(|(l, z)| {
                    l.activation == Activation::Linear || z.iter().all(|v| v.abs() > margin)
                });
            if clear {
                return x;
            }
        }
    }

    #[test]
    fn forward_zero_params_gives_zeros() {
        let mut net = random_net(&[3, 4, 2], 1);
        for l in &mut net.layers {
            l.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let (y, _) = forward(&net, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_identity_linear() {
        let net = single_layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Linear,
        );
        let (y, _) = forward(&net, &[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn forward_identity_relu_clips() {
        let net = single_layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Relu,
        );
        let (y, _) = forward(&net, &[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = random_net(&[3, 2], 2);
        assert!(forward(&net, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(&[5, 7, 3], 3);
        let x = [0.3, -0.1, 2.0, 0.9, -4.0];
        let (a, _) = forward(&net, &x).unwrap();
        let (b, _) = forward(&net, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_linear_input_gradient_is_weight_row() {
        let w = vec![vec![0.7, -1.3, 2.0]];
        let net = single_layer(w.clone(), vec![0.0], Activation::Linear);
        let (_, cache) = forward(&net, &[1.0, 2.0, 3.0]).unwrap();
        let grads = backward(&net, &cache, &[1.0]).unwrap();
        assert_eq!(grads.input.unwrap(), w[0]);
    }

    #[test]
    fn backward_zero_upstream_zero_grads() {
        let net = random_net(&[4, 3, 2], 4);
        let (_, cache) = forward(&net, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let grads = backward(&net, &cache, &[0.0, 0.0]).unwrap();
        assert!(grads.layers.iter().all(|l| l
            .d_weights
            .data()
            .iter()
            .chain(&l.d_bias)
            .all(|&g| g == 0.0)));
        assert!(grads.input.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let net_a = random_net(&[4, 3, 2], 5);
        let net_b = random_net(&[4, 5, 2], 6);
        let (_, cache) = forward(&net_a, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(backward(&net_b, &cache, &[1.0, 1.0]).is_err());
    }

    /// Central finite difference of f at one parameter entry.
    fn fd_param(
        params: &MlpParams,
        layer: usize,
        entry: usize,
        on_bias: bool,
        h: f64,
        f: &dyn Fn(&MlpParams) -> f64,
    ) -> f64 {
        let mut plus = params.clone();
        let mut minus = params.clone();
        if on_bias {
            plus.layers[layer].bias[entry] += h;
            minus.layers[layer].bias[entry] -= h;
        } else {
            plus.layers[layer].weights.data_mut()[entry] += h;
            minus.layers[layer].weights.data_mut()[entry] -= h;
        }
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn assert_close_rel(analytic: f64, numeric: f64, rel: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() <= rel * scale,
            "analytic {} vs numeric {}",
            analytic,
            numeric
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        for master in 0..10u64 {
            let net = random_net(&[4, 6, 3], 40 + master);
            let x = kink_free_input(&net, 1e-3, master);
            let mut rng = seed::rng(master, 101);
            let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = forward(&net, &x).unwrap();
            let grads = backward(&net, &cache, &upstream).unwrap();
            let loss = |p: &MlpParams| {
                let (y, _) = forward(p, &x).unwrap();
                dot(&y, &upstream)
            };
            for l in 0..net.layers.len() {
                for e in 0..net.layers[l].weights.data().len() {
                    let num = fd_param(&net, l, e, false, 1e-5, &loss);
                    assert_close_rel(grads.layers[l].d_weights.data()[e], num, 1e-4);
                }
                for e in 0..net.layers[l].bias.len() {
                    let num = fd_param(&net, l, e, true, 1e-5, &loss);
                    assert_close_rel(grads.layers[l].d_bias[e], num, 1e-4);
                }
            }
            // Input gradient against finite differences too.
            let gi = grads.input.unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += 1e-5;
                xm[i] -= 1e-5;
                let (yp, _) = forward(&net, &xp).unwrap();
                let (ym, _) = forward(&net, &xm).unwrap();
                let num = (dot(&yp, &upstream) - dot(&ym, &upstream)) / 2e-5;
                assert_close_rel(gi[i], num, 1e-4);
            }
        }
    }

    #[test]
    fn penalty_zero_on_unit_gradient() {
        // f = wᵀx with ‖w‖ = 1: the input gradient is w everywhere.
        let net = single_layer(vec![vec![0.6, 0.8]], vec![0.3], Activation::Linear);
        let (penalty, grads) = gradient_penalty_grads(&net, &[1.0, -2.0], 0.1).unwrap();
        assert!(penalty.abs() < 1e-15);
        assert!(grads.layers[0].d_weights.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn penalty_hand_value() {
        let net = single_layer(vec![vec![2.0, 0.0]], vec![0.0], Activation::Linear);
        let (penalty, _) = gradient_penalty_grads(&net, &[0.5, 0.5], 0.1).unwrap();
        assert!((penalty - 0.1).abs() < 1e-15);
    }

    #[test]
    fn penalty_zero_gradient_subgradient_choice() {
        let net = single_layer(vec![vec![0.0, 0.0]], vec![1.0], Activation::Linear);
        let (penalty, grads) = gradient_penalty_grads(&net, &[1.0, 1.0], 0.25).unwrap();
        assert_eq!(penalty, 0.25);
        assert!(grads.layers[0].d_weights.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn penalty_rejects_vector_output() {
        let net = random_net(&[3, 4, 2], 7);
        assert!(gradient_penalty_grads(&net, &[0.1, 0.2, 0.3], 0.1).is_err());
    }

    #[test]
    fn penalty_matches_finite_differences() {
        let lambda = 0.1;
        for master in 0..10u64 {
            let net = random_net(&[5, 6, 1], 70 + master);
            let x = kink_free_input(&net, 1e-3, 200 + master);
            let (_, grads) = gradient_penalty_grads(&net, &x, lambda).unwrap();
            let pen = |p: &MlpParams| gradient_penalty_grads(p, &x, lambda).unwrap().0;
            for l in 0..net.layers.len() {
                for e in 0..net.layers[l].weights.data().len() {
                    let num = fd_param(&net, l, e, false, 1e-6, &pen);
                    assert_close_rel(grads.layers[l].d_weights.data()[e], num, 1e-3);
                }
                for e in 0..net.layers[l].bias.len() {
                    let num = fd_param(&net, l, e, true, 1e-6, &pen);
                    assert_close_rel(grads.layers[l].d_bias[e], num, 1e-3);
                }
            }
        }
    }

    #[test]
    fn penalty_nonnegative_and_zero_iff_unit_norm() {
        let mut rng = seed::rng(11, 102);
        for _ in 0..50 {
            let net = random_net(&[4, 5, 1], rng.random());
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (penalty, _) = gradient_penalty_grads(&net, &x, 0.1).unwrap();
            assert!(penalty >= 0.0);
            let (_, cache) = forward(&net, &x).unwrap();
            let g = backward(&net, &cache, &[1.0]).unwrap().input.unwrap();
            if (norm2(&g) - 1.0).abs() > 1e-12 {
                assert!(penalty > 0.0);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let net = single_layer(vec![vec![1.0]], vec![0.0], Activation::Linear);
        let state = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].d_weights.data_mut()[0] = 1.0;
        let alpha = 1e-4;
        let (updated, state) = adam_step(net, &grads, state, alpha).unwrap();
        // First step: m̂/√v̂ = 1 up to eps, so the move is ≈ -alpha.
        let moved = updated.layers[0].weights.data()[0] - 1.0;
        assert!((moved + alpha).abs() < alpha * 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let net = random_net(&[3, 2], 8);
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        let (after, _) = adam_step(net, &grads, AdamState::new(&before), 0.01).unwrap();
        for (a, b) in after.layers.iter().zip(&before.layers) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn adam_two_constant_steps_recursion() {
        let g = 3.0;
        let net = single_layer(vec![vec![0.5]], vec![0.0], Activation::Linear);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].d_weights.data_mut()[0] = g;
        let state = AdamState::new(&net);
        let beta1 = state.beta1;
        let (net, state) = adam_step(net, &grads, state, 1e-3).unwrap();
        let (_, state) = adam_step(net, &grads, state, 1e-3).unwrap();
        assert_eq!(state.step, 2);
        let m = state.m[0].d_weights.data()[0];
        assert!((m - (1.0 - beta1 * beta1) * g).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let net = single_layer(vec![vec![1.0]], vec![0.0], Activation::Linear);
        let state = AdamState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].d_weights.data_mut()[0] = f64::NAN;
        assert!(adam_step(net, &grads, state, 1e-3).is_err());
    }

    #[test]
    fn adam_zero_learning_rate_is_identity() {
        let mut rng = seed::rng(9, 103);
        for _ in 0..20 {
            let net = random_net(&[3, 4, 2], rng.random());
            let before = net.clone();
            let (_, cache) = forward(&net, &[0.5, -0.5, 1.0]).unwrap();
            let grads = backward(&net, &cache, &[1.0, -1.0]).unwrap();
            let (after, _) = adam_step(net, &grads, AdamState::new(&before), 0.0).unwrap();
            for (a, b) in after.layers.iter().zip(&before.layers) {
                assert_eq!(a.weights.data(), b.weights.data());
                assert_eq!(a.bias, b.bias);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_value_exact() {
        let net = random_net(&[4, 5, 2], 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save_checkpoint(&path).unwrap();
        let back = MlpParams::load_checkpoint(&path).unwrap();
        assert_eq!(net.layers.len(), back.layers.len());
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.activation, b.activation);
        }
    }
}
