//! Feed-forward inverter control policy.
//!
//! The network maps a proxy vector of grid conditions to one reactive-power
//! setpoint per controlled inverter. Hidden layers use ReLU; the output layer
//! applies `tanh` and scales each unit by the inverter's reactive headroom
//! `sqrt(max(s_max² - p_g², 0))`, so the setpoint respects the apparent-power
//! limit for every input and every weight vector. The scale uses the solar
//! generation at the controlled buses, which is part of the network input.
//!
//! Gradients are reverse-mode vector-Jacobian products only; full Jacobians
//! over the weights are never materialized because every training update
//! consumes a single adjoint direction.
//!
//! # Checkpoint format
//!
//! A checkpoint is a JSON document with a `schema` tag
//! (`voltpolicy.checkpoint.v1`), the layer dimension list, per-layer weight
//! matrices in row-major order plus bias vectors, and run metadata (seed,
//! formulation, gradient mode, meter mask, epochs trained).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("forward cache is stale: network parameters changed since it was built")]
    StaleCache,
    #[error("gradient contains NaN or Inf; step rejected")]
    NonFiniteGradient,
    #[error("checkpoint is invalid: {0}")]
    BadCheckpoint(String),
}

/// Hidden-layer activation. `Identity` exists for linear-algebra test modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    Relu,
    Identity,
}

/// Output-layer behavior. `Linear` bypasses the scaled tanh for test modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputLayer {
    ScaledTanh,
    Linear,
}

/// Weight initialization scheme. `UnitNormal` draws every weight from
/// N(0, 1); `Scaled` uses N(0, 2/fan_in) instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightInit {
    UnitNormal,
    Scaled,
}

/// One dense layer: `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// The control policy network.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    layers: Vec<Layer>,
    hidden_activation: HiddenActivation,
    output: OutputLayer,
    /// Bumped on every parameter mutation so forward caches can be validated.
    version: u64,
}

/// Standard layer sizing: input `3M` for M metered buses, hidden `3N` and
/// `2N`, output one unit per controlled inverter.
pub fn standard_dims(metered: usize, n: usize, controlled: usize) -> Vec<usize> {
    vec![3 * metered, 3 * n, 2 * n, controlled]
}

/// Cached activations from one forward pass, consumed by [`PolicyNetwork::vjp`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    phi: DVector<f64>,
    /// Pre-activations per layer.
    pre: Vec<DVector<f64>>,
    /// Post-activations per layer; the last entry is the network output.
    post: Vec<DVector<f64>>,
    scale: DVector<f64>,
    tanh_out: DVector<f64>,
    pub q: DVector<f64>,
}

/// Per-layer parameter gradients, same shapes as the network layers.
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub layers: Vec<Layer>,
}

impl PolicyGradient {
    pub fn zeros_like(net: &PolicyNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    biases: DVector::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|x| x.is_finite()) && l.biases.iter().all(|x| x.is_finite())
        })
    }

    /// `self += c * other`, used by linearity checks and gradient assembly.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += c * &b.weights;
            a.biases += c * &b.biases;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights *= c;
            l.biases *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.amax().max(l.biases.amax()))
            .fold(0.0, f64::max)
    }
}

impl PolicyNetwork {
    /// Initializes a network with Gaussian weights of zero mean and unit
    /// standard deviation and zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Self {
        Self::init_with(
            layer_dims,
            seed,
            WeightInit::UnitNormal,
            HiddenActivation::Relu,
            OutputLayer::ScaledTanh,
        )
    }

    pub fn init_with(
        layer_dims: &[usize],
        seed: u64,
        init: WeightInit,
        hidden_activation: HiddenActivation,
        output: OutputLayer,
    ) -> Self {
        assert!(
            layer_dims.len() >= 2 && layer_dims.iter().all(|&d| d > 0),
            "need at least input and output dims, all positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = match init {
                    WeightInit::UnitNormal => 1.0,
                    WeightInit::Scaled => (2.0 / fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).unwrap();
                let mut weights = DMatrix::zeros(fan_out, fan_in);
                for r in 0..fan_out {
                    for c in 0..fan_in {
                        weights[(r, c)] = normal.sample(&mut rng);
                    }
                }
                Layer {
                    weights,
                    biases: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self {
            layers,
            hidden_activation,
            output,
            version: 0,
        }
    }

    pub fn from_layers(
        layers: Vec<Layer>,
        hidden_activation: HiddenActivation,
        output: OutputLayer,
    ) -> Self {
        Self {
            layers,
            hidden_activation,
            output,
            version: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn parameters_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|x| x.is_finite()) && l.biases.iter().all(|x| x.is_finite())
        })
    }

    /// Reactive headroom per controlled inverter: `sqrt(max(s_max² - p_g², 0))`.
    pub fn output_scale(p_g_controlled: &DVector<f64>, s_max: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(s_max.len(), |i, _| {
            (s_max[i] * s_max[i] - p_g_controlled[i] * p_g_controlled[i])
                .max(0.0)
                .sqrt()
        })
    }

    /// Forward pass: returns the setpoint vector and the activation cache.
    pub fn forward(
        &self,
        phi: &DVector<f64>,
        p_g_controlled: &DVector<f64>,
        s_max: &DVector<f64>,
    ) -> Result<ForwardCache, PolicyError> {
        if phi.len() != self.input_dim() {
            return Err(PolicyError::DimensionMismatch(format!(
                "input length {} but network expects {}",
                phi.len(),
                self.input_dim()
            )));
        }
        let c = self.output_dim();
        if p_g_controlled.len() != c || s_max.len() != c {
            return Err(PolicyError::DimensionMismatch(format!(
                "scale inputs length {}/{} but network has {} outputs",
                p_g_controlled.len(),
                s_max.len(),
                c
            )));
        }
        let scale = Self::output_scale(p_g_controlled, s_max);
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut a = phi.clone();
        let mut tanh_out = DVector::zeros(c);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = &layer.weights * &a + &layer.biases;
            a = if l == last {
                match self.output {
                    OutputLayer::ScaledTanh => {
                        tanh_out = z.map(f64::tanh);
                        scale.component_mul(&tanh_out)
                    }
                    OutputLayer::Linear => z.clone(),
                }
            } else {
                match self.hidden_activation {
                    HiddenActivation::Relu => z.map(|x| x.max(0.0)),
                    HiddenActivation::Identity => z.clone(),
                }
            };
            pre.push(z);
            post.push(a.clone());
        }
        let q = post.last().unwrap().clone();
        Ok(ForwardCache {
            version: self.version,
            phi: phi.clone(),
            pre,
            post,
            scale,
            tanh_out,
            q,
        })
    }

    /// Vector-Jacobian product: pulls an adjoint on the output back to
    /// gradients over all weights and biases. The headroom scale is constant
    /// with respect to the weights, so the output-layer local derivative is
    /// `scale · (1 - tanh²(z))`.
    pub fn vjp(
        &self,
        cache: &ForwardCache,
        adjoint: &DVector<f64>,
    ) -> Result<PolicyGradient, PolicyError> {
        if cache.version != self.version {
            return Err(PolicyError::StaleCache);
        }
        if adjoint.len() != self.output_dim() {
            return Err(PolicyError::DimensionMismatch(format!(
                "adjoint length {} but network has {} outputs",
                adjoint.len(),
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grad = PolicyGradient::zeros_like(self);
        let mut delta = match self.output {
            OutputLayer::ScaledTanh => DVector::from_fn(adjoint.len(), |i, _| {
                adjoint[i] * cache.scale[i] * (1.0 - cache.tanh_out[i] * cache.tanh_out[i])
            }),
            OutputLayer::Linear => adjoint.clone(),
        };
        for l in (0..=last).rev() {
            let a_prev = if l == 0 { &cache.phi } else { &cache.post[l - 1] };
            grad.layers[l].weights = &delta * a_prev.transpose();
            grad.layers[l].biases = delta.clone();
            if l > 0 {
                let mut up = self.layers[l].weights.transpose() * &delta;
                if self.hidden_activation == HiddenActivation::Relu {
                    for i in 0..up.len() {
                        if cache.pre[l - 1][i] <= 0.0 {
                            up[i] = 0.0;
                        }
                    }
                }
                delta = up;
            }
        }
        Ok(grad)
    }
}

/// Adam over one flat parameter tensor with bias-corrected moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Step counter, monotone.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One Adam update in place. Rejects non-finite gradients without
    /// touching parameters or moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), PolicyError> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Adam states for every parameter tensor of a policy network.
#[derive(Debug, Clone)]
pub struct PolicyOptimizer {
    weight_states: Vec<AdamState>,
    bias_states: Vec<AdamState>,
}

impl PolicyOptimizer {
    pub fn new(net: &PolicyNetwork, lr: f64) -> Self {
        Self {
            weight_states: net
                .layers()
                .iter()
                .map(|l| AdamState::new(l.weights.len(), lr))
                .collect(),
            bias_states: net
                .layers()
                .iter()
                .map(|l| AdamState::new(l.biases.len(), lr))
                .collect(),
        }
    }

    /// Applies one Adam step over every parameter tensor of the network.
    pub fn step(
        &mut self,
        net: &mut PolicyNetwork,
        grad: &PolicyGradient,
    ) -> Result<(), PolicyError> {
        if !grad.is_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        let layers = net.layers_mut();
        for (l, layer) in layers.iter_mut().enumerate() {
            self.weight_states[l]
                .step(layer.weights.as_mut_slice(), grad.layers[l].weights.as_slice())?;
            self.bias_states[l]
                .step(layer.biases.as_mut_slice(), grad.layers[l].biases.as_slice())?;
        }
        Ok(())
    }
}

/// Serialized model: layer dims, row-major weights, biases, run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
    pub hidden_activation: HiddenActivation,
    pub output: OutputLayer,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major weight entries.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub formulation: String,
    pub gradient_mode: String,
    pub alpha: Option<f64>,
    pub epochs_trained: usize,
    /// Bus ids whose measurements feed the network input.
    pub metered_buses: Vec<usize>,
    /// Input normalization applied during training ("none" for raw p.u.).
    pub input_norm: String,
}

pub const CHECKPOINT_SCHEMA: &str = "voltpolicy.checkpoint.v1";

impl PolicyNetwork {
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            layer_dims: self.layer_dims(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l
                        .weights
                        .row_iter()
                        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                        .collect(),
                    biases: l.biases.iter().copied().collect(),
                })
                .collect(),
            hidden_activation: self.hidden_activation,
            output: self.output,
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(PolicyError::BadCheckpoint(format!(
                "unknown schema tag {:?}",
                ck.schema
            )));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for cl in &ck.layers {
            if cl.weights.len() != cl.rows * cl.cols || cl.biases.len() != cl.rows {
                return Err(PolicyError::BadCheckpoint(
                    "layer shape does not match entry counts".to_string(),
                ));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(cl.rows, cl.cols, &cl.weights),
                biases: DVector::from_vec(cl.biases.clone()),
            });
        }
        if layers.is_empty() {
            return Err(PolicyError::BadCheckpoint("no layers".to_string()));
        }
        Ok(Self::from_layers(layers, ck.hidden_activation, ck.output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(dims: &[usize], seed: u64) -> PolicyNetwork {
        let mut net = PolicyNetwork::init(dims, seed);
        // Keep pre-activations in tanh's responsive range for gradient tests.
        for layer in net.layers_mut() {
            layer.weights *= 0.4;
        }
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = PolicyNetwork::init(&[3, 4, 2], 0);
        for layer in net.layers_mut() {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.3, -0.2, 0.9]),
                &DVector::from_vec(vec![0.5, 0.5]),
                &DVector::from_vec(vec![1.0, 1.0]),
            )
            .unwrap();
        assert_eq!(cache.q, DVector::zeros(2));
    }

    #[test]
    fn saturated_output_hits_headroom_bound() {
        let mut net = PolicyNetwork::init(&[1, 1], 0);
        net.layers_mut()[0].weights[(0, 0)] = 0.0;
        net.layers_mut()[0].biases[0] = 60.0;
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.0]),
                &DVector::from_vec(vec![0.6]),
                &DVector::from_vec(vec![1.0]),
            )
            .unwrap();
        assert_relative_eq!(cache.q[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_headroom_forces_zero_setpoint() {
        let mut net = PolicyNetwork::init(&[1, 1], 0);
        net.layers_mut()[0].biases[0] = 3.0;
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.4]),
                &DVector::from_vec(vec![1.0]),
                &DVector::from_vec(vec![1.0]),
            )
            .unwrap();
        assert_eq!(cache.q[0], 0.0);
        // Generation above the rating clamps the square root at zero.
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.4]),
                &DVector::from_vec(vec![1.2]),
                &DVector::from_vec(vec![1.0]),
            )
            .unwrap();
        assert_eq!(cache.q[0], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = PolicyNetwork::init(&[3, 4, 2], 0);
        let err = net.forward(
            &DVector::from_vec(vec![0.1, 0.2]),
            &DVector::from_vec(vec![0.5, 0.5]),
            &DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(matches!(err, Err(PolicyError::DimensionMismatch(_))));
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let net = small_net(&[3, 4, 2], 1);
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.3, -0.2, 0.9]),
                &DVector::from_vec(vec![0.5, 0.5]),
                &DVector::from_vec(vec![1.0, 1.0]),
            )
            .unwrap();
        let grad = net.vjp(&cache, &DVector::zeros(2)).unwrap();
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = small_net(&[3, 4, 2], 1);
        let cache = net
            .forward(
                &DVector::from_vec(vec![0.3, -0.2, 0.9]),
                &DVector::from_vec(vec![0.5, 0.5]),
                &DVector::from_vec(vec![1.0, 1.0]),
            )
            .unwrap();
        net.layers_mut()[0].weights[(0, 0)] += 0.1;
        assert!(matches!(
            net.vjp(&cache, &DVector::zeros(2)),
            Err(PolicyError::StaleCache)
        ));
    }

    /// Central finite differences of `adjoint' · forward(w)` over every
    /// weight and bias.
    fn fd_gradient(
        net: &PolicyNetwork,
        phi: &DVector<f64>,
        p_g: &DVector<f64>,
        s_max: &DVector<f64>,
        adjoint: &DVector<f64>,
        step: f64,
    ) -> PolicyGradient {
        let eval = |net: &PolicyNetwork| {
            let cache = net.forward(phi, p_g, s_max).unwrap();
            adjoint.dot(&cache.q)
        };
        let mut grad = PolicyGradient::zeros_like(net);
        for l in 0..net.layers().len() {
            for idx in 0..net.layers()[l].weights.len() {
                let mut up = net.clone();
                let mut dn = net.clone();
                up.layers_mut()[l].weights.as_mut_slice()[idx] += step;
                dn.layers_mut()[l].weights.as_mut_slice()[idx] -= step;
                grad.layers[l].weights.as_mut_slice()[idx] =
                    (eval(&up) - eval(&dn)) / (2.0 * step);
            }
            for idx in 0..net.layers()[l].biases.len() {
                let mut up = net.clone();
                let mut dn = net.clone();
                up.layers_mut()[l].biases[idx] += step;
                dn.layers_mut()[l].biases[idx] -= step;
                grad.layers[l].biases[idx] = (eval(&up) - eval(&dn)) / (2.0 * step);
            }
        }
        grad
    }

    fn max_rel_err(a: &PolicyGradient, b: &PolicyGradient) -> f64 {
        let mut worst: f64 = 0.0;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la
                .weights
                .iter()
                .chain(la.biases.iter())
                .zip(lb.weights.iter().chain(lb.biases.iter()))
            {
                let denom = x.abs().max(y.abs()).max(1e-6);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn vjp_matches_finite_differences_on_small_net() {
        let net = small_net(&[3, 4, 2], 7);
        let phi = DVector::from_vec(vec![0.4, -0.3, 0.8]);
        let p_g = DVector::from_vec(vec![0.4, 0.2]);
        let s_max = DVector::from_vec(vec![1.0, 0.8]);
        let adjoint = DVector::from_vec(vec![0.7, -1.3]);
        let cache = net.forward(&phi, &p_g, &s_max).unwrap();
        let analytic = net.vjp(&cache, &adjoint).unwrap();
        let fd = fd_gradient(&net, &phi, &p_g, &s_max, &adjoint, 1e-6);
        assert!(max_rel_err(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn vjp_gradient_check_passes_on_all_sizes() {
        for (dims, seed) in [
            (vec![3usize, 4, 2], 11u64),
            (vec![5, 7, 3], 12),
            (vec![9, 12, 8, 3], 13),
        ] {
            let net = small_net(&dims, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let phi = DVector::from_fn(dims[0], |_, _| rng.random_range(-1.0..1.0));
            let c = *dims.last().unwrap();
            let p_g = DVector::from_fn(c, |_, _| rng.random_range(0.0..0.7));
            let s_max = DVector::from_element(c, 1.0);
            let adjoint = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
            let cache = net.forward(&phi, &p_g, &s_max).unwrap();
            let analytic = net.vjp(&cache, &adjoint).unwrap();
            let fd = fd_gradient(&net, &phi, &p_g, &s_max, &adjoint, 1e-6);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "dims {dims:?}: rel err {err}");
        }
    }

    #[test]
    fn vjp_on_linear_net_matches_matrix_product() {
        // Identity activations and a linear output reduce the network to
        // q = W2 (W1 phi + b1) + b2, whose weight gradients have closed form.
        let w1 = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 0.1, 0.3, 0.8, -0.4]);
        let b1 = DVector::from_vec(vec![0.1, -0.2]);
        let w2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.7]);
        let b2 = DVector::from_vec(vec![0.0, 0.2]);
        let net = PolicyNetwork::from_layers(
            vec![
                Layer {
                    weights: w1.clone(),
                    biases: b1.clone(),
                },
                Layer {
                    weights: w2.clone(),
                    biases: b2,
                },
            ],
            HiddenActivation::Identity,
            OutputLayer::Linear,
        );
        let phi = DVector::from_vec(vec![0.3, -0.6, 0.9]);
        let adjoint = DVector::from_vec(vec![1.1, -0.4]);
        let cache = net
            .forward(&phi, &DVector::zeros(2), &DVector::from_element(2, 1.0))
            .unwrap();
        let grad = net.vjp(&cache, &adjoint).unwrap();

        let h1 = &w1 * &phi + &b1;
        let d2 = adjoint.clone();
        let d1 = w2.transpose() * &d2;
        assert_relative_eq!(grad.layers[1].weights, &d2 * h1.transpose(), epsilon = 1e-14);
        assert_relative_eq!(grad.layers[1].biases, d2, epsilon = 1e-14);
        assert_relative_eq!(grad.layers[0].weights, &d1 * phi.transpose(), epsilon = 1e-14);
        assert_relative_eq!(grad.layers[0].biases, d1, epsilon = 1e-14);
    }

    #[test]
    fn vjp_is_linear_in_the_adjoint() {
        let net = small_net(&[4, 5, 3], 21);
        let phi = DVector::from_vec(vec![0.2, -0.5, 0.7, 0.1]);
        let p_g = DVector::from_vec(vec![0.1, 0.3, 0.5]);
        let s_max = DVector::from_element(3, 1.0);
        let cache = net.forward(&phi, &p_g, &s_max).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let (a1, a2) = (0.35, -1.6);
        let combo = net.vjp(&cache, &(a1 * &e1 + a2 * &e2)).unwrap();
        let mut parts = net.vjp(&cache, &e1).unwrap();
        parts.scale(a1);
        parts.axpy(a2, &net.vjp(&cache, &e2).unwrap());
        let mut diff = combo;
        diff.axpy(-1.0, &parts);
        assert!(diff.max_abs() < 1e-10);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = PolicyNetwork::init(&[6, 9, 6, 2], 42);
        let b = PolicyNetwork::init(&[6, 9, 6, 2], 42);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la, lb);
        }
        for l in a.layers() {
            assert!(l.biases.iter().all(|&x| x == 0.0));
        }
        let c = PolicyNetwork::init(&[6, 9, 6, 2], 43);
        assert_ne!(a.layers()[0].weights, c.layers()[0].weights);
    }

    #[test]
    fn init_statistics_match_unit_gaussian() {
        let net = PolicyNetwork::init(&[100, 100, 1], 3);
        let w = &net.layers()[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(3, 0.001);
        let mut params = [1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        // With zero moments, one step moves by -lr * g / (|g| + eps).
        let mut state = AdamState::new(2, 0.001);
        let mut params = [1.0, -0.5];
        let grads = [0.3, -4.0];
        state.step(&mut params, &grads).unwrap();
        for ((p, p0), g) in params.iter().zip([1.0, -0.5]).zip(grads) {
            let expected = p0 - 0.001 * g / (g.abs() + 1e-8);
            assert_relative_eq!(*p, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_descends_against_constant_gradient() {
        let mut state = AdamState::new(1, 0.01);
        let mut params = [0.0];
        for _ in 0..50 {
            state.step(&mut params, &[2.5]).unwrap();
        }
        assert!(params[0] < -0.1);
        assert_eq!(state.t, 50);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut state = AdamState::new(1, 0.01);
        let mut params = [1.0];
        let err = state.step(&mut params, &[f64::NAN]);
        assert!(matches!(err, Err(PolicyError::NonFiniteGradient)));
        assert_eq!(params, [1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_parameters() {
        let net = PolicyNetwork::init(&[4, 6, 3], 17);
        let ck = net.to_checkpoint(CheckpointMeta {
            seed: 17,
            formulation: "averaged".into(),
            gradient_mode: "analytic".into(),
            alpha: None,
            epochs_trained: 0,
            metered_buses: vec![1, 2, 3],
            input_norm: "none".into(),
        });
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let restored = PolicyNetwork::from_checkpoint(&back).unwrap();
        for (a, b) in net.layers().iter().zip(restored.layers()) {
            assert_eq!(a, b);
        }
    }

    proptest! {
        /// The scaled-tanh output always stays inside the inverter capability
        /// set, for any weights, inputs, and solar generation.
        #[test]
        fn output_respects_apparent_power_limit(seed in 0u64..1000, mag in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = PolicyNetwork::init(&[3, 5, 2], seed);
            for layer in net.layers_mut() {
                layer.weights *= mag;
            }
            let phi = DVector::from_fn(3, |_, _| rng.random_range(-10.0..10.0));
            let s_max = DVector::from_fn(2, |_, _| rng.random_range(0.01..2.0));
            let p_g = DVector::from_fn(2, |_, _| rng.random_range(0.0..2.5));
            let cache = net.forward(&phi, &p_g, &s_max).unwrap();
            for i in 0..2 {
                let headroom = (s_max[i] * s_max[i] - p_g[i] * p_g[i]).max(0.0).sqrt();
                prop_assert!(cache.q[i].abs() <= headroom + 1e-12);
            }
        }
    }
}
