//! The recursive super-resolution network.
//!
//! Three subnets operate at the (pre-upscaled) output resolution:
//!
//! * **Enet** embeds the luminance image: `conv1 (1→E, 3×3) → conv2 (E→2N, 3×3) → shrink (2N→N, 1×1)`,
//!   each followed by ReLU, producing `f₀`.
//! * **Inet** applies one shared residual block `R` times,
//!   `f_r = f_{r-1} + conv_b(ReLU(conv_a(f_{r-1})))`, and exposes every `f_r`.
//! * **Rnet** maps each `f_r` to an image, `expand (N→2N, 1×1) → ReLU → reconstruct (2N→1, 3×3)`,
//!   optionally adding the network input, and the combine layer (a 1×1 conv over the `R`
//!   stacked images) blends them into the final output.
//!
//! No layer carries a bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::{conv2d_backward_with, conv2d_forward, ConvSpec};
use crate::ops::{relu_in_place, relu_mask_in_place};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input must be [N, 1, H, W], got {0:?}")]
    InputShape(Vec<usize>),
    #[error("parameter set does not match the architecture: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subnet {
    #[serde(rename = "E")]
    Enet,
    #[serde(rename = "I")]
    Inet,
    #[serde(rename = "R")]
    Rnet,
}

impl Subnet {
    pub const ALL: [Subnet; 3] = [Subnet::Enet, Subnet::Inet, Subnet::Rnet];

    pub fn tag(self) -> &'static str {
        match self {
            Subnet::Enet => "E",
            Subnet::Inet => "I",
            Subnet::Rnet => "R",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the first conv, i.e. the feature count entering conv2.
    pub embed_features: usize,
    pub features_wide: usize,
    pub features_narrow: usize,
    pub recurrences: usize,
    pub kernel_size: usize,
    pub scale_factor: usize,
    /// Adds the network input to every per-recurrence reconstruction.
    pub input_skip: bool,
    /// Start `rnet.reconstruct` at zero so that, with `input_skip`, the
    /// untrained network returns its input. Off by default: the layer is
    /// He-initialized like the rest of Rnet.
    pub zero_init_reconstruct: bool,
}

impl Default for ModelConfig {
    /// 192 embedding features; 286/143 wide/narrow puts the total just above
    /// the 936,778 overparametrization threshold (948,392 weights).
    fn default() -> Self {
        ModelConfig {
            embed_features: 192,
            features_wide: 286,
            features_narrow: 143,
            recurrences: 4,
            kernel_size: 3,
            scale_factor: 2,
            input_skip: true,
            zero_init_reconstruct: false,
        }
    }
}

impl ModelConfig {
    /// Gradient-check scale: 8/4 features, two recurrences.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_features: 8,
            features_wide: 8,
            features_narrow: 4,
            recurrences: 2,
            ..Default::default()
        }
    }

    /// Desk-scale training: 32/16 features, four recurrences.
    pub fn desk() -> Self {
        ModelConfig {
            embed_features: 32,
            features_wide: 32,
            features_narrow: 16,
            recurrences: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.features_wide != 2 * self.features_narrow {
            return Err(ModelError::Config(format!(
                "features_wide ({}) must be twice features_narrow ({})",
                self.features_wide, self.features_narrow
            )));
        }
        if self.features_narrow == 0 || self.embed_features == 0 {
            return Err(ModelError::Config("feature counts must be positive".into()));
        }
        if self.recurrences == 0 {
            return Err(ModelError::Config("recurrences must be at least 1".into()));
        }
        if self.kernel_size != 3 && self.kernel_size != 1 {
            return Err(ModelError::Config(format!(
                "kernel_size {} unsupported",
                self.kernel_size
            )));
        }
        if self.scale_factor == 0 {
            return Err(ModelError::Config("scale_factor must be positive".into()));
        }
        Ok(())
    }

    /// Layer table in parameter order.
    pub fn layer_specs(&self) -> Vec<(&'static str, Subnet, ConvSpec)> {
        let k = self.kernel_size;
        let (e, w, n) = (self.embed_features, self.features_wide, self.features_narrow);
        let spec = |i, o, k| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel_size: k,
        };
        vec![
            (layer::CONV1, Subnet::Enet, spec(1, e, k)),
            (layer::CONV2, Subnet::Enet, spec(e, w, k)),
            (layer::SHRINK, Subnet::Enet, spec(w, n, 1)),
            (layer::INET_A, Subnet::Inet, spec(n, n, k)),
            (layer::INET_B, Subnet::Inet, spec(n, n, k)),
            (layer::EXPAND, Subnet::Rnet, spec(n, w, 1)),
            (layer::RECONSTRUCT, Subnet::Rnet, spec(w, 1, k)),
            (layer::COMBINE, Subnet::Rnet, spec(self.recurrences, 1, 1)),
        ]
    }
}

/// Layer names, in parameter order.
pub mod layer {
    pub const CONV1: &str = "enet.conv1";
    pub const CONV2: &str = "enet.conv2";
    pub const SHRINK: &str = "enet.shrink";
    pub const INET_A: &str = "inet.conv_a";
    pub const INET_B: &str = "inet.conv_b";
    pub const EXPAND: &str = "rnet.expand";
    pub const RECONSTRUCT: &str = "rnet.reconstruct";
    pub const COMBINE: &str = "rnet.combine";
}

const CONV1: usize = 0;
const CONV2: usize = 1;
const SHRINK: usize = 2;
const INET_A: usize = 3;
const INET_B: usize = 4;
const EXPAND: usize = 5;
const RECONSTRUCT: usize = 6;
const COMBINE: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub subnet: Subnet,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles parameters from weight tensors, checking them against the config.
    pub fn from_weights(config: ModelConfig, weights: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.layer_specs();
        if weights.len() != specs.len() {
            return Err(ModelError::Params(format!(
                "expected {} weight tensors, got {}",
                specs.len(),
                weights.len()
            )));
        }
        let layers = specs
            .into_iter()
            .zip(weights)
            .map(|((name, subnet, spec), weight)| {
                if weight.shape() != spec.weight_shape() {
                    return Err(ModelError::Params(format!(
                        "{name}: shape {:?}, expected {:?}",
                        weight.shape(),
                        spec.weight_shape()
                    )));
                }
                Ok(Layer {
                    name: name.to_string(),
                    subnet,
                    spec,
                    weight,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams { config, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn subnet_layers(&self, subnet: Subnet) -> impl Iterator<Item = &Layer<T>> {
        self.layers.iter().filter(move |l| l.subnet == subnet)
    }

    pub fn combination_weights(&self) -> &[T] {
        self.layers[COMBINE].weight.data()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    subnet: l.subnet,
                    spec: l.spec,
                    weight: l.weight.cast(),
                })
                .collect(),
        }
    }
}

/// He-normal initialization for non-recursive layers, identity self-connections
/// on `inet.conv_a`, zeros on `inet.conv_b` (and on `rnet.reconstruct` unless
/// disabled), and `1/R` combination weights.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    for (name, _, spec) in config.layer_specs() {
        let shape = spec.weight_shape();
        let w = match name {
            layer::INET_A => {
                let k = spec.kernel_size;
                let center = (k / 2) * k + k / 2;
                let per_in = k * k;
                let per_out = spec.in_channels * per_in;
                let mut t = Tensor::zeros(&shape);
                for o in 0..spec.out_channels {
                    t.data_mut()[o * per_out + o * per_in + center] = T::one();
                }
                t
            }
            layer::INET_B => Tensor::zeros(&shape),
            layer::RECONSTRUCT if config.zero_init_reconstruct => Tensor::zeros(&shape),
            layer::COMBINE => Tensor::full(&shape, T::from_f64_lossy(1.0 / config.recurrences as f64)),
            _ => {
                let fan_in = (spec.in_channels * spec.kernel_size * spec.kernel_size) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
            }
        };
        weights.push(w);
    }
    ModelParams::from_weights(config.clone(), weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// One reconstruction per recurrence.
    pub y_r: Vec<Tensor<T>>,
    pub y_learned: Tensor<T>,
    pub combination_weights: Vec<T>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    /// `f_0 ..= f_R`.
    features: Vec<Tensor<T>>,
    /// ReLU(conv_a(f_{r-1})) for r = 1..=R.
    inet_hidden: Vec<Tensor<T>>,
    /// ReLU(expand(f_r)) for r = 1..=R.
    rnet_hidden: Vec<Tensor<T>>,
}

fn conv_relu<T: Scalar>(x: &Tensor<T>, l: &Layer<T>) -> Result<Tensor<T>, TensorError> {
    let mut y = conv2d_forward(x, &l.weight, &l.spec)?;
    relu_in_place(&mut y);
    Ok(y)
}

fn check_input<T: Scalar>(x: &Tensor<T>) -> Result<(), ModelError> {
    match x.dims4() {
        Ok((_, 1, _, _)) => Ok(()),
        _ => Err(ModelError::InputShape(x.shape().to_vec())),
    }
}

fn reconstruct<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    f: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let e = conv_relu(f, &params.layers[EXPAND])?;
    let l = &params.layers[RECONSTRUCT];
    let mut y = conv2d_forward(&e, &l.weight, &l.spec)?;
    if params.config.input_skip {
        y.axpy(T::one(), x)?;
    }
    Ok((e, y))
}

fn combine<T: Scalar>(weights: &[T], y_r: &[Tensor<T>]) -> Tensor<T> {
    let mut out = Tensor::zeros(y_r[0].shape());
    for (wr, y) in weights.iter().zip(y_r) {
        for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *o = *o + *wr * v;
        }
    }
    out
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    keep: bool,
) -> Result<(ForwardOutput<T>, Option<ForwardCache<T>>), ModelError> {
    check_input(x)?;
    let r_count = params.config.recurrences;
    let h1 = conv_relu(x, &params.layers[CONV1])?;
    let h2 = conv_relu(&h1, &params.layers[CONV2])?;
    let f0 = conv_relu(&h2, &params.layers[SHRINK])?;

    let mut features = vec![f0];
    let mut inet_hidden = Vec::with_capacity(r_count);
    let mut rnet_hidden = Vec::with_capacity(r_count);
    let mut y_r = Vec::with_capacity(r_count);
    let conv_b = &params.layers[INET_B];
    for _ in 0..r_count {
        let prev = features.last().expect("f0 present");
        let hidden = conv_relu(prev, &params.layers[INET_A])?;
        let mut next = conv2d_forward(&hidden, &conv_b.weight, &conv_b.spec)?;
        next.axpy(T::one(), prev)?;
        let (e, y) = reconstruct(params, x, &next)?;
        y_r.push(y);
        if keep {
            inet_hidden.push(hidden);
            rnet_hidden.push(e);
            features.push(next);
        } else {
            features[0] = next;
        }
    }

    let weights = params.combination_weights().to_vec();
    let y_learned = combine(&weights, &y_r);
    y_learned.ensure_finite("forward output")?;
    let out = ForwardOutput {
        y_r,
        y_learned,
        combination_weights: weights,
    };
    let cache = keep.then(|| ForwardCache {
        x: x.clone(),
        h1,
        h2,
        features,
        inet_hidden,
        rnet_hidden,
    });
    Ok((out, cache))
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<ForwardOutput<T>, ModelError> {
    Ok(run(params, x, false)?.0)
}

/// Forward pass that also keeps what [`backward`] needs.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>), ModelError> {
    let (out, cache) = run(params, x, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Inet features `f_0 ..= f_R` for an input batch.
pub fn inet_features<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
    Ok(forward_train(params, x)?.1.features)
}

/// Smallest `|z|` over every ReLU pre-activation `z` in the forward pass:
/// how far the network is from a point where it is not differentiable.
pub fn relu_margin<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<f64, ModelError> {
    let (_, cache) = forward_train(params, x)?;
    let mut margin = f64::INFINITY;
    let mut visit = |input: &Tensor<T>, idx: usize| -> Result<(), TensorError> {
        let l = &params.layers[idx];
        let z = conv2d_forward(input, &l.weight, &l.spec)?;
        margin = z.data().iter().fold(margin, |m, v| m.min(v.as_f64().abs()));
        Ok(())
    };
    visit(&cache.x, CONV1)?;
    visit(&cache.h1, CONV2)?;
    visit(&cache.h2, SHRINK)?;
    for r in 1..cache.features.len() {
        visit(&cache.features[r - 1], INET_A)?;
        visit(&cache.features[r], EXPAND)?;
    }
    Ok(margin)
}

/// Gradients of a scalar loss with respect to every weight tensor, given the
/// loss gradient at the final output and at each per-recurrence output.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    out: &ForwardOutput<T>,
    grad_learned: &Tensor<T>,
    grad_y_r: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>, ModelError> {
    let r_count = params.config.recurrences;
    if grad_y_r.len() != r_count || out.y_r.len() != r_count {
        return Err(ModelError::Params(format!(
            "expected {r_count} per-recurrence gradients, got {}",
            grad_y_r.len()
        )));
    }
    let mut grads: Vec<Tensor<T>> = params.layers.iter().map(|l| Tensor::zeros(l.weight.shape())).collect();
    let weights = params.combination_weights();

    // combine
    for (r, y) in out.y_r.iter().enumerate() {
        grads[COMBINE].data_mut()[r] = y.dot(grad_learned)?;
    }

    // Rnet, per recurrence
    let mut grad_f_from_rnet = Vec::with_capacity(r_count);
    for r in 0..r_count {
        let mut g_y = grad_y_r[r].clone();
        g_y.axpy(weights[r], grad_learned)?;
        let e = &cache.rnet_hidden[r];
        let rec = &params.layers[RECONSTRUCT];
        let (g_e, g_wrec) = conv2d_backward_with(e, &rec.weight, &g_y, &rec.spec, true)?;
        grads[RECONSTRUCT].axpy(T::one(), &g_wrec)?;
        let mut g_e = g_e.expect("input gradient");
        relu_mask_in_place(e, &mut g_e);
        let exp = &params.layers[EXPAND];
        let (g_f, g_wexp) = conv2d_backward_with(&cache.features[r + 1], &exp.weight, &g_e, &exp.spec, true)?;
        grads[EXPAND].axpy(T::one(), &g_wexp)?;
        grad_f_from_rnet.push(g_f.expect("input gradient"));
    }

    // Inet, unrolled backwards through the shared block
    let conv_a = &params.layers[INET_A];
    let conv_b = &params.layers[INET_B];
    let mut g_f = grad_f_from_rnet[r_count - 1].clone();
    for r in (1..=r_count).rev() {
        let hidden = &cache.inet_hidden[r - 1];
        let (g_h, g_wb) = conv2d_backward_with(hidden, &conv_b.weight, &g_f, &conv_b.spec, true)?;
        grads[INET_B].axpy(T::one(), &g_wb)?;
        let mut g_h = g_h.expect("input gradient");
        relu_mask_in_place(hidden, &mut g_h);
        let (g_prev, g_wa) =
            conv2d_backward_with(&cache.features[r - 1], &conv_a.weight, &g_h, &conv_a.spec, true)?;
        grads[INET_A].axpy(T::one(), &g_wa)?;
        g_f.axpy(T::one(), &g_prev.expect("input gradient"))?;
        if r >= 2 {
            g_f.axpy(T::one(), &grad_f_from_rnet[r - 2])?;
        }
    }

    // Enet
    let f0 = &cache.features[0];
    relu_mask_in_place(f0, &mut g_f);
    let shrink = &params.layers[SHRINK];
    let (g_h2, g) = conv2d_backward_with(&cache.h2, &shrink.weight, &g_f, &shrink.spec, true)?;
    grads[SHRINK] = g;
    let mut g_h2 = g_h2.expect("input gradient");
    relu_mask_in_place(&cache.h2, &mut g_h2);
    let conv2 = &params.layers[CONV2];
    let (g_h1, g) = conv2d_backward_with(&cache.h1, &conv2.weight, &g_h2, &conv2.spec, true)?;
    grads[CONV2] = g;
    let mut g_h1 = g_h1.expect("input gradient");
    relu_mask_in_place(&cache.h1, &mut g_h1);
    let conv1 = &params.layers[CONV1];
    let (_, g) = conv2d_backward_with(&cache.x, &conv1.weight, &g_h1, &conv1.spec, false)?;
    grads[CONV1] = g;
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub enet: usize,
    pub inet: usize,
    pub rnet: usize,
    pub per_layer: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn subnet(&self, s: Subnet) -> usize {
        match s {
            Subnet::Enet => self.enet,
            Subnet::Inet => self.inet,
            Subnet::Rnet => self.rnet,
        }
    }
}

pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> ParamCount {
    let per_layer: Vec<(String, usize)> = params.layers.iter().map(|l| (l.name.clone(), l.weight.len())).collect();
    let of = |s: Subnet| params.subnet_layers(s).map(|l| l.weight.len()).sum();
    ParamCount {
        total: per_layer.iter().map(|(_, n)| n).sum(),
        enet: of(Subnet::Enet),
        inet: of(Subnet::Inet),
        rnet: of(Subnet::Rnet),
        per_layer,
    }
}

/// Count computed from the config alone, without materializing weights.
pub fn count_params_for(config: &ModelConfig) -> ParamCount {
    let specs = config.layer_specs();
    let per_layer: Vec<(String, usize)> = specs.iter().map(|(n, _, s)| (n.to_string(), s.weight_count())).collect();
    let of = |sub: Subnet| specs.iter().filter(|(_, s, _)| *s == sub).map(|(_, _, c)| c.weight_count()).sum();
    ParamCount {
        total: per_layer.iter().map(|(_, n)| n).sum(),
        enet: of(Subnet::Enet),
        inet: of(Subnet::Inet),
        rnet: of(Subnet::Rnet),
        per_layer,
    }
}

/// Fractions of weights with `|w| < epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub epsilon: f64,
    pub enet: f64,
    pub inet: f64,
    pub rnet: f64,
    pub enet_rnet: f64,
    pub overall: f64,
}

pub fn sparsity_report<T: Scalar>(params: &ModelParams<T>, epsilon: f64) -> SparsityReport {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let tally = |pred: &dyn Fn(Subnet) -> bool| {
        let (mut small, mut total) = (0usize, 0usize);
        for l in params.layers.iter().filter(|l| pred(l.subnet)) {
            small += l.weight.data().iter().filter(|w| w.as_f64().abs() < epsilon).count();
            total += l.weight.len();
        }
        small as f64 / total as f64
    };
    SparsityReport {
        epsilon,
        enet: tally(&|s| s == Subnet::Enet),
        inet: tally(&|s| s == Subnet::Inet),
        rnet: tally(&|s| s == Subnet::Rnet),
        enet_rnet: tally(&|s| s != Subnet::Inet),
        overall: tally(&|_| true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_input(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, hw, hw], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_config_is_valid_and_overparametrized() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let count = count_params_for(&cfg);
        assert!(count.total > crate::OVERPARAMETRIZATION_THRESHOLD, "{}", count.total);
        assert_eq!(count.total, 948_392);
        assert_eq!(count.enet + count.inet + count.rnet, count.total);
    }

    #[test]
    fn conv2_count_at_full_width() {
        let spec = ConvSpec::new(192, 192, 3).unwrap();
        assert_eq!(spec.weight_count(), 331_776);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.features_wide = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.recurrences = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model::<f32>(&ModelConfig::tiny(), 42).unwrap();
        let b = build_model::<f32>(&ModelConfig::tiny(), 42).unwrap();
        let c = build_model::<f32>(&ModelConfig::tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        let cfg = ModelConfig {
            embed_features: 192,
            features_wide: 192,
            features_narrow: 96,
            ..ModelConfig::default()
        };
        let params = build_model::<f64>(&cfg, 0).unwrap();
        let shrink = params.layer(layer::SHRINK).unwrap();
        assert_eq!(shrink.weight.shape(), &[96, 192, 1, 1]);
        let n = shrink.weight.len() as f64;
        let mean = shrink.weight.sum() / n;
        let std = (shrink.weight.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 192.0).sqrt();
        assert!((expected - 0.1021).abs() < 1e-4);
        assert!((std - expected).abs() / expected < 0.05, "{std} vs {expected}");
    }

    #[test]
    fn inet_conv_a_is_identity_at_init() {
        let params = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
        let a = params.layer(layer::INET_A).unwrap();
        let f = tiny_input(2, 6, 3)
            .reshape(&[2, 1, 6, 6])
            .unwrap();
        let f = Tensor::concat_leading(&[&f, &f, &f, &f]).unwrap().reshape(&[2, 4, 6, 6]).unwrap();
        let y = conv2d_forward(&f, &a.weight, &a.spec).unwrap();
        assert_eq!(y, f);
    }

    #[test]
    fn features_stay_put_at_init() {
        let params = build_model::<f64>(&ModelConfig::tiny(), 2).unwrap();
        let feats = inet_features(&params, &tiny_input(1, 8, 4)).unwrap();
        assert_eq!(feats.len(), 3);
        for f in &feats[1..] {
            assert_eq!(f, &feats[0]);
        }
    }

    #[test]
    fn output_shapes_follow_input() {
        let cfg = ModelConfig {
            recurrences: 4,
            ..ModelConfig::tiny()
        };
        let params = build_model::<f32>(&cfg, 0).unwrap();
        let x: Tensor<f32> = tiny_input(1, 41, 0).cast();
        let out = forward(&params, &x).unwrap();
        assert_eq!(out.y_r.len(), 4);
        for y in &out.y_r {
            assert_eq!(y.shape(), &[1, 1, 41, 41]);
        }
        assert_eq!(out.y_learned.shape(), &[1, 1, 41, 41]);
        assert_eq!(out.combination_weights, vec![0.25; 4]);

        let wrong = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(forward(&params, &wrong), Err(ModelError::InputShape(_))));
    }

    #[test]
    fn learned_output_is_weighted_sum_of_recurrences() {
        let mut params = build_model::<f64>(&ModelConfig::tiny(), 5).unwrap();
        params.layer_mut(layer::COMBINE).unwrap().weight.data_mut().copy_from_slice(&[0.3, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for w in params.layer_mut(layer::INET_B).unwrap().weight.data_mut() {
            *w = rng.random_range(-0.2..0.2);
        }
        let out = forward(&params, &tiny_input(2, 7, 6)).unwrap();
        for i in 0..out.y_learned.len() {
            let expect = 0.3 * out.y_r[0].data()[i] + 0.9 * out.y_r[1].data()[i];
            assert!((out.y_learned.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_regime_is_linear_in_input() {
        // all weights positive: every pre-activation is positive, so the map is linear
        let cfg = ModelConfig {
            input_skip: false,
            ..ModelConfig::tiny()
        };
        let mut params = build_model::<f64>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &mut params.layers {
            for w in l.weight.data_mut() {
                *w = rng.random_range(0.01..0.2);
            }
        }
        let x = tiny_input(1, 6, 10).map(|v| v + 0.1);
        let y1 = forward(&params, &x).unwrap();
        let y2 = forward(&params, &x.scale(2.0)).unwrap();
        for (a, b) in y1.y_learned.data().iter().zip(y2.y_learned.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let c1 = conv2d_forward(&x, &params.layers[0].weight, &params.layers[0].spec).unwrap();
        let c2 = conv2d_forward(&x.scale(2.0), &params.layers[0].weight, &params.layers[0].spec).unwrap();
        assert_eq!(c1.scale(2.0), c2);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = build_model::<f32>(&ModelConfig::desk(), 1).unwrap();
        let x: Tensor<f32> = tiny_input(3, 12, 1).cast();
        assert_eq!(forward(&params, &x).unwrap(), forward(&params, &x).unwrap());
    }

    #[test]
    fn sparsity_at_init() {
        let cfg = ModelConfig::tiny();
        let params = build_model::<f64>(&cfg, 0).unwrap();
        let report = sparsity_report(&params, 1e-12);
        let n = cfg.features_narrow;
        let inet_count = 2 * n * n * 9;
        let expected = (inet_count - n) as f64 / inet_count as f64;
        assert!((report.inet - expected).abs() < 1e-12);
        assert!(report.enet < 1e-3);
        let huge = sparsity_report(&params, 1e9);
        assert_eq!(huge.overall, 1.0);
        assert_eq!(huge.enet_rnet, 1.0);
    }
}
