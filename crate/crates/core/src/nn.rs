//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Networks here always produce a single scalar. Weights are stored row-major
//! per layer with shape `(output_width, input_width)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossError, LossSpec};
use crate::scalar::Real;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("input has width {got}, network expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    LossMismatch(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        }
    }

    fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
            Activation::Softplus => T::one() / (T::one() + (-pre).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            input_width,
            output_width,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub spec: LayerSpec,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// A scalar-output multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr<T>", into = "MlpRepr<T>", bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRepr<T> {
    seed: u64,
    layers: Vec<Dense<T>>,
}

impl<T: Real> TryFrom<MlpRepr<T>> for Mlp<T> {
    type Error = NnError;

    fn try_from(r: MlpRepr<T>) -> Result<Self, NnError> {
        Mlp::from_layers(r.layers, r.seed)
    }
}

impl<T> From<Mlp<T>> for MlpRepr<T> {
    fn from(m: Mlp<T>) -> Self {
        MlpRepr {
            seed: m.seed,
            layers: m.layers,
        }
    }
}

fn check_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
    let Some(last) = specs.last() else {
        return Err(NnError::Architecture("no layers".into()));
    };
    for (k, s) in specs.iter().enumerate() {
        if s.input_width == 0 || s.output_width == 0 {
            return Err(NnError::Architecture(format!("layer {k} has zero width")));
        }
        if k > 0 && specs[k - 1].output_width != s.input_width {
            return Err(NnError::Architecture(format!(
                "layer {} outputs {} values but layer {k} expects {}",
                k - 1,
                specs[k - 1].output_width,
                s.input_width
            )));
        }
    }
    if last.output_width != 1 {
        return Err(NnError::Architecture(format!(
            "final layer must have width 1, got {}",
            last.output_width
        )));
    }
    Ok(())
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights, zero biases, seeded.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        check_specs(&specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let limit = (6.0 / (spec.input_width + spec.output_width) as f64).sqrt();
                let weights = (0..spec.input_width * spec.output_width)
                    .map(|_| T::lit(rng.gen_range(-limit..=limit)))
                    .collect();
                Dense {
                    spec,
                    weights,
                    biases: vec![T::zero(); spec.output_width],
                }
            })
            .collect();
        Ok(Self { layers, seed })
    }

    /// Network with explicit weights, e.g. loaded from disk.
    pub fn from_layers(layers: Vec<Dense<T>>, seed: u64) -> Result<Self, NnError> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        check_specs(&specs)?;
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.spec.input_width * l.spec.output_width
                || l.biases.len() != l.spec.output_width
            {
                return Err(NnError::Architecture(format!(
                    "layer {k} parameter count does not match its widths"
                )));
            }
            if !l.weights.iter().chain(&l.biases).all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: k });
            }
        }
        Ok(Self { layers, seed })
    }

    /// `input → hidden… → 1` with relu hidden layers and the given output
    /// activation.
    pub fn with_hidden(
        input_width: usize,
        hidden: &[usize],
        output: Activation,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut width = input_width;
        for &h in hidden {
            specs.push(LayerSpec::new(width, h, Activation::Relu));
            width = h;
        }
        specs.push(LayerSpec::new(width, 1, output));
        Self::new(specs, seed)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].spec.input_width
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn set_params(&mut self, values: &[T]) -> Result<(), NnError> {
        if values.len() != self.param_count() {
            return Err(NnError::Architecture(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        for (p, &v) in self.params_mut().zip(values) {
            *p = v;
        }
        Ok(())
    }

    fn check_input(&self, x: &[T]) -> Result<(), NnError> {
        if x.len() != self.input_width() {
            return Err(NnError::InputShape {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<T, NnError> {
        let mut trace = Trace::new(self);
        self.forward_traced(x, &mut trace)
    }

    /// Forward pass that keeps the intermediate values needed by
    /// [`Mlp::accumulate_gradients`].
    pub fn forward_traced(&self, x: &[T], trace: &mut Trace<T>) -> Result<T, NnError> {
        self.check_input(x)?;
        trace.input.clear();
        trace.input.extend_from_slice(x);
        for (k, layer) in self.layers.iter().enumerate() {
            let (done, rest) = trace.post.split_at_mut(k);
            let input: &[T] = if k == 0 { &trace.input } else { &done[k - 1] };
            let pre = &mut trace.pre[k];
            let post = &mut rest[0];
            let n_in = layer.spec.input_width;
            for o in 0..layer.spec.output_width {
                let row = &layer.weights[o * n_in..(o + 1) * n_in];
                let s = row
                    .iter()
                    .zip(input)
                    .fold(layer.biases[o], |acc, (&w, &v)| acc + w * v);
                pre[o] = s;
                post[o] = layer.spec.activation.apply(s);
                if !post[o].is_finite() {
                    return Err(NnError::NonFinite { layer: k });
                }
            }
        }
        Ok(trace.post[self.layers.len() - 1][0])
    }

    /// Adds `d_output · ∂output/∂θ` for the traced input into `grads`.
    pub fn accumulate_gradients(
        &self,
        trace: &mut Trace<T>,
        d_output: T,
        grads: &mut Gradients<T>,
    ) -> Result<(), NnError> {
        let last = self.layers.len() - 1;
        let delta = &mut trace.delta_post;
        delta[last][0] = d_output;
        for k in (0..=last).rev() {
            let layer = &self.layers[k];
            let n_in = layer.spec.input_width;
            let input: &[T] = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let (below, here) = delta.split_at_mut(k);
            let d_post = &here[0];
            let g = &mut grads.layers[k];
            if k > 0 {
                below[k - 1].iter_mut().for_each(|v| *v = T::zero());
            }
            for o in 0..layer.spec.output_width {
                let d_pre = d_post[o] * layer.spec.activation.derivative(trace.pre[k][o]);
                if !d_pre.is_finite() {
                    return Err(NnError::NonFinite { layer: k });
                }
                if d_pre == T::zero() {
                    continue;
                }
                g.biases[o] = g.biases[o] + d_pre;
                let row = o * n_in;
                for i in 0..n_in {
                    g.weights[row + i] = g.weights[row + i] + d_pre * input[i];
                }
                if k > 0 {
                    let d_in = &mut below[k - 1];
                    for i in 0..n_in {
                        d_in[i] = d_in[i] + layer.weights[row + i] * d_pre;
                    }
                }
            }
        }
        Ok(())
    }

    /// Sum over the batch of `d_outputs[i] · ∂output(xᵢ)/∂θ`.
    pub fn backward(&self, inputs: &[&[T]], d_outputs: &[T]) -> Result<Gradients<T>, NnError> {
        if inputs.len() != d_outputs.len() {
            return Err(NnError::Config(format!(
                "{} inputs but {} output gradients",
                inputs.len(),
                d_outputs.len()
            )));
        }
        let mut trace = Trace::new(self);
        let mut grads = Gradients::zeros(self);
        for (x, &d) in inputs.iter().zip(d_outputs) {
            if !d.is_finite() {
                return Err(NnError::NonFinite {
                    layer: self.layers.len() - 1,
                });
            }
            self.forward_traced(x, &mut trace)?;
            self.accumulate_gradients(&mut trace, d, &mut grads)?;
        }
        Ok(grads)
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Vec<T>,
    pre: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    delta_post: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    /// Pre-activation values of each layer from the last traced pass.
    pub fn pre_activations(&self) -> &[Vec<T>] {
        &self.pre
    }

    pub fn new(net: &Mlp<T>) -> Self {
        let widths: Vec<Vec<T>> = net
            .layers
            .iter()
            .map(|l| vec![T::zero(); l.spec.output_width])
            .collect();
        Self {
            input: Vec::with_capacity(net.input_width()),
            pre: widths.clone(),
            post: widths.clone(),
            delta_post: widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradients<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![T::zero(); l.weights.len()],
                    biases: vec![T::zero(); l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = T::zero());
            l.biases.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same order as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<T> {
        self.iter().collect()
    }

    fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: usize, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![T::zero(); params],
            v: vec![T::zero(); params],
            step: 0,
        }
    }

    /// Gradient is scaled by `scale` before the update (e.g. `1/batch`).
    pub fn update(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>, scale: T) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g * scale;
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    3
}
fn default_batch_size() -> usize {
    12
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_validation_fraction() -> f64 {
    0.1
}
fn default_improvement_tolerance() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_improvement_tolerance")]
    pub improvement_tolerance: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            validation_fraction: default_validation_fraction(),
            improvement_tolerance: default_improvement_tolerance(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.improvement_tolerance > 0.0) {
            return bad("improvement_tolerance must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }
}

/// Training rows: a row-major feature matrix and one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    width: usize,
    inputs: Vec<T>,
    targets: Vec<T>,
}

impl<T: Real> Samples<T> {
    pub fn new(width: usize, inputs: Vec<T>, targets: Vec<T>) -> Result<Self, NnError> {
        if width == 0 || inputs.len() != width * targets.len() {
            return Err(NnError::Config(format!(
                "{} feature values do not form {} rows of width {width}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            width,
            inputs,
            targets,
        })
    }

    pub fn from_rows(rows: &[Vec<T>], targets: Vec<T>) -> Result<Self, NnError> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(NnError::Config("ragged feature rows".into()));
        }
        Self::new(width, rows.concat(), targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn target(&self, i: usize) -> T {
        self.targets[i]
    }
}

/// Predictor network plus the optional threshold network and its loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct TrainedModel<T> {
    pub h: Mlp<T>,
    pub alpha: Option<Mlp<T>>,
    pub loss: LossSpec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
#[serde(deny_unknown_fields)]
struct ModelFile<T> {
    format_version: u32,
    #[serde(flatten)]
    model: TrainedModel<T>,
}

impl<T: Real + Serialize + for<'a> Deserialize<'a>> TrainedModel<T> {
    pub fn predict(&self, x: &[T]) -> Result<T, NnError> {
        self.h.forward(x)
    }

    pub fn threshold(&self, x: &[T]) -> Result<Option<T>, NnError> {
        self.alpha.as_ref().map(|a| a.forward(x)).transpose()
    }

    /// Versioned, pretty-printed JSON.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let v: serde_json::Value =
            serde_json::from_str(s).map_err(|e| NnError::Format(e.to_string()))?;
        match v.get("format_version").and_then(|x| x.as_u64()) {
            Some(x) if x == MODEL_FORMAT_VERSION as u64 => {}
            Some(x) => return Err(NnError::Format(format!("unsupported format_version {x}"))),
            None => return Err(NnError::Format("missing format_version".into())),
        }
        let file: ModelFile<T> =
            serde_json::from_value(v).map_err(|e| NnError::Format(e.to_string()))?;
        file.model.loss.validate()?;
        Ok(file.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_loss_trace: Vec<f64>,
    pub val_loss_trace: Vec<f64>,
    pub stopped_early: bool,
    /// 1-based epoch whose weights were returned; 0 when no epoch ran.
    pub best_epoch: usize,
    pub train_rows: usize,
    pub validation_rows: usize,
}

struct Pass<'a, T> {
    h: &'a Mlp<T>,
    alpha: Option<&'a Mlp<T>>,
    loss: &'a LossSpec<T>,
}

impl<T: Real> Pass<'_, T> {
    fn mean_loss(&self, data: &Samples<T>, idx: &[usize], th: &mut Trace<T>) -> Result<T, NnError> {
        let mut sum = T::zero();
        for &i in idx {
            let x = data.row(i);
            let z = self.h.forward_traced(x, th)?;
            let a = match self.alpha {
                Some(n) => n.forward(x)?,
                None => T::zero(),
            };
            sum = sum + self.loss.value(z, a, data.target(i))?;
        }
        Ok(sum / T::from_count(idx.len()))
    }
}

/// Mini-batch Adam on the mean loss with early stopping on a held-out split.
///
/// The data is shuffled with `cfg.seed` and the last
/// `ceil(validation_fraction · n)` rows validate. Training stops after
/// `max_epochs` or once the validation loss has failed to beat its best value
/// by more than `improvement_tolerance` for `patience` epochs in a row. The
/// weights of the best validation epoch are returned.
pub fn train<T: Real>(
    h: Mlp<T>,
    alpha: Option<Mlp<T>>,
    data: &Samples<T>,
    loss: LossSpec<T>,
    cfg: &TrainConfig,
) -> Result<(TrainedModel<T>, TrainReport), NnError> {
    cfg.validate()?;
    loss.validate()?;
    match (loss.needs_alpha(), alpha.is_some()) {
        (true, false) => return Err(NnError::LossMismatch("loss requires a threshold network")),
        (false, true) => return Err(NnError::LossMismatch("loss takes no threshold network")),
        _ => {}
    }
    if data.is_empty() {
        return Err(NnError::Config("no training rows".into()));
    }
    for net in std::iter::once(&h).chain(alpha.as_ref()) {
        if net.input_width() != data.width() {
            return Err(NnError::InputShape {
                expected: net.input_width(),
                got: data.width(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * cfg.validation_fraction).ceil() as usize;
    let n_val = n_val.min(data.len());
    let (mut train_idx, val_idx) = {
        let (t, v) = order.split_at(data.len() - n_val);
        (t.to_vec(), v.to_vec())
    };
    if train_idx.is_empty() {
        return Err(NnError::Config("training split is empty".into()));
    }
    if cfg.batch_size > train_idx.len() {
        return Err(NnError::Config(format!(
            "batch_size {} exceeds the {} training rows",
            cfg.batch_size,
            train_idx.len()
        )));
    }

    let lit = |v: f64| T::lit(v);
    let mut h = h;
    let mut alpha = alpha;
    let mut adam_h = Adam::new(
        h.param_count(),
        lit(cfg.learning_rate),
        lit(cfg.adam_beta1),
        lit(cfg.adam_beta2),
        lit(cfg.adam_epsilon),
    );
    let mut adam_a = alpha.as_ref().map(|a| {
        Adam::new(
            a.param_count(),
            lit(cfg.learning_rate),
            lit(cfg.adam_beta1),
            lit(cfg.adam_beta2),
            lit(cfg.adam_epsilon),
        )
    });
    let mut th = Trace::new(&h);
    let mut ta = alpha.as_ref().map(Trace::new);
    let mut gh = Gradients::zeros(&h);
    let mut ga = alpha.as_ref().map(Gradients::zeros);

    let mut report = TrainReport {
        epochs_run: 0,
        train_loss_trace: Vec::new(),
        val_loss_trace: Vec::new(),
        stopped_early: false,
        best_epoch: 0,
        train_rows: train_idx.len(),
        validation_rows: val_idx.len(),
    };
    let mut best: Option<(f64, Mlp<T>, Option<Mlp<T>>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            gh.reset();
            if let Some(g) = ga.as_mut() {
                g.reset();
            }
            for &i in batch {
                let x = data.row(i);
                let z = h.forward_traced(x, &mut th)?;
                let a = match (alpha.as_ref(), ta.as_mut()) {
                    (Some(net), Some(t)) => net.forward_traced(x, t)?,
                    _ => T::zero(),
                };
                let (dz, da) = loss.gradients(z, a, data.target(i));
                h.accumulate_gradients(&mut th, dz, &mut gh)?;
                if let (Some(net), Some(t), Some(g)) = (alpha.as_ref(), ta.as_mut(), ga.as_mut()) {
                    net.accumulate_gradients(t, da, g)?;
                }
            }
            let scale = T::one() / T::from_count(batch.len());
            adam_h.update(&mut h, &gh, scale);
            if let (Some(net), Some(opt), Some(g)) = (alpha.as_mut(), adam_a.as_mut(), ga.as_ref()) {
                opt.update(net, g, scale);
            }
        }

        let pass = Pass {
            h: &h,
            alpha: alpha.as_ref(),
            loss: &loss,
        };
        let train_loss = pass.mean_loss(data, &train_idx, &mut th)?.to_f64_lossy();
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            pass.mean_loss(data, &val_idx, &mut th)?.to_f64_lossy()
        };
        report.epochs_run = epoch;
        report.train_loss_trace.push(train_loss);
        report.val_loss_trace.push(val_loss);

        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_loss < b - cfg.improvement_tolerance,
        };
        if improved {
            best = Some((val_loss, h.clone(), alpha.clone()));
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience && epoch < cfg.max_epochs {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some((_, bh, ba)) = best {
        h = bh;
        alpha = ba;
    }
    Ok((TrainedModel { h, alpha, loss }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Direction, MetaInfo};

    fn layer(w: Vec<f64>, b: Vec<f64>, i: usize, o: usize, act: Activation) -> Dense<f64> {
        Dense {
            spec: LayerSpec::new(i, o, act),
            weights: w,
            biases: b,
        }
    }

    #[test]
    fn forward_examples() {
        let zero = Mlp::from_layers(
            vec![
                layer(vec![0.0; 6], vec![0.0; 2], 3, 2, Activation::Relu),
                layer(vec![0.0; 2], vec![0.0], 2, 1, Activation::Identity),
            ],
            0,
        )
        .unwrap();
        assert_eq!(zero.forward(&[1.0, -4.0, 9.0]).unwrap(), 0.0);

        let id = Mlp::from_layers(vec![layer(vec![1.0], vec![0.0], 1, 1, Activation::Identity)], 0).unwrap();
        assert_eq!(id.forward(&[3.0]).unwrap(), 3.0);

        let relu = Mlp::from_layers(vec![layer(vec![1.0, -1.0], vec![0.5], 2, 1, Activation::Relu)], 0).unwrap();
        assert_eq!(relu.forward(&[0.2, 0.9]).unwrap(), 0.0);
        assert!((relu.forward(&[0.9, 0.2]).unwrap() - 1.2).abs() < 1e-15);

        assert_eq!(
            relu.forward(&[1.0]),
            Err(NnError::InputShape { expected: 2, got: 1 })
        );
    }

    #[test]
    fn softplus_is_stable() {
        assert!((Activation::Softplus.apply(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Softplus.apply(1000.0f64), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0f64) >= 0.0);
    }

    #[test]
    fn architecture_validation() {
        assert!(Mlp::<f64>::new(vec![], 0).is_err());
        assert!(Mlp::<f64>::new(vec![LayerSpec::new(2, 3, Activation::Relu)], 0).is_err());
        assert!(Mlp::<f64>::new(
            vec![
                LayerSpec::new(2, 3, Activation::Relu),
                LayerSpec::new(4, 1, Activation::Relu)
            ],
            0
        )
        .is_err());
        assert!(Mlp::<f64>::new(vec![LayerSpec::new(0, 1, Activation::Relu)], 0).is_err());
        let bad = layer(vec![f64::NAN], vec![0.0], 1, 1, Activation::Identity);
        assert_eq!(Mlp::from_layers(vec![bad], 0), Err(NnError::NonFinite { layer: 0 }));
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = Mlp::<f64>::with_hidden(10, &[4, 4], Activation::Identity, 42).unwrap();
        let b = Mlp::<f64>::with_hidden(10, &[4, 4], Activation::Identity, 42).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 14.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= limit));
        let c = Mlp::<f64>::with_hidden(10, &[4, 4], Activation::Identity, 43).unwrap();
        assert_ne!(a, c);
        let f32net = Mlp::<f32>::with_hidden(3, &[4], Activation::Relu, 1).unwrap();
        assert!(f32net.forward(&[1.0, 2.0, 3.0]).unwrap().is_finite());
    }

    #[test]
    fn backward_examples() {
        // d/dw (w·1 − 0)² = 2w
        let net = Mlp::from_layers(vec![layer(vec![0.3], vec![0.0], 1, 1, Activation::Identity)], 0).unwrap();
        let z = net.forward(&[1.0]).unwrap();
        let (dz, _) = LossSpec::Squared.gradients(z, 0.0, 0.0);
        let g = net.backward(&[&[1.0]], &[dz]).unwrap();
        assert!((g.layers[0].weights[0] - 0.6).abs() < 1e-15);

        let net = Mlp::<f64>::with_hidden(3, &[4, 4], Activation::Identity, 5).unwrap();
        let g = net.backward(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.0]], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        assert!(matches!(
            net.backward(&[&[0.1, 0.2, 0.3]], &[f64::NAN]),
            Err(NnError::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        for seed in 0..20u64 {
            let mut net = Mlp::<f64>::with_hidden(3, &[4, 4], Activation::Softplus, seed).unwrap();
            let random: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            net.set_params(&random).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut trace = Trace::new(&net);
            net.forward_traced(&x, &mut trace).unwrap();
            if trace.pre.iter().flatten().any(|p| p.abs() < 1e-3) {
                continue;
            }
            let g = net.backward(&[&x], &[1.0]).unwrap().flatten();
            let params = net.params();
            for (j, &analytic) in g.iter().enumerate() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let mut p = params.clone();
                p[j] += 1e-5;
                plus.set_params(&p).unwrap();
                p[j] -= 2e-5;
                minus.set_params(&p).unwrap();
                let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / 2e-5;
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!((analytic - fd).abs() / denom < 1e-4, "param {j}: {analytic} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    fn constant_data(c: f64, n: usize) -> Samples<f64> {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![(i % 3 == 0) as u8 as f64, (i % 3 == 1) as u8 as f64, (i % 3 == 2) as u8 as f64])
            .collect();
        Samples::from_rows(&rows, vec![c; n]).unwrap()
    }

    #[test]
    fn fits_a_constant() {
        let data = constant_data(0.35, 240);
        let h = Mlp::with_hidden(3, &[4, 4], Activation::Identity, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let (model, report) = train(h, None, &data, LossSpec::Squared, &cfg).unwrap();
        assert_eq!(report.train_loss_trace.len(), report.epochs_run);
        for x in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            assert!((model.predict(&x).unwrap() - 0.35).abs() <= 0.05);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let data = constant_data(1.0, 50);
        let h = Mlp::with_hidden(3, &[4], Activation::Identity, 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (model, report) = train(h.clone(), None, &data, LossSpec::Squared, &cfg).unwrap();
        assert_eq!(model.h, h);
        assert_eq!(report.epochs_run, 0);
        assert!(!report.stopped_early);
        assert!(report.val_loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = constant_data(0.5, 120);
        let meta = MetaInfo::new(2.0, Direction::Up).unwrap();
        let run = || {
            let h = Mlp::with_hidden(3, &[4, 4], Activation::Identity, 11).unwrap();
            let a = Mlp::with_hidden(3, &[4, 4], Activation::Relu, 12).unwrap();
            train(h, Some(a), &data, LossSpec::dru(meta).unwrap(), &TrainConfig::default()).unwrap()
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn early_stopping_bookkeeping() {
        let data = constant_data(0.5, 120);
        let cfg = TrainConfig {
            max_epochs: 50,
            patience: 2,
            improvement_tolerance: 0.5,
            ..TrainConfig::default()
        };
        let h = Mlp::with_hidden(3, &[4], Activation::Identity, 2).unwrap();
        let (_, report) = train(h, None, &data, LossSpec::Squared, &cfg).unwrap();
        // a 0.5 tolerance cannot be beaten twice on a loss this small
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run, 3);
        assert_eq!(report.best_epoch, 1);
        assert!(report.epochs_run <= cfg.max_epochs);
    }

    #[test]
    fn training_errors() {
        let data = constant_data(0.5, 20);
        let h = || Mlp::with_hidden(3, &[4], Activation::Identity, 2).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(h(), None, &data, LossSpec::ru(2.0).unwrap(), &cfg),
            Err(NnError::LossMismatch(_))
        ));
        assert!(matches!(
            train(h(), Some(h()), &data, LossSpec::Squared, &cfg),
            Err(NnError::LossMismatch(_))
        ));
        let one = constant_data(0.5, 1);
        assert!(matches!(
            train(h(), None, &one, LossSpec::Squared, &cfg),
            Err(NnError::Config(_))
        ));
        let big_batch = TrainConfig {
            batch_size: 100,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(h(), None, &data, LossSpec::Squared, &big_batch),
            Err(NnError::Config(_))
        ));
        let bad_vf = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(h(), None, &data, LossSpec::Squared, &bad_vf).is_err());
        let wide = Mlp::with_hidden(5, &[4], Activation::Identity, 2).unwrap();
        assert!(matches!(
            train(wide, None, &data, LossSpec::Squared, &cfg),
            Err(NnError::InputShape { .. })
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let h = Mlp::with_hidden(3, &[4], Activation::Identity, 2).unwrap();
        let a = Mlp::with_hidden(3, &[4], Activation::Relu, 3).unwrap();
        let model = TrainedModel {
            h,
            alpha: Some(a),
            loss: LossSpec::ru(1.5).unwrap(),
        };
        let s = model.to_json();
        assert!(s.contains("\"format_version\": 1"));
        assert_eq!(TrainedModel::<f64>::from_json(&s).unwrap(), model);
        let wrong = s.replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(matches!(TrainedModel::<f64>::from_json(&wrong), Err(NnError::Format(_))));
        let broken = s.replacen("\"input_width\": 3", "\"input_width\": 2", 1);
        assert!(TrainedModel::<f64>::from_json(&broken).is_err());
    }
}
