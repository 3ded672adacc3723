//! Small fully connected networks: forward pass, mean-squared error,
//! reverse-mode gradients, SGD/Adam and finite-difference checking.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope used for `LeakyRelu` unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Linear,
}

impl Activation {
    pub fn leaky() -> Self {
        Self::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::LeakyRelu { slope } => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Self::Linear => z,
        }
    }

    /// Derivative at `z`; the kink at zero takes the right-hand value.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu { slope } => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Linear => 1.0,
        }
    }
}

/// Layer widths from input to output and the activation of every non-input layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Architecture {
    /// `hidden` activation on every hidden layer, `output` on the last one.
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let layers = sizes.len().saturating_sub(1);
        let mut activations = vec![hidden; layers];
        if let Some(last) = activations.last_mut() {
            *last = output;
        }
        let arch = Self { sizes, activations };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::invalid(
                "an architecture needs an input and an output layer",
            ));
        }
        if self.sizes.iter().any(|s| *s == 0) {
            return Err(Error::invalid(format!(
                "layer widths must be positive: {:?}",
                self.sizes
            )));
        }
        if self.activations.len() != self.sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} activations for {} weight layers",
                self.activations.len(),
                self.sizes.len() - 1
            )));
        }
        for a in &self.activations {
            if let Activation::LeakyRelu { slope } = a {
                if !slope.is_finite() {
                    return Err(Error::invalid("leaky slope must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("validated architecture")
    }

    pub fn hidden_layers(&self) -> usize {
        self.sizes.len() - 2
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Per-feature affine map `(x - mean) / scale` applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Zero mean and unit variance per column; constant columns keep scale 1.
    pub fn fit(inputs: ArrayView2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::invalid("cannot standardize an empty input set"));
        }
        let mean = inputs.mean_axis(Axis(0)).expect("non-empty");
        let scale = inputs
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(Self {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
        })
    }

    pub fn transform(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = inputs.to_owned();
        for mut row in out.rows_mut() {
            Zip::from(&mut row)
                .and(&self.mean[..])
                .and(&self.scale[..])
                .for_each(|x, m, s| *x = (*x - m) / s);
        }
        out
    }
}

/// Weights (`out x in`) and biases of every layer plus the input standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: Architecture,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub standardizer: Standardizer,
}

/// Gradients with the same layout as the parameters of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// Layer inputs, the standardized network input first.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(arch.sizes.len() - 1);
        let mut biases = Vec::with_capacity(arch.sizes.len() - 1);
        for pair in arch.sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                dist.sample(&mut rng)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        let standardizer = Standardizer::identity(arch.input_width());
        Ok(Self {
            arch,
            weights,
            biases,
            standardizer,
        })
    }

    pub fn input_width(&self) -> usize {
        self.arch.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.arch.output_width()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {width} features, network expects {}",
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Output for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut a: Array1<f64> = input
            .iter()
            .zip(&self.standardizer.mean)
            .zip(&self.standardizer.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        for ((w, b), act) in self
            .weights
            .iter()
            .zip(&self.biases)
            .zip(&self.arch.activations)
        {
            let mut z = w.dot(&a);
            z += b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Outputs for a batch, one row per input row.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        let mut a = self.standardizer.transform(inputs);
        for ((w, b), act) in self
            .weights
            .iter()
            .zip(&self.biases)
            .zip(&self.arch.activations)
        {
            let mut z = a.dot(&w.t());
            z += b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    fn forward_trace(&self, inputs: ArrayView2<f64>) -> (Array2<f64>, Trace) {
        let mut a = self.standardizer.transform(inputs);
        let layers = self.weights.len();
        let mut trace = Trace {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        for ((w, b), act) in self
            .weights
            .iter()
            .zip(&self.biases)
            .zip(&self.arch.activations)
        {
            let mut z = a.dot(&w.t());
            z += b;
            let out = z.mapv(|v| act.apply(v));
            trace.inputs.push(a);
            trace.pre.push(z);
            a = out;
        }
        (a, trace)
    }

    /// Smallest `|pre-activation|` over kinked layers for `input`; finite
    /// differences are only trustworthy when this exceeds the probe step.
    pub fn kink_margin(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input.len())?;
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row shape");
        let (_, trace) = self.forward_trace(x.view());
        Ok(trace
            .pre
            .iter()
            .zip(&self.arch.activations)
            .filter(|(_, act)| !matches!(act, Activation::Linear))
            .flat_map(|(z, _)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// Gradients of a scalar loss given `dL/d(output)` for every batch row.
    pub fn backward_from_output(
        &self,
        inputs: ArrayView2<f64>,
        output_grad: ArrayView2<f64>,
    ) -> Result<Gradients> {
        self.check_input(inputs.ncols())?;
        if output_grad.dim() != (inputs.nrows(), self.output_width()) {
            return Err(Error::Shape(
                "output gradient does not match batch x outputs".into(),
            ));
        }
        let (_, trace) = self.forward_trace(inputs);
        Ok(self.backprop(&trace, output_grad.to_owned()))
    }

    fn backprop(&self, trace: &Trace, mut delta: Array2<f64>) -> Gradients {
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for j in (0..layers).rev() {
            let act = self.arch.activations[j];
            if !matches!(act, Activation::Linear) {
                Zip::from(&mut delta)
                    .and(&trace.pre[j])
                    .for_each(|d, z| *d *= act.derivative(*z));
            }
            gw.push(delta.t().dot(&trace.inputs[j]));
            gb.push(delta.sum_axis(Axis(0)));
            if j > 0 {
                delta = delta.dot(&self.weights[j]);
            }
        }
        gw.reverse();
        gb.reverse();
        Gradients {
            weights: gw,
            biases: gb,
        }
    }

    /// Gradients of a loss computed from the batch output by `loss`, which
    /// returns the loss value and `dL/d(output)`.
    pub fn backward_with<F>(&self, inputs: ArrayView2<f64>, loss: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        self.check_input(inputs.ncols())?;
        let (out, trace) = self.forward_trace(inputs);
        let (value, delta) = loss(&out);
        if delta.dim() != out.dim() {
            return Err(Error::Shape(
                "loss gradient does not match batch x outputs".into(),
            ));
        }
        Ok((value, self.backprop(&trace, delta)))
    }

    /// Hash of the exact parameter bits, for auditing that weights persist or change.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.flat_parameters() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Batch mean-squared error and its exact gradients.
    pub fn backward(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Gradients)> {
        self.check_input(inputs.ncols())?;
        if targets.dim() != (inputs.nrows(), self.output_width()) {
            return Err(Error::Shape("targets do not match batch x outputs".into()));
        }
        if inputs.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let (out, trace) = self.forward_trace(inputs);
        let residual = &out - &targets;
        let count = residual.len() as f64;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / count;
        let delta = residual.mapv(|r| 2.0 * r / count);
        Ok((loss, self.backprop(&trace, delta)))
    }

    /// Mean-squared error over a data set without gradients.
    pub fn evaluate(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let out = self.forward_batch(inputs)?;
        mse(out.view(), targets)
    }

    /// Flattened parameters, layer by layer, weights (row-major) then biases.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, architecture has {}",
                flat.len(),
                self.arch.parameter_count()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: self.arch.clone(),
            standardizer: self.standardizer.clone(),
            parameters: self.flat_parameters(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(ck.architecture.clone(), 0)?;
        if ck.standardizer.mean.len() != net.input_width()
            || ck.standardizer.scale.len() != net.input_width()
        {
            return Err(Error::Shape(
                "standardizer width differs from input width".into(),
            ));
        }
        net.standardizer = ck.standardizer.clone();
        net.set_flat_parameters(&ck.parameters)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        Self::from_checkpoint(&ck)
    }

    /// Largest relative difference between backprop and central differences
    /// with step `eps` on a single `(input, target)` pair under the MSE loss.
    pub fn grad_check(&self, input: &[f64], target: &[f64], eps: f64) -> Result<f64> {
        self.check_input(input.len())?;
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row shape");
        let y = Array2::from_shape_vec((1, target.len()), target.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (_, grads) = self.backward(x.view(), y.view())?;
        let analytic: Vec<f64> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let base = self.flat_parameters();
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for (i, a) in analytic.iter().enumerate() {
            let mut theta = base.clone();
            theta[i] = base[i] + eps;
            probe.set_flat_parameters(&theta)?;
            let up = probe.evaluate(x.view(), y.view())?;
            theta[i] = base[i] - eps;
            probe.set_flat_parameters(&theta)?;
            let down = probe.evaluate(x.view(), y.view())?;
            let numeric = (up - down) / (2.0 * eps);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
        Ok(worst)
    }
}

/// Mean of squared differences over all entries.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty prediction"));
    }
    Ok(Zip::from(&pred)
        .and(&target)
        .fold(0.0, |acc, p, t| acc + (p - t) * (p - t))
        / pred.len() as f64)
}

/// `mse` for a single record.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    let p =
        ArrayView2::from_shape((1, pred.len()), pred).map_err(|e| Error::Shape(e.to_string()))?;
    let t = ArrayView2::from_shape((1, target.len()), target)
        .map_err(|e| Error::Shape(e.to_string()))?;
    mse(p, t)
}

/// Serialized network: architecture, input standardizer and flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub standardizer: Standardizer,
    pub parameters: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Finish with the parameters of the epoch with the lowest validation loss.
    #[serde(default)]
    pub restore_best: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            restore_best: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(
                "learning rate must be finite and non-negative",
            ));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::invalid(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer memory: step counter and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    first: Option<Gradients>,
    second: Option<Gradients>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: None,
            second: None,
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

fn zeros_like(net: &Mlp) -> Gradients {
    Gradients {
        weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
    }
}

/// One optimizer step `theta <- theta - lr * update(g)`.
pub fn apply_gradients(
    net: &mut Mlp,
    grads: &Gradients,
    optimizer: Optimizer,
    learning_rate: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.weights.len() != net.weights.len()
        || grads
            .weights
            .iter()
            .zip(&net.weights)
            .any(|(g, w)| g.dim() != w.dim())
        || grads
            .biases
            .iter()
            .zip(&net.biases)
            .any(|(g, b)| g.len() != b.len())
    {
        return Err(Error::Shape(
            "gradient layout differs from the network".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    state.step += 1;
    match optimizer {
        Optimizer::Sgd => {
            for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
                w.scaled_add(-learning_rate, g);
            }
            for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
                b.scaled_add(-learning_rate, g);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let m = state.first.get_or_insert_with(|| zeros_like(net));
            let v = state.second.get_or_insert_with(|| zeros_like(net));
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let update = |theta: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            };
            for j in 0..net.weights.len() {
                Zip::from(&mut net.weights[j])
                    .and(&grads.weights[j])
                    .and(&mut m.weights[j])
                    .and(&mut v.weights[j])
                    .for_each(update);
                Zip::from(&mut net.biases[j])
                    .and(&grads.biases[j])
                    .and(&mut m.biases[j])
                    .and(&mut v.biases[j])
                    .for_each(update);
            }
        }
    }
    Ok(())
}

/// Training and validation loss after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

/// Paired input and target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Samples {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let to_array = |rows: &[Vec<f64>]| -> Result<Array2<f64>> {
            let width = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::Shape("ragged rows".into()));
            }
            Array2::from_shape_vec((rows.len(), width), rows.concat())
                .map_err(|e| Error::Shape(e.to_string()))
        };
        Self::new(to_array(inputs)?, to_array(targets)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First `1 - fraction` rows and the remaining `fraction` rows.
    pub fn split(&self, fraction: f64) -> (Samples, Samples) {
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        let take = |range: std::ops::Range<usize>| Samples {
            inputs: self.inputs.slice(ndarray::s![range.clone(), ..]).to_owned(),
            targets: self.targets.slice(ndarray::s![range, ..]).to_owned(),
        };
        (take(0..cut), take(cut..self.len()))
    }

    fn select(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.inputs.select(Axis(0), rows),
            self.targets.select(Axis(0), rows),
        )
    }
}

/// Shuffled mini-batch training; returns one [`EpochLoss`] per epoch.
pub fn train(
    net: &mut Mlp,
    data: &Samples,
    validation: Option<&Samples>,
    config: &TrainingConfig,
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<Array2<f64>>, Vec<Array1<f64>>)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.select(chunk);
            let (loss, grads) = net.backward(x.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            total += loss * chunk.len() as f64;
            apply_gradients(
                net,
                &grads,
                config.optimizer,
                config.learning_rate,
                &mut state,
            )?;
        }
        let validation = validation
            .filter(|v| !v.is_empty())
            .map(|v| net.evaluate(v.inputs.view(), v.targets.view()))
            .transpose()?;
        history.push(EpochLoss {
            epoch,
            train: total / data.len() as f64,
            validation,
        });
        if let (true, Some(v)) = (config.restore_best, validation) {
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, net.weights.clone(), net.biases.clone()));
            }
        }
        log::debug!(
            "epoch {epoch}: train {:.6} validation {:?}",
            total / data.len() as f64,
            validation
        );
    }
    if let Some((_, weights, biases)) = best {
        net.weights = weights;
        net.biases = biases;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear(sizes: Vec<usize>) -> Mlp {
        Mlp::new(
            Architecture::new(sizes, Activation::Linear, Activation::Linear).unwrap(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = linear(vec![3, 3]);
        net.weights[0] = Array2::eye(3);
        assert_eq!(
            net.forward(&[1.0, -2.0, 0.5]).unwrap(),
            vec![1.0, -2.0, 0.5]
        );
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::leaky().apply(-1.0), -0.01);
        assert_eq!(Activation::leaky().apply(2.0), 2.0);
        assert_eq!(Activation::Linear.apply(-3.0), -3.0);
    }

    #[test]
    fn hand_computed_two_two_one() {
        let arch = Architecture::new(vec![2, 2, 1], Activation::Relu, Activation::Linear).unwrap();
        let mut net = Mlp::new(arch, 0).unwrap();
        net.weights[0] = array![[1.0, -1.0], [0.5, 2.0]];
        net.biases[0] = array![0.1, -0.2];
        net.weights[1] = array![[3.0, -1.5]];
        net.biases[1] = array![0.25];
        // h = relu([0.3 - 0.7 + 0.1, 0.15 + 1.4 - 0.2]) = [0, 1.35]; out = -2.025 + 0.25.
        let out = net.forward(&[0.3, 0.7]).unwrap();
        assert!((out[0] - (-1.775)).abs() < 1e-12);
        let batch = net.forward_batch(array![[0.3, 0.7]].view()).unwrap();
        assert!((batch[[0, 0]] - out[0]).abs() < 1e-15);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        let mut net = linear(vec![2, 1]);
        net.weights[0] = array![[0.5, -1.0]];
        net.biases[0] = array![0.2];
        let x = array![[1.0, 2.0], [-1.0, 0.5]];
        let y = array![[0.0], [1.0]];
        let (_, g) = net.backward(x.view(), y.view()).unwrap();
        let pred = net.forward_batch(x.view()).unwrap();
        let r = &pred - &y;
        let n = 2.0;
        let expect_w = r.t().dot(&x) * (2.0 / n);
        let expect_b = r.sum_axis(Axis(0)) * (2.0 / n);
        assert!((&g.weights[0] - &expect_w).iter().all(|d| d.abs() < 1e-14));
        assert!((&g.biases[0] - &expect_b).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let arch =
            Architecture::new(vec![3, 4, 2], Activation::leaky(), Activation::Linear).unwrap();
        let net = Mlp::new(arch, 5).unwrap();
        let x = array![[0.2, -0.3, 1.0]];
        let y = net.forward_batch(x.view()).unwrap();
        let (loss, g) = net.backward(x.view(), y.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn sgd_and_zero_rate_steps() {
        let mut net = linear(vec![1, 1]);
        net.weights[0] = array![[1.0]];
        let g = Gradients {
            weights: vec![array![[2.0]]],
            biases: vec![array![-1.0]],
        };
        let before = net.clone();
        apply_gradients(
            &mut net,
            &g,
            Optimizer::Sgd,
            0.0,
            &mut OptimizerState::new(),
        )
        .unwrap();
        assert_eq!(net, before);
        apply_gradients(
            &mut net,
            &g,
            Optimizer::Sgd,
            0.1,
            &mut OptimizerState::new(),
        )
        .unwrap();
        assert!((net.weights[0][[0, 0]] - 0.8).abs() < 1e-15);
        assert!((net.biases[0][0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = linear(vec![1, 1]);
        net.weights[0] = array![[1.0]];
        let g = Gradients {
            weights: vec![array![[3.0]]],
            biases: vec![array![-0.5]],
        };
        apply_gradients(
            &mut net,
            &g,
            Optimizer::adam(),
            0.01,
            &mut OptimizerState::new(),
        )
        .unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * sign(g) up to eps.
        assert!((net.weights[0][[0, 0]] - 0.99).abs() < 1e-8);
        assert!((net.biases[0][0] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn learns_doubling_map() {
        let mut net = linear(vec![1, 1]);
        let xs: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 32.0 - 1.0]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![2.0 * x[0]]).collect();
        let data = Samples::from_rows(&xs, &ys).unwrap();
        let (train_set, val) = data.split(0.25);
        let cfg = TrainingConfig {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 200,
            ..Default::default()
        };
        let hist = train(&mut net, &train_set, Some(&val), &cfg).unwrap();
        assert_eq!(hist.len(), 200);
        assert!(hist.last().unwrap().validation.unwrap() < 1e-6);
    }

    #[test]
    fn constant_target_fits_bias() {
        let arch = Architecture::new(vec![2, 1], Activation::Linear, Activation::Linear).unwrap();
        let mut net = Mlp::new(arch, 3).unwrap();
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i % 7) as f64, (i % 3) as f64])
            .collect();
        let ys = vec![vec![4.0]; 50];
        let data = Samples::from_rows(&xs, &ys).unwrap();
        net.standardizer = Standardizer::fit(data.inputs.view()).unwrap();
        let cfg = TrainingConfig {
            learning_rate: 0.05,
            batch_size: 10,
            epochs: 300,
            ..Default::default()
        };
        let hist = train(&mut net, &data, None, &cfg).unwrap();
        assert!(hist.last().unwrap().train < 1e-8);
        assert!((net.biases[0][0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn linear_grad_check_is_exact() {
        let net = linear(vec![3, 2]);
        assert!(
            net.grad_check(&[0.3, -1.2, 2.0], &[1.0, 0.0], 1e-5)
                .unwrap()
                < 1e-9
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch =
            Architecture::new(vec![3, 5, 2], Activation::leaky(), Activation::Linear).unwrap();
        let mut net = Mlp::new(arch, 9).unwrap();
        net.standardizer = Standardizer {
            mean: vec![0.1, 1.0 / 3.0, 7.0],
            scale: vec![2.0, 0.3, 1e-3],
        };
        let text = serde_json::to_string(&net.checkpoint()).unwrap();
        let back = Mlp::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
    }

    #[test]
    fn shape_errors() {
        let net = linear(vec![2, 1]);
        assert!(net.forward(&[1.0]).is_err());
        assert!(Architecture::new(vec![3], Activation::Relu, Activation::Linear).is_err());
        assert!(Architecture::new(vec![3, 0, 1], Activation::Relu, Activation::Linear).is_err());
    }
}
