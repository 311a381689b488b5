//! Dense encoder + classification head, trained with hand-written
//! backpropagation.
//!
//! A plain model maps one feature vector through the encoder and the head.
//! A Siamese model runs the *same* encoder (one set of weights) over both
//! members of a pair, concatenates the two embeddings in order `[a, b]`, and
//! feeds the result to the head. Hidden layers use ReLU; the last head layer
//! is linear and produces logits. Dropout (inverted scaling) acts on the head
//! input during training only.

mod batching;
mod checkpoint;
mod gradcheck;
mod optim;
mod schedule;
mod train;

pub use batching::{make_batches, BatchConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{network_gradient_check, parameter_gradients};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{lr_schedule, ScheduleConfig};
pub use train::{evaluate, predict, predict_sharded, train, EpochRecord, Example, TrainConfig, TrainHistory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{config, invalid, Error, Result};
use crate::types::{BscanRecord, LogitVector, PairRecord};

/// One fully connected layer. `weights` is `fan_out × fan_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        Self {
            fan_in,
            fan_out,
            weights: (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.fan_in == other.fan_in && self.fan_out == other.fan_out
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Plain,
    Siamese,
}

/// Layer widths of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub topology: Topology,
    pub input_dim: usize,
    /// Widths of the encoder layers; the last one is the embedding size.
    /// Empty means the raw features are the embedding.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the head before the final logit layer.
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn embedding_dim(&self) -> usize {
        self.encoder_hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn head_input_dim(&self) -> usize {
        match self.topology {
            Topology::Plain => self.embedding_dim(),
            Topology::Siamese => 2 * self.embedding_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(config("input and output widths must be positive"));
        }
        if self.encoder_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Weights of the shared encoder and the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    topology: Topology,
    encoder: Vec<Dense>,
    head: Vec<Dense>,
    dropout_rate: f64,
    /// Bumped by every optimizer step; caches from older generations are stale.
    generation: u64,
}

/// Builds a plain MLP from a width chain `(input, hidden..., classes)`.
/// All layers but the last form the encoder; the last is the head.
pub fn init_params(dims: &[usize], dropout: f64, seed: u64) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(config(format!("need at least input and output widths, got {dims:?}")));
    }
    let arch = Architecture {
        topology: Topology::Plain,
        input_dim: dims[0],
        encoder_hidden: dims[1..dims.len() - 1].to_vec(),
        head_hidden: Vec::new(),
        num_classes: dims[dims.len() - 1],
        dropout,
    };
    init_model(&arch, seed)
}

/// Glorot-uniform weights, zero biases; bit-reproducible per seed.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Vec::new();
    let mut width = arch.input_dim;
    for &w in &arch.encoder_hidden {
        encoder.push(Dense::glorot(width, w, &mut rng));
        width = w;
    }
    let mut head = Vec::new();
    let mut width = arch.head_input_dim();
    for &w in arch.head_hidden.iter().chain(std::iter::once(&arch.num_classes)) {
        head.push(Dense::glorot(width, w, &mut rng));
        width = w;
    }
    Ok(ModelParams {
        topology: arch.topology,
        encoder,
        head,
        dropout_rate: arch.dropout,
        generation: 0,
    })
}

impl ModelParams {
    /// Assembles parameters from explicit layers, checking that widths chain.
    pub fn from_layers(
        topology: Topology,
        encoder: Vec<Dense>,
        head: Vec<Dense>,
        dropout_rate: f64,
    ) -> Result<Self> {
        if head.is_empty() {
            return Err(config("the head needs at least one layer"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(config(format!("dropout must lie in [0, 1), got {dropout_rate}")));
        }
        for layer in encoder.iter().chain(&head) {
            if layer.weights.len() != layer.fan_in * layer.fan_out || layer.bias.len() != layer.fan_out {
                return Err(config("layer storage does not match its declared widths"));
            }
            if !layer.is_finite() {
                return Err(invalid("parameters contain non-finite values"));
            }
        }
        for pair in encoder.windows(2).chain(head.windows(2)) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        let params = Self { topology, encoder, head, dropout_rate, generation: 0 };
        let embedding = params.encoder.last().map_or(params.input_dim_unchecked(), |l| l.fan_out);
        let expected = match topology {
            Topology::Plain => embedding,
            Topology::Siamese => 2 * embedding,
        };
        if params.head[0].fan_in != expected {
            return Err(config(format!(
                "head expects {} inputs but the encoder provides {expected}",
                params.head[0].fan_in
            )));
        }
        Ok(params)
    }

    fn input_dim_unchecked(&self) -> usize {
        match (self.encoder.first(), self.topology) {
            (Some(l), _) => l.fan_in,
            (None, Topology::Plain) => self.head[0].fan_in,
            (None, Topology::Siamese) => self.head[0].fan_in / 2,
        }
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim_unchecked()
    }

    pub fn num_classes(&self) -> usize {
        self.head.last().map_or(0, |l| l.fan_out)
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn head(&self) -> &[Dense] {
        &self.head
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.iter().chain(&self.head).all(Dense::is_finite)
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.head)
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Mutable access to every layer; marks outstanding caches as stale.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.generation += 1;
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            encoder: self.encoder.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect(),
            head: self.head.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect(),
        }
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: Vec<Dense>,
    pub head: Vec<Dense>,
}

impl ParamGrads {
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(&self.head)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers().all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}

/// One input to the model.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Single(&'a [f64]),
    Pair(&'a [f64], &'a [f64]),
}

impl Example for BscanRecord {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }

    fn target(&self) -> usize {
        self.label.index()
    }

    fn input(&self) -> ModelInput<'_> {
        ModelInput::Single(&self.features)
    }

    fn key(&self) -> crate::types::RecordKey {
        BscanRecord::key(self)
    }
}

impl Example for PairRecord {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }

    fn target(&self) -> usize {
        self.label.index()
    }

    fn input(&self) -> ModelInput<'_> {
        ModelInput::Pair(&self.features_a, &self.features_b)
    }

    fn key(&self) -> crate::types::RecordKey {
        PairRecord::key(self)
    }
}

/// Whether dropout is active. Training mode draws masks from the given rng.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
struct StackTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

/// Activations recorded by a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    branches: Vec<StackTrace>,
    mask: Option<Vec<f64>>,
    head: StackTrace,
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Runs `layers` with ReLU after every layer, or after every layer but the
/// last when `linear_last` is set.
fn run_stack(layers: &[Dense], x: &[f64], linear_last: bool) -> (Vec<f64>, StackTrace) {
    let mut trace = StackTrace { inputs: Vec::with_capacity(layers.len()), pre: Vec::with_capacity(layers.len()) };
    let mut a = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let z = layer.apply(&a);
        trace.inputs.push(std::mem::take(&mut a));
        a = z.clone();
        if !(linear_last && i + 1 == layers.len()) {
            relu(&mut a);
        }
        trace.pre.push(z);
    }
    (a, trace)
}

/// Backpropagates `grad_out` through a stack recorded by [`run_stack`],
/// adding into `grads`, and returns the gradient with respect to its input.
fn backprop_stack(
    layers: &[Dense],
    trace: &StackTrace,
    mut grad_out: Vec<f64>,
    linear_last: bool,
    grads: &mut [Dense],
) -> Vec<f64> {
    for i in (0..layers.len()).rev() {
        if !(linear_last && i + 1 == layers.len()) {
            for (g, z) in grad_out.iter_mut().zip(&trace.pre[i]) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let layer = &layers[i];
        let input = &trace.inputs[i];
        let g = &mut grads[i];
        for (o, &d) in grad_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.bias[o] += d;
            let row = &mut g.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
        }
        let mut grad_in = vec![0.0; layer.fan_in];
        for (o, &d) in grad_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            grad_in.iter_mut().zip(row).for_each(|(gi, w)| *gi += d * w);
        }
        grad_out = grad_in;
    }
    grad_out
}

fn check_dim(x: &[f64], expected: usize, what: &str) -> Result<()> {
    if x.len() != expected {
        return Err(invalid(format!("{what} has {} features, expected {expected}", x.len())));
    }
    Ok(())
}

fn run_head(
    params: &ModelParams,
    mut head_input: Vec<f64>,
    mode: Mode<'_>,
    branches: Vec<StackTrace>,
) -> Result<(LogitVector, ForwardCache)> {
    let mask = match mode {
        Mode::Training(rng) if params.dropout_rate > 0.0 => {
            let keep = 1.0 - params.dropout_rate;
            let mask: Vec<f64> = (0..head_input.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            head_input.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            Some(mask)
        }
        _ => None,
    };
    let (logits, head) = run_stack(&params.head, &head_input, true);
    let logits = LogitVector::new(logits)?;
    Ok((logits, ForwardCache { generation: params.generation, branches, mask, head }))
}

/// Plain forward pass over a single feature vector.
pub fn forward(params: &ModelParams, x: &[f64], mode: Mode<'_>) -> Result<(LogitVector, ForwardCache)> {
    if params.topology != Topology::Plain {
        return Err(invalid("plain forward called on a Siamese model"));
    }
    check_dim(x, params.input_dim(), "input")?;
    let (embedding, trace) = run_stack(&params.encoder, x, false);
    run_head(params, embedding, mode, vec![trace])
}

/// Late fusion: the shared encoder embeds both inputs, the embeddings are
/// concatenated `[a, b]` and classified by the head.
pub fn siamese_forward(
    params: &ModelParams,
    x_a: &[f64],
    x_b: &[f64],
    mode: Mode<'_>,
) -> Result<(LogitVector, ForwardCache)> {
    if params.topology != Topology::Siamese {
        return Err(invalid("Siamese forward called on a plain model"));
    }
    check_dim(x_a, params.input_dim(), "first input")?;
    check_dim(x_b, params.input_dim(), "second input")?;
    let (mut emb_a, trace_a) = run_stack(&params.encoder, x_a, false);
    let (emb_b, trace_b) = run_stack(&params.encoder, x_b, false);
    emb_a.extend(emb_b);
    run_head(params, emb_a, mode, vec![trace_a, trace_b])
}

/// Dispatches on the input shape.
pub fn forward_input(
    params: &ModelParams,
    input: ModelInput<'_>,
    mode: Mode<'_>,
) -> Result<(LogitVector, ForwardCache)> {
    match input {
        ModelInput::Single(x) => forward(params, x, mode),
        ModelInput::Pair(a, b) => siamese_forward(params, a, b, mode),
    }
}

/// Reverse-mode gradients of every weight and bias, given `dL/dlogits`.
/// Encoder gradients of a Siamese model sum the contributions of both branches.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_logits: &[f64]) -> Result<ParamGrads> {
    if cache.generation != params.generation {
        return Err(Error::InvalidState(format!(
            "forward cache from parameter generation {} used with generation {}",
            cache.generation, params.generation
        )));
    }
    if grad_logits.len() != params.num_classes() {
        return Err(invalid(format!(
            "gradient has {} entries, model has {} classes",
            grad_logits.len(),
            params.num_classes()
        )));
    }
    let mut grads = params.zero_grads();
    let mut grad_head_in = backprop_stack(&params.head, &cache.head, grad_logits.to_vec(), true, &mut grads.head);
    if let Some(mask) = &cache.mask {
        grad_head_in.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }
    let width = grad_head_in.len() / cache.branches.len();
    for (branch, chunk) in cache.branches.iter().zip(grad_head_in.chunks(width)) {
        backprop_stack(&params.encoder, branch, chunk.to_vec(), false, &mut grads.encoder);
    }
    Ok(grads)
}
