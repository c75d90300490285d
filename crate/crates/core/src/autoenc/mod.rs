//! Multilayer ReLU autoencoder with batch normalization.
//!
//! The encoder `f` maps `R^M -> R^R` through a stack of affine layers; the
//! decoder `g` is its mirror image. Hidden layers apply
//! `affine -> batch norm -> activation`. The bottleneck layer and the final
//! decoder layer skip batch norm, and the final decoder layer is linear unless
//! [`ArchOptions::relu_output`] is set.
//!
//! Training works on mini-batches of rows. The trained objective for a batch is
//!
//! ```text
//! sum_i ||g(f(x_i)) - x_i||^2 + (lambda / 2) sum_i ||f(x_i) - m_i||^2
//! ```
//!
//! where `m_i` is the centroid currently assigned to sample `i`.

mod checkpoint;
mod pretrain;

pub use checkpoint::{read_params, write_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pretrain::{pretrain_layerwise, pretrain_stack, PretrainConfig};

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at, matmul_bt, Matrix};
use crate::optim::{ParamArrays, SgdState};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, batch_norm: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            batch_norm,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid(format!(
                "layer dims must be >= 1, got {}x{}",
                self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }
}

/// Architecture switches for [`network_specs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ArchOptions {
    /// Bottleneck activation is linear instead of ReLU.
    pub linear_bottleneck: bool,
    /// Final decoder layer is ReLU instead of linear (nonnegative data only).
    pub relu_output: bool,
}

/// Encoder and mirrored decoder layer specs for an input of `input_dim`
/// features and encoder output widths `widths` (the last one is the
/// bottleneck).
pub fn network_specs(
    input_dim: usize,
    widths: &[usize],
    opts: ArchOptions,
) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
    if widths.is_empty() {
        return Err(Error::invalid("at least one encoder width is required"));
    }
    let mut dims = Vec::with_capacity(widths.len() + 1);
    dims.push(input_dim);
    dims.extend_from_slice(widths);
    let depth = widths.len();

    let encoder = (0..depth)
        .map(|i| {
            let bottleneck = i + 1 == depth;
            let act = if bottleneck && opts.linear_bottleneck {
                Activation::Linear
            } else {
                Activation::Relu
            };
            LayerSpec::new(dims[i], dims[i + 1], act, !bottleneck)
        })
        .collect::<Vec<_>>();
    let decoder = (0..depth)
        .map(|j| {
            let last = j + 1 == depth;
            let act = if last && !opts.relu_output {
                Activation::Linear
            } else {
                Activation::Relu
            };
            LayerSpec::new(dims[depth - j], dims[depth - j - 1], act, !last)
        })
        .collect::<Vec<_>>();
    for s in encoder.iter().chain(&decoder) {
        s.validate()?;
    }
    Ok((encoder, decoder))
}

/// One affine layer with optional batch-norm parameters and statistics.
/// The batch-norm vectors are empty when `spec.batch_norm` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `out_dim x in_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Layer {
    /// All-zero weights, unit scale, zero shift, unit running variance.
    pub fn zeros(spec: LayerSpec) -> Self {
        let bn = if spec.batch_norm { spec.out_dim } else { 0 };
        Self {
            spec,
            weight: Matrix::zeros(spec.out_dim, spec.in_dim),
            bias: vec![0.0; spec.out_dim],
            gamma: vec![1.0; bn],
            beta: vec![0.0; bn],
            running_mean: vec![0.0; bn],
            running_var: vec![1.0; bn],
        }
    }

    /// Uniform weights in `+-sqrt(6 / (in + out))`, zero biases.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(spec);
        let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        layer
            .weight
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = dist.sample(rng));
        layer
    }

    fn check(&self) -> Result<()> {
        let s = &self.spec;
        s.validate()?;
        let bn = if s.batch_norm { s.out_dim } else { 0 };
        let ok = self.weight.shape() == (s.out_dim, s.in_dim)
            && self.bias.len() == s.out_dim
            && self.gamma.len() == bn
            && self.beta.len() == bn
            && self.running_mean.len() == bn
            && self.running_var.len() == bn;
        if !ok {
            return Err(Error::invalid(format!(
                "layer {}x{} has inconsistent parameter shapes",
                s.in_dim, s.out_dim
            )));
        }
        if self.running_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("running variances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm.
    Train,
    /// Running statistics only.
    Infer,
}

/// Encoder `f` and decoder `g` parameters.
#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    /// Bumped whenever trainable arrays are handed out mutably; traces carry
    /// the version they were computed at.
    version: u64,
}

impl PartialEq for AutoencoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.decoder == other.decoder
    }
}

impl AutoencoderParams {
    pub fn new(encoder: Vec<Layer>, decoder: Vec<Layer>) -> Result<Self> {
        if encoder.is_empty() || encoder.len() != decoder.len() {
            return Err(Error::invalid(format!(
                "encoder depth {} and decoder depth {} must match and be nonzero",
                encoder.len(),
                decoder.len()
            )));
        }
        for l in encoder.iter().chain(&decoder) {
            l.check()?;
        }
        for w in encoder.windows(2) {
            if w[0].spec.out_dim != w[1].spec.in_dim {
                return Err(Error::invalid("encoder layers do not chain"));
            }
        }
        let depth = encoder.len();
        for (j, d) in decoder.iter().enumerate() {
            let e = &encoder[depth - 1 - j].spec;
            if d.spec.in_dim != e.out_dim || d.spec.out_dim != e.in_dim {
                return Err(Error::invalid(format!(
                    "decoder layer {j} ({}x{}) does not mirror encoder layer {} ({}x{})",
                    d.spec.in_dim,
                    d.spec.out_dim,
                    depth - 1 - j,
                    e.in_dim,
                    e.out_dim
                )));
            }
        }
        Ok(Self {
            encoder,
            decoder,
            version: 0,
        })
    }

    /// Randomly initialized network for the given specs.
    pub fn init(encoder: &[LayerSpec], decoder: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let enc = encoder.iter().map(|s| Layer::init(*s, rng)).collect();
        let dec = decoder.iter().map(|s| Layer::init(*s, rng)).collect();
        Self::new(enc, dec)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].spec.in_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().expect("nonempty encoder").spec.out_dim
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn uses_batch_norm(&self) -> bool {
        self.layers().any(|l| l.spec.batch_norm)
    }

    /// Pure forward pass through encoder and decoder.
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x, mode)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            let (out, cache) = layer_forward(layer, &h, mode)?;
            encoder.push(cache);
            h = out;
        }
        let latent = h;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut y = latent.clone();
        for layer in &self.decoder {
            let (out, cache) = layer_forward(layer, &y, mode)?;
            decoder.push(cache);
            y = out;
        }
        Ok(ForwardTrace {
            version: self.version,
            mode,
            encoder,
            decoder,
            latent,
            reconstruction: y,
        })
    }

    fn check_input(&self, x: &Matrix, mode: Mode) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "encode",
                left: x.shape(),
                right: (self.input_dim(), self.latent_dim()),
            });
        }
        if mode == Mode::Train && x.rows() < 2 && self.uses_batch_norm() {
            return Err(Error::invalid(format!(
                "batch norm needs at least 2 samples per training batch, got {}",
                x.rows()
            )));
        }
        Ok(())
    }

    fn run_stack(layers: &[Layer], x: &Matrix, mode: Mode) -> Result<(Matrix, Vec<BatchStats>)> {
        let mut h = x.clone();
        let mut stats = Vec::with_capacity(layers.len());
        for layer in layers {
            h = match mode {
                Mode::Train => {
                    let (out, cache) = layer_forward(layer, &h, mode)?;
                    stats.push(cache.stats());
                    out
                }
                Mode::Infer => layer_infer(layer, &h)?,
            };
        }
        Ok((h, stats))
    }

    /// Encoder output. In train mode batch statistics are used and folded into
    /// the running statistics; infer mode leaves the parameters untouched.
    pub fn encode(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x, mode)?;
        let (h, stats) = Self::run_stack(&self.encoder, x, mode)?;
        if mode == Mode::Train {
            absorb(&mut self.encoder, &stats);
        }
        Ok(h)
    }

    /// Read-only encoder pass with running statistics.
    pub fn encode_infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, Mode::Infer)?;
        Ok(Self::run_stack(&self.encoder, x, Mode::Infer)?.0)
    }

    /// Read-only encoder pass normalizing with the statistics of `x` itself,
    /// exactly as a training step would see the batch.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, Mode::Train)?;
        Ok(Self::run_stack(&self.encoder, x, Mode::Train)?.0)
    }

    /// Decoder output; see [`encode`](Self::encode) for the mode semantics.
    pub fn decode(&mut self, h: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_latent(h, mode)?;
        let (y, stats) = Self::run_stack(&self.decoder, h, mode)?;
        if mode == Mode::Train {
            absorb(&mut self.decoder, &stats);
        }
        Ok(y)
    }

    pub fn decode_infer(&self, h: &Matrix) -> Result<Matrix> {
        self.check_latent(h, Mode::Infer)?;
        Ok(Self::run_stack(&self.decoder, h, Mode::Infer)?.0)
    }

    fn check_latent(&self, h: &Matrix, mode: Mode) -> Result<()> {
        if h.cols() != self.latent_dim() {
            return Err(Error::Shape {
                op: "decode",
                left: h.shape(),
                right: (self.latent_dim(), self.input_dim()),
            });
        }
        if mode == Mode::Train && h.rows() < 2 && self.decoder.iter().any(|l| l.spec.batch_norm) {
            return Err(Error::invalid(
                "batch norm needs at least 2 samples per training batch",
            ));
        }
        Ok(())
    }

    /// Folds the batch statistics recorded in a train-mode trace into the
    /// running statistics.
    pub fn absorb_trace_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        let enc: Vec<_> = trace.encoder.iter().map(LayerCache::stats).collect();
        let dec: Vec<_> = trace.decoder.iter().map(LayerCache::stats).collect();
        absorb(&mut self.encoder, &enc);
        absorb(&mut self.decoder, &dec);
    }

    /// Joint loss of a batch under train-mode (batch) statistics.
    pub fn joint_loss(&self, x: &Matrix, m_assigned: &Matrix, lambda: f64) -> Result<LossParts> {
        self.loss(x, Some(m_assigned), Objective::joint(lambda)?, Mode::Train)
    }

    pub fn loss(
        &self,
        x: &Matrix,
        m_assigned: Option<&Matrix>,
        objective: Objective,
        mode: Mode,
    ) -> Result<LossParts> {
        let trace = self.forward(x, mode)?;
        trace.loss(x, m_assigned, objective)
    }

    /// Gradient of `trace.loss(x, m_assigned, objective).total` with respect
    /// to every trainable array, by back-propagation through the recorded
    /// train-mode pass.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        x: &Matrix,
        m_assigned: Option<&Matrix>,
        objective: Objective,
    ) -> Result<GradientSet> {
        if trace.mode != Mode::Train {
            return Err(Error::invalid("backward requires a train-mode trace"));
        }
        if trace.version != self.version
            || trace.encoder.len() != self.encoder.len()
            || trace.decoder.len() != self.decoder.len()
            || trace.encoder[0].input != *x
        {
            return Err(Error::invalid(
                "stale or mismatched forward trace for this batch and parameter set",
            ));
        }
        let wants_clust = objective.lambda != 0.0;
        let m = if wants_clust {
            let m = m_assigned
                .ok_or_else(|| Error::invalid("clustering term needs assigned centroids"))?;
            check_same_shape("assigned centroids", &trace.latent, m)?;
            Some(m)
        } else {
            None
        };

        let mut decoder_grads: Vec<LayerGrad> = self.decoder.iter().map(LayerGrad::zeros).collect();
        let mut d_latent = Matrix::zeros(trace.latent.rows(), trace.latent.cols());
        if objective.reconstruction {
            let mut d = Matrix::zeros(x.rows(), x.cols());
            for ((g, y), t) in d
                .as_mut_slice()
                .iter_mut()
                .zip(trace.reconstruction.as_slice())
                .zip(x.as_slice())
            {
                *g = 2.0 * (y - t);
            }
            for (i, (layer, cache)) in self.decoder.iter().zip(&trace.decoder).enumerate().rev() {
                let (grad, dx) = layer_backward(layer, cache, &d)?;
                decoder_grads[i] = grad;
                d = dx;
            }
            d_latent = d;
        }
        if let Some(m) = m {
            let lambda = objective.lambda;
            for ((g, h), c) in d_latent
                .as_mut_slice()
                .iter_mut()
                .zip(trace.latent.as_slice())
                .zip(m.as_slice())
            {
                *g += lambda * (h - c);
            }
        }
        let mut encoder_grads: Vec<LayerGrad> = self.encoder.iter().map(LayerGrad::zeros).collect();
        let mut d = d_latent;
        for (i, (layer, cache)) in self.encoder.iter().zip(&trace.encoder).enumerate().rev() {
            let (grad, dx) = layer_backward(layer, cache, &d)?;
            encoder_grads[i] = grad;
            if i > 0 {
                d = dx;
            }
        }
        Ok(GradientSet {
            encoder: encoder_grads,
            decoder: decoder_grads,
        })
    }

    /// One SGD step on the batch-averaged objective. Running statistics are
    /// updated from the batch. Returns the batch loss before the step.
    pub fn train_step(
        &mut self,
        sgd: &mut SgdState,
        x: &Matrix,
        m_assigned: Option<&Matrix>,
        objective: Objective,
    ) -> Result<LossParts> {
        let trace = self.forward(x, Mode::Train)?;
        let loss = trace.loss(x, m_assigned, objective)?;
        let mut grads = self.backward(&trace, x, m_assigned, objective)?;
        grads.scale(1.0 / x.rows() as f64);
        sgd.step(self, &grads)?;
        self.absorb_trace_stats(&trace);
        Ok(loss)
    }

    /// Infer-mode loss summed over `x`, evaluated in blocks of rows.
    pub fn dataset_loss(
        &self,
        x: &Matrix,
        m_assigned: Option<&Matrix>,
        objective: Objective,
    ) -> Result<LossParts> {
        const BLOCK: usize = 4096;
        if let Some(m) = m_assigned {
            if m.shape() != (x.rows(), self.latent_dim()) {
                return Err(Error::invalid("assigned centroids do not match the dataset"));
            }
        } else if objective.lambda != 0.0 {
            return Err(Error::invalid("clustering term needs assigned centroids"));
        }
        let mut acc = LossParts {
            total: 0.0,
            recon: 0.0,
            clust: 0.0,
        };
        let mut start = 0;
        while start < x.rows() {
            let idx: Vec<usize> = (start..(start + BLOCK).min(x.rows())).collect();
            let xb = x.select_rows(&idx);
            let h = self.encode_infer(&xb)?;
            let y = self.decode_infer(&h)?;
            acc.recon += sq_diff(&y, &xb);
            if let Some(m) = m_assigned {
                acc.clust += sq_diff(&h, &m.select_rows(&idx));
            }
            start += BLOCK;
        }
        acc.total = 0.5 * objective.lambda * acc.clust;
        if objective.reconstruction {
            acc.total += acc.recon;
        }
        Ok(acc)
    }
}

fn absorb(layers: &mut [Layer], stats: &[BatchStats]) {
    for (layer, s) in layers.iter_mut().zip(stats) {
        if !layer.spec.batch_norm || s.mean.is_empty() {
            continue;
        }
        let b = s.rows as f64;
        let unbias = if s.rows > 1 { b / (b - 1.0) } else { 1.0 };
        for j in 0..layer.spec.out_dim {
            layer.running_mean[j] = BN_MOMENTUM * layer.running_mean[j] + (1.0 - BN_MOMENTUM) * s.mean[j];
            let v = BN_MOMENTUM * layer.running_var[j] + (1.0 - BN_MOMENTUM) * s.var[j] * unbias;
            // a constant feature would drive the variance to 0
            layer.running_var[j] = v.max(f64::MIN_POSITIVE);
        }
    }
}

fn check_same_shape(what: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what} shape {:?} does not match latent shape {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// Which terms of the per-sample objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub reconstruction: bool,
}

impl Objective {
    pub fn joint(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            lambda,
            reconstruction: true,
        })
    }

    pub fn reconstruction_only() -> Self {
        Self {
            lambda: 0.0,
            reconstruction: true,
        }
    }

    pub fn clustering_only(lambda: f64) -> Result<Self> {
        Ok(Self {
            reconstruction: false,
            ..Self::joint(lambda)?
        })
    }
}

/// Loss components of a batch.
///
/// `recon` is `sum ||g(f(x)) - x||^2`, `clust` is the raw K-means term
/// `sum ||f(x) - m||^2`, and `total = recon + (lambda / 2) clust` (the
/// reconstruction part is dropped when the objective disables it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub clust: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.recon.is_finite() && self.clust.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    rows: usize,
    mean: Vec<f64>,
    /// biased
    var: Vec<f64>,
}

/// Per-layer intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    /// Normalized pre-activations (batch norm layers only).
    pub normalized: Option<Matrix>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    /// Input to the activation function.
    pub pre_activation: Matrix,
}

impl LayerCache {
    fn stats(&self) -> BatchStats {
        BatchStats {
            rows: self.input.rows(),
            mean: self.batch_mean.clone(),
            var: self.batch_var.clone(),
        }
    }
}

/// Everything back-propagation needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    mode: Mode,
    pub encoder: Vec<LayerCache>,
    pub decoder: Vec<LayerCache>,
    pub latent: Matrix,
    pub reconstruction: Matrix,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn loss(&self, x: &Matrix, m_assigned: Option<&Matrix>, objective: Objective) -> Result<LossParts> {
        if x.shape() != self.reconstruction.shape() {
            return Err(Error::Shape {
                op: "loss",
                left: x.shape(),
                right: self.reconstruction.shape(),
            });
        }
        let recon: f64 = self
            .reconstruction
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(y, t)| (y - t) * (y - t))
            .sum();
        let clust = match m_assigned {
            Some(m) => {
                check_same_shape("assigned centroids", &self.latent, m)?;
                self.latent
                    .as_slice()
                    .iter()
                    .zip(m.as_slice())
                    .map(|(h, c)| (h - c) * (h - c))
                    .sum()
            }
            None if objective.lambda != 0.0 => {
                return Err(Error::invalid("clustering term needs assigned centroids"))
            }
            None => 0.0,
        };
        let mut total = 0.5 * objective.lambda * clust;
        if objective.reconstruction {
            total += recon;
        }
        Ok(LossParts { total, recon, clust })
    }
}

fn sq_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn layer_infer(layer: &Layer, x: &Matrix) -> Result<Matrix> {
    let mut z = matmul_bt(x, &layer.weight)?;
    let bn = layer.spec.batch_norm;
    let relu = layer.spec.activation == Activation::Relu;
    let inv_std: Vec<f64> = layer
        .running_var
        .iter()
        .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
        .collect();
    for r in 0..z.rows() {
        for (j, v) in z.row_mut(r).iter_mut().enumerate() {
            let mut a = *v + layer.bias[j];
            if bn {
                a = layer.gamma[j] * ((a - layer.running_mean[j]) * inv_std[j]) + layer.beta[j];
            }
            *v = if relu { a.max(0.0) } else { a };
        }
    }
    z.ensure_finite("layer output")
}

fn layer_forward(layer: &Layer, x: &Matrix, mode: Mode) -> Result<(Matrix, LayerCache)> {
    let out_dim = layer.spec.out_dim;
    let mut z = matmul_bt(x, &layer.weight)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    let rows = z.rows();
    let mut cache = LayerCache {
        input: x.clone(),
        normalized: None,
        inv_std: Vec::new(),
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
        pre_activation: Matrix::zeros(0, 0),
    };
    let pre = if layer.spec.batch_norm {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z.column_means();
                let mut var = vec![0.0; out_dim];
                for r in z.row_iter() {
                    for j in 0..out_dim {
                        let d = r[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            Mode::Infer => (layer.running_mean.clone(), layer.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = z;
        for r in 0..rows {
            for (j, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for r in 0..rows {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = layer.gamma[j] * *v + layer.beta[j];
            }
        }
        cache.normalized = Some(xhat);
        cache.inv_std = inv_std;
        if mode == Mode::Train {
            cache.batch_mean = mean;
            cache.batch_var = var;
        }
        y
    } else {
        z
    };
    let mut out = pre.clone();
    if layer.spec.activation == Activation::Relu {
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    cache.pre_activation = pre;
    let out = out.ensure_finite("layer output")?;
    Ok((out, cache))
}

fn layer_backward(layer: &Layer, cache: &LayerCache, d_out: &Matrix) -> Result<(LayerGrad, Matrix)> {
    let mut d_pre = d_out.clone();
    if layer.spec.activation == Activation::Relu {
        for (g, p) in d_pre
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_activation.as_slice())
        {
            // subgradient 0 at the kink
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let out_dim = layer.spec.out_dim;
    let rows = d_pre.rows();
    let mut grad = LayerGrad::zeros(layer);
    let d_z = if layer.spec.batch_norm {
        let xhat = cache
            .normalized
            .as_ref()
            .ok_or_else(|| Error::invalid("trace lacks batch-norm intermediates"))?;
        let mut dxhat = Matrix::zeros(rows, out_dim);
        let mut sum_dxhat = vec![0.0; out_dim];
        let mut sum_dxhat_xhat = vec![0.0; out_dim];
        for r in 0..rows {
            let gp = d_pre.row(r);
            let xr = xhat.row(r);
            let dr = dxhat.row_mut(r);
            for j in 0..out_dim {
                grad.gamma[j] += gp[j] * xr[j];
                grad.beta[j] += gp[j];
                let v = gp[j] * layer.gamma[j];
                dr[j] = v;
                sum_dxhat[j] += v;
                sum_dxhat_xhat[j] += v * xr[j];
            }
        }
        let b = rows as f64;
        let mut d_z = dxhat;
        for r in 0..rows {
            let xr = xhat.row(r);
            for (j, v) in d_z.row_mut(r).iter_mut().enumerate() {
                *v = cache.inv_std[j] / b * (b * *v - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
            }
        }
        d_z
    } else {
        d_pre
    };
    grad.weight = matmul_at(&d_z, &cache.input)?;
    for r in d_z.row_iter() {
        for (g, v) in grad.bias.iter_mut().zip(r) {
            *g += v;
        }
    }
    let d_x = matmul(&d_z, &layer.weight)?;
    Ok((grad, d_x))
}

/// Gradient of one layer's trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerGrad {
    fn zeros(layer: &Layer) -> Self {
        Self {
            weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            bias: vec![0.0; layer.bias.len()],
            gamma: vec![0.0; layer.gamma.len()],
            beta: vec![0.0; layer.beta.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub encoder: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| *v == 0.0))
    }
}

fn layer_names(prefix: &str, layers: &[LayerSpec], out: &mut Vec<String>) {
    for (i, s) in layers.iter().enumerate() {
        out.push(format!("{prefix}[{i}].weight"));
        out.push(format!("{prefix}[{i}].bias"));
        if s.batch_norm {
            out.push(format!("{prefix}[{i}].gamma"));
            out.push(format!("{prefix}[{i}].beta"));
        }
    }
}

impl ParamArrays for GradientSet {
    fn arrays(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for g in self.encoder.iter().chain(&self.decoder) {
            v.push(g.weight.as_slice());
            v.push(g.bias.as_slice());
            if !g.gamma.is_empty() {
                v.push(g.gamma.as_slice());
                v.push(g.beta.as_slice());
            }
        }
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for g in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.push(g.weight.as_mut_slice());
            v.push(g.bias.as_mut_slice());
            if !g.gamma.is_empty() {
                v.push(g.gamma.as_mut_slice());
                v.push(g.beta.as_mut_slice());
            }
        }
        v
    }

    fn array_names(&self) -> Vec<String> {
        // gradients mirror the layer layout; a layer has batch norm iff its
        // gamma gradient is nonempty
        let spec = |g: &LayerGrad| LayerSpec {
            in_dim: g.weight.cols(),
            out_dim: g.weight.rows(),
            activation: Activation::Linear,
            batch_norm: !g.gamma.is_empty(),
        };
        let enc: Vec<LayerSpec> = self.encoder.iter().map(spec).collect();
        let dec: Vec<LayerSpec> = self.decoder.iter().map(spec).collect();
        let mut out = Vec::new();
        layer_names("encoder", &enc, &mut out);
        layer_names("decoder", &dec, &mut out);
        out
    }
}

impl ParamArrays for AutoencoderParams {
    fn arrays(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for l in self.layers() {
            v.push(l.weight.as_slice());
            v.push(l.bias.as_slice());
            if l.spec.batch_norm {
                v.push(l.gamma.as_slice());
                v.push(l.beta.as_slice());
            }
        }
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut v = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.push(l.weight.as_mut_slice());
            v.push(l.bias.as_mut_slice());
            if l.spec.batch_norm {
                v.push(l.gamma.as_mut_slice());
                v.push(l.beta.as_mut_slice());
            }
        }
        v
    }

    fn array_names(&self) -> Vec<String> {
        let enc: Vec<LayerSpec> = self.encoder.iter().map(|l| l.spec).collect();
        let dec: Vec<LayerSpec> = self.decoder.iter().map(|l| l.spec).collect();
        let mut out = Vec::new();
        layer_names("encoder", &enc, &mut out);
        layer_names("decoder", &dec, &mut out);
        out
    }
}
