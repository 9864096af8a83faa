//! Feed-forward stack of spiking SSM layers.
//!
//! ```text
//! x ─ W_in ─ BN ─ layer 1 ─ dropout ─ W_1 ─ BN ─ layer 2 ─ ... ─ W_out ─ BN ─ logits[t]
//! ```
//!
//! Synaptic weights are stored as `(outputs x inputs)`: `W_in` is
//! `h x c_in`, every hidden junction is `h x (h * n_out)` and the readout is
//! `c_out x (h * n_out)`. Batch normalization runs per channel over all valid
//! (sample, timestep) rows of a batch. Classification sums the readout over
//! time and picks the largest class, ties going to the lowest index.
//!
//! Batches are padded to the longest sequence; padded rows carry zero
//! currents, zero spikes and zero logits and never enter statistics or
//! gradients.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::{init_layer, LayerInit};
use crate::neuron::{
    BackwardStats, LayerParams, NeuronConfig, ResetNorm, ResetSharing, SequenceStats, SsmLayer,
    StabilityRegime, DEFAULT_STATE_CLIP,
};
use crate::numeric::{Activation, Surrogate};
use crate::params::{ParamGroup, Tensor, TensorMut};

pub const CHECKPOINT_FORMAT: &str = "spiking-ssm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How the per-step readout is aggregated into class scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Sum over valid timesteps.
    Sum,
    /// Sum divided by the sequence length. Same decisions as `Sum`.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub num_hidden_layers: usize,
    pub h: usize,
    pub n: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub regime: StabilityRegime,
    pub reset_enabled: bool,
    pub reset_norm: ResetNorm,
    pub reset_sharing: ResetSharing,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub readout: Readout,
    pub surrogate: Surrogate,
    pub state_clip: f64,
    pub init: LayerInit,
}

impl NetworkConfig {
    pub fn new(c_in: usize, c_out: usize, num_hidden_layers: usize, h: usize, n: usize, n_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            num_hidden_layers,
            h,
            n,
            n_out,
            activation: Activation::NonSigned,
            regime: StabilityRegime::Stable,
            reset_enabled: true,
            reset_norm: ResetNorm::Complex,
            reset_sharing: ResetSharing::PerNeuron,
            dropout: 0.0,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            readout: Readout::Sum,
            surrogate: Surrogate::default(),
            state_clip: DEFAULT_STATE_CLIP,
            init: LayerInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("num_hidden_layers", self.num_hidden_layers),
            ("h", self.h),
            ("n", self.n),
            ("n_out", self.n_out),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("batch norm needs momentum in (0, 1] and eps > 0".into()));
        }
        self.neuron_config().validate()
    }

    pub fn neuron_config(&self) -> NeuronConfig {
        NeuronConfig {
            h: self.h,
            n: self.n,
            n_out: self.n_out,
            activation: self.activation,
            regime: self.regime,
            reset_enabled: self.reset_enabled,
            reset_norm: self.reset_norm,
            reset_sharing: self.reset_sharing,
            surrogate: self.surrogate,
            state_clip: self.state_clip,
        }
    }

    /// Spike channels per hidden layer.
    pub fn channels(&self) -> usize {
        self.h * self.n_out
    }
}

/// Per-channel batch normalization with a learnable affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Batch statistics of one normalization, kept for the backward pass.
#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Array2<f64>,
    inv_std: Vec<f64>,
}

/// Mean and unbiased variance of one training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize `x` in place and update the running statistics in train mode.
    pub fn step(&mut self, x: &mut Array2<f64>, mode: Mode) {
        let valid = vec![true; x.nrows()];
        match mode {
            Mode::Train => {
                let (_, stats) = self.forward_train(x, &valid);
                self.update_running(&stats);
            }
            Mode::Eval => self.forward_eval(x, &valid),
        }
    }

    fn forward_train(&self, x: &mut Array2<f64>, valid: &[bool]) -> (BnCache, BatchStats) {
        let c = self.channels();
        let count = valid.iter().filter(|v| **v).count().max(1) as f64;
        let mut mean = vec![0.0; c];
        for (row, _) in x.rows().into_iter().zip(valid).filter(|(_, v)| **v) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (row, _) in x.rows().into_iter().zip(valid).filter(|(_, v)| **v) {
            for ((s, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
            .collect();
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Array2::zeros(x.raw_dim());
        for ((mut row, mut hat), &ok) in x.rows_mut().into_iter().zip(x_hat.rows_mut()).zip(valid) {
            if !ok {
                row.fill(0.0);
                continue;
            }
            for k in 0..c {
                let xh = (row[k] - mean[k]) * inv_std[k];
                hat[k] = xh;
                row[k] = self.gamma[k] * xh + self.beta[k];
            }
        }
        (
            BnCache { x_hat, inv_std },
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    fn forward_eval(&self, x: &mut Array2<f64>, valid: &[bool]) {
        let c = self.channels();
        let scale: Vec<f64> = (0..c)
            .map(|k| self.gamma[k] / (self.running_var[k] + self.eps).sqrt())
            .collect();
        for (mut row, &ok) in x.rows_mut().into_iter().zip(valid) {
            if !ok {
                row.fill(0.0);
                continue;
            }
            for k in 0..c {
                row[k] = (row[k] - self.running_mean[k]) * scale[k] + self.beta[k];
            }
        }
    }

    fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for k in 0..self.channels() {
            self.running_mean[k] = (1.0 - m) * self.running_mean[k] + m * stats.mean[k];
            self.running_var[k] = (1.0 - m) * self.running_var[k] + m * stats.var[k];
        }
    }

    /// Turns `g = dL/dy` into `dL/dx` in place and accumulates affine gradients.
    fn backward_train(&self, g: &mut Array2<f64>, cache: &BnCache, valid: &[bool], grads: &mut BatchNorm) {
        let c = self.channels();
        let count = valid.iter().filter(|v| **v).count().max(1) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for ((row, hat), _) in g
            .rows()
            .into_iter()
            .zip(cache.x_hat.rows())
            .zip(valid)
            .filter(|(_, v)| **v)
        {
            for k in 0..c {
                sum_g[k] += row[k];
                sum_gx[k] += row[k] * hat[k];
            }
        }
        for k in 0..c {
            grads.beta[k] += sum_g[k];
            grads.gamma[k] += sum_gx[k];
        }
        for ((mut row, hat), &ok) in g.rows_mut().into_iter().zip(cache.x_hat.rows()).zip(valid) {
            if !ok {
                row.fill(0.0);
                continue;
            }
            for k in 0..c {
                let scale = self.gamma[k] * cache.inv_std[k] / count;
                row[k] = scale * (count * row[k] - sum_g[k] - hat[k] * sum_gx[k]);
            }
        }
    }

    fn backward_eval(&self, g: &mut Array2<f64>, x_hat: &Array2<f64>, valid: &[bool], grads: &mut BatchNorm) {
        let c = self.channels();
        for ((mut row, hat), &ok) in g.rows_mut().into_iter().zip(x_hat.rows()).zip(valid) {
            if !ok {
                row.fill(0.0);
                continue;
            }
            for k in 0..c {
                grads.beta[k] += row[k];
                grads.gamma[k] += row[k] * hat[k];
                row[k] *= self.gamma[k] / (self.running_var[k] + self.eps).sqrt();
            }
        }
    }

    fn zeros_like(&self) -> Self {
        let c = self.channels();
        Self {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Output channels silenced in every neuron of every hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropSide {
    /// Channels `1..=count`.
    First,
    /// Channels `n_out - count + 1..=n_out`.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDrop {
    pub side: DropSide,
    pub count: usize,
}

impl ChannelDrop {
    pub fn mask(&self, n_out: usize) -> Result<Vec<bool>> {
        if self.count > n_out {
            return Err(Error::Config(format!(
                "cannot drop {} of {n_out} output channels",
                self.count
            )));
        }
        Ok((0..n_out)
            .map(|m| match self.side {
                DropSide::First => m < self.count,
                DropSide::Last => m >= n_out - self.count,
            })
            .collect())
    }
}

impl std::str::FromStr for ChannelDrop {
    type Err = Error;

    /// `first:k` or `last:k`.
    fn from_str(s: &str) -> Result<Self> {
        let (side, count) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected first:k or last:k, got `{s}`")))?;
        let side = match side {
            "first" => DropSide::First,
            "last" => DropSide::Last,
            other => return Err(Error::Config(format!("unknown channel side `{other}`"))),
        };
        let count = count
            .parse()
            .map_err(|_| Error::Config(format!("invalid channel count `{count}`")))?;
        Ok(Self { side, count })
    }
}

/// A padded batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(size * steps) x c_in`, row `b * steps + t`.
    pub inputs: Array2<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    /// Padded length.
    pub steps: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], c_in: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let steps = samples.iter().map(|s| s.steps).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::Data("batch of empty sequences".into()));
        }
        let mut inputs = Array2::zeros((samples.len() * steps, c_in));
        for (b, s) in samples.iter().enumerate() {
            if s.values.len() != s.steps * c_in {
                return Err(Error::Dimension {
                    context: "sample values (steps x c_in)",
                    expected: s.steps * c_in,
                    actual: s.values.len(),
                });
            }
            let block = ArrayView2::from_shape((s.steps, c_in), &s.values).expect("checked shape");
            inputs
                .slice_mut(s![b * steps..b * steps + s.steps, ..])
                .assign(&block);
        }
        Ok(Self {
            inputs,
            lengths: samples.iter().map(|s| s.steps).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            steps,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Validity flag per row.
    pub fn valid_rows(&self) -> Vec<bool> {
        let mut valid = vec![false; self.size() * self.steps];
        for (b, &len) in self.lengths.iter().enumerate() {
            valid[b * self.steps..b * self.steps + len].fill(true);
        }
        valid
    }
}

/// What a forward pass should do besides computing logits.
#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Dropout randomness; no dropout without it.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub drop: Option<ChannelDrop>,
    /// Keep what the backward pass needs.
    pub record: bool,
}

/// Recorded intermediates for the backward pass.
#[derive(Debug)]
struct Record {
    /// Inputs of every weight multiplication: the batch, then the
    /// (dropped-out) spikes of each hidden layer.
    pre_synaptic: Vec<Array2<f64>>,
    /// Neuron input currents of each hidden layer.
    currents: Vec<Array2<f64>>,
    /// Per junction: batch statistics in train mode, normalized values in eval mode.
    bn: Vec<Option<BnCache>>,
    traces: Vec<Vec<Complex64>>,
    /// Inverted-dropout factors per hidden layer.
    dropout: Vec<Option<Array2<f64>>>,
    mode: Mode,
}

#[derive(Debug)]
pub struct Forward {
    pub steps: usize,
    pub lengths: Vec<usize>,
    /// `(B * T) x c_out`, zero on padded rows.
    pub logits: Array2<f64>,
    /// Per hidden layer, `(B * T) x (h * n_out)`, before dropout.
    pub spikes: Vec<Array2<f64>>,
    /// Per hidden layer.
    pub stats: Vec<SequenceStats>,
    /// Per junction, present in train mode with batch norm on.
    pub batch_stats: Vec<Option<BatchStats>>,
    readout: Readout,
    record: Option<Record>,
}

impl Forward {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Class scores from the first `prefix` steps of each sequence (all if `None`).
    pub fn accumulated(&self, prefix: Option<usize>) -> Array2<f64> {
        let c_out = self.logits.ncols();
        let mut acc = Array2::zeros((self.batch_size(), c_out));
        for (b, &len) in self.lengths.iter().enumerate() {
            let upto = prefix.map_or(len, |p| p.min(len));
            let mut row = acc.row_mut(b);
            for t in 0..upto {
                row += &self.logits.row(b * self.steps + t);
            }
            if self.readout == Readout::Mean && upto > 0 {
                row /= upto as f64;
            }
        }
        acc
    }

    pub fn predictions(&self) -> Vec<usize> {
        rate_decode(&self.accumulated(None))
    }
}

/// Matrix product in row-major layout. ndarray picks column-major output
/// when both operands are column-contiguous, e.g. for a single input channel.
fn matmul(a: ndarray::ArrayView2<'_, f64>, b: ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let out = a.dot(&b);
    if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().into_owned()
    }
}

/// Argmax per row, ties to the lowest index.
pub fn rate_decode(accumulated: &Array2<f64>) -> Vec<usize> {
    accumulated
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Weights, normalizations and neuron layers. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub cfg: NetworkConfig,
    /// `h x c_in`
    pub w_in: Array2<f64>,
    /// `h x (h * n_out)` per junction between hidden layers.
    pub w_hidden: Vec<Array2<f64>>,
    /// `c_out x (h * n_out)`
    pub w_out: Array2<f64>,
    /// One per hidden layer plus one for the readout; empty without batch norm.
    pub norms: Vec<BatchNorm>,
    pub layers: Vec<SsmLayer>,
}

fn uniform_weights<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (1.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// Build a freshly initialized network.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    Network::new(cfg.clone(), seed)
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.channels();
        let w_in = uniform_weights(cfg.h, cfg.c_in, &mut rng);
        let w_hidden = (1..cfg.num_hidden_layers)
            .map(|_| uniform_weights(cfg.h, ch, &mut rng))
            .collect();
        let w_out = uniform_weights(cfg.c_out, ch, &mut rng);
        let layers = (0..cfg.num_hidden_layers)
            .map(|i| init_layer(i, cfg.neuron_config(), &cfg.init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norms = if cfg.batch_norm {
            (0..cfg.num_hidden_layers)
                .map(|_| BatchNorm::new(cfg.h, cfg.bn_momentum, cfg.bn_eps))
                .chain(std::iter::once(BatchNorm::new(cfg.c_out, cfg.bn_momentum, cfg.bn_eps)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            w_in,
            w_hidden,
            w_out,
            norms,
            layers,
        })
    }

    /// Same shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            w_in: Array2::zeros(self.w_in.raw_dim()),
            w_hidden: self.w_hidden.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            norms: self.norms.iter().map(BatchNorm::zeros_like).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| SsmLayer {
                    index: l.index,
                    cfg: l.cfg.clone(),
                    params: LayerParams::zeros(&l.cfg),
                })
                .collect(),
        }
    }

    /// Weight matrix feeding hidden layer `l` (`l == num_hidden_layers` is the readout).
    pub fn synapses(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.w_in
        } else if l == self.layers.len() {
            &self.w_out
        } else {
            &self.w_hidden[l - 1]
        }
    }

    fn synapses_mut(&mut self, l: usize) -> &mut Array2<f64> {
        if l == 0 {
            &mut self.w_in
        } else if l == self.layers.len() {
            &mut self.w_out
        } else {
            &mut self.w_hidden[l - 1]
        }
    }

    /// Every trainable tensor, in a fixed order. `B` and running statistics
    /// are not trainable.
    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (l, w) in std::iter::once(&self.w_in)
            .chain(&self.w_hidden)
            .chain(std::iter::once(&self.w_out))
            .enumerate()
        {
            out.push(Tensor {
                name: format!("synapses{l}"),
                group: ParamGroup::Other,
                data: w.as_slice().expect("standard layout"),
            });
        }
        for (l, bn) in self.norms.iter().enumerate() {
            out.push(Tensor {
                name: format!("norm{l}.gamma"),
                group: ParamGroup::Other,
                data: &bn.gamma,
            });
            out.push(Tensor {
                name: format!("norm{l}.beta"),
                group: ParamGroup::Other,
                data: &bn.beta,
            });
        }
        for layer in &self.layers {
            out.extend(layer.params.tensors(&format!("layer{}", layer.index)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (l, w) in std::iter::once(&mut self.w_in)
            .chain(self.w_hidden.iter_mut())
            .chain(std::iter::once(&mut self.w_out))
            .enumerate()
        {
            out.push(TensorMut {
                name: format!("synapses{l}"),
                group: ParamGroup::Other,
                data: w.as_slice_mut().expect("standard layout"),
            });
        }
        for (l, bn) in self.norms.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("norm{l}.gamma"),
                group: ParamGroup::Other,
                data: &mut bn.gamma,
            });
            out.push(TensorMut {
                name: format!("norm{l}.beta"),
                group: ParamGroup::Other,
                data: &mut bn.beta,
            });
        }
        for layer in self.layers.iter_mut() {
            let prefix = format!("layer{}", layer.index);
            out.extend(layer.params.tensors_mut(&prefix));
        }
        out
    }

    /// Number of trainable real scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Largest eigenvalue modulus over all hidden layers.
    pub fn max_eigenvalue_modulus(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.params.lambda.iter())
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn commit_batch_stats(&mut self, fwd: &Forward) {
        for (bn, stats) in self.norms.iter_mut().zip(&fwd.batch_stats) {
            if let Some(stats) = stats {
                bn.update_running(stats);
            }
        }
    }

    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Forward> {
        self.forward_with(batch, mode, ForwardOptions::default())
    }

    pub fn forward_with(&self, batch: &Batch, mode: Mode, opts: ForwardOptions<'_>) -> Result<Forward> {
        let cfg = &self.cfg;
        if batch.inputs.ncols() != cfg.c_in {
            return Err(Error::Dimension {
                context: "batch input channels",
                expected: cfg.c_in,
                actual: batch.inputs.ncols(),
            });
        }
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= cfg.c_out) {
            return Err(Error::Data(format!("label {label} outside [0, {})", cfg.c_out)));
        }
        if batch.inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("batch inputs".into()));
        }
        let drop_mask = opts.drop.map(|d| d.mask(cfg.n_out)).transpose()?;
        let mut rng = opts.rng;
        let record = opts.record;
        let valid = batch.valid_rows();
        let steps = batch.steps;
        let h = cfg.h;
        let ch = cfg.channels();

        let mut x = batch.inputs.clone();
        let mut rec = Record {
            pre_synaptic: Vec::new(),
            currents: Vec::new(),
            bn: Vec::new(),
            traces: Vec::new(),
            dropout: Vec::new(),
            mode,
        };
        let mut spikes_out = Vec::with_capacity(self.layers.len());
        let mut stats_out = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.norms.len());

        for (l, layer) in self.layers.iter().enumerate() {
            let mut current = matmul(x.view(), self.synapses(l).t());
            let (cache, stats) = self.normalize(l, &mut current, &valid, mode, record);
            rec.bn.push(cache);
            batch_stats.push(stats);
            if self.norms.is_empty() {
                mask_rows(&mut current, &valid);
            }

            let mut spikes = Array2::zeros((current.nrows(), ch));
            let mut trace = if record {
                vec![Complex64::new(0.0, 0.0); current.nrows() * layer.trace_width()]
            } else {
                Vec::new()
            };
            let cur = current.as_slice().expect("standard layout");
            let sp = spikes.as_slice_mut().expect("standard layout");
            let drop = drop_mask.as_deref();
            let per_sample: Vec<Result<SequenceStats>> = if record {
                sp.par_chunks_mut(steps * ch)
                    .zip(trace.par_chunks_mut(steps * layer.trace_width()))
                    .zip(cur.par_chunks(steps * h))
                    .zip(batch.lengths.par_iter())
                    .map(|(((sp, tr), cur), &len)| layer.run(cur, len, None, sp, Some(tr), drop))
                    .collect()
            } else {
                sp.par_chunks_mut(steps * ch)
                    .zip(cur.par_chunks(steps * h))
                    .zip(batch.lengths.par_iter())
                    .map(|((sp, cur), &len)| layer.run(cur, len, None, sp, None, drop))
                    .collect()
            };
            let mut stats = SequenceStats::default();
            for s in per_sample {
                stats.merge(&s?);
            }
            stats_out.push(stats);

            let mut next = spikes.clone();
            let factors = match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(rng)) if cfg.dropout > 0.0 => {
                    let keep = 1.0 - cfg.dropout;
                    let f = Array2::from_shape_simple_fn(next.raw_dim(), || {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    next *= &f;
                    Some(f)
                }
                _ => None,
            };
            rec.dropout.push(factors);
            if record {
                rec.pre_synaptic.push(std::mem::replace(&mut x, next));
                rec.currents.push(current);
                rec.traces.push(trace);
            } else {
                x = next;
            }
            spikes_out.push(spikes);
        }

        let readout_index = self.layers.len();
        let mut logits = matmul(x.view(), self.w_out.t());
        let (cache, stats) = self.normalize(readout_index, &mut logits, &valid, mode, record);
        rec.bn.push(cache);
        batch_stats.push(stats);
        mask_rows(&mut logits, &valid);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("readout logits".into()));
        }
        if record {
            rec.pre_synaptic.push(x);
        }
        if self.norms.is_empty() {
            batch_stats.clear();
        }
        Ok(Forward {
            steps,
            lengths: batch.lengths.clone(),
            logits,
            spikes: spikes_out,
            stats: stats_out,
            batch_stats,
            readout: cfg.readout,
            record: record.then_some(rec),
        })
    }

    fn normalize(
        &self,
        junction: usize,
        x: &mut Array2<f64>,
        valid: &[bool],
        mode: Mode,
        record: bool,
    ) -> (Option<BnCache>, Option<BatchStats>) {
        let Some(bn) = self.norms.get(junction) else {
            return (None, None);
        };
        match mode {
            Mode::Train => {
                let (cache, stats) = bn.forward_train(x, valid);
                (record.then_some(cache), Some(stats))
            }
            Mode::Eval => {
                let x_hat = record.then(|| {
                    let mut hat = x.clone();
                    for (mut row, &ok) in hat.rows_mut().into_iter().zip(valid) {
                        for k in 0..bn.channels() {
                            row[k] = if ok {
                                (row[k] - bn.running_mean[k]) / (bn.running_var[k] + bn.eps).sqrt()
                            } else {
                                0.0
                            };
                        }
                    }
                    hat
                });
                bn.forward_eval(x, valid);
                (
                    x_hat.map(|x_hat| BnCache {
                        x_hat,
                        inv_std: Vec::new(),
                    }),
                    None,
                )
            }
        }
    }

    /// Backpropagate `grad_scores = dL/d(class scores)` (`B x c_out`)
    /// through a recorded forward pass.
    pub fn backward(&self, fwd: &Forward, grad_scores: &Array2<f64>) -> Result<(Network, BackwardStats)> {
        let rec = fwd
            .record
            .as_ref()
            .ok_or_else(|| Error::Config("backward needs a recorded forward pass".into()))?;
        let cfg = &self.cfg;
        let steps = fwd.steps;
        let h = cfg.h;
        let ch = cfg.channels();
        if grad_scores.dim() != (fwd.batch_size(), cfg.c_out) {
            return Err(Error::Dimension {
                context: "score gradient rows",
                expected: fwd.batch_size(),
                actual: grad_scores.nrows(),
            });
        }
        let valid: Vec<bool> = {
            let mut v = vec![false; fwd.batch_size() * steps];
            for (b, &len) in fwd.lengths.iter().enumerate() {
                v[b * steps..b * steps + len].fill(true);
            }
            v
        };
        let mut grads = self.zeros_like();
        let mut stats = BackwardStats::default();

        // scores -> per-step logits
        let mut g = Array2::zeros(fwd.logits.raw_dim());
        for (b, &len) in fwd.lengths.iter().enumerate() {
            let scale = match cfg.readout {
                Readout::Sum => 1.0,
                Readout::Mean => 1.0 / len.max(1) as f64,
            };
            let gs = grad_scores.row(b).to_owned() * scale;
            for t in 0..len {
                g.row_mut(b * steps + t).assign(&gs);
            }
        }

        let readout = self.layers.len();
        for l in (0..=readout).rev() {
            // g is dL/d(normalized output) of junction l
            if let Some(bn) = self.norms.get(l) {
                let cache = rec.bn[l].as_ref().expect("recorded");
                match rec.mode {
                    Mode::Train => bn.backward_train(&mut g, cache, &valid, &mut grads.norms[l]),
                    Mode::Eval => bn.backward_eval(&mut g, &cache.x_hat, &valid, &mut grads.norms[l]),
                }
            } else {
                mask_rows(&mut g, &valid);
            }
            let x = &rec.pre_synaptic[l];
            *grads.synapses_mut(l) += &g.t().dot(x);
            if l == 0 {
                break;
            }
            // into the spikes of hidden layer l - 1
            let mut g_spikes = matmul(g.view(), self.synapses(l).view());
            if let Some(f) = &rec.dropout[l - 1] {
                g_spikes *= f;
            }
            let layer = &self.layers[l - 1];
            let currents = rec.currents[l - 1].as_slice().expect("standard layout");
            let trace = &rec.traces[l - 1];
            let gsp = g_spikes.as_slice().expect("standard layout");
            let mut g_cur = Array2::zeros((g_spikes.nrows(), h));
            let gc = g_cur.as_slice_mut().expect("standard layout");
            let per_sample: Vec<(LayerParams, BackwardStats)> = gc
                .par_chunks_mut(steps * h)
                .zip(currents.par_chunks(steps * h))
                .zip(trace.par_chunks(steps * layer.trace_width()))
                .zip(gsp.par_chunks(steps * ch))
                .zip(fwd.lengths.par_iter())
                .map(|((((gc, cur), tr), gs), &len)| {
                    let mut lg = LayerParams::zeros(&layer.cfg);
                    let st = layer.backward(cur, tr, len, gs, gc, &mut lg);
                    (lg, st)
                })
                .collect();
            let target = &mut grads.layers[l - 1].params;
            for (lg, st) in per_sample {
                add_layer_params(target, &lg);
                stats.reset_window_hits += st.reset_window_hits;
            }
            g = g_cur;
        }

        for t in grads.tensors() {
            if let Some(k) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}[{k}]", t.name)));
            }
        }
        Ok((grads, stats))
    }

    pub fn save_checkpoint(&self, path: &Path, train_state: Option<&serde_json::Value>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
            train_state: train_state.cloned(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Serialized network with an optional training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: Network,
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.network.cfg.validate()?;
        let net = &ckpt.network;
        let cfg = &net.cfg;
        let ch = cfg.channels();
        let shapes_ok = net.w_in.dim() == (cfg.h, cfg.c_in)
            && net.w_hidden.len() + 1 == cfg.num_hidden_layers
            && net.w_hidden.iter().all(|w| w.dim() == (cfg.h, ch))
            && net.w_out.dim() == (cfg.c_out, ch)
            && net.layers.len() == cfg.num_hidden_layers
            && net.norms.len() == if cfg.batch_norm { cfg.num_hidden_layers + 1 } else { 0 };
        if !shapes_ok {
            return Err(Error::Data("checkpoint tensors do not match its config".into()));
        }
        for layer in &net.layers {
            layer.params.check_shapes(&layer.cfg)?;
        }
        Ok(ckpt)
    }
}

fn mask_rows(x: &mut Array2<f64>, valid: &[bool]) {
    for (mut row, &ok) in x.axis_iter_mut(Axis(0)).zip(valid) {
        if !ok {
            row.fill(0.0);
        }
    }
}

fn add_layer_params(into: &mut LayerParams, from: &LayerParams) {
    fn add<T: Copy + std::ops::AddAssign>(a: &mut [T], b: &[T]) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += *y;
        }
    }
    add(&mut into.lambda, &from.lambda);
    add(&mut into.c, &from.c);
    add(&mut into.c_bias, &from.c_bias);
    add(&mut into.rho, &from.rho);
    add(&mut into.r_bias, &from.r_bias);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> NetworkConfig {
        let mut cfg = NetworkConfig::new(3, 4, 2, 5, 2, 3);
        cfg.dropout = 0.2;
        cfg
    }

    fn samples(count: usize, steps: usize, c_in: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let len = steps - (i % 3).min(steps - 1);
                Sample {
                    values: (0..len * c_in).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    steps: len,
                    label: i % 4,
                }
            })
            .collect()
    }

    fn batch_of(s: &[Sample], c_in: usize) -> Batch {
        Batch::from_samples(&s.iter().collect::<Vec<_>>(), c_in).unwrap()
    }

    #[test]
    fn smnist_shape_parameter_count() {
        let mut cfg = NetworkConfig::new(1, 10, 2, 96, 8, 8);
        cfg.init.rho = 0.5;
        let net = Network::new(cfg, 0).unwrap();
        assert_eq!(net.w_in.dim(), (96, 1));
        assert_eq!(net.w_hidden[0].dim(), (96, 768));
        assert_eq!(net.w_out.dim(), (10, 768));
        assert_eq!(net.num_trainable(), 113_204);
    }

    #[test]
    fn single_layer_is_valid() {
        let net = Network::new(NetworkConfig::new(2, 2, 1, 3, 2, 2), 1).unwrap();
        assert!(net.w_hidden.is_empty());
        let s = samples(2, 4, 2, 0);
        let f = net.forward(&batch_of(&s, 2), Mode::Eval).unwrap();
        assert_eq!(f.logits.dim(), (8, 2));
    }

    #[test]
    fn single_input_channel_runs_forward_and_backward() {
        // column-vector products used to come back in Fortran order
        let net = Network::new(NetworkConfig::new(1, 3, 2, 4, 2, 2), 0).unwrap();
        let batch = batch_of(&samples(3, 5, 1, 4), 1);
        let opts = ForwardOptions { record: true, ..Default::default() };
        let f = net.forward_with(&batch, Mode::Train, opts).unwrap();
        assert_eq!(f.logits.dim(), (15, 3));
        let g = Array2::from_elem((3, 3), 0.1);
        let (grads, _) = net.backward(&f, &g).unwrap();
        assert_eq!(grads.w_in.dim(), (4, 1));
        assert!(grads.w_in.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut cfg = tiny();
        cfg.batch_norm = false;
        let mut net = Network::new(cfg, 3).unwrap();
        net.w_in.fill(0.0);
        for w in &mut net.w_hidden {
            w.fill(0.0);
        }
        net.w_out.fill(0.0);
        let f = net.forward(&batch_of(&samples(4, 6, 3, 1), 3), Mode::Eval).unwrap();
        assert!(f.logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_padding_is_inert() {
        let net = Network::new(tiny(), 5).unwrap();
        let s = samples(5, 7, 3, 2);
        let batch = batch_of(&s, 3);
        let a = net.forward(&batch, Mode::Eval).unwrap();
        let b = net.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        // each sample alone gives the same scores as inside the padded batch
        let acc = a.accumulated(None);
        for (i, si) in s.iter().enumerate() {
            let alone = net.forward(&batch_of(std::slice::from_ref(si), 3), Mode::Eval).unwrap();
            let row = alone.accumulated(None);
            for k in 0..4 {
                assert!((row[[0, k]] - acc[[i, k]]).abs() < 1e-12);
            }
        }
        for (b, &len) in a.lengths.iter().enumerate() {
            for t in len..a.steps {
                assert!(a.logits.row(b * a.steps + t).iter().all(|v| *v == 0.0));
                assert!(a.spikes[0].row(b * a.steps + t).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn spikes_stay_in_codomain() {
        for act in [Activation::NonSigned, Activation::Signed] {
            let mut cfg = tiny();
            cfg.activation = act;
            let net = Network::new(cfg, 2).unwrap();
            let f = net.forward(&batch_of(&samples(4, 9, 3, 3), 3), Mode::Eval).unwrap();
            for sp in &f.spikes {
                assert_eq!(sp.ncols(), 15);
                assert!(sp.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
                if act == Activation::NonSigned {
                    assert!(sp.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn rate_decode_examples() {
        assert_eq!(rate_decode(&array![[1.0, 3.0, 2.0]]), vec![1]);
        assert_eq!(rate_decode(&array![[2.0, 2.0, 2.0]]), vec![0]);
        assert_eq!(rate_decode(&array![[0.0, 0.0, 5.0], [1.0, 0.0, 1.0]]), vec![2, 0]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut bn = BatchNorm::new(2, 0.1, 1e-5);
        bn.beta = vec![0.25, -1.0];
        let mut x = array![[3.0, 1.0], [3.0, 2.0], [3.0, 6.0], [3.0, -4.0]];
        bn.step(&mut x, Mode::Train);
        assert!(x.column(0).iter().all(|v| *v == 0.25));
        let c1: Vec<f64> = x.column(1).iter().map(|v| v + 1.0).collect();
        let mean = c1.iter().sum::<f64>() / 4.0;
        let var = c1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5 * 2.0);
        // running stats moved toward the batch statistics
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-12);

        let ident = BatchNorm::new(2, 0.1, 0.0);
        let mut y = array![[0.5, -2.0]];
        let before = y.clone();
        ident.forward_eval(&mut y, &[true]);
        assert_eq!(y, before);
    }

    #[test]
    fn channel_drop_masks() {
        let first = ChannelDrop { side: DropSide::First, count: 1 };
        let last: ChannelDrop = "last:2".parse().unwrap();
        assert_eq!(first.mask(3).unwrap(), vec![true, false, false]);
        assert_eq!(last.mask(3).unwrap(), vec![false, true, true]);
        assert!(ChannelDrop { side: DropSide::First, count: 4 }.mask(3).is_err());
        assert!("middle:1".parse::<ChannelDrop>().is_err());
    }

    #[test]
    fn dropped_channels_are_silent() {
        let net = Network::new(tiny(), 9).unwrap();
        let batch = batch_of(&samples(3, 8, 3, 4), 3);
        let opts = ForwardOptions {
            drop: Some(ChannelDrop { side: DropSide::Last, count: 1 }),
            ..Default::default()
        };
        let f = net.forward_with(&batch, Mode::Eval, opts).unwrap();
        for sp in &f.spikes {
            for row in sp.rows() {
                for j in 0..5 {
                    assert_eq!(row[j * 3 + 2], 0.0);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = Network::new(tiny(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let state = serde_json::json!({"step": 3});
        net.save_checkpoint(&path, Some(&state)).unwrap();
        let back = Network::load_checkpoint(&path).unwrap();
        assert_eq!(back.network, net);
        assert_eq!(back.train_state, Some(state));
        std::fs::write(&path, b"{}").unwrap();
        assert!(matches!(Network::load_checkpoint(&path), Err(Error::Data(_))));
    }

    #[test]
    fn backward_requires_record_and_zeroes_unreached() {
        let net = Network::new(tiny(), 4).unwrap();
        let batch = batch_of(&samples(3, 5, 3, 6), 3);
        let f = net.forward(&batch, Mode::Train).unwrap();
        assert!(net.backward(&f, &Array2::zeros((3, 4))).is_err());
        let opts = ForwardOptions { record: true, ..Default::default() };
        let f = net.forward_with(&batch, Mode::Train, opts).unwrap();
        let (g, _) = net.backward(&f, &Array2::zeros((3, 4))).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny();
        cfg.dropout = 1.0;
        assert!(Network::new(cfg, 0).is_err());
        assert!(Network::new(NetworkConfig::new(0, 2, 1, 1, 1, 1), 0).is_err());
        assert!(Network::new(NetworkConfig::new(1, 2, 1, 1, 1, 0), 0).is_err());
    }
}
