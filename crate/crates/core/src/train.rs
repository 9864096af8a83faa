//! BPTT training: cross-entropy on time-aggregated readout, AdamW with
//! per-group learning rates and decoupled weight decay, a cosine schedule
//! over all optimizer steps, per-component gradient clipping, and the
//! eigenvalue clip of the stable regime after every step.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::SpikeCounter;
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::init::clip_eigenvalues;
use crate::network::{Batch, ForwardOptions, Mode, Network};
use crate::neuron::StabilityRegime;
use crate::params::ParamGroup;

pub const DEFAULT_GRAD_CLIP: f64 = 1e5;

/// Mean over the batch of `-log softmax(scores)[label]`.
pub fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(scores, labels).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to `scores`.
pub fn cross_entropy_with_grad(scores: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (rows, classes) = scores.dim();
    if labels.len() != rows || rows == 0 {
        return Err(Error::Dimension {
            context: "labels per score row",
            expected: rows,
            actual: labels.len(),
        });
    }
    let mut grad = Array2::zeros((rows, classes));
    let mut loss = 0.0;
    for (b, (row, &label)) in scores.rows().into_iter().zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} outside [0, {classes})")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for k in 0..classes {
            let p = (row[k] - log_z).exp();
            grad[[b, k]] = (p - if k == label { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    Ok((loss / rows as f64, grad))
}

/// Clamp every component to `[-bound, bound]`; returns how many were clamped.
pub fn clip_gradients(grads: &mut Network, bound: f64) -> Result<usize> {
    let mut clipped = 0;
    for t in grads.tensors_mut() {
        for (k, g) in t.data.iter_mut().enumerate() {
            if g.is_nan() {
                return Err(Error::NonFiniteGradient(format!("{}[{k}]", t.name)));
            }
            if g.abs() > bound {
                *g = g.clamp(-bound, bound);
                clipped += 1;
            }
        }
    }
    Ok(clipped)
}

/// `base * (1 + cos(π step / total)) / 2`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Learning rate and weight decay of every parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGroups {
    pub ssm: GroupHyper,
    pub other: GroupHyper,
    pub rho: GroupHyper,
    pub r_bias: GroupHyper,
}

impl ParamGroups {
    pub fn uniform(lr: f64, weight_decay: f64) -> Self {
        let g = GroupHyper { lr, weight_decay };
        Self {
            ssm: g,
            other: g,
            rho: g,
            r_bias: g,
        }
    }

    pub fn get(&self, group: ParamGroup) -> GroupHyper {
        match group {
            ParamGroup::Ssm => self.ssm,
            ParamGroup::Other => self.other,
            ParamGroup::Rho => self.rho,
            ParamGroup::RBias => self.r_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in ParamGroup::ALL {
            let h = self.get(g);
            if !(h.lr >= 0.0 && h.lr.is_finite()) || !(h.weight_decay >= 0.0 && h.weight_decay.is_finite()) {
                return Err(Error::Config(format!(
                    "group {g}: learning rate and weight decay must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments, clocks and the data/dropout random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub epoch: usize,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: &Network, total_steps: u64, seed: u64) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            epoch: 0,
            total_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One AdamW update at the scheduled learning rate, followed by the
/// eigenvalue clip in the stable regime. `B` is never touched.
pub fn adamw_step(
    net: &mut Network,
    state: &mut TrainState,
    groups: &ParamGroups,
    opt: &AdamW,
    grads: &Network,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let schedule = cosine_lr(1.0, state.step - 1, state.total_steps);
    let params = net.tensors_mut();
    if params.len() != grad_tensors.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            context: "optimizer tensors",
            expected: params.len(),
            actual: grad_tensors.len(),
        });
    }
    for (((p, g), m), v) in params
        .into_iter()
        .zip(&grad_tensors)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let hyper = groups.get(p.group);
        let lr = hyper.lr * schedule;
        let decay = 1.0 - lr * hyper.weight_decay;
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + opt.eps);
            p.data[k] = p.data[k] * decay - lr * update;
        }
    }
    if net.cfg.regime == StabilityRegime::Stable {
        for layer in net.layers.iter_mut() {
            clip_eigenvalues(&mut layer.params.lambda);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub groups: ParamGroups,
    pub adamw: AdamW,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, groups: ParamGroups, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            eval_batch_size: 256,
            groups,
            adamw: AdamW::default(),
            grad_clip: DEFAULT_GRAD_CLIP,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip bound must be positive".into()));
        }
        self.groups.validate()
    }
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
    /// Largest eigenvalue modulus after the update.
    pub max_eigenvalue_modulus: f64,
    pub reset_window_hits: u64,
    pub rho_grad_norm: f64,
    pub r_bias_grad_norm: f64,
    pub clipped_gradients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Mean spike rate per hidden layer on the test set; empty for GELU.
    pub spike_rates: Vec<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
    /// `(mean, std)` per hidden layer; `None` for GELU.
    pub spike_rates: Option<Vec<(f64, f64)>>,
}

/// Eval-mode accuracy, loss and spike rates over a dataset.
pub fn evaluate(net: &Network, ds: &SequenceDataset, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data(format!("dataset `{}` is empty", ds.name)));
    }
    let mut predictions = Vec::with_capacity(ds.len());
    let mut loss = 0.0;
    let mut counter = SpikeCounter::new(net);
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, ds.c_in)?;
        let fwd = net.forward(&batch, Mode::Eval)?;
        loss += cross_entropy(&fwd.accumulated(None), &batch.labels)? * chunk.len() as f64;
        predictions.extend(fwd.predictions());
        counter.add(&fwd);
    }
    let correct = predictions
        .iter()
        .zip(&ds.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        loss: loss / ds.len() as f64,
        predictions,
        spike_rates: counter.rates().ok(),
    })
}

/// Owns a network and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub state: TrainState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        net.cfg.validate()?;
        let total = (cfg.epochs * steps_per_epoch) as u64;
        let state = TrainState::new(&net, total, cfg.seed);
        Ok(Self { net, state, cfg })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn step(&mut self, batch: &Batch) -> Result<StepInfo> {
        let opts = ForwardOptions {
            rng: Some(&mut self.state.rng),
            drop: None,
            record: true,
        };
        let fwd = self.net.forward_with(batch, Mode::Train, opts)?;
        let scores = fwd.accumulated(None);
        let (loss, g_scores) = cross_entropy_with_grad(&scores, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        let correct = fwd
            .predictions()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        let (mut grads, bstats) = self.net.backward(&fwd, &g_scores)?;
        self.net.commit_batch_stats(&fwd);
        drop(fwd);
        let clipped = clip_gradients(&mut grads, self.cfg.grad_clip)?;
        let group_norm = |group: ParamGroup| {
            grads
                .tensors()
                .iter()
                .filter(|t| t.group == group)
                .flat_map(|t| t.data.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt()
        };
        let rho_grad_norm = group_norm(ParamGroup::Rho);
        let r_bias_grad_norm = group_norm(ParamGroup::RBias);
        adamw_step(&mut self.net, &mut self.state, &self.cfg.groups, &self.cfg.adamw, &grads)?;
        Ok(StepInfo {
            step: self.state.step,
            loss,
            correct,
            samples: batch.size(),
            max_eigenvalue_modulus: self.net.max_eigenvalue_modulus(),
            reset_window_hits: bstats.reset_window_hits,
            rho_grad_norm,
            r_bias_grad_norm,
            clipped_gradients: clipped,
        })
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitReport {
    pub metrics: Vec<EpochMetrics>,
    /// Network with the best evaluation accuracy (initial network if no epoch ran).
    pub best: Network,
    pub best_epoch: Option<usize>,
    pub last: Network,
    pub state: TrainState,
    /// Steps after which a stable-regime eigenvalue exceeded modulus one.
    pub eigenvalue_violations: u64,
    pub max_eigenvalue_modulus: f64,
    pub reset_window_hits: u64,
}

fn divergence(err: Error, epoch: usize, net: &Network) -> Error {
    match err {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::NonFiniteState { .. } => {
            Error::Divergence {
                epoch,
                regime: net.cfg.regime.to_string(),
                reset: net.cfg.reset_enabled,
                detail: err.to_string(),
            }
        }
        other => other,
    }
}

/// Train for `cfg.epochs` epochs of shuffled minibatches, evaluating on
/// `test` (or on `train` when absent) after each epoch. `on_step` sees
/// every optimizer step.
pub fn fit(
    net: Network,
    train: &SequenceDataset,
    test: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepInfo),
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Data(format!("training set `{}` is empty", train.name)));
    }
    train.validate()?;
    if let Some(test) = test {
        test.validate()?;
    }
    if train.c_in != net.cfg.c_in || train.c_out > net.cfg.c_out {
        return Err(Error::Config(format!(
            "dataset `{}` has c_in={} c_out={}, network expects c_in={} c_out={}",
            train.name, train.c_in, train.c_out, net.cfg.c_in, net.cfg.c_out
        )));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let mut trainer = Trainer::new(net, cfg.clone(), steps_per_epoch)?;
    let eval_set = test.unwrap_or(train);
    let mut report = FitReport {
        metrics: Vec::with_capacity(cfg.epochs),
        best: trainer.net.clone(),
        best_epoch: None,
        last: trainer.net.clone(),
        state: trainer.state.clone(),
        eigenvalue_violations: 0,
        max_eigenvalue_modulus: trainer.net.max_eigenvalue_modulus(),
        reset_window_hits: 0,
    };
    let mut best_acc = f64::NEG_INFINITY;
    let stable = trainer.net.cfg.regime == StabilityRegime::Stable;
    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        trainer.state.epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut trainer.state.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<_> = idx.iter().map(|&i| &train.samples[i]).collect();
            let batch = Batch::from_samples(&refs, train.c_in)?;
            let info = trainer
                .step(&batch)
                .map_err(|e| divergence(e, epoch, &trainer.net))?;
            loss_sum += info.loss * info.samples as f64;
            correct += info.correct;
            if stable && info.max_eigenvalue_modulus > 1.0 {
                report.eigenvalue_violations += 1;
            }
            report.max_eigenvalue_modulus = report.max_eigenvalue_modulus.max(info.max_eigenvalue_modulus);
            report.reset_window_hits += info.reset_window_hits;
            on_step(&info);
        }
        let eval = evaluate(&trainer.net, eval_set, cfg.eval_batch_size)
            .map_err(|e| divergence(e, epoch, &trainer.net))?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: test.map(|_| eval.accuracy),
            spike_rates: eval
                .spike_rates
                .map(|r| r.iter().map(|(mean, _)| *mean).collect())
                .unwrap_or_default(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        if !metrics.train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                regime: trainer.net.cfg.regime.to_string(),
                reset: trainer.net.cfg.reset_enabled,
                detail: format!("training loss {}", metrics.train_loss),
            });
        }
        if eval.accuracy > best_acc {
            best_acc = eval.accuracy;
            report.best = trainer.net.clone();
            report.best_epoch = Some(epoch);
        }
        report.metrics.push(metrics);
    }
    report.last = trainer.net;
    report.state = trainer.state;
    Ok(report)
}

/// Header of the per-epoch metrics CSV for `layers` hidden layers.
pub fn metrics_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "train_acc", "test_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..layers).map(|l| format!("spike_rate_layer{l}")));
    h
}

/// Per-epoch metrics as CSV. Wall time is left out so that reruns are
/// byte-identical; see [`write_timing_csv`].
pub fn write_metrics_csv<W: std::io::Write>(out: W, layers: usize, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(layers))?;
    for m in metrics {
        let mut row = vec![
            m.epoch.to_string(),
            format!("{:.17e}", m.train_loss),
            format!("{:.17e}", m.train_acc),
            m.test_acc.map(|a| format!("{a:.17e}")).unwrap_or_default(),
        ];
        for l in 0..layers {
            row.push(m.spike_rates.get(l).map(|r| format!("{r:.17e}")).unwrap_or_default());
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: std::io::Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "wall_time_s"])?;
    for m in metrics {
        w.write_record([m.epoch.to_string(), format!("{:.3}", m.wall_time)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_pattern_task;
    use crate::network::NetworkConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use num_complex::Complex64;

    fn small_net(regime: StabilityRegime, seed: u64) -> Network {
        let mut cfg = NetworkConfig::new(4, 2, 1, 6, 2, 2);
        cfg.regime = regime;
        Network::new(cfg, seed).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array2::zeros((1, 10));
        assert_abs_diff_eq!(cross_entropy(&uniform, &[3]).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy(&uniform, &[3]).unwrap(), 2.302585, epsilon = 1e-6);
        let confident = array![[0.0, 800.0]];
        assert!(cross_entropy(&confident, &[1]).unwrap() < 1e-300);
        let two = array![[1.0, 0.0], [0.0, 2.0]];
        let l1 = cross_entropy(&array![[1.0, 0.0]], &[0]).unwrap();
        let l2 = cross_entropy(&array![[0.0, 2.0]], &[0]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&two, &[0, 0]).unwrap(), (l1 + l2) / 2.0, epsilon = 1e-15);
        assert!(cross_entropy(&two, &[0, 2]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let scores = array![[0.3, -1.2, 2.0], [1.0, 0.5, -0.5]];
        let labels = [2, 0];
        let (_, g) = cross_entropy_with_grad(&scores, &labels).unwrap();
        let flat: Vec<f64> = scores.iter().copied().collect();
        let fd = crate::numeric::finite_difference_grad(
            |x| cross_entropy(&Array2::from_shape_vec((2, 3), x.to_vec()).unwrap(), &labels).unwrap(),
            &flat,
            1e-6,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert_abs_diff_eq!(cosine_lr(0.1, 100, 100), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(0.1, 50, 100), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn gradient_clip_examples() {
        let mut g = small_net(StabilityRegime::Stable, 0).zeros_like();
        g.w_in[[0, 0]] = 2e5;
        g.w_in[[0, 1]] = -3.0;
        g.w_out[[1, 1]] = -7e5;
        assert_eq!(clip_gradients(&mut g, 1e5).unwrap(), 2);
        assert_eq!(g.w_in[[0, 0]], 1e5);
        assert_eq!(g.w_in[[0, 1]], -3.0);
        assert_eq!(g.w_out[[1, 1]], -1e5);
        g.layers[0].params.r_bias[2] = f64::NAN;
        match clip_gradients(&mut g, 1e5) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layer0.r_bias[2]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_decay_and_identity() {
        let mut net = small_net(StabilityRegime::Unstable, 1);
        let before = net.clone();
        let zeros = net.zeros_like();
        let mut state = TrainState::new(&net, 10, 0);
        adamw_step(&mut net, &mut state, &ParamGroups::uniform(0.1, 0.0), &AdamW::default(), &zeros).unwrap();
        assert_eq!(net, before);

        let mut state = TrainState::new(&net, 0, 0);
        adamw_step(&mut net, &mut state, &ParamGroups::uniform(0.1, 0.01), &AdamW::default(), &zeros).unwrap();
        for (a, b) in net.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, y * (1.0 - 0.1 * 0.01));
            }
        }
        // fixed input vector untouched
        assert!(net.layers[0].params.b.iter().all(|b| *b == 1.0));
    }

    #[test]
    fn stable_step_clips_eigenvalues() {
        let mut net = small_net(StabilityRegime::Stable, 2);
        let mut grads = net.zeros_like();
        for g in grads.layers[0].params.lambda.iter_mut() {
            *g = Complex64::new(-1.0, -1.0);
        }
        let mut state = TrainState::new(&net, 0, 0);
        adamw_step(&mut net, &mut state, &ParamGroups::uniform(0.5, 0.0), &AdamW::default(), &grads).unwrap();
        assert!(net.max_eigenvalue_modulus() <= 1.0);
        assert!(net.max_eigenvalue_modulus() > 0.999);
    }

    #[test]
    fn zero_epochs_return_initial_network() {
        let ds = synth_pattern_task(2, 10, 4, 4, 0.0, 0).unwrap();
        let net = small_net(StabilityRegime::Stable, 3);
        let cfg = TrainConfig::new(0, 4, ParamGroups::uniform(1e-2, 0.0), 0);
        let report = fit(net.clone(), &ds, None, &cfg, &mut |_| {}).unwrap();
        assert!(report.metrics.is_empty());
        assert_eq!(report.last, net);
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let ds = synth_pattern_task(2, 12, 4, 4, 0.1, 1).unwrap();
        let net = small_net(StabilityRegime::Unstable, 4);
        let cfg = TrainConfig::new(1, 8, ParamGroups::uniform(0.0, 0.1), 0);
        let mut trainer = Trainer::new(net, cfg, 1).unwrap();
        let refs: Vec<_> = ds.samples.iter().collect();
        let batch = Batch::from_samples(&refs, 4).unwrap();
        let first = trainer.step(&batch).unwrap().loss;
        for _ in 0..3 {
            assert_eq!(trainer.step(&batch).unwrap().loss, first);
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let ds = synth_pattern_task(2, 12, 4, 6, 0.1, 2).unwrap();
        let cfg = TrainConfig::new(2, 4, ParamGroups::uniform(1e-2, 1e-3), 5);
        let run = || {
            let mut net_cfg = NetworkConfig::new(4, 2, 2, 4, 2, 2);
            net_cfg.dropout = 0.2;
            let net = Network::new(net_cfg, 5).unwrap();
            let r = fit(net, &ds, Some(&ds), &cfg, &mut |_| {}).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, 2, &r.metrics).unwrap();
            (buf, r.last)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na, nb);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,test_acc,spike_rate_layer0,spike_rate_layer1\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
