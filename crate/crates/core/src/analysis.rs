//! Cost accounting, spike statistics and the evaluation-time ablations.
//!
//! MACs are counted as one real multiply or one real add. A complex product
//! costs four multiplies and two adds; square roots are not counted.

use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::network::{Batch, ChannelDrop, ForwardOptions, Forward, Mode, Network, NetworkConfig};
use crate::neuron::{LayerState, NeuronConfig, SsmLayer, StabilityRegime};
use crate::numeric::Activation;
use crate::train::{fit, TrainConfig};

/// Per-neuron and per-layer parameter and MAC counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub n: usize,
    pub n_out: usize,
    pub h: usize,
    pub params_per_neuron: usize,
    pub params_per_layer: usize,
    pub m_rc: usize,
    pub m_ra: usize,
    pub m_r: usize,
    pub reset_macs_per_layer: usize,
    /// Dense synapses between two hidden layers, per timestep: `h * (h * n_out)`.
    pub synaptic_macs_per_step: usize,
}

pub const COST_HEADER: [&str; 10] = [
    "n",
    "n_out",
    "h",
    "params_per_neuron",
    "params_per_layer",
    "m_rc",
    "m_ra",
    "m_r",
    "reset_macs_per_layer",
    "synaptic_macs_per_step",
];

/// Real scalars per neuron: `(2 n_out + 3)(n + 1)`.
pub fn count_params(n: usize, n_out: usize) -> usize {
    (2 * n_out + 3) * (n + 1)
}

/// `(m_rc, m_ra, m_r)` = `(4 n_out + 1, 6 n, 4 n_out + 6 n + 1)`.
pub fn count_reset_macs(n: usize, n_out: usize) -> (usize, usize, usize) {
    let m_rc = 4 * n_out + 1;
    let m_ra = 6 * n;
    (m_rc, m_ra, m_rc + m_ra)
}

pub fn cost_report(n: usize, n_out: usize, h: usize) -> Result<CostReport> {
    if n == 0 || n_out == 0 || h == 0 {
        return Err(Error::Config(format!(
            "cost report needs positive n, n_out, h (got {n}, {n_out}, {h})"
        )));
    }
    let p = count_params(n, n_out);
    let (m_rc, m_ra, m_r) = count_reset_macs(n, n_out);
    Ok(CostReport {
        n,
        n_out,
        h,
        params_per_neuron: p,
        params_per_layer: p * h,
        m_rc,
        m_ra,
        m_r,
        reset_macs_per_layer: m_r * h,
        synaptic_macs_per_step: h * h * n_out,
    })
}

impl CostReport {
    pub fn row(&self) -> [usize; 10] {
        [
            self.n,
            self.n_out,
            self.h,
            self.params_per_neuron,
            self.params_per_layer,
            self.m_rc,
            self.m_ra,
            self.m_r,
            self.reset_macs_per_layer,
            self.synaptic_macs_per_step,
        ]
    }
}

pub fn write_cost_csv<W: std::io::Write>(out: W, reports: &[CostReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COST_HEADER)?;
    for r in reports {
        w.write_record(r.row().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Real multiplies and adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul: usize,
    pub add: usize,
}

impl OpCounter {
    pub fn total(&self) -> usize {
        self.mul + self.add
    }

    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.mul += 1;
        a * b
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.add += 1;
        a + b
    }

    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.add += 1;
        a - b
    }

    fn cmul(&mut self, a: Complex64, b: Complex64) -> Complex64 {
        let re = {
            let x = self.mul(a.re, b.re);
            let y = self.mul(a.im, b.im);
            self.sub(x, y)
        };
        let im = {
            let x = self.mul(a.re, b.im);
            let y = self.mul(a.im, b.re);
            self.add(x, y)
        };
        Complex64::new(re, im)
    }
}

/// Operations spent by the reset path of one layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct ResetOpCount {
    /// Per neuron, condition evaluation.
    pub condition: Vec<OpCounter>,
    /// Per neuron, reset action (zero if the condition did not fire).
    pub action: Vec<OpCounter>,
    pub fired: Vec<bool>,
    /// States after the step, for cross-checking against the layer.
    pub next: Vec<Complex64>,
}

/// Replays one layer step with counted arithmetic in the reset condition and
/// reset action. Outputs `y` are taken as given; the count covers the reset
/// path only. The complex norm is used for the condition.
pub fn counted_reset_step(layer: &SsmLayer, state: &LayerState, inputs: &[f64]) -> Result<ResetOpCount> {
    let NeuronConfig { h, n, n_out, .. } = layer.cfg;
    if inputs.len() != h || state.v.len() != h * n {
        return Err(Error::Dimension {
            context: "counted reset step",
            expected: h,
            actual: inputs.len(),
        });
    }
    let mut out = ResetOpCount {
        condition: Vec::with_capacity(h),
        action: Vec::with_capacity(h),
        fired: Vec::with_capacity(h),
        next: Vec::with_capacity(h * n),
    };
    for j in 0..h {
        let view = layer.neuron(j);
        let v = &state.v[j * n..(j + 1) * n];
        let (y, _) = view.output_projection(v)?;
        let u = view.state_transition(v, inputs[j])?;

        let mut cond = OpCounter::default();
        let mut sq = 0.0;
        for (m, ym) in y.iter().enumerate() {
            let re2 = cond.mul(ym.re, ym.re);
            let im2 = cond.mul(ym.im, ym.im);
            sq = if m == 0 {
                cond.add(re2, im2)
            } else {
                let partial = cond.add(sq, re2);
                cond.add(partial, im2)
            };
        }
        let norm = sq.sqrt();
        let scaled = cond.mul(norm, 1.0 / n_out as f64);
        let drive = cond.add(scaled, view.r_bias);
        let fired = layer.cfg.reset_enabled && drive >= 1.0;

        let mut act = OpCounter::default();
        let next: Vec<Complex64> = if fired {
            u.iter().map(|uk| act.cmul(view.rho, *uk)).collect()
        } else {
            u
        };
        out.condition.push(cond);
        out.action.push(act);
        out.fired.push(fired);
        out.next.extend(next);
    }
    Ok(out)
}

/// Per-channel activity counts over valid timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeCounter {
    activation: Activation,
    /// Per hidden layer, one count per channel.
    pub active: Vec<Vec<u64>>,
    pub steps: u64,
}

pub const SPIKE_RATE_HEADER: [&str; 3] = ["layer", "mean", "std"];

impl SpikeCounter {
    pub fn new(net: &Network) -> Self {
        Self::with_shape(net.cfg.activation, net.layers.len(), net.cfg.channels())
    }

    pub fn with_shape(activation: Activation, layers: usize, channels: usize) -> Self {
        Self {
            activation,
            active: vec![vec![0; channels]; layers],
            steps: 0,
        }
    }

    pub fn add(&mut self, fwd: &Forward) {
        for (counts, spikes) in self.active.iter_mut().zip(&fwd.spikes) {
            add_counts(counts, spikes, fwd.steps, &fwd.lengths);
        }
        self.steps += fwd.lengths.iter().map(|&l| l as u64).sum::<u64>();
    }

    /// Count a single record (`(B * steps) x channels`) into layer `layer`.
    pub fn add_layer(&mut self, layer: usize, spikes: &Array2<f64>, steps: usize, lengths: &[usize]) {
        add_counts(&mut self.active[layer], spikes, steps, lengths);
        if layer == 0 {
            self.steps += lengths.iter().map(|&l| l as u64).sum::<u64>();
        }
    }

    /// `(mean, std)` over the channels of each layer of the fraction of
    /// timesteps with a nonzero output.
    pub fn rates(&self) -> Result<Vec<(f64, f64)>> {
        if !self.activation.is_spiking() {
            return Err(Error::Config("spike rates are undefined for GELU".into()));
        }
        Ok(self
            .active
            .iter()
            .map(|counts| {
                if self.steps == 0 || counts.is_empty() {
                    return (0.0, 0.0);
                }
                let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / self.steps as f64).collect();
                population_stats(&rates)
            })
            .collect())
    }
}

fn add_counts(counts: &mut [u64], spikes: &Array2<f64>, steps: usize, lengths: &[usize]) {
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            for (c, s) in counts.iter_mut().zip(spikes.row(b * steps + t)) {
                *c += (*s != 0.0) as u64;
            }
        }
    }
}

/// Mean and population standard deviation.
pub fn population_stats(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    (mean, var.sqrt())
}

/// Spike rates of one forward pass.
pub fn spike_rate(fwd: &Forward, activation: Activation) -> Result<Vec<(f64, f64)>> {
    let channels = fwd.spikes.first().map_or(0, |s| s.ncols());
    let mut counter = SpikeCounter::with_shape(activation, fwd.spikes.len(), channels);
    counter.add(fwd);
    counter.rates()
}

pub fn write_spike_rate_csv<W: std::io::Write>(out: W, rates: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPIKE_RATE_HEADER)?;
    for (l, (mean, std)) in rates.iter().enumerate() {
        w.write_record([l.to_string(), mean.to_string(), std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A network evaluated with some output channels forced to zero.
#[derive(Clone, Copy, Debug)]
pub struct DroppedView<'a> {
    pub net: &'a Network,
    pub drop: ChannelDrop,
}

pub fn drop_channels(net: &Network, drop: ChannelDrop) -> Result<DroppedView<'_>> {
    drop.mask(net.cfg.n_out)?;
    Ok(DroppedView { net, drop })
}

impl DroppedView<'_> {
    pub fn forward(&self, batch: &Batch) -> Result<Forward> {
        let opts = ForwardOptions {
            drop: Some(self.drop),
            ..Default::default()
        };
        self.net.forward_with(batch, Mode::Eval, opts)
    }

    pub fn predict(&self, ds: &SequenceDataset, batch_size: usize) -> Result<Vec<usize>> {
        predict_with(self.net, ds, batch_size, Some(self.drop))
    }

    pub fn accuracy(&self, ds: &SequenceDataset, batch_size: usize) -> Result<f64> {
        Ok(accuracy_of(&self.predict(ds, batch_size)?, ds))
    }
}

/// Eval-mode predictions, optionally under a channel drop.
pub fn predict_with(
    net: &Network,
    ds: &SequenceDataset,
    batch_size: usize,
    drop: Option<ChannelDrop>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, ds.c_in)?;
        let opts = ForwardOptions {
            drop,
            ..Default::default()
        };
        out.extend(net.forward_with(&batch, Mode::Eval, opts)?.predictions());
    }
    Ok(out)
}

pub fn accuracy_of(predictions: &[usize], ds: &SequenceDataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(&ds.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    correct as f64 / ds.len() as f64
}

pub const ACCURACY_OVER_TIME_HEADER: [&str; 2] = ["t", "accuracy"];

/// Accuracy when decoding from the first `t` steps only, for every `t` in
/// `checkpoints`.
pub fn accuracy_over_time(
    net: &Network,
    ds: &SequenceDataset,
    checkpoints: &[usize],
    batch_size: usize,
) -> Result<Vec<(usize, f64)>> {
    let max_t = ds.max_steps();
    if let Some(&t) = checkpoints.iter().find(|&&t| t > max_t) {
        return Err(Error::Config(format!(
            "prefix length {t} exceeds the longest sequence ({max_t})"
        )));
    }
    let mut correct = vec![0usize; checkpoints.len()];
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, ds.c_in)?;
        let fwd = net.forward(&batch, Mode::Eval)?;
        for (c, &t) in correct.iter_mut().zip(checkpoints) {
            let pred = crate::network::rate_decode(&fwd.accumulated(Some(t)));
            *c += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
    }
    Ok(checkpoints
        .iter()
        .zip(correct)
        .map(|(&t, c)| (t, c as f64 / ds.len().max(1) as f64))
        .collect())
}

pub fn write_accuracy_over_time_csv<W: std::io::Write>(out: W, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ACCURACY_OVER_TIME_HEADER)?;
    for (t, a) in curve {
        w.write_record([t.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const ABLATION_HEADER: [&str; 3] = ["side", "count", "accuracy"];

/// Accuracy with `0..=n_out` channels dropped from each side.
pub fn channel_ablation(
    net: &Network,
    ds: &SequenceDataset,
    batch_size: usize,
) -> Result<Vec<(ChannelDrop, f64)>> {
    use crate::network::DropSide;
    let mut out = Vec::new();
    for side in [DropSide::First, DropSide::Last] {
        for count in 0..=net.cfg.n_out {
            let drop = ChannelDrop { side, count };
            out.push((drop, drop_channels(net, drop)?.accuracy(ds, batch_size)?));
        }
    }
    Ok(out)
}

pub fn write_ablation_csv<W: std::io::Write>(out: W, rows: &[(ChannelDrop, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for (d, a) in rows {
        let side = match d.side {
            crate::network::DropSide::First => "first",
            crate::network::DropSide::Last => "last",
        };
        w.write_record([side.to_string(), d.count.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One architecture of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SweepShape {
    pub h: usize,
    pub n: usize,
    pub n_out: usize,
}

/// `(h, n)` pairs with `h * n == total` for the given `n` values.
pub fn fixed_state_grid(total: usize, ns: &[usize], n_out: usize) -> Result<Vec<SweepShape>> {
    ns.iter()
        .map(|&n| {
            if n == 0 || total % n != 0 {
                Err(Error::Config(format!("{n} does not divide {total}")))
            } else {
                Ok(SweepShape { h: total / n, n, n_out })
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub shape: SweepShape,
    pub regime: StabilityRegime,
    pub reset: bool,
    pub seed: u64,
    pub outcome: std::result::Result<f64, String>,
}

pub const SWEEP_HEADER: [&str; 9] = [
    "h",
    "n",
    "n_out",
    "h_times_n",
    "h_times_n_out",
    "regime",
    "reset",
    "test_acc",
    "error",
];

/// Train and evaluate every shape under every `(regime, reset)` pair with a
/// shared seed. Failures are reported per cell.
#[allow(clippy::too_many_arguments)]
pub fn architecture_sweep(
    shapes: &[SweepShape],
    regimes: &[(StabilityRegime, bool)],
    base: &NetworkConfig,
    train_cfg: &TrainConfig,
    train: &SequenceDataset,
    test: &SequenceDataset,
    seed: u64,
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(shapes.len() * regimes.len());
    for &shape in shapes {
        for &(regime, reset) in regimes {
            let mut cfg = base.clone();
            cfg.h = shape.h;
            cfg.n = shape.n;
            cfg.n_out = shape.n_out;
            cfg.regime = regime;
            cfg.reset_enabled = reset;
            let outcome = Network::new(cfg, seed)
                .and_then(|net| fit(net, train, Some(test), train_cfg, &mut |_| {}))
                .and_then(|r| {
                    let preds = predict_with(&r.last, test, train_cfg.eval_batch_size, None)?;
                    Ok(accuracy_of(&preds, test))
                })
                .map_err(|e| e.to_string());
            rows.push(SweepRow {
                shape,
                regime,
                reset,
                seed,
                outcome,
            });
        }
    }
    rows
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let (acc, err) = match &r.outcome {
            Ok(a) => (a.to_string(), String::new()),
            Err(e) => (String::new(), e.clone()),
        };
        w.write_record([
            r.shape.h.to_string(),
            r.shape.n.to_string(),
            r.shape.n_out.to_string(),
            (r.shape.h * r.shape.n).to_string(),
            (r.shape.h * r.shape.n_out).to_string(),
            r.regime.to_string(),
            r.reset.to_string(),
            acc,
            err,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trainable real scalars of neuron `j`, counted from the parameter store
/// (fixed `B` included, shared reset parameters attributed to every neuron).
pub fn enumerate_neuron_scalars(layer: &SsmLayer, j: usize) -> usize {
    let v = layer.neuron(j);
    // rho is complex, r_bias real
    let reset = 2 + 1;
    2 * v.lambda.len() + v.b.len() + 2 * v.c.len() + 2 * v.c_bias.len() + reset
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_layer, LayerInit};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_examples() {
        assert_eq!(count_params(8, 4), 99);
        assert_eq!(count_params(2, 1), 15);
        assert_eq!(count_reset_macs(8, 4), (17, 48, 65));
        assert_eq!(count_reset_macs(1, 1), (5, 6, 11));
        let r = cost_report(8, 4, 256).unwrap();
        assert_eq!((r.params_per_neuron, r.params_per_layer, r.m_r), (99, 25344, 65));
        assert!(cost_report(0, 1, 1).is_err());
    }

    #[test]
    fn counted_reset_matches_formula_and_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let n_out = rng.gen_range(1..6);
            let mut cfg = NeuronConfig::new(3, n, n_out);
            cfg.regime = StabilityRegime::Stable;
            let mut layer = init_layer(0, cfg, &LayerInit::default(), &mut rng).unwrap();
            layer.params.r_bias.iter_mut().for_each(|b| *b = 1.0);
            let v: Vec<Complex64> = (0..3 * n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let state = LayerState::from_states(&layer.cfg, v).unwrap();
            let inputs = [0.3, -0.2, 0.9];
            let counted = counted_reset_step(&layer, &state, &inputs).unwrap();
            let (m_rc, m_ra, _) = count_reset_macs(n, n_out);
            assert!(counted.fired.iter().all(|f| *f));
            assert!(counted.condition.iter().all(|c| c.total() == m_rc));
            assert!(counted.action.iter().all(|c| c.total() == m_ra));
            let mut s = state.clone();
            layer.layer_step(&mut s, &inputs).unwrap();
            assert_eq!(s.v, counted.next);
        }
    }

    #[test]
    fn spike_rate_examples() {
        let mut c = SpikeCounter::with_shape(Activation::NonSigned, 1, 2);
        c.add_layer(0, &Array2::zeros((4, 2)), 4, &[4]);
        assert_eq!(c.rates().unwrap(), vec![(0.0, 0.0)]);

        let mut c = SpikeCounter::with_shape(Activation::Signed, 1, 2);
        c.add_layer(0, &array![[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]], 3, &[3]);
        assert_eq!(c.rates().unwrap(), vec![(0.5, 0.5)]);

        let c = SpikeCounter::with_shape(Activation::Gelu, 1, 2);
        assert!(c.rates().is_err());
    }

    #[test]
    fn padded_rows_do_not_count() {
        let mut c = SpikeCounter::with_shape(Activation::NonSigned, 1, 1);
        c.add_layer(0, &array![[1.0], [1.0], [1.0], [1.0]], 2, &[2, 1]);
        // three valid steps, three active
        assert_eq!(c.rates().unwrap(), vec![(1.0, 0.0)]);
    }

    #[test]
    fn grids_and_csv_headers() {
        let g = fixed_state_grid(2048, &[2, 8, 16, 32], 4).unwrap();
        let hs: Vec<usize> = g.iter().map(|s| s.h).collect();
        assert_eq!(hs, vec![1024, 256, 128, 64]);
        assert!(g.iter().all(|s| s.h * s.n == 2048));
        assert_eq!(256 * 4, 1024);
        assert!(fixed_state_grid(10, &[3], 1).is_err());

        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "h,n,n_out,h_times_n,h_times_n_out,regime,reset,test_acc,error\n"
        );
        let mut buf = Vec::new();
        write_spike_rate_csv(&mut buf, &[(0.25, 0.5)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layer,mean,std\n0,0.25,0.5\n");
    }
}
