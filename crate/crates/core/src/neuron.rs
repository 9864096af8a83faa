//! Multiple-output spiking neuron with complex-diagonal linear dynamics and
//! a reset mechanism decoupled from spiking.
//!
//! Per neuron and timestep:
//!
//! ```text
//! u      = Λ ⊙ v[t] + B i[t]
//! y[t]   = C v[t] + c_bias
//! s[t]   = f(Re y[t] + Im y[t])
//! v[t+1] = ρ u   if  ||y[t]||_2 / n_out + r_bias >= 1
//!          u     otherwise
//! ```
//!
//! In the unstable regime every state component is clipped to modulus
//! [`NeuronConfig::state_clip`] after the reset branch.
//!
//! Layer storage is neuron-major: state `v[j * n + k]`, projection
//! `C[(j * n_out + m) * n + k]`, spike channel `j * n_out + m`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{clamp_modulus, l2_norm, Activation, Surrogate};
use crate::params::{complex_as_real, complex_as_real_mut, ParamGroup, Tensor, TensorMut};

pub const DEFAULT_STATE_CLIP: f64 = 1000.0;
const RESET_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityRegime {
    /// Eigenvalue moduli clipped to at most one after every update.
    Stable,
    /// Eigenvalues unconstrained, states clipped instead.
    Unstable,
}

impl std::fmt::Display for StabilityRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StabilityRegime::Stable => "stable",
            StabilityRegime::Unstable => "unstable",
        })
    }
}

/// Which vector the reset condition takes the norm of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetNorm {
    /// Complex output `y`.
    Complex,
    /// Real pre-activation `Re y + Im y`.
    RealProjection,
}

/// Whether `ρ` and `r_bias` are per neuron or shared by the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetSharing {
    PerNeuron,
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub h: usize,
    pub n: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub regime: StabilityRegime,
    pub reset_enabled: bool,
    pub reset_norm: ResetNorm,
    pub reset_sharing: ResetSharing,
    pub surrogate: Surrogate,
    pub state_clip: f64,
}

impl NeuronConfig {
    pub fn new(h: usize, n: usize, n_out: usize) -> Self {
        Self {
            h,
            n,
            n_out,
            activation: Activation::NonSigned,
            regime: StabilityRegime::Stable,
            reset_enabled: true,
            reset_norm: ResetNorm::Complex,
            reset_sharing: ResetSharing::PerNeuron,
            surrogate: Surrogate::default(),
            state_clip: DEFAULT_STATE_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.n == 0 || self.n_out == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive (h={}, n={}, n_out={})",
                self.h, self.n, self.n_out
            )));
        }
        if !(self.state_clip > 0.0) {
            return Err(Error::Config("state clip must be positive".into()));
        }
        self.surrogate.validate()
    }

    pub fn reset_slots(&self) -> usize {
        match self.reset_sharing {
            ResetSharing::PerNeuron => self.h,
            ResetSharing::PerLayer => 1,
        }
    }

    #[inline]
    fn reset_slot(&self, neuron: usize) -> usize {
        match self.reset_sharing {
            ResetSharing::PerNeuron => neuron,
            ResetSharing::PerLayer => 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.h * self.n_out
    }
}

/// Parameters of one hidden layer. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Diagonal of `A`, `h * n`.
    pub lambda: Vec<Complex64>,
    /// Input vector, fixed to ones and never updated, `h * n`.
    pub b: Vec<f64>,
    /// Output projection, `h * n_out * n`.
    pub c: Vec<Complex64>,
    /// Output bias, `h * n_out`.
    pub c_bias: Vec<Complex64>,
    /// Reset action scale, one per reset slot.
    pub rho: Vec<Complex64>,
    /// Reset condition bias, one per reset slot.
    pub r_bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(cfg: &NeuronConfig) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            lambda: vec![zero; cfg.h * cfg.n],
            b: vec![0.0; cfg.h * cfg.n],
            c: vec![zero; cfg.h * cfg.n_out * cfg.n],
            c_bias: vec![zero; cfg.h * cfg.n_out],
            rho: vec![zero; cfg.reset_slots()],
            r_bias: vec![0.0; cfg.reset_slots()],
        }
    }

    pub fn check_shapes(&self, cfg: &NeuronConfig) -> Result<()> {
        let checks: [(&'static str, usize, usize); 6] = [
            ("lambda", cfg.h * cfg.n, self.lambda.len()),
            ("b", cfg.h * cfg.n, self.b.len()),
            ("c", cfg.h * cfg.n_out * cfg.n, self.c.len()),
            ("c_bias", cfg.h * cfg.n_out, self.c_bias.len()),
            ("rho", cfg.reset_slots(), self.rho.len()),
            ("r_bias", cfg.reset_slots(), self.r_bias.len()),
        ];
        for (context, expected, actual) in checks {
            if expected != actual {
                return Err(Error::Dimension {
                    context,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Trainable tensors (`b` is excluded).
    pub fn tensors(&self, prefix: &str) -> Vec<Tensor<'_>> {
        vec![
            Tensor {
                name: format!("{prefix}.lambda"),
                group: ParamGroup::Ssm,
                data: complex_as_real(&self.lambda),
            },
            Tensor {
                name: format!("{prefix}.c"),
                group: ParamGroup::Ssm,
                data: complex_as_real(&self.c),
            },
            Tensor {
                name: format!("{prefix}.c_bias"),
                group: ParamGroup::Ssm,
                data: complex_as_real(&self.c_bias),
            },
            Tensor {
                name: format!("{prefix}.rho"),
                group: ParamGroup::Rho,
                data: complex_as_real(&self.rho),
            },
            Tensor {
                name: format!("{prefix}.r_bias"),
                group: ParamGroup::RBias,
                data: &self.r_bias,
            },
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut {
                name: format!("{prefix}.lambda"),
                group: ParamGroup::Ssm,
                data: complex_as_real_mut(&mut self.lambda),
            },
            TensorMut {
                name: format!("{prefix}.c"),
                group: ParamGroup::Ssm,
                data: complex_as_real_mut(&mut self.c),
            },
            TensorMut {
                name: format!("{prefix}.c_bias"),
                group: ParamGroup::Ssm,
                data: complex_as_real_mut(&mut self.c_bias),
            },
            TensorMut {
                name: format!("{prefix}.rho"),
                group: ParamGroup::Rho,
                data: complex_as_real_mut(&mut self.rho),
            },
            TensorMut {
                name: format!("{prefix}.r_bias"),
                group: ParamGroup::RBias,
                data: &mut self.r_bias,
            },
        ]
    }

    /// Real scalars stored for one neuron, fixed `B` included.
    pub fn scalars_per_neuron(&self, cfg: &NeuronConfig) -> usize {
        let per = |len: usize, complex: bool| len / cfg.h * if complex { 2 } else { 1 };
        let reset = |len: usize, complex: bool| {
            let slots = len * if complex { 2 } else { 1 };
            match cfg.reset_sharing {
                ResetSharing::PerNeuron => slots / cfg.h,
                ResetSharing::PerLayer => slots,
            }
        };
        per(self.lambda.len(), true)
            + per(self.b.len(), false)
            + per(self.c.len(), true)
            + per(self.c_bias.len(), true)
            + reset(self.rho.len(), true)
            + reset(self.r_bias.len(), false)
    }
}

/// Borrowed parameters of a single neuron.
#[derive(Clone, Copy, Debug)]
pub struct NeuronView<'a> {
    pub lambda: &'a [Complex64],
    pub b: &'a [f64],
    /// Row-major `n_out x n`.
    pub c: &'a [Complex64],
    pub c_bias: &'a [Complex64],
    pub rho: Complex64,
    pub r_bias: f64,
}

impl NeuronView<'_> {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_out(&self) -> usize {
        self.c_bias.len()
    }

    /// `Λ ⊙ v + B i`.
    pub fn state_transition(&self, v: &[Complex64], i: f64) -> Result<Vec<Complex64>> {
        self.check_state(v)?;
        if !i.is_finite() || v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("neuron state transition input".into()));
        }
        Ok(v
            .iter()
            .zip(self.lambda)
            .zip(self.b)
            .map(|((vk, lk), bk)| lk * vk + bk * i)
            .collect())
    }

    /// `y = C v + c_bias` and the real pre-activation `z = Re y + Im y`.
    pub fn output_projection(&self, v: &[Complex64]) -> Result<(Vec<Complex64>, Vec<f64>)> {
        self.check_state(v)?;
        let mut y = vec![Complex64::new(0.0, 0.0); self.n_out()];
        let mut z = vec![0.0; self.n_out()];
        project(self.c, self.c_bias, v, &mut y, &mut z);
        Ok((y, z))
    }

    /// `1` iff `||y|| / n_out + r_bias >= 1`.
    pub fn reset_condition(&self, y: &[Complex64], norm: ResetNorm) -> bool {
        let z: Vec<f64> = y.iter().map(|c| c.re + c.im).collect();
        reset_drive(y, &z, norm, self.r_bias) >= RESET_THRESHOLD
    }

    /// `v ↦ ρ v`.
    pub fn reset_action(&self, v: &[Complex64]) -> Vec<Complex64> {
        v.iter().map(|vk| self.rho * vk).collect()
    }

    fn check_state(&self, v: &[Complex64]) -> Result<()> {
        if v.len() != self.n() {
            return Err(Error::Dimension {
                context: "neuron state",
                expected: self.n(),
                actual: v.len(),
            });
        }
        Ok(())
    }
}

/// Elementwise output nonlinearity.
pub fn spike(z: &[f64], activation: Activation, surrogate: &Surrogate) -> Vec<f64> {
    z.iter().map(|&zk| activation.forward(zk, surrogate)).collect()
}

#[inline]
fn project(c: &[Complex64], c_bias: &[Complex64], v: &[Complex64], y: &mut [Complex64], z: &mut [f64]) {
    let n = v.len();
    for (m, (ym, zm)) in y.iter_mut().zip(z.iter_mut()).enumerate() {
        let row = &c[m * n..(m + 1) * n];
        let mut acc = c_bias[m];
        for (ck, vk) in row.iter().zip(v) {
            acc += ck * vk;
        }
        *ym = acc;
        *zm = acc.re + acc.im;
    }
}

#[inline]
fn reset_drive(y: &[Complex64], z: &[f64], norm: ResetNorm, r_bias: f64) -> f64 {
    let magnitude = match norm {
        ResetNorm::Complex => l2_norm(y),
        ResetNorm::RealProjection => z.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    magnitude / y.len() as f64 + r_bias
}

/// Per-neuron state of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    /// `h * n` states.
    pub v: Vec<Complex64>,
    /// Index of the next step.
    pub t: usize,
}

impl LayerState {
    pub fn zeros(cfg: &NeuronConfig) -> Self {
        Self {
            v: vec![Complex64::new(0.0, 0.0); cfg.h * cfg.n],
            t: 0,
        }
    }

    pub fn from_states(cfg: &NeuronConfig, v: Vec<Complex64>) -> Result<Self> {
        if v.len() != cfg.h * cfg.n {
            return Err(Error::Dimension {
                context: "layer state",
                expected: cfg.h * cfg.n,
                actual: v.len(),
            });
        }
        Ok(Self { v, t: 0 })
    }

    pub fn max_modulus(&self) -> f64 {
        self.v.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Everything one [`SsmLayer::layer_step`] produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// `h * n_out`
    pub y: Vec<Complex64>,
    pub z: Vec<f64>,
    pub spikes: Vec<f64>,
    /// One flag per neuron.
    pub resets: Vec<bool>,
    /// Number of state components clipped in this step.
    pub clipped: usize,
}

/// Full record of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `v[0] ..= v[T]`
    pub states: Vec<Vec<Complex64>>,
    pub steps: Vec<StepOutput>,
}

/// Counters gathered while running a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceStats {
    pub resets: u64,
    pub clipped: u64,
    pub max_modulus: f64,
}

impl SequenceStats {
    pub fn merge(&mut self, other: &SequenceStats) {
        self.resets += other.resets;
        self.clipped += other.clipped;
        self.max_modulus = self.max_modulus.max(other.max_modulus);
    }
}

/// Counters gathered by the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Reset-condition evaluations that fell inside the surrogate window.
    pub reset_window_hits: u64,
}

/// Quantities of one neuron step that the backward pass needs.
struct NeuronStep {
    drive: f64,
    gate: f64,
    clipped: usize,
}

/// One hidden layer of `h` multiple-output neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmLayer {
    pub index: usize,
    pub cfg: NeuronConfig,
    pub params: LayerParams,
}

impl SsmLayer {
    pub fn new(index: usize, cfg: NeuronConfig, params: LayerParams) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self { index, cfg, params })
    }

    #[inline]
    pub fn neuron(&self, j: usize) -> NeuronView<'_> {
        let NeuronConfig { n, n_out, .. } = self.cfg;
        let slot = self.cfg.reset_slot(j);
        NeuronView {
            lambda: &self.params.lambda[j * n..(j + 1) * n],
            b: &self.params.b[j * n..(j + 1) * n],
            c: &self.params.c[j * n_out * n..(j + 1) * n_out * n],
            c_bias: &self.params.c_bias[j * n_out..(j + 1) * n_out],
            rho: self.params.rho[slot],
            r_bias: self.params.r_bias[slot],
        }
    }

    /// Advance neuron `j` by one step: fills `y`, `z` and writes `v[t+1]`
    /// into `next`.
    #[inline]
    fn neuron_forward(
        &self,
        j: usize,
        v: &[Complex64],
        i: f64,
        y: &mut [Complex64],
        z: &mut [f64],
        next: &mut [Complex64],
        clip_mask: &mut [bool],
    ) -> NeuronStep {
        let view = self.neuron(j);
        project(view.c, view.c_bias, v, y, z);
        self.neuron_advance(&view, v, i, y, z, next, clip_mask)
    }

    /// Transition, reset and clip of one neuron given its projection.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn neuron_advance(
        &self,
        view: &NeuronView<'_>,
        v: &[Complex64],
        i: f64,
        y: &[Complex64],
        z: &[f64],
        next: &mut [Complex64],
        clip_mask: &mut [bool],
    ) -> NeuronStep {
        for k in 0..v.len() {
            next[k] = view.lambda[k] * v[k] + view.b[k] * i;
        }
        let (drive, gate) = self.reset_gate(view, y, z);
        if gate == 1.0 {
            for nk in next.iter_mut() {
                *nk *= view.rho;
            }
        } else if gate != 0.0 {
            let scale = Complex64::new(1.0, 0.0) + (view.rho - 1.0) * gate;
            for nk in next.iter_mut() {
                *nk *= scale;
            }
        }
        let mut clipped = 0;
        if self.cfg.regime == StabilityRegime::Unstable {
            let bound = self.cfg.state_clip;
            for (nk, flag) in next.iter_mut().zip(clip_mask.iter_mut()) {
                *flag = nk.norm() > bound;
                if *flag {
                    *nk = clamp_modulus(*nk, bound);
                    clipped += 1;
                }
            }
        }
        NeuronStep {
            drive,
            gate,
            clipped,
        }
    }

    #[inline]
    fn reset_gate(&self, view: &NeuronView<'_>, y: &[Complex64], z: &[f64]) -> (f64, f64) {
        if self.cfg.reset_enabled {
            let drive = reset_drive(y, z, self.cfg.reset_norm, view.r_bias);
            (drive, self.cfg.surrogate.step_inclusive(drive, RESET_THRESHOLD))
        } else {
            (0.0, 0.0)
        }
    }

    /// What the backward pass needs from a recorded step. The next state is
    /// only rebuilt when clipping can occur.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn replay(
        &self,
        view: &NeuronView<'_>,
        v: &[Complex64],
        i: f64,
        y: &[Complex64],
        z: &[f64],
        next: &mut [Complex64],
        clip_mask: &mut [bool],
    ) -> NeuronStep {
        if self.cfg.regime == StabilityRegime::Unstable {
            return self.neuron_advance(view, v, i, y, z, next, clip_mask);
        }
        let (drive, gate) = self.reset_gate(view, y, z);
        NeuronStep {
            drive,
            gate,
            clipped: 0,
        }
    }

    /// One step for the whole layer; `inputs` holds one current per neuron.
    pub fn layer_step(&self, state: &mut LayerState, inputs: &[f64]) -> Result<StepOutput> {
        let NeuronConfig { h, n, n_out, .. } = self.cfg;
        if inputs.len() != h {
            return Err(Error::Dimension {
                context: "layer inputs",
                expected: h,
                actual: inputs.len(),
            });
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState {
                layer: self.index,
                step: state.t,
            });
        }
        let mut out = StepOutput {
            y: vec![Complex64::new(0.0, 0.0); h * n_out],
            z: vec![0.0; h * n_out],
            spikes: vec![0.0; h * n_out],
            resets: vec![false; h],
            clipped: 0,
        };
        let mut next = vec![Complex64::new(0.0, 0.0); n];
        let mut clip_mask = vec![false; n];
        for j in 0..h {
            let ch = j * n_out..(j + 1) * n_out;
            let step = self.neuron_forward(
                j,
                &state.v[j * n..(j + 1) * n],
                inputs[j],
                &mut out.y[ch.clone()],
                &mut out.z[ch.clone()],
                &mut next,
                &mut clip_mask,
            );
            state.v[j * n..(j + 1) * n].copy_from_slice(&next);
            out.resets[j] = step.gate != 0.0;
            out.clipped += step.clipped;
            for (s, &zm) in out.spikes[ch.clone()].iter_mut().zip(&out.z[ch]) {
                *s = self.cfg.activation.forward(zm, &self.cfg.surrogate);
            }
        }
        if state.v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteState {
                layer: self.index,
                step: state.t,
            });
        }
        state.t += 1;
        Ok(out)
    }

    /// Unroll from the zero state over `inputs` (`T x h`, row-major) and
    /// record everything.
    pub fn sequence_forward(&self, inputs: &[f64]) -> Result<Trajectory> {
        self.sequence_forward_from(LayerState::zeros(&self.cfg), inputs)
    }

    pub fn sequence_forward_from(&self, mut state: LayerState, inputs: &[f64]) -> Result<Trajectory> {
        let h = self.cfg.h;
        if inputs.is_empty() || inputs.len() % h != 0 {
            return Err(Error::Dimension {
                context: "input sequence (T x h)",
                expected: h,
                actual: inputs.len(),
            });
        }
        let mut states = vec![state.v.clone()];
        let mut steps = Vec::with_capacity(inputs.len() / h);
        for row in inputs.chunks(h) {
            steps.push(self.layer_step(&mut state, row)?);
            states.push(state.v.clone());
        }
        Ok(Trajectory { states, steps })
    }

    /// Complex values recorded per timestep by [`SsmLayer::run`]: the
    /// `h * n` pre-step states followed by the `h * n_out` projections.
    pub fn trace_width(&self) -> usize {
        self.cfg.h * (self.cfg.n + self.cfg.n_out)
    }

    /// Batched hot path: run `steps` timesteps of `inputs` (`steps x h`)
    /// from `init` (zeros if `None`), writing activations to `spikes`
    /// (`steps x h*n_out`) and, if given, states and projections to `trace`
    /// (`steps x trace_width`). Channels flagged in `drop` are forced to zero.
    pub fn run(
        &self,
        inputs: &[f64],
        steps: usize,
        init: Option<&[Complex64]>,
        spikes: &mut [f64],
        mut trace: Option<&mut [Complex64]>,
        drop: Option<&[bool]>,
    ) -> Result<SequenceStats> {
        let NeuronConfig { h, n, n_out, .. } = self.cfg;
        debug_assert!(inputs.len() >= steps * h);
        debug_assert!(spikes.len() >= steps * h * n_out);
        let mut v = match init {
            Some(init) => init.to_vec(),
            None => vec![Complex64::new(0.0, 0.0); h * n],
        };
        let mut y = vec![Complex64::new(0.0, 0.0); n_out];
        let mut z = vec![0.0; n_out];
        let mut next = vec![Complex64::new(0.0, 0.0); n];
        let mut clip_mask = vec![false; n];
        let mut stats = SequenceStats::default();
        let width = self.trace_width();
        for t in 0..steps {
            if let Some(trace) = trace.as_deref_mut() {
                trace[t * width..t * width + h * n].copy_from_slice(&v);
            }
            let row = &inputs[t * h..(t + 1) * h];
            let out = &mut spikes[t * h * n_out..(t + 1) * h * n_out];
            for j in 0..h {
                let vj = &mut v[j * n..(j + 1) * n];
                let step = self.neuron_forward(j, vj, row[j], &mut y, &mut z, &mut next, &mut clip_mask);
                vj.copy_from_slice(&next);
                if let Some(trace) = trace.as_deref_mut() {
                    let at = t * width + h * n + j * n_out;
                    trace[at..at + n_out].copy_from_slice(&y);
                }
                stats.resets += (step.gate != 0.0) as u64;
                stats.clipped += step.clipped as u64;
                let o = &mut out[j * n_out..(j + 1) * n_out];
                for m in 0..n_out {
                    o[m] = if drop.is_some_and(|d| d[m]) {
                        0.0
                    } else {
                        self.cfg.activation.forward(z[m], &self.cfg.surrogate)
                    };
                }
            }
            let mut finite = true;
            for c in &v {
                let m = c.norm_sqr();
                finite &= m.is_finite();
                stats.max_modulus = stats.max_modulus.max(m);
            }
            if !finite {
                return Err(Error::NonFiniteState {
                    layer: self.index,
                    step: t,
                });
            }
        }
        stats.max_modulus = stats.max_modulus.sqrt();
        Ok(stats)
    }

    /// Reverse sweep over a sequence recorded by [`SsmLayer::run`].
    ///
    /// `grad_spikes` is `dL/ds` (`steps x h*n_out`); writes `dL/di` into
    /// `grad_inputs` (`steps x h`) and accumulates parameter gradients into
    /// `grads`. The gradient of `B` is not computed.
    pub fn backward(
        &self,
        inputs: &[f64],
        trace: &[Complex64],
        steps: usize,
        grad_spikes: &[f64],
        grad_inputs: &mut [f64],
        grads: &mut LayerParams,
    ) -> BackwardStats {
        let NeuronConfig { h, n, n_out, .. } = self.cfg;
        let cfg = &self.cfg;
        let mut stats = BackwardStats::default();
        let zero = Complex64::new(0.0, 0.0);
        // dL/dv[t+1] per neuron, carried backwards in time
        let mut carry = vec![zero; h * n];
        let width = self.trace_width();
        let mut z = vec![0.0; n_out];
        let mut next = vec![zero; n];
        let mut clip_mask = vec![false; n];
        let mut gy = vec![zero; n_out];
        let mut gz = vec![0.0; n_out];
        let mut gu = vec![zero; n];
        for t in (0..steps).rev() {
            let states = &trace[t * width..t * width + h * n];
            let outputs = &trace[t * width + h * n..(t + 1) * width];
            let row = &inputs[t * h..(t + 1) * h];
            let gs_row = &grad_spikes[t * h * n_out..(t + 1) * h * n_out];
            for j in 0..h {
                let v = &states[j * n..(j + 1) * n];
                let y = &outputs[j * n_out..(j + 1) * n_out];
                for (zm, ym) in z.iter_mut().zip(y) {
                    *zm = ym.re + ym.im;
                }
                let view = self.neuron(j);
                let step = self.replay(&view, v, row[j], y, &z, &mut next, &mut clip_mask);
                let slot = cfg.reset_slot(j);
                let gnext = &mut carry[j * n..(j + 1) * n];

                // saturated components pass no gradient
                if step.clipped > 0 {
                    for (g, &clipped) in gnext.iter_mut().zip(&clip_mask) {
                        if clipped {
                            *g = zero;
                        }
                    }
                }

                for gzm in gz.iter_mut() {
                    *gzm = 0.0;
                }
                for gym in gy.iter_mut() {
                    *gym = zero;
                }

                if cfg.reset_enabled {
                    // next = u * m, m = 1 + gate (ρ - 1); recover u from v
                    let scale = Complex64::new(1.0, 0.0) + (view.rho - 1.0) * step.gate;
                    let mut g_scale = zero;
                    for k in 0..n {
                        let u = view.lambda[k] * v[k] + view.b[k] * row[j];
                        g_scale += gnext[k] * u.conj();
                        gu[k] = gnext[k] * scale.conj();
                    }
                    grads.rho[slot] += g_scale * step.gate;
                    let window = cfg.surrogate.window(step.drive, RESET_THRESHOLD);
                    if window != 0.0 {
                        stats.reset_window_hits += 1;
                        let g_gate = (g_scale * (view.rho - 1.0).conj()).re;
                        let g_drive = g_gate * window;
                        grads.r_bias[slot] += g_drive;
                        let inv = g_drive / n_out as f64;
                        match cfg.reset_norm {
                            ResetNorm::Complex => {
                                let norm = l2_norm(y);
                                if norm > 0.0 {
                                    for (gym, ym) in gy.iter_mut().zip(y) {
                                        *gym += ym * (inv / norm);
                                    }
                                }
                            }
                            ResetNorm::RealProjection => {
                                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                                if norm > 0.0 {
                                    for (gzm, zm) in gz.iter_mut().zip(&z) {
                                        *gzm += zm * (inv / norm);
                                    }
                                }
                            }
                        }
                    }
                } else {
                    gu.copy_from_slice(gnext);
                }

                // u = Λ v + B i
                let mut gi = 0.0;
                let glam = &mut grads.lambda[j * n..(j + 1) * n];
                for k in 0..n {
                    glam[k] += gu[k] * v[k].conj();
                    gi += view.b[k] * gu[k].re;
                    gnext[k] = gu[k] * view.lambda[k].conj();
                }
                grad_inputs[t * h + j] = gi;

                // s = f(z), z = Re y + Im y, y = C v + c_bias
                let gs = &gs_row[j * n_out..(j + 1) * n_out];
                for m in 0..n_out {
                    gz[m] += gs[m] * cfg.activation.derivative(z[m], &cfg.surrogate);
                    gy[m] += Complex64::new(gz[m], gz[m]);
                }
                let gc = &mut grads.c[j * n_out * n..(j + 1) * n_out * n];
                let gcb = &mut grads.c_bias[j * n_out..(j + 1) * n_out];
                for m in 0..n_out {
                    let g = gy[m];
                    if g == zero {
                        continue;
                    }
                    gcb[m] += g;
                    let row_c = &view.c[m * n..(m + 1) * n];
                    let row_gc = &mut gc[m * n..(m + 1) * n];
                    for k in 0..n {
                        row_gc[k] += g * v[k].conj();
                        gnext[k] += g * row_c[k].conj();
                    }
                }
            }
        }
        stats
    }
}
