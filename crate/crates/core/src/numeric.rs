//! Scalar primitives shared by the neuron models: thresholds, their
//! boxcar surrogates, GELU, complex norms and a central-difference
//! gradient used as a test oracle.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex scalar used for eigenvalues, states and projections.
pub type ComplexScalar = Complex64;

/// Spiking threshold of the output nonlinearity.
pub const SPIKE_THRESHOLD: f64 = 1.0;

/// `1` iff `x > theta`.
#[inline]
pub fn heaviside(x: f64, theta: f64) -> f64 {
    if x > theta {
        1.0
    } else {
        0.0
    }
}

/// Boxcar ("car-box") surrogate derivative of a step at `theta`.
///
/// Height `1/(2w)` on the closed window `|x - theta| <= w`, so it
/// integrates to one.
pub fn boxcar_surrogate(x: f64, theta: f64, half_width: f64) -> Result<f64> {
    if !(half_width > 0.0) {
        return Err(Error::Config(format!(
            "surrogate half-width must be positive, got {half_width}"
        )));
    }
    Ok(boxcar(x, theta, half_width))
}

#[inline]
fn boxcar(x: f64, theta: f64, half_width: f64) -> f64 {
    if (x - theta).abs() <= half_width {
        0.5 / half_width
    } else {
        0.0
    }
}

/// Ternary spike: `+1` above `theta`, `-1` below `-theta`, else `0`.
#[inline]
pub fn signed_spike(x: f64, theta: f64) -> f64 {
    if x > theta {
        1.0
    } else if x < -theta {
        -1.0
    } else {
        0.0
    }
}

/// Gaussian error linear unit, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Euclidean norm of a complex vector (square root of the summed squared moduli).
#[inline]
pub fn l2_norm(y: &[Complex64]) -> f64 {
    y.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = point[k];
        point[k] = orig + eps;
        let plus = f(&point);
        point[k] = orig - eps;
        let minus = f(&point);
        point[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective not finite around coordinate {k}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Surrogate-gradient settings for both Heaviside nonlinearities.
///
/// With `smooth` set, the forward pass uses the integral of the boxcar (a
/// clamped ramp) instead of the hard step, so that the backward pass is the
/// exact derivative. Only meant for gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub half_width: f64,
    #[serde(default)]
    pub smooth: bool,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self {
            half_width: 0.5,
            smooth: false,
        }
    }
}

impl Surrogate {
    pub fn new(half_width: f64) -> Result<Self> {
        let s = Self {
            half_width,
            smooth: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn smooth(half_width: f64) -> Result<Self> {
        let s = Self {
            half_width,
            smooth: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        boxcar_surrogate(0.0, 0.0, self.half_width).map(|_| ())
    }

    /// Backward derivative of a step at `theta`.
    #[inline]
    pub fn window(&self, x: f64, theta: f64) -> f64 {
        boxcar(x, theta, self.half_width)
    }

    #[inline]
    fn ramp(&self, x: f64, theta: f64) -> f64 {
        ((x - theta + self.half_width) / (2.0 * self.half_width)).clamp(0.0, 1.0)
    }

    /// Forward step with strict threshold (`x > theta`).
    #[inline]
    pub fn step(&self, x: f64, theta: f64) -> f64 {
        if self.smooth {
            self.ramp(x, theta)
        } else {
            heaviside(x, theta)
        }
    }

    /// Forward step with inclusive threshold (`x >= theta`).
    #[inline]
    pub fn step_inclusive(&self, x: f64, theta: f64) -> f64 {
        if self.smooth {
            self.ramp(x, theta)
        } else if x >= theta {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn signed(&self, x: f64, theta: f64) -> f64 {
        if self.smooth {
            self.ramp(x, theta) - self.ramp(-x, theta)
        } else {
            signed_spike(x, theta)
        }
    }

    #[inline]
    pub fn signed_window(&self, x: f64, theta: f64) -> f64 {
        self.window(x, theta) + self.window(x, -theta)
    }
}

/// Output nonlinearity of a neuron channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Unipolar `{0, 1}` spikes.
    NonSigned,
    /// Bipolar `{-1, 0, 1}` spikes.
    Signed,
    /// Continuous GELU, no quantization.
    Gelu,
}

impl Activation {
    pub fn is_spiking(self) -> bool {
        !matches!(self, Activation::Gelu)
    }

    #[inline]
    pub fn forward(self, z: f64, surrogate: &Surrogate) -> f64 {
        match self {
            Activation::NonSigned => surrogate.step(z, SPIKE_THRESHOLD),
            Activation::Signed => surrogate.signed(z, SPIKE_THRESHOLD),
            Activation::Gelu => gelu(z),
        }
    }

    /// Backward derivative: boxcar surrogate for spikes, exact for GELU.
    #[inline]
    pub fn derivative(self, z: f64, surrogate: &Surrogate) -> f64 {
        match self {
            Activation::NonSigned => surrogate.window(z, SPIKE_THRESHOLD),
            Activation::Signed => surrogate.signed_window(z, SPIKE_THRESHOLD),
            Activation::Gelu => gelu_derivative(z),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::NonSigned => "non-signed",
            Activation::Signed => "signed",
            Activation::Gelu => "gelu",
        })
    }
}

/// Rescale `c` so that its modulus does not exceed `bound`, keeping the phase.
#[inline]
pub fn clamp_modulus(c: Complex64, bound: f64) -> Complex64 {
    let m = c.norm();
    if m > bound {
        let mut r = c * (bound / m);
        // rounding can leave the result one ulp above the bound
        while r.norm() > bound {
            r *= 1.0 - f64::EPSILON;
        }
        r
    } else {
        c
    }
}
