//! S4D-Lin eigenvalue initialization with bilinear discretization, the
//! unstable-regime construction and the eigenvalue clip applied after
//! optimizer steps.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{LayerParams, NeuronConfig, SsmLayer, StabilityRegime};
use crate::numeric::clamp_modulus;

/// Factor applied to every second eigenvalue in the unstable regime.
pub const DESTABILIZE_FACTOR: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub n: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub seed: u64,
    pub regime: StabilityRegime,
}

impl InitConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            delta_min: 1e-3,
            delta_max: 1e-1,
            seed,
            regime: StabilityRegime::Stable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_max && self.delta_max.is_finite())
        {
            return Err(Error::Config(format!(
                "need 0 < delta_min <= delta_max, got [{}, {}]",
                self.delta_min, self.delta_max
            )));
        }
        Ok(())
    }
}

/// Continuous S4D-Lin eigenvalue `-1/2 + iπk`.
pub fn s4d_lin_continuous(k: usize) -> Complex64 {
    Complex64::new(-0.5, std::f64::consts::PI * k as f64)
}

/// Bilinear (Tustin) map `(1 + Δλ/2) / (1 - Δλ/2)`.
pub fn bilinear(lambda: Complex64, delta: f64) -> Complex64 {
    let half = lambda * (delta / 2.0);
    (Complex64::new(1.0, 0.0) + half) / (Complex64::new(1.0, 0.0) - half)
}

/// Timestep drawn log-uniformly from `[delta_min, delta_max]`.
pub fn sample_delta<R: Rng>(cfg: &InitConfig, rng: &mut R) -> f64 {
    if cfg.delta_min == cfg.delta_max {
        return cfg.delta_min;
    }
    let lo = cfg.delta_min.ln();
    let hi = cfg.delta_max.ln();
    rng.gen_range(lo..hi).exp()
}

/// Discrete eigenvalues of one neuron with a single sampled timestep.
/// No conjugate pairs are emitted.
pub fn s4d_lin_neuron<R: Rng>(cfg: &InitConfig, rng: &mut R) -> Vec<Complex64> {
    let delta = sample_delta(cfg, rng);
    let mut lambda: Vec<Complex64> = (0..cfg.n)
        .map(|k| bilinear(s4d_lin_continuous(k), delta))
        .collect();
    if cfg.regime == StabilityRegime::Unstable {
        lambda = destabilize(&lambda);
    }
    lambda
}

/// Eigenvalues for `neurons` neurons (`neurons * n`, neuron-major), seeded by `cfg.seed`.
pub fn s4d_lin_init(cfg: &InitConfig, neurons: usize) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..neurons)
        .flat_map(|_| s4d_lin_neuron(cfg, &mut rng))
        .collect())
}

/// Multiply the entries at odd positions (2nd, 4th, ...) by 1.5.
pub fn destabilize(lambda: &[Complex64]) -> Vec<Complex64> {
    lambda
        .iter()
        .enumerate()
        .map(|(k, &l)| if k % 2 == 1 { l * DESTABILIZE_FACTOR } else { l })
        .collect()
}

/// Rescale every eigenvalue with modulus above one onto the unit circle.
pub fn clip_eigenvalues(lambda: &mut [Complex64]) {
    for l in lambda.iter_mut() {
        *l = clamp_modulus(*l, 1.0);
    }
}

/// Output projection with i.i.d. standard normal real and imaginary parts,
/// and a zero output bias.
pub fn init_projection<R: Rng>(
    n: usize,
    n_out: usize,
    neurons: usize,
    rng: &mut R,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let c = (0..neurons * n_out * n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im)
        })
        .collect();
    (c, vec![Complex64::new(0.0, 0.0); neurons * n_out])
}

/// Initial values of the reset parameters and the discretization range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    pub delta_min: f64,
    pub delta_max: f64,
    pub rho: f64,
    pub r_bias: f64,
}

impl Default for LayerInit {
    fn default() -> Self {
        Self {
            delta_min: 1e-3,
            delta_max: 1e-1,
            rho: 0.5,
            r_bias: 0.0,
        }
    }
}

/// Build a hidden layer with freshly initialized parameters.
pub fn init_layer<R: Rng>(
    index: usize,
    cfg: NeuronConfig,
    init: &LayerInit,
    rng: &mut R,
) -> Result<SsmLayer> {
    cfg.validate()?;
    let icfg = InitConfig {
        n: cfg.n,
        delta_min: init.delta_min,
        delta_max: init.delta_max,
        seed: 0,
        regime: cfg.regime,
    };
    icfg.validate()?;
    let lambda: Vec<Complex64> = (0..cfg.h)
        .flat_map(|_| s4d_lin_neuron(&icfg, rng))
        .collect();
    let (c, c_bias) = init_projection(cfg.n, cfg.n_out, cfg.h, rng);
    let params = LayerParams {
        lambda,
        b: vec![1.0; cfg.h * cfg.n],
        c,
        c_bias,
        rho: vec![Complex64::new(init.rho, 0.0); cfg.reset_slots()],
        r_bias: vec![init.r_bias; cfg.reset_slots()],
    };
    SsmLayer::new(index, cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn bilinear_examples() {
        let l = bilinear(Complex64::new(-0.5, 0.0), 0.1);
        assert_abs_diff_eq!(l.re, 0.975 / 1.025, epsilon = 1e-15);
        assert_abs_diff_eq!(l.re, 0.951220, epsilon = 1e-6);
        assert_eq!(l.im, 0.0);
        for k in 0..8 {
            let l = bilinear(s4d_lin_continuous(k), 1e-12);
            assert_abs_diff_eq!(l.re, 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(l.im, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn default_range_moduli() {
        // Moduli for the default timestep range lie in [0.951, 1): the
        // stable side of the unit circle, around 0.9 to within 0.1.
        let cfg = InitConfig::new(8, 11);
        let lambda = s4d_lin_init(&cfg, 500).unwrap();
        assert!(lambda.iter().all(|l| l.norm() < 1.0 && l.norm() > 0.95));
        let mean = lambda.iter().map(|l| l.norm()).sum::<f64>() / lambda.len() as f64;
        assert!((mean - 0.9).abs() < 0.1, "mean modulus {mean}");
    }

    #[test]
    fn no_conjugate_pairs() {
        let lambda = s4d_lin_init(&InitConfig::new(8, 1), 1).unwrap();
        for (a, la) in lambda.iter().enumerate() {
            for lb in &lambda[a + 1..] {
                assert!((la.conj() - lb).norm() > 1e-9);
            }
        }
        // non-negative imaginary parts only
        assert!(lambda.iter().all(|l| l.im >= 0.0));
    }

    #[test]
    fn destabilize_examples() {
        let d = destabilize(&[Complex64::new(0.9, 0.0), Complex64::new(0.9, 0.0)]);
        assert_eq!(d[0], Complex64::new(0.9, 0.0));
        assert_abs_diff_eq!(d[1].re, 1.35, epsilon = 1e-15);
        let one = [Complex64::new(0.9, 0.2)];
        assert_eq!(destabilize(&one), one.to_vec());

        let lambda = s4d_lin_init(&InitConfig::new(7, 5), 1).unwrap();
        let d = destabilize(&lambda);
        assert_eq!(d.iter().filter(|l| l.norm() > 1.0).count(), 7 / 2);
        for (a, b) in lambda.iter().zip(&d) {
            assert_abs_diff_eq!(a.arg(), b.arg(), epsilon = 1e-12);
        }
    }

    #[test]
    fn unstable_init_has_unit_exceeding_modulus() {
        for n in 2..10 {
            let mut cfg = InitConfig::new(n, n as u64);
            cfg.regime = StabilityRegime::Unstable;
            let lambda = s4d_lin_init(&cfg, 3).unwrap();
            for neuron in lambda.chunks(n) {
                assert!(neuron.iter().any(|l| l.norm() > 1.0));
            }
        }
    }

    #[test]
    fn clip_examples() {
        let mut l = vec![Complex64::from_polar(1.2, 0.3), Complex64::new(0.5, 0.0)];
        clip_eigenvalues(&mut l);
        assert_abs_diff_eq!(l[0].norm(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[0].arg(), 0.3, epsilon = 1e-15);
        assert_eq!(l[1], Complex64::new(0.5, 0.0));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = InitConfig::new(4, 0);
        cfg.delta_min = 0.2;
        assert!(s4d_lin_init(&cfg, 1).is_err());
        cfg.delta_min = 0.0;
        assert!(s4d_lin_init(&cfg, 1).is_err());
        assert!(s4d_lin_init(&InitConfig::new(0, 0), 1).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let cfg = InitConfig::new(6, 42);
        assert_eq!(s4d_lin_init(&cfg, 4).unwrap(), s4d_lin_init(&cfg, 4).unwrap());
        let (c1, b1) = init_projection(4, 3, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let (c2, b2) = init_projection(4, 3, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(c1, c2);
        assert_eq!(b1, b2);
        assert!(b1.iter().all(|b| *b == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn projection_is_standard_normal() {
        let (c, _) = init_projection(10, 10, 500, &mut ChaCha8Rng::seed_from_u64(1));
        let parts: Vec<f64> = c.iter().flat_map(|z| [z.re, z.im]).collect();
        assert!(parts.len() >= 100_000);
        let mean = parts.iter().sum::<f64>() / parts.len() as f64;
        let var = parts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / parts.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    proptest! {
        #[test]
        fn clip_bounds_modulus(parts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..16)) {
            let mut l: Vec<Complex64> = parts.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
            let max_in = l.iter().map(|c| c.norm()).fold(0.0, f64::max);
            clip_eigenvalues(&mut l);
            let max_out = l.iter().map(|c| c.norm()).fold(0.0, f64::max);
            prop_assert!(l.iter().all(|c| c.norm() <= 1.0));
            prop_assert!((max_out - max_in.min(1.0)).abs() < 1e-12);
        }
    }
}
