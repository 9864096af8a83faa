//! Classical spiking neurons: the general linear neuron with soft reset,
//! its hard-reset variant, LIF and adLIF, plus constructors that embed LIF
//! and adLIF into the general form.
//!
//! Spikes are computed from the state at `t` and act on the transition into
//! `t + 1`.

use ndarray::{arr1, arr2, Array1, Array2};

use crate::error::{Error, Result};

/// Spiking region `Θ` over neuron states.
#[derive(Clone, Debug, PartialEq)]
pub enum SpikingRegion {
    /// `v[index] >= theta`
    ComponentAtLeast { index: usize, theta: f64 },
    /// `||v||_2 >= theta`
    NormAtLeast { theta: f64 },
}

impl SpikingRegion {
    pub fn contains(&self, v: &Array1<f64>) -> bool {
        match *self {
            SpikingRegion::ComponentAtLeast { index, theta } => v[index] >= theta,
            SpikingRegion::NormAtLeast { theta } => v.dot(v).sqrt() >= theta,
        }
    }
}

/// `v[t+1] = A v[t] - R s[t] + B i[t]`, `s[t] = [v[t] ∈ Θ]`.
#[derive(Clone, Debug)]
pub struct GeneralNeuronParams {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub r: Array1<f64>,
    pub region: SpikingRegion,
    pub v_rst: Option<Array1<f64>>,
}

impl GeneralNeuronParams {
    pub fn new(
        a: Array2<f64>,
        b: Array1<f64>,
        r: Array1<f64>,
        region: SpikingRegion,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("leak matrix columns", n, a.ncols())?;
        check_dim("input vector", n, b.len())?;
        check_dim("reset vector", n, r.len())?;
        if let SpikingRegion::ComponentAtLeast { index, .. } = region {
            if index >= n {
                return Err(Error::Config(format!(
                    "spiking region reads component {index} of a {n}-dimensional state"
                )));
            }
        }
        Ok(Self {
            a,
            b,
            r,
            region,
            v_rst: None,
        })
    }

    pub fn with_reset_state(mut self, v_rst: Array1<f64>) -> Result<Self> {
        check_dim("reset state", self.dim(), v_rst.len())?;
        self.v_rst = Some(v_rst);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn spikes(&self, v: &Array1<f64>) -> bool {
        self.region.contains(v)
    }

    /// Soft-reset step.
    pub fn general_step(&self, v: &Array1<f64>, i: f64) -> Result<(Array1<f64>, bool)> {
        check_dim("state", self.dim(), v.len())?;
        let s = self.spikes(v);
        let mut next = self.a.dot(v) + &(&self.b * i);
        if s {
            next -= &self.r;
        }
        Ok((next, s))
    }

    /// Hard-reset step: no `R` term, state overwritten by `v_rst` on a spike.
    pub fn hard_reset_step(&self, v: &Array1<f64>, i: f64) -> Result<(Array1<f64>, bool)> {
        let v_rst = self
            .v_rst
            .as_ref()
            .ok_or_else(|| Error::Config("hard reset requires a reset state".into()))?;
        check_dim("state", self.dim(), v.len())?;
        let s = self.spikes(v);
        if s {
            Ok((v_rst.clone(), true))
        } else {
            Ok((self.a.dot(v) + &(&self.b * i), false))
        }
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub alpha: f64,
    pub theta: f64,
}

impl LifParams {
    pub fn new(alpha: f64, theta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || !(theta > 0.0) {
            return Err(Error::Config(format!(
                "LIF requires 0 < alpha <= 1 and theta > 0 (alpha={alpha}, theta={theta})"
            )));
        }
        Ok(Self { alpha, theta })
    }

    /// Returns `(u[t+1], s[t])`.
    pub fn step(&self, u: f64, i: f64) -> (f64, bool) {
        let s = u >= self.theta;
        let sf = if s { 1.0 } else { 0.0 };
        let next = self.alpha * u - self.alpha * self.theta * sf + (1.0 - self.alpha) * i;
        (next, s)
    }

    /// `A = α`, `B = 1 - α`, `R = αθ`, `Θ = {u >= θ}`.
    pub fn as_general(&self) -> GeneralNeuronParams {
        GeneralNeuronParams {
            a: arr2(&[[self.alpha]]),
            b: arr1(&[1.0 - self.alpha]),
            r: arr1(&[self.alpha * self.theta]),
            region: SpikingRegion::ComponentAtLeast {
                index: 0,
                theta: self.theta,
            },
            v_rst: None,
        }
    }
}

/// Adaptive LIF with recovery variable `w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdLifParams {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl AdLifParams {
    pub fn new(alpha: f64, beta: f64, a: f64, b: f64, theta: f64) -> Result<Self> {
        if !(theta > 0.0) || ![alpha, beta, a, b].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("adLIF requires theta > 0 and finite couplings".into()));
        }
        Ok(Self {
            alpha,
            beta,
            a,
            b,
            theta,
        })
    }

    /// Returns `(u[t+1], w[t+1], s[t])`.
    pub fn step(&self, u: f64, w: f64, i: f64) -> (f64, f64, bool) {
        let s = u >= self.theta;
        let sf = if s { 1.0 } else { 0.0 };
        let u_next = self.alpha * u - self.alpha * self.theta * sf + (1.0 - self.alpha) * i
            - (1.0 - self.alpha) * w;
        let w_next = self.a * u + self.beta * w + self.b * sf;
        (u_next, w_next, s)
    }

    /// State `(u, w)`. The reset vector is `R = [αθ, -b]` so that the `-R s`
    /// term of the general neuron reproduces the adLIF update exactly.
    pub fn as_general(&self) -> GeneralNeuronParams {
        GeneralNeuronParams {
            a: arr2(&[[self.alpha, -(1.0 - self.alpha)], [self.a, self.beta]]),
            b: arr1(&[1.0 - self.alpha, 0.0]),
            r: arr1(&[self.alpha * self.theta, -self.b]),
            region: SpikingRegion::ComponentAtLeast {
                index: 0,
                theta: self.theta,
            },
            v_rst: None,
        }
    }
}

pub fn lif_step(params: &LifParams, u: f64, i: f64) -> (f64, bool) {
    params.step(u, i)
}

pub fn adlif_step(params: &AdLifParams, u: f64, w: f64, i: f64) -> (f64, f64, bool) {
    params.step(u, w, i)
}

pub fn lif_as_general(params: &LifParams) -> GeneralNeuronParams {
    params.as_general()
}

pub fn adlif_as_general(params: &AdLifParams) -> GeneralNeuronParams {
    params.as_general()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_state_does_not_spike() {
        let p = GeneralNeuronParams::new(
            Array2::eye(2),
            arr1(&[1.0, 1.0]),
            arr1(&[0.5, 0.5]),
            SpikingRegion::ComponentAtLeast { index: 0, theta: 1.0 },
        )
        .unwrap();
        let (v, s) = p.general_step(&Array1::zeros(2), 0.0).unwrap();
        assert!(!s);
        assert_eq!(v, Array1::<f64>::zeros(2));
    }

    #[test]
    fn lif_through_general() {
        let lif = LifParams::new(0.9, 1.0).unwrap();
        let (v, s) = lif.as_general().general_step(&arr1(&[1.2]), 0.0).unwrap();
        assert!(s);
        assert_abs_diff_eq!(v[0], 0.18, epsilon = 1e-15);
    }

    #[test]
    fn pure_integrator() {
        let p = GeneralNeuronParams::new(
            Array2::eye(3),
            arr1(&[1.0, 1.0, 1.0]),
            Array1::zeros(3),
            SpikingRegion::NormAtLeast { theta: 100.0 },
        )
        .unwrap();
        let v = arr1(&[0.5, -1.0, 2.0]);
        let (next, _) = p.general_step(&v, 0.25).unwrap();
        assert_eq!(next, arr1(&[0.75, -0.75, 2.25]));
    }

    #[test]
    fn dimension_errors() {
        let p = LifParams::new(0.5, 1.0).unwrap().as_general();
        assert!(matches!(
            p.general_step(&arr1(&[0.0, 0.0]), 1.0),
            Err(Error::Dimension { .. })
        ));
        assert!(GeneralNeuronParams::new(
            Array2::eye(2),
            arr1(&[1.0]),
            arr1(&[1.0, 1.0]),
            SpikingRegion::NormAtLeast { theta: 1.0 }
        )
        .is_err());
    }

    #[test]
    fn hard_reset() {
        let base = LifParams::new(0.9, 1.0).unwrap().as_general();
        assert!(base.hard_reset_step(&arr1(&[2.0]), 0.0).is_err());

        let p = base.clone().with_reset_state(arr1(&[0.0])).unwrap();
        let (v, s) = p.hard_reset_step(&arr1(&[1.5]), 0.3).unwrap();
        assert!(s);
        assert_eq!(v[0], 0.0);

        // below threshold: plain linear step without the R term
        let (v, s) = p.hard_reset_step(&arr1(&[0.5]), 0.3).unwrap();
        assert!(!s);
        let mut no_r = base.clone();
        no_r.r = arr1(&[0.0]);
        assert_eq!(v, no_r.general_step(&arr1(&[0.5]), 0.3).unwrap().0);

        let p = base.with_reset_state(arr1(&[0.5])).unwrap();
        let (v, s) = p.hard_reset_step(&arr1(&[2.0]), 0.0).unwrap();
        assert!(s);
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn lif_and_adlif_examples() {
        let lif = LifParams::new(0.5, 1.0).unwrap();
        assert_eq!(lif_step(&lif, 0.0, 2.0), (1.0, false));

        let ad = AdLifParams::new(0.9, 0.8, 0.1, 0.2, 1.0).unwrap();
        assert_eq!(adlif_step(&ad, 0.0, 0.0, 0.0), (0.0, 0.0, false));
        let (u, w, s) = adlif_step(&ad, 1.5, 0.0, 0.0);
        assert!(s);
        assert_abs_diff_eq!(u, 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(w, 0.35, epsilon = 1e-15);
    }

    #[test]
    fn embeddings_match_printed_matrices() {
        let g = lif_as_general(&LifParams::new(0.5, 1.0).unwrap());
        assert_eq!(g.a, arr2(&[[0.5]]));
        assert_eq!(g.b, arr1(&[0.5]));
        assert_eq!(g.r, arr1(&[0.5]));

        let g = adlif_as_general(&AdLifParams::new(0.9, 0.8, 0.1, 0.2, 1.0).unwrap());
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(g.a.as_slice().unwrap(), &[0.9, -0.1, 0.1, 0.8]));
        assert!(close(g.b.as_slice().unwrap(), &[0.1, 0.0]));
        assert!(close(g.r.as_slice().unwrap(), &[0.9, -0.2]));
    }

    #[test]
    fn lif_decays_without_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let lif = LifParams::new(rng.gen_range(0.01..0.99), 1.0).unwrap();
            let mut u: f64 = rng.gen_range(-0.99..0.99);
            for _ in 0..100 {
                let (next, s) = lif.step(u, 0.0);
                assert!(!s);
                assert!(next.abs() <= u.abs());
                u = next;
            }
        }
    }

    #[test]
    fn invalid_params() {
        assert!(LifParams::new(0.0, 1.0).is_err());
        assert!(LifParams::new(0.5, 0.0).is_err());
        assert!(AdLifParams::new(0.9, 0.8, 0.1, 0.2, -1.0).is_err());
    }
}
