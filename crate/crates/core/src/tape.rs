//! Scalar reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a single reverse scan. The
//! two Heaviside nonlinearities are recorded with their boxcar surrogate as
//! the local partial.
//!
//! ```
//! use spiking_ssm::tape::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x + x.sin();
//! let grads = y.backward();
//! assert!((grads.wrt(x) - (6.0 + 3.0f64.cos())).abs() < 1e-12);
//! ```

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::numeric::{gelu, gelu_derivative, Surrogate};

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Recording of a scalar computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// New leaf (a parameter or input slot).
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.nodes.borrow().len();
        self.push(value, [index, index], [0.0, 0.0])
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, parents: [usize; 2], partials: [f64; 2]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { parents, partials });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn unary(&self, x: Var<'_>, value: f64, partial: f64) -> Var<'_> {
        self.push(value, [x.index, x.index], [partial, 0.0])
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, value: f64, da: f64, db: f64) -> Var<'_> {
        self.push(value, [a.index, b.index], [da, db])
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}: {})", self.index, self.value)
    }
}

/// Adjoints of every node with respect to one output.
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adjoints[var.index]
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.wrt(*v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Reverse sweep from this node.
    pub fn backward(&self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[self.index] = 1.0;
        for i in (0..=self.index).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                if node.partials[k] != 0.0 {
                    adjoints[node.parents[k]] += adj * node.partials[k];
                }
            }
        }
        Gradients { adjoints }
    }

    pub fn sin(self) -> Self {
        self.tape.unary(self, self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Self {
        self.tape.unary(self, self.value.cos(), -self.value.sin())
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.tape.unary(self, e, e)
    }

    pub fn ln(self) -> Self {
        self.tape.unary(self, self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.tape.unary(self, s, d)
    }

    pub fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.tape.unary(self, t, 1.0 - t * t)
    }

    pub fn powi(self, k: i32) -> Self {
        let d = if k == 0 {
            0.0
        } else {
            k as f64 * self.value.powi(k - 1)
        };
        self.tape.unary(self, self.value.powi(k), d)
    }

    pub fn gelu(self) -> Self {
        self.tape
            .unary(self, gelu(self.value), gelu_derivative(self.value))
    }

    /// `min(max(x, lo), hi)` with zero gradient where saturated.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let c = self.value.clamp(lo, hi);
        let d = if self.value > lo && self.value < hi {
            1.0
        } else {
            0.0
        };
        self.tape.unary(self, c, d)
    }

    /// Spike step `x > theta`, boxcar surrogate in backward.
    pub fn spike(self, theta: f64, surrogate: &Surrogate) -> Self {
        self.tape.unary(
            self,
            surrogate.step(self.value, theta),
            surrogate.window(self.value, theta),
        )
    }

    /// Inclusive step `x >= theta` (reset condition), boxcar surrogate in backward.
    pub fn spike_inclusive(self, theta: f64, surrogate: &Surrogate) -> Self {
        self.tape.unary(
            self,
            surrogate.step_inclusive(self.value, theta),
            surrogate.window(self.value, theta),
        )
    }

    /// Ternary spike with surrogates at `+theta` and `-theta`.
    pub fn signed_spike(self, theta: f64, surrogate: &Surrogate) -> Self {
        self.tape.unary(
            self,
            surrogate.signed(self.value, theta),
            surrogate.signed_window(self.value, theta),
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.tape
            .binary(self, rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.tape.unary(self, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.tape.unary(self, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.tape.unary(self, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.tape.unary(self, self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.unary(rhs, self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

/// Sum of a non-empty slice of variables.
pub fn sum<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let mut it = vars.iter().copied();
    let first = it.next().expect("sum of empty slice");
    it.fold(first, |acc, v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_grad;
    use proptest::prelude::*;

    fn composite<'t>(x: &[Var<'t>]) -> Var<'t> {
        let a = x[0] * x[1] + x[2].sin();
        let b = (x[0] * x[0] + 1.0).sqrt() / (x[1].exp() + 2.0);
        let c = (a - b).tanh() * x[2].gelu() + x[0].powi(3) * 0.1;
        c + (x[1] * x[1] + 0.5).ln() - 2.0 * x[2].cos()
    }

    fn composite_f64(x: &[f64]) -> f64 {
        let a = x[0] * x[1] + x[2].sin();
        let b = (x[0] * x[0] + 1.0).sqrt() / (x[1].exp() + 2.0);
        let c = (a - b).tanh() * gelu(x[2]) + x[0].powi(3) * 0.1;
        c + (x[1] * x[1] + 0.5).ln() - 2.0 * x[2].cos()
    }

    #[test]
    fn square_and_fanout() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        assert_eq!(y.value(), 9.0);
        assert_eq!(y.backward().wrt(x), 6.0);
        // x used three times: gradients accumulate
        let z = x + x + x;
        assert_eq!(z.backward().wrt(x), 3.0);
    }

    #[test]
    fn unrelated_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let unused = tape.var(2.0);
        let y = x.exp();
        assert_eq!(y.backward().wrt(unused), 0.0);
    }

    #[test]
    fn surrogate_nodes() {
        let s = Surrogate::default();
        let tape = Tape::new();
        let x = tape.var(1.2);
        let y = x.spike(1.0, &s);
        assert_eq!(y.value(), 1.0);
        assert_eq!(y.backward().wrt(x), 1.0);
        let x = tape.var(-1.3);
        let y = x.signed_spike(1.0, &s);
        assert_eq!(y.value(), -1.0);
        assert_eq!(y.backward().wrt(x), 1.0);
        let x = tape.var(1.0);
        assert_eq!(x.spike(1.0, &s).value(), 0.0);
        assert_eq!(x.spike_inclusive(1.0, &s).value(), 1.0);
        let x = tape.var(5.0);
        assert_eq!(x.spike(1.0, &s).backward().wrt(x), 0.0);
    }

    proptest! {
        #[test]
        fn matches_finite_differences(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
        ) {
            let tape = Tape::new();
            let xs = [tape.var(a), tape.var(b), tape.var(c)];
            let out = composite(&xs);
            prop_assert!((out.value() - composite_f64(&[a, b, c])).abs() < 1e-12);
            let g = out.backward().wrt_all(&xs);
            let fd = finite_difference_grad(composite_f64, &[a, b, c], 1e-5).unwrap();
            for (x, y) in g.iter().zip(&fd) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
                prop_assert!(rel <= 1e-4, "tape {x} vs fd {y}");
            }
        }
    }
}
