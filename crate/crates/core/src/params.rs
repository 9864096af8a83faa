//! Named views over parameter storage, tagged with their optimizer group.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Optimizer group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Eigenvalues, output projection and output bias of the neurons.
    Ssm,
    /// Synaptic weights and normalization parameters.
    Other,
    /// Reset action scale.
    Rho,
    /// Reset condition bias.
    RBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Ssm,
        ParamGroup::Other,
        ParamGroup::Rho,
        ParamGroup::RBias,
    ];
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamGroup::Ssm => "ssm",
            ParamGroup::Other => "other",
            ParamGroup::Rho => "rho",
            ParamGroup::RBias => "r_bias",
        })
    }
}

#[derive(Debug)]
pub struct Tensor<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [f64],
}

/// Complex storage seen as interleaved `(re, im)` pairs.
pub fn complex_as_real(c: &[Complex64]) -> &[f64] {
    bytemuck::cast_slice(c)
}

pub fn complex_as_real_mut(c: &mut [Complex64]) -> &mut [f64] {
    bytemuck::cast_slice_mut(c)
}
