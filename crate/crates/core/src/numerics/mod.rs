//! Numeric core: tensors, a tape-based reverse-mode autodiff graph, the layer
//! kernels the agent needs, initializers and optimizers.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64`
//! while training runs in `f32`.

mod graph;
mod init;
pub(crate) mod kernels;
mod optim;
mod spectral;
mod tensor;

pub use graph::{Activation, Graph, Var};
pub use init::{init_bias, init_layer, InitScheme};
pub use optim::{adam_step, polyak_update, AdamConfig, AdamState, Parameter};
pub use spectral::{power_iteration, spectral_normalize, SPECTRAL_EPS};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
