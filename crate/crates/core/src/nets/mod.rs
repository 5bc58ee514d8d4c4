//! Differentiable function families and their parameter plumbing.

mod ema;
pub mod gradcheck;
mod params;
mod spec;

pub use ema::{ema_update, EmaShadow};
pub use gradcheck::{grad_check, grad_check_vec, relative_error};
pub use params::ParameterSet;
pub use spec::{Activation, ConvGeometry, Layer, NetKind, NetworkSpec, Tape};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::Result;

/// A network architecture together with its current parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let params = spec.init(rng)?;
        Ok(Self { spec, params })
    }

    pub fn with_params(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        // Forces every referenced tensor to exist with a usable shape.
        let probe = Array2::zeros((1, spec.input_len()));
        spec.forward(&params, probe.view())?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.spec.forward(&self.params, x)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.spec.forward_tape(&self.params, x)
    }

    pub fn backward(
        &self,
        tape: &Tape,
        dout: Array2<f64>,
        grads: Option<&mut ParameterSet>,
    ) -> Result<Array2<f64>> {
        self.spec.backward(&self.params, tape, dout, grads)
    }

    pub fn input_vjp(&self, x: ArrayView2<f64>, dout: Array2<f64>) -> Result<Array2<f64>> {
        self.spec.input_vjp(&self.params, x, dout)
    }
}
