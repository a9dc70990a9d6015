//! Dense 64-bit numeric core: tensors, named parameters, a reverse-mode tape,
//! the Adam optimizer and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use rand::Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, RELATIVE_FLOOR};
pub use params::{Linear, ParamId, ParamStore};
pub use tape::{Gradients, ParamGrads, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Softplus,
}

pub fn activate(tape: &mut Tape, kind: Activation, x: Var) -> Var {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Softmax => tape.softmax(x),
        Activation::Softplus => tape.softplus(x),
    }
}

/// Scalar logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two linear layers with a ReLU between them; used for gates and MLP updates.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng)?,
        })
    }

    /// `second(relu(first(x)))`, no output activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }
}
