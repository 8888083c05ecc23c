//! Learnable layer bundles: parameter handles plus initialization.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{ops, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;
use crate::sparse::{conv, ConvLayer, KernelMap};

/// Centered uniform matrix with bound `gain · sqrt(6 / fan_in)`.
pub fn uniform_init<R: Rng>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    gain: f32,
    rng: &mut R,
) -> Tensor {
    let bound = gain * (6.0 / fan_in.max(1) as f32).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect(),
    )
}

/// Sparse convolution weights living in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        gain: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let k3 = kernel.pow(3);
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_init(k3 * c_in, c_out, k3 * c_in, gain, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, c_out))?;
        Ok(ConvParams {
            kernel,
            c_in,
            c_out,
            weight,
            bias,
        })
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        map: &Arc<KernelMap>,
    ) -> Var {
        debug_assert_eq!(map.kernel, self.kernel);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        conv(tape, x, w, b, map.clone())
    }

    pub fn to_layer(&self, store: &ParamStore, stride: usize) -> ConvLayer {
        ConvLayer {
            kernel: self.kernel,
            stride,
            weight: store.value(self.weight).clone(),
            bias: store.value(self.bias).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        gain: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_init(c_in, c_out, c_in, gain, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, c_out))?;
        Ok(Linear { weight, bias })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        ops::linear(tape, x, w, b)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_hidden: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), c_in, c_hidden, 1.0, rng)?,
            output: Linear::new(store, &format!("{name}.1"), c_hidden, c_out, 0.5, rng)?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.apply(tape, store, x);
        let h = ops::relu(tape, h);
        self.output.apply(tape, store, h)
    }
}
