//! Parameterized building blocks shared by the networks.

use rand::Rng;

use crate::tensor::{ParamGroup, ParamId, ParamStore, Result, Tape, Tensor, Var};

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    if gain == 0.0 {
        return Tensor::zeros(shape);
    }
    // variance gain² / fan_in
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.get(self.w).numel() + store.get(self.b).numel()
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Linear {
    let w = store.add(
        format!("{name}.w"),
        group,
        uniform_init(&[fan_in, fan_out], fan_in, gain, rng),
    );
    let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[fan_out]));
    Linear { w, b }
}

/// Convolution followed by ReLU. A stride of 2 halves the spatial size.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            group,
            uniform_init(&[cout, cin, kernel, kernel], fan_in, 2f64.sqrt(), rng),
        );
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            kernel,
            stride,
            pad: if stride == kernel { 0 } else { kernel / 2 },
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, Some(b), self.stride, self.pad)?;
        tape.relu(y)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }
}

/// Two-layer ReLU perceptron with a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: init_linear(store, &format!("{name}.0"), group, fan_in, hidden, 2f64.sqrt(), rng),
            out: init_linear(store, &format!("{name}.1"), group, hidden, fan_out, out_gain, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, store, h)
    }
}
