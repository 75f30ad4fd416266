use rand::Rng;

use super::param::{Module, Param};
use super::tape::Var;
use super::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::uniform(&[cout], -bound, bound, rng),
            ),
            stride,
            padding: k / 2,
        }
    }

    /// Uniform weights in `±sqrt(6/fan_in)`, zero bias. Keeps activation scale
    /// through deep stacks without normalization layers.
    pub fn he<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding: k / 2,
        }
    }

    /// All weights and biases exactly zero.
    pub fn zeros(name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        x.conv2d(
            tape.param(&self.weight),
            Some(tape.param(&self.bias)),
            self.stride,
            self.padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[dout, din], -bound, bound, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::uniform(&[dout], -bound, bound, rng),
            ),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        x.linear(tape.param(&self.weight), tape.param(&self.bias))
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// `x + conv(silu(conv(silu(x))))` at constant width.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Real = f32> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, ch: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), ch, ch, 3, 1, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), ch, ch, 3, 1, rng);
        // start close to identity
        conv2.weight.update(|w| *w = w.scale(T::of(0.1)));
        Self { conv1, conv2 }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv1.forward(x.silu());
        x.add(self.conv2.forward(h.silu()))
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }
}
