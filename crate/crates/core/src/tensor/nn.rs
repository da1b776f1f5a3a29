use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: None,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }
}

/// Records parameters on a graph during a forward pass, in visiting order.
pub struct Binder {
    trainable: bool,
    vars: Vec<Var>,
}

impl Binder {
    /// `trainable` binders record gradient-carrying leaves.
    pub fn new(trainable: bool) -> Self {
        Self {
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, p: &Parameter<T>) -> Var {
        let v = if self.trainable {
            g.variable(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Moves gradients onto `params`, which must be visited in binding
    /// order. A bound parameter the loss does not reach receives zeros.
    pub fn collect_grads<'a, T, I>(&self, params: I, grads: &mut Gradients<T>) -> Result<()>
    where
        T: Scalar,
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        let params: Vec<&mut Parameter<T>> = params.into_iter().collect();
        if params.len() != self.vars.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters for {} bindings",
                params.len(),
                self.vars.len()
            )));
        }
        for (p, &v) in params.into_iter().zip(&self.vars) {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.grad = Some(g);
        }
        Ok(())
    }
}

/// 3×3 (or any odd) convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights (bound `√(6/fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = [out_channels, in_channels, kernel, kernel];
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::uniform(&shape, -bound, bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(g, &self.weight);
        let b = binder.bind(g, &self.bias);
        g.conv2d(x, w, Some(b), self.padding)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// 2×2 stride-2 up-convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel sums exactly one tap per input channel
        let bound = (6.0 / in_channels as f64).sqrt();
        let shape = [in_channels, out_channels, 2, 2];
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::uniform(&shape, -bound, bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(g, &self.weight);
        let b = binder.bind(g, &self.bias);
        g.conv_transpose2d(x, w, Some(b))
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Normalizes `x`; in [`Mode::Train`] also returns the updated running
    /// `(mean, var)`, which the caller commits with [`Self::set_running`].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        let mut mean = self.running_mean.clone();
        let mut var = self.running_var.clone();
        let train = mode == Mode::Train;
        let y = g.batchnorm2d(
            x, gamma, beta, &mut mean, &mut var, self.momentum, self.eps, train,
        )?;
        Ok((y, train.then_some((mean, var))))
    }

    pub fn set_running(&mut self, (mean, var): (Vec<T>, Vec<T>)) {
        self.running_mean = mean;
        self.running_var = var;
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.gamma, &self.beta]
    }
}
