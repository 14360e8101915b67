//! Layers whose tensors live in a [`ParamStore`] and whose forward passes
//! record onto a [`Tape`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::nn::conv::ConvGeometry;
use crate::nn::norm::{update_running, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::nn::ops::he_init;
use crate::tensor::{Element, Shape, Tensor};

/// Convolution without bias; every convolution here feeds a batch norm.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub geom: ConvGeometry,
    pub weight: ParamId,
}

impl Conv2d {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let w = he_init(geom.weight_shape(), geom.fan_in(), rng)?;
        Ok(Conv2d {
            geom,
            weight: store.add(format!("{name}.weight"), w, true),
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, None, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(s), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(s), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(s), false),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages in `store`; eval mode reads the running averages only.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let eps = T::from_f64_lossy(self.epsilon);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let mut mean = store.value(self.running_mean).clone();
                let mut var = store.value(self.running_var).clone();
                update_running(
                    mean.data_mut(),
                    var.data_mut(),
                    &stats.mean,
                    &stats.var,
                    T::from_f64_lossy(self.momentum),
                );
                *store.value_mut(self.running_mean) = mean;
                *store.value_mut(self.running_var) = var;
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                eps,
            ),
        }
    }
}

/// Fully-connected layer with `[in, out]` weight and zero-initialized bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = he_init(Shape::matrix(in_features, out_features), in_features, rng)?;
        Ok(Linear {
            in_features,
            out_features,
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, out_features, 1, 1)),
                true,
            ),
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}
