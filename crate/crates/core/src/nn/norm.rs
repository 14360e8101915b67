//! Per-channel batch normalization over the (batch, height, width) axes.

use crate::error::{invalid, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm state in value form, for the functional [`batchnorm2d`].
/// All tensors are `[1, channels, 1, 1]`.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNormParams {
            gamma: Tensor::ones(s),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::ones(s),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }
}

pub fn batchnorm2d<T: Element>(x: &Tensor<T>, p: &mut BatchNormParams<T>, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let out = bn_train_forward(x, p.gamma.data(), p.beta.data(), p.epsilon)?;
            update_running(
                p.running_mean.data_mut(),
                p.running_var.data_mut(),
                &out.mean,
                &out.var,
                p.momentum,
            );
            Ok(out.y)
        }
        Mode::Eval => Ok(bn_eval_forward(
            x,
            p.gamma.data(),
            p.beta.data(),
            p.running_mean.data(),
            p.running_var.data(),
            p.epsilon,
        )?
        .y),
    }
}

pub(crate) struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_channels<T: Element>(x: &Tensor<T>, len: usize) -> Result<()> {
    if x.shape().c != len {
        return Err(invalid(format!(
            "batch norm over {len} channels applied to {}",
            x.shape()
        )));
    }
    Ok(())
}

pub(crate) fn bn_train_forward<T: Element>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<BnForward<T>> {
    check_channels(x, gamma.len())?;
    let s = x.shape();
    let count = s.n * s.plane();
    if count < 2 {
        return Err(invalid(format!(
            "batch variance undefined for a single element per channel ({s})"
        )));
    }
    let m = T::from_usize(count).unwrap();
    let plane = s.plane();
    let mut sum = vec![T::zero(); s.c];
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        let c = i % s.c;
        sum[c] = chunk.iter().fold(sum[c], |a, &v| a + v);
    }
    let mean: Vec<T> = sum.iter().map(|&a| a / m).collect();
    let mut sq = vec![T::zero(); s.c];
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        let c = i % s.c;
        let mu = mean[c];
        sq[c] = chunk.iter().fold(sq[c], |a, &v| a + (v - mu) * (v - mu));
    }
    let var: Vec<T> = sq.iter().map(|&a| a / m).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (xhat, y) = normalize(x, &mean, &inv_std, gamma, beta);
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    })
}

pub(crate) fn bn_eval_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<BnForward<T>> {
    check_channels(x, gamma.len())?;
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (xhat, y) = normalize(x, running_mean, &inv_std, gamma, beta);
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean: running_mean.to_vec(),
        var: running_var.to_vec(),
    })
}

fn normalize<T: Element>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let plane = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let planes = x
        .data()
        .chunks_exact(plane)
        .zip(xhat.data_mut().chunks_exact_mut(plane))
        .zip(y.data_mut().chunks_exact_mut(plane));
    for (i, ((src, h), out)) in planes.enumerate() {
        let c = i % s.c;
        let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for ((&v, h), o) in src.iter().zip(h.iter_mut()).zip(out.iter_mut()) {
            *h = (v - mu) * is;
            *o = g * *h + b;
        }
    }
    (xhat, y)
}

/// `running <- (1 - momentum) * running + momentum * batch`.
pub(crate) fn update_running<T: Element>(
    running_mean: &mut [T],
    running_var: &mut [T],
    mean: &[T],
    var: &[T],
    momentum: T,
) {
    let keep = T::one() - momentum;
    for (r, &b) in running_mean.iter_mut().zip(mean) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.iter_mut().zip(var) {
        *r = keep * *r + momentum * b;
    }
}

pub(crate) struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// In train mode the batch statistics depend on `x`, which adds the two
/// centering terms to `dx`; in eval mode the statistics are constants.
pub(crate) fn bn_backward<T: Element>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> BnGrads<T> {
    let s = dy.shape();
    let plane = s.plane();
    let m = T::from_usize(s.n * plane).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let grads = dy.data().chunks_exact(plane).zip(xhat.data().chunks_exact(plane));
    for (i, (g, h)) in grads.enumerate() {
        let c = i % s.c;
        for (&g, &h) in g.iter().zip(h) {
            dbeta[c] = dbeta[c] + g;
            dgamma[c] = dgamma[c] + g * h;
        }
    }
    let mut dx = Tensor::zeros(s);
    let planes = dy
        .data()
        .chunks_exact(plane)
        .zip(xhat.data().chunks_exact(plane))
        .zip(dx.data_mut().chunks_exact_mut(plane));
    for (i, ((g, h), out)) in planes.enumerate() {
        let c = i % s.c;
        let scale = gamma[c] * inv_std[c];
        if train {
            let (mb, mg) = (dbeta[c] / m, dgamma[c] / m);
            for ((&g, &h), o) in g.iter().zip(h).zip(out.iter_mut()) {
                *o = scale * (g - mb - h * mg);
            }
        } else {
            for (&g, o) in g.iter().zip(out.iter_mut()) {
                *o = scale * g;
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(y: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = y.shape();
        let vals: Vec<f64> = (0..s.n)
            .flat_map(|n| (0..s.h).flat_map(move |i| (0..s.w).map(move |j| (n, i, j))))
            .map(|(n, i, j)| y[[n, c, i, j]])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let mut p = BatchNormParams::<f64>::new(2);
        p.gamma = Tensor::from_vec([1, 2, 1, 1], vec![3.0, -2.0]).unwrap();
        p.beta = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 7.0]).unwrap();
        let y = batchnorm2d(&Tensor::full([3, 2, 4, 4], 4.2), &mut p, Mode::Train).unwrap();
        for n in 0..3 {
            for i in 0..4 {
                assert!((y[[n, 0, i, 1]] - 0.5).abs() < 1e-8);
                assert!((y[[n, 1, i, 2]] - 7.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn train_mode_standardizes_any_scale() {
        for scale in [1e-2, 1.0, 1e3] {
            let x = Tensor::from_fn([4, 3, 5, 5], |[n, c, i, j]| {
                scale * (((n * 75 + c * 25 + i * 5 + j) as f64) * 1.37).sin() + c as f64 * 10.0
            });
            let mut p = BatchNormParams::<f64>::new(3);
            let y = batchnorm2d(&x, &mut p, Mode::Train).unwrap();
            for c in 0..3 {
                let (mean, var) = channel_moments(&y, c);
                assert!(mean.abs() <= 1e-6, "mean {mean}");
                // epsilon shrinks the variance noticeably only for tiny inputs
                let tol = if scale < 1.0 { 0.3 } else { 1e-4 };
                assert!((var - 1.0).abs() <= tol, "scale {scale} var {var}");
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_fn([2, 1, 2, 2], |[n, _, i, j]| (n * 4 + i * 2 + j) as f64);
        let mut p = BatchNormParams::<f64>::new(1);
        batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        // batch mean 3.5, biased variance 5.25
        assert!((p.running_mean.data()[0] - 0.35).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.525)).abs() < 1e-12);
        let before = (p.running_mean.clone(), p.running_var.clone());
        batchnorm2d(&x, &mut p, Mode::Eval).unwrap();
        assert_eq!((p.running_mean.clone(), p.running_var.clone()), before);
    }

    #[test]
    fn eval_identity_with_unit_stats() {
        let x = Tensor::from_fn([2, 3, 4, 4], |[n, c, i, j]| ((n + c + i * j) as f64).cos());
        let mut p = BatchNormParams::<f64>::new(3);
        let y = batchnorm2d(&x, &mut p, Mode::Eval).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-4);
    }

    #[test]
    fn errors() {
        let mut p = BatchNormParams::<f32>::new(3);
        assert!(batchnorm2d(&Tensor::zeros([2, 4, 2, 2]), &mut p, Mode::Train).is_err());
        assert!(batchnorm2d(&Tensor::zeros([1, 3, 1, 1]), &mut p, Mode::Train).is_err());
        assert!(batchnorm2d(&Tensor::zeros([1, 3, 1, 1]), &mut p, Mode::Eval).is_ok());
    }
}
