use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, Element, MatRef, Shape, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_with(dy, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu gradient shape")
}

/// Per-(batch, channel) spatial mean; the result has shape `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(invalid(format!("global pooling over empty spatial dims {s}")));
    }
    let denom = T::from_usize(s.plane()).unwrap();
    let data = x
        .data()
        .chunks(s.plane())
        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::from_vec(Shape::matrix(s.n, s.c), data)
}

pub(crate) fn global_avg_pool_backward<T: Element>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let denom = T::from_usize(input.plane()).unwrap();
    let mut dx = Tensor::zeros(input);
    for (chunk, &g) in dx.data_mut().chunks_mut(input.plane()).zip(dy.data()) {
        chunk.fill(g / denom);
    }
    dx
}

/// `x * weight + bias` with `x: [n, f]`, `weight: [f, k]`, `bias: [k]`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.shape().as_matrix();
    let (f2, k) = weight.shape().as_matrix();
    if f != f2 {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: weight.shape(),
        });
    }
    if bias.numel() != k {
        return Err(invalid(format!("bias {} for {k} outputs", bias.shape())));
    }
    let mut y = Tensor::zeros(Shape::matrix(n, k));
    for row in y.data_mut().chunks_mut(k) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        f,
        k,
        MatRef::new(x.data()),
        MatRef::new(weight.data()),
        T::one(),
        y.data_mut(),
    );
    Ok(y)
}

pub(crate) struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub(crate) fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias_shape: Shape,
    dy: &Tensor<T>,
) -> LinearGrads<T> {
    let (n, f) = x.shape().as_matrix();
    let k = weight.shape().as_matrix().1;
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        n,
        k,
        f,
        MatRef::new(dy.data()),
        MatRef::t(weight.data()),
        T::zero(),
        dx.data_mut(),
    );
    let mut dweight = Tensor::zeros(weight.shape());
    gemm(
        f,
        n,
        k,
        MatRef::t(x.data()),
        MatRef::new(dy.data()),
        T::zero(),
        dweight.data_mut(),
    );
    let mut dbias = Tensor::zeros(bias_shape);
    for row in dy.data().chunks(k) {
        for (b, &g) in dbias.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    LinearGrads { dx, dweight, dbias }
}

/// Row-wise softmax of `[n, k]` logits with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape().as_matrix().1;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labelled class.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(softmax_cross_entropy_parts(logits, labels)?.0)
}

/// Loss together with the softmax probabilities kept for the backward pass.
pub(crate) fn softmax_cross_entropy_parts<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.shape().as_matrix();
    check_labels(n, k, labels)?;
    if n == 0 {
        return Err(invalid("cross-entropy over an empty batch"));
    }
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total = total + (lse - row[label]);
    }
    Ok((total / T::from_usize(n).unwrap(), softmax(logits)))
}

/// `(softmax - one_hot) / n`, scaled by the upstream scalar gradient.
pub(crate) fn softmax_cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = probs.shape().as_matrix();
    let scale = upstream / T::from_usize(n).unwrap();
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    d
}

/// He-normal initialization: zero mean, standard deviation `sqrt(2 / fan_in)`.
/// Samples are drawn in 64-bit so both precisions see identical values.
pub fn he_init<T: Element, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(invalid("he_init needs a positive fan-in"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec([1, 3, 1, 1], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec([1, 3, 1, 1], vec![0.5f32, 0.0, 9.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&x, &Tensor::ones([1, 3, 1, 1]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooling() {
        let y = global_avg_pool(&Tensor::<f32>::ones([1, 4, 8, 8])).unwrap();
        assert_eq!(y, Tensor::ones([1, 4, 1, 1]));
        let x = Tensor::from_fn([2, 3, 1, 1], |[n, c, _, _]| (n * 3 + c) as f32);
        assert_eq!(global_avg_pool(&x).unwrap(), x);
        let x = Tensor::from_fn([2, 3, 4, 5], |[n, c, i, j]| {
            ((n * 60 + c * 20 + i * 5 + j) as f64).sin()
        });
        let y = global_avg_pool(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..5 {
                        acc += x[[n, c, i, j]];
                    }
                }
                assert!((y[[n, c, 0, 0]] - acc / 20.0).abs() <= 1e-6);
            }
        }
        assert!(global_avg_pool(&Tensor::<f32>::zeros([1, 2, 0, 3])).is_err());
    }

    #[test]
    fn linear_values() {
        let x = Tensor::from_vec(Shape::matrix(1, 2), vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::from_vec(Shape::matrix(2, 1), vec![1.0f32, 1.0]).unwrap();
        let b = Tensor::from_vec(Shape::matrix(1, 1), vec![3.0f32]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[6.0]);

        let x = Tensor::from_fn(Shape::matrix(3, 4), |[i, j, _, _]| (i * 4 + j) as f32);
        let id = Tensor::from_fn(Shape::matrix(4, 4), |[i, j, _, _]| if i == j { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &id, &Tensor::zeros([1, 4, 1, 1])).unwrap(), x);
        assert!(linear(&x, &Tensor::zeros(Shape::matrix(3, 2)), &Tensor::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::from_fn(Shape::matrix(5, 7), |[i, j, _, _]| ((i * 7 + j) as f32 * 0.3).cos());
        let w = Tensor::from_fn(Shape::matrix(7, 3), |[i, j, _, _]| ((i * 3 + j) as f32 * 0.7).sin());
        let b = Tensor::from_vec([1, 3, 1, 1], vec![0.1f32, -0.2, 0.3]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        let xw = x.matmul(&w).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((y[[i, j, 0, 0]] - (xw[[i, j, 0, 0]] + b.data()[j])).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::<f64>::zeros(Shape::matrix(3, 10));
        let loss = softmax_cross_entropy(&uniform, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);

        let mut confident = Tensor::<f64>::zeros(Shape::matrix(1, 10));
        confident.data_mut()[3] = 50.0;
        assert!(softmax_cross_entropy(&confident, &[3]).unwrap() < 1e-9);

        assert!(softmax_cross_entropy(&uniform, &[0, 1, 10]).is_err());
        assert!(softmax_cross_entropy(&uniform, &[0, 1]).is_err());
    }

    #[test]
    fn he_init_moments_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Tensor<f64> = he_init(Shape::new(10_000, 1, 1, 1), 50, &mut rng).unwrap();
        let mean = t.sum() / 1e4;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
        assert!((std - 0.2).abs() <= 0.2 * 0.05, "std {std}");

        let a: Tensor<f32> = he_init(Shape::new(4, 3, 3, 3), 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Tensor<f32> = he_init(Shape::new(4, 3, 3, 3), 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let t: Tensor<f64> = he_init(Shape::new(20_000, 1, 1, 1), 2, &mut rng).unwrap();
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 2e4).sqrt();
        assert!((std - 1.0).abs() < 0.03);
        assert!(he_init::<f32, _>(Shape::new(1, 1, 1, 1), 0, &mut rng).is_err());
    }
}
