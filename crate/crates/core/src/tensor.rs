//! Dense 4-D tensors in batch-channel-height-width layout.
//!
//! Every value flowing through the framework is a [`Tensor`]. There is no
//! broadcasting and no strided view: shapes must agree exactly and storage
//! is always contiguous row-major NCHW. Matrices are tensors of shape
//! `[rows, cols, 1, 1]`.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{invalid, Error, Result};

/// Floating-point element type. `f32` is the training precision; `f64`
/// exists for finite-difference and cross-form oracles.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand for [`gemm`]: `trans` means the buffer holds the
/// transpose of the logical operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T]) -> Self {
        MatRef { data, trans: false }
    }

    pub fn t(data: &'a [T]) -> Self {
        MatRef { data, trans: true }
    }
}

/// `c = a * b + beta * c` where `a` is logically `m x k`, `b` is `k x n` and
/// `c` is a row-major `m x n` buffer.
pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert!(a.data.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.data.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer sizes checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch, channel, height and width extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// A `[rows, cols, 1, 1]` matrix shape.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(rows, cols, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.numel() == 0
    }

    /// Elements per batch entry.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Row/column counts when the tensor is read as a matrix.
    pub const fn as_matrix(&self) -> (usize, usize) {
        (self.n, self.c * self.h * self.w)
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Stacks tensors along the channel axis in list order.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_channels needs at least one tensor"))?
            .shape;
        for p in parts {
            if (p.shape.n, p.shape.h, p.shape.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    left: first,
                    right: p.shape,
                });
            }
        }
        let channels = parts.iter().map(|p| p.shape.c).sum();
        let shape = Shape::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for p in parts {
                let len = p.shape.sample_len();
                data.extend_from_slice(&p.data[n * len..(n + 1) * len]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Splits the channel axis into consecutive ranges of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        let total: usize = sizes.iter().sum();
        if total != self.shape.c {
            return Err(invalid(format!(
                "split sizes {sizes:?} sum to {total}, tensor {} has {} channels",
                self.shape, self.shape.c
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &size in sizes {
            out.push(self.slice_channels(start, size));
            start += size;
        }
        Ok(out)
    }

    /// Channels `[start, start + len)`; caller guarantees the range is valid.
    pub(crate) fn slice_channels(&self, start: usize, len: usize) -> Tensor<T> {
        let s = self.shape;
        debug_assert!(start + len <= s.c);
        let shape = Shape::new(s.n, len, s.h, s.w);
        let plane = s.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let base = s.offset(n, start, 0, 0);
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor { shape, data }
    }

    /// Batch entries `[start, start + len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.shape.n {
            return Err(invalid(format!(
                "batch range {start}..{} out of bounds for {}",
                start + len,
                self.shape
            )));
        }
        let per = self.shape.sample_len();
        Ok(Tensor {
            shape: Shape::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_batch needs at least one tensor"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    left: first,
                    right: p.shape,
                });
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// Zero-pads both spatial dimensions by `p` pixels on every side.
    pub fn pad2d(&self, p: usize) -> Tensor<T> {
        if p == 0 {
            return self.clone();
        }
        let s = self.shape;
        let shape = Shape::new(s.n, s.c, s.h + 2 * p, s.w + 2 * p);
        let mut out = Tensor::zeros(shape);
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    let src = s.offset(n, c, h, 0);
                    let dst = shape.offset(n, c, h + p, p);
                    out.data[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
                }
            }
        }
        out
    }

    /// Matrix product reading both operands as `[rows, c*h*w]` matrices.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.shape.as_matrix();
        let (k2, n) = rhs.shape.as_matrix();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: rhs.shape,
            });
        }
        let mut out = Tensor::zeros(Shape::matrix(m, n));
        gemm(
            m,
            k,
            n,
            MatRef::new(&self.data),
            MatRef::new(&rhs.data),
            T::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    /// Matrix transpose of a `[rows, cols, 1, 1]` view.
    pub fn transpose(&self) -> Tensor<T> {
        let (m, n) = self.shape.as_matrix();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: Shape::matrix(n, m),
            data,
        }
    }
}

impl<T: Element> std::ops::Index<[usize; 4]> for Tensor<T> {
    type Output = T;

    fn index(&self, i: [usize; 4]) -> &T {
        &self.data[self.shape.offset(i[0], i[1], i[2], i[3])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: [usize; 4], scale: f32) -> Tensor {
        let s: Shape = shape.into();
        Tensor::from_vec(s, (0..s.numel()).map(|i| (i as f32 * 0.37).sin() * scale).collect()).unwrap()
    }

    #[test]
    fn add_values() {
        let a = Tensor::full([1, 1, 1, 1], 2.0f32);
        let b = Tensor::full([1, 1, 1, 1], 3.0f32);
        assert_eq!(a.add(&b).unwrap().item(), Some(5.0));
        let x = seq([2, 3, 4, 4], 1.0);
        assert_eq!(x.add(&Tensor::zeros(x.shape())).unwrap(), x);
    }

    #[test]
    fn add_matches_elementwise_loop() {
        let a = seq([2, 3, 4, 4], 3.0);
        let b = seq([2, 3, 4, 4], -1.5).map(|v| v + 0.25);
        let sum = a.add(&b).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(sum[[n, c, i, j]], a[[n, c, i, j]] + b[[n, c, i, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let err = Tensor::<f32>::zeros([1, 2, 3, 3])
            .add(&Tensor::zeros([1, 2, 3, 4]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 3, 3]") && msg.contains("[1, 2, 3, 4]"), "{msg}");
    }

    #[test]
    fn concat_and_split() {
        let a = seq([1, 2, 4, 4], 1.0);
        let b = seq([1, 2, 4, 4], 2.0);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 4, 4, 4));
        assert_eq!(Tensor::concat_channels(&[&a]).unwrap(), a);
        assert_eq!(cat.split_channels(&[2, 2]).unwrap(), vec![a, b]);

        let x = seq([1, 4, 2, 2], 1.0);
        let parts = x.split_channels(&[2, 2]).unwrap();
        assert!(parts.iter().all(|p| p.shape() == Shape::new(1, 2, 2, 2)));
        assert_eq!(x.split_channels(&[4]).unwrap(), vec![x.clone()]);
    }

    #[test]
    fn concat_and_split_errors() {
        assert!(Tensor::<f32>::concat_channels(&[]).is_err());
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 2, 4, 5]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
        assert!(a.split_channels(&[1, 2]).is_err());
    }

    #[test]
    fn pad2d_grows_and_keeps_interior() {
        let x = seq([1, 3, 32, 32], 1.0).map(|v| v + 2.0);
        let p = x.pad2d(2);
        assert_eq!(p.shape(), Shape::new(1, 3, 36, 36));
        for c in 0..3 {
            for i in 0..36 {
                for j in 0..36 {
                    let inside = (2..34).contains(&i) && (2..34).contains(&j);
                    if inside {
                        assert_eq!(p[[0, c, i, j]], x[[0, c, i - 2, j - 2]]);
                    } else {
                        assert_eq!(p[[0, c, i, j]], 0.0);
                    }
                }
            }
        }
        assert_eq!(x.pad2d(0), x);
        assert_eq!(p.sum(), x.sum());
    }

    #[test]
    fn matmul_small_cases() {
        let id = Tensor::from_fn(Shape::matrix(3, 3), |[i, j, _, _]| if i == j { 1.0f32 } else { 0.0 });
        let m = seq([3, 4, 1, 1], 1.0);
        assert_eq!(id.matmul(&m).unwrap(), m);

        let a = Tensor::from_vec(Shape::matrix(2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(Shape::matrix(2, 1), vec![5.0f32, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(a.matmul(&seq([3, 1, 1, 1], 1.0)).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = seq([7, 5, 1, 1], 2.0);
        let b = seq([5, 3, 1, 1], -1.0).map(|v| v + 0.1);
        let got = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for k in 0..5 {
                    acc += a[[i, k, 0, 0]] * b[[k, j, 0, 0]];
                }
                assert!((got[[i, j, 0, 0]] - acc).abs() <= 1e-5);
            }
        }
    }

    fn tensor_strategy() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, c, h, w)| {
            let len = n * c * h * w;
            let v = || proptest::collection::vec(-1e3f32..1e3, len);
            (v(), v(), v()).prop_map(move |(a, b, c2)| {
                let s = Shape::new(n, c, h, w);
                (
                    Tensor::from_vec(s, a).unwrap(),
                    Tensor::from_vec(s, b).unwrap(),
                    Tensor::from_vec(s, c2).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn add_commutes_and_associates((a, b, c) in tensor_strategy()) {
            let ab = a.add(&b).unwrap();
            prop_assert_eq!(&ab, &b.add(&a).unwrap());
            let left = ab.add(&c).unwrap();
            let right = a.add(&b.add(&c).unwrap()).unwrap();
            // relative to magnitude 1e3 inputs, reassociation error is ulp-scale
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-5 * 3e3);
        }

        #[test]
        fn split_concat_inverse(
            sizes in proptest::collection::vec(1usize..4, 1..4),
            n in 1usize..3, h in 1usize..4, w in 1usize..4,
        ) {
            let c: usize = sizes.iter().sum();
            let x = Tensor::from_fn([n, c, h, w], |[a, b, i, j]| (a * 1000 + b * 100 + i * 10 + j) as f32 * 0.5);
            let before = x.clone();
            let parts = x.split_channels(&sizes).unwrap();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let back = Tensor::concat_channels(&refs).unwrap();
            prop_assert_eq!(&back, &x);
            prop_assert_eq!(back.split_channels(&sizes).unwrap(), parts);
            prop_assert_eq!(x, before);
        }

        #[test]
        fn pad_preserves_sum(p in 0usize..4, vals in proptest::collection::vec(-8i32..8, 2 * 2 * 3 * 3)) {
            // small integers keep the f32 sum exact regardless of order
            let x = Tensor::from_vec([2, 2, 3, 3], vals.into_iter().map(|v| v as f32).collect()).unwrap();
            prop_assert_eq!(x.pad2d(p).sum(), x.sum());
        }
    }
}
