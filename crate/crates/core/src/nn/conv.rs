//! Grouped 2-D convolution lowered to im2col + matrix multiply.
//!
//! Weights are `[out_channels, in_channels / groups, k, k]`. Group `g` reads
//! input channels `[g * cin_g, (g + 1) * cin_g)` and writes output channels
//! `[g * cout_g, (g + 1) * cout_g)`, so every group is a contiguous channel
//! range and its weight rows are a contiguous slice of the weight buffer.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, Element, MatRef, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || groups == 0 {
            return Err(invalid("kernel, stride and groups must be positive"));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid("convolution needs at least one input and output channel"));
        }
        if !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(invalid(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            groups,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_per_group(), self.kernel, self.kernel)
    }

    /// Inputs feeding each output unit.
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(invalid(format!(
                "padded input {hp}x{wp} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(invalid(format!(
                "input {input} has {} channels, convolution expects {}",
                input.c, self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, ho, wo))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Convolution parameters in value form, for the functional [`conv2d`].
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn geometry(&self) -> Result<ConvGeometry> {
        let ws = self.weight.shape();
        if ws.h != ws.w {
            return Err(invalid(format!("non-square kernel {ws}")));
        }
        let geom = ConvGeometry::new(ws.c * self.groups, ws.n, ws.h, self.stride, self.pad, self.groups)?;
        if let Some(b) = &self.bias {
            if b.numel() != ws.n {
                return Err(invalid(format!("bias {} for {} output channels", b.shape(), ws.n)));
            }
        }
        if !self.weight.is_finite() {
            return Err(Error::NonFinite("convolution weight".into()));
        }
        Ok(geom)
    }
}

pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let geom = p.geometry()?;
    conv2d_forward(x, &p.weight, p.bias.as_ref().map(|b| b.data()), &geom)
}

fn im2col<T: Element>(src: &[T], h: usize, w: usize, ho: usize, wo: usize, geom: &ConvGeometry, cols: &mut [T]) {
    let k = geom.kernel;
    let plane = h * w;
    let p = ho * wo;
    let channels = src.len() / plane;
    for c in 0..channels {
        let chan = &src[c * plane..(c + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((c * k + u) * k + v) * p..][..p];
                for i in 0..ho {
                    let ih = (i * geom.stride + u) as isize - geom.pad as isize;
                    let out = &mut row[i * wo..(i + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &chan[ih as usize * w..(ih as usize + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let iw = (j * geom.stride + v) as isize - geom.pad as isize;
                        *o = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            line[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], h: usize, w: usize, ho: usize, wo: usize, geom: &ConvGeometry, dst: &mut [T]) {
    let k = geom.kernel;
    let plane = h * w;
    let p = ho * wo;
    let channels = dst.len() / plane;
    for c in 0..channels {
        let chan = &mut dst[c * plane..(c + 1) * plane];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((c * k + u) * k + v) * p..][..p];
                for i in 0..ho {
                    let ih = (i * geom.stride + u) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let line = &mut chan[ih as usize * w..(ih as usize + 1) * w];
                    for j in 0..wo {
                        let iw = (j * geom.stride + v) as isize - geom.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            line[iw as usize] = line[iw as usize] + row[i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    if weight.shape() != geom.weight_shape() {
        return Err(Error::ShapeMismatch {
            left: weight.shape(),
            right: geom.weight_shape(),
        });
    }
    let xs = x.shape();
    let out_shape = geom.output_shape(xs)?;
    let (ho, wo) = (out_shape.h, out_shape.w);
    let p = ho * wo;
    let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
    let kg = geom.fan_in();
    let in_len = xs.sample_len();
    let group_in = cin_g * xs.plane();
    let wdata = weight.data();

    let mut out = Tensor::zeros(out_shape);
    if out_shape.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each_init(
            || vec![T::zero(); if geom.is_pointwise() { 0 } else { kg * p }],
            |cols, (n, dst)| {
                let sample = &x.data()[n * in_len..(n + 1) * in_len];
                for g in 0..geom.groups {
                    let src = &sample[g * group_in..(g + 1) * group_in];
                    let rhs: &[T] = if geom.is_pointwise() {
                        src
                    } else {
                        im2col(src, xs.h, xs.w, ho, wo, geom, cols);
                        cols
                    };
                    gemm(
                        cout_g,
                        kg,
                        p,
                        MatRef::new(&wdata[g * cout_g * kg..(g + 1) * cout_g * kg]),
                        MatRef::new(rhs),
                        T::zero(),
                        &mut dst[g * cout_g * p..(g + 1) * cout_g * p],
                    );
                }
                if let Some(b) = bias {
                    for (o, chunk) in dst.chunks_mut(p).enumerate() {
                        for v in chunk {
                            *v = *v + b[o];
                        }
                    }
                }
            },
        );
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Vec<T>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
/// Batch contributions to the weight gradient are summed in batch order.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeometry,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ys = dy.shape();
    let (ho, wo) = (ys.h, ys.w);
    let p = ho * wo;
    let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
    let kg = geom.fan_in();
    let in_len = xs.sample_len();
    let group_in = cin_g * xs.plane();
    let wdata = weight.data();

    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = vec![T::zero(); geom.out_channels];
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kg * p }];
    let mut dcols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kg * p }];

    for n in 0..xs.n {
        let sample = &x.data()[n * in_len..(n + 1) * in_len];
        let dys = &dy.data()[n * ys.sample_len()..(n + 1) * ys.sample_len()];
        for (o, chunk) in dys.chunks(p).enumerate() {
            dbias[o] = chunk.iter().fold(dbias[o], |acc, &v| acc + v);
        }
        for g in 0..geom.groups {
            let src = &sample[g * group_in..(g + 1) * group_in];
            let dy_g = &dys[g * cout_g * p..(g + 1) * cout_g * p];
            let w_g = &wdata[g * cout_g * kg..(g + 1) * cout_g * kg];
            let rhs: &[T] = if geom.is_pointwise() {
                src
            } else {
                im2col(src, xs.h, xs.w, ho, wo, geom, &mut cols);
                &cols
            };
            gemm(
                cout_g,
                p,
                kg,
                MatRef::new(dy_g),
                MatRef::t(rhs),
                T::one(),
                &mut dweight.data_mut()[g * cout_g * kg..(g + 1) * cout_g * kg],
            );
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[n * in_len + g * group_in..][..group_in];
                if geom.is_pointwise() {
                    gemm(kg, cout_g, p, MatRef::t(w_g), MatRef::new(dy_g), T::zero(), dst);
                } else {
                    gemm(kg, cout_g, p, MatRef::t(w_g), MatRef::new(dy_g), T::zero(), &mut dcols);
                    col2im(&dcols, xs.h, xs.w, ho, wo, geom, dst);
                }
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let s: Shape = shape.into();
        Tensor::from_vec(s, (0..s.numel()).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()).unwrap()
    }

    fn loop_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let out = g.output_shape(xs).unwrap();
        Tensor::from_fn(out, |[n, o, i, j]| {
            let grp = o / g.out_per_group();
            let mut acc = 0.0;
            for cl in 0..g.in_per_group() {
                let c = grp * g.in_per_group() + cl;
                for u in 0..g.kernel {
                    for v in 0..g.kernel {
                        let ih = (i * g.stride + u) as isize - g.pad as isize;
                        let iw = (j * g.stride + v) as isize - g.pad as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < xs.h && (iw as usize) < xs.w {
                            acc += w[[o, cl, u, v]] * x[[n, c, ih as usize, iw as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn stem_shape() {
        let geom = ConvGeometry::new(3, 64, 3, 1, 1, 1).unwrap();
        let y = conv2d_forward(
            &Tensor::<f32>::ones([1, 3, 32, 32]),
            &Tensor::ones(geom.weight_shape()),
            None,
            &geom,
        )
        .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 64, 32, 32));
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = pseudo([2, 4, 5, 5], 1.0);
        let p = ConvParams {
            weight: Tensor::ones([4, 1, 1, 1]),
            bias: None,
            stride: 1,
            pad: 0,
            groups: 4,
        };
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn strided_padded_grouped_matches_loops() {
        for &(groups, stride, pad, k) in &[(2, 1, 1, 3), (4, 2, 0, 3), (1, 2, 1, 1), (2, 2, 1, 3)] {
            let geom = ConvGeometry::new(4, 8, k, stride, pad, groups).unwrap();
            let x = pseudo([2, 4, 7, 6], 0.3);
            let w = pseudo(geom.weight_shape().dims(), 9.0);
            let got = conv2d_forward(&x, &w, None, &geom).unwrap();
            let want = loop_conv(&x, &w, &geom);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeometry::new(6, 8, 3, 1, 1, 4).is_err());
        assert!(ConvGeometry::new(4, 6, 3, 1, 1, 4).is_err());
        assert!(ConvGeometry::new(4, 4, 3, 0, 1, 1).is_err());
        let geom = ConvGeometry::new(4, 4, 3, 1, 0, 1).unwrap();
        assert!(geom.output_shape(Shape::new(1, 4, 2, 2)).is_err());
        assert!(geom.output_shape(Shape::new(1, 3, 5, 5)).is_err());
    }

    #[test]
    fn bias_added_per_channel() {
        let p = ConvParams {
            weight: Tensor::<f64>::zeros([3, 2, 3, 3]),
            bias: Some(Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap()),
            stride: 1,
            pad: 1,
            groups: 1,
        };
        let y = conv2d(&pseudo([1, 2, 4, 4], 0.0), &p).unwrap();
        for o in 0..3 {
            assert!((0..16).all(|i| y.data()[o * 16 + i] == (o + 1) as f64));
        }
    }
}
