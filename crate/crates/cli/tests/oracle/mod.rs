//! Reference computations written independently of the library kernels.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central differences of `f` with respect to every element of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub struct ConvCase {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvCase {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// Direct seven-loop grouped convolution over NCHW data with OIHW weights.
pub fn conv_nested(c: &ConvCase, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = c.out_hw();
    let cin_g = c.cin / c.groups;
    let cout_g = c.cout / c.groups;
    let mut out = vec![0.0; c.n * c.cout * ho * wo];
    for n in 0..c.n {
        for o in 0..c.cout {
            let g = o / cout_g;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for cc in 0..cin_g {
                        let ch = g * cin_g + cc;
                        for u in 0..c.k {
                            for v in 0..c.k {
                                let yi = (i * c.stride + u) as isize - c.pad as isize;
                                let xj = (j * c.stride + v) as isize - c.pad as isize;
                                if yi < 0 || xj < 0 || yi >= c.h as isize || xj >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((n * c.cin + ch) * c.h + yi as usize) * c.w + xj as usize];
                                let wv = weight[((o * cin_g + cc) * c.k + u) * c.k + v];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((n * c.cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

/// Learnable scalars of the CIFAR ResNeXt template, summed layer by layer:
/// 3x3 stem with 64 filters and BN, stages of three bottleneck blocks with
/// inner width C*d*2^s and output width 256*2^s, a 1x1 projection with BN on
/// every block whose input and output shapes differ, and a linear head.
pub fn resnext_param_count(depth: usize, cardinality: usize, base_width: usize, classes: usize) -> usize {
    assert_eq!((depth - 2) % 9, 0);
    let stages = (depth - 2) / 9;
    let mut layers: Vec<usize> = Vec::new();
    layers.push(3 * 64 * 9);
    layers.push(2 * 64);
    let mut cin = 64;
    for s in 0..stages {
        let inner = (cardinality * base_width) << s;
        let out = 256 << s;
        for b in 0..3 {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            layers.push(cin * inner);
            layers.push(2 * inner);
            layers.push(cardinality * (inner / cardinality) * (inner / cardinality) * 9);
            layers.push(2 * inner);
            layers.push(inner * out);
            layers.push(2 * out);
            if cin != out || stride != 1 {
                layers.push(cin * out);
                layers.push(2 * out);
            }
            cin = out;
        }
    }
    layers.push(cin * classes + classes);
    layers.iter().sum()
}

/// One SGD step written out by hand for a scalar weight.
pub fn sgd_scalar(w: f64, v: f64, g: f64, lr: f64, momentum: f64, wd: f64) -> (f64, f64) {
    let g = g + wd * w;
    let v = momentum * v + g;
    (w - lr * v, v)
}
