//! Forward/backward kernels shared by the model components.
//!
//! Activations are channel-major (`C×H×W`) for images and row-major
//! `batch×features` for dense layers. Backward kernels accumulate parameter
//! gradients into caller-owned buffers.

use rand::Rng;

use crate::real::{matmul, Op, Real};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Unfolds 3×3 patches (padding 1) into a `(c·9) × (ho·wo)` matrix.
fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, stride: usize) -> Vec<F> {
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let p = ho * wo;
    let mut cols = vec![F::zero(); c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, stride: usize, dx: &mut [F]) {
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Image geometry of a channel-major activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 3×3 convolution, padding 1. `weight` is `cout × cin × 3 × 3`.
pub fn conv3x3<F: Real>(
    x: &[F],
    d: Dims,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
) -> (Vec<F>, Dims) {
    let cout = weight.shape()[0];
    let out = Dims {
        c: cout,
        h: conv_out_len(d.h, stride),
        w: conv_out_len(d.w, stride),
    };
    let p = out.h * out.w;
    let cols = im2col(x, d.c, d.h, d.w, stride);
    let mut y = vec![F::zero(); cout * p];
    for (co, b) in bias.data().iter().enumerate() {
        y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *b);
    }
    matmul(Op::N, Op::N, cout, d.c * 9, p, F::one(), weight.data(), &cols, F::one(), &mut y);
    (y, out)
}

/// Backward of [`conv3x3`]; returns the input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<F: Real>(
    x: &[F],
    d: Dims,
    weight: &Tensor<F>,
    stride: usize,
    dy: &[F],
    dweight: &mut Tensor<F>,
    dbias: &mut Tensor<F>,
    need_dx: bool,
) -> Option<Vec<F>> {
    let cout = weight.shape()[0];
    let p = conv_out_len(d.h, stride) * conv_out_len(d.w, stride);
    let k = d.c * 9;
    let cols = im2col(x, d.c, d.h, d.w, stride);
    matmul(Op::N, Op::T, cout, p, k, F::one(), dy, &cols, F::one(), dweight.data_mut());
    for (co, db) in dbias.data_mut().iter_mut().enumerate() {
        *db += dy[co * p..(co + 1) * p].iter().copied().sum::<F>();
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![F::zero(); k * p];
    matmul(Op::T, Op::N, k, cout, p, F::one(), weight.data(), dy, F::zero(), &mut dcols);
    let mut dx = vec![F::zero(); d.len()];
    col2im(&dcols, d.c, d.h, d.w, stride, &mut dx);
    Some(dx)
}

pub fn relu_inplace<F: Real>(v: &mut [F]) {
    for x in v {
        if *x < F::zero() {
            *x = F::zero();
        }
    }
}

/// Masks `grad` where the (post-ReLU) activation is not positive.
pub fn relu_backward_inplace<F: Real>(activated: &[F], grad: &mut [F]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// `y (b×out) = x (b×in) · Wᵀ + bias`, `W` is `out × in`.
pub fn linear<F: Real>(x: &[F], batch: usize, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Vec<F> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let mut y = vec![F::zero(); batch * out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    matmul(Op::N, Op::T, batch, inp, out, F::one(), x, weight.data(), F::one(), &mut y);
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db`; returns `dx` when asked.
pub fn linear_backward<F: Real>(
    x: &[F],
    batch: usize,
    weight: &Tensor<F>,
    dy: &[F],
    dweight: &mut Tensor<F>,
    dbias: Option<&mut Tensor<F>>,
    need_dx: bool,
) -> Option<Vec<F>> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    matmul(Op::T, Op::N, out, batch, inp, F::one(), dy, x, F::one(), dweight.data_mut());
    if let Some(db) = dbias {
        for row in dy.chunks_exact(out) {
            for (d, g) in db.data_mut().iter_mut().zip(row) {
                *d += *g;
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = vec![F::zero(); batch * inp];
    matmul(Op::N, Op::N, batch, out, inp, F::one(), dy, weight.data(), F::zero(), &mut dx);
    Some(dx)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Kaiming-uniform fan-in draw: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

pub fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Numerically stable in-place softmax.
pub fn softmax_inplace<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp<F: Real>(v: &[F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}
