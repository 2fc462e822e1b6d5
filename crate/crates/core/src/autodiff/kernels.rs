//! Forward and backward kernels for the differentiable operations.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;

/// Same-size 2-D convolution (cross-correlation) with zero padding.
///
/// `weight` has shape `[out, in, k*k]`, `bias` `[out, 1, 1]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, k: usize) -> Tensor {
    let [ci, h, w] = x.shape();
    let co = weight.shape()[0];
    let plane = h * w;
    let rows = ci * k * k;
    let cols = im2col(x, k);
    let mut out = Tensor::zeros([co, h, w]);
    let od = out.data_mut();
    for o in 0..co {
        od[o * plane..(o + 1) * plane].fill(bias.data()[o]);
    }
    // out[co, hw] += W[co, rows] * cols[rows, hw]
    gemm(co, rows, plane, weight.data(), false, &cols, false, od, 1.0);
    out
}

/// Output positions `y` for which `y + d` is inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

/// Unfolds zero-padded `k x k` neighbourhoods into a `[ci*k*k, h*w]` matrix.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let [ci, h, w] = x.shape();
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; ci * k * k * plane];
    let xd = x.data();
    for i in 0..ci {
        let src = &xd[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                let r = (i * k + ky) * k + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = sy * w + (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[ci, h, w]` tensor.
fn col2im(cols: &[f64], shape: [usize; 3], k: usize) -> Tensor {
    let [ci, h, w] = shape;
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for i in 0..ci {
        let dst = &mut od[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                let r = (i * k + ky) * k + kx;
                let src = &cols[r * plane..(r + 1) * plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = sy * w + (x0 as isize + dx) as usize;
                    for (d, s) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// `c = a * b + beta * c` on row-major matrices; `a` is `m x k`, `b` is
/// `k x n`, either optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents; callers pass exact sizes.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, k: usize, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [ci, h, w] = x.shape();
    let co = weight.shape()[0];
    let plane = h * w;
    let rows = ci * k * k;
    let cols = im2col(x, k);
    let gd = grad.data();
    let mut gb = Tensor::zeros([co, 1, 1]);
    for o in 0..co {
        gb.data_mut()[o] = gd[o * plane..(o + 1) * plane].iter().sum();
    }
    let mut gw = Tensor::zeros(weight.shape());
    // gW[co, rows] = G[co, hw] * cols^T
    gemm(co, plane, rows, gd, false, &cols, true, gw.data_mut(), 0.0);
    // gcols[rows, hw] = W^T * G
    let mut gcols = vec![0.0; rows * plane];
    gemm(rows, co, plane, weight.data(), true, gd, false, &mut gcols, 0.0);
    (col2im(&gcols, [ci, h, w], k), gw, gb)
}

/// `y = W vec(x) + b` with `weight` of shape `[out, in, 1]`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.len();
    let out_dim = weight.shape()[0];
    let mut out = Tensor::zeros([out_dim, 1, 1]);
    for o in 0..out_dim {
        let row = &weight.data()[o * n..(o + 1) * n];
        out.data_mut()[o] = bias.data()[o] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

pub fn affine_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.len();
    let out_dim = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    for o in 0..out_dim {
        let g = grad.data()[o];
        let row = &weight.data()[o * n..(o + 1) * n];
        for (d, wv) in gx.data_mut().iter_mut().zip(row) {
            *d += g * wv;
        }
        for (d, xv) in gw.data_mut()[o * n..(o + 1) * n].iter_mut().zip(x.data()) {
            *d = g * xv;
        }
    }
    (gx, gw, grad.clone())
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2(x: &Tensor) -> Tensor {
    let [c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([c, ho, wo]);
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out.data_mut()[ch * ho * wo + y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(input_shape: [usize; 3], grad: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = Tensor::zeros(input_shape);
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * grad.data()[ch * ho * wo + y * wo + xx];
                let i = ch * h * w + 2 * y * w + 2 * xx;
                let d = gx.data_mut();
                d[i] += g;
                d[i + 1] += g;
                d[i + w] += g;
                d[i + w + 1] += g;
            }
        }
    }
    gx
}

/// Mean over the spatial axes: `[c, h, w] -> [c, 1, 1]`.
pub fn global_mean(x: &Tensor) -> Tensor {
    let c = x.channels();
    let n = x.plane() as f64;
    Tensor::vector((0..c).map(|ch| x.channel(ch).iter().sum::<f64>() / n).collect())
}

pub fn global_mean_backward(input_shape: [usize; 3], grad: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let n = (h * w) as f64;
    let mut gx = Tensor::zeros(input_shape);
    for ch in 0..c {
        let g = grad.data()[ch] / n;
        gx.data_mut()[ch * h * w..(ch + 1) * h * w].fill(g);
    }
    gx
}

/// Broadcasts `[c, 1, 1]` to `[c, h, w]`.
pub fn tile(v: &Tensor, h: usize, w: usize) -> Tensor {
    let c = v.channels();
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        out.data_mut()[ch * h * w..(ch + 1) * h * w].fill(v.data()[ch]);
    }
    out
}

pub fn tile_backward(grad: &Tensor) -> Tensor {
    Tensor::vector((0..grad.channels()).map(|c| grad.channel(c).iter().sum()).collect())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
