//! Discrete gradient with forward differences and Neumann boundary, its
//! adjoint, and the smoothed isotropic total variation built on it.

/// `(horizontal, vertical)` forward differences; the last column/row is zero.
pub fn gradient(x: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            gx[i] = if c + 1 < w { x[i + 1] - x[i] } else { 0.0 };
            gy[i] = if r + 1 < h { x[i + w] - x[i] } else { 0.0 };
        }
    }
}

/// Adjoint of [`gradient`] (the negative divergence), written into `out`.
pub fn gradient_adjoint(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if c + 1 < w {
                v -= px[i];
            }
            if c > 0 {
                v += px[i - 1];
            }
            if r + 1 < h {
                v -= py[i];
            }
            if r > 0 {
                v += py[i - w];
            }
            out[i] = v;
        }
    }
}

/// Isotropic total variation `sum_i |(Dx)_i|`.
pub fn total_variation(x: &[f64], h: usize, w: usize) -> f64 {
    smoothed_tv(x, h, w, 0.0)
}

/// `sum_i sqrt(|(Dx)_i|^2 + eps)`.
pub fn smoothed_tv(x: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    let n = h * w;
    let mut gx = alloc::vec![0.0; n];
    let mut gy = alloc::vec![0.0; n];
    gradient(x, h, w, &mut gx, &mut gy);
    gx.iter()
        .zip(&gy)
        .map(|(a, b)| libm::sqrt(a * a + b * b + eps))
        .sum()
}

/// Gradient of [`smoothed_tv`] with respect to `x`.
pub fn smoothed_tv_gradient(x: &[f64], h: usize, w: usize, eps: f64, out: &mut [f64]) {
    let n = h * w;
    let mut gx = alloc::vec![0.0; n];
    let mut gy = alloc::vec![0.0; n];
    gradient(x, h, w, &mut gx, &mut gy);
    for i in 0..n {
        let norm = libm::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + eps);
        gx[i] /= norm;
        gy[i] /= norm;
    }
    gradient_adjoint(&gx, &gy, h, w, out);
}

/// Hessian of [`smoothed_tv`] at `x` applied to `v`: `D^T J(Dx) D v` with the
/// per-pixel Jacobian `J(u) = I/n - u u^T / n^3`, `n = sqrt(|u|^2 + eps)`.
pub fn smoothed_tv_hvp(x: &[f64], v: &[f64], h: usize, w: usize, eps: f64, out: &mut [f64]) {
    let n = h * w;
    let mut ux = alloc::vec![0.0; n];
    let mut uy = alloc::vec![0.0; n];
    let mut dx = alloc::vec![0.0; n];
    let mut dy = alloc::vec![0.0; n];
    gradient(x, h, w, &mut ux, &mut uy);
    gradient(v, h, w, &mut dx, &mut dy);
    for i in 0..n {
        let nrm = libm::sqrt(ux[i] * ux[i] + uy[i] * uy[i] + eps);
        let proj = (ux[i] * dx[i] + uy[i] * dy[i]) / (nrm * nrm * nrm);
        dx[i] = dx[i] / nrm - ux[i] * proj;
        dy[i] = dy[i] / nrm - uy[i] * proj;
    }
    gradient_adjoint(&dx, &dy, h, w, out);
}
