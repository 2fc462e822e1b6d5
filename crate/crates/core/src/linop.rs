//! Discrete linear forward operators: the parallel-beam Radon transform and
//! a dense matrix operator for small test systems.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Sinogram};

/// Power iterations used to fix the normalization scale.
pub const NORMALIZATION_ITERATIONS: usize = 50;

const AXIS_EPS: f64 = 1e-12;
const SEGMENT_EPS: f64 = 1e-13;
const EDGE_EPS: f64 = 1e-9;

/// A linear map between two grid shapes together with its adjoint.
pub trait LinearOperator: Sync {
    /// Shape of the input grid.
    fn domain_shape(&self) -> (usize, usize);
    /// Shape of the output grid.
    fn range_shape(&self) -> (usize, usize);
    /// `out = A x`. `out` is overwritten.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// `out = A* y`. `out` is overwritten.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn apply(&self, x: &Grid) -> Result<Grid> {
        x.check_shape(self.domain_shape())?;
        let (r, c) = self.range_shape();
        let mut out = Grid::zeros(r, c);
        self.apply_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn adjoint(&self, y: &Grid) -> Result<Grid> {
        y.check_shape(self.range_shape())?;
        let (r, c) = self.domain_shape();
        let mut out = Grid::zeros(r, c);
        self.adjoint_into(y.as_slice(), out.as_mut_slice());
        Ok(out)
    }
}

/// Acquisition geometry of a parallel-beam scanner.
///
/// Angles are evenly spaced over `[0, pi)`; detector bins are centred on the
/// rotation axis and spaced `bin_spacing` pixels apart.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OperatorGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub num_angles: usize,
    pub num_bins: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_bin_spacing"))]
    pub bin_spacing: f64,
}

#[cfg(feature = "serde")]
fn default_bin_spacing() -> f64 {
    1.0
}

impl OperatorGeometry {
    pub fn new(image_height: usize, image_width: usize, num_angles: usize, num_bins: usize) -> Self {
        OperatorGeometry {
            image_height,
            image_width,
            num_angles,
            num_bins,
            bin_spacing: 1.0,
        }
    }

    /// Geometry whose detector covers the image diagonal with unit bins.
    ///
    /// The bin count is the smallest odd integer not below the diagonal, which
    /// gives 183 bins for a 128x128 image.
    pub fn covering(image_height: usize, image_width: usize, num_angles: usize) -> Self {
        let diag = libm::sqrt((image_height * image_height + image_width * image_width) as f64);
        let mut bins = libm::ceil(diag) as usize;
        if bins % 2 == 0 {
            bins += 1;
        }
        Self::new(image_height, image_width, num_angles, bins)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height < 2 || self.image_width < 2 {
            return Err(Error::InvalidGeometry(format!(
                "image must be at least 2x2, got {}x{}",
                self.image_height, self.image_width
            )));
        }
        if self.num_angles == 0 || self.num_bins == 0 {
            return Err(Error::InvalidGeometry(format!(
                "need at least one angle and one bin, got {} angles and {} bins",
                self.num_angles, self.num_bins
            )));
        }
        if !(self.bin_spacing.is_finite() && self.bin_spacing > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "bin spacing must be positive, got {}",
                self.bin_spacing
            )));
        }
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.num_angles)
            .map(|i| PI * i as f64 / self.num_angles as f64)
            .collect()
    }

    /// Signed offset of the centre of detector bin `bin` from the rotation axis.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.bin_spacing
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.num_angles, self.num_bins)
    }
}

/// Exact intersection lengths of the line `{p : p . (cos t, sin t) = offset}`
/// with the pixels of an `height x width` image of unit pixels centred at the
/// origin, as `(pixel index, length)` pairs.
///
/// Row 0 is the top of the image. An axis-parallel ray lying exactly on a
/// pixel edge splits its length equally between the pixels on both sides.
pub fn trace_ray(height: usize, width: usize, angle: f64, offset: f64) -> Vec<(usize, f64)> {
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let (px, py) = (offset * cos, offset * sin);
    let (dx, dy) = (-sin, cos);
    let half_w = width as f64 / 2.0;
    let half_h = height as f64 / 2.0;

    let on_edge = |p: f64, d: f64, half: f64| {
        libm::fabs(d) < AXIS_EPS && libm::fabs(p + half - libm::round(p + half)) < EDGE_EPS
    };
    if on_edge(px, dx, half_w) || on_edge(py, dy, half_h) {
        let mut out = trace_ray(height, width, angle, offset + 2.0 * EDGE_EPS);
        for (_, len) in out.iter_mut() {
            *len *= 0.5;
        }
        for (idx, len) in trace_ray(height, width, angle, offset - 2.0 * EDGE_EPS) {
            out.push((idx, 0.5 * len));
        }
        out.sort_by_key(|&(idx, _)| idx);
        out.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        return out;
    }

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p, d, half) in [(px, dx, half_w), (py, dy, half_h)] {
        if libm::fabs(d) < AXIS_EPS {
            if p < -half || p >= half {
                return Vec::new();
            }
        } else {
            let a = (-half - p) / d;
            let b = (half - p) / d;
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi - t_lo <= SEGMENT_EPS {
        return Vec::new();
    }

    let mut ts = vec![t_lo, t_hi];
    for (p, d, half, n) in [(px, dx, half_w, width), (py, dy, half_h, height)] {
        if libm::fabs(d) < AXIS_EPS {
            continue;
        }
        for k in 1..n {
            let t = (-half + k as f64 - p) / d;
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.total_cmp(b));

    let mut out: Vec<(usize, f64)> = Vec::new();
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= SEGMENT_EPS {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let mx = px + tm * dx + half_w;
        let my = py + tm * dy + half_h;
        let col = libm::floor(mx) as isize;
        let row_from_bottom = libm::floor(my) as isize;
        if col < 0 || col >= width as isize || row_from_bottom < 0 || row_from_bottom >= height as isize {
            continue;
        }
        let row = height - 1 - row_from_bottom as usize;
        let idx = row * width + col as usize;
        match out.last_mut() {
            Some((last, l)) if *last == idx => *l += len,
            _ => out.push((idx, len)),
        }
    }
    out
}

/// Parallel-beam Radon transform with exact pixel-intersection weights.
///
/// The system matrix is assembled once in compressed-row form; the adjoint is
/// its exact transpose. Both directions carry the same global scale, chosen
/// so the operator norm is one.
#[derive(Debug, Clone)]
pub struct RadonTransform {
    geometry: OperatorGeometry,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f64>,
    scale: f64,
}

impl RadonTransform {
    /// Builds and normalizes the operator.
    pub fn new(geometry: OperatorGeometry) -> Result<Self> {
        let mut op = Self::unnormalized(geometry)?;
        let norm = estimate_norm(&op, NORMALIZATION_ITERATIONS);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "operator has degenerate norm {norm}; no ray intersects the image"
            )));
        }
        op.scale = 1.0 / norm;
        Ok(op)
    }

    /// Line-integral operator with unit scale.
    pub fn unnormalized(geometry: OperatorGeometry) -> Result<Self> {
        geometry.validate()?;
        let (h, w) = geometry.image_shape();
        let mut row_ptr = Vec::with_capacity(geometry.num_angles * geometry.num_bins + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for angle in geometry.angles() {
            for bin in 0..geometry.num_bins {
                for (idx, len) in trace_ray(h, w, angle, geometry.bin_offset(bin)) {
                    col_idx.push(idx as u32);
                    weights.push(len);
                }
                row_ptr.push(col_idx.len());
            }
        }
        Ok(RadonTransform {
            geometry,
            row_ptr,
            col_idx,
            weights,
            scale: 1.0,
        })
    }

    pub fn geometry(&self) -> &OperatorGeometry {
        &self.geometry
    }

    pub fn normalization_scale(&self) -> f64 {
        self.scale
    }

    /// Returns a copy with a different global scale.
    pub fn with_scale(&self, scale: f64) -> Self {
        RadonTransform {
            scale,
            ..self.clone()
        }
    }

    /// Number of stored nonzero weights.
    pub fn nnz(&self) -> usize {
        self.weights.len()
    }
}

impl LinearOperator for RadonTransform {
    fn domain_shape(&self) -> (usize, usize) {
        self.geometry.image_shape()
    }

    fn range_shape(&self) -> (usize, usize) {
        self.geometry.sinogram_shape()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[row]..self.row_ptr[row + 1];
            let acc: f64 = self.col_idx[span.clone()]
                .iter()
                .zip(&self.weights[span])
                .map(|(&c, &w)| w * x[c as usize])
                .sum();
            *o = self.scale * acc;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (row, &yv) in y.iter().enumerate() {
            if yv == 0.0 {
                continue;
            }
            let v = self.scale * yv;
            let span = self.row_ptr[row]..self.row_ptr[row + 1];
            for (&c, &w) in self.col_idx[span.clone()].iter().zip(&self.weights[span]) {
                out[c as usize] += w * v;
            }
        }
    }
}

/// Dense matrix operator, row-major `rows x cols`, acting on grids of the
/// given shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    domain: (usize, usize),
    range: (usize, usize),
    matrix: Vec<f64>,
}

impl DenseOperator {
    pub fn new(domain: (usize, usize), range: (usize, usize), matrix: Vec<f64>) -> Result<Self> {
        let n = domain.0 * domain.1;
        let m = range.0 * range.1;
        if matrix.len() != n * m {
            return Err(crate::error::shape_err(n * m, matrix.len()));
        }
        Ok(DenseOperator { domain, range, matrix })
    }

    /// Assembles the matrix of any operator column by column.
    pub fn assemble(op: &dyn LinearOperator) -> Self {
        let domain = op.domain_shape();
        let range = op.range_shape();
        let n = domain.0 * domain.1;
        let m = range.0 * range.1;
        let mut matrix = vec![0.0; n * m];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            e[j] = 1.0;
            op.apply_into(&e, &mut col);
            e[j] = 0.0;
            for i in 0..m {
                matrix[i * n + j] = col[i];
            }
        }
        DenseOperator { domain, range, matrix }
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.domain.0 * self.domain.1 + col]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn domain_shape(&self) -> (usize, usize) {
        self.domain
    }

    fn range_shape(&self) -> (usize, usize) {
        self.range
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.matrix[i * n..(i + 1) * n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.fill(0.0);
        for (i, &yv) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.matrix[i * n..(i + 1) * n]) {
                *o += a * yv;
            }
        }
    }
}

/// Power-iteration estimate of the largest singular value.
///
/// Starts from the normalized all-ones image, so the result is deterministic.
/// The returned sequence `||A v_k||` is non-decreasing in `iterations`.
pub fn estimate_norm(op: &dyn LinearOperator, iterations: usize) -> f64 {
    let (h, w) = op.domain_shape();
    let (r, c) = op.range_shape();
    let n = h * w;
    let mut v = vec![1.0 / libm::sqrt(n as f64); n];
    let mut av = vec![0.0; r * c];
    for _ in 0..iterations.max(1) {
        op.apply_into(&v, &mut av);
        op.adjoint_into(&av, &mut v);
        let norm = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|a| *a /= norm);
    }
    op.apply_into(&v, &mut av);
    libm::sqrt(av.iter().map(|a| a * a).sum::<f64>())
}

/// Builds the normalized Radon operator for a geometry.
pub fn make_radon(geometry: OperatorGeometry) -> Result<RadonTransform> {
    RadonTransform::new(geometry)
}

/// `A x` with shape checking.
pub fn apply(op: &dyn LinearOperator, x: &Image) -> Result<Sinogram> {
    op.apply(x)
}

/// `A* y` with shape checking.
pub fn adjoint(op: &dyn LinearOperator, y: &Sinogram) -> Result<Image> {
    op.adjoint(y)
}
