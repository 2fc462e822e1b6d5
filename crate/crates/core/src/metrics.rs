//! Image quality scores, Gaussian credible bands and comparison tables.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::PosteriorSummary;
use crate::error::{Error, Result};
use crate::grid::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &Image, reference: &Image, data_range: f64) -> Result<()> {
    x.check_shape(reference.shape())?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

/// `10 log10(range^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(x: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let mse = x
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(data_range * data_range / mse))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| kernel[i] * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| kernel[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained `11 x 11` Gaussian
/// windows (sigma 1.5), with `C1 = (0.01 R)^2` and `C2 = (0.03 R)^2`.
pub fn ssim(x: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let kernel = gaussian_window();
    let a = x.as_slice();
    let b = reference.as_slice();
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &kernel);
    let mu_b = filter_valid(b, h, w, &kernel);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &kernel);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &kernel);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &kernel);
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Standard normal quantile `Phi^{-1}(p)` for `p` in `(0, 1)`.
///
/// Rational approximation refined by two Newton steps on `erfc`, accurate
/// to a few ulps over the double range.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability must lie in (0, 1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(libm::sqrt(-2.0 * libm::log(p)))
    } else if p > 1.0 - P_LOW {
        -tail(libm::sqrt(-2.0 * libm::log1p(-p)))
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let sqrt_2pi = libm::sqrt(2.0 * core::f64::consts::PI);
    for _ in 0..2 {
        let cdf = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2);
        let pdf = libm::exp(-0.5 * x * x) / sqrt_2pi;
        if pdf > 0.0 {
            x -= (cdf - p) / pdf;
        }
    }
    Ok(x)
}

/// Which variance a credible band uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum HpdVariant {
    /// The full variance, background `beta` included.
    Full,
    /// `max(variance - beta, 0)`.
    WithoutBackground,
}

impl core::str::FromStr for HpdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HpdVariant::Full),
            "without-background" => Ok(HpdVariant::WithoutBackground),
            other => Err(Error::InvalidArgument(format!("unknown band variant `{other}`"))),
        }
    }
}

/// Pointwise credible band along one image row.
#[derive(Debug, Clone, PartialEq)]
pub struct HpdBand {
    pub row: usize,
    pub level: f64,
    pub variant: HpdVariant,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl HpdBand {
    pub fn widths(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }
}

/// Pixel values of row `row`.
pub fn cross_section(image: &Image, row: usize) -> Result<Vec<f64>> {
    if row >= image.rows() {
        return Err(Error::InvalidArgument(format!(
            "row {row} outside an image with {} rows",
            image.rows()
        )));
    }
    Ok(image.row(row).to_vec())
}

/// Gaussian-marginal band `mean +- Phi^{-1}((1 + level) / 2) sqrt(var)` on
/// row `row` of an explicit mean and variance.
pub fn hpd_band_from(
    mean: &Image,
    variance: &Image,
    beta: f64,
    row: usize,
    level: f64,
    variant: HpdVariant,
) -> Result<HpdBand> {
    variance.check_shape(mean.shape())?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    let z = inverse_normal_cdf(0.5 * (1.0 + level))?;
    let m = cross_section(mean, row)?;
    let v = cross_section(variance, row)?;
    let half: Vec<f64> = v
        .iter()
        .map(|&v| match variant {
            HpdVariant::Full => z * libm::sqrt(v.max(0.0)),
            HpdVariant::WithoutBackground => z * libm::sqrt((v - beta).max(0.0)),
        })
        .collect();
    Ok(HpdBand {
        row,
        level,
        variant,
        lower: m.iter().zip(&half).map(|(m, h)| m - h).collect(),
        upper: m.iter().zip(&half).map(|(m, h)| m + h).collect(),
        mean: m,
    })
}

pub fn hpd_band(summary: &PosteriorSummary, row: usize, level: f64, variant: HpdVariant) -> Result<HpdBand> {
    hpd_band_from(&summary.mean, &summary.variance, summary.beta, row, level, variant)
}

/// Reconstructions by one method at one count level, one per phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSet {
    pub method: String,
    pub count_level: f64,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub phantom: usize,
    pub method: String,
    pub count_level: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitySummary {
    pub method: String,
    pub count_level: f64,
    pub phantoms: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    /// Per (method, count level) means, in order of first appearance.
    pub fn aggregates(&self) -> Vec<QualitySummary> {
        let mut out: Vec<QualitySummary> = Vec::new();
        for r in &self.rows {
            let found = out
                .iter_mut()
                .find(|s| s.method == r.method && s.count_level == r.count_level);
            match found {
                Some(s) => {
                    s.phantoms += 1;
                    s.mean_ssim += r.ssim;
                    s.mean_psnr += r.psnr;
                }
                None => out.push(QualitySummary {
                    method: r.method.clone(),
                    count_level: r.count_level,
                    phantoms: 1,
                    mean_ssim: r.ssim,
                    mean_psnr: r.psnr,
                }),
            }
        }
        for s in &mut out {
            s.mean_ssim /= s.phantoms as f64;
            s.mean_psnr /= s.phantoms as f64;
        }
        out
    }
}

/// Scores every set against the ground-truth phantoms, with the count
/// level as the data range. Each phantom is rescaled so that its maximum
/// equals the set's count level.
pub fn compare_methods(phantoms: &[Image], sets: &[ReconstructionSet]) -> Result<QualityReport> {
    if phantoms.iter().any(|p| !(p.max() > 0.0)) {
        return Err(Error::InvalidArgument("phantoms must have a positive maximum".into()));
    }
    let mut rows = Vec::new();
    for set in sets {
        if set.images.len() != phantoms.len() {
            return Err(Error::InvalidArgument(format!(
                "method `{}` at level {} has {} reconstructions for {} phantoms",
                set.method,
                set.count_level,
                set.images.len(),
                phantoms.len()
            )));
        }
        for (i, (img, phantom)) in set.images.iter().zip(phantoms).enumerate() {
            let truth = &phantom.scaled(set.count_level / phantom.max());
            rows.push(QualityRow {
                phantom: i,
                method: set.method.clone(),
                count_level: set.count_level,
                ssim: ssim(img, truth, set.count_level)?,
                psnr: psnr(img, truth, set.count_level)?,
            });
        }
    }
    Ok(QualityReport { rows })
}
