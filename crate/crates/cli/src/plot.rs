//! Static figure emission: PNG maps and SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use image::{ImageBuffer, Rgb};
use tomocvae_core::Image;

use crate::gridio;
use crate::manifest::{self, ArtifactHash, Manifest};
use crate::report::{self, SampleArchive};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    MeanMap,
    VarianceMap,
    ErrorMap,
    HpdSlices,
    ToyScatter,
    LossTrace,
}

pub const KINDS: [&str; 6] = ["mean-map", "variance-map", "error-map", "hpd-slices", "toy-scatter", "loss-trace"];

impl FromStr for PlotKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean-map" => PlotKind::MeanMap,
            "variance-map" => PlotKind::VarianceMap,
            "error-map" => PlotKind::ErrorMap,
            "hpd-slices" => PlotKind::HpdSlices,
            "toy-scatter" => PlotKind::ToyScatter,
            "loss-trace" => PlotKind::LossTrace,
            _ => bail!("unknown plot kind `{s}`; expected one of {}", KINDS.join(", ")),
        })
    }
}

impl PlotKind {
    /// File extension of the emitted figure.
    pub fn extension(self) -> &'static str {
        match self {
            PlotKind::MeanMap | PlotKind::VarianceMap | PlotKind::ErrorMap => "png",
            _ => "svg",
        }
    }
}

/// Renders `inputs` as a figure of `kind` at `output`.
pub fn plot(kind: PlotKind, inputs: &[PathBuf], output: &Path) -> Result<()> {
    ensure!(!inputs.is_empty(), "plot needs at least one input");
    for i in inputs {
        ensure!(i.exists(), "missing input: {}", i.display());
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match kind {
        PlotKind::MeanMap => save_png(output, &gray_map(&load_map(&inputs[0], false)?)),
        PlotKind::VarianceMap => save_png(output, &gray_map(&load_map(&inputs[0], true)?)),
        PlotKind::ErrorMap => {
            ensure!(inputs.len() == 2, "error-map takes a reconstruction and a ground truth");
            let rec = load_map(&inputs[0], false)?;
            let truth = gridio::read_grid(&inputs[1])?;
            save_png(output, &signed_map(&error_map(&rec, &truth)?))
        }
        PlotKind::HpdSlices => write_svg(output, &hpd_svg(inputs)?),
        PlotKind::ToyScatter => write_svg(output, &scatter_svg(inputs)?),
        PlotKind::LossTrace => write_svg(output, &loss_svg(inputs)?),
    }
}

/// Writes `<output>.manifest.json` listing the hashes of the inputs and the figure.
pub fn write_manifest(kind: PlotKind, inputs: &[PathBuf], output: &Path) -> Result<PathBuf> {
    let mut m = Manifest::new(&format!("plot {}", KINDS[kind as usize]), None, &[]);
    for p in inputs.iter().filter(|p| p.is_file()).map(PathBuf::as_path).chain([output]) {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        m.artifacts.push(ArtifactHash {
            path: p.to_string_lossy().replace('\\', "/"),
            sha256: manifest::sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let mut name = output.file_name().context("plot output needs a file name")?.to_os_string();
    name.push(".manifest.json");
    let path = output.with_file_name(name);
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Signed error `reconstruction - truth`.
pub fn error_map(rec: &Image, truth: &Image) -> Result<Image> {
    Ok(rec.zip_map(truth, |r, t| r - t)?)
}

/// A grid file, or the mean (variance) of a sample archive directory.
fn load_map(path: &Path, variance: bool) -> Result<Image> {
    if path.is_dir() {
        let a = SampleArchive::read(path)?;
        Ok(if variance { a.variance } else { a.mean })
    } else {
        gridio::read_grid(path)
    }
}

type Rgb8 = ImageBuffer<Rgb<u8>, Vec<u8>>;

fn upscale(img: &Image) -> u32 {
    let side = img.rows().max(img.cols()).max(1);
    (256 / side).max(1) as u32
}

fn render(img: &Image, color: impl Fn(f64) -> [u8; 3]) -> Rgb8 {
    let k = upscale(img);
    let (h, w) = img.shape();
    ImageBuffer::from_fn(w as u32 * k, h as u32 * k, |x, y| {
        Rgb(color(img.get((y / k) as usize, (x / k) as usize)))
    })
}

/// Grayscale from the minimum (black) to the maximum (white); a constant
/// map renders mid-gray.
pub fn gray_map(img: &Image) -> Rgb8 {
    let (lo, hi) = (img.min(), img.max());
    render(img, |v| {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let g = (255.0 * t).round() as u8;
        [g, g, g]
    })
}

/// Blue (negative) through white (zero) to red (positive), symmetric.
pub fn signed_map(img: &Image) -> Rgb8 {
    let m = img.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    render(img, |v| {
        let t = if m > 0.0 { (v / m).clamp(-1.0, 1.0) } else { 0.0 };
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        if t >= 0.0 {
            [255, fade, fade]
        } else {
            [fade, fade, 255]
        }
    })
}

fn save_png(path: &Path, img: &Rgb8) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;

/// Maps data coordinates into one panel.
struct Frame {
    x0: f64,
    y0: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn new(index: usize, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Frame { x0: index as f64 * PANEL_W, y0: 0.0, xr: pad(xr), yr: pad(yr) }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + MARGIN + (x - self.xr.0) / (self.xr.1 - self.xr.0) * (PANEL_W - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + PANEL_H - MARGIN - (y - self.yr.0) / (self.yr.1 - self.yr.0) * (PANEL_H - 1.5 * MARGIN)
    }

    fn axes(&self, out: &mut String, title: &str) {
        let (l, r) = (self.px(self.xr.0), self.px(self.xr.1));
        let (b, t) = (self.py(self.yr.0), self.py(self.yr.1));
        let _ = writeln!(out, r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, r - l, b - t);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
            let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#, self.px(xv), b + 14.0, tick(xv));
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#, l - 4.0, self.py(yv) + 3.0, tick(yv));
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, (l + r) / 2.0, t - 8.0, escape(title));
    }

    fn polyline(&self, out: &mut String, xs: &[f64], ys: &[f64], style: &str) {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", self.px(*x), self.py(*y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, pts.join(" "));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_document(panels: usize, body: &str) -> String {
    let w = PANEL_W * panels.max(1) as f64;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{PANEL_H:.0}\" viewBox=\"0 0 {w:.0} {PANEL_H:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// One panel per band file: shaded credible band, posterior mean, and the
/// ground truth when the file carries it.
pub fn hpd_svg(inputs: &[PathBuf]) -> Result<String> {
    let mut body = String::new();
    for (k, path) in inputs.iter().enumerate() {
        let rows = report::read_band(path)?;
        let xs: Vec<f64> = rows.iter().map(|r| r.column as f64).collect();
        let yr = range(rows.iter().flat_map(|r| [r.lower, r.upper, r.truth.unwrap_or(r.mean)]));
        let f = Frame::new(k, (xs[0], xs[xs.len() - 1]), yr);
        let mut poly: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", f.px(r.column as f64), f.py(r.upper))).collect();
        poly.extend(rows.iter().rev().map(|r| format!("{:.2},{:.2}", f.px(r.column as f64), f.py(r.lower))));
        let _ = writeln!(body, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##, poly.join(" "));
        if rows.iter().all(|r| r.truth.is_some()) {
            let t: Vec<f64> = rows.iter().map(|r| r.truth.expect("checked")).collect();
            f.polyline(&mut body, &xs, &t, r#"stroke="black" stroke-dasharray="4 3""#);
        }
        let m: Vec<f64> = rows.iter().map(|r| r.mean).collect();
        f.polyline(&mut body, &xs, &m, r##"stroke="#08519c" stroke-width="1.5""##);
        f.axes(&mut body, &stem(path));
    }
    Ok(svg_document(inputs.len(), &body))
}

/// Most points drawn per scatter panel; larger sets are thinned evenly.
pub const SCATTER_LIMIT: usize = 5000;

pub fn scatter_svg(inputs: &[PathBuf]) -> Result<String> {
    let sets: Vec<_> = inputs.iter().map(|p| report::read_points(p)).collect::<Result<_>>()?;
    let xr = range(sets.iter().flatten().map(|p| p[0]));
    let yr = range(sets.iter().flatten().map(|p| p[1]));
    let mut body = String::new();
    for (k, (pts, path)) in sets.iter().zip(inputs).enumerate() {
        ensure!(!pts.is_empty(), "{} holds no points", path.display());
        let f = Frame::new(k, xr, yr);
        let step = pts.len().div_ceil(SCATTER_LIMIT);
        for p in pts.iter().step_by(step) {
            let _ = writeln!(body, r##"<circle cx="{:.2}" cy="{:.2}" r="0.8" fill="#08519c" fill-opacity="0.4"/>"##, f.px(p[0]), f.py(p[1]));
        }
        f.axes(&mut body, &stem(path));
    }
    Ok(svg_document(inputs.len(), &body))
}

/// Loss against minibatch, one curve per input, log scale when every
/// loss is positive.
pub fn loss_svg(inputs: &[PathBuf]) -> Result<String> {
    let traces: Vec<Vec<report::LossRow>> = inputs.iter().map(|p| report::read_csv(p)).collect::<Result<_>>()?;
    ensure!(traces.iter().all(|t| !t.is_empty()), "empty loss trace");
    let log = traces.iter().flatten().all(|r| r.loss > 0.0);
    let tf = |v: f64| if log { v.log10() } else { v };
    let xr = range(traces.iter().flatten().map(|r| r.batch as f64));
    let yr = range(traces.iter().flatten().map(|r| tf(r.loss)));
    let f = Frame::new(0, xr, yr);
    let palette = ["#08519c", "#a50f15", "#006d2c", "#54278f", "#7f2704"];
    let mut body = String::new();
    for (k, t) in traces.iter().enumerate() {
        let xs: Vec<f64> = t.iter().map(|r| r.batch as f64).collect();
        let ys: Vec<f64> = t.iter().map(|r| tf(r.loss)).collect();
        f.polyline(&mut body, &xs, &ys, &format!(r#"stroke="{}" stroke-width="1""#, palette[k % palette.len()]));
    }
    let names: Vec<String> = inputs.iter().map(|p| stem(p)).collect();
    let title = if log { format!("log10 loss: {}", names.join(", ")) } else { format!("loss: {}", names.join(", ")) };
    f.axes(&mut body, &title);
    Ok(svg_document(1, &body))
}
