//! The `TGRD` grid container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "TGRD"
//! 4       2         version (u16 LE, currently 1)
//! 6       1         dtype (1 = f64 LE)
//! 7       1         ndims (1..=8)
//! 8       8*ndims   dims (u64 LE each, slowest first)
//! ...     8*prod    payload, row-major
//! ```
//!
//! Images are 2-D `[rows, cols]`; sample stacks are 3-D `[count, rows, cols]`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use tomocvae_core::data::{Phantom, Provenance};
use tomocvae_core::Grid;

pub const MAGIC: &[u8; 4] = b"TGRD";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;
const MAX_DIMS: usize = 8;

/// An n-dimensional array of f64 as stored in a grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(array: &Array) -> Result<Vec<u8>> {
    ensure!((1..=MAX_DIMS).contains(&array.dims.len()), "grid needs 1 to {MAX_DIMS} dims");
    let n: usize = array.dims.iter().product();
    ensure!(n == array.data.len(), "dims {:?} do not match {} values", array.dims, array.data.len());
    let mut out = Vec::with_capacity(8 + 8 * array.dims.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(array.dims.len() as u8);
    for d in &array.dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in &array.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    ensure!(bytes.len() >= 8, "truncated grid header");
    ensure!(&bytes[..4] == MAGIC, "not a grid file (bad magic)");
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        bail!("unsupported grid version {version} (expected {VERSION})");
    }
    ensure!(bytes[6] == DTYPE_F64, "unsupported grid dtype {}", bytes[6]);
    let ndims = bytes[7] as usize;
    ensure!((1..=MAX_DIMS).contains(&ndims), "bad grid rank {ndims}");
    let header = 8 + 8 * ndims;
    ensure!(bytes.len() >= header, "truncated grid header");
    let mut dims = Vec::with_capacity(ndims);
    let mut n: usize = 1;
    for k in 0..ndims {
        let raw = u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
        let d = usize::try_from(raw).context("grid dimension overflows")?;
        n = n.checked_mul(d).context("grid size overflows")?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    ensure!(
        Some(payload.len()) == n.checked_mul(8),
        "grid payload has {} bytes, dims {:?} need {}",
        payload.len(),
        dims,
        n.saturating_mul(8)
    );
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Array { dims, data })
}

pub fn write_array(path: &Path, array: &Array) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, encode(array)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_array(path, &Array { dims: vec![grid.rows(), grid.cols()], data: grid.as_slice().to_vec() })
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let a = read_array(path)?;
    ensure!(a.dims.len() == 2, "{} holds a {}-D array, expected 2-D", path.display(), a.dims.len());
    Ok(Grid::from_vec(a.dims[0], a.dims[1], a.data)?)
}

pub fn write_stack(path: &Path, grids: &[Grid]) -> Result<()> {
    let first = grids.first().context("empty image stack")?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        ensure!(g.shape() == (h, w), "stack images differ in shape");
        data.extend_from_slice(g.as_slice());
    }
    write_array(path, &Array { dims: vec![grids.len(), h, w], data })
}

pub fn read_stack(path: &Path) -> Result<Vec<Grid>> {
    let a = read_array(path)?;
    ensure!(a.dims.len() == 3, "{} holds a {}-D array, expected 3-D", path.display(), a.dims.len());
    let (h, w) = (a.dims[1], a.dims[2]);
    if h * w == 0 {
        return Ok(vec![Grid::zeros(h, w); a.dims[0]]);
    }
    a.data.chunks_exact(h * w).map(|c| Ok(Grid::from_vec(h, w, c.to_vec())?)).collect()
}

/// Loads a phantom from a grid file and rescales it so its maximum is `peak`.
pub fn load_phantom_file(path: &Path, peak: f64) -> Result<Phantom> {
    let image = read_grid(path)?;
    Phantom::calibrate(image, peak, Provenance::ExternalFile)
        .with_context(|| format!("calibrating phantom {}", path.display()))
}
