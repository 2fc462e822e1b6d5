//! Versioned parameter checkpoints.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "TCKP"
//! 4       2      version (u16 LE, currently 1)
//! 6       8      header length in bytes (u64 LE)
//! 14      len    JSON header (`CheckpointHeader`)
//! ...            per entry, in header order: value, first moment,
//!                second moment, each prod(shape) f64 LE
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tomocvae_core::autodiff::{ParamEntry, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"TCKP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryInfo {
    pub name: String,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Which model the parameters belong to, e.g. "cvae".
    pub kind: String,
    /// Model configuration needed to rebuild the networks.
    pub config: serde_json::Value,
    /// Minibatches completed when the checkpoint was written.
    pub batches_done: usize,
    /// ADAM step counter.
    pub step: u64,
    pub entries: Vec<EntryInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub batches_done: usize,
    pub params: ParamSet,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let entries = ck
        .params
        .iter()
        .map(|(name, e)| EntryInfo { name: name.clone(), shape: e.value.shape() })
        .collect();
    let header = CheckpointHeader {
        kind: ck.kind.clone(),
        config: ck.config.clone(),
        batches_done: ck.batches_done,
        step: ck.params.step(),
        entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(14 + json.len() + 24 * ck.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, e) in ck.params.iter() {
        for t in [&e.value, &e.first_moment, &e.second_moment] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    ensure!(bytes.len() >= 14, "truncated checkpoint");
    ensure!(&bytes[..4] == MAGIC, "not a checkpoint file (bad magic)");
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        bail!("checkpoint version {version} is not supported (expected {VERSION})");
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let len = usize::try_from(len).context("checkpoint header length overflows")?;
    let end = 14usize.checked_add(len).filter(|e| *e <= bytes.len()).context("truncated checkpoint header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[14..end]).context("corrupted checkpoint header")?;
    let mut rest = &bytes[end..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let need = n.checked_mul(8).context("checkpoint entry overflows")?;
        ensure!(rest.len() >= need, "truncated checkpoint payload");
        let (head, tail) = rest.split_at(need);
        rest = tail;
        Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let mut params = ParamSet::new();
    for info in &header.entries {
        let n = info.shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).context("entry shape overflows")?;
        let value = Tensor::from_vec(info.shape, take(n)?)?;
        let first_moment = Tensor::from_vec(info.shape, take(n)?)?;
        let second_moment = Tensor::from_vec(info.shape, take(n)?)?;
        ensure!(!params.contains(&info.name), "duplicate checkpoint entry {}", info.name);
        params.insert_entry(info.name.clone(), ParamEntry { value, first_moment, second_moment });
    }
    ensure!(rest.is_empty(), "{} trailing bytes after checkpoint payload", rest.len());
    params.set_step(header.step);
    Ok(Checkpoint { kind: header.kind, config: header.config, batches_done: header.batches_done, params })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, encode(ck)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Loads a checkpoint and checks that it holds a model of `kind`.
pub fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = load(path)?;
    ensure!(ck.kind == kind, "{} holds a {} model, expected {kind}", path.display(), ck.kind);
    Ok(ck)
}
