//! Checkpoint files, best-k selection, averaging and early stopping.
//!
//! File layout (little-endian): `JAMT`, version `u16 = 1`, tensor count
//! `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! one `u32` per dimension and the `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JAMT";
pub const VERSION: u16 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank of {name} too large")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension of {name} too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format("checkpoint", format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().expect("4 bytes")))
}

fn u16_at(bytes: &mut &[u8], what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(take(bytes, 2, what)?.try_into().expect("2 bytes")))
}

pub fn parse_tensors(mut bytes: &[u8]) -> Result<NamedTensors> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u16_at(b, "version")?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = u32_at(b, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16_at(b, "name length")? as usize;
        let name = std::str::from_utf8(take(b, len, "name")?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = take(b, 1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| u32_at(b, "shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = take(b, 4 * numel, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !b.is_empty() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", b.len())));
    }
    Ok(out)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_tensors(&bytes)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    parse_tensors(&fs::read(path)?)
}

fn compatible(a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("checkpoint", format!("{} vs {} tensors", a.len(), b.len())));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{na} {:?} vs {nb} {:?}", ta.shape(), tb.shape()),
            ));
        }
    }
    Ok(())
}

/// Elementwise mean of shape-compatible snapshots, accumulated in `f64`.
pub fn average_checkpoints(snaps: &[&[(String, Tensor<f32>)]]) -> Result<NamedTensors> {
    let first = *snaps.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    for s in &snaps[1..] {
        compatible(first, s)?;
    }
    let k = snaps.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut acc = vec![0.0f64; t.numel()];
            for s in snaps {
                for (a, &x) in acc.iter_mut().zip(s[i].1.data()) {
                    *a += f64::from(x);
                }
            }
            let data = acc.into_iter().map(|a| (a / k) as f32).collect();
            Ok((name.clone(), Tensor::new(t.shape(), data)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub val_loss: f64,
    pub tensors: NamedTensors,
}

/// Bounded pool of snapshots; when full, the worst (highest validation
/// loss, latest on ties) is evicted.
#[derive(Clone, Debug)]
pub struct CheckpointSet {
    capacity: usize,
    snaps: Vec<Snapshot>,
}

impl CheckpointSet {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("checkpoint capacity must be at least 1".into()));
        }
        Ok(CheckpointSet {
            capacity,
            snaps: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.snaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snaps.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snaps
    }

    pub fn push(&mut self, snap: Snapshot) -> Result<()> {
        if !snap.val_loss.is_finite() {
            return Err(Error::invalid(format!("validation loss {} is not finite", snap.val_loss)));
        }
        if let Some(first) = self.snaps.first() {
            compatible(&first.tensors, &snap.tensors)?;
        }
        self.snaps.push(snap);
        if self.snaps.len() > self.capacity {
            let worst = (0..self.snaps.len())
                .max_by(|&a, &b| rank_key(&self.snaps[a]).partial_cmp(&rank_key(&self.snaps[b])).expect("finite"))
                .expect("nonempty");
            self.snaps.remove(worst);
        }
        Ok(())
    }

    /// The `k` snapshots with the lowest validation loss, ties broken by
    /// earlier step, best first.
    pub fn select_best(&self, k: usize) -> Result<Vec<&Snapshot>> {
        if k == 0 || k > self.snaps.len() {
            return Err(Error::invalid(format!("cannot select {k} of {} snapshots", self.snaps.len())));
        }
        let mut refs: Vec<&Snapshot> = self.snaps.iter().collect();
        refs.sort_by(|a, b| rank_key(a).partial_cmp(&rank_key(b)).expect("finite"));
        refs.truncate(k);
        Ok(refs)
    }

    /// Mean of the best `k` snapshots.
    pub fn average_best(&self, k: usize) -> Result<NamedTensors> {
        let best = self.select_best(k)?;
        let refs: Vec<&[(String, Tensor<f32>)]> = best.iter().map(|s| s.tensors.as_slice()).collect();
        average_checkpoints(&refs)
    }
}

fn rank_key(s: &Snapshot) -> (f64, u64) {
    (s.val_loss, s.step)
}

/// Whether the lowest score in `history` is at least `patience` entries
/// old (lower is better).
pub fn early_stop(history: &[f64], patience: usize) -> Result<bool> {
    if patience == 0 {
        return Err(Error::invalid("patience must be at least 1"));
    }
    if history.is_empty() {
        return Err(Error::invalid("empty validation history"));
    }
    let best = history
        .iter()
        .enumerate()
        .fold(0, |b, (i, &x)| if x < history[b] { i } else { b });
    Ok(history.len() - 1 - best >= patience)
}
