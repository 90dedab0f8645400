//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UNFW" | version: u32 | entries: u64
//! per entry: name_len: u32 | name (UTF-8) | rank: u32 | dims: u64 × rank | f64 × prod(dims)
//! ```
//!
//! Flow checkpoints hold the flow parameters under their own names; net
//! checkpoints prefix them with `fold{k}.` and add the rank-0 scalars
//! `fold{k}.mu` and `fold{k}.rho`. Both carry an `input_shape` entry.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use flowprox_core::diff::Parameters;
use flowprox_core::flow::FlowModel;
use flowprox_core::numerics::{Prng, Tensor};
use flowprox_core::train::{build_unrolled, TrainConfig};
use flowprox_core::unfold::UnrolledNet;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"UNFW";
pub const VERSION: u32 = 1;
pub const SHAPE_ENTRY: &str = "input_shape";

const MAX_NAME_LEN: usize = 1 << 16;
const MAX_RANK: usize = 8;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| "file too short for a checkpoint header".to_string())?;
    if magic != MAGIC {
        return Err(format!("not a checkpoint (magic {magic:?}, expected \"UNFW\")"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version} (this build reads {VERSION})"));
    }
    let count = c.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        if len > MAX_NAME_LEN {
            return Err(format!("entry name length {len} is implausible"));
        }
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| "entry name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > MAX_RANK {
            return Err(format!("entry `{name}` has rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(c.u64()?).map_err(|_| format!("entry `{name}` is too large"))?;
            numel = numel
                .checked_mul(d)
                .filter(|n| n.saturating_mul(8) <= c.remaining())
                .ok_or_else(|| format!("entry `{name}` claims more data than the file holds"))?;
            shape.push(d);
        }
        let data = c
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
        entries.push((name, tensor));
    }
    if c.remaining() != 0 {
        return Err(format!("{} trailing bytes after the last entry", c.remaining()));
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| CliError::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|msg| CliError::format(path, msg))
}

fn shape_entry(shape: [usize; 3]) -> (String, Tensor) {
    let dims = shape.iter().map(|&d| d as f64).collect();
    (SHAPE_ENTRY.to_string(), Tensor::from_vec(&[3], dims).unwrap())
}

fn parameter_entries<P: Parameters + ?Sized>(p: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit(&mut |name, v, _| out.push((name.to_string(), v.clone())));
    out
}

pub fn save_flow(path: &Path, flow: &FlowModel) -> Result<()> {
    let mut entries = vec![shape_entry(flow.input_shape())];
    entries.extend(parameter_entries(flow));
    write_entries(path, &entries)
}

pub fn save_net(path: &Path, net: &UnrolledNet) -> Result<()> {
    let mut entries = vec![shape_entry(net.signal_shape())];
    entries.extend(parameter_entries(net));
    write_entries(path, &entries)
}

/// Signal shape recorded in a checkpoint.
pub fn stored_shape(path: &Path) -> Result<[usize; 3]> {
    split_shape(path, read_entries(path)?).map(|(s, _)| s)
}

fn split_shape(path: &Path, entries: Vec<(String, Tensor)>) -> Result<([usize; 3], HashMap<String, Tensor>)> {
    let mut map: HashMap<String, Tensor> = entries.into_iter().collect();
    let shape = map
        .remove(SHAPE_ENTRY)
        .ok_or_else(|| CliError::format(path, "checkpoint has no `input_shape` entry"))?;
    let dims: Vec<usize> = shape.data().iter().map(|&d| d as usize).collect();
    let shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| CliError::format(path, "`input_shape` must hold three dimensions"))?;
    Ok((shape, map))
}

/// Copies every entry of `map` into the matching parameter of `p`; the name
/// sets must agree exactly.
fn assign<P: Parameters + ?Sized>(path: &Path, p: &mut P, mut map: HashMap<String, Tensor>) -> Result<()> {
    let mut problem: Option<String> = None;
    p.visit_mut(&mut |name, value, _| {
        if problem.is_some() {
            return;
        }
        match map.remove(name) {
            Some(t) if t.shape() == value.shape() => *value = t,
            Some(t) => {
                problem = Some(format!(
                    "`{name}` has shape {:?}, the configured architecture expects {:?}",
                    t.shape(),
                    value.shape()
                ))
            }
            None => problem = Some(format!("missing parameter `{name}` for the configured architecture")),
        }
    });
    if problem.is_none() {
        if let Some(extra) = map.keys().min() {
            problem = Some(format!("unexpected entry `{extra}` for the configured architecture"));
        }
    }
    match problem {
        Some(msg) => Err(CliError::format(path, msg)),
        None => Ok(()),
    }
}

/// Loads a pretrained flow with the architecture of `cfg`.
pub fn load_flow(path: &Path, cfg: &TrainConfig) -> Result<FlowModel> {
    let (shape, map) = split_shape(path, read_entries(path)?)?;
    let mut flow = FlowModel::new(cfg.flow, shape, &mut Prng::new(0))?;
    assign(path, &mut flow, map)?;
    flow.mark_initialized();
    Ok(flow)
}

/// Loads an unrolled net with the architecture of `cfg`.
pub fn load_net(path: &Path, cfg: &TrainConfig) -> Result<UnrolledNet> {
    let (shape, map) = split_shape(path, read_entries(path)?)?;
    let mut net = build_unrolled(shape, cfg, None)?;
    assign(path, &mut net, map)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowprox_core::numerics::randn;

    #[test]
    fn encode_decode_is_bitwise() {
        let mut rng = Prng::new(1);
        let entries = vec![
            ("a.weight".to_string(), randn(&[2, 3, 3, 3], 1.0, &mut rng)),
            ("fold0.mu".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
            ("neg".to_string(), Tensor::from_vec(&[2], vec![-0.0, 1e300]).unwrap()),
        ];
        let bytes = encode(&entries);
        assert_eq!(&bytes[..4], b"UNFW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let bytes = encode(&[("w".to_string(), Tensor::zeros(&[4]))]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode(&bad).unwrap_err().contains("version"));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"UN").is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).unwrap_err().contains("trailing"));
    }

    #[test]
    fn absurd_dimensions_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
