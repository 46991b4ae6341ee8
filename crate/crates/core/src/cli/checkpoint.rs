//! Binary checkpoints of a network's parameters and statistics stores.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "MNCK"
//! version  u32      1
//! count    u32      number of records
//! record   repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 each, rank of them)
//!   data     f64 little-endian, product(dims) values
//! ```
//!
//! Record names are `<layer>.<kind>.<buffer>`, e.g. `0.dense.weight`,
//! `1.norm.gamma`, `1.norm.moving_mean`, `1.norm.frozen_var` and
//! `1.norm.memory.<i>.{mean,var,count}` for the `i`-th memory entry, oldest
//! first. Statistics that do not exist yet are simply absent.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Layer, Network};
use crate::stats::{BatchStats, Moments, MovingStats};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNCK";
pub const VERSION: u32 = 1;

/// Every buffer of `net` as named tensors, in a fixed order.
pub fn network_tensors(net: &mut Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                out.push((format!("{i}.dense.weight"), d.weight.clone()));
                out.push((format!("{i}.dense.bias"), Tensor::vector(d.bias.clone())));
            }
            Layer::Conv(c) => {
                out.push((format!("{i}.conv.weight"), c.weight.clone()));
                out.push((format!("{i}.conv.bias"), Tensor::vector(c.bias.clone())));
            }
            Layer::Norm(n) => {
                let p = format!("{i}.norm");
                out.push((format!("{p}.gamma"), Tensor::vector(n.gamma().to_vec())));
                out.push((format!("{p}.beta"), Tensor::vector(n.beta().to_vec())));
                if let Some(m) = n.moving().filter(|m| m.is_initialized()) {
                    out.push((format!("{p}.moving_mean"), Tensor::vector(m.mean.clone())));
                    out.push((format!("{p}.moving_var"), Tensor::vector(m.var.clone())));
                }
                if let Some(f) = n.frozen() {
                    out.push((format!("{p}.frozen_mean"), Tensor::vector(f.mean.clone())));
                    out.push((format!("{p}.frozen_var"), Tensor::vector(f.var.clone())));
                }
                if let Some(mem) = n.memory() {
                    for (k, e) in mem.entries().enumerate() {
                        out.push((format!("{p}.memory.{k}.mean"), Tensor::vector(e.mean.clone())));
                        out.push((format!("{p}.memory.{k}.var"), Tensor::vector(e.var.clone())));
                        out.push((format!("{p}.memory.{k}.count"), Tensor::scalar(e.count as f64)));
                    }
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
    }
    out
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(field, "checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let count = r.u32("count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", "record name is not UTF-8"))?
            .to_string();
        let rank = r.u32(&format!("{name}.rank"))?;
        let mut dims = Vec::new();
        for _ in 0..rank {
            dims.push(r.u64(&format!("{name}.dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &format!("{name}.data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", "unexpected bytes after the last record"));
    }
    Ok(out)
}

pub fn save(net: &mut Network, path: &Path) -> Result<()> {
    fs::write(path, encode(&network_tensors(net)))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

/// Loads a checkpoint into a network of the same architecture.
pub fn load_into(net: &mut Network, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    restore(net, &decode(&bytes)?)
}

pub fn restore(net: &mut Network, tensors: &[(String, Tensor)]) -> Result<()> {
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let need = |name: &str| find(name).ok_or_else(|| Error::format(name, "missing from checkpoint"));
    let copy = |dst: &mut [f64], name: &str| -> Result<()> {
        let t = need(name)?;
        if t.len() != dst.len() {
            return Err(Error::format(name, format!("{} values, expected {}", t.len(), dst.len())));
        }
        dst.copy_from_slice(t.data());
        Ok(())
    };
    for p in net.params_mut() {
        copy(p.values, &p.name)?;
    }
    let norm_idx: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Norm(_)))
        .map(|(i, _)| i)
        .collect();
    for (i, layer) in norm_idx.into_iter().zip(net.norm_layers_mut()) {
        let p = format!("{i}.norm");
        if let (Some(m), Some(v)) = (find(&format!("{p}.moving_mean")), find(&format!("{p}.moving_var"))) {
            let theta = layer.moving().map_or(0.1, MovingStats::theta);
            layer.set_moving(MovingStats::restore(theta, m.data().to_vec(), v.data().to_vec())?)?;
        }
        if let (Some(m), Some(v)) = (find(&format!("{p}.frozen_mean")), find(&format!("{p}.frozen_var"))) {
            layer.set_frozen(Some(Moments {
                mean: m.data().to_vec(),
                var: v.data().to_vec(),
            }));
        }
        if let Some(mem) = layer.memory_mut() {
            mem.clear();
            for k in 0.. {
                let Some(mean) = find(&format!("{p}.memory.{k}.mean")) else {
                    break;
                };
                let var = need(&format!("{p}.memory.{k}.var"))?;
                let count = need(&format!("{p}.memory.{k}.count"))?.data()[0] as usize;
                mem.push(BatchStats::new(mean.data().to_vec(), var.data().to_vec(), count)?)?;
            }
        }
    }
    Ok(())
}
