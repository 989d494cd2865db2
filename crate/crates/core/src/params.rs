//! Named parameter collections and their binary snapshot format.
//!
//! A [`ParamSet`] is the unit of federation: an ordered map from stable
//! hierarchical names to tensors, each tagged with whether it belongs to a
//! batch-norm layer. Snapshots round-trip bit-exactly through the `FSSLW1`
//! file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"FSSLW1";

/// One named parameter: its current value plus federation metadata.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// True exactly for BN gamma/beta/running-mean/running-var entries.
    pub is_batchnorm: bool,
    /// False for running statistics, which are updated by forward passes
    /// rather than by gradients.
    pub trainable: bool,
}

/// Ordered, name-addressed parameter collection shared by every client
/// built from the same architecture.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
    /// Hash of the architecture that produced this set; equal hashes imply
    /// equal name sets, shapes, and ordering.
    pub arch_hash: u64,
    /// nₖ attached when a client exports weights for aggregation.
    pub sample_count: u64,
}

/// Running statistics are recognized by name suffix so a snapshot can
/// restore trainability without carrying an extra flag.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ParamSet {
    pub fn new(arch_hash: u64) -> Self {
        ParamSet {
            entries: IndexMap::new(),
            arch_hash,
            sample_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, is_batchnorm: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract("params", format!("duplicate entry {name}")));
        }
        let trainable = !is_running_stat(name);
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                is_batchnorm,
                trainable,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract("params", format!("unknown entry {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract("params", format!("unknown entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), e))
    }

    /// Both running-stat slices of one BN layer, mutable at once.
    pub fn bn_stats_mut(&mut self, prefix: &str) -> Result<(&mut [f64], &mut [f64])> {
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let [mean, var] = self
            .entries
            .get_disjoint_mut([mean_key.as_str(), var_key.as_str()]);
        match (mean, var) {
            (Some(m), Some(v)) => Ok((m.tensor.data_mut(), v.tensor.data_mut())),
            _ => Err(Error::contract(
                "params",
                format!("missing running stats for {prefix}"),
            )),
        }
    }

    /// Error unless `other` has the same architecture hash, names, shapes,
    /// flags, and ordering.
    pub fn compatible(&self, other: &ParamSet) -> Result<()> {
        if self.arch_hash != other.arch_hash {
            return Err(Error::Aggregation(format!(
                "architecture hash mismatch: {:#x} vs {:#x}",
                self.arch_hash, other.arch_hash
            )));
        }
        if self.len() != other.len() {
            return Err(Error::Aggregation(format!(
                "entry count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ea), (nb, eb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Aggregation(format!(
                    "entry order mismatch: {na} vs {nb}"
                )));
            }
            if ea.tensor.shape() != eb.tensor.shape() {
                return Err(Error::Aggregation(format!(
                    "shape mismatch at {na}: {:?} vs {:?}",
                    ea.tensor.shape(),
                    eb.tensor.shape()
                )));
            }
            if ea.is_batchnorm != eb.is_batchnorm {
                return Err(Error::Aggregation(format!("BN flag mismatch at {na}")));
            }
        }
        Ok(())
    }
}

/// Write a `FSSLW1` snapshot. Layout: magic, architecture hash (u64 LE),
/// entry count (u32 LE), then per entry: name length (u32 LE), UTF-8 name,
/// BN flag byte, rank (u32 LE), dims (u32 LE each), values (f64 LE each).
pub fn save_weights(params: &ParamSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&params.arch_hash.to_le_bytes())?;
    w.write_all(&u32::try_from(params.len()).unwrap().to_le_bytes())?;
    for (name, entry) in params.iter() {
        w.write_all(&u32::try_from(name.len()).unwrap().to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(entry.is_batchnorm)])?;
        let shape = entry.tensor.shape();
        w.write_all(&u32::try_from(shape.len()).unwrap().to_le_bytes())?;
        for &d in shape {
            w.write_all(&u32::try_from(d).unwrap().to_le_bytes())?;
        }
        for v in entry.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a `FSSLW1` snapshot written by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<ParamSet> {
    let fmt = |msg: &str| Error::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a weight snapshot"));
    }
    let arch_hash = read_u64(&mut r).map_err(|_| fmt("truncated header"))?;
    let count = read_u32(&mut r).map_err(|_| fmt("truncated header"))? as usize;

    let mut params = ParamSet::new(arch_hash);
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(|_| fmt("truncated entry header"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| fmt("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| fmt("entry name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| fmt("truncated flag"))?;
        let is_batchnorm = match flag[0] {
            0 => false,
            1 => true,
            _ => return Err(fmt("invalid BN flag byte")),
        };
        let rank = read_u32(&mut r).map_err(|_| fmt("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(|_| fmt("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for v in &mut data {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|_| fmt("truncated values"))?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| fmt(&format!("invalid tensor for {name}: {e}")))?;
        params.insert(&name, tensor, is_batchnorm)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(fmt("trailing bytes after last entry"));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
