//! Weight checkpoints.
//!
//! Binary layout, little endian, one record per tensor in file order:
//! `u64 name_len, name bytes (UTF-8), u64 rank, u64 dims..., f64 payload...`.
//! A sibling `<file>.json` manifest maps names to shapes for inspection
//! without parsing the binary.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn save(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut manifest: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (name, p) in params {
        f.write_all(&(name.len() as u64).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        let shape = p.shape();
        f.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.to_vec() {
            f.write_all(&v.to_le_bytes())?;
        }
        manifest.insert(name.clone(), shape.to_vec());
    }
    drop(f);
    let mpath = path.with_extension("json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let u64_at = |pos: &mut usize| -> Result<u64> {
        if *pos + 8 > bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        Ok(v)
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let name_len = u64_at(&mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(Error::Format("truncated checkpoint name".into()));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::Format("non-UTF8 tensor name".into()))?
            .to_string();
        pos += name_len;
        let rank = u64_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        if pos + 8 * n > bytes.len() {
            return Err(Error::Format(format!("truncated payload for tensor '{name}'")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing parameter list, matching by name and
/// requiring exact coverage in both directions.
pub fn load_into(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let stored = load(path)?;
    let mut by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = BTreeMap::new();
    for (name, shape, data) in &stored {
        by_name.insert(name.as_str(), (shape, data));
    }
    if stored.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, p) in params {
        let (shape, data) = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
        if p.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "shape mismatch for '{name}': checkpoint {shape:?}, model {:?}",
                p.shape()
            )));
        }
        p.set_data((*data).clone());
    }
    Ok(())
}
