use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::layers::Module;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"JPCK";
const VERSION: u32 = 1;

/// Serializes named tensors as little-endian f32 records.
pub fn write_checkpoint(w: &mut impl Write, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every record, in file order.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing JPCK magic".into()));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while !cur.is_empty() {
        let len = read_u32(&mut cur)? as usize;
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut cur)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(&mut cur).map(|v| v as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        cur.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Copies records into `module` by `prefix.name`, keeping each destination
/// tensor's gradient flag. Every parameter must be present with its shape.
pub fn load_module(module: &mut impl Module, prefix: &str, records: &HashMap<String, Tensor>) -> Result<()> {
    for (name, dst) in module.named_params_mut() {
        let key = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
        let src = records
            .get(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks '{key}'")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "'{key}' has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        let fresh = Tensor::new(src.shape(), src.to_vec())?;
        *dst = if dst.requires_grad() { fresh.requires_grad_() } else { fresh };
    }
    Ok(())
}

/// Prefixes every parameter name of `module`.
pub fn prefixed(module: &impl Module, prefix: &str) -> Vec<(String, Tensor)> {
    module
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
