//! Little-endian tensor container.
//!
//! ```text
//! magic    4 bytes  "ALVF"
//! version  u32      currently 1
//! count    u64      number of records
//! record*  name_len u32, name (UTF-8), rank u32, dims u64 * rank, data f64 * prod(dims)
//! ```
//!
//! Values are written with `f64::to_le_bytes`, so a round trip is bit exact
//! (NaN payloads included).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALVF";
pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {} bytes", name.len())))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
