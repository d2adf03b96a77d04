//! `JDMP` parameter checkpoints.
//!
//! ```text
//! "JDMP" | u32 version
//! per tensor, until end of file:
//!   u32 name length | UTF-8 name | u32 rank | rank × u64 extents | f64 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Model;
use crate::binio::{put_f64s, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JDMP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, VERSION)?;
    for (name, t) in model.named() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &e in t.shape() {
            put_u64(w, e as u64)?;
        }
        put_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic, expected \"JDMP\"".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}, expected {VERSION}") });
    }
    let mut named = Vec::new();
    while !r.is_at_end() {
        let len = r.u32("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.error(format!("tensor {name:?}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| r.error(format!("tensor {name:?}: extents overflow")))?;
        let data = r.f64s(n, "tensor payload")?;
        named.push((name, Tensor::new(&shape, data)?));
    }
    Model::from_named(named).map_err(|e| Error::Format { offset: bytes.len() as u64, detail: e.to_string() })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bitwise() {
        let m = Model::init(ModelConfig { dim: 3, hidden: 5, classes: 4 }, 8).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        assert_eq!(read_checkpoint(&buf).unwrap(), m);
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format { .. })));
        buf[0] = b'Q';
        assert!(read_checkpoint(&buf).unwrap_err().to_string().contains("JDMP"));
    }
}
