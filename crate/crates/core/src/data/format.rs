//! `EARF` dataset files.
//!
//! ```text
//! "EARF" | u32 version | u32 mode | u32 classes | u32 dim | u64 count
//! per record:
//!   u32 T
//!   early:        u32 label
//!   anticipation: u32 observed | u32 future | u32 gap
//!   T*dim f64 frames, row-major
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, FeatureSequence, Labels, Mode};
use crate::binio::{put_f64s, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"EARF";
pub const DATASET_VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} = {v} does not fit in u32")))
}

pub fn write_dataset<W: Write>(w: &mut W, data: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION)?;
    put_u32(w, data.mode.code())?;
    put_u32(w, to_u32(data.classes, "classes")?)?;
    put_u32(w, to_u32(data.dim, "dim")?)?;
    put_u64(w, data.records.len() as u64)?;
    for r in &data.records {
        put_u32(w, to_u32(r.len(), "sequence length")?)?;
        match r.labels() {
            Labels::Early { label } => put_u32(w, to_u32(label, "label")?)?,
            Labels::Anticipation { observed, future, gap } => {
                put_u32(w, to_u32(observed, "label")?)?;
                put_u32(w, to_u32(future, "label")?)?;
                put_u32(w, to_u32(gap, "gap")?)?;
            }
        }
        put_f64s(w, r.frames().data())?;
    }
    Ok(())
}

/// Parses a complete file image. Any defect yields a format error carrying
/// the byte offset where it was detected; nothing partial is returned.
pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad magic {magic:?}, expected \"EARF\"") });
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: at,
            detail: format!("unsupported version {version}, expected {DATASET_VERSION}"),
        });
    }
    let at = r.offset();
    let mode = match r.u32("mode")? {
        0 => Mode::Early,
        1 => Mode::Anticipation,
        m => return Err(Error::Format { offset: at, detail: format!("unknown mode {m}") }),
    };
    let classes = r.u32("classes")? as usize;
    let dim = r.u32("dim")? as usize;
    let count = r.u64("record count")?;
    if dim == 0 {
        return Err(r.error("feature dimension is zero"));
    }

    // Capacity is bounded by what the remaining bytes could possibly hold.
    let mut records = Vec::with_capacity((count as usize).min(bytes.len() / 16));
    for i in 0..count {
        let start = r.offset();
        let t = r.u32("sequence length")? as usize;
        let labels = match mode {
            Mode::Early => Labels::Early { label: r.u32("label")? as usize },
            Mode::Anticipation => Labels::Anticipation {
                observed: r.u32("observed label")? as usize,
                future: r.u32("future label")? as usize,
                gap: r.u32("gap")? as usize,
            },
        };
        let n = t.checked_mul(dim).ok_or_else(|| r.error(format!("record {i}: {t}x{dim} overflows")))?;
        let frames = r.f64s(n, "frame payload")?;
        let seq = Tensor::matrix(t, dim, frames)
            .and_then(|m| FeatureSequence::new(m, labels))
            .map_err(|e| Error::Format { offset: start, detail: format!("record {i}: {e}") })?;
        records.push(seq);
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last record"));
    }
    Dataset::new(mode, classes, dim, records).map_err(|e| Error::Format { offset: 0, detail: e.to_string() })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn encode(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(&mut buf, d).unwrap();
        buf
    }

    #[test]
    fn round_trip_both_modes() {
        for mode in [Mode::Early, Mode::Anticipation] {
            let d = generate(&GeneratorConfig::for_mode(mode), mode, 7, 3).unwrap().train;
            let back = read_dataset(&encode(&d)).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let d = generate(&GeneratorConfig::early(), Mode::Early, 2, 1).unwrap().train;
        let buf = encode(&d);
        for cut in [0, 3, 10, 28, 40, buf.len() - 1] {
            match read_dataset(&buf[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let d = generate(&GeneratorConfig::early(), Mode::Early, 1, 1).unwrap().train;
        let mut buf = encode(&d);
        buf[0] = b'X';
        let msg = read_dataset(&buf).unwrap_err().to_string();
        assert!(msg.contains("\"EARF\""), "{msg}");
    }

    #[test]
    fn bad_version_is_rejected() {
        let d = generate(&GeneratorConfig::early(), Mode::Early, 1, 1).unwrap().train;
        let mut buf = encode(&d);
        buf[4] = 9;
        assert!(matches!(read_dataset(&buf), Err(Error::Format { offset: 4, .. })));
    }
}
