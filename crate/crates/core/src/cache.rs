//! Binary matrix cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ADRET1\n"                 7 bytes
//! rows: u32, cols: u32
//! rows*cols f64, row-major
//! id count: u32
//! per id: byte length u32, UTF-8 bytes
//! ```
//!
//! Several records may be concatenated in one file (see [`read_records`]).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 7] = b"ADRET1\n";

/// Serializes one record.
pub fn write_record<W: Write>(out: &mut W, m: &Matrix, ids: &[String]) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::arg("too many rows for the cache format"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::arg("too many columns for the cache format"))?;
    if !m.all_finite() {
        return Err(Error::Evaluation("refusing to cache a non-finite matrix".into()));
    }
    out.write_all(MAGIC)?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    for v in m.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    let count = u32::try_from(ids.len()).map_err(|_| Error::arg("too many ids for the cache format"))?;
    out.write_all(&count.to_le_bytes())?;
    for id in ids {
        let len = u32::try_from(id.len()).map_err(|_| Error::arg("id too long for the cache format"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
    }
    Ok(())
}

pub fn encode_record(m: &Matrix, ids: &[String]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(19 + m.data().len() * 8);
    write_record(&mut buf, m, ids)?;
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated while reading {what} ({n} bytes needed)"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode_one(cur: &mut Cursor<'_>) -> Result<(Matrix, Vec<String>)> {
    let start = cur.pos;
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(start as u64, "bad magic"));
    }
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(start as u64 + 7, format!("dimensions {rows}x{cols} overflow")))?;
    if len > cur.buf.len() - cur.pos {
        return Err(Error::format(
            cur.pos as u64,
            format!("{rows}x{cols} matrix needs {len} bytes, {} remain", cur.buf.len() - cur.pos),
        ));
    }
    let data_at = cur.pos;
    let data: Vec<f64> = cur
        .take(len, "matrix data")?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let m = Matrix::from_vec(rows, cols, data)
        .map_err(|e| Error::format(data_at as u64, format!("invalid matrix data: {e}")))?;
    let count = cur.u32("id count")? as usize;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = cur.u32("id length")? as usize;
        let at = cur.pos;
        let bytes = cur.take(len, "id bytes")?;
        let s = std::str::from_utf8(bytes).map_err(|_| Error::format(at as u64, "id is not valid UTF-8"))?;
        ids.push(s.to_owned());
    }
    Ok((m, ids))
}

/// Decodes exactly one record; trailing bytes are an error.
pub fn decode_record(buf: &[u8]) -> Result<(Matrix, Vec<String>)> {
    let mut cur = Cursor { buf, pos: 0 };
    let rec = decode_one(&mut cur)?;
    if cur.pos != buf.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after record"));
    }
    Ok(rec)
}

/// Decodes a concatenation of records.
pub fn decode_records(buf: &[u8]) -> Result<Vec<(Matrix, Vec<String>)>> {
    let mut cur = Cursor { buf, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        out.push(decode_one(&mut cur)?);
    }
    Ok(out)
}

pub fn cache_write(path: &Path, m: &Matrix, ids: &[String]) -> Result<()> {
    fs::write(path, encode_record(m, ids)?).map_err(|e| io_err(path, e))
}

pub fn cache_read(path: &Path) -> Result<(Matrix, Vec<String>)> {
    decode_record(&read_all(path)?)
}

pub fn read_records(path: &Path) -> Result<Vec<(Matrix, Vec<String>)>> {
    decode_records(&read_all(path)?)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| io_err(path, e))?;
    Ok(buf)
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id-{i}")).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_normal(10, 8, 1.0, &mut rng);
        let buf = encode_record(&m, &ids(10)).unwrap();
        let (back, back_ids) = decode_record(&buf).unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back_ids, ids(10));
    }

    #[test]
    fn empty_and_single_row() {
        for rows in [0, 1] {
            let m = Matrix::filled(rows, 3, 0.25);
            let (back, back_ids) = decode_record(&encode_record(&m, &ids(rows)).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back_ids.len(), rows);
        }
    }

    #[test]
    fn header_layout() {
        let buf = encode_record(&Matrix::filled(2, 3, 1.0), &["ab".into()]).unwrap();
        assert_eq!(&buf[..7], b"ADRET1\n");
        assert_eq!(&buf[7..11], &2u32.to_le_bytes());
        assert_eq!(&buf[11..15], &3u32.to_le_bytes());
        assert_eq!(&buf[15..23], &1f64.to_le_bytes());
        assert_eq!(buf.len(), 15 + 48 + 4 + 4 + 2);
    }

    #[test]
    fn corrupted_magic() {
        let mut buf = encode_record(&Matrix::filled(1, 1, 1.0), &[]).unwrap();
        buf[2] ^= 0xff;
        assert!(matches!(decode_record(&buf), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let buf = encode_record(&Matrix::filled(2, 2, 1.0), &ids(2)).unwrap();
        let err = decode_record(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset > 40), "{err}");
        let err = decode_record(&buf[..20]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 15, .. }), "{err}");
    }

    #[test]
    fn oversized_dimensions() {
        let mut buf = MAGIC.to_vec();
        buf.extend(u32::MAX.to_le_bytes());
        buf.extend(u32::MAX.to_le_bytes());
        assert!(matches!(decode_record(&buf), Err(Error::Format { .. })));
    }

    #[test]
    fn multiple_records() {
        let a = Matrix::filled(2, 1, 1.0);
        let b = Matrix::filled(1, 3, 2.0);
        let mut buf = encode_record(&a, &["a".into()]).unwrap();
        buf.extend(encode_record(&b, &["b".into()]).unwrap());
        let recs = decode_records(&buf).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].0, b);
        assert!(decode_record(&buf).is_err());
    }
}
