//! Typed keys, records, and the sorted-run wire format.
//!
//! Run file records are length-prefixed: `u32` record length, `u32` batch
//! index, `u16` key field count, per-field type tag + payload, then the
//! opaque value payload. All integers are little-endian. Cell files (reduce
//! output and cached views) drop the batch index but share the field codec.

use std::cmp::Ordering;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// One typed dimension value. Dates are carried as `yyyymmdd` integers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DimValue {
    Int(i64),
    Str(String),
}

impl DimValue {
    pub fn render(&self) -> String {
        match self {
            DimValue::Int(v) => v.to_string(),
            DimValue::Str(s) => s.clone(),
        }
    }
}

/// A 64-bit numeric that stays integer-exact when it can.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Num::Int(v) => v as f64,
            Num::Float(v) => v,
        }
    }

    /// Addition that keeps integers exact and falls back to float on
    /// overflow or mixed operands.
    pub fn add(self, other: Num) -> Num {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => match a.checked_add(b) {
                Some(s) => Num::Int(s),
                None => Num::Float(a as f64 + b as f64),
            },
            (a, b) => Num::Float(a.as_f64() + b.as_f64()),
        }
    }

    /// Total order: integer pairs compare exactly, anything else via the
    /// IEEE total order on f64.
    pub fn total_cmp(&self, other: &Num) -> Ordering {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => a.cmp(b),
            (a, b) => a.as_f64().total_cmp(&b.as_f64()),
        }
    }

    /// Numeric equality across representations (`Int(4)` equals `Float(4.0)`).
    pub fn eq_exact(&self, other: &Num) -> bool {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => a == b,
            (a, b) => a.as_f64() == b.as_f64(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            Num::Int(v) => v.to_string(),
            Num::Float(v) => format!("{v}"),
        }
    }

    pub fn parse(text: &str) -> Result<Num> {
        if let Ok(i) = text.parse::<i64>() {
            return Ok(Num::Int(i));
        }
        match text.parse::<f64>() {
            Ok(f) if f.is_finite() => Ok(Num::Float(f)),
            _ => Err(Error::Internal(format!("unparsable numeric {text:?}"))),
        }
    }
}

/// A composite key: the record's values on the batch's sort dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key(pub Vec<DimValue>);

impl Key {
    pub fn prefix(&self, len: usize) -> &[DimValue] {
        &self.0[..len]
    }

    pub fn render_tsv(&self) -> String {
        self.0.iter().map(|v| v.render()).collect::<Vec<_>>().join("\t")
    }
}

/// One intermediate record flowing from map to reduce.
#[derive(Debug, Clone)]
pub struct Record {
    pub key: Key,
    /// Index of the batch this record belongs to; the reserved grand-total
    /// unit uses the index one past the last planned batch.
    pub batch: u32,
    /// Opaque value payload owned by the job logic.
    pub value: Vec<u8>,
}

impl Record {
    /// Rough in-memory footprint, used for spill accounting.
    pub fn approx_size(&self) -> usize {
        let key_bytes: usize = self
            .key
            .0
            .iter()
            .map(|v| match v {
                DimValue::Int(_) => 16,
                DimValue::Str(s) => 32 + s.len(),
            })
            .sum();
        48 + key_bytes + self.value.len()
    }
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in data {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Order-preserving byte encoding of a key prefix, fed to the partition
/// hash. Integers are sign-flipped big-endian; strings are 0x00-terminated
/// with embedded zero bytes escaped.
pub fn encode_ordered(values: &[DimValue]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 9);
    for value in values {
        match value {
            DimValue::Int(v) => {
                out.push(0);
                out.extend_from_slice(&((*v as u64) ^ (1 << 63)).to_be_bytes());
            }
            DimValue::Str(s) => {
                out.push(1);
                for &b in s.as_bytes() {
                    if b == 0 {
                        out.extend_from_slice(&[0x00, 0x01]);
                    } else {
                        out.push(b);
                    }
                }
                out.extend_from_slice(&[0x00, 0x00]);
            }
        }
    }
    out
}

fn write_key(buf: &mut Vec<u8>, key: &Key) {
    buf.extend_from_slice(&(key.0.len() as u16).to_le_bytes());
    for field in &key.0 {
        match field {
            DimValue::Int(v) => {
                buf.push(0);
                buf.extend_from_slice(&v.to_le_bytes());
            }
            DimValue::Str(s) => {
                buf.push(1);
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
        }
    }
}

fn read_exact_n(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_key(buf: &[u8], pos: &mut usize) -> Result<Key> {
    let bad = || Error::Internal("truncated key in record".into());
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = buf.get(*pos..*pos + n).ok_or_else(bad)?;
        *pos += n;
        Ok(slice)
    };
    let count = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap());
    let mut fields = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = take(pos, 1)?[0];
        match tag {
            0 => {
                let v = i64::from_le_bytes(take(pos, 8)?.try_into().unwrap());
                fields.push(DimValue::Int(v));
            }
            1 => {
                let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
                let bytes = take(pos, len)?;
                let s = std::str::from_utf8(bytes)
                    .map_err(|_| Error::Internal("non-utf8 key field".into()))?;
                fields.push(DimValue::Str(s.to_string()));
            }
            t => return Err(Error::Internal(format!("unknown key field tag {t}"))),
        }
    }
    Ok(Key(fields))
}

/// Appends one run record (`batch` + key + value) to `w`.
pub fn write_run_record(w: &mut impl Write, rec: &Record) -> io::Result<usize> {
    let mut body = Vec::with_capacity(rec.approx_size());
    body.extend_from_slice(&rec.batch.to_le_bytes());
    write_key(&mut body, &rec.key);
    body.extend_from_slice(&rec.value);
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&body)?;
    Ok(4 + body.len())
}

/// Reads the next run record, or `None` at clean end-of-stream.
pub fn read_run_record(r: &mut impl Read) -> Result<Option<Record>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::Internal(format!("run read failed: {e}"))),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let body =
        read_exact_n(r, len).map_err(|e| Error::Internal(format!("run read failed: {e}")))?;
    let mut pos = 0usize;
    let batch = u32::from_le_bytes(
        body.get(..4).ok_or_else(|| Error::Internal("short record".into()))?.try_into().unwrap(),
    );
    pos += 4;
    let key = read_key(&body, &mut pos)?;
    let value = body[pos..].to_vec();
    Ok(Some(Record { key, batch, value }))
}

/// One reduce-output or cached-view cell: a key plus an opaque value payload.
#[derive(Debug, Clone)]
pub struct Cell {
    pub key: Key,
    pub value: Vec<u8>,
}

pub fn write_cell(w: &mut impl Write, cell: &Cell) -> io::Result<usize> {
    let mut body = Vec::with_capacity(32 + cell.value.len());
    write_key(&mut body, &cell.key);
    body.extend_from_slice(&cell.value);
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&body)?;
    Ok(4 + body.len())
}

pub fn read_cell(r: &mut impl Read) -> Result<Option<Cell>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::Internal(format!("cell read failed: {e}"))),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let body =
        read_exact_n(r, len).map_err(|e| Error::Internal(format!("cell read failed: {e}")))?;
    let mut pos = 0usize;
    let key = read_key(&body, &mut pos)?;
    let value = body[pos..].to_vec();
    Ok(Some(Cell { key, value }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_order_is_componentwise() {
        let a = Key(vec![DimValue::Int(1), DimValue::Str("b".into())]);
        let b = Key(vec![DimValue::Int(1), DimValue::Str("c".into())]);
        let c = Key(vec![DimValue::Int(2), DimValue::Str("a".into())]);
        assert!(a < b);
        assert!(b < c);
        // integers compare numerically, not as text
        let nine = Key(vec![DimValue::Int(9)]);
        let ten = Key(vec![DimValue::Int(10)]);
        assert!(nine < ten);
    }

    #[test]
    fn run_record_roundtrip() {
        let rec = Record {
            key: Key(vec![DimValue::Str("a1".into()), DimValue::Int(-7)]),
            batch: 3,
            value: vec![1, 2, 3, 4, 5],
        };
        let mut buf = Vec::new();
        write_run_record(&mut buf, &rec).unwrap();
        write_run_record(&mut buf, &rec).unwrap();
        let mut cursor = io::Cursor::new(buf);
        for _ in 0..2 {
            let got = read_run_record(&mut cursor).unwrap().unwrap();
            assert_eq!(got.key, rec.key);
            assert_eq!(got.batch, 3);
            assert_eq!(got.value, rec.value);
        }
        assert!(read_run_record(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn cell_roundtrip() {
        let cell = Cell { key: Key(vec![DimValue::Int(42)]), value: vec![9, 9] };
        let mut buf = Vec::new();
        write_cell(&mut buf, &cell).unwrap();
        let mut cursor = io::Cursor::new(buf);
        let got = read_cell(&mut cursor).unwrap().unwrap();
        assert_eq!(got.key, cell.key);
        assert_eq!(got.value, cell.value);
    }

    #[test]
    fn fnv_is_fixed() {
        // FNV-1a 64 published test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn ordered_encoding_preserves_order() {
        let pairs = [
            (DimValue::Int(-5), DimValue::Int(3)),
            (DimValue::Int(3), DimValue::Int(40)),
            (DimValue::Str("a".into()), DimValue::Str("ab".into())),
            (DimValue::Str("a\u{0}b".into()), DimValue::Str("ab".into())),
        ];
        for (lo, hi) in pairs {
            let lo_bytes = encode_ordered(std::slice::from_ref(&lo));
            let hi_bytes = encode_ordered(std::slice::from_ref(&hi));
            assert!(lo_bytes < hi_bytes, "{lo:?} !< {hi:?}");
        }
    }

    #[test]
    fn num_arithmetic() {
        assert_eq!(Num::Int(2).add(Num::Int(3)), Num::Int(5));
        assert!(matches!(Num::Int(i64::MAX).add(Num::Int(1)), Num::Float(_)));
        assert_eq!(Num::Int(2).add(Num::Float(0.5)), Num::Float(2.5));
        assert!(Num::Int(4).eq_exact(&Num::Float(4.0)));
        assert_eq!(Num::parse("17").unwrap(), Num::Int(17));
        assert_eq!(Num::parse("4.5").unwrap(), Num::Float(4.5));
        assert!(Num::parse("nan").is_err());
        assert_eq!(Num::Float(4.5).render(), "4.5");
    }
}
