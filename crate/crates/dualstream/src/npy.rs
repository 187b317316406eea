//! Minimal NPY v1.0 reader/writer for the flow cache and score dumps.
//!
//! Supports exactly the dtypes the pipeline persists: `|u1` (flow caches),
//! `<f4` (score dumps) and `<i8` (label dumps), C order only. Writes go
//! through a temp file followed by a rename so a crashed writer never leaves
//! a truncated cache entry behind.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt npy file: {0}")]
    Corrupt(String),
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: String, found: String },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Element types the cache layer understands.
pub trait NpyElement: Sized + Copy {
    const DESCR: &'static str;
    fn to_le(&self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    fn size() -> usize {
        std::mem::size_of::<Self>()
    }
}

impl NpyElement for u8 {
    const DESCR: &'static str = "|u1";
    fn to_le(&self, out: &mut Vec<u8>) {
        out.push(*self);
    }
    fn from_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl NpyElement for f32 {
    const DESCR: &'static str = "<f4";
    fn to_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl NpyElement for i64 {
    const DESCR: &'static str = "<i8";
    fn to_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        i64::from_le_bytes(b)
    }
}

fn header_string(descr: &str, shape: &[usize]) -> String {
    let shape_s = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_s}, }}")
}

/// Serializes an array to NPY v1.0 bytes.
pub fn to_bytes<T: NpyElement>(shape: &[usize], data: &[T]) -> Vec<u8> {
    assert_eq!(
        shape.iter().product::<usize>(),
        data.len(),
        "shape/data length disagreement"
    );
    let mut header = header_string(T::DESCR, shape).into_bytes();
    // pad so that the data section starts on a 64-byte boundary
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');

    let mut out = Vec::with_capacity(unpadded + pad + data.len() * T::size());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        v.to_le(&mut out);
    }
    out
}

/// Writes an array atomically (temp file + rename).
pub fn write<T: NpyElement>(path: &Path, shape: &[usize], data: &[T]) -> Result<(), NpyError> {
    let bytes = to_bytes(shape, data);
    let tmp = path.with_extension("npy.tmp");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses NPY bytes, returning (shape, data).
pub fn from_bytes<T: NpyElement>(bytes: &[u8]) -> Result<(Vec<usize>, Vec<T>), NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::Corrupt("bad magic".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(NpyError::Corrupt(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(NpyError::Corrupt("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| NpyError::Corrupt("header not utf-8".into()))?;

    let descr = extract_quoted(header, "descr")
        .ok_or_else(|| NpyError::Corrupt("missing descr".into()))?;
    if descr != T::DESCR {
        return Err(NpyError::DtypeMismatch {
            expected: T::DESCR.into(),
            found: descr,
        });
    }
    if header.contains("'fortran_order': True") {
        return Err(NpyError::Corrupt("fortran order not supported".into()));
    }
    let shape = extract_shape(header)?;

    let count: usize = shape.iter().product();
    let body = &bytes[10 + hlen..];
    if body.len() != count * T::size() {
        return Err(NpyError::Corrupt(format!(
            "payload is {} bytes, shape {:?} needs {}",
            body.len(),
            shape,
            count * T::size()
        )));
    }
    let data = body.chunks_exact(T::size()).map(T::from_le).collect();
    Ok((shape, data))
}

/// Reads an array from disk.
pub fn read<T: NpyElement>(path: &Path) -> Result<(Vec<usize>, Vec<T>), NpyError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let pat = format!("'{key}': '");
    let start = header.find(&pat)? + pat.len();
    let end = header[start..].find('\'')? + start;
    Some(header[start..end].to_string())
}

fn extract_shape(header: &str) -> Result<Vec<usize>, NpyError> {
    let start = header
        .find("'shape': (")
        .ok_or_else(|| NpyError::Corrupt("missing shape".into()))?
        + "'shape': (".len();
    let end = header[start..]
        .find(')')
        .ok_or_else(|| NpyError::Corrupt("unterminated shape".into()))?
        + start;
    header[start..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| NpyError::Corrupt(format!("bad shape entry {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn u8_round_trip() {
        let data: Vec<u8> = (0..=255).collect();
        let bytes = to_bytes(&[16, 16], &data);
        let (shape, back) = from_bytes::<u8>(&bytes).unwrap();
        assert_eq!(shape, vec![16, 16]);
        assert_eq!(back, data);
    }

    #[test]
    fn header_is_aligned() {
        let bytes = to_bytes::<f32>(&[3], &[1.0, 2.0, 3.0]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
    }

    #[test]
    fn dtype_mismatch_detected() {
        let bytes = to_bytes::<u8>(&[2], &[1, 2]);
        let err = from_bytes::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, NpyError::DtypeMismatch { .. }));
    }

    #[test]
    fn truncation_detected() {
        let mut bytes = to_bytes::<f32>(&[4], &[1.0, 2.0, 3.0, 4.0]);
        bytes.truncate(bytes.len() - 3);
        assert!(from_bytes::<f32>(&bytes).is_err());
    }

    #[test]
    fn numpy_can_read_our_header() {
        // spot-check the exact header text numpy emits for the cache shape
        let bytes = to_bytes::<u8>(&[20, 4, 4], &vec![0u8; 320]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.starts_with("{'descr': '|u1', 'fortran_order': False, 'shape': (20, 4, 4), }"));
        assert!(header.ends_with('\n'));
    }

    proptest! {
        #[test]
        fn f32_round_trip(data in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let bytes = to_bytes(&[data.len()], &data);
            let (shape, back) = from_bytes::<f32>(&bytes).unwrap();
            prop_assert_eq!(shape, vec![data.len()]);
            prop_assert_eq!(back, data);
        }
    }
}
