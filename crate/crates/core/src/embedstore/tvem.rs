//! TVEM container.
//!
//! Layout (little-endian):
//! - bytes 0..4   magic `TVEM`
//! - byte  4      version (1)
//! - byte  5      dtype (1 = f32)
//! - bytes 6..8   reserved, zero
//! - bytes 8..16  rows (u64)
//! - bytes 16..24 dims (u64)
//! - rows * dims f32 values, row-major
//! - 1 trailing byte norm state (0 = raw, 1 = unit)

use std::fs;
use std::path::Path;

use super::{EmbeddingMatrix, NormState};
use crate::error::{Error, Result};

pub const TVEM_MAGIC: [u8; 4] = *b"TVEM";
pub const TVEM_VERSION: u8 = 1;
pub const TVEM_HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 1;

pub(crate) fn encode(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    matrix.check_finite()?;
    let mut buf = Vec::with_capacity(TVEM_HEADER_LEN + matrix.values().len() * 4 + 1);
    buf.extend_from_slice(&TVEM_MAGIC);
    buf.push(TVEM_VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dims() as u64).to_le_bytes());
    for v in matrix.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(matrix.norm_state().code());
    Ok(buf)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || bytes[..4] != TVEM_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < TVEM_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: TVEM_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != TVEM_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dims = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(dims)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Shape(format!("{rows}x{dims} does not fit in memory")))?;
    let body = &bytes[TVEM_HEADER_LEN..];
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(1))
        .ok_or_else(|| Error::Shape(format!("{rows}x{dims} does not fit in memory")))?;
    if body.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::TrailingBytes(body.len() - expected));
    }
    let values = body[..count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let code = body[count * 4];
    let norm_state = NormState::from_code(code)
        .ok_or_else(|| Error::Shape(format!("unknown norm state byte {code}")))?;
    EmbeddingMatrix::new(rows as usize, dims as usize, values, norm_state)
}

/// Writes a matrix to `destination` in TVEM format.
pub fn write_embeddings(matrix: &EmbeddingMatrix, destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    let bytes = encode(matrix)?;
    fs::write(destination, bytes).map_err(|e| Error::io(destination, e))
}

/// Reads and validates a TVEM file.
pub fn read_embeddings(source: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let source = source.as_ref();
    let bytes = fs::read(source).map_err(|e| Error::io(source, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_matrix_layout() {
        let m = EmbeddingMatrix::new(1, 1, vec![0.5], NormState::Raw).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), TVEM_HEADER_LEN + 4 + 1);
        assert_eq!(&bytes[..8], b"TVEM\x01\x01\x00\x00");
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        assert_eq!(bytes[28], 0);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn unit_matrix_round_trip_keeps_norm_state() {
        let m = EmbeddingMatrix::from_rows(
            &[[0.6f32, 0.8, 0.0], [0.0, 0.0, 1.0]],
            NormState::Unit,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tvem");
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.norm_state(), NormState::Unit);
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_foreign_magic() {
        let m = EmbeddingMatrix::new(1, 1, vec![0.5], NormState::Raw).unwrap();
        let mut bytes = encode(&m).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("unrecognized container"), "{err}");
    }

    #[test]
    fn rejects_short_payload() {
        let m = EmbeddingMatrix::new(2, 2, vec![0.5, 1.0, 2.0, 3.0], NormState::Raw).unwrap();
        let bytes = encode(&m).unwrap();
        // drop the last value but keep a norm-state byte
        let mut short = bytes[..bytes.len() - 5].to_vec();
        short.push(0);
        let err = decode(&short).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn rejects_bad_version_and_trailing_bytes() {
        let m = EmbeddingMatrix::new(1, 1, vec![0.5], NormState::Raw).unwrap();
        let mut bytes = encode(&m).unwrap();
        bytes.push(7);
        assert!(matches!(decode(&bytes), Err(Error::TrailingBytes(1))));
        bytes.pop();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn refuses_to_write_non_finite() {
        // bypass the constructor to simulate a corrupted in-memory matrix
        let m = EmbeddingMatrix {
            rows: 1,
            dims: 2,
            values: vec![1.0, f32::INFINITY],
            norm_state: NormState::Raw,
        };
        let err = encode(&m).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at (0, 1)");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            (rows, dims, values) in (1usize..8, 1usize..8).prop_flat_map(|(r, d)| {
                (Just(r), Just(d), prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, r * d))
            })
        ) {
            let m = EmbeddingMatrix::new(rows, dims, values, NormState::Raw).unwrap();
            let back = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(
                back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
