//! Binary feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   4  magic "TFAT"
//! 4   2  format version (1)
//! 6   1  dtype code (0 = f32, 1 = f64)
//! 7   1  reserved (0)
//! 8   8  rows (n_frames)
//! 16  8  cols (feat_dim)
//! 24  4  CRC32 of the payload
//! 28  4  reserved (0)
//! 32  .. row-major payload
//! ```
//!
//! Frame features use f32. Checkpoints reuse the same block with f64.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TFAT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: header {stored:#010x}, payload {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid dimensions {rows}x{cols}")]
    Dims { rows: u64, cols: u64 },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, FormatError> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(FormatError::DType(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub dtype: DType,
    pub rows: u64,
    pub cols: u64,
    pub crc: u32,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.rows as usize * self.cols as usize * self.dtype.width()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = self.dtype.code();
        b[8..16].copy_from_slice(&self.rows.to_le_bytes());
        b[16..24].copy_from_slice(&self.cols.to_le_bytes());
        b[24..28].copy_from_slice(&self.crc.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, FormatError> {
        if b.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: b.len(),
            });
        }
        let magic: [u8; 4] = b[0..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let dtype = DType::from_code(b[6])?;
        let rows = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes"));
        let cols = u64::from_le_bytes(b[16..24].try_into().expect("8 bytes"));
        if rows == 0 || cols == 0 {
            return Err(FormatError::Dims { rows, cols });
        }
        let crc = u32::from_le_bytes(b[24..28].try_into().expect("4 bytes"));
        Ok(Header {
            version,
            dtype,
            rows,
            cols,
            crc,
        })
    }
}

/// A dense `rows × cols` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Encodes a matrix block (header + payload).
pub fn encode_matrix(m: &Matrix, dtype: DType) -> Result<Vec<u8>, FormatError> {
    if m.rows == 0 || m.cols == 0 || m.data.len() != m.rows * m.cols {
        return Err(FormatError::Dims {
            rows: m.rows as u64,
            cols: m.cols as u64,
        });
    }
    let mut payload = Vec::with_capacity(m.data.len() * dtype.width());
    for (i, v) in m.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        match dtype {
            DType::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
            DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype,
        rows: m.rows as u64,
        cols: m.cols as u64,
        crc: crc32fast::hash(&payload),
    };
    let mut out = header.to_bytes().to_vec();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one block from the front of `bytes`; returns it with the bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Matrix, Header, usize), FormatError> {
    let header = Header::parse(bytes)?;
    let need = header.payload_len();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    let payload = &payload[..need];
    let computed = crc32fast::hash(payload);
    if computed != header.crc {
        return Err(FormatError::Checksum {
            stored: header.crc,
            computed,
        });
    }
    let data = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let m = Matrix {
        rows: header.rows as usize,
        cols: header.cols as usize,
        data,
    };
    Ok((m, header, HEADER_LEN + need))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary label used by every domain discriminator: source = 1, target = 0.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

/// One video's frame features plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub domain: Domain,
    pub label: Option<usize>,
    /// `[n_frames × feat_dim]`, row-major.
    pub frames: Matrix,
}

impl VideoFeatures {
    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.cols
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.frames.cols;
        &self.frames.data[i * d..(i + 1) * d]
    }
}

/// Writes the frame matrix of `v` as an f32 feature file. Metadata lives in the manifest.
pub fn write_features(v: &VideoFeatures, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_matrix(&v.frames, DType::F32)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a feature file's frame matrix.
pub fn read_matrix(path: &Path) -> Result<(Matrix, Header), FormatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (m, h, _) = decode_matrix(&bytes)?;
    Ok((m, h))
}

/// Reads a feature file. The returned record carries the file stem as id and
/// no label; callers going through a manifest fill those in.
pub fn read_features(path: &Path) -> Result<VideoFeatures, FormatError> {
    let (frames, _) = read_matrix(path)?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(VideoFeatures {
        video_id,
        domain: Domain::Source,
        label: None,
        frames,
    })
}

/// Result of `features inspect`.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub magic: String,
    pub version: u16,
    pub dtype: String,
    pub rows: u64,
    pub cols: u64,
    pub stored_crc: String,
    pub computed_crc: Option<String>,
    pub checksum_ok: bool,
    pub file_len: u64,
}

/// Header fields plus a checksum verdict, tolerant of a bad payload.
pub fn inspect(path: &Path) -> Result<Inspection, FormatError> {
    let bytes = fs::read(path)?;
    let header = Header::parse(&bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let need = header.payload_len();
    let computed = (payload.len() >= need).then(|| crc32fast::hash(&payload[..need]));
    Ok(Inspection {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        version: header.version,
        dtype: format!("{:?}", header.dtype).to_lowercase(),
        rows: header.rows,
        cols: header.cols,
        stored_crc: format!("{:#010x}", header.crc),
        computed_crc: computed.map(|c| format!("{c:#010x}")),
        checksum_ok: computed == Some(header.crc),
        file_len: bytes.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(rows: usize, cols: usize, seed: u32) -> VideoFeatures {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + seed as f64) * 0.37).sin() as f32 as f64)
            .collect();
        VideoFeatures {
            video_id: "v".into(),
            domain: Domain::Source,
            label: Some(0),
            frames: Matrix { rows, cols, data },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (r, c) in [(10, 64), (1, 1)] {
            let v = video(r, c, 7);
            let p = dir.path().join(format!("{r}x{c}.tfat"));
            write_features(&v, &p).unwrap();
            let back = read_features(&p).unwrap();
            assert_eq!(back.frames.rows, r);
            assert_eq!(back.frames.cols, c);
            for (a, b) in back.frames.data.iter().zip(&v.frames.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let v = video(3, 2, 0);
        let bytes = encode_matrix(&v.frames, DType::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 2 * 4);
        assert_eq!(&bytes[0..4], b"TFAT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(
            u32::from_le_bytes(bytes[24..28].try_into().unwrap()),
            crc32fast::hash(&bytes[32..])
        );
        assert_eq!(&bytes[28..32], &[0, 0, 0, 0]);
    }

    #[test]
    fn corruptions_map_to_distinct_errors() {
        let v = video(4, 3, 1);
        let good = encode_matrix(&v.frames, DType::F32).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(FormatError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_matrix(&bad), Err(FormatError::Version(2))));

        let bad = &good[..good.len() - 1];
        assert!(matches!(
            decode_matrix(bad),
            Err(FormatError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad[HEADER_LEN + 5] ^= 0x10;
        assert!(matches!(
            decode_matrix(&bad),
            Err(FormatError::Checksum { .. })
        ));

        let mut bad = good;
        bad[6] = 9;
        assert!(matches!(decode_matrix(&bad), Err(FormatError::DType(9))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut v = video(2, 2, 0);
        v.frames.data[3] = f64::NAN;
        assert!(matches!(
            encode_matrix(&v.frames, DType::F32),
            Err(FormatError::NonFinite(3))
        ));
    }

    #[test]
    fn inspect_reports_checksum_status() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tfat");
        write_features(&video(5, 4, 2), &p).unwrap();
        let ok = inspect(&p).unwrap();
        assert!(ok.checksum_ok);
        assert_eq!((ok.rows, ok.cols), (5, 4));
        let mut bytes = fs::read(&p).unwrap();
        bytes[40] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(!inspect(&p).unwrap().checksum_ok);
    }

    proptest! {
        #[test]
        fn f64_blocks_round_trip(rows in 1usize..6, cols in 1usize..6, vals in proptest::collection::vec(-1e6f64..1e6, 36)) {
            let m = Matrix { rows, cols, data: vals[..rows * cols].to_vec() };
            let bytes = encode_matrix(&m, DType::F64).unwrap();
            let (back, _, used) = decode_matrix(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, m);
        }
    }
}
