//! Binary container formats.
//!
//! Two little-endian formats, both fully validated on read:
//!
//! * `DMAT` — dense matrix: magic `"DMAT"`, `rows: u32`, `cols: u32`, then
//!   `rows·cols` IEEE-754 `f32` values row-major.
//! * `NLQ1` — quantized matrix: magic `"NLQ1"`, `version: u16 = 1`,
//!   `rows: u32`, `cols: u32`, `q: u16`, `k: u8`, `strategy: u8`
//!   (0 = Opt, 1 = First), `k` β values as `f64`, then per row: `scale: f64`,
//!   the per-block β indices (packed 2 bits each LSB-first when `k ≤ 4`,
//!   otherwise 1 byte each; padded to a byte boundary per row), and one code
//!   byte per coordinate.
//!
//! Reads reject trailing bytes, so `write ∘ read` and `read ∘ write` are
//! exact inverses (`DMAT` values are `f32`, so writing a matrix that holds
//! non-`f32` values rounds once on write).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{QuantizedMatrix, QuantizedVector, QuantizerConfig, Strategy};
use crate::error::{Error, Result};
use crate::lattice::DIM;
use crate::mat::Mat;

pub const DMAT_MAGIC: [u8; 4] = *b"DMAT";
pub const NLQ1_MAGIC: [u8; 4] = *b"NLQ1";
pub const NLQ1_VERSION: u16 = 1;

/// Cap on `rows · cols` accepted from a file header, so corrupt headers fail
/// fast instead of provoking huge allocations.
pub const MAX_ELEMENTS: u64 = 1 << 28;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| format_err(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array::<2, _>(r, what)?))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array::<4, _>(r, what)?))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array::<8, _>(r, what)?))
}

/// Errors unless the reader is exactly at end-of-stream.
fn expect_eof<R: Read>(r: &mut R, format: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    loop {
        match r.read(&mut probe) {
            Ok(0) => return Ok(()),
            Ok(_) => return Err(format_err(format!("trailing bytes after {format} payload"))),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

fn check_dims(rows: u64, cols: u64) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(format_err(format!("empty matrix ({rows}x{cols})")));
    }
    if rows.saturating_mul(cols) > MAX_ELEMENTS {
        return Err(format_err(format!(
            "matrix {rows}x{cols} exceeds the element cap {MAX_ELEMENTS}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// DMAT
// ---------------------------------------------------------------------------

/// Writes `m` as a `DMAT` stream. Values are stored as `f32`; entries that do
/// not fit (overflow to infinity) are rejected.
pub fn write_dmat<W: Write>(m: &Mat, w: &mut W) -> Result<()> {
    check_dims(m.rows() as u64, m.cols() as u64)?;
    w.write_all(&DMAT_MAGIC)?;
    w.write_all(&u32::try_from(m.rows()).map_err(|_| format_err("rows exceed u32"))?.to_le_bytes())?;
    w.write_all(&u32::try_from(m.cols()).map_err(|_| format_err("cols exceed u32"))?.to_le_bytes())?;
    for (i, v) in m.as_slice().iter().enumerate() {
        let x = *v as f32;
        if !x.is_finite() {
            return Err(Error::invalid(format!(
                "entry {v} at flat index {i} is not representable as a finite f32"
            )));
        }
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `DMAT` stream, validating magic, dimensions, finiteness, and that
/// no trailing bytes follow the payload.
pub fn read_dmat<R: Read>(r: &mut R) -> Result<Mat> {
    let magic = read_array::<4, _>(r, "DMAT magic")?;
    if magic != DMAT_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected \"DMAT\"")));
    }
    let rows = read_u32(r, "DMAT rows")? as u64;
    let cols = read_u32(r, "DMAT cols")? as u64;
    check_dims(rows, cols)?;
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let x = f32::from_le_bytes(read_array::<4, _>(r, "DMAT values")?);
        if !x.is_finite() {
            return Err(format_err(format!("non-finite value at flat index {i}")));
        }
        data.push(x as f64);
    }
    expect_eof(r, "DMAT")?;
    Mat::from_vec(rows, cols, data)
}

pub fn write_dmat_path<P: AsRef<Path>>(m: &Mat, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dmat(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dmat_path<P: AsRef<Path>>(path: P) -> Result<Mat> {
    read_dmat(&mut BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// NLQ1
// ---------------------------------------------------------------------------

fn strategy_byte(s: Strategy) -> u8 {
    match s {
        Strategy::Opt => 0,
        Strategy::First => 1,
    }
}

fn strategy_from_byte(b: u8) -> Result<Strategy> {
    match b {
        0 => Ok(Strategy::Opt),
        1 => Ok(Strategy::First),
        other => Err(format_err(format!("unknown strategy byte {other}"))),
    }
}

/// Bytes used per row by the β-index section: 2 bits per block when `k ≤ 4`,
/// else one byte per block.
fn index_bytes_per_row(blocks: usize, k: usize) -> usize {
    if k <= 4 {
        blocks.div_ceil(4)
    } else {
        blocks
    }
}

/// Writes `qm` as an `NLQ1` stream. The container is validated first so that
/// hand-assembled `QuantizedMatrix` values cannot produce an unreadable file.
pub fn write_nlq1<W: Write>(qm: &QuantizedMatrix, w: &mut W) -> Result<()> {
    let cols = qm.cols;
    let cfg = &qm.config;
    check_dims(qm.rows.len() as u64, cols as u64)?;
    if !cols.is_multiple_of(DIM) {
        return Err(Error::shape(format!("cols {cols} not a multiple of {DIM}")));
    }
    let blocks = cols / DIM;
    let (q, k) = (cfg.q(), cfg.k());
    for (i, row) in qm.rows.iter().enumerate() {
        if row.codes.len() != cols || row.beta_idx.len() != blocks {
            return Err(Error::shape(format!(
                "row {i}: {} codes / {} indices, expected {cols} / {blocks}",
                row.codes.len(),
                row.beta_idx.len()
            )));
        }
        if !row.scale.is_finite() || row.scale < 0.0 {
            return Err(Error::invalid(format!("row {i}: bad scale {}", row.scale)));
        }
        if q < 256 && row.codes.iter().any(|&c| u16::from(c) >= q) {
            return Err(Error::invalid(format!("row {i}: code byte ≥ q={q}")));
        }
        if row.beta_idx.iter().any(|&t| usize::from(t) >= k) {
            return Err(Error::invalid(format!("row {i}: β index ≥ k={k}")));
        }
    }

    w.write_all(&NLQ1_MAGIC)?;
    w.write_all(&NLQ1_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(qm.rows.len()).map_err(|_| format_err("rows exceed u32"))?.to_le_bytes())?;
    w.write_all(&u32::try_from(cols).map_err(|_| format_err("cols exceed u32"))?.to_le_bytes())?;
    w.write_all(&q.to_le_bytes())?;
    w.write_all(&[k as u8, strategy_byte(cfg.strategy())])?;
    for b in cfg.betas() {
        w.write_all(&b.to_le_bytes())?;
    }
    let mut packed = vec![0u8; index_bytes_per_row(blocks, k)];
    for row in &qm.rows {
        w.write_all(&row.scale.to_le_bytes())?;
        if k <= 4 {
            packed.fill(0);
            for (j, &t) in row.beta_idx.iter().enumerate() {
                packed[j / 4] |= t << (2 * (j % 4));
            }
            w.write_all(&packed)?;
        } else {
            w.write_all(&row.beta_idx)?;
        }
        w.write_all(&row.codes)?;
    }
    Ok(())
}

/// Reads an `NLQ1` stream, validating every field (magic, version, config
/// legality, index/code ranges, padding bits, and exact stream length).
pub fn read_nlq1<R: Read>(r: &mut R) -> Result<QuantizedMatrix> {
    let magic = read_array::<4, _>(r, "NLQ1 magic")?;
    if magic != NLQ1_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected \"NLQ1\"")));
    }
    let version = read_u16(r, "NLQ1 version")?;
    if version != NLQ1_VERSION {
        return Err(format_err(format!(
            "unsupported version {version}, expected {NLQ1_VERSION}"
        )));
    }
    let rows = read_u32(r, "NLQ1 rows")? as u64;
    let cols = read_u32(r, "NLQ1 cols")? as u64;
    check_dims(rows, cols)?;
    let (rows, cols) = (rows as usize, cols as usize);
    if !cols.is_multiple_of(DIM) {
        return Err(format_err(format!("cols {cols} not a multiple of {DIM}")));
    }
    let blocks = cols / DIM;

    let q = read_u16(r, "NLQ1 q")?;
    let header = read_array::<2, _>(r, "NLQ1 k/strategy")?;
    let k = header[0] as usize;
    let strategy = strategy_from_byte(header[1])?;
    if k == 0 {
        return Err(format_err("k = 0"));
    }
    let mut betas = Vec::with_capacity(k);
    for _ in 0..k {
        betas.push(read_f64(r, "NLQ1 betas")?);
    }
    // Delegates β/q legality (range, order, finiteness) to the config rules.
    let config = QuantizerConfig::new(q, betas, strategy)
        .map_err(|e| format_err(format!("illegal stored config: {e}")))?;

    let idx_bytes = index_bytes_per_row(blocks, k);
    let mut qrows = Vec::with_capacity(rows);
    for i in 0..rows {
        let scale = read_f64(r, "NLQ1 row scale")?;
        if !scale.is_finite() || scale < 0.0 {
            return Err(format_err(format!("row {i}: bad scale {scale}")));
        }
        let mut raw_idx = vec![0u8; idx_bytes];
        r.read_exact(&mut raw_idx)
            .map_err(|e| format_err(format!("truncated β indices in row {i}: {e}")))?;
        let beta_idx: Vec<u8> = if k <= 4 {
            let unpacked: Vec<u8> = (0..blocks)
                .map(|j| (raw_idx[j / 4] >> (2 * (j % 4))) & 0b11)
                .collect();
            // Any bit beyond the last block must be zero, so each row has one
            // canonical byte encoding.
            let mut repacked = vec![0u8; idx_bytes];
            for (j, &t) in unpacked.iter().enumerate() {
                repacked[j / 4] |= t << (2 * (j % 4));
            }
            if repacked != raw_idx {
                return Err(format_err(format!("row {i}: nonzero padding bits")));
            }
            unpacked
        } else {
            raw_idx
        };
        if beta_idx.iter().any(|&t| usize::from(t) >= k) {
            return Err(format_err(format!("row {i}: β index ≥ k={k}")));
        }
        let mut codes = vec![0u8; cols];
        r.read_exact(&mut codes)
            .map_err(|e| format_err(format!("truncated codes in row {i}: {e}")))?;
        if q < 256 && codes.iter().any(|&c| u16::from(c) >= q) {
            return Err(format_err(format!("row {i}: code byte ≥ q={q}")));
        }
        qrows.push(QuantizedVector {
            codes,
            beta_idx,
            scale,
        });
    }
    expect_eof(r, "NLQ1")?;
    Ok(QuantizedMatrix {
        rows: qrows,
        config,
        cols,
    })
}

pub fn write_nlq1_path<P: AsRef<Path>>(qm: &QuantizedMatrix, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_nlq1(qm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_nlq1_path<P: AsRef<Path>>(path: P) -> Result<QuantizedMatrix> {
    read_nlq1(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;
    use crate::sampling;

    fn dmat_bytes(m: &Mat) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dmat(m, &mut buf).unwrap();
        buf
    }

    fn nlq1_bytes(qm: &QuantizedMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_nlq1(qm, &mut buf).unwrap();
        buf
    }

    fn sample_quantized(q: u16, betas: &[f64], rows: usize, cols: usize) -> QuantizedMatrix {
        let cfg = QuantizerConfig::new(q, betas.to_vec(), Strategy::Opt).unwrap();
        let mut m = sampling::gaussian_mat(99, rows, cols);
        if rows > 1 {
            m.row_mut(1).fill(0.0); // exercise the zero-row encoding
        }
        codec::quantize_matrix(&m, &cfg).unwrap()
    }

    #[test]
    fn dmat_round_trips_f32_values() {
        // Quarter-integers are exact in f32, so the round trip is bit-exact.
        let m = Mat::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let back = read_dmat(&mut &dmat_bytes(&m)[..]).unwrap();
        assert_eq!(back.as_slice(), m.as_slice());

        // General f64 values round exactly once, to their f32 neighbours.
        let g = sampling::gaussian_mat(3, 5, 8);
        let back = read_dmat(&mut &dmat_bytes(&g)[..]).unwrap();
        for (x, y) in g.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }

    #[test]
    fn dmat_rejects_malformed_streams() {
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = dmat_bytes(&m);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(read_dmat(&mut &bad_magic[..]).is_err());

        let truncated = &good[..good.len() - 1];
        assert!(read_dmat(&mut &truncated[..]).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        let err = read_dmat(&mut &trailing[..]).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");

        // NaN payload bytes.
        let mut nan = good.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_dmat(&mut &nan[..]).is_err());

        // Oversized header must fail before allocating.
        let mut huge = Vec::new();
        huge.extend_from_slice(&DMAT_MAGIC);
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = read_dmat(&mut &huge[..]).unwrap_err().to_string();
        assert!(err.contains("element cap"), "{err}");

        // Zero-dimension header.
        let mut empty = Vec::new();
        empty.extend_from_slice(&DMAT_MAGIC);
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&4u32.to_le_bytes());
        assert!(read_dmat(&mut &empty[..]).is_err());

        // Non-finite entries are refused at write time.
        let bad = Mat::from_vec(1, 8, vec![1e300, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(write_dmat(&bad, &mut Vec::new()).is_err());
    }

    #[test]
    fn nlq1_round_trip_is_exact_for_packed_indices() {
        // k = 4 exercises the 2-bit packed index path.
        let qm = sample_quantized(14, &[0.25, 0.32, 0.43, 1.04], 6, 48);
        let back = read_nlq1(&mut &nlq1_bytes(&qm)[..]).unwrap();
        assert_eq!(back, qm);
        let d1 = codec::dequantize_matrix(&qm).unwrap();
        let d2 = codec::dequantize_matrix(&back).unwrap();
        assert_eq!(d1.as_slice(), d2.as_slice());
        assert_eq!(back.rows[1].scale, 0.0);
    }

    #[test]
    fn nlq1_round_trip_is_exact_for_byte_indices() {
        // k = 5 forces one index byte per block.
        let qm = sample_quantized(9, &[0.3, 0.4, 0.55, 0.8, 1.6], 4, 40);
        let back = read_nlq1(&mut &nlq1_bytes(&qm)[..]).unwrap();
        assert_eq!(back, qm);
    }

    #[test]
    fn nlq1_rejects_malformed_streams() {
        let qm = sample_quantized(12, &[0.25, 0.5, 0.75, 1.2], 3, 16);
        let good = nlq1_bytes(&qm);
        // Layout: magic 0..4, version 4..6, rows 6..10, cols 10..14,
        // q 14..16, k 16, strategy 17, betas 18..50, then rows.

        type Corruption = (fn(&mut Vec<u8>), &'static str);
        let cases: [Corruption; 8] = [
            (|b| b[0] = b'Q', "magic"),
            (|b| b[4] = 2, "version"),
            (|b| b[17] = 9, "strategy byte"),
            (|b| b[14] = 1, "q below 2"),
            (
                |b| {
                    // Swap β₀ and β₁ so the ladder is not increasing.
                    let b0: [u8; 8] = b[18..26].try_into().unwrap();
                    let b1: [u8; 8] = b[26..34].try_into().unwrap();
                    b[18..26].copy_from_slice(&b1);
                    b[26..34].copy_from_slice(&b0);
                },
                "non-increasing betas",
            ),
            (
                |b| {
                    let n = b.len();
                    b[n - 1] = 255;
                },
                "code byte ≥ q",
            ),
            (|b| b.push(0), "trailing byte"),
            (
                |b| {
                    b.pop();
                },
                "truncation",
            ),
        ];
        for (mutate, what) in cases {
            let mut bad = good.clone();
            mutate(&mut bad);
            assert!(read_nlq1(&mut &bad[..]).is_err(), "accepted bad {what}");
        }
    }

    #[test]
    fn nlq1_rejects_nonzero_padding_and_bad_indices() {
        // 16 cols → 2 blocks → one packed index byte with 4 unused bits.
        let qm = sample_quantized(12, &[0.25, 0.5, 0.75, 1.2], 1, 16);
        let mut bytes = nlq1_bytes(&qm);
        let idx_offset = 50 + 8; // header+betas, then the row scale
        bytes[idx_offset] |= 0b1111_0000;
        let err = read_nlq1(&mut &bytes[..]).unwrap_err().to_string();
        assert!(err.contains("padding"), "{err}");

        // Byte-per-index path with an index ≥ k.
        let qm5 = sample_quantized(9, &[0.3, 0.4, 0.55, 0.8, 1.6], 1, 16);
        let mut bytes = nlq1_bytes(&qm5);
        let idx_offset = 18 + 5 * 8 + 8;
        bytes[idx_offset] = 7;
        let err = read_nlq1(&mut &bytes[..]).unwrap_err().to_string();
        assert!(err.contains("β index"), "{err}");
    }

    #[test]
    fn nlq1_write_refuses_inconsistent_containers() {
        let mut qm = sample_quantized(12, &[0.25, 0.5, 0.75, 1.2], 2, 16);
        qm.rows[0].codes[3] = 200; // ≥ q
        assert!(write_nlq1(&qm, &mut Vec::new()).is_err());

        let mut qm = sample_quantized(12, &[0.25, 0.5, 0.75, 1.2], 2, 16);
        qm.rows[1].scale = f64::NAN;
        assert!(write_nlq1(&qm, &mut Vec::new()).is_err());

        let mut qm = sample_quantized(12, &[0.25, 0.5, 0.75, 1.2], 2, 16);
        qm.rows[0].codes.pop();
        assert!(write_nlq1(&qm, &mut Vec::new()).is_err());
    }

    #[test]
    fn nlq1_path_round_trip() {
        let dir = std::env::temp_dir().join(format!("nlq1_io_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.nlq");
        let qm = sample_quantized(16, &[0.2, 0.35, 0.5, 0.7], 5, 32);
        write_nlq1_path(&qm, &path).unwrap();
        let back = read_nlq1_path(&path).unwrap();
        assert_eq!(back, qm);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
