//! Event-file I/O.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TPXE"
//! 4       2     version (u16, currently 1)
//! 6       32    SHA-256 digest of the spectrometer configuration
//! 38      14*n  records {u16 col, u16 row, u64 toa_ps, u16 tot_ns}
//! ```
//!
//! Records must be sorted by `toa_ps`, ties by `(col, row)`. Fixed-width
//! records let the body be parsed in independent chunks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{PixelHit, SpectrometerConfig};

pub const MAGIC: [u8; 4] = *b"TPXE";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 32;
pub const RECORD_LEN: usize = 2 + 2 + 8 + 2;

const CHUNK_RECORDS: usize = 1 << 16;

pub type ConfigDigest = [u8; 32];

/// SHA-256 of the canonical JSON encoding of a spectrometer configuration.
pub fn config_digest(cfg: &SpectrometerConfig) -> ConfigDigest {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFile {
    pub digest: ConfigDigest,
    pub hits: Vec<PixelHit>,
}

impl EventFile {
    pub fn new(digest: ConfigDigest, hits: Vec<PixelHit>) -> Self {
        Self { digest, hits }
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn digest_hex(&self) -> String {
        self.digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serializes to the binary format. Fails if the stream violates an
    /// invariant, so that anything written can be read back.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_stream(&self.hits, HEADER_LEN as u64)?;
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.hits.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for h in &self.hits {
            out.extend_from_slice(&h.col.to_le_bytes());
            out.extend_from_slice(&h.row.to_le_bytes());
            out.extend_from_slice(&h.toa_ps.to_le_bytes());
            out.extend_from_slice(&h.tot_ns.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() < 4 || bytes[..4] != MAGIC {
                return Err(Error::parse(0, "missing or malformed magic bytes"));
            }
            return Err(Error::parse(bytes.len() as u64, "truncated header"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::parse(0, "malformed magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&bytes[6..HEADER_LEN]);

        let body = &bytes[HEADER_LEN..];
        if body.len() % RECORD_LEN != 0 {
            let offset = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
            return Err(Error::parse(offset as u64, "truncated record"));
        }

        let chunks: Vec<Result<Vec<PixelHit>>> = body
            .par_chunks(CHUNK_RECORDS * RECORD_LEN)
            .enumerate()
            .map(|(k, chunk)| {
                let base = (HEADER_LEN + k * CHUNK_RECORDS * RECORD_LEN) as u64;
                let hits: Vec<PixelHit> = chunk.chunks_exact(RECORD_LEN).map(decode_record).collect();
                check_stream(&hits, base)?;
                Ok(hits)
            })
            .collect();

        let mut hits = Vec::with_capacity(body.len() / RECORD_LEN);
        for (k, chunk) in chunks.into_iter().enumerate() {
            let chunk = chunk?;
            if let (Some(last), Some(first)) = (hits.last(), chunk.first()) {
                if sort_prefix(first) < sort_prefix(last) {
                    let offset = HEADER_LEN + k * CHUNK_RECORDS * RECORD_LEN;
                    return Err(Error::parse(offset as u64, "records out of time order"));
                }
            }
            hits.extend(chunk);
        }
        Ok(Self { digest, hits })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        check_stream(&self.hits, 0)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
        for h in &self.hits {
            w.serialize(CsvRecord::from(*h))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV variant (header `col,row,toa_ps,tot_ns`). CSV carries no
    /// configuration digest, so the caller supplies one.
    pub fn read_csv(path: impl AsRef<Path>, digest: ConfigDigest) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let expected = ["col", "row", "toa_ps", "tot_ns"];
        let header = r.headers()?.clone();
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::parse(1, format!("CSV header must be {}", expected.join(","))));
        }
        let mut hits = Vec::new();
        for (n, rec) in r.deserialize::<CsvRecord>().enumerate() {
            let line = n as u64 + 2;
            let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
            let hit = PixelHit::from(rec);
            hit.validate().map_err(|m| Error::parse(line, m))?;
            if let Some(prev) = hits.last() {
                if sort_prefix(&hit) < sort_prefix(prev) {
                    return Err(Error::parse(line, "records out of time order"));
                }
            }
            hits.push(hit);
        }
        Ok(Self { digest, hits })
    }
}

/// Writes a stream through a buffered writer without materializing the
/// whole byte image; used for large simulated runs.
pub fn write_stream<W: Write>(out: W, digest: &ConfigDigest, hits: &[PixelHit]) -> Result<()> {
    let mut w = EventWriter::new(out, digest)?;
    w.push(hits)?;
    w.finish().map(|_| ())
}

/// Incremental binary writer. Records may be pushed in pieces; order is
/// checked across pieces.
pub struct EventWriter<W: Write> {
    out: W,
    last: Option<PixelHit>,
    written: u64,
}

impl<W: Write> EventWriter<W> {
    pub fn new(mut out: W, digest: &ConfigDigest) -> Result<Self> {
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(digest)?;
        Ok(Self { out, last: None, written: 0 })
    }

    pub fn push(&mut self, hits: &[PixelHit]) -> Result<()> {
        let base = HEADER_LEN as u64 + self.written * RECORD_LEN as u64;
        check_stream(hits, base)?;
        if let (Some(prev), Some(first)) = (&self.last, hits.first()) {
            if sort_prefix(first) < sort_prefix(prev) {
                return Err(Error::parse(base, "records out of time order"));
            }
        }
        let mut buf = [0u8; RECORD_LEN];
        for h in hits {
            buf[0..2].copy_from_slice(&h.col.to_le_bytes());
            buf[2..4].copy_from_slice(&h.row.to_le_bytes());
            buf[4..12].copy_from_slice(&h.toa_ps.to_le_bytes());
            buf[12..14].copy_from_slice(&h.tot_ns.to_le_bytes());
            self.out.write_all(&buf)?;
        }
        if let Some(h) = hits.last() {
            self.last = Some(*h);
        }
        self.written += hits.len() as u64;
        Ok(())
    }

    /// Records written so far.
    pub fn len(&self) -> u64 {
        self.written
    }

    pub fn is_empty(&self) -> bool {
        self.written == 0
    }

    /// Flushes and returns the number of records.
    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        Ok(self.written)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRecord {
    col: u16,
    row: u16,
    toa_ps: u64,
    tot_ns: u16,
}

impl From<PixelHit> for CsvRecord {
    fn from(h: PixelHit) -> Self {
        Self {
            col: h.col,
            row: h.row,
            toa_ps: h.toa_ps,
            tot_ns: h.tot_ns,
        }
    }
}

impl From<CsvRecord> for PixelHit {
    fn from(r: CsvRecord) -> Self {
        PixelHit::new(r.col, r.row, r.toa_ps, r.tot_ns)
    }
}

#[inline]
fn decode_record(b: &[u8]) -> PixelHit {
    PixelHit {
        col: u16::from_le_bytes([b[0], b[1]]),
        row: u16::from_le_bytes([b[2], b[3]]),
        toa_ps: u64::from_le_bytes(b[4..12].try_into().unwrap()),
        tot_ns: u16::from_le_bytes([b[12], b[13]]),
    }
}

#[inline]
fn sort_prefix(h: &PixelHit) -> (u64, u16, u16) {
    (h.toa_ps, h.col, h.row)
}

/// Validates records and their order; `base` is the byte offset of `hits[0]`.
fn check_stream(hits: &[PixelHit], base: u64) -> Result<()> {
    let offset = |i: usize| base + (i * RECORD_LEN) as u64;
    for (i, h) in hits.iter().enumerate() {
        h.validate().map_err(|m| Error::parse(offset(i), m))?;
        if i > 0 && sort_prefix(h) < sort_prefix(&hits[i - 1]) {
            return Err(Error::parse(offset(i), "records out of time order"));
        }
    }
    Ok(())
}

/// Sorts hits into stream order.
pub fn sort_hits(hits: &mut [PixelHit]) {
    hits.par_sort_unstable_by_key(PixelHit::sort_key);
}
