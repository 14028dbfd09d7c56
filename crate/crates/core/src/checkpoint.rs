//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PHCK" | version u32 | round u64 | param_count u64 | crc64 u64
//! entry_count u32
//! entry_count × (name_len u32 | name bytes | rank u32 | rank × dim u64)
//! param_count × f64
//! meta_len u64 | meta bytes
//! ```
//!
//! `param_count` is the total number of values over all entries. The CRC-64
//! (ECMA-182) covers every byte of the file except the CRC field itself.
//! Files are written to a sibling temporary path and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};

pub const MAGIC: &[u8; 4] = b"PHCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub params: ParamVector,
    /// Opaque metadata; callers use JSON.
    pub meta: Vec<u8>,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut body = Vec::with_capacity(ckpt.params.total_len() * 8 + 256);
    body.extend_from_slice(&(ckpt.params.num_entries() as u32).to_le_bytes());
    for (name, t) in ckpt.params.entries() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    body.extend_from_slice(&ckpt.params.to_le_bytes());
    body.extend_from_slice(&(ckpt.meta.len() as u64).to_le_bytes());
    body.extend_from_slice(&ckpt.meta);

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.round.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.total_len() as u64).to_le_bytes());
    let crc = checksum(&out, &body);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn checksum(header: &[u8], body: &[u8]) -> u64 {
    let mut digest = CRC64.digest();
    digest.update(header);
    digest.update(body);
    digest.finalize()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::integrity(self.path, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::integrity(self.path, "length overflow"))
    }
}

/// Decodes a checkpoint; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::integrity(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::integrity(path, format!("unsupported version {version}")));
    }
    let round = r.u64()?;
    let param_count = r.len()?;
    let crc = r.u64()?;
    if checksum(&bytes[..HEADER_LEN - 8], &bytes[HEADER_LEN..]) != crc {
        return Err(Error::integrity(path, "checksum mismatch"));
    }
    let n_entries = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_entries.min(1 << 16));
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::integrity(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let declared: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if declared != param_count {
        return Err(Error::integrity(
            path,
            format!("entry table holds {declared} values, header says {param_count}"),
        ));
    }
    let mut entries = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(data, shape).map_err(|e| Error::integrity(path, e.to_string()))?;
        entries.push((name, t));
    }
    let meta_len = r.len()?;
    let meta = r.take(meta_len)?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::integrity(path, "trailing bytes"));
    }
    let params = ParamVector::new(entries).map_err(|e| Error::integrity(path, e.to_string()))?;
    Ok(Checkpoint { round, params, meta })
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = temp_path(path);
    let bytes = encode(ckpt);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
