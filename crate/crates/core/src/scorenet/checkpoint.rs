//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "MSGM1"                      5 bytes
//! d                            u32
//! hidden layer count L         u32
//! widths                       L × u32
//! time-embedding frequencies   u32
//! parameter count P            u64
//! θ                            P × f64
//! CRC-64/XZ of all bytes above u64
//! ```

use crc::{Crc, CRC_64_XZ};

use super::{Architecture, ScoreNet};
use crate::error::{MsgmError, Result};
use crate::sde::SdeSpec;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MSGM1";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn write_checkpoint(net: &ScoreNet) -> Vec<u8> {
    let arch = net.architecture();
    let params = net.params();
    let mut out = Vec::with_capacity(32 + 4 * arch.widths.len() + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(arch.d as u32).to_le_bytes());
    out.extend_from_slice(&(arch.widths.len() as u32).to_le_bytes());
    for &w in &arch.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(arch.embed_freqs as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MsgmError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, verifying magic, CRC and parameter count.
pub fn read_checkpoint(bytes: &[u8], sde: SdeSpec) -> Result<ScoreNet> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(MsgmError::Checkpoint("missing MSGM1 magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err(MsgmError::Checkpoint("CRC mismatch: checkpoint is corrupted".into()));
    }
    let mut r = Reader { buf: body, pos: 5 };
    let d = r.u32()? as usize;
    let layers = r.u32()? as usize;
    if layers > 1024 {
        return Err(MsgmError::Checkpoint(format!("implausible layer count {layers}")));
    }
    let widths = (0..layers)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let embed_freqs = r.u32()? as usize;
    let count = r.u64()? as usize;
    let arch = Architecture::new(d, widths, embed_freqs).map_err(|e| MsgmError::Checkpoint(e.to_string()))?;
    if count != arch.param_count() {
        return Err(MsgmError::Checkpoint(format!(
            "header declares {count} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let raw = r.take(8 * count)?;
    if r.pos != body.len() {
        return Err(MsgmError::Checkpoint("trailing bytes after parameters".into()));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScoreNet::from_params(arch, sde, params)
}
