//! Self-describing container for one compressed image.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TSIC";
pub const VERSION: u8 = 1;
/// Bytes outside the two payloads.
pub const HEADER_BYTES: usize = 4 + 1 + 4 + 4 + 2 + 4 + 4 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    /// Original (unpadded) image size.
    pub height: u32,
    pub width: u32,
    pub model_id: u16,
    pub payload_z: Vec<u8>,
    pub checksum_z: u32,
    pub payload_y: Vec<u8>,
    pub checksum_y: u32,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or(Error::Truncated(self.data.len()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        for (p, c) in [(&self.payload_z, self.checksum_z), (&self.payload_y, self.checksum_y)] {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let height = r.u32()?;
        let width = r.u32()?;
        if height == 0 || width == 0 {
            return Err(Error::Bitstream(format!("empty image {height}x{width}")));
        }
        let model_id = r.u16()?;
        let len_z = r.u32()? as usize;
        let payload_z = r.take(len_z)?.to_vec();
        let checksum_z = r.u32()?;
        let len_y = r.u32()? as usize;
        let payload_y = r.take(len_y)?.to_vec();
        let checksum_y = r.u32()?;
        if r.pos != data.len() {
            return Err(Error::Bitstream(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(Self {
            height,
            width,
            model_id,
            payload_z,
            checksum_z,
            payload_y,
            checksum_y,
        })
    }

    /// Serialized size in bytes.
    pub fn len(&self) -> usize {
        HEADER_BYTES + self.payload_z.len() + self.payload_y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Payload bits per original pixel, container overhead excluded.
    pub fn payload_bpp(&self) -> f64 {
        8.0 * (self.payload_z.len() + self.payload_y.len()) as f64 / (self.height as f64 * self.width as f64)
    }
}
