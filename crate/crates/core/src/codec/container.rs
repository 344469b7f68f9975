//! `.magc` file framing.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAGC";
pub const VERSION: u8 = 1;
pub const FLAG_MAP: u8 = 1;
/// Bytes before the first section length.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 1 + 2 + 2 + 2 + 2 + 1 + 1 + 8 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub flags: u8,
    pub width: u32,
    pub height: u32,
    pub latent_c: u8,
    pub latent_h: u16,
    pub latent_w: u16,
    pub n: u16,
    pub m: u16,
    pub k: u8,
    pub lambda_index: u8,
    pub model_hash: u64,
}

impl Header {
    pub fn map_conditioned(&self) -> bool {
        self.flags & FLAG_MAP != 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub slices: Vec<Vec<u8>>,
}

/// Byte sizes of the parts of a serialized container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionSizes {
    /// Fixed header plus all length fields.
    pub framing: usize,
    pub hyper: usize,
    pub slices: Vec<usize>,
}

impl SectionSizes {
    pub fn total(&self) -> usize {
        self.framing + self.hyper + self.slices.iter().sum::<usize>()
    }
}

impl BitstreamContainer {
    fn payload_crc(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.hyper);
        for s in &self.slices {
            h.update(s);
        }
        h.finalize()
    }

    pub fn sizes(&self) -> SectionSizes {
        SectionSizes {
            framing: HEADER_LEN + 4 * (1 + self.slices.len()),
            hyper: self.hyper.len(),
            slices: self.slices.iter().map(Vec::len).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.slices.len() != self.header.k as usize {
            return Err(Error::Format(format!(
                "header declares {} slices, container holds {}",
                self.header.k,
                self.slices.len()
            )));
        }
        let h = &self.header;
        let mut out = Vec::with_capacity(self.sizes().total());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(h.flags);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.latent_c);
        out.extend_from_slice(&h.latent_h.to_le_bytes());
        out.extend_from_slice(&h.latent_w.to_le_bytes());
        out.extend_from_slice(&h.n.to_le_bytes());
        out.extend_from_slice(&h.m.to_le_bytes());
        out.push(h.k);
        out.push(h.lambda_index);
        out.extend_from_slice(&h.model_hash.to_le_bytes());
        out.extend_from_slice(&self.payload_crc().to_le_bytes());
        for sec in std::iter::once(&self.hyper).chain(&self.slices) {
            let len = u32::try_from(sec.len()).map_err(|_| Error::Format("section larger than 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(sec);
        }
        Ok(out)
    }

    /// Parses and verifies the payload checksum.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let (c, crc) = Self::parse_unchecked(bytes)?;
        if c.payload_crc() != crc {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        Ok(c)
    }

    /// Parses the framing but returns the stored checksum instead of
    /// checking it. Used to decode deliberately damaged streams.
    pub fn parse_unchecked(bytes: &[u8]) -> Result<(Self, u32)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a .magc stream (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header = Header {
            flags: r.u8()?,
            width: r.u32()?,
            height: r.u32()?,
            latent_c: r.u8()?,
            latent_h: r.u16()?,
            latent_w: r.u16()?,
            n: r.u16()?,
            m: r.u16()?,
            k: r.u8()?,
            lambda_index: r.u8()?,
            model_hash: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
        };
        if header.flags & !FLAG_MAP != 0 {
            return Err(Error::Format(format!("unknown flag bits {:#04x}", header.flags)));
        }
        if header.k == 0 {
            return Err(Error::Format("zero slices declared".into()));
        }
        let crc = r.u32()?;
        let section = |r: &mut Reader<'_>| -> Result<Vec<u8>> {
            let len = r.u32()? as usize;
            Ok(r.take(len)?.to_vec())
        };
        let hyper = section(&mut r)?;
        let slices = (0..header.k).map(|_| section(&mut r)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((Self { header, hyper, slices }, crc))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
