//! Flat binary container shared by model and agent files.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic        4 bytes   e.g. "SAQM"
//! version      u16
//! header       n × u32   fixed per magic
//! groups       u32       number of parameter groups
//! per group:   u32 tag, u32 block count,
//!              per block: u32 rank, rank × u32 dims, f64 values
//! crc32        u32       over every preceding byte
//! ```

use saq_autodiff::Tensor;

use crate::error::{Result, SaqError};

pub const FORMAT_VERSION: u16 = 1;

/// Tag for groups that are not dense networks (codebooks, normalizers).
pub const RAW_GROUP: u32 = 0xFFFF_FFFF;

#[derive(Debug, Default)]
pub struct ContainerWriter {
    buf: Vec<u8>,
    groups: u32,
    groups_offset: usize,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 4], header: &[u32]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for h in header {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        let groups_offset = buf.len();
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self {
            buf,
            groups: 0,
            groups_offset,
        }
    }

    pub fn group<'a>(&mut self, tag: u32, blocks: impl IntoIterator<Item = &'a Tensor>) -> &mut Self {
        let blocks: Vec<&Tensor> = blocks.into_iter().collect();
        self.buf.extend_from_slice(&tag.to_le_bytes());
        self.buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for t in blocks {
            self.buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                self.buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        self.groups += 1;
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let g = self.groups.to_le_bytes();
        self.buf[self.groups_offset..self.groups_offset + 4].copy_from_slice(&g);
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub tag: u32,
    pub blocks: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Vec<u32>,
    pub groups: Vec<Group>,
}

/// Sequential little-endian reader that reports the offset of any failure.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SaqError::format(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Checks the trailing CRC and returns the payload without it.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(SaqError::format(0, "file shorter than its checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(SaqError::format(
            payload.len(),
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(payload)
}

pub(crate) fn check_magic(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<()> {
    let found = cur.take(4)?;
    if found != magic {
        return Err(SaqError::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(SaqError::format(4, format!("unsupported format version {version}")));
    }
    Ok(())
}

impl Container {
    pub fn parse(bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<Self> {
        // Magic first so a wrong file type is named as such rather than as a
        // checksum failure.
        let mut cur = Cursor::new(bytes);
        check_magic(&mut cur, magic)?;
        let payload = verify_crc(bytes)?;
        let mut cur = Cursor::new(payload);
        cur.pos = 6;
        let header = (0..header_len).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n_groups = cur.u32()?;
        let mut groups = Vec::with_capacity(n_groups as usize);
        for _ in 0..n_groups {
            let tag = cur.u32()?;
            let n_blocks = cur.u32()?;
            let mut blocks = Vec::with_capacity(n_blocks as usize);
            for _ in 0..n_blocks {
                let at = cur.pos;
                let rank = cur.u32()? as usize;
                if rank > 8 {
                    return Err(SaqError::format(at, format!("implausible tensor rank {rank}")));
                }
                let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let raw = cur.take(n * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let t = Tensor::new(shape, data).map_err(|e| SaqError::format(at, e.to_string()))?;
                blocks.push(t);
            }
            groups.push(Group { tag, blocks });
        }
        if cur.pos != payload.len() {
            return Err(SaqError::format(cur.pos, "trailing bytes before checksum"));
        }
        Ok(Self { header, groups })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::vector(vec![-0.5]);
        let mut w = ContainerWriter::new(b"TEST", &[7, 9]);
        w.group(1, [&a, &b]).group(RAW_GROUP, [&b]);
        w.finish()
    }

    #[test]
    fn round_trip() {
        let c = Container::parse(&sample(), b"TEST", 2).unwrap();
        assert_eq!(c.header, vec![7, 9]);
        assert_eq!(c.groups.len(), 2);
        assert_eq!(c.groups[0].blocks[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.groups[1].tag, RAW_GROUP);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample();
        bytes[20] ^= 0x40;
        let err = Container::parse(&bytes, b"TEST", 2).unwrap_err();
        assert!(err.to_string().contains("CRC mismatch"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample();
        assert!(Container::parse(&bytes[..bytes.len() - 9], b"TEST", 2).is_err());
        assert!(Container::parse(&bytes[..3], b"TEST", 2).is_err());
    }

    #[test]
    fn wrong_magic_is_named() {
        let err = Container::parse(&sample(), b"SAQM", 2).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
