//! Container layout, all integers little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4  | magic `OCTM` |
//! | 4  | 2  | version (1) |
//! | 6  | 1  | depth |
//! | 7  | 1  | coded levels |
//! | 8  | 1  | flags: bit 0 residual, bit 1 branch, bit 2 strict level |
//! | 9  | 1  | reserved (0) |
//! | 10 | 24 | origin x, y, z (f64) |
//! | 34 | 8  | scale (f64) |
//! | 42 | 8  | point count |
//! | 50 | 8  | node count (coded symbols) |
//! | 58 | 32 | SHA-256 of the model checkpoint |
//! | 90 | 8  | payload length in bytes |
//! | 98 | .. | range-coded payload |

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OCTM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 98;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub depth: u8,
    pub coded_levels: u8,
    pub residual: bool,
    pub branch: bool,
    pub strict_level: bool,
    pub origin: [f64; 3],
    pub scale: f64,
    pub point_count: u64,
    pub node_count: u64,
    pub model_digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .b
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::corrupt("bitstream header truncated"))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

impl Header {
    pub fn to_bytes(&self, payload_len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.depth);
        out.push(self.coded_levels);
        out.push(self.residual as u8 | (self.branch as u8) << 1 | (self.strict_level as u8) << 2);
        out.push(0);
        for o in self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.point_count.to_le_bytes());
        out.extend_from_slice(&self.node_count.to_le_bytes());
        out.extend_from_slice(&self.model_digest);
        out.extend_from_slice(&payload_len.to_le_bytes());
        out
    }

    /// Parses the fixed header; returns it with the declared payload length.
    pub fn parse(bytes: &[u8]) -> Result<(Header, u64)> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take::<4>()? != MAGIC {
            return Err(Error::corrupt("not an occupancy bitstream"));
        }
        let version = u16::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(Error::corrupt(format!(
                "unsupported bitstream version {version}"
            )));
        }
        let depth = r.u8()?;
        let coded_levels = r.u8()?;
        let flags = r.u8()?;
        let _reserved = r.u8()?;
        if flags & !0b111 != 0 {
            return Err(Error::corrupt(format!("unknown header flags {flags:#04x}")));
        }
        if depth == 0
            || depth > crate::geometry::MAX_DEPTH
            || coded_levels == 0
            || coded_levels > depth
        {
            return Err(Error::corrupt(format!(
                "bad depth {depth} / coded levels {coded_levels}"
            )));
        }
        let origin = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        if !origin.iter().all(|v| v.is_finite()) || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::corrupt("bad origin or scale"));
        }
        let point_count = r.u64()?;
        let node_count = r.u64()?;
        let model_digest = r.take::<32>()?;
        let payload_len = r.u64()?;
        Ok((
            Header {
                depth,
                coded_levels,
                residual: flags & 1 != 0,
                branch: flags & 2 != 0,
                strict_level: flags & 4 != 0,
                origin,
                scale,
                point_count,
                node_count,
                model_digest,
            },
            payload_len,
        ))
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes(self.payload.len() as u64);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, len) = Header::parse(bytes)?;
        let rest = &bytes[HEADER_LEN..];
        if rest.len() as u64 != len {
            return Err(Error::corrupt(format!(
                "payload is {} bytes, header declares {len}",
                rest.len()
            )));
        }
        Ok(Bitstream {
            header,
            payload: rest.to_vec(),
        })
    }

    pub fn len_bits(&self) -> u64 {
        8 * (HEADER_LEN + self.payload.len()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                depth: 9,
                coded_levels: 7,
                residual: true,
                branch: false,
                strict_level: false,
                origin: [-1.5, 0.25, 3.0],
                scale: 0.01,
                point_count: 12345,
                node_count: 678,
                model_digest: [7; 32],
            },
            payload: vec![1, 2, 3, 4, 5],
        }
    }

    #[test]
    fn layout_is_fixed() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 5);
        assert_eq!(&b[0..4], b"OCTM");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!((b[6], b[7], b[8], b[9]), (9, 7, 1, 0));
        assert_eq!(f64::from_le_bytes(b[10..18].try_into().unwrap()), -1.5);
        assert_eq!(f64::from_le_bytes(b[34..42].try_into().unwrap()), 0.01);
        assert_eq!(u64::from_le_bytes(b[42..50].try_into().unwrap()), 12345);
        assert_eq!(u64::from_le_bytes(b[50..58].try_into().unwrap()), 678);
        assert_eq!(&b[58..90], &[7; 32]);
        assert_eq!(u64::from_le_bytes(b[90..98].try_into().unwrap()), 5);
        assert_eq!(Bitstream::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn header_parses_without_payload() {
        let b = sample().to_bytes();
        let (h, len) = Header::parse(&b[..HEADER_LEN]).unwrap();
        assert_eq!(h, sample().header);
        assert_eq!(len, 5);
    }

    #[test]
    fn damaged_containers_are_corrupt() {
        let good = sample().to_bytes();
        let mut cases = vec![good[..50].to_vec(), good[..good.len() - 1].to_vec()];
        let mut m = good.clone();
        m[0] = b'X';
        cases.push(m);
        let mut v = good.clone();
        v[4] = 2;
        cases.push(v);
        let mut l = good.clone();
        l[7] = 10;
        cases.push(l);
        let mut f = good.clone();
        f[8] = 0x80;
        cases.push(f);
        let mut extra = good.clone();
        extra.push(0);
        cases.push(extra);
        for c in cases {
            assert!(matches!(
                Bitstream::from_bytes(&c),
                Err(Error::CorruptStream(_))
            ));
        }
    }
}
