//! Program images: named sections loaded at fixed base addresses.
//!
//! Binary container layout (all integers little-endian):
//!
//! ```text
//! "AVPI"            magic
//! u16               version (1)
//! u32               entry point
//! u16               section count
//! per section:
//!   u8  + bytes     name (UTF-8)
//!   u32             base address
//!   u8              flags (bit 0 writable, bit 1 executable)
//!   u32 + bytes     contents
//! ```

use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::codec::{ByteReader, CodecError};

pub const IMAGE_MAGIC: &[u8; 4] = b"AVPI";
pub const IMAGE_VERSION: u16 = 1;

const FLAG_WRITABLE: u8 = 0b01;
const FLAG_EXEC: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Section {
    pub name: String,
    pub base: u32,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub writable: bool,
    pub executable: bool,
}

impl Section {
    pub fn len(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// One past the last address, widened so a section ending at 2^32 is representable.
    pub fn end(&self) -> u64 {
        u64::from(self.base) + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && u64::from(addr) < self.end()
    }

    fn flags(&self) -> u8 {
        (if self.writable { FLAG_WRITABLE } else { 0 }) | (if self.executable { FLAG_EXEC } else { 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("sections `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("section `{0}` extends past the end of the address space")]
    OutOfRange(String),
    #[error("section name `{0}` is longer than 255 bytes")]
    NameTooLong(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ProgramImage {
    pub sections: Vec<Section>,
    pub entry: u32,
}

impl ProgramImage {
    pub fn new(sections: Vec<Section>, entry: u32) -> Result<Self, ImageError> {
        let image = Self { sections, entry };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        for s in &self.sections {
            if s.end() > 1 << 32 {
                return Err(ImageError::OutOfRange(s.name.clone()));
            }
            if s.name.len() > 255 {
                return Err(ImageError::NameTooLong(s.name.clone()));
            }
        }
        for (i, a) in self.sections.iter().enumerate() {
            for b in &self.sections[i + 1..] {
                let disjoint = a.end() <= u64::from(b.base) || b.end() <= u64::from(a.base);
                if !disjoint && !a.is_empty() && !b.is_empty() {
                    return Err(ImageError::Overlap(a.name.clone(), b.name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn section_at(&self, addr: u32) -> Option<&Section> {
        self.sections.iter().find(|s| s.contains(addr))
    }

    pub fn read_byte(&self, addr: u32) -> Option<u8> {
        self.section_at(addr).map(|s| s.bytes[(addr - s.base) as usize])
    }

    /// Writes `bytes` at `addr`; every byte must fall inside a section.
    pub fn poke(&mut self, addr: u32, bytes: &[u8]) -> Result<(), u32> {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            let s = self.sections.iter_mut().find(|s| s.contains(a)).ok_or(a)?;
            s.bytes[(a - s.base) as usize] = b;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<u64> {
        let mut n = 0u64;
        let mut put = |w: &mut W, b: &[u8]| -> io::Result<()> {
            w.write_all(b)?;
            n += b.len() as u64;
            Ok(())
        };
        put(w, IMAGE_MAGIC)?;
        put(w, &IMAGE_VERSION.to_le_bytes())?;
        put(w, &self.entry.to_le_bytes())?;
        put(w, &(self.sections.len() as u16).to_le_bytes())?;
        for s in &self.sections {
            put(w, &[s.name.len() as u8])?;
            put(w, s.name.as_bytes())?;
            put(w, &s.base.to_le_bytes())?;
            put(w, &[s.flags()])?;
            put(w, &s.len().to_le_bytes())?;
            put(w, &s.bytes)?;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CodecError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut reader = ByteReader::new(&buf);
        let image = Self::decode(&mut reader)?;
        reader.expect_end()?;
        Ok(image)
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self, CodecError> {
        let magic = r.bytes(4)?;
        if magic != IMAGE_MAGIC {
            return Err(CodecError::BadMagic { offset: r.offset() - 4 });
        }
        let version = r.u16()?;
        if version != IMAGE_VERSION {
            return Err(CodecError::Version { found: version, expected: IMAGE_VERSION });
        }
        let entry = r.u32()?;
        let count = r.u16()?;
        let mut sections = Vec::with_capacity(usize::from(count));
        for _ in 0..count {
            let name_len = r.u8()?;
            let name = r.string(usize::from(name_len))?;
            let base = r.u32()?;
            let flags_offset = r.offset();
            let flags = r.u8()?;
            if flags & !(FLAG_WRITABLE | FLAG_EXEC) != 0 {
                return Err(CodecError::Malformed {
                    offset: flags_offset,
                    reason: format!("unknown section flags {flags:#04x}"),
                });
            }
            let len = r.u32()?;
            let bytes = r.bytes(len as usize)?.to_vec();
            sections.push(Section {
                name,
                base,
                bytes,
                writable: flags & FLAG_WRITABLE != 0,
                executable: flags & FLAG_EXEC != 0,
            });
        }
        let at = r.offset();
        ProgramImage::new(sections, entry).map_err(|e| CodecError::Malformed { offset: at, reason: e.to_string() })
    }
}
