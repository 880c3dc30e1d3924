//! Execution traces: records, files, and their binary and text codecs.
//!
//! Binary layout (little-endian; see `docs/formats.md`):
//!
//! ```text
//! "AVTR"  u16 version  u16 isa
//! u32 metadata count, then per entry: u16 key len, key, u32 value len, value
//! u64 record count, then per record:
//!   u32 address
//!   u16 instr text len, instr text
//!   [u8; 8] raw encoding
//!   18 x u32  r0..r15, pc, flags
//!   u8 read count,  per read:  u32 addr, u8 size, u32 value
//!   u8 write count, per write: u32 addr, u8 size, u32 value
//! trailing section dump ("AVPI" image container)
//! ```
//!
//! The text form puts one record per line in the
//! `<address>;<instr>;<raw bytes>;<registers>;<reads>;<writes>` layout, with
//! lowercase hex fields and `#` header lines for the section dump and metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Read, Write};

use serde::Serialize;

use crate::codec::{ByteReader, CodecError};
use crate::image::{ProgramImage, Section};
use crate::isa::{Instruction, NUM_REGS};

pub const TRACE_MAGIC: &[u8; 4] = b"AVTR";
pub const TRACE_VERSION: u16 = 1;
pub const ISA_MICRO32: u16 = 1;
pub const MAX_MEM_OPS: usize = 8;
const TEXT_HEADER: &str = "#avtr-text";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MemAccess {
    pub addr: u32,
    pub size: u8,
    pub value: u32,
}

impl MemAccess {
    /// The bytes covered by this access, lowest address first, with their values.
    pub fn bytes(&self) -> impl Iterator<Item = (u32, u8)> + '_ {
        (0..self.size).map(move |i| (self.addr.wrapping_add(u32::from(i)), (self.value >> (8 * i)) as u8))
    }

    fn check(&self) -> Result<(), String> {
        match self.size {
            1 | 2 | 4 => {}
            s => return Err(format!("memory access size {s} not in {{1,2,4}}")),
        }
        if self.size < 4 && self.value >> (8 * self.size) != 0 {
            return Err(format!("value {:#x} does not fit in {} bytes", self.value, self.size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct RegisterFile {
    pub gpr: [u32; NUM_REGS],
    pub pc: u32,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub address: u32,
    pub instr_text: String,
    pub raw_bytes: [u8; 8],
    pub regs_before: RegisterFile,
    pub reads: Vec<MemAccess>,
    pub writes: Vec<MemAccess>,
}

impl TraceRecord {
    pub fn decode(&self) -> Option<Instruction> {
        Instruction::decode(self.raw_bytes).ok()
    }

    fn check(&self) -> Result<(), String> {
        if self.reads.len() > MAX_MEM_OPS || self.writes.len() > MAX_MEM_OPS {
            return Err(format!("more than {MAX_MEM_OPS} memory operations"));
        }
        if self.regs_before.flags & !crate::isa::flags::MASK != 0 {
            return Err(format!("flags value {:#x} has undefined bits", self.regs_before.flags));
        }
        if self.instr_text.contains([';', '\n']) {
            return Err("instruction text contains a separator".into());
        }
        for op in self.reads.iter().chain(&self.writes) {
            op.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceHeader {
    pub version: u16,
    pub isa: u16,
}

impl Default for TraceHeader {
    fn default() -> Self {
        Self { version: TRACE_VERSION, isa: ISA_MICRO32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    pub section_dump: ProgramImage,
    pub metadata: BTreeMap<String, String>,
}

impl TraceFile {
    pub fn new(records: Vec<TraceRecord>, section_dump: ProgramImage) -> Self {
        Self { header: TraceHeader::default(), records, section_dump, metadata: BTreeMap::new() }
    }

    /// Checks record invariants and that the section dump covers every code address.
    pub fn validate(&self) -> Result<(), (u64, String)> {
        for (i, r) in self.records.iter().enumerate() {
            r.check().map_err(|e| (i as u64, e))?;
            if self.section_dump.section_at(r.address).is_none() {
                return Err((i as u64, format!("code address {:#010x} outside every dumped section", r.address)));
            }
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> io::Result<u64> {
        let mut buf = Vec::with_capacity(64 + self.records.len() * 120);
        buf.extend_from_slice(TRACE_MAGIC);
        buf.extend_from_slice(&self.header.version.to_le_bytes());
        buf.extend_from_slice(&self.header.isa.to_le_bytes());
        buf.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            buf.extend_from_slice(&(k.len() as u16).to_le_bytes());
            buf.extend_from_slice(k.as_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            buf.extend_from_slice(v.as_bytes());
        }
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.address.to_le_bytes());
            buf.extend_from_slice(&(r.instr_text.len() as u16).to_le_bytes());
            buf.extend_from_slice(r.instr_text.as_bytes());
            buf.extend_from_slice(&r.raw_bytes);
            for g in r.regs_before.gpr {
                buf.extend_from_slice(&g.to_le_bytes());
            }
            buf.extend_from_slice(&r.regs_before.pc.to_le_bytes());
            buf.extend_from_slice(&u32::from(r.regs_before.flags).to_le_bytes());
            for ops in [&r.reads, &r.writes] {
                buf.push(ops.len() as u8);
                for op in ops {
                    buf.extend_from_slice(&op.addr.to_le_bytes());
                    buf.push(op.size);
                    buf.extend_from_slice(&op.value.to_le_bytes());
                }
            }
        }
        self.section_dump.write_to(&mut buf)?;
        w.write_all(&buf)?;
        Ok(buf.len() as u64)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_binary<R: Read>(source: &mut R) -> Result<Self, CodecError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_binary(&buf)
    }

    pub fn from_binary(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = ByteReader::new(buf);
        if r.bytes(4)? != TRACE_MAGIC {
            return Err(CodecError::BadMagic { offset: 0 });
        }
        let version = r.u16()?;
        if version != TRACE_VERSION {
            return Err(CodecError::Version { found: version, expected: TRACE_VERSION });
        }
        let isa_at = r.offset();
        let isa = r.u16()?;
        if isa != ISA_MICRO32 {
            return Err(CodecError::Malformed { offset: isa_at, reason: format!("unknown ISA id {isa}") });
        }
        let mut metadata = BTreeMap::new();
        let meta_count = r.u32()?;
        for _ in 0..meta_count {
            let klen = r.u16()?;
            let k = r.string(usize::from(klen))?;
            let vlen = r.u32()?;
            let v = r.string(vlen as usize)?;
            metadata.insert(k, v);
        }
        let count = r.u64()?;
        // Each record is at least 86 bytes; reject impossible counts before allocating.
        if count > (r.remaining() / 86) as u64 {
            return Err(CodecError::Truncated {
                offset: buf.len(),
                needed: (count as usize).saturating_mul(86) - r.remaining(),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
        for index in 0..count {
            let start = r.offset();
            let record = read_record(&mut r).map_err(|e| match e {
                CodecError::Truncated { .. } => e,
                CodecError::Malformed { offset, reason } => CodecError::Record { index, offset, reason },
                other => other,
            })?;
            record.check().map_err(|reason| CodecError::Record { index, offset: start, reason })?;
            records.push(record);
        }
        let section_dump = ProgramImage::decode(&mut r)?;
        r.expect_end()?;
        let file = TraceFile { header: TraceHeader { version, isa }, records, section_dump, metadata };
        file.validate().map_err(|(index, reason)| CodecError::Record { index, offset: 0, reason })?;
        Ok(file)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 200);
        let _ = writeln!(out, "{TEXT_HEADER} {} {}", self.header.version, self.header.isa);
        let _ = writeln!(out, "#entry {:08x}", self.section_dump.entry);
        for s in &self.section_dump.sections {
            let flags = match (s.writable, s.executable) {
                (false, false) => "r",
                (true, false) => "rw",
                (false, true) => "rx",
                (true, true) => "rwx",
            };
            let _ = write!(out, "#section {} {:08x} {flags} ", s.name, s.base);
            for b in &s.bytes {
                let _ = write!(out, "{b:02x}");
            }
            out.push('\n');
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "#meta {k} {v}");
        }
        for r in &self.records {
            write_text_record(&mut out, r);
        }
        out
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<u64> {
        let s = self.to_text();
        w.write_all(s.as_bytes())?;
        Ok(s.len() as u64)
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, reason: String| CodecError::Text { line, reason };
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty input".into()))?;
        let mut head = first.split_whitespace();
        if head.next() != Some(TEXT_HEADER) {
            return Err(bad(1, format!("expected `{TEXT_HEADER}` header")));
        }
        let version: u16 = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(1, "missing version".into()))?;
        if version != TRACE_VERSION {
            return Err(CodecError::Version { found: version, expected: TRACE_VERSION });
        }
        let isa: u16 = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(1, "missing ISA id".into()))?;
        if isa != ISA_MICRO32 {
            return Err(bad(1, format!("unknown ISA id {isa}")));
        }
        let mut file = TraceFile { header: TraceHeader { version, isa }, ..Default::default() };
        for (line, l) in lines {
            if l.is_empty() {
                continue;
            }
            if let Some(rest) = l.strip_prefix('#') {
                let (tag, body) = rest.split_once(' ').unwrap_or((rest, ""));
                match tag {
                    "entry" => file.section_dump.entry = hex32(body).ok_or_else(|| bad(line, "bad entry".into()))?,
                    "section" => file.section_dump.sections.push(parse_section(body).map_err(|e| bad(line, e))?),
                    "meta" => {
                        let (k, v) = body.split_once(' ').unwrap_or((body, ""));
                        file.metadata.insert(k.to_string(), v.to_string());
                    }
                    other => return Err(bad(line, format!("unknown header `#{other}`"))),
                }
                continue;
            }
            let index = file.records.len() as u64;
            let record = parse_text_record(l)
                .and_then(|r| r.check().map(|_| r))
                .map_err(|reason| CodecError::Record { index, offset: line, reason })?;
            file.records.push(record);
        }
        file.section_dump.validate().map_err(|e| bad(0, e.to_string()))?;
        file.validate().map_err(|(index, reason)| CodecError::Record { index, offset: 0, reason })?;
        Ok(file)
    }
}

fn read_record(r: &mut ByteReader<'_>) -> Result<TraceRecord, CodecError> {
    let address = r.u32()?;
    let text_len = r.u16()?;
    let instr_text = r.string(usize::from(text_len))?;
    let raw_bytes = r.array::<8>()?;
    let mut gpr = [0u32; NUM_REGS];
    for g in &mut gpr {
        *g = r.u32()?;
    }
    let pc = r.u32()?;
    let flags_at = r.offset();
    let flags = r.u32()?;
    if flags > 0xff {
        return Err(CodecError::Malformed { offset: flags_at, reason: format!("flags {flags:#x} out of range") });
    }
    let mut ops = [Vec::new(), Vec::new()];
    for list in &mut ops {
        let at = r.offset();
        let n = r.u8()?;
        if usize::from(n) > MAX_MEM_OPS {
            return Err(CodecError::Malformed {
                offset: at,
                reason: format!("{n} memory operations exceeds {MAX_MEM_OPS}"),
            });
        }
        for _ in 0..n {
            let addr = r.u32()?;
            let size = r.u8()?;
            let value = r.u32()?;
            list.push(MemAccess { addr, size, value });
        }
    }
    let [reads, writes] = ops;
    Ok(TraceRecord {
        address,
        instr_text,
        raw_bytes,
        regs_before: RegisterFile { gpr, pc, flags: flags as u8 },
        reads,
        writes,
    })
}

fn write_text_record(out: &mut String, r: &TraceRecord) {
    let _ = write!(out, "{:08x};{};", r.address, r.instr_text);
    for b in r.raw_bytes {
        let _ = write!(out, "{b:02x}");
    }
    out.push(';');
    for g in r.regs_before.gpr {
        let _ = write!(out, "{g:08x},");
    }
    let _ = write!(out, "{:08x},{:08x};", r.regs_before.pc, r.regs_before.flags);
    for (i, ops) in [&r.reads, &r.writes].into_iter().enumerate() {
        for (j, op) in ops.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let width = 2 * usize::from(op.size);
            let _ = write!(out, "{:08x},{},{:0width$x}", op.addr, op.size, op.value);
        }
        out.push(if i == 0 { ';' } else { '\n' });
    }
}

fn hex32(s: &str) -> Option<u32> {
    if s.is_empty() || s.len() > 8 {
        return None;
    }
    u32::from_str_radix(s, 16).ok()
}

fn parse_section(body: &str) -> Result<Section, String> {
    let mut parts = body.split(' ');
    let name = parts.next().filter(|n| !n.is_empty()).ok_or("missing section name")?;
    let base = parts.next().and_then(hex32).ok_or("bad section base")?;
    let (writable, executable) = match parts.next() {
        Some("r") => (false, false),
        Some("rw") => (true, false),
        Some("rx") => (false, true),
        Some("rwx") => (true, true),
        _ => return Err("bad section flags".into()),
    };
    let hex = parts.next().unwrap_or("");
    if parts.next().is_some() || hex.len() % 2 != 0 {
        return Err("bad section contents".into());
    }
    let bytes = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| "bad section contents")?;
    Ok(Section { name: name.to_string(), base, bytes, writable, executable })
}

fn parse_ops(field: &str) -> Result<Vec<MemAccess>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    let parts: Vec<&str> = field.split(',').collect();
    if parts.len() % 3 != 0 {
        return Err(format!("memory operation list `{field}` is not a sequence of addr,size,value triples"));
    }
    parts
        .chunks(3)
        .map(|t| {
            let addr = hex32(t[0]).ok_or_else(|| format!("bad address `{}`", t[0]))?;
            let size: u8 = t[1].parse().map_err(|_| format!("bad size `{}`", t[1]))?;
            let value = hex32(t[2]).ok_or_else(|| format!("bad value `{}`", t[2]))?;
            Ok(MemAccess { addr, size, value })
        })
        .collect()
}

fn parse_text_record(line: &str) -> Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split(';').collect();
    let [addr, instr, raw, regs, reads, writes] = fields.as_slice() else {
        return Err(format!("expected 6 `;`-separated fields, found {}", fields.len()));
    };
    let address = hex32(addr).ok_or_else(|| format!("bad address `{addr}`"))?;
    if raw.len() != 16 {
        return Err(format!("raw bytes `{raw}` must be 16 hex digits"));
    }
    let mut raw_bytes = [0u8; 8];
    for (i, b) in raw_bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&raw[2 * i..2 * i + 2], 16).map_err(|_| format!("bad raw bytes `{raw}`"))?;
    }
    let values: Vec<u32> = regs
        .split(',')
        .map(|v| hex32(v).ok_or_else(|| format!("bad register value `{v}`")))
        .collect::<Result<_, _>>()?;
    if values.len() != NUM_REGS + 2 {
        return Err(format!("expected {} register values, found {}", NUM_REGS + 2, values.len()));
    }
    let mut gpr = [0u32; NUM_REGS];
    gpr.copy_from_slice(&values[..NUM_REGS]);
    let flags = u8::try_from(values[NUM_REGS + 1]).map_err(|_| "flags out of range".to_string())?;
    Ok(TraceRecord {
        address,
        instr_text: instr.to_string(),
        raw_bytes,
        regs_before: RegisterFile { gpr, pc: values[NUM_REGS], flags },
        reads: parse_ops(reads)?,
        writes: parse_ops(writes)?,
    })
}

/// Reads either codec, sniffing the leading bytes.
pub fn read_trace<R: Read>(source: &mut R) -> Result<TraceFile, CodecError> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    if buf.starts_with(TEXT_HEADER.as_bytes()) {
        let text = std::str::from_utf8(&buf)
            .map_err(|e| CodecError::Malformed { offset: e.valid_up_to(), reason: "invalid UTF-8".into() })?;
        TraceFile::from_text(text)
    } else {
        TraceFile::from_binary(&buf)
    }
}

/// Writes the binary codec.
pub fn write_trace<W: Write>(file: &TraceFile, sink: &mut W) -> io::Result<u64> {
    file.write_binary(sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> ProgramImage {
        ProgramImage::new(
            vec![Section { name: ".text".into(), base: 0x1000, bytes: vec![0; 64], writable: false, executable: true }],
            0x1000,
        )
        .unwrap()
    }

    fn record() -> TraceRecord {
        let mut regs = RegisterFile::default();
        regs.gpr[3] = 0x20000;
        regs.pc = 0x1008;
        regs.flags = 0b101;
        TraceRecord {
            address: 0x1008,
            instr_text: "ld32 r1, [r3+0x4]".into(),
            raw_bytes: [0x12, 1, 3, 0, 4, 0, 0, 0],
            regs_before: regs,
            reads: vec![MemAccess { addr: 0x20004, size: 4, value: 0xdeadbeef }],
            writes: vec![],
        }
    }

    #[test]
    fn empty_file_round_trips() {
        let f = TraceFile::new(Vec::new(), image());
        let back = TraceFile::from_binary(&f.to_binary()).unwrap();
        assert!(back.records.is_empty());
        assert_eq!(back, f);
        assert_eq!(TraceFile::from_text(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn single_record_round_trips() {
        let mut f = TraceFile::new(vec![record()], image());
        f.metadata.insert("program".into(), "unit test".into());
        assert_eq!(TraceFile::from_binary(&f.to_binary()).unwrap(), f);
        assert_eq!(TraceFile::from_text(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn truncation_reports_offset() {
        let f = TraceFile::new(vec![record(), record()], image());
        let bytes = f.to_binary();
        for cut in [3, 20, bytes.len() - 1] {
            match TraceFile::from_binary(&bytes[..cut]) {
                Err(CodecError::Truncated { offset, .. }) => assert_eq!(offset, cut),
                Err(CodecError::BadMagic { .. }) if cut < 4 => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = TraceFile::new(vec![], image()).to_binary();
        bytes[4] = 9;
        assert!(matches!(TraceFile::from_binary(&bytes), Err(CodecError::Version { found: 9, .. })));
    }

    #[test]
    fn malformed_record_is_named() {
        let mut bad = record();
        bad.reads[0].size = 3;
        let f = TraceFile::new(vec![record(), bad], image());
        match TraceFile::from_binary(&f.to_binary()) {
            Err(CodecError::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_record_layout() {
        let f = TraceFile::new(vec![record()], image());
        let text = f.to_text();
        let line = text.lines().last().unwrap();
        assert_eq!(
            line,
            "00001008;ld32 r1, [r3+0x4];1201030004000000;\
             00000000,00000000,00000000,00020000,00000000,00000000,00000000,00000000,\
             00000000,00000000,00000000,00000000,00000000,00000000,00000000,00000000,\
             00001008,00000005;00020004,4,deadbeef;"
        );
    }
}
