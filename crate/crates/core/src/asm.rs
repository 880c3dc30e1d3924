//! Two-pass text assembler and matching disassembler for the micro-ISA.
//!
//! See `docs/assembly.md` for the grammar. In short: one statement per line,
//! `label:` definitions, `;` comments, section directives (`.text`, `.rodata`,
//! `.data`, `.section name, base, flags`), data directives (`.byte`, `.word`,
//! `.zero`, `.align`), `.equ NAME, value` and `.entry expr`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::image::{ProgramImage, Section};
use crate::isa::{AluOp, Cond, Instruction, MemOperand, Operand, Reg, Width, INSN_BYTES};

pub const TEXT_BASE: u32 = 0x0000_1000;
pub const RODATA_BASE: u32 = 0x0001_0000;
pub const DATA_BASE: u32 = 0x0002_0000;
pub const STACK_SECTION: &str = "stack";
pub const STACK_BASE: u32 = 0x000e_0000;
pub const STACK_SIZE: u32 = 0x4000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("operand out of range: {0}")]
    OutOfRange(String),
    #[error("invalid image: {0}")]
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub column: usize,
    pub kind: AsmErrorKind,
}

/// A slice of the source line with its 1-based column.
#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    col: usize,
}

impl<'a> Tok<'a> {
    fn trimmed(text: &'a str, col: usize) -> Self {
        let lead = text.len() - text.trim_start().len();
        Tok { text: text.trim(), col: col + lead }
    }
}

#[derive(Debug)]
enum Stmt<'a> {
    Insn { mnemonic: Tok<'a>, operands: Vec<Tok<'a>> },
    Bytes(Vec<Tok<'a>>),
    Words(Vec<Tok<'a>>),
    Zero,
}

#[derive(Debug)]
struct Placed<'a> {
    line: usize,
    section: usize,
    offset: u32,
    stmt: Stmt<'a>,
}

struct SectionDraft {
    name: String,
    base: u32,
    size: u32,
    writable: bool,
    executable: bool,
}

fn err(line: usize, column: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, column, kind }
}

fn syntax(line: usize, column: usize, msg: impl Into<String>) -> AsmError {
    err(line, column, AsmErrorKind::Syntax(msg.into()))
}

fn strip_comment(line: &str) -> &str {
    line.split_once(';').map_or(line, |(code, _)| code)
}

/// Splits on commas that are not inside `[...]`.
fn split_operands(t: Tok<'_>) -> Vec<Tok<'_>> {
    if t.text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in t.text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(Tok::trimmed(&t.text[start..i], t.col + start));
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(Tok::trimmed(&t.text[start..], t.col + start));
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if let Some(bin) = body.strip_prefix("0b") {
        i64::from_str_radix(&bin.replace('_', ""), 2).ok()?
    } else if body.starts_with(|c: char| c.is_ascii_digit()) {
        body.replace('_', "").parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn parse_reg(s: &str) -> Option<Reg> {
    if s.eq_ignore_ascii_case("sp") {
        return Some(crate::isa::SP);
    }
    let digits = s.strip_prefix('r').or_else(|| s.strip_prefix('R'))?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) || digits.len() > 2 {
        return None;
    }
    Reg::new(digits.parse().ok()?)
}

struct Symbols<'s> {
    labels: &'s HashMap<String, u32>,
    equs: &'s HashMap<String, i64>,
}

impl Symbols<'_> {
    /// `term (('+'|'-') term)*` where a term is a number, label or `.equ` name.
    fn eval(&self, line: usize, t: Tok<'_>) -> Result<i64, AsmError> {
        let s = t.text;
        if s.is_empty() {
            return Err(syntax(line, t.col, "expected expression"));
        }
        let mut total: i64 = 0;
        let mut sign = 1i64;
        let mut i = 0;
        let bytes = s.as_bytes();
        let mut expect_term = true;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if !expect_term {
                match c {
                    '+' => sign = 1,
                    '-' => sign = -1,
                    _ => return Err(syntax(line, t.col + i, format!("unexpected `{c}`"))),
                }
                expect_term = true;
                i += 1;
                continue;
            }
            let start = i;
            if c == '-' {
                sign = -sign;
                i += 1;
                continue;
            }
            while i < bytes.len() && !matches!(bytes[i] as char, '+' | '-' | ' ' | '\t') {
                i += 1;
            }
            let term = &s[start..i];
            let value = if let Some(v) = parse_number(term) {
                v
            } else if let Some(&v) = self.equs.get(term) {
                v
            } else if let Some(&a) = self.labels.get(term) {
                i64::from(a)
            } else if is_ident(term) {
                return Err(err(line, t.col + start, AsmErrorKind::UndefinedLabel(term.to_string())));
            } else {
                return Err(syntax(line, t.col + start, format!("bad term `{term}`")));
            };
            total = total.wrapping_add(sign * value);
            sign = 1;
            expect_term = false;
        }
        if expect_term {
            return Err(syntax(line, t.col + s.len(), "dangling operator"));
        }
        Ok(total)
    }

    fn eval_u32(&self, line: usize, t: Tok<'_>) -> Result<u32, AsmError> {
        let v = self.eval(line, t)?;
        if !(-(1i64 << 31)..(1i64 << 32)).contains(&v) {
            return Err(err(line, t.col, AsmErrorKind::OutOfRange(format!("{v} does not fit in 32 bits"))));
        }
        Ok(v as u32)
    }
}

fn expect_reg(line: usize, t: Tok<'_>) -> Result<Reg, AsmError> {
    parse_reg(t.text).ok_or_else(|| syntax(line, t.col, format!("expected register, found `{}`", t.text)))
}

fn parse_mem(line: usize, t: Tok<'_>, syms: &Symbols<'_>) -> Result<MemOperand, AsmError> {
    let inner = t
        .text
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| syntax(line, t.col, "expected memory operand `[reg+disp]`"))?;
    let split = inner.find(['+', '-']).unwrap_or(inner.len());
    let base_tok = Tok::trimmed(&inner[..split], t.col + 1);
    let base = expect_reg(line, base_tok)?;
    let disp = if split == inner.len() {
        0
    } else {
        let (sign, rest) = inner[split..].split_at(1);
        let rest_tok = Tok::trimmed(rest, t.col + 2 + split);
        let mag = syms.eval(line, rest_tok)?;
        let v = if sign == "-" { -mag } else { mag };
        if !(-(1i64 << 31)..(1i64 << 32)).contains(&v) {
            return Err(err(line, t.col, AsmErrorKind::OutOfRange(format!("displacement {v}"))));
        }
        v as u32 as i32
    };
    Ok(MemOperand { base, disp })
}

fn parse_operand(line: usize, t: Tok<'_>, syms: &Symbols<'_>) -> Result<Operand, AsmError> {
    match parse_reg(t.text) {
        Some(r) => Ok(Operand::Reg(r)),
        None => Ok(Operand::Imm(syms.eval_u32(line, t)?)),
    }
}

fn encode_insn(line: usize, mnemonic: Tok<'_>, ops: &[Tok<'_>], syms: &Symbols<'_>) -> Result<Instruction, AsmError> {
    let m = mnemonic.text.to_ascii_lowercase();
    let arity = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(syntax(line, mnemonic.col, format!("`{m}` takes {n} operand(s), found {}", ops.len())))
        }
    };
    let width_of = |suffix: &str| match suffix {
        "8" => Some(Width::B1),
        "16" => Some(Width::B2),
        "32" => Some(Width::B4),
        _ => None,
    };
    if let Some(op) = AluOp::ALL.iter().find(|op| op.mnemonic() == m) {
        return match ops.len() {
            2 => {
                let rd = expect_reg(line, ops[0])?;
                Ok(Instruction::Alu { op: *op, rd, ra: rd, rb: parse_operand(line, ops[1], syms)? })
            }
            3 => Ok(Instruction::Alu {
                op: *op,
                rd: expect_reg(line, ops[0])?,
                ra: expect_reg(line, ops[1])?,
                rb: parse_operand(line, ops[2], syms)?,
            }),
            n => Err(syntax(line, mnemonic.col, format!("`{m}` takes 2 or 3 operands, found {n}"))),
        };
    }
    if let Some(cond) = Cond::ALL.iter().find(|c| c.mnemonic() == m) {
        arity(1)?;
        return Ok(Instruction::Branch { cond: *cond, target: syms.eval_u32(line, ops[0])? });
    }
    if let Some(w) = m.strip_prefix("ld").and_then(width_of) {
        arity(2)?;
        return Ok(Instruction::Load { width: w, rd: expect_reg(line, ops[0])?, mem: parse_mem(line, ops[1], syms)? });
    }
    if let Some(w) = m.strip_prefix("st").and_then(width_of) {
        arity(2)?;
        return Ok(Instruction::Store { width: w, mem: parse_mem(line, ops[0], syms)?, rs: expect_reg(line, ops[1])? });
    }
    match m.as_str() {
        "halt" => arity(0).map(|_| Instruction::Halt),
        "ret" => arity(0).map(|_| Instruction::Ret),
        "li" => {
            arity(2)?;
            Ok(Instruction::Li { rd: expect_reg(line, ops[0])?, imm: syms.eval_u32(line, ops[1])? })
        }
        "mov" => {
            arity(2)?;
            Ok(Instruction::Mov { rd: expect_reg(line, ops[0])?, rs: expect_reg(line, ops[1])? })
        }
        "cmp" => {
            arity(2)?;
            Ok(Instruction::Cmp { ra: expect_reg(line, ops[0])?, rb: parse_operand(line, ops[1], syms)? })
        }
        "jmp" => {
            arity(1)?;
            match parse_reg(ops[0].text) {
                Some(rs) => Ok(Instruction::JmpReg { rs }),
                None => Ok(Instruction::Jmp { target: syms.eval_u32(line, ops[0])? }),
            }
        }
        "call" => {
            arity(1)?;
            Ok(Instruction::Call { target: syms.eval_u32(line, ops[0])? })
        }
        _ => Err(syntax(line, mnemonic.col, format!("unknown mnemonic `{}`", mnemonic.text))),
    }
}

fn parse_flags(line: usize, t: Tok<'_>) -> Result<(bool, bool), AsmError> {
    match t.text {
        "r" => Ok((false, false)),
        "rw" => Ok((true, false)),
        "rx" => Ok((false, true)),
        "rwx" => Ok((true, true)),
        other => Err(syntax(line, t.col, format!("section flags must be r|rw|rx|rwx, found `{other}`"))),
    }
}

/// An assembled image together with its resolved label addresses.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub image: ProgramImage,
    pub symbols: BTreeMap<String, u32>,
}

pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    assemble_with_symbols(source).map(|a| a.image)
}

pub fn assemble_with_symbols(source: &str) -> Result<Assembly, AsmError> {
    let mut sections: Vec<SectionDraft> = Vec::new();
    let mut current: Option<usize> = None;
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut equs: HashMap<String, i64> = HashMap::new();
    let mut placed: Vec<Placed<'_>> = Vec::new();
    let mut entry: Option<(usize, Tok<'_>)> = None;
    // Labels must be resolved before they are known, so pass one only records
    // offsets and defers label addresses until section bases are final.
    let mut pending_labels: Vec<(String, usize, u32, usize, usize)> = Vec::new();

    let no_labels = HashMap::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut rest = Tok::trimmed(strip_comment(raw), 1);
        // Label definitions, possibly several, before the statement.
        while let Some(colon) = rest.text.find(':') {
            let name = rest.text[..colon].trim();
            if !is_ident(name) || name.contains(char::is_whitespace) {
                break;
            }
            let sec = *current.get_or_insert_with(|| default_text(&mut sections));
            if pending_labels.iter().any(|(n, ..)| n == name) || equs.contains_key(name) {
                return Err(err(line, rest.col, AsmErrorKind::DuplicateLabel(name.to_string())));
            }
            pending_labels.push((name.to_string(), sec, sections[sec].size, line, rest.col));
            rest = Tok::trimmed(&rest.text[colon + 1..], rest.col + colon + 1);
        }
        if rest.text.is_empty() {
            continue;
        }
        let (head, tail) = match rest.text.find(char::is_whitespace) {
            Some(i) => (&rest.text[..i], Tok::trimmed(&rest.text[i..], rest.col + i)),
            None => (rest.text, Tok { text: "", col: rest.col + rest.text.len() }),
        };
        let head_tok = Tok { text: head, col: rest.col };
        let operands = split_operands(tail);

        if let Some(directive) = head.strip_prefix('.') {
            let syms = Symbols { labels: &no_labels, equs: &equs };
            match directive {
                "text" | "rodata" | "data" => {
                    let name = format!(".{directive}");
                    let (default_base, writable, executable) = match directive {
                        "text" => (TEXT_BASE, false, true),
                        "rodata" => (RODATA_BASE, false, false),
                        _ => (DATA_BASE, true, false),
                    };
                    let base = match operands.first() {
                        Some(t) => Some(syms.eval_u32(line, *t)?),
                        None => None,
                    };
                    current = Some(open_section(
                        &mut sections,
                        &name,
                        base,
                        default_base,
                        writable,
                        executable,
                        line,
                        head_tok.col,
                    )?);
                }
                "section" => {
                    if operands.len() != 3 {
                        return Err(syntax(line, head_tok.col, "expected `.section name, base, flags`"));
                    }
                    let name = operands[0].text;
                    if name.is_empty() || name.contains(char::is_whitespace) {
                        return Err(syntax(line, operands[0].col, "bad section name"));
                    }
                    let base = syms.eval_u32(line, operands[1])?;
                    let (w, x) = parse_flags(line, operands[2])?;
                    current = Some(open_section(&mut sections, name, Some(base), base, w, x, line, head_tok.col)?);
                }
                "equ" => {
                    if operands.len() != 2 || !is_ident(operands[0].text) {
                        return Err(syntax(line, head_tok.col, "expected `.equ NAME, value`"));
                    }
                    let name = operands[0].text.to_string();
                    if equs.contains_key(&name) || pending_labels.iter().any(|(n, ..)| *n == name) {
                        return Err(err(line, operands[0].col, AsmErrorKind::DuplicateLabel(name)));
                    }
                    let v = syms.eval(line, operands[1])?;
                    equs.insert(name, v);
                }
                "entry" => {
                    if operands.len() != 1 {
                        return Err(syntax(line, head_tok.col, "expected `.entry expr`"));
                    }
                    entry = Some((line, operands[0]));
                }
                "byte" | "word" | "zero" | "align" => {
                    let sec = *current.get_or_insert_with(|| default_text(&mut sections));
                    let offset = sections[sec].size;
                    let (stmt, size) = match directive {
                        "byte" => {
                            if operands.is_empty() {
                                return Err(syntax(line, head_tok.col, ".byte needs values"));
                            }
                            let n = operands.len() as u32;
                            (Stmt::Bytes(operands), n)
                        }
                        "word" => {
                            if operands.is_empty() {
                                return Err(syntax(line, head_tok.col, ".word needs values"));
                            }
                            let n = 4 * operands.len() as u32;
                            (Stmt::Words(operands), n)
                        }
                        "zero" => {
                            let [count] = operands.as_slice() else {
                                return Err(syntax(line, head_tok.col, "expected `.zero count`"));
                            };
                            let n = syms.eval_u32(line, *count)?;
                            (Stmt::Zero, n)
                        }
                        _ => {
                            let [align] = operands.as_slice() else {
                                return Err(syntax(line, head_tok.col, "expected `.align n`"));
                            };
                            let a = syms.eval_u32(line, *align)?;
                            if a == 0 || !a.is_power_of_two() {
                                return Err(err(
                                    line,
                                    align.col,
                                    AsmErrorKind::OutOfRange("alignment must be a power of two".into()),
                                ));
                            }
                            let pad = (a - offset % a) % a;
                            (Stmt::Zero, pad)
                        }
                    };
                    grow(&mut sections[sec], size, line, head_tok.col)?;
                    placed.push(Placed { line, section: sec, offset, stmt });
                }
                other => return Err(syntax(line, head_tok.col, format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        let sec = *current.get_or_insert_with(|| default_text(&mut sections));
        if !sections[sec].executable {
            return Err(syntax(
                line,
                head_tok.col,
                format!("instruction in non-executable section `{}`", sections[sec].name),
            ));
        }
        if sections[sec].size % INSN_BYTES != 0 {
            return Err(syntax(line, head_tok.col, "instruction is not 8-byte aligned (use .align 8)"));
        }
        let offset = sections[sec].size;
        grow(&mut sections[sec], INSN_BYTES, line, head_tok.col)?;
        placed.push(Placed { line, section: sec, offset, stmt: Stmt::Insn { mnemonic: head_tok, operands } });
    }

    if !sections.iter().any(|s| s.name == STACK_SECTION) {
        sections.push(SectionDraft {
            name: STACK_SECTION.into(),
            base: STACK_BASE,
            size: STACK_SIZE,
            writable: true,
            executable: false,
        });
    }

    for (name, sec, offset, line, col) in pending_labels {
        let addr = sections[sec]
            .base
            .checked_add(offset)
            .ok_or_else(|| err(line, col, AsmErrorKind::OutOfRange(format!("label `{name}` address overflows"))))?;
        labels.insert(name, addr);
    }

    let mut bytes: Vec<Vec<u8>> = sections.iter().map(|s| vec![0u8; s.size as usize]).collect();
    let syms = Symbols { labels: &labels, equs: &equs };
    for p in &placed {
        let out = &mut bytes[p.section][p.offset as usize..];
        match &p.stmt {
            Stmt::Insn { mnemonic, operands } => {
                let insn = encode_insn(p.line, *mnemonic, operands, &syms)?;
                out[..8].copy_from_slice(&insn.encode());
            }
            Stmt::Bytes(values) => {
                for (i, t) in values.iter().enumerate() {
                    let v = syms.eval(p.line, *t)?;
                    if !(-128..=255).contains(&v) {
                        return Err(err(p.line, t.col, AsmErrorKind::OutOfRange(format!("byte value {v}"))));
                    }
                    out[i] = v as u8;
                }
            }
            Stmt::Words(values) => {
                for (i, t) in values.iter().enumerate() {
                    let v = syms.eval_u32(p.line, *t)?;
                    out[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
                }
            }
            Stmt::Zero => {}
        }
    }

    let entry = match entry {
        Some((line, t)) => syms.eval_u32(line, t)?,
        None => labels
            .get("main")
            .copied()
            .or_else(|| sections.iter().find(|s| s.executable).map(|s| s.base))
            .unwrap_or(TEXT_BASE),
    };

    let image_sections = sections
        .into_iter()
        .zip(bytes)
        .map(|(s, b)| Section { name: s.name, base: s.base, bytes: b, writable: s.writable, executable: s.executable })
        .collect();
    let image = ProgramImage::new(image_sections, entry).map_err(|e| err(0, 0, AsmErrorKind::Image(e.to_string())))?;
    Ok(Assembly { image, symbols: labels.into_iter().collect() })
}

/// Statements before any section directive go to `.text`.
fn default_text(sections: &mut Vec<SectionDraft>) -> usize {
    open_section(sections, ".text", None, TEXT_BASE, false, true, 0, 0).expect("no base given")
}

#[allow(clippy::too_many_arguments)]
fn open_section(
    sections: &mut Vec<SectionDraft>,
    name: &str,
    base: Option<u32>,
    default_base: u32,
    writable: bool,
    executable: bool,
    line: usize,
    col: usize,
) -> Result<usize, AsmError> {
    if let Some(i) = sections.iter().position(|s| s.name == name) {
        if let Some(b) = base {
            if b != sections[i].base {
                return Err(syntax(line, col, format!("section `{name}` reopened at a different base")));
            }
        }
        return Ok(i);
    }
    sections.push(SectionDraft {
        name: name.to_string(),
        base: base.unwrap_or(default_base),
        size: 0,
        writable,
        executable,
    });
    Ok(sections.len() - 1)
}

fn grow(s: &mut SectionDraft, by: u32, line: usize, col: usize) -> Result<(), AsmError> {
    let end = u64::from(s.base) + u64::from(s.size) + u64::from(by);
    if end > 1 << 32 {
        return Err(err(
            line,
            col,
            AsmErrorKind::OutOfRange(format!("section `{}` exceeds the address space", s.name)),
        ));
    }
    s.size += by;
    Ok(())
}

/// Renders an image as assembly that reassembles to the identical image.
pub fn disassemble(image: &ProgramImage) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".entry {:#x}", image.entry);
    for s in &image.sections {
        let flags = match (s.writable, s.executable) {
            (false, false) => "r",
            (true, false) => "rw",
            (false, true) => "rx",
            (true, true) => "rwx",
        };
        let _ = writeln!(out, ".section {}, {:#x}, {flags}", s.name, s.base);
        if s.executable {
            for (i, chunk) in s.bytes.chunks(8).enumerate() {
                let decoded = <[u8; 8]>::try_from(chunk).ok().and_then(|raw| Instruction::decode(raw).ok());
                match decoded {
                    Some(insn) => {
                        let _ = writeln!(out, "    {insn}    ; {:#010x}", s.base + 8 * i as u32);
                    }
                    None => emit_bytes(&mut out, chunk),
                }
            }
        } else {
            emit_data(&mut out, &s.bytes);
        }
    }
    out
}

fn emit_bytes(out: &mut String, bytes: &[u8]) {
    let list: Vec<String> = bytes.iter().map(|b| format!("{b:#04x}")).collect();
    let _ = writeln!(out, "    .byte {}", list.join(", "));
}

fn emit_data(out: &mut String, bytes: &[u8]) {
    let mut i = 0;
    while i < bytes.len() {
        let zeros = bytes[i..].iter().take_while(|&&b| b == 0).count();
        if zeros >= 16 {
            let _ = writeln!(out, "    .zero {zeros:#x}");
            i += zeros;
            continue;
        }
        let end = (i + 16).min(bytes.len());
        emit_bytes(out, &bytes[i..end]);
        i = end;
    }
}
