//! Deterministic interpreter for the micro-ISA.
//!
//! Memory is a set of mapped regions copied from a [`ProgramImage`]; bytes that
//! were never written read as `0x00`, and any access outside a region traps.
//! Regions are reference counted and copied on first write, so cloning a
//! [`MachineState`] (one per replay) is cheap.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::image::{ProgramImage, Section};
use crate::isa::{flags, ControlKind, DecodeError, Instruction, Operand, Width, INSN_BYTES, NUM_REGS, SP};
use crate::trace::{MemAccess, RegisterFile, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Trap {
    #[error("instruction fetch from unmapped or non-executable address {0:#010x}")]
    UnmappedFetch(u32),
    #[error("instruction at {pc:#010x} does not decode: {err}")]
    Decode { pc: u32, err: DecodeError },
    #[error("data access to unmapped address {0:#010x}")]
    UnmappedData(u32),
    #[error("write to read-only address {0:#010x}")]
    ReadOnly(u32),
    #[error("machine is halted")]
    Halted,
}

#[derive(Debug, Clone)]
struct Region {
    name: Arc<str>,
    base: u32,
    bytes: Arc<Vec<u8>>,
    writable: bool,
    executable: bool,
}

impl Region {
    #[inline]
    fn offset_of(&self, addr: u32, len: u32) -> Option<usize> {
        let off = addr.wrapping_sub(self.base);
        (u64::from(off) + u64::from(len) <= self.bytes.len() as u64).then_some(off as usize)
    }
}

/// Byte-addressable memory made of mapped regions.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    regions: Vec<Region>,
}

impl Memory {
    pub fn from_image(image: &ProgramImage) -> Self {
        let regions = image
            .sections
            .iter()
            .map(|s| Region {
                name: s.name.as_str().into(),
                base: s.base,
                bytes: Arc::new(s.bytes.clone()),
                writable: s.writable,
                executable: s.executable,
            })
            .collect();
        Self { regions }
    }

    /// Captures the current contents as an image with the given entry point.
    pub fn to_image(&self, entry: u32) -> ProgramImage {
        ProgramImage {
            sections: self
                .regions
                .iter()
                .map(|r| Section {
                    name: r.name.to_string(),
                    base: r.base,
                    bytes: r.bytes.as_ref().clone(),
                    writable: r.writable,
                    executable: r.executable,
                })
                .collect(),
            entry,
        }
    }

    #[inline]
    fn locate(&self, addr: u32, len: u32) -> Option<(usize, usize)> {
        self.regions.iter().enumerate().find_map(|(i, r)| r.offset_of(addr, len).map(|off| (i, off)))
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.locate(addr, 1).is_some()
    }

    pub fn read_byte(&self, addr: u32) -> Option<u8> {
        self.locate(addr, 1).map(|(i, off)| self.regions[i].bytes[off])
    }

    /// Little-endian load. Accesses may not straddle two regions.
    #[inline]
    pub fn load(&self, addr: u32, width: Width) -> Result<u32, Trap> {
        let n = u32::from(width.bytes());
        let (i, off) = self.locate(addr, n).ok_or(Trap::UnmappedData(addr))?;
        let b = &self.regions[i].bytes[off..off + n as usize];
        Ok(match width {
            Width::B1 => u32::from(b[0]),
            Width::B2 => u32::from(u16::from_le_bytes([b[0], b[1]])),
            Width::B4 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        })
    }

    #[inline]
    pub fn store(&mut self, addr: u32, width: Width, value: u32) -> Result<(), Trap> {
        let n = width.bytes() as usize;
        let (i, off) = self.locate(addr, n as u32).ok_or(Trap::UnmappedData(addr))?;
        let region = &mut self.regions[i];
        if !region.writable {
            return Err(Trap::ReadOnly(addr));
        }
        Arc::make_mut(&mut region.bytes)[off..off + n].copy_from_slice(&value.to_le_bytes()[..n]);
        Ok(())
    }

    /// Sets a byte regardless of the region's write permission.
    pub fn poke(&mut self, addr: u32, value: u8) -> Result<(), Trap> {
        let (i, off) = self.locate(addr, 1).ok_or(Trap::UnmappedData(addr))?;
        Arc::make_mut(&mut self.regions[i].bytes)[off] = value;
        Ok(())
    }

    /// Every mapped address, in region order.
    pub fn addresses(&self) -> impl Iterator<Item = u32> + '_ {
        self.regions.iter().flat_map(|r| (0..r.bytes.len() as u32).map(move |o| r.base + o))
    }

    pub fn mapped_len(&self) -> usize {
        self.regions.iter().map(|r| r.bytes.len()).sum()
    }
}

/// Pre-decoded view of the executable regions of a memory image.
#[derive(Debug, Clone)]
pub struct CodeCache {
    regions: Vec<(u32, Vec<Result<Instruction, DecodeError>>)>,
}

impl CodeCache {
    pub fn new(memory: &Memory) -> Self {
        let regions = memory
            .regions
            .iter()
            .filter(|r| r.executable)
            .map(|r| {
                let decoded = r
                    .bytes
                    .chunks(INSN_BYTES as usize)
                    .map(|c| {
                        let mut raw = [0u8; 8];
                        raw[..c.len()].copy_from_slice(c);
                        if c.len() < 8 {
                            // A partial trailing slot never decodes.
                            return Err(DecodeError::NonCanonical);
                        }
                        Instruction::decode(raw)
                    })
                    .collect();
                (r.base, decoded)
            })
            .collect();
        Self { regions }
    }

    #[inline]
    pub fn fetch(&self, pc: u32) -> Result<Instruction, Trap> {
        for (base, slots) in &self.regions {
            let off = pc.wrapping_sub(*base);
            if (off as usize) < slots.len() * INSN_BYTES as usize {
                if off % INSN_BYTES != 0 {
                    return Err(Trap::UnmappedFetch(pc));
                }
                return slots[(off / INSN_BYTES) as usize].map_err(|err| Trap::Decode { pc, err });
            }
        }
        Err(Trap::UnmappedFetch(pc))
    }
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u32; NUM_REGS],
    pub pc: u32,
    pub flags: u8,
    pub halted: bool,
    pub memory: Memory,
}

impl MachineState {
    /// Fresh state for `image`: registers zero, `sp` at the top of the `stack`
    /// section when one exists, `pc` at the entry point.
    pub fn boot(image: &ProgramImage) -> Self {
        let mut regs = [0; NUM_REGS];
        if let Some(stack) = image.section(crate::asm::STACK_SECTION) {
            regs[SP.index()] = stack.end() as u32;
        }
        Self { regs, pc: image.entry, flags: 0, halted: false, memory: Memory::from_image(image) }
    }

    pub fn from_parts(regs: RegisterFile, memory: Memory) -> Self {
        Self { regs: regs.gpr, pc: regs.pc, flags: regs.flags, halted: false, memory }
    }

    pub fn register_file(&self) -> RegisterFile {
        RegisterFile { gpr: self.regs, pc: self.pc, flags: self.flags }
    }
}

/// Observer for the memory traffic of one instruction.
pub trait AccessSink {
    fn read(&mut self, _addr: u32, _size: u8, _value: u32) {}
    fn write(&mut self, _addr: u32, _size: u8, _value: u32) {}
}

impl AccessSink for () {}

#[derive(Default)]
struct RecordSink {
    reads: Vec<MemAccess>,
    writes: Vec<MemAccess>,
}

impl AccessSink for RecordSink {
    fn read(&mut self, addr: u32, size: u8, value: u32) {
        self.reads.push(MemAccess { addr, size, value });
    }
    fn write(&mut self, addr: u32, size: u8, value: u32) {
        self.writes.push(MemAccess { addr, size, value });
    }
}

#[inline]
fn result_flags(value: u32, carry: bool) -> u8 {
    (if value == 0 { flags::ZERO } else { 0 })
        | (if carry { flags::CARRY } else { 0 })
        | (if value & 0x8000_0000 != 0 { flags::SIGN } else { 0 })
}

/// Executes one already-fetched instruction. On a trap the machine halts and
/// no register or memory effect of the faulting instruction is committed.
#[inline]
pub fn execute<S: AccessSink>(state: &mut MachineState, insn: Instruction, sink: &mut S) -> Result<(), Trap> {
    let next = state.pc.wrapping_add(INSN_BYTES);
    let outcome = (|| -> Result<u32, Trap> {
        let regs = &mut state.regs;
        match insn {
            Instruction::Halt => {
                state.halted = true;
                Ok(state.pc)
            }
            Instruction::Li { rd, imm } => {
                regs[rd.index()] = imm;
                Ok(next)
            }
            Instruction::Mov { rd, rs } => {
                regs[rd.index()] = regs[rs.index()];
                Ok(next)
            }
            Instruction::Load { width, rd, mem } => {
                let addr = mem.effective(regs);
                let v = state.memory.load(addr, width)?;
                sink.read(addr, width.bytes(), v);
                regs[rd.index()] = v;
                Ok(next)
            }
            Instruction::Store { width, rs, mem } => {
                let addr = mem.effective(regs);
                let v = regs[rs.index()] & width.mask();
                state.memory.store(addr, width, v)?;
                sink.write(addr, width.bytes(), v);
                Ok(next)
            }
            Instruction::Alu { op, rd, ra, rb } => {
                let b = match rb {
                    Operand::Reg(r) => regs[r.index()],
                    Operand::Imm(v) => v,
                };
                let (v, carry) = op.apply(regs[ra.index()], b);
                regs[rd.index()] = v;
                state.flags = result_flags(v, carry);
                Ok(next)
            }
            Instruction::Cmp { ra, rb } => {
                let b = match rb {
                    Operand::Reg(r) => regs[r.index()],
                    Operand::Imm(v) => v,
                };
                let (v, borrow) = regs[ra.index()].overflowing_sub(b);
                state.flags = result_flags(v, borrow);
                Ok(next)
            }
            Instruction::Branch { cond, target } => Ok(if cond.holds(state.flags) { target } else { next }),
            Instruction::Jmp { target } => Ok(target),
            Instruction::JmpReg { rs } => Ok(regs[rs.index()]),
            Instruction::Call { target } => {
                let sp = regs[SP.index()].wrapping_sub(4);
                state.memory.store(sp, Width::B4, next)?;
                sink.write(sp, 4, next);
                regs[SP.index()] = sp;
                Ok(target)
            }
            Instruction::Ret => {
                let sp = regs[SP.index()];
                let ra = state.memory.load(sp, Width::B4)?;
                sink.read(sp, 4, ra);
                regs[SP.index()] = sp.wrapping_add(4);
                Ok(ra)
            }
        }
    })();
    match outcome {
        Ok(pc) => {
            state.pc = pc;
            Ok(())
        }
        Err(t) => {
            state.halted = true;
            Err(t)
        }
    }
}

/// A machine bound to the decoded code of its memory.
#[derive(Debug, Clone)]
pub struct Machine {
    pub state: MachineState,
    code: Arc<CodeCache>,
}

impl Machine {
    pub fn boot(image: &ProgramImage) -> Self {
        let state = MachineState::boot(image);
        let code = Arc::new(CodeCache::new(&state.memory));
        Self { state, code }
    }

    pub fn with_code(state: MachineState, code: Arc<CodeCache>) -> Self {
        Self { state, code }
    }

    /// Executes one instruction and returns its trace record. Register values in
    /// the record are the ones observed before execution.
    pub fn step(&mut self) -> Result<TraceRecord, Trap> {
        if self.state.halted {
            return Err(Trap::Halted);
        }
        let pc = self.state.pc;
        let insn = self.code.fetch(pc).inspect_err(|_| self.state.halted = true)?;
        let regs_before = self.state.register_file();
        let mut sink = RecordSink::default();
        execute(&mut self.state, insn, &mut sink)?;
        Ok(TraceRecord {
            address: pc,
            instr_text: insn.to_string(),
            raw_bytes: insn.encode(),
            regs_before,
            reads: sink.reads,
            writes: sink.writes,
        })
    }

    /// Executes one instruction without recording; returns its control kind.
    #[inline]
    pub fn step_quiet(&mut self) -> Result<ControlKind, Trap> {
        if self.state.halted {
            return Err(Trap::Halted);
        }
        let insn = self.code.fetch(self.state.pc).inspect_err(|_| self.state.halted = true)?;
        execute(&mut self.state, insn, &mut ())?;
        Ok(insn.control_kind())
    }
}

/// Result of tracing a program from its entry point.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub records: Vec<TraceRecord>,
    /// Sections as loaded, after input overrides were applied.
    pub section_dump: ProgramImage,
    pub final_state: MachineState,
    /// The step budget ran out before the program halted.
    pub truncated: bool,
    pub trap: Option<Trap>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("max_steps must be positive")]
    ZeroBudget,
    #[error("input override targets unmapped address {0:#010x}")]
    UnmappedOverride(u32),
}

pub fn run_and_trace(
    image: &ProgramImage,
    overrides: &BTreeMap<u32, u8>,
    max_steps: u64,
) -> Result<TraceRun, RunError> {
    if max_steps == 0 {
        return Err(RunError::ZeroBudget);
    }
    let mut loaded = image.clone();
    for (&addr, &value) in overrides {
        loaded.poke(addr, &[value]).map_err(RunError::UnmappedOverride)?;
    }
    let mut machine = Machine::boot(&loaded);
    let mut records = Vec::new();
    let mut trap = None;
    while !machine.state.halted {
        if records.len() as u64 >= max_steps {
            break;
        }
        match machine.step() {
            Ok(r) => records.push(r),
            Err(t) => {
                trap = Some(t);
                break;
            }
        }
    }
    let truncated = !machine.state.halted;
    Ok(TraceRun { records, section_dump: loaded, final_state: machine.state, truncated, trap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    fn run(src: &str) -> TraceRun {
        run_and_trace(&assemble(src).unwrap(), &BTreeMap::new(), 10_000).unwrap()
    }

    #[test]
    fn add_records_pre_execution_registers() {
        let t = run("li r1, 2\nli r2, 3\nadd r1, r1, r2\nhalt\n");
        let add = &t.records[2];
        assert_eq!(add.regs_before.gpr[1], 2);
        assert_eq!(add.regs_before.gpr[2], 3);
        assert!(add.reads.is_empty() && add.writes.is_empty());
        assert_eq!(t.final_state.regs[1], 5);
    }

    #[test]
    fn store_records_write_entry() {
        let t = run(".data\nbuf: .word 0\n.text\nli r3, buf\nli r4, 0xdeadbeef\nst32 [r3], r4\nhalt\n");
        let st = &t.records[2];
        assert_eq!(st.writes, vec![MemAccess { addr: 0x0002_0000, size: 4, value: 0xdead_beef }]);
        assert_eq!(t.final_state.memory.load(0x0002_0000, Width::B4), Ok(0xdead_beef));
    }

    #[test]
    fn halt_only_program_has_one_record() {
        let t = run("halt");
        assert_eq!(t.records.len(), 1);
        assert!(!t.truncated);
        assert!(t.trap.is_none());
    }

    #[test]
    fn unmapped_access_traps_and_halts() {
        let t = run("li r1, 0x7fff0000\nld32 r2, [r1]\nhalt\n");
        assert_eq!(t.trap, Some(Trap::UnmappedData(0x7fff_0000)));
        assert_eq!(t.records.len(), 1);
        assert!(t.final_state.halted);
    }

    #[test]
    fn writes_to_code_trap() {
        let t = run("li r1, 0x1000\nst8 [r1], r1\nhalt\n");
        assert_eq!(t.trap, Some(Trap::ReadOnly(0x1000)));
    }

    #[test]
    fn budget_exhaustion_flags_truncation() {
        let t = run_and_trace(&assemble("top: jmp top").unwrap(), &BTreeMap::new(), 50).unwrap();
        assert!(t.truncated);
        assert_eq!(t.records.len(), 50);
        assert_eq!(run_and_trace(&assemble("halt").unwrap(), &BTreeMap::new(), 0).unwrap_err(), RunError::ZeroBudget);
    }

    #[test]
    fn call_and_ret_use_stack() {
        let t = run("call f\nhalt\nf: li r0, 7\nret\n");
        assert_eq!(t.final_state.regs[0], 7);
        let call = &t.records[0];
        assert_eq!(call.writes.len(), 1);
        assert_eq!(call.writes[0].value, 0x1008);
        let ret = &t.records[2];
        assert_eq!(ret.reads[0].value, 0x1008);
        assert_eq!(t.final_state.regs[15], call.regs_before.gpr[15]);
    }

    #[test]
    fn conditional_branches_test_single_flags() {
        let t = run("li r1, 1\ncmp r1, 2\njc less\nli r0, 9\nhalt\nless: li r0, 4\nhalt\n");
        assert_eq!(t.final_state.regs[0], 4);
    }

    #[test]
    fn determinism() {
        let src = "li r1, 5\nloop: sub r1, r1, 1\njnz loop\nhalt\n";
        let a = run(src);
        let b = run(src);
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_state.register_file(), b.final_state.register_file());
    }
}
