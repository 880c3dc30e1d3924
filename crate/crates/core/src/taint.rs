//! Byte-level dynamic taint over a trace slice, used as the ripple-effect
//! baseline: an output buffer is "rippled" from a source when every output
//! byte carries that source's label.
//!
//! Propagation is data flow only. Loads and stores copy labels byte by byte,
//! `li` clears, bitwise xor/and/or combine bytes positionally, and every other
//! ALU operation gives each destination byte the union of all operand bytes.
//! By default taint on address registers is not carried into the loaded
//! value; [`AddressPolicy::TableLookup`] carries it, which lets lookup-table
//! ciphers ripple.

use std::collections::HashMap;
use std::ops::Range;

use serde::Serialize;

use crate::isa::{AluOp, Instruction, Operand, NUM_REGS};
use crate::trace::TraceRecord;

/// One bit per source label.
pub type Labels = u64;

pub const MAX_LABELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaintSource {
    pub name: String,
    pub range: Range<u32>,
}

/// Whether a load's base-register taint reaches the loaded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AddressPolicy {
    #[default]
    DataOnly,
    TableLookup,
}

#[derive(Debug, Clone, Default)]
pub struct TaintState {
    pub memory: HashMap<u32, Labels>,
    pub registers: [[Labels; 4]; NUM_REGS],
    pub sources: Vec<TaintSource>,
}

impl TaintState {
    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.name == name)
    }

    pub fn memory_labels(&self, addr: u32) -> Labels {
        self.memory.get(&addr).copied().unwrap_or(0)
    }

    fn set_memory(&mut self, addr: u32, labels: Labels) {
        if labels == 0 {
            self.memory.remove(&addr);
        } else {
            self.memory.insert(addr, labels);
        }
    }
}

fn union(bytes: &[Labels; 4]) -> Labels {
    bytes.iter().fold(0, |a, b| a | b)
}

/// Propagates source labels through `records` in order.
///
/// # Panics
/// If more than [`MAX_LABELS`] sources are given.
pub fn propagate(records: &[TraceRecord], sources: &[TaintSource]) -> TaintState {
    propagate_with(records, sources, AddressPolicy::DataOnly)
}

/// [`propagate`] under an explicit address policy.
pub fn propagate_with(records: &[TraceRecord], sources: &[TaintSource], policy: AddressPolicy) -> TaintState {
    assert!(sources.len() <= MAX_LABELS, "at most {MAX_LABELS} taint sources");
    let mut st = TaintState { sources: sources.to_vec(), ..TaintState::default() };
    for (label, src) in sources.iter().enumerate() {
        for addr in src.range.clone() {
            *st.memory.entry(addr).or_default() |= 1 << label;
        }
    }
    for rec in records {
        let Some(insn) = rec.decode() else { continue };
        step(&mut st, rec, insn, policy);
    }
    st
}

fn step(st: &mut TaintState, rec: &TraceRecord, insn: Instruction, policy: AddressPolicy) {
    match insn {
        Instruction::Li { rd, .. } => st.registers[rd.index()] = [0; 4],
        Instruction::Mov { rd, rs } => st.registers[rd.index()] = st.registers[rs.index()],
        Instruction::Load { rd, mem, .. } => {
            let mut bytes = [0; 4];
            if let Some(r) = rec.reads.first() {
                for k in 0..usize::from(r.size) {
                    bytes[k] = st.memory_labels(r.addr.wrapping_add(k as u32));
                }
            }
            if policy == AddressPolicy::TableLookup {
                let via = union(&st.registers[mem.base.index()]);
                for b in &mut bytes {
                    *b |= via;
                }
            }
            st.registers[rd.index()] = bytes;
        }
        Instruction::Store { rs, .. } => {
            let bytes = st.registers[rs.index()];
            for w in &rec.writes {
                for k in 0..usize::from(w.size) {
                    st.set_memory(w.addr.wrapping_add(k as u32), bytes[k]);
                }
            }
        }
        Instruction::Alu { op, rd, ra, rb } => {
            let a = st.registers[ra.index()];
            let b = match rb {
                Operand::Reg(r) => st.registers[r.index()],
                Operand::Imm(_) => [0; 4],
            };
            st.registers[rd.index()] = match op {
                AluOp::Xor | AluOp::And | AluOp::Or => std::array::from_fn(|k| a[k] | b[k]),
                _ => [union(&a) | union(&b); 4],
            };
        }
        Instruction::Call { .. } => {
            // The pushed return address carries no data taint.
            for w in &rec.writes {
                for (addr, _) in w.bytes() {
                    st.set_memory(addr, 0);
                }
            }
        }
        Instruction::Halt
        | Instruction::Cmp { .. }
        | Instruction::Branch { .. }
        | Instruction::Jmp { .. }
        | Instruction::JmpReg { .. }
        | Instruction::Ret => {}
    }
}

/// True iff `output` is non-empty and every byte in it carries `label`.
pub fn ripple_verdict(st: &TaintState, output: Range<u32>, label: usize) -> bool {
    !output.is_empty() && output.clone().all(|a| st.memory_labels(a) >> label & 1 == 1)
}

/// Fraction of `output` bytes that carry `label`.
pub fn coverage(st: &TaintState, output: Range<u32>, label: usize) -> f64 {
    if output.is_empty() {
        return 0.0;
    }
    let hit = output.clone().filter(|&a| st.memory_labels(a) >> label & 1 == 1).count();
    hit as f64 / output.len() as f64
}
