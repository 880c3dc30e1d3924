//! Input and output byte identification for a detected loop.
//!
//! Every byte read inside the loop span starts as an input candidate and every
//! byte written is an output. Inputs that hold the same value in every
//! iteration are then dropped as constants, and 4-byte locations that look
//! like pointers are dropped after that.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::loops::LoopInstance;
use crate::trace::TraceFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Constant,
    Pointer,
}

/// Which pointer heuristic to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerFilter {
    /// An aligned 4-byte read location whose value never changes.
    #[default]
    Paper,
    /// As `Paper`, and the value is later used as the base of a memory operand.
    Strict,
}

impl std::str::FromStr for PointerFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "strict" => Ok(Self::Strict),
            other => Err(format!("unknown pointer filter `{other}` (expected paper or strict)")),
        }
    }
}

/// Reads of one aligned 4-byte location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordReads {
    pub values: Vec<u32>,
    pub first_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IoSet {
    pub inputs: BTreeSet<u32>,
    pub outputs: BTreeSet<u32>,
    pub removed: BTreeMap<u32, RemovalReason>,
    /// Value of the first read of each input byte in each iteration.
    pub per_iteration_values: BTreeMap<u32, Vec<Option<u8>>>,
    /// Last value written to each output byte inside the span.
    pub final_outputs: BTreeMap<u32, u8>,
    pub word_reads: BTreeMap<u32, WordReads>,
    /// Latest record index at which each value served as a memory-operand base.
    pub base_uses: HashMap<u32, usize>,
    pub iterations: usize,
    pub constants_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IoSummary {
    pub raw_inputs: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub removed_constant: usize,
    pub removed_pointer: usize,
    pub constants_skipped: bool,
}

impl IoSet {
    pub fn summary(&self) -> IoSummary {
        let count = |r| self.removed.values().filter(|&&x| x == r).count();
        IoSummary {
            raw_inputs: self.inputs.len() + self.removed.len(),
            inputs: self.inputs.len(),
            outputs: self.outputs.len(),
            removed_constant: count(RemovalReason::Constant),
            removed_pointer: count(RemovalReason::Pointer),
            constants_skipped: self.constants_skipped,
        }
    }

    fn remove(&mut self, addr: u32, reason: RemovalReason) {
        if self.inputs.remove(&addr) {
            self.removed.insert(addr, reason);
        }
    }
}

/// Every byte read in the span is an input; every byte written is an output.
pub fn collect_raw_io(lp: &LoopInstance, trace: &TraceFile) -> IoSet {
    let iterations = lp.iterations();
    let mut io = IoSet { iterations, ..IoSet::default() };
    let (first, last) = lp.trace_span;
    for (idx, rec) in trace.records[first..=last].iter().enumerate() {
        let idx = first + idx;
        let iter = lp.iteration_of(idx).expect("record inside span");
        for r in &rec.reads {
            for (addr, value) in r.bytes() {
                io.inputs.insert(addr);
                let slots = io.per_iteration_values.entry(addr).or_insert_with(|| vec![None; iterations]);
                slots[iter].get_or_insert(value);
            }
            if r.size == 4 && r.addr % 4 == 0 {
                io.word_reads
                    .entry(r.addr)
                    .or_insert_with(|| WordReads { values: Vec::new(), first_index: idx })
                    .values
                    .push(r.value);
            }
        }
        for w in &rec.writes {
            for (addr, value) in w.bytes() {
                io.outputs.insert(addr);
                io.final_outputs.insert(addr, value);
            }
        }
        if let Some(mem) = rec.decode().and_then(|insn| insn.mem_operand()) {
            io.base_uses.insert(rec.regs_before.gpr[mem.base.index()], idx);
        }
    }
    io
}

/// Drops input bytes whose first read in every iteration where they were read
/// saw the same value. Skipped for single-iteration loops.
pub fn remove_constants(mut io: IoSet) -> IoSet {
    if io.iterations < 2 {
        log::debug!("single-iteration loop: constant filter skipped");
        io.constants_skipped = true;
        return io;
    }
    let constant: Vec<u32> = io
        .inputs
        .iter()
        .copied()
        .filter(|addr| {
            let mut seen = io.per_iteration_values[addr].iter().flatten();
            let first = seen.next().copied();
            first.is_some() && seen.all(|&v| Some(v) == first)
        })
        .collect();
    for addr in constant {
        io.remove(addr, RemovalReason::Constant);
    }
    io
}

/// Drops the still-present bytes of aligned 4-byte read locations whose value
/// never changes (and, for `Strict`, is later used as a memory-operand base).
pub fn remove_pointers(mut io: IoSet, variant: PointerFilter) -> IoSet {
    let suspects: Vec<u32> = io
        .word_reads
        .iter()
        .filter(|(_, w)| {
            let v = w.values[0];
            w.values.iter().all(|&x| x == v)
                && match variant {
                    PointerFilter::Paper => true,
                    PointerFilter::Strict => io.base_uses.get(&v).is_some_and(|&at| at > w.first_index),
                }
        })
        .map(|(&addr, _)| addr)
        .collect();
    for base in suspects {
        for addr in base..base + 4 {
            io.remove(addr, RemovalReason::Pointer);
        }
    }
    io
}

/// All three filters in order.
pub fn identify_io(lp: &LoopInstance, trace: &TraceFile, variant: PointerFilter) -> IoSet {
    remove_pointers(remove_constants(collect_raw_io(lp, trace)), variant)
}
