//! Snapshot reconstruction and loop-body replay.
//!
//! A snapshot is the machine state just before a loop's first record: the
//! sections as loaded, updated with every write the trace made before the
//! loop, and the register file recorded with the first loop record. Replay
//! runs the interpreter from there until control leaves the loop.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::isa::{ControlKind, Instruction, INSN_BYTES, NUM_REGS};
use crate::loops::LoopInstance;
use crate::machine::{CodeCache, Machine, MachineState, Memory, Trap};
use crate::trace::{RegisterFile, TraceFile};

pub const DEFAULT_STEP_MULTIPLIER: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PcClass {
    Inside,
    Exit,
}

/// Classification of code addresses relative to one loop.
#[derive(Debug, Clone)]
struct PcMap {
    base: u32,
    slots: Vec<Option<PcClass>>,
}

impl PcMap {
    fn build(inside: &BTreeSet<u32>, exits: &BTreeSet<u32>) -> Self {
        let all = || inside.iter().chain(exits);
        let lo = all().copied().min().unwrap_or(0) & !(INSN_BYTES - 1);
        let hi = all().copied().max().unwrap_or(0);
        let mut slots = vec![None; ((hi - lo) / INSN_BYTES + 1) as usize];
        for &a in inside {
            slots[((a - lo) / INSN_BYTES) as usize] = Some(PcClass::Inside);
        }
        for &a in exits {
            slots[((a - lo) / INSN_BYTES) as usize] = Some(PcClass::Exit);
        }
        Self { base: lo, slots }
    }

    #[inline]
    fn class(&self, pc: u32) -> Option<PcClass> {
        let off = pc.wrapping_sub(self.base);
        if off % INSN_BYTES != 0 {
            return None;
        }
        self.slots.get((off / INSN_BYTES) as usize).copied().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub registers: RegisterFile,
    pub memory: Memory,
    pub loop_entry: u32,
    pub loop_exit_set: BTreeSet<u32>,
    /// Record count of the loop span in the original trace.
    pub span_len: usize,
    code: Arc<CodeCache>,
    pcs: Arc<PcMap>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("loop span {0:?} is outside the trace")]
    SpanOutOfRange((usize, usize)),
    #[error("override targets unmapped address {0:#010x}")]
    UnmappedOverride(u32),
}

/// Addresses that count as inside the loop: every address the span executed,
/// plus the contiguous address range spanned by the loop's own frame.
fn inside_addresses(lp: &LoopInstance, trace: &TraceFile) -> BTreeSet<u32> {
    let span = &trace.records[lp.trace_span.0..=lp.trace_span.1];
    let mut inside: BTreeSet<u32> = span.iter().map(|r| r.address).collect();
    let entry = trace.records[lp.trace_span.0].address;
    let head_end = lp.head_end_address;
    let (lo, hi) = (entry.min(head_end), entry.max(head_end));
    // Widen to the frame's range: the head's own section bounds the extension.
    if let Some(section) = trace.section_dump.section_at(head_end) {
        let local = inside.iter().copied().filter(|&a| section.contains(a));
        let (min, max) = local.fold((lo, hi), |(a, b), x| (a.min(x), b.max(x)));
        inside.extend((min..=max).step_by(INSN_BYTES as usize));
    }
    inside
}

/// The record after the span, plus successors of the head's terminating
/// branch that the loop never executed.
fn exit_addresses(lp: &LoopInstance, trace: &TraceFile, executed: &BTreeSet<u32>) -> BTreeSet<u32> {
    let mut exits = BTreeSet::new();
    if let Some(next) = trace.records.get(lp.trace_span.1 + 1) {
        exits.insert(next.address);
    }
    let head_record =
        trace.records.iter().skip(lp.trace_span.0).take(lp.span_len()).find(|r| r.address == lp.head_end_address);
    if let Some(Instruction::Branch { target, .. }) = head_record.and_then(|r| r.decode()) {
        for succ in [target, lp.head_end_address.wrapping_add(INSN_BYTES)] {
            if !executed.contains(&succ) {
                exits.insert(succ);
            }
        }
    }
    exits
}

pub fn build_snapshot(lp: &LoopInstance, trace: &TraceFile) -> Result<Snapshot, SnapshotError> {
    let (first, last) = lp.trace_span;
    if last >= trace.records.len() || first > last {
        return Err(SnapshotError::SpanOutOfRange(lp.trace_span));
    }
    let mut memory = Memory::from_image(&trace.section_dump);
    for rec in &trace.records[..first] {
        for w in &rec.writes {
            for (addr, value) in w.bytes() {
                // A write the original run performed is always mapped.
                let _ = memory.poke(addr, value);
            }
        }
    }
    let executed: BTreeSet<u32> = trace.records[first..=last].iter().map(|r| r.address).collect();
    let exits = exit_addresses(lp, trace, &executed);
    let mut inside = inside_addresses(lp, trace);
    inside.retain(|a| !exits.contains(a));
    let code = Arc::new(CodeCache::new(&memory));
    Ok(Snapshot {
        registers: trace.records[first].regs_before,
        memory,
        loop_entry: trace.records[first].address,
        loop_exit_set: exits.clone(),
        span_len: lp.span_len(),
        code,
        pcs: Arc::new(PcMap::build(&inside, &exits)),
    })
}

impl Snapshot {
    pub fn default_max_steps(&self) -> u64 {
        DEFAULT_STEP_MULTIPLIER * self.span_len as u64
    }

    /// A copy with a `fraction` of all mapped bytes, code included, replaced by
    /// random values. Positions are drawn without replacement.
    pub fn randomized<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Snapshot {
        let addrs: Vec<u32> = self.memory.addresses().collect();
        let n = ((addrs.len() as f64) * fraction).round() as usize;
        let mut out = self.clone();
        for i in sample(rng, addrs.len(), n.min(addrs.len())) {
            let _ = out.memory.poke(addrs[i], rng.random());
        }
        out.code = Arc::new(CodeCache::new(&out.memory));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayStatus {
    Completed,
    Trap,
    StepBudgetExhausted,
    DivergentExit,
}

#[derive(Debug, Clone)]
pub struct ReplayResult {
    pub status: ReplayStatus,
    pub trap: Option<Trap>,
    pub final_state: MachineState,
    pub output_values: BTreeMap<u32, u8>,
    pub steps_executed: u64,
}

/// Replays from `snap` with `overrides` applied until the pc reaches an exit
/// address, leaves the loop, traps, or `max_steps` run out.
pub fn replay(
    snap: &Snapshot,
    overrides: &BTreeMap<u32, u8>,
    outputs: &[u32],
    max_steps: u64,
) -> Result<ReplayResult, SnapshotError> {
    let mut state = MachineState::from_parts(snap.registers, snap.memory.clone());
    for (&addr, &value) in overrides {
        state.memory.poke(addr, value).map_err(|_| SnapshotError::UnmappedOverride(addr))?;
    }
    let mut machine = Machine::with_code(state, Arc::clone(&snap.code));
    let mut steps = 0u64;
    let mut trap = None;
    let status = loop {
        if steps > 0 {
            match snap.pcs.class(machine.state.pc) {
                Some(PcClass::Exit) => break ReplayStatus::Completed,
                Some(PcClass::Inside) => {}
                None => break ReplayStatus::DivergentExit,
            }
        }
        if steps >= max_steps {
            break ReplayStatus::StepBudgetExhausted;
        }
        match machine.step_quiet() {
            Ok(ControlKind::Halt) => {
                steps += 1;
                // Halting inside the loop counts as leaving it at an unknown point.
                break ReplayStatus::DivergentExit;
            }
            Ok(_) => steps += 1,
            Err(t) => {
                trap = Some(t);
                break ReplayStatus::Trap;
            }
        }
    };
    let final_state = machine.state;
    let output_values = outputs.iter().filter_map(|&a| final_state.memory.read_byte(a).map(|v| (a, v))).collect();
    Ok(ReplayResult { status, trap, final_state, output_values, steps_executed: steps })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FidelityReport {
    pub loop_id: usize,
    pub status: ReplayStatus,
    /// False when the span ends the trace, leaving nothing to compare registers with.
    pub registers_compared: bool,
    pub mismatched_registers: Vec<String>,
    pub outputs_compared: usize,
    pub mismatched_outputs: Vec<u32>,
}

impl FidelityReport {
    pub fn consistent(&self) -> bool {
        self.status == ReplayStatus::Completed
            && self.mismatched_registers.is_empty()
            && self.mismatched_outputs.is_empty()
    }
}

/// Replays `snap` without overrides and compares the stop state with the
/// original trace: the register file of the record after the span, and the
/// last value the span wrote to every output byte.
pub fn fidelity(
    lp: &LoopInstance,
    trace: &TraceFile,
    snap: &Snapshot,
    final_outputs: &BTreeMap<u32, u8>,
) -> Result<FidelityReport, SnapshotError> {
    let outputs: Vec<u32> = final_outputs.keys().copied().collect();
    let result = replay(snap, &BTreeMap::new(), &outputs, snap.default_max_steps())?;
    let mut mismatched_registers = Vec::new();
    let expected = trace.records.get(lp.trace_span.1 + 1).map(|r| r.regs_before);
    if let Some(exp) = expected {
        let got = result.final_state.register_file();
        for i in 0..NUM_REGS {
            if exp.gpr[i] != got.gpr[i] {
                mismatched_registers.push(format!("r{i}"));
            }
        }
        if exp.pc != got.pc {
            mismatched_registers.push("pc".into());
        }
        if exp.flags != got.flags {
            mismatched_registers.push("flags".into());
        }
    }
    let mismatched_outputs =
        final_outputs.iter().filter(|(a, v)| result.output_values.get(a) != Some(v)).map(|(&a, _)| a).collect();
    Ok(FidelityReport {
        loop_id: lp.id,
        status: result.status,
        registers_compared: expected.is_some(),
        mismatched_registers,
        outputs_compared: outputs.len(),
        mismatched_outputs,
    })
}
