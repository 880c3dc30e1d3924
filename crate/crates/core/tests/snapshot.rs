use std::collections::BTreeMap;

use avaloop_core::corpus::{default_manifest_path, load_truth, TruthMap};
use avaloop_core::io::identify_io;
use avaloop_core::snapshot::{fidelity, SnapshotError};
use avaloop_core::{
    assemble, build_snapshot, detect_loops, partition_blocks, replay, run_and_trace, seeded_rng, LoopInstance,
    PointerFilter, ReplayStatus, TraceFile,
};
use avaloop_oracles::{words_le, xtea_encrypt};

fn trace_of(src: &str) -> TraceFile {
    let run = run_and_trace(&assemble(src).unwrap(), &BTreeMap::new(), 100_000).unwrap();
    assert!(!run.truncated && run.trap.is_none());
    TraceFile::new(run.records, run.section_dump)
}

fn only_loop(trace: &TraceFile) -> LoopInstance {
    let loops = detect_loops(&partition_blocks(trace));
    assert_eq!(loops.len(), 1, "{loops:?}");
    loops.into_iter().next().unwrap()
}

fn truth(name: &str) -> TruthMap {
    load_truth(&default_manifest_path()).unwrap().into_iter().find(|t| t.program == name).unwrap()
}

const FROM_START: &str = "
.data
buf: .word 7
.text
top:
    add  r1, r1, 1
    cmp  r1, 5
head:
    jnz  top
    halt
";

#[test]
fn loop_at_trace_start_sees_the_section_dump() {
    let trace = trace_of(FROM_START);
    let lp = only_loop(&trace);
    assert_eq!(lp.trace_span.0, 0);
    let snap = build_snapshot(&lp, &trace).unwrap();
    let dump_len: usize = trace.section_dump.sections.iter().map(|s| s.bytes.len()).sum();
    assert_eq!(snap.memory.mapped_len(), dump_len);
    for a in snap.memory.addresses() {
        assert_eq!(snap.memory.read_byte(a), trace.section_dump.read_byte(a), "{a:#x}");
    }
    assert_eq!(snap.registers, trace.records[0].regs_before);
}

const PRIOR_WRITE: &str = "
.data
buf:   .word 0
count: .word 3
.text
    li   r1, buf
    li   r2, 0xab
    st8  [r1+1], r2
    li   r3, 0
    jmp  test
body:
    ld8  r4, [r1+1]
    add  r4, r4, 1
    st8  [r1+1], r4
    add  r3, r3, 1
test:
    ld32 r5, [r1+4]
    cmp  r3, r5
head:
    jnz  body
    halt
";

#[test]
fn prior_writes_are_applied() {
    let trace = trace_of(PRIOR_WRITE);
    let lp = only_loop(&trace);
    let snap = build_snapshot(&lp, &trace).unwrap();
    let buf = trace.section_dump.section(".data").unwrap().base;
    assert_eq!(snap.memory.read_byte(buf + 1), Some(0xab));
    assert_eq!(trace.section_dump.read_byte(buf + 1), Some(0));
    assert_eq!(snap.registers, trace.records[lp.trace_span.0].regs_before);
    for r in &trace.records[lp.trace_span.0..=lp.trace_span.1] {
        for m in r.reads.iter().chain(&r.writes) {
            assert!(m.bytes().all(|(a, _)| snap.memory.is_mapped(a)));
        }
    }
}

#[test]
fn corrupted_loop_bound_exhausts_the_budget() {
    let trace = trace_of(PRIOR_WRITE);
    let lp = only_loop(&trace);
    let snap = build_snapshot(&lp, &trace).unwrap();
    let count = trace.section_dump.section(".data").unwrap().base + 4;
    let overrides = BTreeMap::from([(count, 0xff), (count + 3, 0x7f)]);
    let r = replay(&snap, &overrides, &[], snap.default_max_steps()).unwrap();
    assert_eq!(r.status, ReplayStatus::StepBudgetExhausted);
    assert_eq!(r.steps_executed, snap.default_max_steps());
    let ok = replay(&snap, &BTreeMap::new(), &[], snap.default_max_steps()).unwrap();
    assert_eq!(ok.status, ReplayStatus::Completed);
}

#[test]
fn unmapped_override_is_rejected() {
    let trace = trace_of(PRIOR_WRITE);
    let snap = build_snapshot(&only_loop(&trace), &trace).unwrap();
    let err = replay(&snap, &BTreeMap::from([(0xdead_0000, 1)]), &[], 10).unwrap_err();
    assert_eq!(err, SnapshotError::UnmappedOverride(0xdead_0000));
}

const ESCAPE: &str = "
.data
data: .byte 1, 2, 3, 4
ptr:  .word data
.text
    li   r1, data
    li   r3, 0
    jmp  test
body:
    add  r6, r1, r3
    ld8  r4, [r6]
    cmp  r4, 0xff
    jz   escape
    ld32 r5, [r1+4]
    ld8  r5, [r5]
    add  r3, r3, 1
test:
    cmp  r3, 4
head:
    jnz  body
    halt
escape:
    halt
";

#[test]
fn leaving_through_an_unseen_edge_is_divergent() {
    let trace = trace_of(ESCAPE);
    let lp = only_loop(&trace);
    let snap = build_snapshot(&lp, &trace).unwrap();
    let data = trace.section_dump.section(".data").unwrap().base;
    let r = replay(&snap, &BTreeMap::from([(data + 2, 0xff)]), &[], snap.default_max_steps()).unwrap();
    assert_eq!(r.status, ReplayStatus::DivergentExit);
    let exit_pc = trace.records[lp.trace_span.1 + 1].address;
    assert!(snap.loop_exit_set.contains(&exit_pc));
}

#[test]
fn unmapped_pointer_traps() {
    let trace = trace_of(ESCAPE);
    let lp = only_loop(&trace);
    let snap = build_snapshot(&lp, &trace).unwrap();
    let ptr = trace.section_dump.section(".data").unwrap().base + 4;
    let overrides = BTreeMap::from([(ptr + 3, 0xf0)]);
    let r = replay(&snap, &overrides, &[], snap.default_max_steps()).unwrap();
    assert_eq!(r.status, ReplayStatus::Trap);
    assert!(r.trap.is_some());
}

#[test]
fn replay_leaves_the_snapshot_untouched() {
    let trace = trace_of(PRIOR_WRITE);
    let snap = build_snapshot(&only_loop(&trace), &trace).unwrap();
    let before: Vec<_> = snap.memory.addresses().map(|a| snap.memory.read_byte(a)).collect();
    let buf = trace.section_dump.section(".data").unwrap().base;
    let outputs = [buf + 1];
    let a = replay(&snap, &BTreeMap::from([(buf + 1, 9)]), &outputs, 1000).unwrap();
    let b = replay(&snap, &BTreeMap::from([(buf + 1, 9)]), &outputs, 1000).unwrap();
    assert_eq!(a.output_values, b.output_values);
    assert_eq!(a.output_values[&(buf + 1)], 12);
    let after: Vec<_> = snap.memory.addresses().map(|a| snap.memory.read_byte(a)).collect();
    assert_eq!(before, after);
    let plain = replay(&snap, &BTreeMap::new(), &outputs, 1000).unwrap();
    assert_eq!(plain.output_values[&(buf + 1)], 0xae);
}

#[test]
fn tea_replay_without_overrides_matches_the_trace() {
    let m = truth("tea");
    let run = m.run(&[]).unwrap();
    let lp = only_loop(&run.trace);
    let snap = build_snapshot(&lp, &run.trace).unwrap();
    let io = identify_io(&lp, &run.trace, PointerFilter::Paper);
    let rep = fidelity(&lp, &run.trace, &snap, &io.final_outputs).unwrap();
    assert!(rep.registers_compared);
    assert!(rep.consistent(), "{rep:?}");
    assert_eq!(rep.outputs_compared, 8);
}

#[test]
fn xtea_flipped_plaintext_bit_matches_the_oracle() {
    let m = truth("xtea");
    let run = m.run(&[]).unwrap();
    let lp = only_loop(&run.trace);
    let snap = build_snapshot(&lp, &run.trace).unwrap();
    let ct = m.buffer("ciphertext").unwrap().range();
    let outputs: Vec<u32> = ct.clone().collect();
    let key = m.read_buffer(&run.final_state, "key").unwrap();
    let pt_at = |a: u32| snap.memory.read_byte(a).unwrap();
    let pt: Vec<u8> = m.buffer("plaintext").unwrap().range().map(pt_at).collect();
    let base = replay(&snap, &BTreeMap::new(), &outputs, snap.default_max_steps()).unwrap();
    for bit in [0usize, 13, 31, 32, 63] {
        let mut flipped = pt.clone();
        flipped[bit / 8] ^= 1 << (bit % 8);
        let addr = ct.start + (bit / 8) as u32;
        let r = replay(&snap, &BTreeMap::from([(addr, flipped[bit / 8])]), &outputs, snap.default_max_steps()).unwrap();
        assert_eq!(r.status, ReplayStatus::Completed);
        let got: Vec<u8> = r.output_values.values().copied().collect();
        let w = words_le(&flipped);
        let k = words_le(&key);
        let want = xtea_encrypt([w[0], w[1]], [k[0], k[1], k[2], k[3]], 32);
        assert_eq!(words_le(&got), want.to_vec());
        let diff: u32 = got.iter().zip(base.output_values.values()).map(|(x, y)| (x ^ y).count_ones()).sum();
        assert!((16..=48).contains(&diff), "bit {bit}: {diff}");
    }
}

#[test]
fn every_corpus_loop_replays_faithfully() {
    let mut instances = 0;
    for m in load_truth(&default_manifest_path()).unwrap() {
        let run = m.run(&[]).unwrap();
        for lp in detect_loops(&partition_blocks(&run.trace)) {
            let snap = build_snapshot(&lp, &run.trace).unwrap();
            let io = identify_io(&lp, &run.trace, PointerFilter::Paper);
            let rep = fidelity(&lp, &run.trace, &snap, &io.final_outputs).unwrap();
            assert!(rep.consistent() && rep.registers_compared, "{} loop {}: {rep:?}", m.program, lp.id);
            instances += 1;
        }
    }
    assert!(instances >= 24, "{instances}");
}

#[test]
fn randomized_snapshot_changes_the_requested_fraction() {
    let m = truth("aes");
    let run = m.run(&[]).unwrap();
    let lp = only_loop(&run.trace);
    let snap = build_snapshot(&lp, &run.trace).unwrap();
    let noisy = snap.randomized(0.05, &mut seeded_rng(1));
    let total = snap.memory.mapped_len();
    let changed = snap.memory.addresses().filter(|&a| snap.memory.read_byte(a) != noisy.memory.read_byte(a)).count();
    let drawn = (total as f64 * 0.05).round() as usize;
    // A redrawn byte keeps its value with probability 1/256.
    assert!(changed <= drawn && changed * 100 >= drawn * 95, "{changed} of {drawn}");
    let again = snap.randomized(0.05, &mut seeded_rng(1));
    assert!(snap.memory.addresses().all(|a| again.memory.read_byte(a) == noisy.memory.read_byte(a)));
}
