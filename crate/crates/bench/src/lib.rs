//! Shared inputs for the criterion benches.

use avaloop_core::corpus::{default_manifest_path, load_truth, ProgramRun};
use avaloop_core::{
    build_snapshot, detect_loops, identify_io, partition_blocks, IoSet, LoopInstance, PointerFilter, Snapshot,
};

/// A traced corpus program with its first detected loop prepared for replay.
pub struct Prepared {
    pub run: ProgramRun,
    pub lp: LoopInstance,
    pub snap: Snapshot,
    pub io: IoSet,
}

/// # Panics
/// If `program` is not in the shipped corpus or has no loop.
pub fn prepare(program: &str) -> Prepared {
    let truth = load_truth(&default_manifest_path())
        .expect("shipped manifest loads")
        .into_iter()
        .find(|t| t.program == program)
        .expect("program in corpus");
    let run = truth.run(&[]).expect("program runs");
    let lp = detect_loops(&partition_blocks(&run.trace)).into_iter().next().expect("a loop");
    let snap = build_snapshot(&lp, &run.trace).expect("snapshot");
    let io = identify_io(&lp, &run.trace, PointerFilter::Paper);
    Prepared { run, lp, snap, io }
}
