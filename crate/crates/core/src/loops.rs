//! Loop detection over the dynamic basic-block sequence of a trace.
//!
//! The trace is cut after every branching record (conditional branch, jump,
//! call, ret). Occurrences that end at the same instruction are the same block
//! regardless of where they were entered, so a loop whose iterations take
//! different arms still revisits one head block.
//!
//! Detection walks the block sequence with a stack of call frames. A block that
//! is already in the current frame is a loop head; the frame is unwound back
//! to it. A call block is recorded in the caller's frame and then seeds the
//! callee's frame, so callee blocks never pollute the caller. A ret pops the
//! callee frame; a ret with no caller resets to a fresh root frame.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::Serialize;

use crate::image::ProgramImage;
use crate::isa::ControlKind;
use crate::trace::TraceFile;

pub type BlockId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Address of the terminating record.
    pub end_address: u32,
    pub terminator: Terminator,
    pub start_addresses: BTreeSet<u32>,
    /// Inclusive record ranges, one per occurrence, in execution order.
    pub record_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminator {
    Branch,
    Jump,
    Call,
    Ret,
    /// The block was cut by the end of the trace.
    End,
}

/// One dynamic execution of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Occurrence {
    pub block: BlockId,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockTrace {
    /// Distinct blocks, indexed by id in order of first appearance.
    pub blocks: Vec<BasicBlock>,
    pub sequence: Vec<Occurrence>,
}

fn terminator_of(kind: Option<ControlKind>) -> Option<Terminator> {
    match kind? {
        ControlKind::Conditional => Some(Terminator::Branch),
        ControlKind::Jump => Some(Terminator::Jump),
        ControlKind::Call => Some(Terminator::Call),
        ControlKind::Ret => Some(Terminator::Ret),
        ControlKind::None | ControlKind::Halt => None,
    }
}

/// Cuts the trace after each branching record. Records whose encoding does not
/// decode are treated as straight-line code.
pub fn partition_blocks(trace: &TraceFile) -> BlockTrace {
    let mut out = BlockTrace::default();
    let mut by_end: HashMap<u32, BlockId> = HashMap::new();
    let n = trace.records.len();
    let mut start = 0;
    for (i, rec) in trace.records.iter().enumerate() {
        let term = terminator_of(rec.decode().map(|insn| insn.control_kind()));
        let term = match term {
            Some(t) => t,
            None if i + 1 == n => Terminator::End,
            None => continue,
        };
        let id = *by_end.entry(rec.address).or_insert_with(|| {
            out.blocks.push(BasicBlock {
                id: out.blocks.len(),
                end_address: rec.address,
                terminator: term,
                start_addresses: BTreeSet::new(),
                record_spans: Vec::new(),
            });
            out.blocks.len() - 1
        });
        let block = &mut out.blocks[id];
        block.start_addresses.insert(trace.records[start].address);
        block.record_spans.push((start, i));
        out.sequence.push(Occurrence { block: id, first: start, last: i });
        start = i + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopInstance {
    /// Position in the sorted detection result.
    pub id: usize,
    pub head: BlockId,
    pub head_end_address: u32,
    pub body_blocks: BTreeSet<BlockId>,
    /// Inclusive record range.
    pub trace_span: (usize, usize),
    /// Record index of every entry into the head block.
    pub iteration_boundaries: Vec<usize>,
    /// Number of frames below the loop's frame when it was detected.
    pub frame_depth: usize,
}

impl LoopInstance {
    pub fn iterations(&self) -> usize {
        self.iteration_boundaries.len()
    }

    pub fn span_len(&self) -> usize {
        self.trace_span.1 - self.trace_span.0 + 1
    }

    /// Record range of iteration `k`; the last one runs to the span end.
    pub fn iteration_range(&self, k: usize) -> (usize, usize) {
        let start = self.iteration_boundaries[k];
        let end = match self.iteration_boundaries.get(k + 1) {
            Some(&next) => next - 1,
            None => self.trace_span.1,
        };
        (start, end)
    }

    /// Iteration index containing record `index`, if it lies in the span.
    pub fn iteration_of(&self, index: usize) -> Option<usize> {
        if index < self.trace_span.0 || index > self.trace_span.1 {
            return None;
        }
        Some(self.iteration_boundaries.partition_point(|&b| b <= index).saturating_sub(1))
    }

    /// True when `inner`'s span lies inside this one and the spans differ.
    pub fn strictly_contains(&self, inner: &LoopInstance) -> bool {
        self.trace_span.0 <= inner.trace_span.0
            && inner.trace_span.1 <= self.trace_span.1
            && self.trace_span != inner.trace_span
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Detection {
    pub loops: Vec<LoopInstance>,
    /// Sequence positions of `ret` blocks that found no caller frame.
    pub frame_resets: Vec<usize>,
}

struct OpenLoop {
    head: BlockId,
    /// Sequence positions of head entries.
    entries: Vec<usize>,
    body: BTreeSet<BlockId>,
    depth: usize,
}

struct Frame {
    /// (block, sequence position at push)
    stack: Vec<(BlockId, usize)>,
    members: HashMap<BlockId, usize>,
    open: BTreeMap<BlockId, OpenLoop>,
}

impl Frame {
    fn new() -> Self {
        Self { stack: Vec::new(), members: HashMap::new(), open: BTreeMap::new() }
    }

    fn push(&mut self, block: BlockId, pos: usize) {
        self.stack.push((block, pos));
        self.members.insert(block, self.stack.len() - 1);
    }
}

struct Detector<'a> {
    blocks: &'a BlockTrace,
    frames: Vec<Frame>,
    /// Frame depth at which each occurrence executed.
    depth_of: Vec<usize>,
    closed: Vec<OpenLoop>,
    resets: Vec<usize>,
}

impl Detector<'_> {
    fn depth(&self) -> usize {
        self.frames.len() - 1
    }

    /// Membership test and push in the top frame.
    fn visit(&mut self, block: BlockId, pos: usize) {
        let depth = self.depth();
        let frame = self.frames.last_mut().expect("root frame");
        let Some(&at) = frame.members.get(&block) else {
            frame.push(block, pos);
            return;
        };
        let popped: Vec<(BlockId, usize)> = frame.stack.drain(at + 1..).collect();
        for &(b, _) in &popped {
            frame.members.remove(&b);
        }
        let head_pushed_at = frame.stack[at].1;
        let lp = frame.open.entry(block).or_insert_with(|| OpenLoop {
            head: block,
            entries: vec![head_pushed_at],
            body: BTreeSet::from([block]),
            depth,
        });
        lp.entries.push(pos);
        lp.body.extend(popped.iter().map(|&(b, _)| b));
        for (b, _) in popped {
            if let Some(done) = frame.open.remove(&b) {
                // Unwound inner loop: its blocks belong to this body too.
                let lp = frame.open.get_mut(&block).expect("just inserted");
                lp.body.extend(done.body.iter().copied());
                self.closed.push(done);
            }
        }
    }

    fn pop_frame(&mut self, pos: usize) {
        let frame = self.frames.pop().expect("nonempty");
        self.closed.extend(frame.open.into_values());
        if self.frames.is_empty() {
            log::warn!("ret without a caller frame at block position {pos}; resetting frame stack");
            self.resets.push(pos);
            self.frames.push(Frame::new());
        }
    }

    fn run(mut self) -> Detection {
        for (pos, occ) in self.blocks.sequence.iter().enumerate() {
            match self.blocks.blocks[occ.block].terminator {
                Terminator::Ret => {
                    self.depth_of.push(self.depth());
                    self.pop_frame(pos);
                }
                Terminator::Call => {
                    self.depth_of.push(self.depth());
                    self.visit(occ.block, pos);
                    let mut callee = Frame::new();
                    callee.push(occ.block, pos);
                    self.frames.push(callee);
                }
                _ => {
                    self.depth_of.push(self.depth());
                    self.visit(occ.block, pos);
                }
            }
        }
        while let Some(frame) = self.frames.pop() {
            self.closed.extend(frame.open.into_values());
        }
        let mut loops: Vec<LoopInstance> = self.closed.iter().map(|lp| self.finish(lp)).collect();
        loops.sort_by(|a, b| {
            a.trace_span.0.cmp(&b.trace_span.0).then(b.trace_span.1.cmp(&a.trace_span.1)).then(a.head.cmp(&b.head))
        });
        for (i, lp) in loops.iter_mut().enumerate() {
            lp.id = i;
        }
        Detection { loops, frame_resets: self.resets }
    }

    /// The span runs from the first head entry through the last iteration:
    /// past the last head entry while blocks are body blocks or execute in
    /// deeper frames.
    fn finish(&self, lp: &OpenLoop) -> LoopInstance {
        let seq = &self.blocks.sequence;
        let last_entry = *lp.entries.last().expect("at least two entries");
        let mut end = last_entry;
        for pos in last_entry + 1..seq.len() {
            if self.depth_of[pos] > lp.depth || lp.body.contains(&seq[pos].block) {
                end = pos;
            } else {
                break;
            }
        }
        let head = &self.blocks.blocks[lp.head];
        LoopInstance {
            id: 0,
            head: lp.head,
            head_end_address: head.end_address,
            body_blocks: lp.body.clone(),
            trace_span: (seq[lp.entries[0]].first, seq[end].last),
            iteration_boundaries: lp.entries.iter().map(|&p| seq[p].first).collect(),
            frame_depth: lp.depth,
        }
    }
}

/// Runs frame-stack loop detection and also reports frame resets.
pub fn detect_loops_detailed(blocks: &BlockTrace) -> Detection {
    Detector {
        blocks,
        frames: vec![Frame::new()],
        depth_of: Vec::with_capacity(blocks.sequence.len()),
        closed: Vec::new(),
        resets: Vec::new(),
    }
    .run()
}

/// Loop instances sorted by span start (outer before inner on ties).
pub fn detect_loops(blocks: &BlockTrace) -> Vec<LoopInstance> {
    detect_loops_detailed(blocks).loops
}

/// Section-name globs for code that is never analyzed.
#[derive(Debug, Clone, Default)]
pub struct FilterPolicy {
    patterns: Vec<String>,
    set: GlobSet,
}

impl FilterPolicy {
    pub fn new<I, S>(patterns: I) -> Result<Self, globset::Error>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let patterns: Vec<String> = patterns.into_iter().map(Into::into).collect();
        let mut builder = GlobSetBuilder::new();
        for p in &patterns {
            builder.add(Glob::new(p)?);
        }
        Ok(Self { patterns, set: builder.build()? })
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn matches_section(&self, name: &str) -> bool {
        self.set.is_match(name)
    }
}

/// True when every instruction the loop executed lies in a known-library section.
pub fn is_library_loop(lp: &LoopInstance, trace: &TraceFile, image: &ProgramImage, policy: &FilterPolicy) -> bool {
    !policy.is_empty()
        && trace.records[lp.trace_span.0..=lp.trace_span.1]
            .iter()
            .all(|r| image.section_at(r.address).is_some_and(|s| policy.matches_section(&s.name)))
}

/// Drops loops whose every executed instruction lies in a known-library section.
pub fn filter_loops(
    loops: Vec<LoopInstance>,
    trace: &TraceFile,
    image: &ProgramImage,
    policy: &FilterPolicy,
) -> Vec<LoopInstance> {
    loops.into_iter().filter(|lp| !is_library_loop(lp, trace, image, policy)).collect()
}
