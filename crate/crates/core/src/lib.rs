//! Encryption-loop detection in execution traces by measuring the avalanche
//! effect directly: loops are found in a trace, their input and output bytes
//! are identified from memory traffic, and each loop body is replayed from a
//! reconstructed snapshot with bit-flipped inputs. A normality test on the
//! per-bit flip counts decides whether the loop diffuses like a cipher.

pub mod asm;
pub mod avalanche;
mod codec;
pub mod corpus;
pub mod image;
pub mod io;
pub mod isa;
pub mod loops;
pub mod machine;
pub mod pipeline;
pub mod snapshot;
pub mod stats;
pub mod taint;
pub mod trace;

pub use asm::{assemble, assemble_with_symbols, disassemble, Assembly};
pub use avalanche::{AvalancheConfig, AvalancheReport, HashFilter};
pub use codec::CodecError;
pub use image::{ProgramImage, Section};
pub use io::{identify_io, IoSet, PointerFilter, RemovalReason};
pub use loops::{detect_loops, partition_blocks, BasicBlock, BlockTrace, FilterPolicy, LoopInstance};
pub use machine::{run_and_trace, TraceRun};
pub use pipeline::{analyze, AnalysisConfig, AnalysisReport, LoopReport};
pub use snapshot::{build_snapshot, replay, ReplayResult, ReplayStatus, Snapshot};
pub use stats::{iqr_bounds, seeded_rng, shapiro_wilk, NormalityResult};
pub use trace::{MemAccess, RegisterFile, TraceFile, TraceRecord};
