//! End-to-end analysis of a trace: loop detection, library filtering,
//! input/output identification, snapshot construction and the avalanche
//! test, with outer loops skipped once an inner loop is found positive.

use std::ops::Range;

use serde::Serialize;

use crate::avalanche::{analyze_loop, hash_loop_filter, AvalancheConfig, AvalancheReport, HashFilter};
use crate::io::{identify_io, IoSummary, PointerFilter};
use crate::loops::{detect_loops_detailed, is_library_loop, partition_blocks, FilterPolicy, LoopInstance};
use crate::snapshot::{build_snapshot, fidelity, FidelityReport, SnapshotError};
use crate::stats::seeded_rng;
use crate::taint::{coverage, propagate_with, ripple_verdict, AddressPolicy, TaintSource};
use crate::trace::TraceFile;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable consulted for the default seed.
pub const SEED_ENV: &str = "AVALOOP_SEED";
pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub n_trials: usize,
    pub theta: usize,
    pub p_threshold: f64,
    pub seed: u64,
    pub pointer_filter: PointerFilter,
    pub hash_filter_threshold: f64,
    pub known_library_globs: Vec<String>,
    pub max_step_multiplier: u64,
    pub band_fraction: f64,
    pub min_retained: usize,
}

impl AnalysisConfig {
    /// Every parameter at its default, with the given seed.
    pub fn paper_defaults(seed: u64) -> Self {
        let a = AvalancheConfig::default();
        Self {
            n_trials: a.n_trials,
            theta: a.theta,
            p_threshold: a.p_threshold,
            seed,
            pointer_filter: PointerFilter::default(),
            hash_filter_threshold: a.hash_filter_threshold,
            known_library_globs: Vec::new(),
            max_step_multiplier: a.max_step_multiplier,
            band_fraction: a.band_fraction,
            min_retained: a.min_retained,
        }
    }

    pub fn avalanche(&self) -> AvalancheConfig {
        AvalancheConfig {
            n_trials: self.n_trials,
            theta: self.theta,
            p_threshold: self.p_threshold,
            min_retained: self.min_retained,
            band_fraction: self.band_fraction,
            hash_filter_threshold: self.hash_filter_threshold,
            max_step_multiplier: self.max_step_multiplier,
        }
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self::paper_defaults(DEFAULT_SEED)
    }
}

/// Seed from [`SEED_ENV`] when set and parseable, else [`DEFAULT_SEED`].
pub fn seed_from_env() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|v| parse_seed(&v)).unwrap_or(DEFAULT_SEED)
}

/// Decimal or `0x`-prefixed hexadecimal.
pub fn parse_seed(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SkipReason {
    KnownLibrary,
    ContainsEncryptionLoop { inner: usize },
    NoInputs,
    NoOutputs,
    Snapshot { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopReport {
    pub id: usize,
    pub head_address: u32,
    pub span: (usize, usize),
    pub iterations: usize,
    pub frame_depth: usize,
    /// End addresses of the head and body blocks.
    pub blocks: Vec<u32>,
    pub io_summary: Option<IoSummary>,
    pub hash_filter: HashFilter,
    pub avalanche: Option<AvalancheReport>,
    pub skipped_reason: Option<SkipReason>,
    pub unanalyzable: bool,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    pub schema_version: u32,
    pub config: AnalysisConfig,
    pub trace_records: usize,
    pub frame_resets: usize,
    pub loops: Vec<LoopReport>,
}

impl AnalysisReport {
    pub fn positives(&self) -> impl Iterator<Item = &LoopReport> {
        self.loops.iter().filter(|l| l.verdict)
    }
}

/// Loop indices ordered so every loop comes after the loops nested inside it.
fn inner_first(loops: &[LoopInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loops.len()).collect();
    order.sort_by_key(|&i| (loops[i].span_len(), loops[i].trace_span.0, i));
    order
}

/// Runs the full pipeline on `trace`.
///
/// # Errors
/// If a known-library glob does not compile.
pub fn analyze(trace: &TraceFile, config: &AnalysisConfig) -> Result<AnalysisReport, globset::Error> {
    let policy = FilterPolicy::new(config.known_library_globs.iter().cloned())?;
    let blocks = partition_blocks(trace);
    let detection = detect_loops_detailed(&blocks);
    let loops = detection.loops;
    let cfg = config.avalanche();
    let mut reports: Vec<Option<LoopReport>> = vec![None; loops.len()];
    for idx in inner_first(&loops) {
        let lp = &loops[idx];
        let mut blocks_out: Vec<u32> = std::iter::once(lp.head)
            .chain(lp.body_blocks.iter().copied())
            .map(|b| blocks.blocks[b].end_address)
            .collect();
        blocks_out.sort_unstable();
        blocks_out.dedup();
        let hash_filter = hash_loop_filter(lp, trace, cfg.hash_filter_threshold);
        let mut report = LoopReport {
            id: lp.id,
            head_address: lp.head_end_address,
            span: lp.trace_span,
            iterations: lp.iterations(),
            frame_depth: lp.frame_depth,
            blocks: blocks_out,
            io_summary: None,
            hash_filter,
            avalanche: None,
            skipped_reason: None,
            unanalyzable: false,
            verdict: false,
        };
        let positive_inner = loops
            .iter()
            .enumerate()
            .find(|(j, inner)| lp.strictly_contains(inner) && reports[*j].as_ref().is_some_and(|r| r.verdict))
            .map(|(j, _)| loops[j].id);
        if is_library_loop(lp, trace, &trace.section_dump, &policy) {
            report.skipped_reason = Some(SkipReason::KnownLibrary);
        } else if let Some(inner) = positive_inner {
            report.skipped_reason = Some(SkipReason::ContainsEncryptionLoop { inner });
        } else {
            let io = identify_io(lp, trace, config.pointer_filter);
            report.io_summary = Some(io.summary());
            if io.inputs.is_empty() {
                report.skipped_reason = Some(SkipReason::NoInputs);
            } else if io.outputs.is_empty() {
                report.skipped_reason = Some(SkipReason::NoOutputs);
            } else {
                match build_snapshot(lp, trace) {
                    Err(e) => report.skipped_reason = Some(SkipReason::Snapshot { message: e.to_string() }),
                    Ok(snap) => {
                        let ava = analyze_loop(lp, trace, &snap, &io, &cfg, config.seed);
                        report.unanalyzable = ava.unanalyzable;
                        report.verdict = ava.verdict;
                        report.avalanche = Some(ava);
                    }
                }
            }
        }
        log::debug!("loop {} at {:#010x}: verdict {}", lp.id, lp.head_end_address, report.verdict);
        reports[idx] = Some(report);
    }
    let mut loops_out: Vec<LoopReport> = reports.into_iter().map(|r| r.expect("every loop visited")).collect();
    loops_out.sort_by_key(|r| (r.span.0, std::cmp::Reverse(r.span.1), r.id));
    Ok(AnalysisReport {
        tool_version: TOOL_VERSION.into(),
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        trace_records: trace.records.len(),
        frame_resets: detection.frame_resets.len(),
        loops: loops_out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceCoverage {
    pub name: String,
    /// Fraction of output bytes carrying this source's label.
    pub coverage: f64,
    pub ripple: bool,
}

/// One loop's taint result next to its avalanche result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RippleRow {
    pub loop_id: usize,
    pub head_address: u32,
    pub span: (usize, usize),
    pub sources: Vec<SourceCoverage>,
    /// Every source ripples into the whole output range.
    pub ripple_verdict: bool,
    pub avalanche_verdict: bool,
    pub avalanche_bit_count: Option<usize>,
    pub skipped_reason: Option<SkipReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RippleReport {
    pub tool_version: String,
    pub schema_version: u32,
    pub address_policy: AddressPolicy,
    pub sources: Vec<TaintSource>,
    pub output: Range<u32>,
    pub rows: Vec<RippleRow>,
    pub analysis: AnalysisReport,
}

/// Taint from `sources` into `output` over each analyzed loop's span,
/// alongside that loop's avalanche verdict.
pub fn ripple_comparison(
    trace: &TraceFile,
    analysis: AnalysisReport,
    sources: &[TaintSource],
    output: Range<u32>,
    policy: AddressPolicy,
) -> RippleReport {
    let rows = analysis
        .loops
        .iter()
        .map(|l| {
            let st = propagate_with(&trace.records[l.span.0..=l.span.1], sources, policy);
            let cov: Vec<SourceCoverage> = sources
                .iter()
                .enumerate()
                .map(|(label, s)| SourceCoverage {
                    name: s.name.clone(),
                    coverage: coverage(&st, output.clone(), label),
                    ripple: ripple_verdict(&st, output.clone(), label),
                })
                .collect();
            RippleRow {
                loop_id: l.id,
                head_address: l.head_address,
                span: l.span,
                ripple_verdict: !cov.is_empty() && cov.iter().all(|c| c.ripple),
                sources: cov,
                avalanche_verdict: l.verdict,
                avalanche_bit_count: l.avalanche.as_ref().map(|a| a.avalanche_bit_count),
                skipped_reason: l.skipped_reason.clone(),
            }
        })
        .collect();
    RippleReport {
        tool_version: TOOL_VERSION.into(),
        schema_version: SCHEMA_VERSION,
        address_policy: policy,
        sources: sources.to_vec(),
        output,
        rows,
        analysis,
    }
}

/// Snapshot perturbation applied before a fidelity replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Corruption {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRun {
    pub tool_version: String,
    pub schema_version: u32,
    pub corruption: Option<Corruption>,
    pub loops: Vec<FidelityReport>,
}

impl FidelityRun {
    pub fn consistent(&self) -> bool {
        self.loops.iter().all(FidelityReport::consistent)
    }
}

/// Override-free replay of every detected loop, compared against the trace.
pub fn fidelity_check(
    trace: &TraceFile,
    pointer_filter: PointerFilter,
    corruption: Option<Corruption>,
) -> Result<FidelityRun, SnapshotError> {
    let loops = detect_loops_detailed(&partition_blocks(trace)).loops;
    let reports = loops
        .iter()
        .map(|lp| {
            let mut snap = build_snapshot(lp, trace)?;
            if let Some(c) = corruption {
                snap = snap.randomized(c.fraction, &mut seeded_rng(c.seed ^ lp.trace_span.0 as u64));
            }
            let io = identify_io(lp, trace, pointer_filter);
            fidelity(lp, trace, &snap, &io.final_outputs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FidelityRun { tool_version: TOOL_VERSION.into(), schema_version: SCHEMA_VERSION, corruption, loops: reports })
}
