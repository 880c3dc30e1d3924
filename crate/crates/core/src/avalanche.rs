//! Avalanche-effect test for one loop.
//!
//! Each trial draws random values for the surviving input bytes, replays the
//! loop once as a baseline and once per input bit with that bit flipped. For
//! every input bit, output bits that flip too often or too seldom across the
//! trials are masked out, the per-trial flip counts over the remaining bits
//! are tested for normality, and the bit counts as an avalanche input bit if
//! normality is not rejected. The loop is positive when at least `theta`
//! input bits pass and the loop is not suppressed as hash-like.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::io::IoSet;
use crate::loops::LoopInstance;
use crate::snapshot::{replay, ReplayStatus, Snapshot, DEFAULT_STEP_MULTIPLIER};
use crate::stats::{seeded_rng, shapiro_wilk};
use crate::trace::TraceFile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AvalancheConfig {
    pub n_trials: usize,
    pub theta: usize,
    pub p_threshold: f64,
    /// Bits with fewer retained trials fail outright.
    pub min_retained: usize,
    /// Fraction of trials cut from each end of the flip-count band.
    pub band_fraction: f64,
    pub hash_filter_threshold: f64,
    pub max_step_multiplier: u64,
}

impl Default for AvalancheConfig {
    fn default() -> Self {
        Self {
            n_trials: 30,
            theta: 8,
            p_threshold: 0.05,
            min_retained: 20,
            band_fraction: 0.25,
            hash_filter_threshold: 5.0,
            max_step_multiplier: DEFAULT_STEP_MULTIPLIER,
        }
    }
}

/// Inclusive flip-count band for `n` retained trials.
pub fn flip_band(n: usize, fraction: f64) -> (usize, usize) {
    let q = (n as f64 * fraction).floor() as usize;
    (q, n - q.min(n))
}

/// Replay outputs for every trial. Output vectors hold one byte per output
/// address, in ascending address order; `None` marks a failed replay.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialMatrix {
    pub n_trials: usize,
    pub input_addresses: Vec<u32>,
    pub output_addresses: Vec<u32>,
    /// Randomized input bytes of each trial.
    pub inputs: Vec<Vec<u8>>,
    pub baseline_outputs: Vec<Option<Vec<u8>>>,
    /// `[trial][input bit]`.
    pub flipped_outputs: Vec<Vec<Option<Vec<u8>>>>,
    pub baseline_failures: usize,
}

impl TrialMatrix {
    pub fn input_bit_count(&self) -> usize {
        self.input_addresses.len() * 8
    }

    pub fn output_bit_count(&self) -> usize {
        self.output_addresses.len() * 8
    }

    /// Trials where input bit `i` has both a baseline and a flipped result.
    pub fn retained(&self, i: usize) -> Vec<usize> {
        (0..self.n_trials)
            .filter(|&n| self.baseline_outputs[n].is_some() && self.flipped_outputs[n][i].is_some())
            .collect()
    }

    pub fn discarded_trials(&self, i: usize) -> Vec<usize> {
        let kept = self.retained(i);
        (0..self.n_trials).filter(|n| !kept.contains(n)).collect()
    }

    pub fn unanalyzable(&self) -> bool {
        self.n_trials > 0 && self.baseline_failures * 2 > self.n_trials
    }
}

fn bit(bytes: &[u8], k: usize) -> bool {
    bytes[k / 8] >> (k % 8) & 1 == 1
}

fn overrides(addrs: &[u32], values: &[u8]) -> BTreeMap<u32, u8> {
    addrs.iter().copied().zip(values.iter().copied()).collect()
}

/// Runs the baseline and flipped replays for `n_trials` random input draws.
pub fn run_trials(snap: &Snapshot, io: &IoSet, n_trials: usize, seed: u64, max_steps: u64) -> TrialMatrix {
    let input_addresses: Vec<u32> = io.inputs.iter().copied().collect();
    let output_addresses: Vec<u32> = io.outputs.iter().copied().collect();
    if input_addresses.is_empty() {
        return TrialMatrix { n_trials: 0, input_addresses, output_addresses, ..TrialMatrix::default() };
    }
    let mut rng = seeded_rng(seed);
    let inputs: Vec<Vec<u8>> =
        (0..n_trials).map(|_| (0..input_addresses.len()).map(|_| rng.random()).collect()).collect();
    let n_bits = input_addresses.len() * 8;
    let run = |values: &[u8]| -> Option<Vec<u8>> {
        let r = replay(snap, &overrides(&input_addresses, values), &output_addresses, max_steps)
            .expect("input addresses come from the trace and are mapped");
        (r.status == ReplayStatus::Completed).then(|| r.output_values.into_values().collect())
    };
    let baseline_outputs: Vec<Option<Vec<u8>>> = inputs.par_iter().map(|x| run(x)).collect();
    let flipped_outputs: Vec<Vec<Option<Vec<u8>>>> = (0..n_trials)
        .into_par_iter()
        .map(|n| {
            if baseline_outputs[n].is_none() {
                return vec![None; n_bits];
            }
            (0..n_bits)
                .into_par_iter()
                .map(|k| {
                    let mut x = inputs[n].clone();
                    x[k / 8] ^= 1 << (k % 8);
                    run(&x)
                })
                .collect()
        })
        .collect();
    let baseline_failures = baseline_outputs.iter().filter(|b| b.is_none()).count();
    TrialMatrix {
        n_trials,
        input_addresses,
        output_addresses,
        inputs,
        baseline_outputs,
        flipped_outputs,
        baseline_failures,
    }
}

/// Output bits whose flip count over `trials` lies inside the band.
pub fn ava_output_bits(m: &TrialMatrix, i: usize, trials: &[usize], fraction: f64) -> Vec<usize> {
    let (low, high) = flip_band(trials.len(), fraction);
    (0..m.output_bit_count())
        .filter(|&o| {
            let flips = trials
                .iter()
                .filter(|&&n| {
                    let base = m.baseline_outputs[n].as_deref().expect("retained");
                    let flip = m.flipped_outputs[n][i].as_deref().expect("retained");
                    bit(base, o) != bit(flip, o)
                })
                .count();
            (low..=high).contains(&flips)
        })
        .collect()
}

/// Hamming distance of two output vectors restricted to `mask`.
pub fn count_flipped(baseline: &[u8], flipped: &[u8], mask: &[usize]) -> u32 {
    mask.iter().filter(|&&o| bit(baseline, o) != bit(flipped, o)).count() as u32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputBitResult {
    pub address: u32,
    pub bit: u8,
    pub retained_trials: usize,
    pub mask_size: usize,
    pub samples: Vec<u32>,
    pub w_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub degenerate: bool,
    pub passed: bool,
    #[serde(skip)]
    pub mask: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HashFilter {
    pub and_or_per_iteration: f64,
    pub suppressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvalancheReport {
    pub loop_id: usize,
    pub input_bit_count: usize,
    pub output_bit_count: usize,
    pub n_trials: usize,
    pub baseline_failures: usize,
    pub unanalyzable: bool,
    pub per_input_bit: Vec<InputBitResult>,
    pub avalanche_bit_count: usize,
    pub theta: usize,
    pub p_threshold: f64,
    pub hash_filter: HashFilter,
    pub verdict: bool,
}

/// Per-bit normality decisions and the loop verdict.
pub fn decide_loop(loop_id: usize, m: &TrialMatrix, cfg: &AvalancheConfig, hash_filter: HashFilter) -> AvalancheReport {
    let unanalyzable = m.unanalyzable();
    let per_input_bit: Vec<InputBitResult> = if unanalyzable {
        Vec::new()
    } else {
        (0..m.input_bit_count()).into_par_iter().map(|i| decide_bit(m, i, cfg)).collect()
    };
    let avalanche_bit_count = per_input_bit.iter().filter(|b| b.passed).count();
    AvalancheReport {
        loop_id,
        input_bit_count: m.input_bit_count(),
        output_bit_count: m.output_bit_count(),
        n_trials: m.n_trials,
        baseline_failures: m.baseline_failures,
        unanalyzable,
        per_input_bit,
        avalanche_bit_count,
        theta: cfg.theta,
        p_threshold: cfg.p_threshold,
        hash_filter,
        verdict: !unanalyzable && avalanche_bit_count >= cfg.theta && !hash_filter.suppressed,
    }
}

fn decide_bit(m: &TrialMatrix, i: usize, cfg: &AvalancheConfig) -> InputBitResult {
    let trials = m.retained(i);
    let mut out = InputBitResult {
        address: m.input_addresses[i / 8],
        bit: (i % 8) as u8,
        retained_trials: trials.len(),
        mask_size: 0,
        samples: Vec::new(),
        w_statistic: None,
        p_value: None,
        degenerate: false,
        passed: false,
        mask: Vec::new(),
    };
    if trials.len() < cfg.min_retained.max(3) {
        return out;
    }
    let mask = ava_output_bits(m, i, &trials, cfg.band_fraction);
    out.samples = trials
        .iter()
        .map(|&n| {
            count_flipped(
                m.baseline_outputs[n].as_deref().expect("retained"),
                m.flipped_outputs[n][i].as_deref().expect("retained"),
                &mask,
            )
        })
        .collect();
    out.mask_size = mask.len();
    out.mask = mask;
    let values: Vec<f64> = out.samples.iter().map(|&c| f64::from(c)).collect();
    if let Ok(r) = shapiro_wilk(&values) {
        out.w_statistic = Some(r.w_statistic);
        out.p_value = Some(r.p_value);
        out.degenerate = r.degenerate;
        out.passed = !r.degenerate && r.p_value >= cfg.p_threshold;
    }
    out
}

/// Bitwise AND/OR instructions per iteration over the loop span.
pub fn hash_loop_filter(lp: &LoopInstance, trace: &TraceFile, threshold: f64) -> HashFilter {
    let count = trace.records[lp.trace_span.0..=lp.trace_span.1]
        .iter()
        .filter(|r| r.decode().is_some_and(|insn| insn.is_bitwise_and_or()))
        .count();
    let avg = count as f64 / lp.iterations().max(1) as f64;
    HashFilter { and_or_per_iteration: avg, suppressed: avg > threshold }
}

/// Seed for one loop, derived from the run seed and the loop's span start.
pub fn loop_seed(seed: u64, lp: &LoopInstance) -> u64 {
    let mut z = seed ^ (lp.trace_span.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trials, decision and hash filter for one loop.
pub fn analyze_loop(
    lp: &LoopInstance,
    trace: &TraceFile,
    snap: &Snapshot,
    io: &IoSet,
    cfg: &AvalancheConfig,
    seed: u64,
) -> AvalancheReport {
    let hash = hash_loop_filter(lp, trace, cfg.hash_filter_threshold);
    let max_steps = cfg.max_step_multiplier * snap.span_len as u64;
    let matrix = run_trials(snap, io, cfg.n_trials, loop_seed(seed, lp), max_steps);
    decide_loop(lp.id, &matrix, cfg, hash)
}
