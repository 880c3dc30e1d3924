use avaloop_core::avalanche::{
    analyze_loop, count_flipped, decide_loop, flip_band, hash_loop_filter, run_trials, TrialMatrix,
};
use avaloop_core::corpus::{default_manifest_path, load_truth, ProgramRun, TruthMap};
use avaloop_core::{
    build_snapshot, detect_loops, identify_io, iqr_bounds, partition_blocks, seeded_rng, AvalancheConfig, HashFilter,
    IoSet, LoopInstance, PointerFilter, Snapshot,
};
use rand::Rng;

struct Loop {
    run: ProgramRun,
    lp: LoopInstance,
    snap: Snapshot,
    io: IoSet,
}

fn truth(name: &str) -> TruthMap {
    load_truth(&default_manifest_path()).unwrap().into_iter().find(|t| t.program == name).unwrap()
}

fn corpus_loop(program: &str, label: &str) -> Loop {
    let m = truth(program);
    let run = m.run(&[]).unwrap();
    let head = m.loop_named(label).unwrap().head_address.unwrap();
    let lp = detect_loops(&partition_blocks(&run.trace)).into_iter().find(|l| l.head_end_address == head).unwrap();
    let snap = build_snapshot(&lp, &run.trace).unwrap();
    let io = identify_io(&lp, &run.trace, PointerFilter::Paper);
    Loop { run, lp, snap, io }
}

const NO_FILTER: HashFilter = HashFilter { and_or_per_iteration: 0.0, suppressed: false };

#[test]
fn band_for_thirty_trials_matches_the_quartile_bounds() {
    assert_eq!(flip_band(30, 0.25), (7, 23));
    assert_eq!(flip_band(30, 0.25), iqr_bounds(30));
    assert_eq!(flip_band(20, 0.25), (5, 15));
    assert_eq!(flip_band(3, 0.25), (0, 3));
}

#[test]
fn trial_matrix_is_deterministic_per_seed() {
    let l = corpus_loop("tea", "tea_loop");
    let steps = l.snap.default_max_steps();
    let a = run_trials(&l.snap, &l.io, 6, 11, steps);
    let b = run_trials(&l.snap, &l.io, 6, 11, steps);
    let c = run_trials(&l.snap, &l.io, 6, 12, steps);
    assert_eq!(a, b);
    assert_ne!(a.inputs, c.inputs);
    assert_eq!(a.flipped_outputs.len(), 6);
    assert!(a.flipped_outputs.iter().all(|row| row.len() == a.input_bit_count()));
    assert_eq!(a.baseline_failures, 0);
}

#[test]
fn xtea_flips_half_the_output_on_average() {
    let l = corpus_loop("xtea", "xtea_loop");
    let m = run_trials(&l.snap, &l.io, 30, 0x5eed, l.snap.default_max_steps());
    let all: Vec<usize> = (0..m.output_bit_count()).collect();
    let half = m.output_bit_count() as f64 / 2.0;
    // Each count is Binomial(out, 1/2); the mean over n trials has sigma sqrt(out/4/n).
    let sigma = (m.output_bit_count() as f64 / 4.0 / 30.0).sqrt();
    for i in (0..m.input_bit_count()).step_by(7) {
        let mean = (0..30)
            .map(|n| {
                let base = m.baseline_outputs[n].as_deref().unwrap();
                let flip = m.flipped_outputs[n][i].as_deref().unwrap();
                f64::from(count_flipped(base, flip, &all))
            })
            .sum::<f64>()
            / 30.0;
        assert!((mean - half).abs() <= 3.0 * sigma, "bit {i}: {mean}");
    }
}

#[test]
fn xtea_is_positive_and_crc_is_negative() {
    let cfg = AvalancheConfig::default();
    let x = corpus_loop("xtea", "xtea_loop");
    let r = analyze_loop(&x.lp, &x.run.trace, &x.snap, &x.io, &cfg, 0x5eed);
    assert!(r.verdict, "{}", r.avalanche_bit_count);
    assert_eq!(r.input_bit_count, 64);
    let c = corpus_loop("crc32", "crc_loop");
    let r = analyze_loop(&c.lp, &c.run.trace, &c.snap, &c.io, &cfg, 0x5eed);
    assert!(!r.verdict);
    assert!(r.avalanche_bit_count < cfg.theta);
}

#[test]
fn hash_filter_separates_classic_hash_from_arx() {
    let h = corpus_loop("classic_hash", "sha_loop");
    let f = hash_loop_filter(&h.lp, &h.run.trace, 5.0);
    assert!(f.suppressed, "{}", f.and_or_per_iteration);
    let a = corpus_loop("arx_hash", "arx_loop");
    let f = hash_loop_filter(&a.lp, &a.run.trace, 5.0);
    assert!(!f.suppressed, "{}", f.and_or_per_iteration);
    assert_eq!(f.and_or_per_iteration, 0.0);
}

#[test]
fn loop_seed_depends_on_the_span() {
    let x = corpus_loop("xtea", "xtea_loop");
    let mut moved = x.lp.clone();
    moved.trace_span.0 += 1;
    let s = avaloop_core::avalanche::loop_seed(1, &x.lp);
    assert_eq!(s, avaloop_core::avalanche::loop_seed(1, &x.lp));
    assert_ne!(s, avaloop_core::avalanche::loop_seed(1, &moved));
    assert_ne!(s, avaloop_core::avalanche::loop_seed(2, &x.lp));
}

fn synthetic(n: usize, in_bytes: usize, out_bytes: usize, f: impl Fn(&[u8]) -> Vec<u8>) -> TrialMatrix {
    let mut rng = seeded_rng(99);
    let inputs: Vec<Vec<u8>> = (0..n).map(|_| (0..in_bytes).map(|_| rng.random()).collect()).collect();
    let baseline_outputs = inputs.iter().map(|x| Some(f(x))).collect();
    let flipped_outputs = inputs
        .iter()
        .map(|x| {
            (0..in_bytes * 8)
                .map(|k| {
                    let mut y = x.clone();
                    y[k / 8] ^= 1 << (k % 8);
                    Some(f(&y))
                })
                .collect()
        })
        .collect();
    TrialMatrix {
        n_trials: n,
        input_addresses: (0..in_bytes as u32).collect(),
        output_addresses: (0x100..0x100 + out_bytes as u32).collect(),
        inputs,
        baseline_outputs,
        flipped_outputs,
        baseline_failures: 0,
    }
}

/// A keyed stand-in for an ideal cipher: every output bit depends on all input bits.
fn mixer(x: &[u8]) -> Vec<u8> {
    let mut s: u64 = x.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    (0..8)
        .flat_map(|_| {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            (z ^ (z >> 31)).to_le_bytes()
        })
        .collect()
}

#[test]
fn ideal_mixer_is_positive() {
    let m = synthetic(30, 4, 64, mixer);
    let r = decide_loop(0, &m, &AvalancheConfig::default(), NO_FILTER);
    assert!(r.verdict);
    assert!(r.avalanche_bit_count >= 28, "{}", r.avalanche_bit_count);
    assert!(r.per_input_bit.iter().all(|b| b.retained_trials == 30));
}

#[test]
fn copy_and_linear_maps_are_negative() {
    let cfg = AvalancheConfig::default();
    let copy = decide_loop(0, &synthetic(30, 4, 4, |x| x.to_vec()), &cfg, NO_FILTER);
    assert_eq!(copy.avalanche_bit_count, 0);
    assert!(copy.per_input_bit.iter().all(|b| b.mask_size == 0 && !b.passed));
    let xor = |x: &[u8]| vec![x[0] ^ x[1] ^ x[2] ^ x[3]; 8];
    let lin = decide_loop(0, &synthetic(30, 4, 8, xor), &cfg, NO_FILTER);
    assert!(!lin.verdict);
}

#[test]
fn suppressed_loops_are_never_positive() {
    let m = synthetic(30, 4, 64, mixer);
    let r = decide_loop(0, &m, &AvalancheConfig::default(), HashFilter { and_or_per_iteration: 9.0, suppressed: true });
    assert!(r.avalanche_bit_count >= 8);
    assert!(!r.verdict);
}

#[test]
fn majority_baseline_failures_make_the_loop_unanalyzable() {
    let mut m = synthetic(30, 2, 64, mixer);
    for n in 0..16 {
        m.baseline_outputs[n] = None;
        m.flipped_outputs[n] = vec![None; 16];
    }
    m.baseline_failures = 16;
    let r = decide_loop(0, &m, &AvalancheConfig::default(), NO_FILTER);
    assert!(r.unanalyzable && !r.verdict);
    assert!(r.per_input_bit.is_empty());

    let mut m = synthetic(30, 2, 64, mixer);
    for n in 0..15 {
        m.baseline_outputs[n] = None;
    }
    m.baseline_failures = 15;
    let r = decide_loop(0, &m, &AvalancheConfig::default(), NO_FILTER);
    assert!(!r.unanalyzable);
    // Fifteen retained trials is below the minimum, so no bit can pass.
    assert!(r.per_input_bit.iter().all(|b| b.retained_trials == 15 && !b.passed));
}

#[test]
fn flip_failures_drop_single_trials() {
    let mut m = synthetic(30, 1, 64, mixer);
    m.flipped_outputs[3][2] = None;
    assert_eq!(m.retained(2).len(), 29);
    assert_eq!(m.discarded_trials(2), vec![3]);
    assert_eq!(m.retained(1).len(), 30);
    let r = decide_loop(0, &m, &AvalancheConfig::default(), NO_FILTER);
    assert_eq!(r.per_input_bit[2].retained_trials, 29);
    assert_eq!(r.per_input_bit[2].samples.len(), 29);
}
