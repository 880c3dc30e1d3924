//! `avaloop` command-line front end.
//!
//! Exit status: 0 on success, 1 when `fidelity` finds a mismatch or `trace`
//! stops without reaching `halt`, 2 on any other error. Avalanche verdicts
//! never change the exit status.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use avaloop_core::corpus::{default_manifest_path, evaluate, load_truth, regenerate, CorpusSummary};
use avaloop_core::pipeline::{fidelity_check, parse_seed, ripple_comparison, seed_from_env, Corruption, SEED_ENV};
use avaloop_core::taint::{AddressPolicy, TaintSource};
use avaloop_core::trace::{read_trace, write_trace};
use avaloop_core::{
    analyze, assemble_with_symbols, detect_loops, partition_blocks, run_and_trace, AnalysisConfig, AnalysisReport,
    PointerFilter, TraceFile,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "avaloop", version, about = "Encryption-loop detection by avalanche-effect measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a program, run it and write its execution trace.
    Trace(TraceArgs),
    /// List the loops detected in a trace.
    Loops(LoopsArgs),
    /// Run the full detection pipeline on a trace.
    Analyze(AnalyzeArgs),
    /// Replay every loop without overrides and compare with the trace.
    Fidelity(FidelityArgs),
    /// Compare taint ripple with the avalanche verdict for every loop.
    Ripple(RippleArgs),
    /// Operations on the bundled corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
}

#[derive(Args)]
struct TraceArgs {
    /// Assembly source file.
    program: PathBuf,
    /// Output trace file.
    #[arg(short, long)]
    out: PathBuf,
    /// Overwrite bytes before running: `ADDR=HEX` or `LABEL=HEX`; repeatable.
    #[arg(long = "input", value_name = "TARGET=HEX")]
    inputs: Vec<String>,
    #[arg(long, default_value_t = 10_000_000)]
    max_steps: u64,
    /// Write the text codec instead of the binary one.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct LoopsArgs {
    trace: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OutputArgs {
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a human-readable summary on stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PointerFilterArg {
    Paper,
    Strict,
}

impl From<PointerFilterArg> for PointerFilter {
    fn from(p: PointerFilterArg) -> Self {
        match p {
            PointerFilterArg::Paper => PointerFilter::Paper,
            PointerFilterArg::Strict => PointerFilter::Strict,
        }
    }
}

const OVERRIDES: [&str; 9] = [
    "n_trials",
    "theta",
    "p_threshold",
    "pointer_filter",
    "hash_filter_threshold",
    "known_library",
    "max_step_multiplier",
    "band_fraction",
    "min_retained",
];

#[derive(Args)]
struct ConfigArgs {
    /// Pin every parameter to its default; only the seed may vary.
    #[arg(long, conflicts_with_all = OVERRIDES)]
    paper_defaults: bool,
    /// Decimal or 0x-hex; defaults to $AVALOOP_SEED, else 0x5eed.
    #[arg(long, value_parser = seed_arg)]
    seed: Option<u64>,
    #[arg(long)]
    n_trials: Option<usize>,
    #[arg(long)]
    theta: Option<usize>,
    #[arg(long)]
    p_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pointer_filter: Option<PointerFilterArg>,
    #[arg(long)]
    hash_filter_threshold: Option<f64>,
    /// Glob over section names whose loops are skipped; repeatable.
    #[arg(long = "known-library", value_name = "GLOB")]
    known_library: Vec<String>,
    #[arg(long)]
    max_step_multiplier: Option<u64>,
    #[arg(long)]
    band_fraction: Option<f64>,
    #[arg(long)]
    min_retained: Option<usize>,
}

fn seed_arg(s: &str) -> Result<u64, String> {
    parse_seed(s).ok_or_else(|| format!("`{s}` is not a decimal or 0x-hex integer"))
}

impl ConfigArgs {
    fn config(&self) -> Result<AnalysisConfig> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            if self.seed.is_none() && parse_seed(&v).is_none() {
                bail!("{SEED_ENV}=`{v}` is not a decimal or 0x-hex integer");
            }
        }
        let mut c = AnalysisConfig::paper_defaults(self.seed.unwrap_or_else(seed_from_env));
        if self.paper_defaults {
            return Ok(c);
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(n_trials, theta, p_threshold, hash_filter_threshold, max_step_multiplier, band_fraction, min_retained);
        if let Some(p) = self.pointer_filter {
            c.pointer_filter = p.into();
        }
        c.known_library_globs.clone_from(&self.known_library);
        if c.n_trials < 3 {
            bail!("--n-trials must be at least 3");
        }
        if !(0.0..0.5).contains(&c.band_fraction) {
            bail!("--band-fraction must be in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&c.p_threshold) {
            bail!("--p-threshold must be in [0, 1]");
        }
        if c.max_step_multiplier == 0 {
            bail!("--max-step-multiplier must be positive");
        }
        Ok(c)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct FidelityArgs {
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    pointer_filter: PointerFilterArg,
    /// Redraw this fraction of snapshot bytes before replaying.
    #[arg(long, value_name = "FRACTION")]
    randomize: Option<f64>,
    /// Seed for --randomize.
    #[arg(long, value_parser = seed_arg, default_value = "0")]
    randomize_seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AddressPolicyArg {
    DataOnly,
    TableLookup,
}

#[derive(Args)]
struct RippleArgs {
    trace: PathBuf,
    /// Taint source `NAME=ADDR:LEN`; repeatable.
    #[arg(long = "source", required = true, value_name = "NAME=ADDR:LEN")]
    sources: Vec<String>,
    /// Candidate output range `ADDR:LEN`.
    #[arg(long = "target", value_name = "ADDR:LEN")]
    target: String,
    #[arg(long, value_enum, default_value = "data-only")]
    address_policy: AddressPolicyArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Trace and analyze every corpus program, scoring against the manifest.
    RunAll {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rewrite the manifest's addresses from freshly assembled programs.
    Regen {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Fail instead of writing when the manifest is out of date.
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Trace(a) => cmd_trace(&a),
        Command::Loops(a) => cmd_loops(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Fidelity(a) => cmd_fidelity(&a),
        Command::Ripple(a) => cmd_ripple(&a),
        Command::Corpus(CorpusCommand::RunAll { manifest, config, output }) => {
            cmd_run_all(manifest.as_deref(), &config, &output)
        }
        Command::Corpus(CorpusCommand::Regen { manifest, check }) => cmd_regen(manifest.as_deref(), check),
    }
}

fn load_trace(path: &Path) -> Result<TraceFile> {
    let mut f = fs::File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
    let trace = read_trace(&mut f).with_context(|| format!("cannot parse trace {}", path.display()))?;
    trace.validate().map_err(|(i, msg)| anyhow!("trace {}: record {i}: {msg}", path.display()))?;
    Ok(trace)
}

fn emit<T: Serialize>(value: &T, output: &OutputArgs) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    match &output.out {
        Some(p) => fs::write(p, json).with_context(|| format!("cannot write {}", p.display()))?,
        None => std::io::stdout().write_all(json.as_bytes())?,
    }
    Ok(())
}

fn parse_number(s: &str) -> Result<u32> {
    let s = s.trim();
    let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    v.with_context(|| format!("`{s}` is not a number"))
}

fn parse_hex_bytes(s: &str) -> Result<Vec<u8>> {
    let s = s.trim().trim_start_matches("0x");
    if s.len() % 2 != 0 {
        bail!("hex byte string `{s}` has odd length");
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).with_context(|| format!("bad hex byte in `{s}`")))
        .collect()
}

fn parse_range(s: &str) -> Result<Range<u32>> {
    let (addr, len) = s.split_once(':').ok_or_else(|| anyhow!("expected ADDR:LEN, got `{s}`"))?;
    let start = parse_number(addr)?;
    let end = start.checked_add(parse_number(len)?).ok_or_else(|| anyhow!("range `{s}` overflows"))?;
    if start == end {
        bail!("range `{s}` is empty");
    }
    Ok(start..end)
}

fn cmd_trace(a: &TraceArgs) -> Result<ExitCode> {
    let src = fs::read_to_string(&a.program).with_context(|| format!("cannot read {}", a.program.display()))?;
    let asm = assemble_with_symbols(&src).with_context(|| format!("cannot assemble {}", a.program.display()))?;
    let mut overrides = BTreeMap::new();
    for spec in &a.inputs {
        let (target, hex) = spec.split_once('=').ok_or_else(|| anyhow!("expected TARGET=HEX, got `{spec}`"))?;
        let base = match asm.symbols.get(target) {
            Some(&addr) => addr,
            None => parse_number(target).with_context(|| format!("`{target}` is neither a label nor an address"))?,
        };
        for (i, b) in parse_hex_bytes(hex)?.into_iter().enumerate() {
            overrides.insert(base.wrapping_add(i as u32), b);
        }
    }
    let run = run_and_trace(&asm.image, &overrides, a.max_steps)?;
    let mut trace = TraceFile::new(run.records, run.section_dump);
    trace.metadata.insert("program".into(), a.program.file_name().unwrap_or_default().to_string_lossy().into());
    if run.truncated {
        trace.metadata.insert("truncated".into(), "true".into());
    }
    if let Some(t) = &run.trap {
        trace.metadata.insert("trap".into(), t.to_string());
    }
    let mut out = fs::File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    if a.text {
        trace.write_text(&mut out)?;
    } else {
        write_trace(&trace, &mut out)?;
    }
    if let Some(t) = run.trap {
        eprintln!("program trapped after {} steps: {t}; partial trace written", trace.records.len());
        return Ok(ExitCode::from(1));
    }
    if run.truncated {
        eprintln!("step budget of {} exhausted; partial trace written", a.max_steps);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LoopListing {
    id: usize,
    head_address: u32,
    span: (usize, usize),
    iterations: usize,
    frame_depth: usize,
}

fn cmd_loops(a: &LoopsArgs) -> Result<ExitCode> {
    let trace = load_trace(&a.trace)?;
    let loops: Vec<LoopListing> = detect_loops(&partition_blocks(&trace))
        .iter()
        .map(|l| LoopListing {
            id: l.id,
            head_address: l.head_end_address,
            span: l.trace_span,
            iterations: l.iterations(),
            frame_depth: l.frame_depth,
        })
        .collect();
    if a.output.verbose {
        for l in &loops {
            eprintln!(
                "loop {:>3} head {:#010x} records {}..={} iterations {} depth {}",
                l.id, l.head_address, l.span.0, l.span.1, l.iterations, l.frame_depth
            );
        }
    }
    emit(&loops, &a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn summarize(report: &AnalysisReport) {
    for l in &report.loops {
        let status = match (&l.skipped_reason, &l.avalanche) {
            (Some(r), _) => {
                format!("skipped ({})", serde_json::to_value(r).map(|v| v["kind"].to_string()).unwrap_or_default())
            }
            (None, Some(a)) if a.unanalyzable => "unanalyzable".into(),
            (None, Some(a)) => format!("{}/{} bits", a.avalanche_bit_count, a.input_bit_count),
            (None, None) => "-".into(),
        };
        eprintln!(
            "loop {:>3} head {:#010x} span {}..={} {:<24} {}",
            l.id,
            l.head_address,
            l.span.0,
            l.span.1,
            status,
            if l.verdict { "ENCRYPTION" } else { "" }
        );
    }
    eprintln!("{} loops, {} positive", report.loops.len(), report.positives().count());
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let trace = load_trace(&a.trace)?;
    let report = analyze(&trace, &a.config.config()?)?;
    if a.output.verbose {
        summarize(&report);
    }
    emit(&report, &a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fidelity(a: &FidelityArgs) -> Result<ExitCode> {
    let trace = load_trace(&a.trace)?;
    let corruption = match a.randomize {
        Some(f) if !(0.0..=1.0).contains(&f) => bail!("--randomize must be in [0, 1]"),
        Some(fraction) => Some(Corruption { fraction, seed: a.randomize_seed }),
        None => None,
    };
    let run = fidelity_check(&trace, a.pointer_filter.into(), corruption)?;
    let bad: Vec<_> = run.loops.iter().filter(|l| !l.consistent()).collect();
    if a.output.verbose || !bad.is_empty() {
        for l in &bad {
            eprintln!(
                "loop {}: {:?}, registers {:?}, {} output bytes differ",
                l.loop_id,
                l.status,
                l.mismatched_registers,
                l.mismatched_outputs.len()
            );
        }
        eprintln!("{} of {} loops consistent", run.loops.len() - bad.len(), run.loops.len());
    }
    emit(&run, &a.output)?;
    Ok(if bad.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_ripple(a: &RippleArgs) -> Result<ExitCode> {
    let trace = load_trace(&a.trace)?;
    let sources = a
        .sources
        .iter()
        .map(|s| {
            let (name, range) = s.split_once('=').ok_or_else(|| anyhow!("expected NAME=ADDR:LEN, got `{s}`"))?;
            Ok(TaintSource { name: name.into(), range: parse_range(range)? })
        })
        .collect::<Result<Vec<_>>>()?;
    if sources.len() > avaloop_core::taint::MAX_LABELS {
        bail!("at most {} sources", avaloop_core::taint::MAX_LABELS);
    }
    let target = parse_range(&a.target)?;
    let policy = match a.address_policy {
        AddressPolicyArg::DataOnly => AddressPolicy::DataOnly,
        AddressPolicyArg::TableLookup => AddressPolicy::TableLookup,
    };
    let report = analyze(&trace, &a.config.config()?)?;
    let cmp = ripple_comparison(&trace, report, &sources, target, policy);
    if a.output.verbose {
        eprintln!("{:>4} {:>10}  {:<30} {:>7}  avalanche", "loop", "head", "coverage", "ripple");
        for r in &cmp.rows {
            let cov: Vec<String> = r.sources.iter().map(|s| format!("{}={:.2}", s.name, s.coverage)).collect();
            eprintln!(
                "{:>4} {:#010x}  {:<30} {:>7}  {}",
                r.loop_id,
                r.head_address,
                cov.join(" "),
                r.ripple_verdict,
                r.avalanche_verdict
            );
        }
    }
    emit(&cmp, &a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run_all(manifest: Option<&Path>, config: &ConfigArgs, output: &OutputArgs) -> Result<ExitCode> {
    let path = manifest.map_or_else(default_manifest_path, Path::to_path_buf);
    let maps = load_truth(&path)?;
    let start = std::time::Instant::now();
    let summary: CorpusSummary = evaluate(&maps, &config.config()?)?;
    if output.verbose {
        for p in &summary.programs {
            for l in &p.loops {
                eprintln!(
                    "{:<16} {:<12} {:<12} {:>2}/{:<2} {:?}",
                    p.program, l.label, l.class, l.positive_instances, l.instances, l.outcome
                );
            }
        }
        eprintln!(
            "{} programs, {} loop instances, FN {}, FP {}, {:.1}s",
            summary.programs.len(),
            summary.loop_instances,
            summary.false_negatives.len(),
            summary.false_positives.len(),
            start.elapsed().as_secs_f64()
        );
    }
    emit(&summary, output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_regen(manifest: Option<&Path>, check: bool) -> Result<ExitCode> {
    let path = manifest.map_or_else(default_manifest_path, Path::to_path_buf);
    let fresh = regenerate(&path)?;
    let current = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    if fresh == current {
        eprintln!("{} is up to date", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    if check {
        eprintln!("{} is out of date; run `avaloop corpus regen`", path.display());
        return Ok(ExitCode::from(1));
    }
    fs::write(&path, fresh).with_context(|| format!("cannot write {}", path.display()))?;
    eprintln!("rewrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
