//! Ground-truth manifest for the bundled program corpus.
//!
//! The manifest is line oriented. `[program]` opens a section; inside it,
//! `source = file.asm` names the program, `buffer NAME = LABEL LEN @ADDR`
//! declares a byte range and `loop LABEL = CLASS EXPECT [input=B] [output=B]
//! @ADDR` declares a loop by the label on its head branch. Addresses are
//! written by [`regenerate`] and checked against freshly assembled images by
//! [`load_truth`]. `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::asm::{assemble_with_symbols, AsmError, Assembly};
use crate::machine::{run_and_trace, MachineState};
use crate::pipeline::{analyze, AnalysisConfig, AnalysisReport, LoopReport};
use crate::trace::TraceFile;

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Step budget for tracing a corpus program from its entry point.
pub const PROGRAM_MAX_STEPS: u64 = 10_000_000;

/// Directory of the corpus shipped with this crate.
pub fn default_corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn default_manifest_path() -> PathBuf {
    default_corpus_dir().join(MANIFEST_FILE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopClass {
    Cipher,
    Hash,
    Crc,
    Compression,
    Copy,
    Matmul,
    Other,
}

impl LoopClass {
    pub const ALL: [LoopClass; 7] = [
        LoopClass::Cipher,
        LoopClass::Hash,
        LoopClass::Crc,
        LoopClass::Compression,
        LoopClass::Copy,
        LoopClass::Matmul,
        LoopClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoopClass::Cipher => "cipher",
            LoopClass::Hash => "hash",
            LoopClass::Crc => "crc",
            LoopClass::Compression => "compression",
            LoopClass::Copy => "copy",
            LoopClass::Matmul => "matmul",
            LoopClass::Other => "other",
        }
    }
}

impl fmt::Display for LoopClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoopClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LoopClass::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown loop class `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferRange {
    pub name: String,
    pub label: String,
    pub len: u32,
    pub address: Option<u32>,
}

impl BufferRange {
    /// # Panics
    /// If the address has not been resolved.
    pub fn range(&self) -> Range<u32> {
        let a = self.address.expect("buffer address resolved");
        a..a + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopTruth {
    pub label: String,
    pub head_address: Option<u32>,
    pub class: LoopClass,
    pub expected_positive: bool,
    pub input: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruthMap {
    pub program: String,
    pub source: PathBuf,
    pub loops: Vec<LoopTruth>,
    pub buffers: Vec<BufferRange>,
}

impl TruthMap {
    pub fn buffer(&self, name: &str) -> Option<&BufferRange> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn loop_at(&self, head_end_address: u32) -> Option<&LoopTruth> {
        self.loops.iter().find(|l| l.head_address == Some(head_end_address))
    }

    pub fn loop_named(&self, label: &str) -> Option<&LoopTruth> {
        self.loops.iter().find(|l| l.label == label)
    }

    pub fn has_positive(&self) -> bool {
        self.loops.iter().any(|l| l.expected_positive)
    }

    pub fn assemble(&self) -> Result<Assembly, CorpusError> {
        let text = std::fs::read_to_string(&self.source).map_err(|source| CorpusError::MissingProgram {
            program: self.program.clone(),
            path: self.source.clone(),
            source,
        })?;
        assemble_with_symbols(&text).map_err(|source| CorpusError::Asm { program: self.program.clone(), source })
    }
}

/// A traced corpus program.
#[derive(Debug, Clone)]
pub struct ProgramRun {
    pub assembly: Assembly,
    pub trace: TraceFile,
    pub final_state: MachineState,
}

impl TruthMap {
    /// Assembles and traces the program with named buffers overwritten.
    /// Each override must match its buffer's length.
    pub fn run(&self, inputs: &[(&str, &[u8])]) -> Result<ProgramRun, CorpusError> {
        let invalid = |message: String| CorpusError::Invalid { program: self.program.clone(), message };
        let assembly = self.assemble()?;
        let mut overrides = BTreeMap::new();
        for (name, bytes) in inputs {
            let buf = self.buffer(name).ok_or_else(|| invalid(format!("no buffer `{name}`")))?;
            if bytes.len() != buf.len as usize {
                return Err(invalid(format!("buffer `{name}` holds {} bytes, got {}", buf.len, bytes.len())));
            }
            let base = resolve(&assembly, &self.program, &buf.label)?;
            overrides.extend(bytes.iter().enumerate().map(|(i, &b)| (base + i as u32, b)));
        }
        let run = run_and_trace(&assembly.image, &overrides, PROGRAM_MAX_STEPS).map_err(|e| invalid(e.to_string()))?;
        if let Some(trap) = run.trap {
            return Err(invalid(format!("trapped: {trap}")));
        }
        if run.truncated {
            return Err(invalid(format!("did not halt within {PROGRAM_MAX_STEPS} steps")));
        }
        let trace = TraceFile::new(run.records, run.section_dump);
        Ok(ProgramRun { assembly, trace, final_state: run.final_state })
    }

    /// Bytes of a named buffer in `state`.
    pub fn read_buffer(&self, state: &MachineState, name: &str) -> Option<Vec<u8>> {
        let buf = self.buffer(name)?;
        buf.range().map(|a| state.memory.read_byte(a)).collect()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Manifest { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("program `{program}`: cannot read {path}: {source}")]
    MissingProgram { program: String, path: PathBuf, source: std::io::Error },
    #[error("program `{program}`: {source}")]
    Asm { program: String, source: AsmError },
    #[error("program `{program}`: label `{label}` is not defined")]
    UnknownLabel { program: String, label: String },
    #[error("program `{program}`: `{label}` has no recorded address; regenerate the manifest")]
    Unresolved { program: String, label: String },
    #[error(
        "program `{program}`: `{label}` is at {assembled:#010x} but the manifest says {manifest:#010x}; regenerate the manifest"
    )]
    Drift { program: String, label: String, manifest: u32, assembled: u32 },
    #[error("program `{program}`: {message}")]
    Invalid { program: String, message: String },
}

fn parse_error(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { line, message: message.into() }
}

fn parse_address(line: usize, tok: &str) -> Result<u32, CorpusError> {
    let hex = tok
        .strip_prefix("@0x")
        .ok_or_else(|| parse_error(line, format!("expected `@0x...` address, found `{tok}`")))?;
    u32::from_str_radix(hex, 16).map_err(|e| parse_error(line, format!("bad address `{tok}`: {e}")))
}

/// Splits off a trailing `@0x...` token.
fn split_address(line: usize, rhs: &str) -> Result<(Vec<&str>, Option<u32>), CorpusError> {
    let mut toks: Vec<&str> = rhs.split_whitespace().collect();
    let addr = match toks.last() {
        Some(t) if t.starts_with('@') => Some(parse_address(line, t)?),
        _ => None,
    };
    if addr.is_some() {
        toks.pop();
    }
    Ok((toks, addr))
}

/// Parses manifest text. Source paths are resolved against `dir`; nothing is
/// assembled.
pub fn parse_manifest(text: &str, dir: &Path) -> Result<Vec<TruthMap>, CorpusError> {
    let mut maps: Vec<TruthMap> = Vec::new();
    let mut sources_seen: Vec<bool> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() {
                return Err(parse_error(line, "empty program name"));
            }
            if maps.iter().any(|m| m.program == name) {
                return Err(parse_error(line, format!("duplicate program `{name}`")));
            }
            maps.push(TruthMap { program: name.into(), source: PathBuf::new(), loops: vec![], buffers: vec![] });
            sources_seen.push(false);
            continue;
        }
        let Some(current) = maps.last_mut() else {
            return Err(parse_error(line, "entry before the first `[program]` header"));
        };
        let (lhs, rhs) =
            body.split_once('=').ok_or_else(|| parse_error(line, format!("expected `key = value`, found `{body}`")))?;
        let lhs: Vec<&str> = lhs.split_whitespace().collect();
        match lhs.as_slice() {
            ["source"] => {
                current.source = dir.join(rhs.trim());
                *sources_seen.last_mut().expect("pushed with map") = true;
            }
            ["buffer", name] => {
                let (toks, address) = split_address(line, rhs)?;
                let [label, len] = toks.as_slice() else {
                    return Err(parse_error(line, "expected `buffer NAME = LABEL LEN [@ADDR]`"));
                };
                let len: u32 = len.parse().map_err(|_| parse_error(line, format!("bad length `{len}`")))?;
                if current.buffer(name).is_some() {
                    return Err(parse_error(line, format!("duplicate buffer `{name}`")));
                }
                current.buffers.push(BufferRange { name: (*name).into(), label: (*label).into(), len, address });
            }
            ["loop", label] => {
                let (toks, head_address) = split_address(line, rhs)?;
                let [class, expect, rest @ ..] = toks.as_slice() else {
                    return Err(parse_error(line, "expected `loop LABEL = CLASS EXPECT ...`"));
                };
                let class: LoopClass = class.parse().map_err(|e: String| parse_error(line, e))?;
                let expected_positive = match *expect {
                    "positive" => true,
                    "negative" => false,
                    other => {
                        return Err(parse_error(line, format!("expected `positive` or `negative`, found `{other}`")))
                    }
                };
                let mut truth = LoopTruth {
                    label: (*label).into(),
                    head_address,
                    class,
                    expected_positive,
                    input: None,
                    output: None,
                };
                for kv in rest {
                    match kv.split_once('=') {
                        Some(("input", b)) => truth.input = Some(b.into()),
                        Some(("output", b)) => truth.output = Some(b.into()),
                        _ => return Err(parse_error(line, format!("unknown loop attribute `{kv}`"))),
                    }
                }
                current.loops.push(truth);
            }
            _ => return Err(parse_error(line, format!("unknown key `{}`", lhs.join(" ")))),
        }
    }
    for (m, seen) in maps.iter().zip(&sources_seen) {
        if !seen {
            return Err(CorpusError::Invalid { program: m.program.clone(), message: "no `source` entry".into() });
        }
        check_references(m)?;
    }
    Ok(maps)
}

fn check_references(m: &TruthMap) -> Result<(), CorpusError> {
    let invalid = |message: String| CorpusError::Invalid { program: m.program.clone(), message };
    let mut labels = BTreeSet::new();
    for l in &m.loops {
        if !labels.insert(&l.label) {
            return Err(invalid(format!("loop `{}` listed twice", l.label)));
        }
        for b in [&l.input, &l.output].into_iter().flatten() {
            if m.buffer(b).is_none() {
                return Err(invalid(format!("loop `{}` names unknown buffer `{b}`", l.label)));
            }
        }
        if l.expected_positive && (l.input.is_none() || l.output.is_none()) {
            return Err(invalid(format!("positive loop `{}` needs input and output buffers", l.label)));
        }
    }
    Ok(())
}

fn resolve(asm: &Assembly, program: &str, label: &str) -> Result<u32, CorpusError> {
    asm.symbols
        .get(label)
        .copied()
        .ok_or_else(|| CorpusError::UnknownLabel { program: program.into(), label: label.into() })
}

fn verify(m: &TruthMap) -> Result<(), CorpusError> {
    let asm = m.assemble()?;
    let check = |label: &str, recorded: Option<u32>| -> Result<(), CorpusError> {
        let assembled = resolve(&asm, &m.program, label)?;
        match recorded {
            None => Err(CorpusError::Unresolved { program: m.program.clone(), label: label.into() }),
            Some(manifest) if manifest != assembled => {
                Err(CorpusError::Drift { program: m.program.clone(), label: label.into(), manifest, assembled })
            }
            Some(_) => Ok(()),
        }
    };
    for b in &m.buffers {
        check(&b.label, b.address)?;
        let end = u64::from(b.address.unwrap_or(0)) + u64::from(b.len);
        let inside = asm.image.section_at(b.address.unwrap_or(0)).is_some_and(|s| end <= s.end());
        if !inside || b.len == 0 {
            return Err(CorpusError::Invalid {
                program: m.program.clone(),
                message: format!("buffer `{}` is empty or crosses a section boundary", b.name),
            });
        }
    }
    for l in &m.loops {
        check(&l.label, l.head_address)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Manifest { path: path.into(), source })
}

/// Parses the manifest and checks every recorded address against the
/// assembled programs.
pub fn load_truth(path: &Path) -> Result<Vec<TruthMap>, CorpusError> {
    let text = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let maps = parse_manifest(&text, dir)?;
    for m in &maps {
        verify(m)?;
    }
    Ok(maps)
}

/// Returns the manifest text with every `@ADDR` rewritten from the assembled
/// programs. Comments and layout are kept.
pub fn regenerate(path: &Path) -> Result<String, CorpusError> {
    let text = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let maps = parse_manifest(&text, dir)?;
    let mut current: Option<(&TruthMap, Assembly)> = None;
    let mut out = String::with_capacity(text.len());
    for raw in text.lines() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let m = maps.iter().find(|m| m.program == name.trim()).expect("parsed above");
            current = Some((m, m.assemble()?));
        }
        let label =
            body.split_once('=').and_then(|(lhs, rhs)| match lhs.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["loop", label] => Some(*label),
                ["buffer", _] => rhs.split_whitespace().next(),
                _ => None,
            });
        match (label, &current) {
            (Some(label), Some((m, asm))) => {
                let addr = resolve(asm, &m.program, label)?;
                let kept: Vec<&str> = body.split_whitespace().filter(|t| !t.starts_with('@')).collect();
                out.push_str(&format!("{} @{addr:#010x}", kept.join(" ")));
            }
            _ => out.push_str(raw),
        }
        out.push('\n');
    }
    Ok(out)
}

/// Programs with at least one expected-positive loop, and programs whose
/// loops are all expected negative.
pub fn class_balance(maps: &[TruthMap]) -> (Vec<&str>, Vec<&str>) {
    let (pos, neg): (Vec<&TruthMap>, Vec<&TruthMap>) = maps.iter().partition(|m| m.has_positive());
    (pos.iter().map(|m| m.program.as_str()).collect(), neg.iter().map(|m| m.program.as_str()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    TruePositive,
    FalseNegative,
    TrueNegative,
    FalsePositive,
}

/// Verdicts for one manifest loop across all of its detected instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopOutcome {
    pub label: String,
    pub head_address: u32,
    pub class: LoopClass,
    pub expected_positive: bool,
    pub instances: usize,
    pub positive_instances: usize,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramOutcome {
    pub program: String,
    pub loops: Vec<LoopOutcome>,
    /// Positive loops at addresses the manifest does not list.
    pub unlisted_positives: Vec<u32>,
    pub report: AnalysisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub config: AnalysisConfig,
    pub positive_programs: Vec<String>,
    pub negative_programs: Vec<String>,
    pub loop_instances: usize,
    /// `program/label` of every expected-positive loop with no positive instance.
    pub false_negatives: Vec<String>,
    /// `program/label` of every expected-negative or unlisted loop reported positive.
    pub false_positives: Vec<String>,
    pub programs: Vec<ProgramOutcome>,
}

/// Traces one program with its shipped inputs and scores the analysis
/// against the manifest.
pub fn evaluate_program(m: &TruthMap, config: &AnalysisConfig) -> Result<ProgramOutcome, CorpusError> {
    let run = m.run(&[])?;
    let report = analyze(&run.trace, config)
        .map_err(|e| CorpusError::Invalid { program: m.program.clone(), message: e.to_string() })?;
    let loops = m
        .loops
        .iter()
        .map(|lt| {
            let head = lt
                .head_address
                .ok_or_else(|| CorpusError::Unresolved { program: m.program.clone(), label: lt.label.clone() })?;
            let at: Vec<&LoopReport> = report.loops.iter().filter(|l| l.head_address == head).collect();
            let positive_instances = at.iter().filter(|l| l.verdict).count();
            let outcome = match (lt.expected_positive, positive_instances > 0) {
                (true, true) => Outcome::TruePositive,
                (true, false) => Outcome::FalseNegative,
                (false, false) => Outcome::TrueNegative,
                (false, true) => Outcome::FalsePositive,
            };
            Ok(LoopOutcome {
                label: lt.label.clone(),
                head_address: head,
                class: lt.class,
                expected_positive: lt.expected_positive,
                instances: at.len(),
                positive_instances,
                outcome,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let unlisted_positives: BTreeSet<u32> =
        report.positives().map(|l| l.head_address).filter(|&a| m.loop_at(a).is_none()).collect();
    Ok(ProgramOutcome {
        program: m.program.clone(),
        loops,
        unlisted_positives: unlisted_positives.into_iter().collect(),
        report,
    })
}

/// Evaluates every program in `maps`.
pub fn evaluate(maps: &[TruthMap], config: &AnalysisConfig) -> Result<CorpusSummary, CorpusError> {
    let programs = maps.iter().map(|m| evaluate_program(m, config)).collect::<Result<Vec<_>, _>>()?;
    let (pos, neg) = class_balance(maps);
    let tagged = |want: Outcome| -> Vec<String> {
        programs
            .iter()
            .flat_map(|p| {
                let listed = p
                    .loops
                    .iter()
                    .filter(move |l| l.outcome == want)
                    .map(move |l| format!("{}/{}", p.program, l.label));
                let unlisted = p
                    .unlisted_positives
                    .iter()
                    .filter(move |_| want == Outcome::FalsePositive)
                    .map(move |a| format!("{}/{a:#010x}", p.program));
                listed.chain(unlisted)
            })
            .collect()
    };
    Ok(CorpusSummary {
        config: config.clone(),
        positive_programs: pos.into_iter().map(String::from).collect(),
        negative_programs: neg.into_iter().map(String::from).collect(),
        loop_instances: programs.iter().map(|p| p.report.loops.len()).sum(),
        false_negatives: tagged(Outcome::FalseNegative),
        false_positives: tagged(Outcome::FalsePositive),
        programs,
    })
}
