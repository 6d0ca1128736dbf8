//! Trace-file ingestion.
//!
//! A trace line is whitespace separated: `timestamp process pid syscall [args...]`.
//! Everything after the syscall name is discarded. Files are grouped into a
//! dataset by directory: `<root>/<ClassName>/<file>`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::BehaviorClass;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed trace line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("{path}: no syscalls left after filtering")]
    EmptyAfterFiltering { path: PathBuf },
    #[error("unknown class directory `{0}`")]
    UnknownClassDirectory(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl IngestError {
    fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io { path: path.to_path_buf(), source }
    }
}

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTraceRecord {
    pub timestamp: f64,
    pub process: String,
    pub pid: u64,
    pub syscall: String,
}

/// Ordered syscall names from one capture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyscallSequence {
    pub syscalls: Vec<String>,
    pub label: Option<BehaviorClass>,
    pub source: String,
}

/// What to do with a line that does not parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Skip the line and count it.
    #[default]
    Skip,
    /// Fail the whole file.
    Abort,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub parsed: usize,
    pub filtered: usize,
    pub skipped_malformed: usize,
}

pub fn is_valid_syscall_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Parses one trace line, keeping the four leading fields.
pub fn parse_line(line: &str) -> Result<RawTraceRecord, IngestError> {
    parse_numbered_line(line, 0)
}

fn parse_numbered_line(line: &str, line_no: usize) -> Result<RawTraceRecord, IngestError> {
    let malformed = |reason: String| IngestError::MalformedLine { line_no, reason };
    let mut fields = line.split_whitespace();
    let (Some(ts), Some(process), Some(pid), Some(syscall)) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(malformed("expected `timestamp process pid syscall`".into()));
    };
    let timestamp: f64 = ts
        .parse()
        .map_err(|_| malformed(format!("non-numeric timestamp `{ts}`")))?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(malformed(format!("timestamp `{ts}` out of range")));
    }
    let pid: u64 = pid
        .parse()
        .map_err(|_| malformed(format!("non-numeric pid `{pid}`")))?;
    if !is_valid_syscall_name(syscall) {
        return Err(malformed(format!("invalid syscall name `{syscall}`")));
    }
    Ok(RawTraceRecord {
        timestamp,
        process: process.to_string(),
        pid,
        syscall: syscall.to_string(),
    })
}

/// Syscalls removed during preprocessing unless configured otherwise.
pub fn default_filter_set() -> BTreeSet<String> {
    BTreeSet::from(["nanosleep".to_string()])
}

/// Options for [`load_trace_file_with`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub filter_set: BTreeSet<String>,
    pub strictness: Strictness,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { filter_set: default_filter_set(), strictness: Strictness::Skip }
    }
}

/// Reads trace records from any buffered reader, in file order. Blank lines
/// are ignored silently. `origin` only labels I/O errors.
pub fn read_records<R: BufRead>(
    reader: R,
    origin: &Path,
    strictness: Strictness,
    stats: &mut IngestStats,
) -> Result<Vec<RawTraceRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_numbered_line(&line, idx + 1) {
            Ok(rec) => {
                stats.parsed += 1;
                out.push(rec);
            }
            Err(e) => match strictness {
                Strictness::Skip => stats.skipped_malformed += 1,
                Strictness::Abort => return Err(e),
            },
        }
    }
    Ok(out)
}

/// Removes every member of `filter_set`, keeping the order of the rest.
pub fn filter_syscalls<I, S>(names: I, filter_set: &BTreeSet<String>) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: Into<String> + AsRef<str>,
{
    names
        .into_iter()
        .filter(|n| !filter_set.contains(n.as_ref()))
        .map(Into::into)
        .collect()
}

/// Loads one trace file with the default filter (`nanosleep`) and lenient
/// parsing.
pub fn load_trace_file(
    path: &Path,
    label: Option<BehaviorClass>,
    filter_set: &BTreeSet<String>,
) -> Result<SyscallSequence, IngestError> {
    let opts = LoadOptions { filter_set: filter_set.clone(), strictness: Strictness::Skip };
    load_trace_file_with(path, label, &opts).map(|(seq, _)| seq)
}

pub fn load_trace_file_with(
    path: &Path,
    label: Option<BehaviorClass>,
    opts: &LoadOptions,
) -> Result<(SyscallSequence, IngestStats), IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut stats = IngestStats::default();
    let records = read_records(BufReader::new(file), path, opts.strictness, &mut stats)?;
    let total = records.len();
    let syscalls = filter_syscalls(records.into_iter().map(|r| r.syscall), &opts.filter_set);
    stats.filtered = total - syscalls.len();
    if syscalls.is_empty() {
        return Err(IngestError::EmptyAfterFiltering { path: path.to_path_buf() });
    }
    Ok((
        SyscallSequence { syscalls, label, source: path.display().to_string() },
        stats,
    ))
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: BehaviorClass,
}

/// Lists `(file, class)` pairs under `root`, one subdirectory per class.
/// Regular files directly under `root` (manifests, run records) are ignored,
/// as are hidden entries.
pub fn scan_dataset(root: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut manifest = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| IngestError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| IngestError::io(root, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !path.is_dir() {
            continue;
        }
        let class: BehaviorClass = name
            .parse()
            .map_err(|_| IngestError::UnknownClassDirectory(name.clone()))?;
        for file in fs::read_dir(&path).map_err(|e| IngestError::io(&path, e))? {
            let file = file.map_err(|e| IngestError::io(&path, e))?;
            let fpath = file.path();
            if file.file_name().to_string_lossy().starts_with('.') || !fpath.is_file() {
                continue;
            }
            manifest.push(ManifestEntry { path: fpath, class });
        }
    }
    manifest.sort();
    Ok(manifest)
}

/// Renders a manifest as `path<TAB>class` lines, with paths relative to
/// `root` where possible.
pub fn format_manifest(root: &Path, manifest: &[ManifestEntry]) -> String {
    manifest
        .iter()
        .map(|e| format!("{}\t{}\n", e.path.strip_prefix(root).unwrap_or(&e.path).display(), e.class))
        .collect()
}

/// Scans `root` and loads every file with its directory label, in manifest
/// order. Files are read in parallel.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<(Vec<SyscallSequence>, IngestStats), IngestError> {
    let manifest = scan_dataset(root)?;
    let loaded = manifest
        .par_iter()
        .map(|e| load_trace_file_with(&e.path, Some(e.class), opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = IngestStats::default();
    let sequences = loaded
        .into_iter()
        .map(|(seq, st)| {
            total.parsed += st.parsed;
            total.filtered += st.filtered;
            total.skipped_malformed += st.skipped_malformed;
            seq
        })
        .collect();
    Ok((sequences, total))
}
