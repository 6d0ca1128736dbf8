use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::ingest::{
    default_filter_set, load_dataset, read_records, filter_syscalls, IngestError, IngestStats, LoadOptions, Strictness,
};
use sentinel_core::synthgen::{generate_dataset, GeneratorSpec};

const NAMES: [&str; 8] = ["read", "write", "openat", "close", "nanosleep", "futex", "mmap", "clock_nanosleep"];
const GARBAGE: [&str; 5] = ["", "not a record", "1.5 proc", "x proc 3 read", "2.0 proc 7 re/ad"];

/// Random trace text with roughly one malformed line in fifty. Returns the
/// text, the syscall names of well-formed lines and the malformed count.
fn fuzzed(lines: usize, seed: u64) -> (String, Vec<String>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut names = Vec::new();
    let mut malformed = 0;
    let mut t = 0.0;
    for _ in 0..lines {
        if rng.random_bool(0.02) {
            let g = GARBAGE[rng.random_range(0..GARBAGE.len())];
            if !g.is_empty() {
                malformed += 1;
            }
            text.push_str(g);
        } else {
            t += rng.random_range(0.0..0.001);
            let name = NAMES[rng.random_range(0..NAMES.len())];
            let args = if rng.random_bool(0.3) { " fd=3 len=42" } else { "" };
            text.push_str(&format!("{t:.6} proc{} {} {name}{args}", rng.random_range(0..4), rng.random_range(1..9999)));
            names.push(name.to_string());
        }
        text.push('\n');
    }
    (text, names, malformed)
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

#[test]
fn nanosleep_filter_on_fuzzed_corpus() {
    let (text, names, malformed) = fuzzed(100_000, 1);
    let mut stats = IngestStats::default();
    let records = read_records(Cursor::new(text.as_bytes()), Path::new("fuzz"), Strictness::Skip, &mut stats).unwrap();
    assert_eq!(stats.skipped_malformed, malformed);
    assert_eq!(stats.parsed, names.len());
    let parsed: Vec<String> = records.into_iter().map(|r| r.syscall).collect();
    assert_eq!(parsed, names);

    let kept = filter_syscalls(parsed.iter().map(String::as_str), &default_filter_set());
    let expected: Vec<String> = names.iter().filter(|n| *n != "nanosleep").cloned().collect();
    assert_eq!(kept, expected);
    assert_eq!(parsed.len() - kept.len(), names.iter().filter(|n| *n == "nanosleep").count());
    assert!(kept.iter().any(|n| n == "clock_nanosleep"));
    assert!(is_subsequence(&kept, &parsed));

    let strict = read_records(Cursor::new(text.as_bytes()), Path::new("fuzz"), Strictness::Abort, &mut IngestStats::default());
    assert!(matches!(strict, Err(IngestError::MalformedLine { .. })));
}

#[test]
fn load_dataset_reads_generated_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&GeneratorSpec::default(), dir.path(), 2, 0.05).unwrap();
    let (seqs, stats) = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(seqs.len(), manifest.len());
    assert_eq!(stats.skipped_malformed, 0);
    assert!(stats.filtered > 0);
    for (s, e) in seqs.iter().zip(&manifest) {
        assert_eq!(s.label, Some(e.class));
        assert!(!s.syscalls.iter().any(|n| n == "nanosleep"));
    }
    let listed = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(listed.lines().count(), 10);
    assert!(listed.starts_with("Bashlite/trace_00000.log\tBashlite\n"));
}
