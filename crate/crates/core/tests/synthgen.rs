use std::collections::BTreeSet;

use sentinel_core::ingest::scan_dataset;
use sentinel_core::synthgen::{
    generate_dataset, generate_file, GeneratorSpec, SpecTemplate, SynthError, NANOSLEEP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::BehaviorClass;

fn names(text: &str) -> Vec<&str> {
    text.lines().map(|l| l.split_whitespace().nth(3).unwrap()).collect()
}

fn real(text: &str) -> Vec<&str> {
    names(text).into_iter().filter(|&n| n != NANOSLEEP).collect()
}

#[test]
fn record_count_is_duration_times_rate() {
    let spec = GeneratorSpec::default();
    let text = generate_file(&spec, BehaviorClass::Bdvl, 10.0, 1).unwrap();
    assert_eq!(real(&text).len(), 20_000);
    assert!(names(&text).len() > 20_000);

    let spec = GeneratorSpec::from_template(&SpecTemplate { rate: 2300.0, nanosleep_rate: 0.0, ..Default::default() });
    let text = generate_file(&spec, BehaviorClass::Normal, 10.0, 1).unwrap();
    assert_eq!(names(&text).len(), 23_000);
}

#[test]
fn files_are_deterministic_and_parseable() {
    let spec = GeneratorSpec::default();
    let a = generate_file(&spec, BehaviorClass::TheTick, 1.0, 42).unwrap();
    assert_eq!(a, generate_file(&spec, BehaviorClass::TheTick, 1.0, 42).unwrap());
    assert_ne!(a, generate_file(&spec, BehaviorClass::TheTick, 1.0, 43).unwrap());
    let mut last = f64::NEG_INFINITY;
    for line in a.lines() {
        let rec = sentinel_core::ingest::parse_line(line).unwrap();
        assert!(rec.timestamp > last);
        last = rec.timestamp;
    }
}

#[test]
fn rejects_non_stochastic_rows() {
    let mut spec = GeneratorSpec::default();
    spec.classes[2].transitions[5][0] += 1e-6;
    assert!(matches!(generate_file(&spec, BehaviorClass::Normal, 1.0, 0), Err(SynthError::InvalidSpec(_))));
    let mut spec = GeneratorSpec::default();
    spec.classes.pop();
    assert!(spec.validate().is_err());
    assert!(generate_file(&GeneratorSpec::default(), BehaviorClass::Normal, 0.0, 0).is_err());
}

#[test]
fn spec_round_trips_through_json() {
    let spec = GeneratorSpec::from_template(&SpecTemplate { seed: 9, ..Default::default() });
    let json = serde_json::to_string(&spec).unwrap();
    let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, spec);
    back.validate().unwrap();
}

fn worst_row_tv(spec: &GeneratorSpec, class: BehaviorClass, tokens: usize, seed: u64) -> f64 {
    let text = generate_file(spec, class, tokens as f64 / spec.rate, seed).unwrap();
    let marker = &spec.profile(class).marker;
    let chain: Vec<usize> = real(&text)
        .into_iter()
        .filter(|&n| n != marker.first && n != marker.second)
        .map(|n| spec.vocabulary.iter().position(|v| v == n).unwrap())
        .collect();
    let n = spec.vocabulary.len();
    let mut counts = vec![vec![0usize; n]; n];
    for w in chain.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    let matrix = &spec.profile(class).transitions;
    let mut worst = 0.0f64;
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        assert!(total > 0, "row {i} never visited");
        let tv = 0.5 * row.iter().zip(&matrix[i]).map(|(&c, &p)| (c as f64 / total as f64 - p).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

/// Random full-support chains over six syscalls.
fn compact_spec(seed: u64) -> GeneratorSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = GeneratorSpec::default();
    spec.vocabulary = ["read", "write", "open", "close", "mmap", "poll"].map(String::from).to_vec();
    for p in &mut spec.classes {
        p.transitions = (0..6)
            .map(|_| {
                let row: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();
    }
    spec
}

#[test]
fn transition_frequencies_converge() {
    for seed in 0..4 {
        let spec = compact_spec(seed);
        let class = BehaviorClass::ALL[seed as usize];
        let tv = worst_row_tv(&spec, class, 100_000, seed);
        assert!(tv < 0.02, "compact spec {seed}: worst row TV {tv}");
    }
    // 48 states need a longer stream for each row to see enough transitions.
    let spec = GeneratorSpec::from_template(&SpecTemplate { local_signal: 0.3, ..Default::default() });
    let tv = worst_row_tv(&spec, BehaviorClass::RansomwarePoC, 1_000_000, 5);
    assert!(tv < 0.02, "default spec: worst row TV {tv}");
}

/// Fraction of windows of `len` real syscalls containing both class markers.
fn both_marker_rate(spec: &GeneratorSpec, len: usize) -> f64 {
    let (mut hit, mut total) = (0, 0);
    for class in BehaviorClass::ALL {
        let m = &spec.profile(class).marker;
        for f in 0..4u64 {
            let text = generate_file(spec, class, 12_000.0 / spec.rate, 100 + f).unwrap();
            let seq = real(&text);
            for start in (0..seq.len() - len).step_by(97) {
                let w = &seq[start..start + len];
                hit += (w.contains(&m.first.as_str()) && w.contains(&m.second.as_str())) as usize;
                total += 1;
            }
        }
    }
    hit as f64 / total as f64
}

#[test]
fn marker_pairs_need_long_context() {
    let spec = GeneratorSpec::from_template(&SpecTemplate { mean_gap: 600.0, ..Default::default() });
    let long = both_marker_rate(&spec, 1200);
    let short = both_marker_rate(&spec, 300);
    println!("C=2G: {long}, C=G/2: {short}");
    assert!(long > 0.9);
    assert!(short < 0.1);
}

#[test]
fn nanosleep_fraction_matches_rate() {
    for q in [0.05, 0.2, 0.5] {
        let spec = GeneratorSpec::from_template(&SpecTemplate { nanosleep_rate: q, ..Default::default() });
        let text = generate_file(&spec, BehaviorClass::Bashlite, 50.0, 3).unwrap();
        let all = names(&text);
        let frac = all.iter().filter(|&&n| n == NANOSLEEP).count() as f64 / all.len() as f64;
        assert!((frac - q).abs() < 0.1 * q, "rate {q}: observed {frac}");
    }
}

#[test]
fn dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec::default();
    let manifest = generate_dataset(&spec, dir.path(), 3, 0.2).unwrap();
    assert_eq!(manifest.len(), 15);
    assert_eq!(scan_dataset(dir.path()).unwrap(), manifest);
    let listed = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(listed.lines().count(), 15);

    let files: BTreeSet<String> = manifest.iter().map(|e| std::fs::read_to_string(&e.path).unwrap()).collect();
    assert_eq!(files.len(), 15, "files are distinct");

    let other = tempfile::tempdir().unwrap();
    let reseeded = GeneratorSpec { seed: 1, ..spec.clone() };
    let m2 = generate_dataset(&reseeded, other.path(), 3, 0.2).unwrap();
    for (a, b) in manifest.iter().zip(&m2) {
        assert_eq!(a.path.strip_prefix(dir.path()).unwrap(), b.path.strip_prefix(other.path()).unwrap());
        assert_ne!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());
    }
    let single = tempfile::tempdir().unwrap();
    assert_eq!(generate_dataset(&spec, single.path(), 1, 0.2).unwrap().len(), 5);
    assert!(generate_dataset(&spec, single.path(), 0, 0.2).is_err());
}
