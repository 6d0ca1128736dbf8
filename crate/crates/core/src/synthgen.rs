//! Seeded synthetic syscall traces for the five behavior classes.
//!
//! Each class is a first-order Markov chain over a shared vocabulary plus a
//! pair of marker syscalls that recur, alternately, about every `mean_gap`
//! tokens. Markers are drawn from a cycle so that class `k` uses markers
//! `k` and `k + 1`: one marker alone is shared by two classes, and only a
//! window long enough to see both identifies the class. `local_signal`
//! controls how much the chains themselves differ between classes.
//!
//! Positions (marker gaps, window offsets) count real syscalls, i.e. the
//! stream after nanosleep filtering. Nanosleep records are sprinkled in on
//! top so that on average a `nanosleep_rate` fraction of all lines are
//! nanosleep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{BehaviorClass, NUM_CLASSES};
use crate::ingest::{format_manifest, is_valid_syscall_name, ManifestEntry};
use crate::seed::mix_seed;

pub const NANOSLEEP: &str = "nanosleep";
pub const DEFAULT_RATE: f64 = 2000.0;
/// Highest emission rate whose timestamps stay strictly increasing at
/// microsecond resolution.
pub const MAX_RATE: f64 = 100_000.0;

pub const DEFAULT_VOCABULARY: [&str; 48] = [
    "read", "write", "open", "close", "stat", "fstat", "lstat", "poll", "lseek", "mmap", "mprotect", "munmap",
    "brk", "rt_sigaction", "rt_sigprocmask", "ioctl", "pread64", "pwrite64", "readv", "writev", "access", "pipe",
    "select", "sched_yield", "madvise", "dup", "dup2", "getpid", "socket", "connect", "accept", "sendto",
    "recvfrom", "bind", "listen", "clone", "fork", "execve", "exit", "wait4", "kill", "uname", "fcntl",
    "getdents64", "rename", "unlink", "openat", "readlink",
];

/// Marker syscalls, deliberately absent from the default vocabulary.
pub const DEFAULT_MARKERS: [&str; NUM_CLASSES] = ["ptrace", "init_module", "memfd_create", "setns", "kexec_load"];

/// Syscalls each class favours when `local_signal > 0`.
fn heavy_syscalls(class: BehaviorClass) -> [&'static str; 5] {
    match class {
        BehaviorClass::Normal => ["read", "write", "poll", "select", "fstat"],
        BehaviorClass::Bashlite => ["socket", "connect", "sendto", "recvfrom", "fork"],
        BehaviorClass::TheTick => ["accept", "bind", "listen", "execve", "dup2"],
        BehaviorClass::Bdvl => ["getdents64", "lstat", "access", "uname", "readlink"],
        BehaviorClass::RansomwarePoC => ["openat", "rename", "unlink", "pwrite64", "lseek"],
    }
}

const PROCESSES: [&str; 4] = ["sensord", "python3", "sh", "busybox"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub first: String,
    pub second: String,
    /// Mean distance between consecutive markers, in real syscalls.
    pub mean_gap: f64,
    /// Gaps are uniform in `mean_gap * [1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: BehaviorClass,
    /// Row-stochastic matrix over the spec vocabulary.
    pub transitions: Vec<Vec<f64>>,
    pub marker: MarkerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub vocabulary: Vec<String>,
    /// One profile per class.
    pub classes: Vec<ClassProfile>,
    /// Expected fraction of output lines that are nanosleep.
    pub nanosleep_rate: f64,
    /// Real syscalls per second.
    pub rate: f64,
    pub seed: u64,
}

/// Parameters from which [`GeneratorSpec::from_template`] builds a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecTemplate {
    /// Weight in [0, 1] of the class-specific component of each chain.
    pub local_signal: f64,
    pub mean_gap: f64,
    pub gap_jitter: f64,
    pub nanosleep_rate: f64,
    pub rate: f64,
    pub seed: u64,
}

impl Default for SpecTemplate {
    fn default() -> Self {
        Self { local_signal: 0.1, mean_gap: 600.0, gap_jitter: 0.1, nanosleep_rate: 0.05, rate: DEFAULT_RATE, seed: 0 }
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::from_template(&SpecTemplate::default())
    }
}

/// Mixture of three random permutation matrices. Doubly stochastic, so every
/// state is visited equally often in the long run, and each state has at
/// most three successors.
fn base_matrix(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for w in [0.55, 0.3, 0.15] {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for (i, &j) in perm.iter().enumerate() {
            m[i][j] += w;
        }
    }
    m
}

impl GeneratorSpec {
    pub fn from_template(t: &SpecTemplate) -> Self {
        let vocabulary: Vec<String> = DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect();
        let n = vocabulary.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, 0x6a7]));
        let base = base_matrix(n, &mut rng);
        let lambda = t.local_signal;
        let classes = BehaviorClass::ALL
            .iter()
            .map(|&class| {
                let heavy: Vec<usize> = heavy_syscalls(class)
                    .iter()
                    .map(|h| vocabulary.iter().position(|v| v == h).expect("heavy syscall in vocabulary"))
                    .collect();
                let own = base_matrix(n, &mut rng);
                let transitions = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                let boost = if heavy.contains(&j) { 0.5 / heavy.len() as f64 } else { 0.0 };
                                (1.0 - lambda) * base[i][j] + lambda * (0.5 * own[i][j] + boost)
                            })
                            .collect()
                    })
                    .collect();
                let k = class.index();
                ClassProfile {
                    class,
                    transitions,
                    marker: MarkerSpec {
                        first: DEFAULT_MARKERS[k].into(),
                        second: DEFAULT_MARKERS[(k + 1) % NUM_CLASSES].into(),
                        mean_gap: t.mean_gap,
                        jitter: t.gap_jitter,
                    },
                }
            })
            .collect();
        Self { vocabulary, classes, nanosleep_rate: t.nanosleep_rate, rate: t.rate, seed: t.seed }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let n = self.vocabulary.len();
        if n == 0 {
            return bad("empty vocabulary".into());
        }
        for name in &self.vocabulary {
            if !is_valid_syscall_name(name) || name == NANOSLEEP {
                return bad(format!("vocabulary entry `{name}` is not a usable syscall name"));
            }
        }
        if !(self.rate > 0.0 && self.rate <= MAX_RATE) {
            return bad(format!("rate {} outside (0, {MAX_RATE}]", self.rate));
        }
        if !(0.0..1.0).contains(&self.nanosleep_rate) {
            return bad(format!("nanosleep rate {} outside [0, 1)", self.nanosleep_rate));
        }
        for class in BehaviorClass::ALL {
            if self.classes.iter().filter(|p| p.class == class).count() != 1 {
                return bad(format!("need exactly one profile for class {class}"));
            }
        }
        for p in &self.classes {
            if p.transitions.len() != n {
                return bad(format!("{}: transition matrix has {} rows, vocabulary has {n}", p.class, p.transitions.len()));
            }
            for (i, row) in p.transitions.iter().enumerate() {
                if row.len() != n || row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return bad(format!("{}: row {i} is not a probability row of length {n}", p.class));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("{}: row {i} sums to {sum}", p.class));
                }
            }
            let m = &p.marker;
            for name in [&m.first, &m.second] {
                if !is_valid_syscall_name(name) || name == NANOSLEEP {
                    return bad(format!("{}: bad marker `{name}`", p.class));
                }
            }
            if !(m.mean_gap >= 1.0 && m.mean_gap.is_finite()) || !(0.0..1.0).contains(&m.jitter) {
                return bad(format!("{}: marker gap {} / jitter {} invalid", p.class, m.mean_gap, m.jitter));
            }
        }
        Ok(())
    }

    pub fn profile(&self, class: BehaviorClass) -> &ClassProfile {
        self.classes.iter().find(|p| p.class == class).expect("validated spec has every class")
    }

    /// Seed of file `index` of `class`.
    pub fn file_seed(&self, class: BehaviorClass, index: usize) -> u64 {
        mix_seed(&[self.seed, class.index() as u64, index as u64])
    }
}

/// One synthetic trace, fully determined by `seed`. Emits
/// `round(duration * rate)` real syscalls plus nanosleep noise.
pub fn generate_file(spec: &GeneratorSpec, class: BehaviorClass, duration: f64, seed: u64) -> Result<String, SynthError> {
    spec.validate()?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(SynthError::InvalidSpec(format!("duration {duration} must be positive")));
    }
    let profile = spec.profile(class);
    let rows: Vec<WeightedIndex<f64>> = profile
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| SynthError::InvalidSpec(e.to_string())))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (duration * spec.rate).round() as usize;
    let q = spec.nanosleep_rate;
    let line_rate = spec.rate / (1.0 - q);

    let marker = &profile.marker;
    // Marker slots come from their own stream so that the chain below does
    // not depend on them.
    let mut marker_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let mut next_marker = (marker_rng.random::<f64>() * marker.mean_gap) as usize;
    let mut marker_is_first = marker_rng.random::<bool>();

    let process = PROCESSES[rng.random_range(0..PROCESSES.len())];
    let pid: u32 = rng.random_range(1000..32768);
    let mut t = 1.6e9 + rng.random_range(0..86_400) as f64;
    let mut state = rng.random_range(0..spec.vocabulary.len());
    let mut out = String::with_capacity(total * 36);
    let mut emit = |t: &mut f64, rng: &mut ChaCha8Rng, name: &str| {
        *t += (0.5 + rng.random::<f64>()) / line_rate;
        writeln!(out, "{:.6} {process} {pid} {name}", *t).expect("write to string");
    };
    for slot in 0..total {
        while q > 0.0 && rng.random::<f64>() < q {
            emit(&mut t, &mut rng, NANOSLEEP);
        }
        if slot == next_marker {
            let name = if marker_is_first { &marker.first } else { &marker.second };
            emit(&mut t, &mut rng, name);
            marker_is_first = !marker_is_first;
            let span = marker.mean_gap * (1.0 + marker.jitter * (2.0 * marker_rng.random::<f64>() - 1.0));
            next_marker += (span.round() as usize).max(1);
        } else {
            emit(&mut t, &mut rng, &spec.vocabulary[state]);
            state = rows[state].sample(&mut rng);
        }
    }
    Ok(out)
}

/// Writes `files_per_class` traces per class under `root/<Class>/`, plus a
/// `manifest.tsv`, and returns the manifest.
pub fn generate_dataset(
    spec: &GeneratorSpec,
    root: &Path,
    files_per_class: usize,
    duration: f64,
) -> Result<Vec<ManifestEntry>, SynthError> {
    spec.validate()?;
    if files_per_class == 0 {
        return Err(SynthError::InvalidSpec("files_per_class must be >= 1".into()));
    }
    for class in BehaviorClass::ALL {
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let jobs: Vec<(BehaviorClass, usize)> = BehaviorClass::ALL
        .iter()
        .flat_map(|&c| (0..files_per_class).map(move |i| (c, i)))
        .collect();
    let mut manifest = jobs
        .par_iter()
        .map(|&(class, i)| {
            let path = root.join(class.name()).join(format!("trace_{i:05}.log"));
            let text = generate_file(spec, class, duration, spec.file_seed(class, i))?;
            fs::write(&path, text).map_err(io_err(&path))?;
            Ok(ManifestEntry { path, class })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    manifest.sort();
    let mpath = root.join("manifest.tsv");
    fs::write(&mpath, format_manifest(root, &manifest)).map_err(io_err(&mpath))?;
    Ok(manifest)
}
