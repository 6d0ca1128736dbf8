//! Syscall vocabulary and context windowing.
//!
//! One token per syscall name. Ids 0..3 are reserved (`[PAD]`, `[UNK]`,
//! `[CLS]`); real names are numbered from 3 in order of first appearance.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::BehaviorClass;
use crate::ingest::SyscallSequence;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const FIRST_REAL_ID: u32 = 3;

const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let names: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
        Self { names, ids }
    }

    fn push(&mut self, name: &str) {
        if !self.ids.contains_key(name) {
            self.ids.insert(name.to_string(), self.names.len() as u32);
            self.names.push(name.to_string());
        }
    }

    /// Builds a vocabulary over every distinct name in `sequences`.
    pub fn build(sequences: &[SyscallSequence]) -> Result<Self, TokenizerError> {
        if sequences.iter().all(|s| s.syscalls.is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut vocab = Self::with_reserved();
        for name in sequences.iter().flat_map(|s| s.syscalls.iter()) {
            vocab.push(name);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, seq: &SyscallSequence) -> Vec<u32> {
        self.encode_names(&seq.syscalls)
    }

    pub fn encode_names<S: AsRef<str>>(&self, names: &[S]) -> Vec<u32> {
        names.iter().map(|n| self.id(n.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Maps ids back to names; out-of-range ids decode as `[UNK]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.name(id).unwrap_or(RESERVED[UNK as usize]))
            .collect()
    }

    /// `token<TAB>id` lines, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            let _ = writeln!(out, "{name}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, TokenizerError> {
        let mut vocab = Self { names: Vec::new(), ids: HashMap::new() };
        for (idx, line) in text.lines().enumerate() {
            let bad = |reason: &str| TokenizerError::BadVocabFile { line: idx + 1, reason: reason.into() };
            if line.is_empty() {
                continue;
            }
            let (name, id) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: u32 = id.parse().map_err(|_| bad("non-numeric id"))?;
            if id as usize != vocab.names.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            if let Some(&reserved) = RESERVED.get(id as usize) {
                if name != reserved {
                    return Err(bad("reserved token out of place"));
                }
            }
            if vocab.ids.contains_key(name) {
                return Err(bad("duplicate token"));
            }
            vocab.ids.insert(name.to_string(), id);
            vocab.names.push(name.to_string());
        }
        if vocab.names.len() < RESERVED.len() {
            return Err(TokenizerError::BadVocabFile { line: 0, reason: "missing reserved tokens".into() });
        }
        Ok(vocab)
    }

    /// SHA-256 of the serialized vocabulary; checkpoints record it.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_tsv().as_bytes()).into()
    }
}

/// Free-function form of [`Vocabulary::build`].
pub fn build_vocabulary(sequences: &[SyscallSequence]) -> Result<Vocabulary, TokenizerError> {
    Vocabulary::build(sequences)
}

pub fn encode(seq: &SyscallSequence, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(seq)
}

/// A fixed-length model input: `[CLS]`, up to `C - 1` syscall ids, then padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenWindow {
    pub ids: Vec<u32>,
    pub valid_len: usize,
    pub label: Option<BehaviorClass>,
    pub source: String,
    pub index: usize,
}

impl TokenWindow {
    pub fn context(&self) -> usize {
        self.ids.len()
    }

    /// The syscall ids, without `[CLS]` and padding.
    pub fn payload(&self) -> &[u32] {
        &self.ids[1..self.valid_len]
    }

    /// Builds a window from payload ids. Panics if the payload does not fit.
    pub fn from_payload(payload: &[u32], context: usize, label: Option<BehaviorClass>) -> Self {
        assert!(context >= 2 && payload.len() < context, "payload does not fit the context");
        let mut ids = Vec::with_capacity(context);
        ids.push(CLS);
        ids.extend_from_slice(payload);
        let valid_len = ids.len();
        ids.resize(context, PAD);
        Self { ids, valid_len, label, source: String::new(), index: 0 }
    }
}

/// Cuts `ids` into windows of `context` tokens starting every `stride` ids.
/// A trailing partial window is kept whenever it holds at least one id.
pub fn window(
    ids: &[u32],
    context: usize,
    stride: usize,
    label: Option<BehaviorClass>,
    source: &str,
) -> Vec<TokenWindow> {
    assert!(context >= 2, "context must be at least 2");
    assert!(stride >= 1, "stride must be positive");
    let payload = context - 1;
    (0..ids.len())
        .step_by(stride)
        .enumerate()
        .map(|(index, start)| {
            let end = (start + payload).min(ids.len());
            let mut w = TokenWindow::from_payload(&ids[start..end], context, label);
            w.source = source.to_string();
            w.index = index;
            w
        })
        .collect()
}

/// Encodes each sequence and cuts it into non-overlapping windows. With
/// `full_only`, trailing windows shorter than `context` are dropped.
pub fn window_sequences(
    sequences: &[SyscallSequence],
    vocab: &Vocabulary,
    context: usize,
    full_only: bool,
) -> Vec<TokenWindow> {
    sequences
        .iter()
        .flat_map(|s| {
            let mut ws = window(&vocab.encode(s), context, context - 1, s.label, &s.source);
            if full_only {
                ws.retain(|w| w.valid_len == context);
            }
            ws
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(names: &[&str]) -> SyscallSequence {
        SyscallSequence { syscalls: names.iter().map(|s| s.to_string()).collect(), label: None, source: "t".into() }
    }

    #[test]
    fn vocabulary_first_appearance() {
        let v = build_vocabulary(&[seq(&["read", "write", "read"])]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.to_tsv(), "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\nread\t3\nwrite\t4\n");
        assert_eq!(build_vocabulary(&[seq(&[])]), Err(TokenizerError::EmptyCorpus));
        assert_eq!(build_vocabulary(&[]), Err(TokenizerError::EmptyCorpus));

        let v2 = build_vocabulary(&[seq(&["read", "open"]), seq(&["open", "read", "close"])]).unwrap();
        assert_eq!(v2.len(), 6);
        assert_eq!(v2.id("close"), Some(5));
    }

    #[test]
    fn encode_with_unknowns() {
        let v = build_vocabulary(&[seq(&["read", "write", "read"])]).unwrap();
        assert_eq!(encode(&seq(&["read", "write"]), &v), [3, 4]);
        assert_eq!(encode(&seq(&["read", "mystery"]), &v), [3, 1]);
        assert!(encode(&seq(&[]), &v).is_empty());
        assert_eq!(v.decode(&[3, 4, 99]), ["read", "write", "[UNK]"]);
    }

    #[test]
    fn vocab_file_round_trip_and_rejects() {
        let v = build_vocabulary(&[seq(&["read", "write", "mmap"])]).unwrap();
        let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::from_tsv("[PAD]\t0\n[UNK]\t1\n").is_err());
        assert!(Vocabulary::from_tsv("[PAD]\t0\n[UNK]\t1\n[CLS]\t2\nread\t4\n").is_err());
        assert!(Vocabulary::from_tsv("read\t0\n").is_err());
    }

    #[test]
    fn window_examples() {
        let ids = [10, 11, 12, 13, 14, 15];
        let ws = window(&ids, 4, 3, None, "f");
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].ids, [CLS, 10, 11, 12]);
        assert_eq!(ws[1].ids, [CLS, 13, 14, 15]);
        assert_eq!(ws[1].index, 1);

        let ws = window(&[10, 11], 4, 3, Some(BehaviorClass::Bdvl), "f");
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].ids, [CLS, 10, 11, PAD]);
        assert_eq!(ws[0].valid_len, 3);
        assert_eq!(ws[0].label, Some(BehaviorClass::Bdvl));

        assert!(window(&[], 4, 3, None, "f").is_empty());

        let long = vec![5u32; 23000];
        let ws = window(&long, 4096, 4095, None, "f");
        // ceil(23000 / 4095) = 6
        assert_eq!(ws.len(), 6);
        assert_eq!(ws[5].valid_len, 1 + 23000 - 5 * 4095);
    }

    proptest! {
        #[test]
        fn lossless_tiling(ids in proptest::collection::vec(3u32..50, 0..300), context in 2usize..40) {
            let ws = window(&ids, context, context - 1, None, "p");
            let rebuilt: Vec<u32> = ws.iter().flat_map(|w| w.payload().to_vec()).collect();
            prop_assert_eq!(&rebuilt, &ids);
            if !ids.is_empty() {
                prop_assert_eq!(ws.len(), ids.len().div_ceil(context - 1));
            }
            for w in &ws {
                prop_assert_eq!(w.ids.len(), context);
                prop_assert_eq!(w.ids[0], CLS);
                prop_assert!(w.valid_len >= 1 && w.valid_len <= context);
                prop_assert!(w.ids[w.valid_len..].iter().all(|&t| t == PAD));
            }
        }

        #[test]
        fn encode_decode_identity(names in proptest::collection::vec("[a-z_]{1,8}", 1..40)) {
            let s = SyscallSequence { syscalls: names.clone(), label: None, source: String::new() };
            let v = build_vocabulary(std::slice::from_ref(&s)).unwrap();
            let ids = v.encode(&s);
            prop_assert_eq!(v.decode(&ids), names.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}
