//! Attention admissibility patterns.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which (query, key) pairs an attention layer may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionPattern {
    /// Every pair inside the valid prefix.
    Dense,
    /// `|i - j| <= window`, plus `global` leading positions that see and are
    /// seen by everything.
    SlidingWindow { window: usize, global: usize },
    /// Block-level rule over blocks of `block` tokens: neighbours within
    /// `window_blocks`, `global_blocks` leading blocks, and `random_blocks`
    /// seeded extra blocks per block row.
    BlockSparse {
        block: usize,
        window_blocks: usize,
        random_blocks: usize,
        global_blocks: usize,
        seed: u64,
    },
}

impl AttentionPattern {
    pub fn validate(&self, context: usize) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidPattern(msg));
        match *self {
            AttentionPattern::Dense => Ok(()),
            AttentionPattern::SlidingWindow { global, .. } => {
                if global > context {
                    return invalid(format!("global={global} exceeds context {context}"));
                }
                Ok(())
            }
            AttentionPattern::BlockSparse { block, global_blocks, .. } => {
                if block == 0 || block > context {
                    return invalid(format!("block size {block} must be in 1..={context}"));
                }
                if global_blocks * block > context {
                    return invalid(format!(
                        "{global_blocks} global blocks of {block} exceed context {context}"
                    ));
                }
                Ok(())
            }
        }
    }

    /// Whether position 0 (`[CLS]`) is global under this pattern.
    pub fn cls_is_global(&self) -> bool {
        match *self {
            AttentionPattern::Dense => true,
            AttentionPattern::SlidingWindow { global, .. } => global >= 1,
            AttentionPattern::BlockSparse { global_blocks, .. } => global_blocks >= 1,
        }
    }
}

impl fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionPattern::Dense => f.write_str("dense"),
            AttentionPattern::SlidingWindow { window, global } => write!(f, "sliding:w={window},g={global}"),
            AttentionPattern::BlockSparse { block, window_blocks, random_blocks, global_blocks, seed } => write!(
                f,
                "blocksparse:b={block},wb={window_blocks},r={random_blocks},gb={global_blocks},seed={seed}"
            ),
        }
    }
}

/// Parses `dense`, `sliding:w=32,g=1` or `blocksparse:b=64,wb=3,r=3,gb=1[,seed=N]`.
impl FromStr for AttentionPattern {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| ModelError::InvalidPattern(format!("`{s}`: {msg}"));
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v: u64 = v.trim().parse().map_err(|_| bad("non-integer value"))?;
            kv.insert(k.trim().to_string(), v);
        }
        let mut take = |key: &str, default: Option<u64>| -> Result<u64, ModelError> {
            kv.remove(key).or(default).ok_or_else(|| bad(&format!("missing `{key}`")))
        };
        let pattern = match kind.trim() {
            "dense" => AttentionPattern::Dense,
            "sliding" => AttentionPattern::SlidingWindow {
                window: take("w", None)? as usize,
                global: take("g", Some(1))? as usize,
            },
            "blocksparse" => AttentionPattern::BlockSparse {
                block: take("b", None)? as usize,
                window_blocks: take("wb", Some(1))? as usize,
                random_blocks: take("r", Some(0))? as usize,
                global_blocks: take("gb", Some(1))? as usize,
                seed: take("seed", Some(0))?,
            },
            _ => return Err(bad("unknown pattern kind")),
        };
        if let Some(extra) = kv.keys().next() {
            return Err(bad(&format!("unknown parameter `{extra}`")));
        }
        Ok(pattern)
    }
}

/// Dense `C x C` admissibility matrix, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.bits[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.bits[query * self.size..(query + 1) * self.size]
    }

    /// Number of admitted pairs.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Compressed row form: admitted key indices per query, ascending.
    pub fn to_layout(&self, rows: usize) -> RowLayout {
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for i in 0..rows {
            keys.extend(
                self.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j as u32),
            );
            offsets.push(keys.len());
        }
        RowLayout { offsets, keys }
    }
}

/// Admitted keys per query row, in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    pub offsets: Vec<usize>,
    pub keys: Vec<u32>,
}

impl RowLayout {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, row: usize) -> &[u32] {
        &self.keys[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

/// Random block set per block row: `rows[I]` lists the extra key blocks.
pub(super) fn random_block_rows(
    blocks: usize,
    window_blocks: usize,
    random_blocks: usize,
    global_blocks: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..blocks)
        .map(|row| {
            if random_blocks == 0 || row < global_blocks {
                return Vec::new();
            }
            let mut candidates: Vec<usize> = (0..blocks)
                .filter(|&col| row.abs_diff(col) > window_blocks && col >= global_blocks)
                .collect();
            let take = random_blocks.min(candidates.len());
            let (chosen, _) = candidates.partial_shuffle(&mut rng, take);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

/// Builds the admissibility matrix for a window with `valid_len` real
/// positions. Rows and columns at or beyond `valid_len` are all false.
pub fn build_mask(
    pattern: &AttentionPattern,
    context: usize,
    valid_len: usize,
) -> Result<AttentionMask, ModelError> {
    pattern.validate(context)?;
    if valid_len > context {
        return Err(ModelError::InvalidPattern(format!(
            "valid_len {valid_len} exceeds context {context}"
        )));
    }
    let mut bits = vec![false; context * context];
    match *pattern {
        AttentionPattern::Dense => {
            for i in 0..valid_len {
                bits[i * context..i * context + valid_len].fill(true);
            }
        }
        AttentionPattern::SlidingWindow { window, global } => {
            for i in 0..valid_len {
                let row = &mut bits[i * context..i * context + valid_len];
                if i < global {
                    row.fill(true);
                    continue;
                }
                let lo = i.saturating_sub(window);
                let hi = i.saturating_add(window).min(valid_len - 1);
                row[lo..=hi].fill(true);
                row[..global.min(valid_len)].fill(true);
            }
        }
        AttentionPattern::BlockSparse { block, window_blocks, random_blocks, global_blocks, seed } => {
            let blocks = context.div_ceil(block);
            let random = random_block_rows(blocks, window_blocks, random_blocks, global_blocks, seed);
            let admits = |qi: usize, kj: usize| {
                qi.abs_diff(kj) <= window_blocks
                    || qi < global_blocks
                    || kj < global_blocks
                    || random[qi].binary_search(&kj).is_ok()
            };
            for i in 0..valid_len {
                for j in 0..valid_len {
                    bits[i * context + j] = admits(i / block, j / block);
                }
            }
        }
    }
    Ok(AttentionMask { size: context, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn as_rows(mask: &AttentionMask) -> Vec<Vec<u8>> {
        (0..mask.size()).map(|i| mask.row(i).iter().map(|&b| b as u8).collect()).collect()
    }

    #[test]
    fn dense_is_all_true() {
        let m = build_mask(&AttentionPattern::Dense, 4, 4).unwrap();
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn sliding_band() {
        let m = build_mask(&AttentionPattern::SlidingWindow { window: 1, global: 0 }, 4, 4).unwrap();
        assert_eq!(
            as_rows(&m),
            vec![vec![1, 1, 0, 0], vec![1, 1, 1, 0], vec![0, 1, 1, 1], vec![0, 0, 1, 1]]
        );
        let wide = build_mask(&AttentionPattern::SlidingWindow { window: 4, global: 0 }, 4, 4).unwrap();
        assert_eq!(wide, build_mask(&AttentionPattern::Dense, 4, 4).unwrap());
    }

    #[test]
    fn sliding_with_global_cls() {
        let m = build_mask(&AttentionPattern::SlidingWindow { window: 0, global: 1 }, 4, 3).unwrap();
        assert_eq!(
            as_rows(&m),
            vec![vec![1, 1, 1, 0], vec![1, 1, 0, 0], vec![1, 0, 1, 0], vec![0, 0, 0, 0]]
        );
    }

    #[test]
    fn block_sparse_enumerated() {
        let p = AttentionPattern::BlockSparse { block: 2, window_blocks: 1, random_blocks: 0, global_blocks: 1, seed: 0 };
        // Three blocks. Block 0 is global; block 1 neighbours 0..=2; block 2
        // neighbours 1..=2 and sees block 0 through the global column.
        let m = build_mask(&p, 6, 6).unwrap();
        assert_eq!(m.count(), 36);

        // Four blocks: block 3 reaches block 0 (global) and 2..=3 but not 1.
        let m = build_mask(&p, 8, 8).unwrap();
        let expected_blocks = [[1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 1, 1], [1, 0, 1, 1]];
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.get(i, j), expected_blocks[i / 2][j / 2] == 1, "({i},{j})");
            }
        }
    }

    #[test]
    fn invalid_patterns() {
        assert!(build_mask(&AttentionPattern::SlidingWindow { window: 1, global: 5 }, 4, 4).is_err());
        let bad_block = AttentionPattern::BlockSparse { block: 0, window_blocks: 1, random_blocks: 0, global_blocks: 1, seed: 0 };
        assert!(build_mask(&bad_block, 4, 4).is_err());
        let too_global = AttentionPattern::BlockSparse { block: 2, window_blocks: 1, random_blocks: 0, global_blocks: 3, seed: 0 };
        assert!(build_mask(&too_global, 4, 4).is_err());
    }

    #[test]
    fn parse_and_display() {
        let p: AttentionPattern = "sliding:w=32,g=1".parse().unwrap();
        assert_eq!(p, AttentionPattern::SlidingWindow { window: 32, global: 1 });
        let p: AttentionPattern = "blocksparse:b=64,wb=3,r=3,gb=1".parse().unwrap();
        assert_eq!(p.to_string(), "blocksparse:b=64,wb=3,r=3,gb=1,seed=0");
        assert_eq!(p.to_string().parse::<AttentionPattern>().unwrap(), p);
        assert_eq!("dense".parse::<AttentionPattern>().unwrap(), AttentionPattern::Dense);
        assert!("sliding:g=1".parse::<AttentionPattern>().is_err());
        assert!("sliding:w=1,q=2".parse::<AttentionPattern>().is_err());
        assert!("conv".parse::<AttentionPattern>().is_err());
    }

    fn arb_pattern(context: usize) -> impl Strategy<Value = AttentionPattern> {
        prop_oneof![
            Just(AttentionPattern::Dense),
            (0..context + 2, 0..=context).prop_map(|(window, global)| AttentionPattern::SlidingWindow { window, global }),
            (1..=context, 0usize..4, 0usize..4, any::<u64>()).prop_flat_map(move |(block, wb, r, seed)| {
                (0..=context / block).prop_map(move |gb| AttentionPattern::BlockSparse {
                    block,
                    window_blocks: wb,
                    random_blocks: r,
                    global_blocks: gb,
                    seed,
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn mask_invariants((context, valid, pattern) in (2usize..40).prop_flat_map(|c| (Just(c), 1..=c, arb_pattern(c)))) {
            let m = build_mask(&pattern, context, valid).unwrap();
            for i in 0..context {
                let admitted = m.row(i).iter().filter(|&&b| b).count();
                if i < valid {
                    // no dead rows, diagonal admitted
                    prop_assert!(m.get(i, i));
                    prop_assert!(admitted >= 1);
                } else {
                    prop_assert_eq!(admitted, 0);
                }
                for j in valid..context {
                    prop_assert!(!m.get(i, j));
                }
            }
            // pure function of its inputs
            prop_assert_eq!(&m, &build_mask(&pattern, context, valid).unwrap());
        }

        #[test]
        fn sliding_mask_economy(context in 2usize..80, window in 0usize..10, global in 0usize..4) {
            let global = global.min(context);
            let m = build_mask(&AttentionPattern::SlidingWindow { window, global }, context, context).unwrap();
            prop_assert!(m.count() <= context * (2 * window + 1) + 2 * global * context);
        }

        #[test]
        fn random_blocks_stay_outside_window(seed in any::<u64>(), r in 1usize..4) {
            let rows = random_block_rows(10, 1, r, 1, seed);
            for (i, row) in rows.iter().enumerate() {
                let candidates = (0..10).filter(|&j| i >= 1 && i.abs_diff(j) > 1 && j >= 1).count();
                prop_assert_eq!(row.len(), r.min(candidates));
                for &j in row {
                    prop_assert!(i.abs_diff(j) > 1 && j >= 1);
                }
            }
        }
    }
}
