//! Direct construction of the compressed attention layout, without
//! materializing the `C x C` mask.

use std::ops::Range;

use super::mask::{random_block_rows, AttentionPattern, RowLayout};
use super::ModelError;

/// Consecutive query rows whose keys are processed as one dense tile.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RowBlock {
    pub rows: Range<usize>,
    /// Sorted union of the rows' admitted keys.
    pub keys: Vec<u32>,
    /// Row-major `rows.len() x keys.len()` admission flags.
    pub admit: Vec<bool>,
}

const MAX_BLOCK_ROWS: usize = 64;
/// Minimum fraction of admitted pairs in a tile.
const MIN_FILL: f64 = 0.6;

fn merge(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Greedily groups rows `0..rows` of `layout` into tiles that stay at least
/// `MIN_FILL` admitted, so sparse patterns keep their cost advantage.
pub(crate) fn row_blocks(layout: &RowLayout, rows: usize) -> Vec<RowBlock> {
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < rows {
        let mut keys = layout.keys(start).to_vec();
        let mut pairs = keys.len();
        let mut end = start + 1;
        while end < rows && end - start < MAX_BLOCK_ROWS {
            let row = layout.keys(end);
            let union = merge(&keys, row);
            if ((pairs + row.len()) as f64) < MIN_FILL * ((end - start + 1) * union.len()) as f64 {
                break;
            }
            keys = union;
            pairs += row.len();
            end += 1;
        }
        let mut admit = vec![false; (end - start) * keys.len()];
        for (r, flags) in (start..end).zip(admit.chunks_exact_mut(keys.len().max(1))) {
            let mut pos = 0;
            for &k in layout.keys(r) {
                while keys[pos] != k {
                    pos += 1;
                }
                flags[pos] = true;
            }
        }
        blocks.push(RowBlock { rows: start..end, keys, admit });
        start = end;
    }
    blocks
}

/// Admitted keys for query rows `0..rows` of a window with `valid_len` real
/// positions. Equal to `build_mask(..).to_layout(rows)` but O(admitted pairs).
pub fn build_layout(
    pattern: &AttentionPattern,
    context: usize,
    valid_len: usize,
    rows: usize,
) -> Result<RowLayout, ModelError> {
    pattern.validate(context)?;
    if valid_len > context || rows > valid_len {
        return Err(ModelError::InvalidPattern(format!(
            "rows {rows} / valid_len {valid_len} / context {context} inconsistent"
        )));
    }
    let n = valid_len;
    let mut offsets = Vec::with_capacity(rows + 1);
    let mut keys: Vec<u32> = Vec::new();
    offsets.push(0);
    match *pattern {
        AttentionPattern::Dense => {
            for _ in 0..rows {
                keys.extend(0..n as u32);
                offsets.push(keys.len());
            }
        }
        AttentionPattern::SlidingWindow { window, global } => {
            let g = global.min(n);
            for i in 0..rows {
                if i < global {
                    keys.extend(0..n as u32);
                } else {
                    let lo = i.saturating_sub(window).max(g);
                    let hi = i.saturating_add(window).min(n - 1);
                    keys.extend(0..g as u32);
                    keys.extend(lo as u32..=hi as u32);
                }
                offsets.push(keys.len());
            }
        }
        AttentionPattern::BlockSparse { block, window_blocks, random_blocks, global_blocks, seed } => {
            let blocks = context.div_ceil(block);
            let random = random_block_rows(blocks, window_blocks, random_blocks, global_blocks, seed);
            let key_blocks = n.div_ceil(block);
            for i in 0..rows {
                let qb = i / block;
                for kb in 0..key_blocks {
                    let admitted = qb < global_blocks
                        || kb < global_blocks
                        || qb.abs_diff(kb) <= window_blocks
                        || random[qb].binary_search(&kb).is_ok();
                    if admitted {
                        let end = ((kb + 1) * block).min(n);
                        keys.extend((kb * block) as u32..end as u32);
                    }
                }
                offsets.push(keys.len());
            }
        }
    }
    Ok(RowLayout { offsets, keys })
}
