//! Deterministic parallel accumulation.
//!
//! Rows are grouped into fixed-size blocks; blocks are summed serially and
//! combined along a binary tree whose shape depends only on the row count,
//! so results are bit-identical for any number of threads.

use std::ops::Range;

/// Rows per leaf block.
pub const BLOCK_ROWS: usize = 1024;

/// Sums per-row contributions over `0..n` into a vector of length `width`.
///
/// `accumulate` receives a row range and must add that range's contribution
/// into the buffer it is given (initially zero), visiting rows in order.
pub fn block_sum<F>(n: usize, width: usize, accumulate: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let blocks = n.div_ceil(BLOCK_ROWS);
    if blocks == 0 {
        return vec![0.0; width];
    }
    tree(0..blocks, n, width, &accumulate)
}

fn tree<F>(blocks: Range<usize>, n: usize, width: usize, accumulate: &F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    if blocks.len() == 1 {
        let b = blocks.start;
        let mut acc = vec![0.0; width];
        accumulate(b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n), &mut acc);
        return acc;
    }
    let mid = blocks.start + blocks.len() / 2;
    let (mut left, right) = rayon::join(
        || tree(blocks.start..mid, n, width, accumulate),
        || tree(mid..blocks.end, n, width, accumulate),
    );
    for (l, r) in left.iter_mut().zip(&right) {
        *l += r;
    }
    left
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_serial_sum_for_integers() {
        let n = 5 * BLOCK_ROWS + 17;
        let out = block_sum(n, 2, |rows, acc| {
            for i in rows {
                acc[0] += i as f64;
                acc[1] += 1.0;
            }
        });
        assert_eq!(out[0], (n * (n - 1) / 2) as f64);
        assert_eq!(out[1], n as f64);
    }

    #[test]
    fn independent_of_thread_count() {
        let n = 9 * BLOCK_ROWS + 3;
        let f = |rows: Range<usize>, acc: &mut [f64]| {
            for i in rows {
                acc[0] += (i as f64).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
            }
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| block_sum(n, 1, f));
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| block_sum(n, 1, f));
        assert_eq!(one[0].to_bits(), many[0].to_bits());
    }

    #[test]
    fn empty_range_is_zero() {
        assert_eq!(block_sum(0, 3, |_, _| unreachable!()), vec![0.0; 3]);
    }
}
