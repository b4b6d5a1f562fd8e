//! Longest-common-subsequence alignment over token surfaces.

use crate::text::TokenSeq;

/// Aligns `a` and `b` on a longest common subsequence of their surfaces and
/// returns the matched index pairs, strictly increasing in both coordinates.
///
/// Several subsequences can share the maximal length; the backtrace breaks
/// ties deterministically so extraction is a pure function of its inputs.
/// Walking back from the end of both sequences it prefers, in order: taking
/// a surface match, stepping over a token of `a`, stepping over a token of
/// `b`.
pub fn lcs_align(a: &TokenSeq, b: &TokenSeq) -> Vec<(usize, usize)> {
    let n = a.len();
    let m = b.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let at = a.tokens();
    let bt = b.tokens();
    let w = m + 1;
    let mut dp = vec![0u32; (n + 1) * w];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * w + j] = if at[i - 1].surface() == bt[j - 1].surface() {
                dp[(i - 1) * w + (j - 1)] + 1
            } else {
                dp[(i - 1) * w + j].max(dp[i * w + (j - 1)])
            };
        }
    }
    let mut pairs = Vec::with_capacity(dp[n * w + m] as usize);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if at[i - 1].surface() == bt[j - 1].surface() {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[(i - 1) * w + j] >= dp[i * w + (j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}
