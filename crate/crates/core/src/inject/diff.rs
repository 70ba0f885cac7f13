//! Word-level edit regions between a memory and its manipulated version.

/// Number of disjoint edit regions in a word-level diff of `a` and `b`.
///
/// The diff aligns on a longest common subsequence of whitespace tokens; an
/// edit region is a maximal run of inserted and/or deleted tokens.
pub fn edit_regions(a: &str, b: &str) -> usize {
    let x: Vec<&str> = a.split_whitespace().collect();
    let y: Vec<&str> = b.split_whitespace().collect();
    let (n, m) = (x.len(), y.len());
    // lcs[i][j] = LCS length of x[i..] and y[j..]
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if x[i] == y[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut regions = 0;
    let mut in_edit = false;
    while i < n || j < m {
        if i < n && j < m && x[i] == y[j] {
            i += 1;
            j += 1;
            in_edit = false;
            continue;
        }
        if !in_edit {
            regions += 1;
            in_edit = true;
        }
        if j >= m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    regions
}
