//! Exact-substring deduplication over a small corpus: any span of at least
//! `min_len` symbols that already occurred earlier in the corpus is removed.

/// Suffix array by prefix doubling, `O(n log^2 n)`.
pub fn suffix_array(text: &[u64]) -> Vec<usize> {
    let n = text.len();
    let mut sa: Vec<usize> = (0..n).collect();
    if n <= 1 {
        return sa;
    }
    let mut rank: Vec<u64> = text.to_vec();
    let mut tmp = vec![0u64; n];
    let mut k = 1;
    loop {
        let key = |i: usize, rank: &[u64]| (rank[i], if i + k < n { rank[i + k] + 1 } else { 0 });
        sa.sort_unstable_by_key(|&i| key(i, &rank));
        tmp[sa[0]] = 0;
        for w in 1..n {
            let bump = key(sa[w - 1], &rank) != key(sa[w], &rank);
            tmp[sa[w]] = tmp[sa[w - 1]] + bump as u64;
        }
        std::mem::swap(&mut rank, &mut tmp);
        if rank[sa[n - 1]] as usize == n - 1 {
            break;
        }
        k *= 2;
    }
    sa
}

/// Kasai: `lcp[r]` is the common prefix of suffixes `sa[r - 1]` and `sa[r]`.
pub fn lcp_array(text: &[u64], sa: &[usize]) -> Vec<usize> {
    let n = text.len();
    let mut rank = vec![0; n];
    for (r, &i) in sa.iter().enumerate() {
        rank[i] = r;
    }
    let mut lcp = vec![0; n];
    let mut h = 0usize;
    for i in 0..n {
        if rank[i] == 0 {
            h = 0;
            continue;
        }
        let j = sa[rank[i] - 1];
        while i + h < n && j + h < n && text[i + h] == text[j + h] {
            h += 1;
        }
        lcp[rank[i]] = h;
        h = h.saturating_sub(1);
    }
    lcp
}

struct RangeMin {
    table: Vec<Vec<usize>>,
}

impl RangeMin {
    fn new(v: &[usize]) -> Self {
        let mut table = vec![v.to_vec()];
        let mut w = 1;
        while 2 * w <= v.len() {
            let prev = table.last().expect("non-empty");
            let next = (0..=v.len() - 2 * w)
                .map(|i| prev[i].min(prev[i + w]))
                .collect();
            table.push(next);
            w *= 2;
        }
        Self { table }
    }

    /// Minimum over `lo..hi` (non-empty).
    fn min(&self, lo: usize, hi: usize) -> usize {
        let len = hi - lo;
        let level = usize::BITS as usize - 1 - len.leading_zeros() as usize;
        self.table[level][lo].min(self.table[level][hi - (1 << level)])
    }
}

/// For every position `i`, the longest common prefix between the suffix at
/// `i` and any suffix starting before `i`.
pub fn longest_previous_factor(text: &[u64]) -> Vec<usize> {
    let n = text.len();
    if n == 0 {
        return Vec::new();
    }
    let sa = suffix_array(text);
    let lcp = lcp_array(text, &sa);
    let rmq = RangeMin::new(&lcp);
    // nearest rank on each side whose suffix starts earlier in the text
    let mut prev = vec![None; n];
    let mut next = vec![None; n];
    let mut stack: Vec<usize> = Vec::new();
    for r in 0..n {
        while stack.last().is_some_and(|&t| sa[t] > sa[r]) {
            next[stack.pop().expect("non-empty")] = Some(r);
        }
        prev[r] = stack.last().copied();
        stack.push(r);
    }
    let mut lpf = vec![0; n];
    for r in 0..n {
        let left = prev[r].map_or(0, |p| rmq.min(p + 1, r + 1));
        let right = next[r].map_or(0, |q| rmq.min(r + 1, q + 1));
        lpf[sa[r]] = left.max(right);
    }
    lpf
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupOutcome<T> {
    pub docs: Vec<Vec<T>>,
    /// Symbols removed from each document.
    pub removed: Vec<usize>,
}

/// Removes from every document the spans (length `>= min_len`) that also
/// occur earlier in the corpus, including earlier in the same document.
/// Matches never cross document boundaries.
pub fn exact_substring_dedup<T: Copy + Into<u64>>(docs: &[Vec<T>], min_len: usize) -> DedupOutcome<T> {
    let min_len = min_len.max(1);
    let sep_base = u32::MAX as u64 + 1;
    let mut text = Vec::new();
    let mut starts = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        starts.push(text.len());
        text.extend(doc.iter().map(|&t| t.into()));
        text.push(sep_base + d as u64);
    }
    let lpf = longest_previous_factor(&text);
    let mut dup = vec![false; text.len()];
    let mut reach = 0usize;
    for (i, &l) in lpf.iter().enumerate() {
        if l >= min_len {
            reach = reach.max(i + l);
        }
        if i < reach {
            dup[i] = true;
        }
    }
    let mut out = Vec::with_capacity(docs.len());
    let mut removed = Vec::with_capacity(docs.len());
    for (doc, &s) in docs.iter().zip(&starts) {
        let kept: Vec<T> = doc
            .iter()
            .enumerate()
            .filter(|(k, _)| !dup[s + k])
            .map(|(_, &t)| t)
            .collect();
        removed.push(doc.len() - kept.len());
        out.push(kept);
    }
    DedupOutcome { docs: out, removed }
}

/// Character-level deduplication of text documents.
pub fn dedup_texts(texts: &[String], min_chars: usize) -> DedupOutcome<char> {
    let docs: Vec<Vec<char>> = texts.iter().map(|t| t.chars().collect()).collect();
    exact_substring_dedup(&docs, min_chars)
}
