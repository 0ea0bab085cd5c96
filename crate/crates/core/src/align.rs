//! Word alignments to target-order position sequences.
//!
//! Alignments arrive in Pharaoh format (`"i-j"` pairs, source index first).
//! Each source word gets the slot it would occupy if the sentence were
//! rewritten in target order: aligned words are keyed by their smallest
//! aligned target index (ties by source index), unaligned words keep their
//! own index, and aligned words fill the remaining slots in key order.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::positional::PositionalTable;

/// Word links for one sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSet {
    links: BTreeSet<(usize, usize)>,
    src_len: usize,
    tgt_len: usize,
}

impl AlignmentSet {
    pub fn new(src_len: usize, tgt_len: usize, links: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(s, t)) = links.iter().find(|&&(s, t)| s >= src_len || t >= tgt_len) {
            return Err(Error::Invalid(format!(
                "link {s}-{t} outside a {src_len}x{tgt_len} sentence pair"
            )));
        }
        Ok(AlignmentSet { links, src_len, tgt_len })
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_len
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (s, t) in &self.links {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{s}-{t}")?;
            first = false;
        }
        Ok(())
    }
}

/// Parses one Pharaoh line. `line_no` is 1-based and only used in errors.
pub fn parse_alignment_line(text: &str, src_len: usize, tgt_len: usize, line_no: usize) -> Result<AlignmentSet> {
    let mut links = BTreeSet::new();
    for pair in text.split_whitespace() {
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let (s, t) = pair
            .split_once('-')
            .ok_or_else(|| bad(format!("malformed alignment pair {pair:?}")))?;
        let s: usize = s.parse().map_err(|_| bad(format!("malformed alignment pair {pair:?}")))?;
        let t: usize = t.parse().map_err(|_| bad(format!("malformed alignment pair {pair:?}")))?;
        if s >= src_len || t >= tgt_len {
            return Err(bad(format!(
                "pair {pair} exceeds sentence lengths (source {src_len}, target {tgt_len})"
            )));
        }
        links.insert((s, t));
    }
    Ok(AlignmentSet { links, src_len, tgt_len })
}

/// Target-order slot for every source position; always a permutation of `0..J`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PositionSequence(Vec<usize>);

impl PositionSequence {
    pub fn new(positions: Vec<usize>) -> Result<Self> {
        let n = positions.len();
        let mut seen = vec![false; n];
        for &p in &positions {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Invalid(format!("{positions:?} is not a permutation of 0..{n}")));
            }
        }
        Ok(PositionSequence(positions))
    }

    pub fn identity(len: usize) -> Self {
        PositionSequence((0..len).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> PositionSequence {
        let mut inv = vec![0; self.0.len()];
        for (j, &r) in self.0.iter().enumerate() {
            inv[r] = j;
        }
        PositionSequence(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(j, &r)| j == r)
    }

    /// Number of pairs `j < k` with `r_j > r_k`.
    pub fn inversions(&self) -> usize {
        let r = &self.0;
        (0..r.len())
            .map(|j| r[j + 1..].iter().filter(|&&x| x < r[j]).count())
            .sum()
    }

    /// Inversions divided by `J(J-1)/2`; 0 for sentences shorter than two words.
    pub fn kendall_tau_distance(&self) -> f64 {
        let n = self.0.len();
        if n < 2 {
            return 0.0;
        }
        self.inversions() as f64 / (n * (n - 1) / 2) as f64
    }
}

impl fmt::Display for PositionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

pub fn derive_reordered_positions(alignment: &AlignmentSet) -> PositionSequence {
    let n = alignment.src_len;
    let mut key: Vec<Option<usize>> = vec![None; n];
    for (s, t) in alignment.links() {
        key[s] = Some(key[s].map_or(t, |k| k.min(t)));
    }
    let mut positions = vec![0; n];
    let mut taken = vec![false; n];
    for j in 0..n {
        if key[j].is_none() {
            positions[j] = j;
            taken[j] = true;
        }
    }
    let mut aligned: Vec<usize> = (0..n).filter(|&j| key[j].is_some()).collect();
    aligned.sort_by_key(|&j| (key[j], j));
    let free = (0..n).filter(|&s| !taken[s]);
    for (j, slot) in aligned.into_iter().zip(free) {
        positions[j] = slot;
    }
    PositionSequence(positions)
}

/// Scatters `tokens[j]` to `out[r_j]`.
pub fn reorder_tokens<T: Clone>(tokens: &[T], positions: &PositionSequence) -> Result<Vec<T>> {
    if tokens.len() != positions.len() {
        return Err(Error::shape(
            "reorder_tokens",
            format!("{} tokens vs {} positions", tokens.len(), positions.len()),
        ));
    }
    let mut out: Vec<Option<T>> = vec![None; tokens.len()];
    for (tok, &r) in tokens.iter().zip(positions.as_slice()) {
        out[r] = Some(tok.clone());
    }
    Ok(out.into_iter().map(|t| t.expect("positions form a permutation")).collect())
}

/// Rows of the sinusoid table at `r_1..r_J`, concatenated (`J × d_model`).
pub fn supervised_position_embeddings(positions: &PositionSequence, d_model: usize) -> Result<Vec<f64>> {
    let table = PositionalTable::sinusoidal(positions.len().max(1), d_model)?;
    supervised_position_embeddings_from(positions, &table)
}

pub fn supervised_position_embeddings_from(positions: &PositionSequence, table: &PositionalTable) -> Result<Vec<f64>> {
    if positions.len() > table.max_len() {
        return Err(Error::Invalid(format!(
            "sentence of length {} exceeds positional table of {}",
            positions.len(),
            table.max_len()
        )));
    }
    Ok(positions.as_slice().iter().flat_map(|&r| table.row(r).iter().copied()).collect())
}
