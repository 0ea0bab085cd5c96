//! Corpus BLEU, token accuracy and the positional similarity diagnostic.

use std::collections::HashMap;
use std::hash::Hash;

use crate::align::supervised_position_embeddings_from;
use crate::autodiff::{cosine, Tape};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, SourceBatch};
use crate::train::Dataset;

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram statistics of one corpus: `(matches[n], totals[n], hyp_len, ref_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::CountMismatch { what: "hypothesis/reference lines", left: hyps.len(), right: refs.len() });
    }
    if hyps.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus".into()));
    }
    let mut s = BleuStats { matches: [0; MAX_ORDER], totals: [0; MAX_ORDER], hyp_len: 0, ref_len: 0 };
    for (h, r) in hyps.iter().zip(refs) {
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            s.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Score in `[0, 100]`; any zero precision gives 0 (no smoothing).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus-level BLEU-4 with a single reference per line.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

/// BLEU over whitespace-tokenised lines.
pub fn corpus_bleu_lines<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    let split = |xs: &[S]| -> Vec<Vec<String>> {
        xs.iter().map(|l| l.as_ref().split_whitespace().map(str::to_owned).collect()).collect()
    };
    corpus_bleu(&split(hyps), &split(refs))
}

/// Fraction of reference positions reproduced exactly; surplus hypothesis
/// tokens count as errors.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::CountMismatch { what: "hypothesis/reference lines", left: hyps.len(), right: refs.len() });
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        return Err(Error::Invalid("token accuracy of an empty corpus".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Which embedding is compared against the supervised target-order rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimSource {
    /// The model's final reordering embedding `PR^N`.
    Predicted,
    /// The plain source-order sinusoid at each word's own index.
    Plain,
}

/// Mean over all source words of `cos(x_j, re_j)`.
pub fn sim_metric(model: &Model, data: &Dataset, source: SimSource) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("similarity over an empty corpus".into()));
    }
    if source == SimSource::Predicted && !model.config().variant.reorders() {
        return Err(Error::Invalid(format!("the {} variant predicts no positions", model.config().variant)));
    }
    let d = model.config().d_model;
    let mut sum = 0.0;
    let mut words = 0usize;
    for chunk in data.pairs.chunks(64) {
        let mut re = Vec::new();
        for p in chunk {
            let r = p
                .positions
                .as_ref()
                .ok_or_else(|| Error::Invalid("similarity needs reordered positions for every sentence".into()))?;
            if r.len() != p.src.len() {
                return Err(Error::CountMismatch { what: "positions/source words", left: r.len(), right: p.src.len() });
            }
            re.extend(supervised_position_embeddings_from(r, model.table())?);
        }
        let rows = match source {
            SimSource::Predicted => {
                let tape = Tape::new(0);
                let params = model.bind(&tape);
                let srcs: Vec<&[usize]> = chunk.iter().map(|p| p.src.as_slice()).collect();
                let enc = model.encode(&params, &SourceBatch::new(&srcs), &ForwardOptions::eval())?;
                enc.final_reorder_embedding().expect("reordering variant").value()
            }
            SimSource::Plain => {
                let mut v = Vec::new();
                for p in chunk {
                    for j in 0..p.src.len() {
                        v.extend_from_slice(model.table().row(j));
                    }
                }
                v
            }
        };
        for (a, b) in rows.chunks(d).zip(re.chunks(d)) {
            sum += cosine(a, b);
            words += 1;
        }
    }
    Ok(sum / words as f64)
}
