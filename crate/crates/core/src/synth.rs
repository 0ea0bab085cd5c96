//! Synthetic translation tasks with a known word-order divergence.
//!
//! A target sentence is the source sentence permuted by a fixed,
//! length-parametric rule and then relabelled token by token through a
//! bijective substitution. Alignments are therefore exact one-to-one links.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{AlignmentSet, PositionSequence};
use crate::corpus::{write_lines, Corpus, SentencePairRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationFamily {
    Identity,
    Reverse,
    /// Target starts at source word `k mod J`.
    Rotate(usize),
    /// Consecutive blocks of this length swap pairwise; an unpaired tail block stays.
    BlockSwap(usize),
    /// Marked tokens move to the end; both groups keep their relative order.
    HeadFinal,
}

impl PermutationFamily {
    /// Target-order slot of every source word.
    pub fn positions(self, tokens: &[usize], is_marked: impl Fn(usize) -> bool) -> Vec<usize> {
        let n = tokens.len();
        // order[i] = source index placed at target slot i
        let order: Vec<usize> = match self {
            PermutationFamily::Identity => (0..n).collect(),
            PermutationFamily::Reverse => (0..n).rev().collect(),
            PermutationFamily::Rotate(k) => (0..n).map(|i| (i + k) % n.max(1)).collect(),
            PermutationFamily::BlockSwap(b) => {
                let b = b.max(1);
                let blocks: Vec<std::ops::Range<usize>> = (0..n).step_by(b).map(|s| s..(s + b).min(n)).collect();
                let mut order = Vec::with_capacity(n);
                for pair in blocks.chunks(2) {
                    for blk in pair.iter().rev() {
                        order.extend(blk.clone());
                    }
                }
                order
            }
            PermutationFamily::HeadFinal => {
                let (marked, rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| is_marked(tokens[j]));
                rest.into_iter().chain(marked).collect()
            }
        };
        let mut r = vec![0; n];
        for (slot, &j) in order.iter().enumerate() {
            r[j] = slot;
        }
        r
    }
}

impl fmt::Display for PermutationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermutationFamily::Identity => f.write_str("identity"),
            PermutationFamily::Reverse => f.write_str("reverse"),
            PermutationFamily::Rotate(k) => write!(f, "rotate:{k}"),
            PermutationFamily::BlockSwap(b) => write!(f, "blockswap:{b}"),
            PermutationFamily::HeadFinal => f.write_str("headfinal"),
        }
    }
}

impl FromStr for PermutationFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<usize> {
            a.and_then(|a| a.parse().ok())
                .ok_or_else(|| Error::Config(format!("permutation {s:?} needs a numeric argument")))
        };
        match name.to_ascii_lowercase().as_str() {
            "identity" => Ok(PermutationFamily::Identity),
            "reverse" => Ok(PermutationFamily::Reverse),
            "rotate" => Ok(PermutationFamily::Rotate(num(arg)?)),
            "blockswap" => match num(arg)? {
                0 => Err(Error::Config("block length must be positive".into())),
                b => Ok(PermutationFamily::BlockSwap(b)),
            },
            "headfinal" => Ok(PermutationFamily::HeadFinal),
            _ => Err(Error::Config(format!("unknown permutation family {s:?}"))),
        }
    }
}

/// Parses `a+b+…`, applied left to right.
pub fn parse_order(s: &str) -> Result<Vec<PermutationFamily>> {
    s.split('+').map(|p| p.trim().parse()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTaskSpec {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Composed left to right.
    pub order: Vec<PermutationFamily>,
    /// Source ids below this value are the ones `HeadFinal` moves.
    pub marked: usize,
    pub seed: u64,
}

impl SynthTaskSpec {
    /// Vocabulary 64, lengths 5–15, block swap of 3 followed by head-final.
    pub fn distant(seed: u64) -> Self {
        SynthTaskSpec {
            vocab: 64,
            min_len: 5,
            max_len: 15,
            order: vec![PermutationFamily::BlockSwap(3), PermutationFamily::HeadFinal],
            marked: 16,
            seed,
        }
    }

    pub fn similar(seed: u64) -> Self {
        SynthTaskSpec { order: vec![PermutationFamily::Identity], ..SynthTaskSpec::distant(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "synthetic task needs vocab > 0 and 1 ≤ min_len ≤ max_len (got {}, {}..{})",
                self.vocab, self.min_len, self.max_len
            )));
        }
        if self.order.is_empty() || self.marked > self.vocab {
            return Err(Error::Config("synthetic task needs a permutation and marked ≤ vocab".into()));
        }
        Ok(())
    }

    /// Composite target-order slots for one source sentence.
    pub fn positions(&self, tokens: &[usize]) -> PositionSequence {
        let mut r: Vec<usize> = (0..tokens.len()).collect();
        let mut current = tokens.to_vec();
        for fam in &self.order {
            let step = fam.positions(&current, |t| t < self.marked);
            let mut next = current.clone();
            for (j, &s) in step.iter().enumerate() {
                next[s] = current[j];
            }
            for x in r.iter_mut() {
                *x = step[*x];
            }
            current = next;
        }
        PositionSequence::new(r).expect("composition of permutations")
    }
}

pub fn source_token(id: usize) -> String {
    format!("s{id}")
}

pub fn target_token(id: usize) -> String {
    format!("t{id}")
}

/// Seeded bijection used as the "translation" of each source id.
pub fn substitution(spec: &SynthTaskSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let mut map: Vec<usize> = (0..spec.vocab).collect();
    map.shuffle(&mut rng);
    map
}

pub fn generate(spec: &SynthTaskSpec, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let subst = substitution(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab)).collect();
        let r = spec.positions(&src);
        let mut tgt = vec![0; len];
        for (j, &slot) in r.as_slice().iter().enumerate() {
            tgt[slot] = subst[src[j]];
        }
        let alignment = AlignmentSet::new(len, len, r.as_slice().iter().copied().enumerate())?;
        let rec = SentencePairRecord::new(
            src.into_iter().map(source_token).collect(),
            tgt.into_iter().map(target_token).collect(),
        )?
        .with_alignment(alignment)?;
        records.push(rec);
    }
    Ok(Corpus::new(records))
}

/// Seeded shuffle into train/valid/test by `ratios`.
pub fn split(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<[Corpus; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let valid = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    let bounds = [0, train, train + valid, n];
    let parts: Vec<Corpus> = (0..3)
        .map(|k| Corpus::new(idx[bounds[k]..bounds[k + 1]].iter().map(|&i| corpus.records[i].clone()).collect()))
        .collect();
    for (k, p) in parts.iter().enumerate() {
        if ratios[k] > 0.0 && p.is_empty() {
            return Err(Error::Invalid(format!("split {k} of a {n}-record corpus is empty")));
        }
    }
    let [a, b, c]: [Corpus; 3] = parts.try_into().expect("three parts");
    Ok([a, b, c])
}

/// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.align` under `dir`.
pub fn write_corpus(dir: &Path, prefix: &str, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_lines(&dir.join(format!("{prefix}.src")), &corpus.source_lines())?;
    write_lines(&dir.join(format!("{prefix}.tgt")), &corpus.target_lines())?;
    write_lines(&dir.join(format!("{prefix}.align")), &corpus.alignment_lines())?;
    Ok(())
}
