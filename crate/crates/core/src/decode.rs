//! Greedy and beam-search decoding.

use crate::autodiff::Tape;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, SourceBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending with `</s>` once finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }
    }

    /// Log-probability divided by the number of generated tokens.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the trailing `</s>`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&Vocab::EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn extend(&self, token: usize, lp: f64) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Hypothesis { tokens, log_prob: self.log_prob + lp, finished: token == Vocab::EOS_ID }
    }
}

/// Output budget (including `</s>`) for a source of `src_len` words.
pub fn default_max_len(model: &Model, src_len: usize) -> usize {
    model.config().max_len.min(2 * src_len + 10)
}

/// Encoder output rows for each sentence, evaluated without dropout.
fn encode_memory(model: &Model, srcs: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new(0);
    let params = model.bind(&tape);
    let batch = SourceBatch::new(srcs);
    let enc = model.encode(&params, &batch, &ForwardOptions::eval())?;
    let d = model.config().d_model;
    let all = enc.output.value();
    let mut out = Vec::with_capacity(srcs.len());
    let mut start = 0;
    for s in srcs {
        out.push(all[start * d..(start + s.len()) * d].to_vec());
        start += s.len();
    }
    Ok(out)
}

/// Next-token log-probabilities for each `(memory, prefix)` pair; `<pad>` and
/// `<s>` are excluded.
fn next_log_probs(model: &Model, memories: &[&[f64]], prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    let d = model.config().d_model;
    let tape = Tape::new(0);
    let params = model.bind(&tape);
    let src_lens: Vec<usize> = memories.iter().map(|m| m.len() / d).collect();
    let mem: Vec<f64> = memories.iter().flat_map(|m| m.iter().copied()).collect();
    let memory = tape.constant(mem.len() / d, d, mem)?;
    let mut ids = Vec::new();
    let mut lens = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        ids.push(Vocab::BOS_ID);
        ids.extend_from_slice(p);
        lens.push(p.len() + 1);
    }
    let logits = model.decode(&params, memory, &src_lens, &ids, &lens, &ForwardOptions::eval())?;
    let v = model.config().tgt_vocab;
    logits.with_value(|z| {
        let mut end = 0;
        Ok(lens
            .iter()
            .map(|&n| {
                end += n;
                let row = &z[(end - 1) * v..end * v];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                row.iter()
                    .enumerate()
                    .map(|(i, x)| match i {
                        Vocab::PAD_ID | Vocab::BOS_ID => f64::NEG_INFINITY,
                        _ => x - lse,
                    })
                    .collect()
            })
            .collect())
    })
}

/// Highest entry, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of many sentences in lock-step.
pub fn greedy_batch(model: &Model, srcs: &[&[usize]], max_len: Option<usize>) -> Result<Vec<Hypothesis>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let memories = encode_memory(model, srcs)?;
    let limits: Vec<usize> = srcs
        .iter()
        .map(|s| max_len.unwrap_or_else(|| default_max_len(model, s.len())).clamp(1, model.config().max_len))
        .collect();
    let mut hyps = vec![Hypothesis::start(); srcs.len()];
    loop {
        let active: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let mems: Vec<&[f64]> = active.iter().map(|&i| memories[i].as_slice()).collect();
        let prefixes: Vec<&[usize]> = active.iter().map(|&i| hyps[i].tokens.as_slice()).collect();
        let lps = next_log_probs(model, &mems, &prefixes)?;
        for (&i, lp) in active.iter().zip(lps) {
            let token = if hyps[i].tokens.len() + 1 >= limits[i] { Vocab::EOS_ID } else { argmax(&lp) };
            hyps[i] = hyps[i].extend(token, lp[token]);
        }
    }
    Ok(hyps)
}

pub fn greedy(model: &Model, src: &[usize], max_len: Option<usize>) -> Result<Hypothesis> {
    Ok(greedy_batch(model, &[src], max_len)?.remove(0))
}

/// Beam search with length-normalised final selection.
///
/// Candidates are ranked by accumulated log-probability, ties going to the
/// lower token id and then the earlier parent. A candidate ending in `</s>`
/// is moved to the finished pool; search stops once the pool holds
/// `beam_size` hypotheses or nothing is alive. The greedy path also enters
/// the final comparison, so a wider beam never scores below `beam_size = 1`.
pub fn beam_search(model: &Model, src: &[usize], beam_size: usize, max_len: Option<usize>) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    let limit = max_len.unwrap_or_else(|| default_max_len(model, src.len())).clamp(1, model.config().max_len);
    let memory = encode_memory(model, &[src])?.remove(0);
    let mut alive = vec![Hypothesis::start()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() && finished.len() < beam_size {
        let mems: Vec<&[f64]> = vec![memory.as_slice(); alive.len()];
        let prefixes: Vec<&[usize]> = alive.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = next_log_probs(model, &mems, &prefixes)?;
        let force_end = alive[0].tokens.len() + 1 >= limit;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (h, lp)) in alive.iter().zip(&lps).enumerate() {
            for (tok, &x) in lp.iter().enumerate() {
                if x == f64::NEG_INFINITY || (force_end && tok != Vocab::EOS_ID) {
                    continue;
                }
                candidates.push((h.log_prob + x, tok, parent));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (_, tok, parent) in candidates {
            if next.len() >= beam_size || finished.len() >= beam_size {
                break;
            }
            let h = alive[parent].extend(tok, lps[parent][tok]);
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score() > b.score()) {
            best = Some(h);
        }
    }
    if beam_size > 1 {
        let g = greedy(model, src, Some(limit))?;
        if best.as_ref().is_none_or(|b| g.score() > b.score()) {
            best = Some(g);
        }
    }
    best.ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

/// Decodes each source with `beam_size` (greedy in one batch when it is 1).
pub fn translate(model: &Model, srcs: &[&[usize]], beam_size: usize) -> Result<Vec<Hypothesis>> {
    if beam_size == 1 {
        return greedy_batch(model, srcs, None);
    }
    srcs.iter().map(|s| beam_search(model, s, beam_size, None)).collect()
}

/// Teacher-forced log-probability of `target` (which must end in `</s>`).
pub fn sequence_log_prob(model: &Model, src: &[usize], target: &[usize]) -> Result<f64> {
    let memory = encode_memory(model, &[src])?.remove(0);
    let mut total = 0.0;
    for t in 0..target.len() {
        let lp = next_log_probs(model, &[&memory], &[&target[..t]])?.remove(0);
        total += lp[target[t]];
    }
    Ok(total)
}
