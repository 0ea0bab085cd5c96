//! Parallel corpora, vocabularies and their plain-text file formats.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::align::{derive_reordered_positions, parse_alignment_line, reorder_tokens, AlignmentSet, PositionSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePairRecord {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub alignment: Option<AlignmentSet>,
    pub positions: Option<PositionSequence>,
}

impl SentencePairRecord {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Invalid("sentence pairs must have non-empty sides".into()));
        }
        Ok(SentencePairRecord { src, tgt, alignment: None, positions: None })
    }

    /// Attaches an alignment and the position sequence derived from it.
    pub fn with_alignment(mut self, alignment: AlignmentSet) -> Result<Self> {
        if alignment.src_len() != self.src.len() || alignment.tgt_len() != self.tgt.len() {
            return Err(Error::Invalid(format!(
                "alignment sized {}x{} for a {}x{} sentence pair",
                alignment.src_len(),
                alignment.tgt_len(),
                self.src.len(),
                self.tgt.len()
            )));
        }
        self.positions = Some(derive_reordered_positions(&alignment));
        self.alignment = Some(alignment);
        Ok(self)
    }

    /// Source side rewritten into target order; `None` without positions.
    pub fn reordered_source(&self) -> Option<Vec<String>> {
        let r = self.positions.as_ref()?;
        Some(reorder_tokens(&self.src, r).expect("positions derived from this record"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<SentencePairRecord>,
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

impl Corpus {
    pub fn new(records: Vec<SentencePairRecord>) -> Self {
        Corpus { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_lines(src: &str, tgt: &str) -> Result<Self> {
        let src: Vec<&str> = src.lines().collect();
        let tgt: Vec<&str> = tgt.lines().collect();
        if src.len() != tgt.len() {
            return Err(Error::CountMismatch { what: "source/target line counts", left: src.len(), right: tgt.len() });
        }
        let records = src
            .iter()
            .zip(&tgt)
            .enumerate()
            .map(|(i, (s, t))| {
                SentencePairRecord::new(tokenize(s), tokenize(t))
                    .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { records })
    }

    pub fn read(src: &Path, tgt: &Path) -> Result<Self> {
        Corpus::from_lines(&fs::read_to_string(src)?, &fs::read_to_string(tgt)?)
    }

    pub fn source_lines(&self) -> Vec<String> {
        self.records.iter().map(|r| r.src.join(" ")).collect()
    }

    pub fn target_lines(&self) -> Vec<String> {
        self.records.iter().map(|r| r.tgt.join(" ")).collect()
    }

    pub fn alignment_lines(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.alignment.as_ref().map(ToString::to_string).unwrap_or_default())
            .collect()
    }

    /// Position sequences, one per record, if every record has one.
    pub fn positions(&self) -> Option<Vec<&PositionSequence>> {
        self.records.iter().map(|r| r.positions.as_ref()).collect()
    }

    pub fn has_positions(&self) -> bool {
        self.records.iter().all(|r| r.positions.is_some())
    }

    /// Corpus whose source sides are already in target order (positions become identity).
    pub fn with_reordered_sources(&self) -> Result<Corpus> {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let src = r
                    .reordered_source()
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: "record has no position sequence".into() })?;
                let n = src.len();
                Ok(SentencePairRecord { src, tgt: r.tgt.clone(), alignment: None, positions: Some(PositionSequence::identity(n)) })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { records })
    }
}

/// Parses one alignment line per record and attaches the derived positions.
pub fn reorder_corpus(corpus: &Corpus, alignment_text: &str) -> Result<Corpus> {
    let lines: Vec<&str> = alignment_text.lines().collect();
    if lines.len() != corpus.len() {
        return Err(Error::CountMismatch { what: "corpus/alignment line counts", left: corpus.len(), right: lines.len() });
    }
    let records = corpus
        .records
        .iter()
        .zip(lines)
        .enumerate()
        .map(|(i, (rec, line))| {
            let a = parse_alignment_line(line, rec.src.len(), rec.tgt.len(), i + 1)?;
            rec.clone().with_alignment(a)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { records })
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{}", l.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_positions(path: &Path, positions: &[&PositionSequence]) -> Result<()> {
    let lines: Vec<String> = positions.iter().map(ToString::to_string).collect();
    write_lines(path, &lines)
}

pub fn parse_positions(text: &str) -> Result<Vec<PositionSequence>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let v = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| bad(format!("not an integer: {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            PositionSequence::new(v).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

/// Attaches a positions file (one sequence per record) to a corpus.
pub fn attach_positions(corpus: &mut Corpus, positions: Vec<PositionSequence>) -> Result<()> {
    if positions.len() != corpus.len() {
        return Err(Error::CountMismatch { what: "corpus/positions line counts", left: corpus.len(), right: positions.len() });
    }
    for (i, (rec, r)) in corpus.records.iter_mut().zip(positions).enumerate() {
        if r.len() != rec.src.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{} positions for a {}-word source", r.len(), rec.src.len()),
            });
        }
        rec.positions = Some(r);
    }
    Ok(())
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Token ↔ id map with four reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    /// Builds a vocabulary ordered by descending frequency, then lexicographically.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.as_ref() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocab::from_tokens(words.into_iter().map(|(w, _)| w.to_owned()))
    }

    /// Reserved tokens are prepended; duplicates of them in `tokens` are skipped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Vocab { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Drops reserved ids and stops at the first end-of-sentence.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != Self::EOS_ID)
            .filter(|&&i| i > Self::EOS_ID)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }
}
