//! Joint objective, warmup schedule and the training loop.
//!
//! The minimised loss is `NLL_smoothed − λ · Σ_j cos(pr_j^N, re_j) / sentences`,
//! where `re_j` is the sinusoid row at the word's target-order slot.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{supervised_position_embeddings_from, PositionSequence};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::TrainConfig;
use crate::corpus::{Corpus, Vocab};
use crate::decode::greedy_batch;
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, sim_metric, SimSource};
use crate::model::{ForwardOptions, Model, SourceBatch, Variant};
use crate::optim::{AdamConfig, AdamState};
use crate::positional::PositionalTable;

/// One sentence pair as vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub positions: Option<PositionSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<EncodedPair>,
}

impl Dataset {
    pub fn encode(corpus: &Corpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Self {
        let pairs = corpus
            .records
            .iter()
            .map(|r| EncodedPair {
                src: src_vocab.encode(&r.src),
                tgt: tgt_vocab.encode(&r.tgt),
                positions: r.positions.clone(),
            })
            .collect();
        Dataset { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_positions(&self) -> bool {
        self.pairs.iter().all(|p| p.positions.is_some())
    }

    pub fn head(&self, n: usize) -> Dataset {
        Dataset { pairs: self.pairs.iter().take(n).cloned().collect() }
    }
}

/// Packed batch: decoder inputs are `<s> y`, outputs `y </s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub src: SourceBatch,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub positions: Option<Vec<PositionSequence>>,
}

impl TrainingBatch {
    pub fn new(pairs: &[&EncodedPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let mut tgt_in = Vec::new();
        let mut tgt_out = Vec::new();
        let mut tgt_lens = Vec::with_capacity(pairs.len());
        for p in pairs {
            tgt_in.push(Vocab::BOS_ID);
            tgt_in.extend_from_slice(&p.tgt);
            tgt_out.extend_from_slice(&p.tgt);
            tgt_out.push(Vocab::EOS_ID);
            tgt_lens.push(p.tgt.len() + 1);
        }
        let positions = pairs.iter().map(|p| p.positions.clone()).collect::<Option<Vec<_>>>();
        if let Some(ps) = &positions {
            if let Some((p, _)) = pairs.iter().zip(ps).find(|(p, r)| p.src.len() != r.len()) {
                return Err(Error::Invalid(format!(
                    "position sequence length differs from a {}-word source",
                    p.src.len()
                )));
            }
        }
        Ok(TrainingBatch { src: SourceBatch::new(&srcs), tgt_in, tgt_out, tgt_lens, positions })
    }

    pub fn sentences(&self) -> usize {
        self.src.lens.len()
    }

    /// `true` at real tokens of the right-padded `[sentences × longest]` source grid.
    pub fn source_mask(&self) -> Vec<Vec<bool>> {
        let longest = self.src.lens.iter().copied().max().unwrap_or(0);
        self.src.lens.iter().map(|&n| (0..longest).map(|i| i < n).collect()).collect()
    }

    /// Supervised embeddings `RE` for every packed source row.
    pub fn supervised_embeddings(&self, table: &PositionalTable) -> Result<Option<Vec<f64>>> {
        let Some(ps) = &self.positions else { return Ok(None) };
        let mut out = Vec::with_capacity(self.src.ids.len() * table.d_model());
        for r in ps {
            out.extend(supervised_position_embeddings_from(r, table)?);
        }
        Ok(Some(out))
    }
}

/// Label-smoothed token-level cross entropy, averaged over target tokens.
pub fn nll_label_smoothed<'t>(logits: Var<'t>, targets: &[usize], smoothing: f64) -> Result<Var<'t>> {
    logits.smoothed_cross_entropy(targets, smoothing)
}

/// `Σ_j cos(pr_j, re_j) / sentences`; zero-norm rows contribute 0.
pub fn reordering_loss<'t>(reorder_embedding: Var<'t>, supervised: &[f64], sentences: usize) -> Result<Var<'t>> {
    if sentences == 0 {
        return Err(Error::Invalid("reordering loss over zero sentences".into()));
    }
    Ok(reorder_embedding.cosine_row_sum(supervised)?.scale(1.0 / sentences as f64))
}

/// Loss terms of one forward pass.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub nll: Var<'t>,
    /// Similarity term (before λ); present whenever the model reorders and the batch has positions.
    pub similarity: Option<Var<'t>>,
}

/// `nll − λ · similarity`. With `λ = 0` the similarity is recorded but left
/// out of the differentiated graph.
pub fn total_loss<'t>(
    model: &Model,
    params: &[Var<'t>],
    batch: &TrainingBatch,
    smoothing: f64,
    opts: &ForwardOptions,
) -> Result<LossParts<'t>> {
    let cfg = model.config();
    if cfg.lambda > 0.0 && cfg.variant == Variant::Baseline {
        return Err(Error::Config("lambda > 0 needs the exgre or refsr variant".into()));
    }
    if cfg.lambda > 0.0 && batch.positions.is_none() {
        return Err(Error::Invalid("lambda > 0 needs a position sequence for every sentence".into()));
    }
    let enc = model.encode(params, &batch.src, opts)?;
    let logits = model.decode(params, enc.output, &batch.src.lens, &batch.tgt_in, &batch.tgt_lens, opts)?;
    let nll = nll_label_smoothed(logits, &batch.tgt_out, smoothing)?;
    let similarity = match (enc.final_reorder_embedding(), batch.supervised_embeddings(model.table())?) {
        (Some(pr), Some(re)) => Some(reordering_loss(pr, &re, batch.sentences())?),
        _ => None,
    };
    let total = match similarity {
        Some(sim) if cfg.lambda > 0.0 => nll.add(sim.scale(-cfg.lambda))?,
        _ => nll,
    };
    Ok(LossParts { total, nll, similarity })
}

/// Warmup schedule `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub d_model: usize,
    pub warmup: u64,
    pub scale: f64,
}

impl Schedule {
    pub fn new(d_model: usize, warmup: u64) -> Self {
        Schedule { d_model, warmup, scale: 1.0 }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Invalid("learning-rate schedule is defined from step 1".into()));
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub nll: f64,
    pub reorder_sim: Option<f64>,
    pub valid_bleu: Option<f64>,
    pub valid_sim: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step\tlr\tnll\treorder_sim\tvalid_bleu\tvalid_sim";
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.8}\t{:.6}\t{}\t{}\t{}",
            self.step,
            self.lr,
            self.nll,
            opt(self.reorder_sim),
            opt(self.valid_bleu),
            opt(self.valid_sim)
        )
    }
}

pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Most recent snapshots, oldest first.
    pub checkpoints: Vec<Checkpoint>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub steps: u64,
}

/// Where training writes checkpoints and the metrics log.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

/// Greedy BLEU and, for reordering models, similarity on a validation set.
pub fn validate(model: &Model, valid: &Dataset) -> Result<(f64, Option<f64>)> {
    let srcs: Vec<&[usize]> = valid.pairs.iter().map(|p| p.src.as_slice()).collect();
    let hyps = greedy_batch(model, &srcs, None)?;
    let hyps: Vec<Vec<usize>> = hyps.into_iter().map(|h| h.content().to_vec()).collect();
    let refs: Vec<Vec<usize>> = valid.pairs.iter().map(|p| p.tgt.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let sim = if model.config().variant.reorders() && valid.has_positions() {
        Some(sim_metric(model, valid, SimSource::Predicted)?)
    } else {
        None
    };
    Ok((bleu, sim))
}

/// Runs `config.steps` optimisation steps on `model`.
///
/// When `average_checkpoints` is set, the returned model parameters are the
/// mean of the last `keep_checkpoints` snapshots.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    valid: Option<&Dataset>,
    vocabs: (&Vocab, &Vocab),
    config: &TrainConfig,
    mut outputs: TrainOutputs<'_>,
) -> Result<TrainReport> {
    config.validate()?;
    model.config().validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if model.config().lambda > 0.0 && !data.has_positions() {
        return Err(Error::Invalid("lambda > 0 needs a position sequence for every training sentence".into()));
    }
    let seed = model.config().seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    let schedule = Schedule { d_model: model.config().d_model, warmup: config.warmup, scale: config.lr_scale };
    let valid = valid.map(|v| v.head(config.valid_sentences));
    let mut report = TrainReport { metrics: Vec::new(), checkpoints: Vec::new(), checkpoint_paths: Vec::new(), steps: 0 };
    if let Some(log) = outputs.log.as_deref_mut() {
        writeln!(log, "{}", MetricsRow::HEADER)?;
    }
    let (mut nll_acc, mut sim_acc, mut n_acc, mut sim_n) = (0.0, 0.0, 0usize, 0usize);
    for step in 1..=config.steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let pairs: Vec<&EncodedPair> = order[cursor..end].iter().map(|&i| &data.pairs[i]).collect();
        cursor = end;
        let batch = TrainingBatch::new(&pairs)?;
        let lr = schedule.lr_at(step)?;
        {
            let tape = Tape::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(step));
            let params = model.bind(&tape);
            let opts = ForwardOptions::train(model.config());
            let loss = total_loss(model, &params, &batch, config.label_smoothing, &opts)?;
            nll_acc += loss.nll.scalar();
            n_acc += 1;
            if let Some(s) = loss.similarity {
                sim_acc += s.scalar();
                sim_n += 1;
            }
            let grads = tape.backward(loss.total)?;
            model.params_mut().zero_grads();
            grads.accumulate_into(model.params_mut());
        }
        adam.step(model.params_mut(), lr);
        report.steps = step;

        if step % config.checkpoint_every == 0 || step == config.steps {
            let ck = Checkpoint::from_model(model, step, vocabs.0, vocabs.1);
            if let Some(dir) = outputs.dir {
                let path = dir.join(format!("checkpoint_{step:07}.bin"));
                ck.save(&path)?;
                report.checkpoint_paths.push(path);
            }
            if report.checkpoints.last().is_none_or(|c| c.step != step) {
                report.checkpoints.push(ck);
            }
            if report.checkpoints.len() > config.keep_checkpoints {
                report.checkpoints.remove(0);
            }
        }
        if step % config.log_every == 0 || step == config.steps {
            let (valid_bleu, valid_sim) = match &valid {
                Some(v) if !v.is_empty() => {
                    let (b, s) = validate(model, v)?;
                    (Some(b), s)
                }
                _ => (None, None),
            };
            let row = MetricsRow {
                step,
                lr,
                nll: nll_acc / n_acc as f64,
                reorder_sim: (sim_n > 0).then(|| sim_acc / sim_n as f64),
                valid_bleu,
                valid_sim,
            };
            if let Some(log) = outputs.log.as_deref_mut() {
                writeln!(log, "{row}")?;
                log.flush()?;
            }
            report.metrics.push(row);
            (nll_acc, sim_acc, n_acc, sim_n) = (0.0, 0.0, 0, 0);
        }
    }
    model.params_mut().zero_grads();
    if config.average_checkpoints && report.checkpoints.len() > 1 {
        let avg = average_checkpoints(&report.checkpoints)?;
        model.params_mut().copy_values_from(&avg.params)?;
        if let Some(dir) = outputs.dir {
            avg.save(&dir.join("checkpoint_averaged.bin"))?;
        }
    }
    Ok(report)
}
