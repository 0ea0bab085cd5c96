//! End-to-end runs shared by the command-line tool and the test suites:
//! vocabulary building, training from a resolved config, test-set scoring
//! and the λ sweep.

use std::fmt;

use crate::config::RunConfig;
use crate::corpus::{Corpus, Vocab};
use crate::decode::translate;
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, sim_metric, token_accuracy, SimSource};
use crate::model::Model;
use crate::train::{train, Dataset, TrainOutputs, TrainReport};

/// λ values of the sweep.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Train/valid/test sets encoded with vocabularies built from the training side.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Prepared {
    pub fn new(train: &Corpus, valid: Option<&Corpus>, test: Option<&Corpus>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Invalid("empty training corpus".into()));
        }
        let src_vocab = Vocab::build(train.records.iter().map(|r| r.src.as_slice()));
        let tgt_vocab = Vocab::build(train.records.iter().map(|r| r.tgt.as_slice()));
        let enc = |c: &Corpus| Dataset::encode(c, &src_vocab, &tgt_vocab);
        Ok(Prepared {
            train: enc(train),
            valid: valid.map(enc),
            test: test.map(enc),
            src_vocab,
            tgt_vocab,
        })
    }

    /// `config` with vocabulary sizes taken from the data.
    pub fn resolve(&self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        c.model.src_vocab = self.src_vocab.len();
        c.model.tgt_vocab = self.tgt_vocab.len();
        c
    }
}

/// Builds and trains a model for the resolved `config`.
pub fn run(config: &RunConfig, data: &Prepared, outputs: TrainOutputs<'_>) -> Result<(Model, TrainReport)> {
    let config = data.resolve(config);
    let mut model = Model::new(config.model.clone())?;
    let report = train(
        &mut model,
        &data.train,
        data.valid.as_ref(),
        (&data.src_vocab, &data.tgt_vocab),
        &config.train,
        outputs,
    )?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub bleu: f64,
    pub token_accuracy: f64,
    /// `PR^N` against the target-order sinusoids (reordering variants only).
    pub sim: Option<f64>,
    /// Plain source-order sinusoids against the same rows.
    pub plain_sim: Option<f64>,
    pub hypotheses: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Model, data: &Dataset, beam: usize) -> Result<Evaluation> {
    let srcs: Vec<&[usize]> = data.pairs.iter().map(|p| p.src.as_slice()).collect();
    let hyps: Vec<Vec<usize>> = translate(model, &srcs, beam)?.into_iter().map(|h| h.content().to_vec()).collect();
    let refs: Vec<Vec<usize>> = data.pairs.iter().map(|p| p.tgt.clone()).collect();
    let with_positions = data.has_positions();
    Ok(Evaluation {
        bleu: corpus_bleu(&hyps, &refs)?,
        token_accuracy: token_accuracy(&hyps, &refs)?,
        sim: if with_positions && model.config().variant.reorders() {
            Some(sim_metric(model, data, SimSource::Predicted)?)
        } else {
            None
        },
        plain_sim: if with_positions { Some(sim_metric(model, data, SimSource::Plain)?) } else { None },
        hypotheses: hyps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub bleu: f64,
    pub sim: Option<f64>,
}

impl SweepRow {
    pub const HEADER: &'static str = "lambda\tbleu\tsim";
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sim = self.sim.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
        write!(f, "{:.1}\t{:.2}\t{}", self.lambda, self.bleu, sim)
    }
}

/// One training per λ with the config's seed and step budget. Rows reach
/// `on_row` in λ order as soon as they exist, so a later failure keeps them.
/// With `parallel`, the trainings run on separate threads.
pub fn sweep_lambda(
    config: &RunConfig,
    data: &Prepared,
    values: &[f64],
    parallel: bool,
    mut on_row: impl FnMut(&SweepRow, &Model) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if !config.model.variant.reorders() {
        return Err(Error::Config("the λ sweep needs the exgre or refsr variant".into()));
    }
    let test = data.test.as_ref().ok_or_else(|| Error::Invalid("the λ sweep needs a test set".into()))?;
    let one = |lambda: f64| -> Result<(SweepRow, Model)> {
        let mut c = config.clone();
        c.model.lambda = lambda;
        let (model, _) = run(&c, data, TrainOutputs::default())?;
        let ev = evaluate(&model, test, c.train.beam)?;
        Ok((SweepRow { lambda, bleu: ev.bleu, sim: ev.sim }, model))
    };
    let mut rows = Vec::with_capacity(values.len());
    if !parallel {
        for &lambda in values {
            let (row, model) = one(lambda)?;
            on_row(&row, &model)?;
            rows.push(row);
        }
        return Ok(rows);
    }
    let results: Vec<Result<(SweepRow, Model)>> = std::thread::scope(|s| {
        let handles: Vec<_> = values.iter().map(|&l| s.spawn(move || one(l))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invalid("sweep worker panicked".into()))))
            .collect()
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok((row, model)) => {
                on_row(&row, &model)?;
                rows.push(row);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}
