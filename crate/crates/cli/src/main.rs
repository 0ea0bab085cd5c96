//! `reorder-nmt`: preprocess, synthesise, train, translate, score, analyse and sweep.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use reorder_core::checkpoint::{load_model, Checkpoint};
use reorder_core::corpus::{reorder_corpus, write_lines, write_positions};
use reorder_core::decode::translate;
use reorder_core::eval::{corpus_bleu_lines, sim_metric, SimSource};
use reorder_core::experiment::{run, sweep_lambda, Prepared, SweepRow, LAMBDA_GRID};
use reorder_core::synth::{generate, parse_order, split, write_corpus, SynthTaskSpec};
use reorder_core::train::{Dataset, TrainOutputs};
use reorder_core::{Corpus, RunConfig};

#[derive(Parser)]
#[command(name = "reorder-nmt", version, about = "Transformer NMT with explicit reordering embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Derive target-order positions from alignments and rewrite the source
    Preprocess {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        align: PathBuf,
    },
    /// Generate a synthetic word-order task with exact alignments
    Synth {
        #[arg(long, default_value_t = 20000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 15)]
        max_len: usize,
        /// Permutations applied left to right, e.g. `blockswap:3+headfinal`
        #[arg(long, default_value = "blockswap:3+headfinal")]
        order: String,
        /// Source ids below this are moved by `headfinal`
        #[arg(long, default_value_t = 16)]
        marked: usize,
        /// train,valid,test fractions
        #[arg(long, default_value = "0.9,0.05,0.05")]
        split: String,
    },
    /// Train a model; writes checkpoints, `metrics.tsv` and `config.txt`
    Train(DataArgs),
    /// Translate a tokenised source file
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5, conflicts_with = "greedy")]
        beam: usize,
        #[arg(long)]
        greedy: bool,
    },
    /// Corpus BLEU of a hypothesis file against a reference file
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Similarity of predicted and plain positions to the target-order sinusoids
    Sim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        align: PathBuf,
    },
    /// Train one model per λ and tabulate test BLEU and similarity
    SweepLambda {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated λ values
        #[arg(long)]
        values: Option<String>,
        /// Run the trainings concurrently
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Prefix of `<prefix>.src`, `<prefix>.tgt` and optional `<prefix>.align`
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Feed sources already rewritten into target order
    #[arg(long)]
    reordered: bool,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn data(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Outcome<T> {
        self.map_err(|e| Failure::Data(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn resolve_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())).data()?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.into()))?;
    }
    if let Some(s) = common.seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Outcome<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    Ok(dir)
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_to_string(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).data()
}

/// Reads `<prefix>.src/.tgt` and, when present, `<prefix>.align`.
fn load_corpus(prefix: &Path, reordered: bool) -> Outcome<Corpus> {
    let (src, tgt) = (with_ext(prefix, "src"), with_ext(prefix, "tgt"));
    let mut corpus = Corpus::from_lines(&read_to_string(&src)?, &read_to_string(&tgt)?)
        .with_context(|| format!("loading {}", prefix.display()))
        .data()?;
    let align = with_ext(prefix, "align");
    if align.exists() {
        corpus = reorder_corpus(&corpus, &read_to_string(&align)?)
            .with_context(|| format!("parsing {}", align.display()))
            .data()?;
    }
    if reordered {
        corpus = corpus
            .with_reordered_sources()
            .with_context(|| format!("--reordered needs {}", align.display()))
            .data()?;
    }
    Ok(corpus)
}

fn load_data(args: &DataArgs) -> Outcome<Prepared> {
    let train = load_corpus(&args.train, args.reordered)?;
    let valid = args.valid.as_deref().map(|p| load_corpus(p, args.reordered)).transpose()?;
    let test = args.test.as_deref().map(|p| load_corpus(p, args.reordered)).transpose()?;
    Prepared::new(&train, valid.as_ref(), test.as_ref()).data()
}

fn tokenized_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split_whitespace().map(str::to_owned).collect()).collect()
}

fn cmd_preprocess(common: &Common, src: &Path, tgt: &Path, align: &Path) -> Outcome<()> {
    let corpus = Corpus::read(src, tgt).with_context(|| format!("reading {} / {}", src.display(), tgt.display())).data()?;
    let corpus = reorder_corpus(&corpus, &read_to_string(align)?)
        .with_context(|| format!("alignment file {}", align.display()))
        .data()?;
    let dir = out_dir(common)?;
    let reordered = corpus.with_reordered_sources().runtime()?;
    let positions = corpus.positions().expect("every record was aligned");
    write_lines(&dir.join("reordered.src"), &reordered.source_lines()).runtime()?;
    write_positions(&dir.join("positions.txt"), &positions).runtime()?;

    const BINS: usize = 10;
    let mut hist = [0usize; BINS];
    let mut sum = 0.0;
    for r in &positions {
        let t = r.kendall_tau_distance();
        sum += t;
        hist[((t * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let mut report = String::new();
    report.push_str(&format!("sentences\t{}\n", positions.len()));
    report.push_str(&format!("mean_kendall_tau\t{:.4}\n", sum / positions.len().max(1) as f64));
    report.push_str(&format!("identity\t{}\n", positions.iter().filter(|r| r.is_identity()).count()));
    for (b, n) in hist.iter().enumerate() {
        let hi = if b + 1 == BINS { "]" } else { ")" };
        report.push_str(&format!("tau[{:.1},{:.1}{hi}\t{n}\n", b as f64 / BINS as f64, (b + 1) as f64 / BINS as f64));
    }
    fs::write(dir.join("stats.txt"), &report).runtime()?;
    print!("{report}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    common: &Common,
    count: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    order: &str,
    marked: usize,
    ratios: &str,
) -> Outcome<()> {
    let cfg = resolve_config(common)?;
    let order = parse_order(order).map_err(|e| Failure::Usage(e.into()))?;
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(anyhow!("--split expects three comma-separated numbers")))?;
    let ratios: [f64; 3] = parts.try_into().map_err(|_| Failure::Usage(anyhow!("--split expects three values")))?;
    let spec = SynthTaskSpec { vocab, min_len, max_len, order, marked, seed: cfg.model.seed };
    let corpus = generate(&spec, count).map_err(|e| Failure::Usage(e.into()))?;
    let [train, valid, test] = split(&corpus, ratios, cfg.model.seed).map_err(|e| Failure::Usage(e.into()))?;
    let dir = out_dir(common)?;
    for (name, c) in [("train", &train), ("valid", &valid), ("test", &test)] {
        write_corpus(&dir, name, c).runtime()?;
        println!("{name}\t{}", c.len());
    }
    Ok(())
}

fn cmd_train(common: &Common, args: &DataArgs) -> Outcome<()> {
    let cfg = resolve_config(common)?;
    cfg.train.validate().data()?;
    let data = load_data(args)?;
    let resolved = data.resolve(&cfg);
    resolved.model.validate().with_context(|| "invalid model configuration").data()?;
    let dir = out_dir(common)?;
    fs::write(dir.join("config.txt"), resolved.to_text()).runtime()?;
    eprint!("{}", resolved.to_text());
    let mut log = fs::File::create(dir.join("metrics.tsv")).runtime()?;
    let (model, report) = run(&resolved, &data, TrainOutputs { dir: Some(&dir), log: Some(&mut log) }).runtime()?;
    let final_path = dir.join("model.bin");
    Checkpoint::from_model(&model, report.steps, &data.src_vocab, &data.tgt_vocab)
        .save(&final_path)
        .runtime()?;
    if let Some(last) = report.metrics.last() {
        eprintln!("{}\n{last}", reorder_core::train::MetricsRow::HEADER);
    }
    println!("{}", final_path.display());
    Ok(())
}

fn cmd_translate(model: &Path, input: &Path, beam: usize, greedy: bool) -> Outcome<()> {
    let (model, ck) = load_model(model).with_context(|| format!("loading {}", model.display())).data()?;
    let lines = tokenized_lines(&read_to_string(input)?);
    let ids: Vec<Vec<usize>> = lines.iter().map(|l| ck.src_vocab.encode(l)).collect();
    if let Some(i) = ids.iter().position(Vec::is_empty) {
        return Err(Failure::Data(anyhow!("line {} of {} is empty", i + 1, input.display())));
    }
    let srcs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let beam = if greedy { 1 } else { beam };
    if beam == 0 {
        return Err(Failure::Usage(anyhow!("--beam must be at least 1")));
    }
    let hyps = translate(&model, &srcs, beam).runtime()?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for h in hyps {
        writeln!(out, "{}", ck.tgt_vocab.decode(&h.tokens).join(" ")).runtime()?;
    }
    Ok(())
}

fn cmd_score(hyp: &Path, reference: &Path) -> Outcome<()> {
    let h: Vec<String> = read_to_string(hyp)?.lines().map(str::to_owned).collect();
    let r: Vec<String> = read_to_string(reference)?.lines().map(str::to_owned).collect();
    let bleu = corpus_bleu_lines(&h, &r).data()?;
    println!("{bleu:.2}");
    Ok(())
}

fn cmd_sim(model: &Path, src: &Path, tgt: &Path, align: &Path) -> Outcome<()> {
    let (model, ck) = load_model(model).with_context(|| format!("loading {}", model.display())).data()?;
    let corpus = Corpus::read(src, tgt).data()?;
    let corpus = reorder_corpus(&corpus, &read_to_string(align)?).data()?;
    let data = Dataset::encode(&corpus, &ck.src_vocab, &ck.tgt_vocab);
    let pr = sim_metric(&model, &data, SimSource::Predicted).data()?;
    let pe = sim_metric(&model, &data, SimSource::Plain).data()?;
    println!("pr_vs_re\t{pr:.4}\npe_vs_re\t{pe:.4}");
    Ok(())
}

fn cmd_sweep(common: &Common, args: &DataArgs, values: Option<&str>, parallel: bool) -> Outcome<()> {
    let cfg = resolve_config(common)?;
    let values: Vec<f64> = match values {
        Some(v) => v
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Failure::Usage(anyhow!("--values expects comma-separated numbers")))?,
        None => LAMBDA_GRID.to_vec(),
    };
    if !cfg.model.variant.reorders() {
        return Err(Failure::Data(anyhow!("sweep-lambda needs variant = exgre or refsr")));
    }
    if args.test.is_none() {
        return Err(Failure::Usage(anyhow!("sweep-lambda needs --test")));
    }
    let data = load_data(args)?;
    let dir = out_dir(common)?;
    fs::write(dir.join("config.txt"), data.resolve(&cfg).to_text()).runtime()?;
    let table = dir.join("sweep.tsv");
    fs::write(&table, format!("{}\n", SweepRow::HEADER)).runtime()?;
    println!("{}", SweepRow::HEADER);
    sweep_lambda(&cfg, &data, &values, parallel, |row, _| {
        let mut f = fs::OpenOptions::new().append(true).open(&table)?;
        writeln!(f, "{row}")?;
        println!("{row}");
        Ok(())
    })
    .with_context(|| format!("sweep aborted; completed rows are in {}", table.display()))
    .runtime()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Preprocess { src, tgt, align } => cmd_preprocess(c, src, tgt, align),
        Command::Synth { count, vocab, min_len, max_len, order, marked, split } => {
            cmd_synth(c, *count, *vocab, *min_len, *max_len, order, *marked, split)
        }
        Command::Train(args) => cmd_train(c, args),
        Command::Translate { model, input, beam, greedy } => cmd_translate(model, input, *beam, *greedy),
        Command::Score { hyp, reference } => cmd_score(hyp, reference),
        Command::Sim { model, src, tgt, align } => cmd_sim(model, src, tgt, align),
        Command::SweepLambda { data, values, parallel } => cmd_sweep(c, data, values.as_deref(), *parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
